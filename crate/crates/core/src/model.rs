//! Embedding, a stack of SRU / projected SRU / SRU++ layers and an output
//! head, with parameters kept in one ordered, named store.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attn_block_on, projection_on, AttentionMemory, AttentionOptions, AttentionVars,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Where the attention path is used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnSchedule {
    /// Layers `k, 2k, ...`; `k = 0` disables attention.
    EveryK(usize),
    /// Explicit 1-based layer indices.
    Layers(Vec<usize>),
}

impl AttnSchedule {
    pub fn none() -> Self {
        AttnSchedule::Layers(Vec::new())
    }

    pub fn has_attention(&self, layer: usize) -> bool {
        match self {
            AttnSchedule::EveryK(0) => false,
            AttnSchedule::EveryK(k) => layer.is_multiple_of(*k),
            AttnSchedule::Layers(list) => list.contains(&layer),
        }
    }

    /// 1-based attention layers among `1..=n_layers`.
    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        (1..=n_layers).filter(|&l| self.has_attention(l)).collect()
    }
}

impl fmt::Display for AttnSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnSchedule::EveryK(k) => write!(f, "every:{k}"),
            AttnSchedule::Layers(list) if list.is_empty() => write!(f, "none"),
            AttnSchedule::Layers(list) => {
                let parts: Vec<String> = list.iter().map(|l| l.to_string()).collect();
                write!(f, "layers:{}", parts.join(","))
            }
        }
    }
}

impl std::str::FromStr for AttnSchedule {
    type Err = Error;

    /// Accepts `none`, `every:K`, a bare `K`, or `layers:1,5,...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("bad attention schedule '{s}'"));
        if s == "none" {
            return Ok(AttnSchedule::none());
        }
        if let Some(list) = s.strip_prefix("layers:") {
            let layers = list
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            return Ok(AttnSchedule::Layers(layers));
        }
        let k = s.strip_prefix("every:").unwrap_or(s);
        k.parse::<usize>()
            .map(AttnSchedule::EveryK)
            .map_err(|_| bad())
    }
}

/// Input transform of a layer that does not use attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerVariant {
    /// `U = W X`, `W` is `3d x d`.
    Plain,
    /// `U = W_o W_q X` through the `d'` bottleneck.
    Projection,
}

impl fmt::Display for LayerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerVariant::Plain => "plain",
            LayerVariant::Projection => "projection",
        })
    }
}

impl std::str::FromStr for LayerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "plain" => Ok(LayerVariant::Plain),
            "projection" => Ok(LayerVariant::Projection),
            other => Err(Error::Config(format!("unknown layer variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d: usize,
    pub d_attn: usize,
    pub schedule: AttnSchedule,
    pub variant: LayerVariant,
    pub dropout: f64,
    pub layer_norm: bool,
    pub pre_norm: bool,
    pub max_mem: usize,
    pub tie_embeddings: bool,
    /// Separate `d' x d'` query map after the shared down-projection.
    pub independent_qkv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            n_layers: 10,
            d: 3072,
            d_attn: 768,
            schedule: AttnSchedule::EveryK(1),
            variant: LayerVariant::Projection,
            dropout: 0.0,
            layer_norm: true,
            pre_norm: false,
            max_mem: 512,
            tie_embeddings: false,
            independent_qkv: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.n_layers == 0 || self.d == 0 || self.d_attn == 0 {
            return fail("vocab_size, n_layers, d and d_attn must be positive".into());
        }
        if self.d_attn > self.d {
            return fail(format!(
                "d_attn ({}) must not exceed d ({})",
                self.d_attn, self.d
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let AttnSchedule::Layers(list) = &self.schedule {
            if let Some(&bad) = list.iter().find(|&&l| l == 0 || l > self.n_layers) {
                return fail(format!(
                    "attention layer {bad} outside 1..={}",
                    self.n_layers
                ));
            }
        }
        Ok(())
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            layer_norm: self.layer_norm,
            pre_norm: self.pre_norm,
            dropout: self.dropout,
            max_mem: self.max_mem,
        }
    }
}

/// Exact number of learnable scalars the model built from `cfg` holds.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (v, d, dp) = (cfg.vocab_size, cfg.d, cfg.d_attn);
    let mut n = v * d;
    for layer in 1..=cfg.n_layers {
        n += 4 * d;
        n += if cfg.schedule.has_attention(layer) {
            let inner = if cfg.independent_qkv { dp * dp } else { 0 };
            let ln = if cfg.layer_norm { 2 * dp } else { 0 };
            dp * d + inner + 2 * dp * dp + 3 * d * dp + 1 + ln
        } else {
            match cfg.variant {
                LayerVariant::Plain => 3 * d * d,
                LayerVariant::Projection => dp * d + 3 * d * dp,
            }
        };
    }
    if !cfg.tie_embeddings {
        n += v * d;
    }
    n + v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Element> Param<E> {
    /// Matrices get weight decay; vectors and scalars do not.
    pub fn decays(&self) -> bool {
        self.value.rank() >= 2
    }
}

#[derive(Clone, Debug)]
enum InputPath {
    Plain { w: usize },
    Projection { w_q: usize, w_o: usize },
    Attention(AttnIdx),
}

#[derive(Clone, Debug)]
struct AttnIdx {
    w_q: usize,
    w_q_inner: Option<usize>,
    w_k: usize,
    w_v: usize,
    w_o: usize,
    alpha: usize,
    ln: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    path: InputPath,
    rec: [usize; 4],
}

/// Recurrent state carried between consecutive segments of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentState<E> {
    batch: usize,
    pub c: Vec<Tensor<E>>,
    pub memory: Vec<AttentionMemory<E>>,
}

impl<E: Element> SegmentState<E> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug)]
pub struct Model<E> {
    cfg: ModelConfig,
    params: Vec<Param<E>>,
    embed: usize,
    layers: Vec<LayerIdx>,
    head_w: Option<usize>,
    head_b: usize,
}

/// Per-call forward settings.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Overrides the configured memory length (evaluation context).
    pub max_mem: Option<usize>,
}

struct Builder<'a, E> {
    params: Vec<Param<E>>,
    rng: &'a mut ChaCha8Rng,
}

impl<E: Element> Builder<'_, E> {
    fn push(&mut self, name: String, value: Tensor<E>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.scaled_matrix(name, rows, cols, 1.0)
    }

    fn scaled_matrix(&mut self, name: String, rows: usize, cols: usize, scale: f64) -> usize {
        let a = scale * (3.0 / cols as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn([rows, cols], |_| E::of(rng.gen_range(-a..a)));
        self.push(name, t)
    }

    fn filled(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::full(shape, E::of(v)))
    }
}

const HEAD_INIT_SCALE: f64 = 0.1;

/// Builds a model with deterministic initialisation from `seed`.
pub fn build_model<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<Model<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        rng: &mut rng,
    };
    let (v, d, dp) = (cfg.vocab_size, cfg.d, cfg.d_attn);
    let embed = b.matrix("embed.weight".into(), v, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 1..=cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let path = if cfg.schedule.has_attention(l) {
            let w_q = b.matrix(p("attn.w_q"), dp, d);
            let w_q_inner = cfg
                .independent_qkv
                .then(|| b.matrix(p("attn.w_q_inner"), dp, dp));
            let w_k = b.matrix(p("attn.w_k"), dp, dp);
            let w_v = b.matrix(p("attn.w_v"), dp, dp);
            let w_o = b.matrix(p("attn.w_o"), 3 * d, dp);
            let alpha = b.filled(p("attn.alpha"), &[1], 0.0);
            let ln = cfg.layer_norm.then(|| {
                (
                    b.filled(p("attn.ln_gain"), &[dp], 1.0),
                    b.filled(p("attn.ln_bias"), &[dp], 0.0),
                )
            });
            InputPath::Attention(AttnIdx {
                w_q,
                w_q_inner,
                w_k,
                w_v,
                w_o,
                alpha,
                ln,
            })
        } else {
            match cfg.variant {
                LayerVariant::Plain => InputPath::Plain {
                    w: b.matrix(p("w"), 3 * d, d),
                },
                LayerVariant::Projection => InputPath::Projection {
                    w_q: b.matrix(p("w_q"), dp, d),
                    w_o: b.matrix(p("w_o"), 3 * d, dp),
                },
            }
        };
        let rec = [
            b.filled(p("v_f"), &[d], 0.0),
            b.filled(p("v_r"), &[d], 0.0),
            b.filled(p("b_f"), &[d], 0.0),
            b.filled(p("b_r"), &[d], 0.0),
        ];
        layers.push(LayerIdx { path, rec });
    }
    // A small head keeps the untrained predictive distribution near uniform.
    let head_w =
        (!cfg.tie_embeddings).then(|| b.scaled_matrix("head.weight".into(), v, d, HEAD_INIT_SCALE));
    let head_b = b.filled("head.bias".into(), &[v], 0.0);
    Ok(Model {
        cfg: cfg.clone(),
        params: b.params,
        embed,
        layers,
        head_w,
        head_b,
    })
}

impl<E: Element> Model<E> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of layers that instantiated the attention path.
    pub fn attention_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.path, InputPath::Attention(_)))
            .count()
    }

    /// Replaces every parameter value, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor<E>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            embed: self.embed,
            layers: self.layers.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    pub fn reset_state(&self, batch: usize) -> SegmentState<E> {
        SegmentState {
            batch,
            c: (0..self.cfg.n_layers)
                .map(|_| Tensor::zeros([batch, self.cfg.d]))
                .collect(),
            memory: (0..self.cfg.n_layers)
                .map(|_| AttentionMemory::empty())
                .collect(),
        }
    }

    /// Registers every parameter on `tape`, in store order.
    pub fn register(&self, tape: &Tape<E>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    /// Logits (`L x B x V`) for time-major `tokens` of length `L * batch`.
    ///
    /// `vars` must come from [`Model::register`] on the same tape. Dropout
    /// is active iff `rng` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on(
        &self,
        tape: &Tape<E>,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        state: &SegmentState<E>,
        opts: ForwardOptions,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, SegmentState<E>)> {
        if vars.len() != self.params.len() {
            return Err(Error::Usage("parameter vars do not match the model".into()));
        }
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Usage(format!(
                "{} tokens cannot be split into batch {batch}",
                tokens.len()
            )));
        }
        if state.batch != batch {
            return Err(Error::Usage(format!(
                "state batch {} does not match input batch {batch}",
                state.batch
            )));
        }
        let len = tokens.len() / batch;
        let cfg = &self.cfg;
        let mut attn_opts = cfg.attention_options();
        if let Some(m) = opts.max_mem {
            attn_opts.max_mem = m;
        }
        let mut x = tape.embedding(vars[self.embed], tokens, &[len, batch])?;
        if let Some(r) = rng.as_mut() {
            x = tape.dropout(x, cfg.dropout, &mut **r)?;
        }
        let mut next = SegmentState {
            batch,
            c: Vec::with_capacity(cfg.n_layers),
            memory: Vec::with_capacity(cfg.n_layers),
        };
        for (li, layer) in self.layers.iter().enumerate() {
            let (u, mem) = match &layer.path {
                InputPath::Attention(a) => {
                    let (ln_gain, ln_bias) = match a.ln {
                        Some((g, b)) => (vars[g], vars[b]),
                        // Unused when layer norm is off.
                        None => (vars[a.alpha], vars[a.alpha]),
                    };
                    let av = AttentionVars {
                        w_q: vars[a.w_q],
                        w_q_inner: a.w_q_inner.map(|i| vars[i]),
                        w_k: vars[a.w_k],
                        w_v: vars[a.w_v],
                        w_o: vars[a.w_o],
                        alpha: vars[a.alpha],
                        ln_gain,
                        ln_bias,
                    };
                    let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
                    attn_block_on(tape, x, &state.memory[li], &av, &attn_opts, r)?
                }
                path => {
                    let mut u = match path {
                        InputPath::Plain { w } => tape.linear(x, vars[*w], None)?,
                        InputPath::Projection { w_q, w_o } => {
                            projection_on(tape, x, vars[*w_q], vars[*w_o])?
                        }
                        InputPath::Attention(_) => unreachable!(),
                    };
                    if let Some(r) = rng.as_mut() {
                        u = tape.dropout(u, cfg.dropout, &mut **r)?;
                    }
                    (u, AttentionMemory::empty())
                }
            };
            let rec = layer.rec.map(|i| vars[i]);
            let (h, c_last) = tape.sru(u, x, rec, &state.c[li])?;
            next.c.push(c_last);
            next.memory.push(mem);
            x = h;
        }
        let head = match self.head_w {
            Some(w) => vars[w],
            None => vars[self.embed],
        };
        let logits = tape.linear(x, head, Some(vars[self.head_b]))?;
        Ok((logits, next))
    }

    /// Evaluation-mode forward without gradient recording.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        state: &SegmentState<E>,
        opts: ForwardOptions,
    ) -> Result<(Tensor<E>, SegmentState<E>)> {
        let tape = Tape::no_grad();
        let vars = self.register(&tape);
        let (logits, next) = self.forward_on(&tape, &vars, tokens, batch, state, opts, None)?;
        Ok((tape.value(logits), next))
    }

    /// Mean next-token cross-entropy (nats) over a `L x B` segment, given
    /// targets in the same layout; returns the loss var and new state.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_on(
        &self,
        tape: &Tape<E>,
        vars: &[Var],
        inputs: &[u32],
        targets: &[u32],
        batch: usize,
        state: &SegmentState<E>,
        opts: ForwardOptions,
        rng: Option<&mut dyn RngCore>,
        mask: Option<&[bool]>,
    ) -> Result<(Var, SegmentState<E>)> {
        if targets.len() != inputs.len() {
            return Err(Error::shape(
                "loss targets",
                &[inputs.len()],
                &[targets.len()],
            ));
        }
        let (logits, next) = self.forward_on(tape, vars, inputs, batch, state, opts, rng)?;
        let flat = tape.reshape(logits, &[inputs.len(), self.cfg.vocab_size])?;
        let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok((tape.cross_entropy(flat, &t, mask)?, next))
    }
}
