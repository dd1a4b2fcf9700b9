//! The single-head attention path that produces `U` for an SRU++ layer.
//!
//! Queries come from a low-rank projection of the layer input; keys and
//! values are computed from the queries (not from `X`), so `W_k` and `W_v`
//! are only `d' x d'`. The output is
//! `U = W_o * layernorm(Q + alpha * A)` with `A` the causal scaled
//! dot-product average. Tensors are kept batch-major (`B x L x d'`) inside
//! the block and time-major (`L x B x ...`) at its boundary.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Learnable weights of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<E> {
    /// `d' x d`: input projection producing the query space.
    pub w_q: Tensor<E>,
    /// `d' x d'`: separate query map, present only for the
    /// three-independent-projections variant.
    pub w_q_inner: Option<Tensor<E>>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    /// `3d x d'`.
    pub w_o: Tensor<E>,
    /// Residual gate on the attention average (shape `[1]`).
    pub alpha: Tensor<E>,
    pub ln_gain: Tensor<E>,
    pub ln_bias: Tensor<E>,
}

impl<E: Element> AttentionParams<E> {
    pub fn attn_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (dp, _) = self.w_q.dims2()?;
        let square = [dp, dp];
        for w in [Some(&self.w_k), Some(&self.w_v), self.w_q_inner.as_ref()]
            .into_iter()
            .flatten()
        {
            if w.shape() != square {
                return Err(Error::shape(
                    "attention params",
                    self.w_q.shape(),
                    w.shape(),
                ));
            }
        }
        let (rows, cols) = self.w_o.dims2()?;
        if cols != dp || rows % 3 != 0 {
            return Err(Error::shape("attention W_o", self.w_o.shape(), &[rows, dp]));
        }
        if self.alpha.len() != 1 || !self.alpha.all_finite() {
            return Err(Error::Usage("alpha must be one finite scalar".into()));
        }
        if self.ln_gain.shape() != [dp] || self.ln_bias.shape() != [dp] {
            return Err(Error::shape(
                "attention layer norm",
                self.ln_gain.shape(),
                &[dp],
            ));
        }
        Ok(())
    }

    /// Puts every tensor on `tape` as a parameter.
    pub fn register(&self, tape: &Tape<E>) -> AttentionVars {
        AttentionVars {
            w_q: tape.param(self.w_q.clone()),
            w_q_inner: self.w_q_inner.as_ref().map(|w| tape.param(w.clone())),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
            alpha: tape.param(self.alpha.clone()),
            ln_gain: tape.param(self.ln_gain.clone()),
            ln_bias: tape.param(self.ln_bias.clone()),
        }
    }
}

/// [`AttentionParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_q_inner: Option<Var>,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub alpha: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionOptions {
    pub layer_norm: bool,
    pub pre_norm: bool,
    pub dropout: f64,
    /// Tokens of query-space history retained for the next segment.
    pub max_mem: usize,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            layer_norm: true,
            pre_norm: false,
            dropout: 0.0,
            max_mem: 0,
        }
    }
}

/// Query-space states of previous segments (`B x M_mem x d'`), detached.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionMemory<E> {
    states: Option<Tensor<E>>,
}

impl<E: Element> AttentionMemory<E> {
    pub fn empty() -> Self {
        AttentionMemory { states: None }
    }

    pub fn from_states(states: Tensor<E>) -> Result<Self> {
        states.dims3()?;
        Ok(AttentionMemory {
            states: Some(states),
        })
    }

    /// Cached token count per sequence.
    pub fn len(&self) -> usize {
        self.states.as_ref().map_or(0, |s| s.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> Option<&Tensor<E>> {
        self.states.as_ref()
    }

    /// The trailing `min(len, max_mem)` positions of `[self || fresh]`.
    fn extend(&self, fresh: &Tensor<E>, max_mem: usize) -> Result<Self> {
        let full = match &self.states {
            Some(m) if !self.is_empty() => m.concat1(fresh)?,
            _ => fresh.clone(),
        };
        let total = full.shape()[1];
        let keep = total.min(max_mem);
        if keep == 0 {
            return Ok(Self::empty());
        }
        Ok(AttentionMemory {
            states: Some(full.narrow1(total - keep, keep)?),
        })
    }
}

/// Masking applied to attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Query `i` sees the `offset` leading keys and current keys `<= i`.
    Causal {
        offset: usize,
    },
    None,
}

/// Scaled dot-product probabilities `softmax(Q K^T / sqrt(d'))` for
/// batch-major `q` (`B x Lq x d'`) and `k` (`B x Lk x d'`).
pub fn scores_on<E: Element>(tape: &Tape<E>, q: Var, k: Var, mask: AttnMask) -> Result<Var> {
    let dp = *tape.shape(q).last().expect("rank 3");
    let raw = tape.bmm(q, k, true)?;
    let scaled = tape.scale(raw, 1.0 / (dp as f64).sqrt())?;
    let masked = match mask {
        AttnMask::Causal { offset } => tape.causal_mask(scaled, offset)?,
        AttnMask::None => scaled,
    };
    tape.softmax_rows(masked)
}

/// Residual attention in query space.
///
/// `base` is the current segment's projected input (`B x L x d'`);
/// `context`, when present, holds extra leading positions (`B x Lc x d'`)
/// visible to every query. Returns the (optionally normalised)
/// `Q + alpha * A`.
pub fn attend_on<E: Element>(
    tape: &Tape<E>,
    base: Var,
    context: Option<Var>,
    vars: &AttentionVars,
    opts: &AttentionOptions,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let full = match context {
        Some(c) => tape.concat1(c, base)?,
        None => base,
    };
    let offset = tape.shape(full)[1] - tape.shape(base)[1];
    let (q_src, kv_src) = if opts.pre_norm && opts.layer_norm {
        (
            tape.layer_norm(base, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)?,
            tape.layer_norm(full, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)?,
        )
    } else {
        (base, full)
    };
    let q = match vars.w_q_inner {
        Some(w) => tape.linear(q_src, w, None)?,
        None => q_src,
    };
    // Keys and values always come from the shared projection.
    let k = tape.linear(kv_src, vars.w_k, None)?;
    let v = tape.linear(kv_src, vars.w_v, None)?;
    let mut probs = scores_on(tape, q, k, AttnMask::Causal { offset })?;
    if let Some(rng) = rng {
        probs = tape.dropout(probs, opts.dropout, rng)?;
    }
    let avg = tape.bmm(probs, v, false)?;
    let gated = tape.scale_by(avg, vars.alpha)?;
    let residual_q = if opts.pre_norm && opts.layer_norm {
        match vars.w_q_inner {
            Some(w) => tape.linear(base, w, None)?,
            None => base,
        }
    } else {
        q
    };
    let res = tape.add(residual_q, gated)?;
    if opts.layer_norm && !opts.pre_norm {
        tape.layer_norm(res, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)
    } else {
        Ok(res)
    }
}

/// Full attention block on a tape: `x` is `L x B x d`; returns `U`
/// (`L x B x 3d`) and the refreshed memory.
pub fn attn_block_on<E: Element>(
    tape: &Tape<E>,
    x: Var,
    memory: &AttentionMemory<E>,
    vars: &AttentionVars,
    opts: &AttentionOptions,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Var, AttentionMemory<E>)> {
    let xs = tape.shape(x);
    if xs.len() != 3 {
        return Err(Error::shape("attn_block input", &xs, &[]));
    }
    let batch = xs[1];
    let proj = tape.linear(x, vars.w_q, None)?;
    let base = tape.swap01(proj)?;
    let context = match memory.states() {
        Some(m) if !memory.is_empty() => {
            let base_shape = tape.shape(base);
            if m.shape()[0] != batch || m.shape()[2] != base_shape[2] {
                return Err(Error::Usage(format!(
                    "attention memory {:?} does not match batch {batch} / width {}",
                    m.shape(),
                    base_shape[2]
                )));
            }
            Some(tape.constant(m.clone()))
        }
        _ => None,
    };
    let z = attend_on(
        tape,
        base,
        context,
        vars,
        opts,
        rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
    )?;
    let zt = tape.swap01(z)?;
    let mut u = tape.linear(zt, vars.w_o, None)?;
    if let Some(rng) = rng {
        u = tape.dropout(u, opts.dropout, rng)?;
    }
    let new_memory = memory.extend(&tape.value(base), opts.max_mem)?;
    Ok((u, new_memory))
}

/// Attention with a source prefix as extra context: every target token sees
/// all source tokens and the preceding (and current) target tokens.
pub fn attn_block_prefix_context_on<E: Element>(
    tape: &Tape<E>,
    x_src: Var,
    x_tgt: Var,
    vars: &AttentionVars,
    opts: &AttentionOptions,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (ss, ts) = (tape.shape(x_src), tape.shape(x_tgt));
    if ss.len() != 3 || ts.len() != 3 || ss[1] != ts[1] || ss[2] != ts[2] {
        return Err(Error::shape("attn_block_prefix_context", &ss, &ts));
    }
    let src = tape.linear(x_src, vars.w_q, None)?;
    let src = tape.swap01(src)?;
    let tgt = tape.linear(x_tgt, vars.w_q, None)?;
    let tgt = tape.swap01(tgt)?;
    let z = attend_on(
        tape,
        tgt,
        Some(src),
        vars,
        opts,
        rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
    )?;
    let zt = tape.swap01(z)?;
    let mut u = tape.linear(zt, vars.w_o, None)?;
    if let Some(rng) = rng {
        u = tape.dropout(u, opts.dropout, rng)?;
    }
    Ok(u)
}

/// Attention-free low-rank path `U = W_o (W_q X^T)`.
pub fn projection_on<E: Element>(tape: &Tape<E>, x: Var, w_q: Var, w_o: Var) -> Result<Var> {
    let low = tape.linear(x, w_q, None)?;
    tape.linear(low, w_o, None)
}

fn eval<E: Element, T>(f: impl FnOnce(&Tape<E>) -> Result<T>) -> Result<T> {
    f(&Tape::no_grad())
}

/// Query, key and value representations, each `B x L x d'`.
pub fn attn_project<E: Element>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    params.validate()?;
    x.dims3()?;
    eval(|t| {
        let vars = params.register(t);
        let xv = t.constant(x.clone());
        let base = t.linear(xv, vars.w_q, None)?;
        let base = t.swap01(base)?;
        let q = match vars.w_q_inner {
            Some(w) => t.linear(base, w, None)?,
            None => base,
        };
        let k = t.linear(base, vars.w_k, None)?;
        let v = t.linear(base, vars.w_v, None)?;
        Ok((t.value(q), t.value(k), t.value(v)))
    })
}

/// Attention probabilities (`B x Lq x Lk`).
pub fn attention_weights<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    mask: AttnMask,
) -> Result<Tensor<E>> {
    check_qkv(q, k, k)?;
    eval(|t| {
        let p = scores_on(t, t.constant(q.clone()), t.constant(k.clone()), mask)?;
        Ok(t.value(p))
    })
}

fn check_qkv<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<()> {
    let (qb, lq, qd) = q.dims3()?;
    let (kb, lk, kd) = k.dims3()?;
    let (vb, lv, _) = v.dims3()?;
    if qb != kb || qb != vb || qd != kd || lk != lv {
        return Err(Error::shape("attention q/k/v", q.shape(), k.shape()));
    }
    if lk == 0 && lq > 0 {
        return Err(Error::Usage("attention query with an empty key set".into()));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d')) V` for batch-major `q`, `k`, `v`.
pub fn attn_weighted_average<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    mask: AttnMask,
) -> Result<Tensor<E>> {
    check_qkv(q, k, v)?;
    if let AttnMask::Causal { offset } = mask {
        if k.shape()[1] < offset + q.shape()[1] {
            return Err(Error::shape("attention mask", q.shape(), k.shape()));
        }
    }
    eval(|t| {
        let p = scores_on(t, t.constant(q.clone()), t.constant(k.clone()), mask)?;
        let a = t.bmm(p, t.constant(v.clone()), false)?;
        Ok(t.value(a))
    })
}

/// Eager attention block; dropout is applied only when `rng` is given.
pub fn attn_block<E: Element>(
    x: &Tensor<E>,
    memory: &AttentionMemory<E>,
    params: &AttentionParams<E>,
    opts: &AttentionOptions,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Tensor<E>, AttentionMemory<E>)> {
    params.validate()?;
    eval(|t| {
        let vars = params.register(t);
        let (u, mem) = attn_block_on(t, t.constant(x.clone()), memory, &vars, opts, rng)?;
        Ok((t.value(u), mem))
    })
}

/// Eager prefix-context attention returning `U` for target positions.
pub fn attn_block_prefix_context<E: Element>(
    x_src: &Tensor<E>,
    x_tgt: &Tensor<E>,
    params: &AttentionParams<E>,
    opts: &AttentionOptions,
) -> Result<Tensor<E>> {
    params.validate()?;
    eval(|t| {
        let vars = params.register(t);
        let u = attn_block_prefix_context_on(
            t,
            t.constant(x_src.clone()),
            t.constant(x_tgt.clone()),
            &vars,
            opts,
            None,
        )?;
        Ok(t.value(u))
    })
}

/// Eager low-rank projection `U = W_o (W_q X^T)`.
pub fn linear_projection_variant<E: Element>(
    x: &Tensor<E>,
    w_q: &Tensor<E>,
    w_o: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (dp, _) = w_q.dims2()?;
    let (_, cols) = w_o.dims2()?;
    if cols != dp {
        return Err(Error::shape(
            "linear_projection_variant",
            w_q.shape(),
            w_o.shape(),
        ));
    }
    eval(|t| {
        let u = projection_on(
            t,
            t.constant(x.clone()),
            t.constant(w_q.clone()),
            t.constant(w_o.clone()),
        )?;
        Ok(t.value(u))
    })
}
