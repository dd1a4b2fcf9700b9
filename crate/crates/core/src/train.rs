//! Training loop with stateful segments, evaluation and the lr/wd sweep.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, batchify, eval_segments, BatchStream, Corpus, IngestOptions};
use crate::error::{Error, Result};
use crate::model::{build_model, ForwardOptions, Model, SegmentState};
use crate::optim::{clip_grad_norm, cosine_lr, RAdam};
use crate::tape::Tape;
use crate::tensor::{nats_to_bpc, Element, Tensor};

pub const METRICS_HEADER: &str = "step,lr,train_nll,dev_bpc,grad_norm,tokens_per_sec";

/// A training loss above this multiple of the uniform-prediction loss
/// `ln(vocab)` is treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 4.0;

/// Sweep cells whose dev BPC exceeds this multiple of the uniform baseline
/// count as exploded.
pub const EXPLOSION_FACTOR: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss (nats) since the previous row.
    pub train_nll: f64,
    pub dev_bpc: Option<f64>,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let dev = self.dev_bpc.map(|b| format!("{b:.6}")).unwrap_or_default();
        format!(
            "{},{:.6e},{:.6},{},{:.6},{:.1}",
            self.step, self.lr, self.train_nll, dev, self.grad_norm, self.tokens_per_sec
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub nll: f64,
    pub bpc: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Per-token NLL (nats) of every next-token prediction in `tokens`, scored
/// with a single stream in non-overlapping segments of `unroll` tokens and
/// attention memory `mem`.
pub fn token_nlls<E: Element>(
    model: &Model<E>,
    tokens: &[u32],
    unroll: usize,
    mem: usize,
) -> Result<Vec<f64>> {
    let vocab = model.config().vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::IndexOutOfRange {
            what: "token id",
            index: bad as usize,
            bound: vocab,
        });
    }
    let mut state = model.reset_state(1);
    let opts = ForwardOptions { max_mem: Some(mem) };
    let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
    for (s, e) in eval_segments(tokens.len(), unroll) {
        let (logits, next) = model.forward(&tokens[s..e], 1, &state, opts)?;
        state = next;
        for (row, &t) in logits.data().chunks(vocab).zip(&tokens[s + 1..e + 1]) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            out.push(lse - row[t as usize].f64());
        }
    }
    Ok(out)
}

/// Token-mean NLL, bits per character and perplexity over a split.
pub fn evaluate<E: Element>(
    model: &Model<E>,
    tokens: &[u32],
    unroll: usize,
    mem: usize,
) -> Result<EvalResult> {
    let nlls = token_nlls(model, tokens, unroll, mem)?;
    if nlls.is_empty() {
        return Err(Error::Data(
            "evaluation split needs at least 2 tokens".into(),
        ));
    }
    let nll = nlls.iter().sum::<f64>() / nlls.len() as f64;
    Ok(EvalResult {
        nll,
        bpc: nats_to_bpc(nll),
        ppl: nll.exp(),
        tokens: nlls.len(),
    })
}

/// Reads and splits the corpus named by the settings.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let t = &cfg.train;
    if t.data.is_empty() {
        return Err(Error::Config("no data path given (set data = PATH)".into()));
    }
    let opts = IngestOptions {
        tokenization: t.tokenization,
        word_vocab_cap: t.word_vocab_cap,
        shuffle_docs: t.shuffle_docs.then_some(t.seed),
        ..Default::default()
    };
    data::ingest(Path::new(&t.data), &opts)
}

/// Fills in `vocab_size = 0` from the corpus and checks it otherwise.
pub fn resolve_vocab(cfg: &mut RunConfig, corpus: &Corpus) -> Result<()> {
    let need = corpus.vocab.len();
    match cfg.model.vocab_size {
        0 => cfg.model.vocab_size = need,
        v if v < need => {
            return Err(Error::Config(format!(
                "vocab_size {v} is smaller than the corpus vocabulary ({need})"
            )))
        }
        _ => {}
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// Owns the model, optimizer, batch stream and carried segment state.
pub struct Trainer {
    cfg: RunConfig,
    model: Model<f32>,
    opt: RAdam<f32>,
    stream: BatchStream,
    state: SegmentState<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: &RunConfig, train_tokens: &[u32]) -> Result<Trainer> {
        let opt = RAdam::new(model.params());
        Trainer::resume(model, opt, cfg, train_tokens)
    }

    /// Continues from saved optimizer state. The stream is positioned after
    /// the last completed step; recurrent state restarts from zero.
    pub fn resume(
        model: Model<f32>,
        opt: RAdam<f32>,
        cfg: &RunConfig,
        train_tokens: &[u32],
    ) -> Result<Trainer> {
        cfg.validate()?;
        if model.config() != &cfg.model {
            return Err(Error::Config("model does not match the run config".into()));
        }
        let mut stream = batchify(train_tokens, cfg.train.batch_size, cfg.train.unroll)?;
        stream.seek(opt.step);
        let state = model.reset_state(cfg.train.batch_size);
        let rng = ChaCha8Rng::seed_from_u64(
            cfg.train.seed ^ opt.step.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            opt,
            stream,
            state,
            rng,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<f32> {
        &mut self.model
    }

    pub fn optimizer(&self) -> &RAdam<f32> {
        &self.opt
    }

    pub fn steps_done(&self) -> u64 {
        self.opt.step
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (Model<f32>, RAdam<f32>) {
        (self.model, self.opt)
    }

    /// Forward, backward, clip and one optimizer update on the next batch.
    /// On a non-finite loss or gradient nothing is updated.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.stream.at_epoch_start() {
            self.state = self.model.reset_state(self.cfg.train.batch_size);
        }
        let batch = self.stream.next().expect("stream never ends");
        let step = self.opt.step + 1;
        let tape = Tape::new();
        let vars = self.model.register(&tape);
        let dropout = self.cfg.model.dropout > 0.0;
        let rng = dropout.then_some(&mut self.rng as &mut dyn rand::RngCore);
        let (loss, next) = self.model.loss_on(
            &tape,
            &vars,
            &batch.inputs,
            &batch.targets,
            batch.batch,
            &self.state,
            ForwardOptions::default(),
            rng,
            None,
        )?;
        let loss_value = tape.value(loss).item().f64();
        let limit = DIVERGENCE_FACTOR * (self.cfg.model.vocab_size.max(2) as f64).ln();
        if !loss_value.is_finite() || loss_value > limit {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
            });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let grad_norm = clip_grad_norm(&mut g, self.cfg.optim.clip_norm)?;
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
            });
        }
        let lr = cosine_lr(step, &self.cfg.optim);
        self.opt
            .step(self.model.params_mut(), &g, lr, &self.cfg.optim)?;
        if self.model.params().iter().any(|p| !p.value.all_finite()) {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
            });
        }
        self.state = next;
        Ok(StepStats {
            step,
            loss: loss_value,
            grad_norm,
            lr,
            tokens: batch.inputs.len(),
        })
    }
}

/// Where and how a run reports.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.csv` and `ckpt-*.bin`; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Extra checkpoint records (e.g. the vocabulary).
    pub extra_records: Vec<(String, Tensor<f32>)>,
    /// Skip dev evaluation entirely.
    pub skip_eval: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: RAdam<f32>,
    pub rows: Vec<MetricsRow>,
    pub final_dev: Option<EvalResult>,
    pub checkpoints: Vec<PathBuf>,
}

fn dev_slice<'a>(cfg: &RunConfig, dev: &'a [u32]) -> &'a [u32] {
    match cfg.train.eval_tokens {
        0 => dev,
        n => &dev[..dev.len().min(n + 1)],
    }
}

struct MetricsSink(Option<BufWriter<File>>, PathBuf);

impl MetricsSink {
    fn write(&mut self, line: &str) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

/// Runs `total_steps - steps_done` updates with periodic dev evaluation,
/// metrics logging and checkpoints. On divergence the error is returned and
/// checkpoints already on disk are left untouched.
pub fn train(mut trainer: Trainer, dev: &[u32], opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = trainer.config().clone();
    let t = &cfg.train;
    let mut sink = MetricsSink(None, PathBuf::new());
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let resuming = trainer.steps_done() > 0 && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        sink = MetricsSink(Some(BufWriter::new(file)), path);
        if !resuming {
            sink.write(METRICS_HEADER)?;
        }
    }
    let dev = dev_slice(&cfg, dev);
    let can_eval = !opts.skip_eval && dev.len() >= 2;
    let eval = |m: &Model<f32>| evaluate(m, dev, t.eval_unroll(), t.eval_mem());

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let (mut loss_sum, mut loss_n, mut tokens) = (0.0, 0u64, 0usize);
    let mut window = Instant::now();
    let total = cfg.optim.total_steps;
    while trainer.steps_done() < total {
        let s = trainer.step()?;
        loss_sum += s.loss;
        loss_n += 1;
        tokens += s.tokens;
        let last = s.step == total;
        let eval_now = can_eval && (last || (t.eval_interval > 0 && s.step % t.eval_interval == 0));
        if last || eval_now || s.step % t.log_interval == 0 {
            let elapsed = window.elapsed().as_secs_f64();
            let dev_bpc = if eval_now {
                Some(eval(trainer.model())?.bpc)
            } else {
                None
            };
            let row = MetricsRow {
                step: s.step,
                lr: s.lr,
                train_nll: loss_sum / loss_n as f64,
                dev_bpc,
                grad_norm: s.grad_norm,
                tokens_per_sec: if elapsed > 0.0 {
                    tokens as f64 / elapsed
                } else {
                    0.0
                },
            };
            log::info!("{}", row.csv_line());
            sink.write(&row.csv_line())?;
            rows.push(row);
            (loss_sum, loss_n, tokens) = (0.0, 0, 0);
            window = Instant::now();
        }
        let periodic = t.checkpoint_interval > 0 && s.step % t.checkpoint_interval == 0;
        if let (Some(dir), true) = (&opts.out_dir, periodic || last) {
            let path = dir.join(format!("ckpt-{}.bin", s.step));
            let recs = checkpoint::records(
                trainer.model(),
                Some(trainer.optimizer()),
                &opts.extra_records,
            );
            checkpoint::save(&path, &cfg, &recs)?;
            checkpoints.push(path);
        }
    }
    let final_dev = if can_eval {
        Some(eval(trainer.model())?)
    } else {
        None
    };
    let (model, optimizer) = trainer.into_parts();
    Ok(TrainOutcome {
        model,
        optimizer,
        rows,
        final_dev,
        checkpoints,
    })
}

/// Builds a model from `cfg` (vocab already resolved), trains it on the
/// corpus and returns the outcome with a full dev evaluation.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let model = build_model::<f32>(&cfg.model, cfg.train.seed)?;
    let trainer = Trainer::new(model, cfg, &corpus.train)?;
    train(trainer, &corpus.dev, opts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` when the run diverged or failed.
    pub dev_bpc: Option<f64>,
    pub note: Option<String>,
}

/// Independent short runs over the `lr x wd` grid; a failing cell never
/// aborts the sweep.
pub fn sweep(
    base: &RunConfig,
    corpus: &Corpus,
    lrs: &[f64],
    wds: &[f64],
) -> Result<Vec<SweepCell>> {
    if lrs.is_empty() || wds.is_empty() {
        return Err(Error::Usage("sweep grid must be nonempty".into()));
    }
    let explode = EXPLOSION_FACTOR * (base.model.vocab_size.max(2) as f64).log2();
    let mut cells = Vec::new();
    for &lr in lrs {
        for &wd in wds {
            let mut cfg = base.clone();
            cfg.optim.lr = lr;
            cfg.optim.weight_decay = wd;
            let opts = TrainOptions::default();
            let (dev_bpc, note) = match cfg
                .validate()
                .and_then(|_| train_and_evaluate(&cfg, corpus, &opts))
            {
                Ok(out) => match out.final_dev {
                    Some(r) if r.bpc.is_finite() && r.bpc <= explode => (Some(r.bpc), None),
                    Some(r) => (None, Some(format!("dev bpc {} exploded", r.bpc))),
                    None => (None, Some("no dev evaluation".to_string())),
                },
                Err(e) => (None, Some(e.to_string())),
            };
            if let Some(n) = &note {
                log::warn!("sweep cell lr={lr} wd={wd}: {n}");
            }
            cells.push(SweepCell {
                lr,
                weight_decay: wd,
                dev_bpc,
                note,
            });
        }
    }
    Ok(cells)
}

pub const DIVERGED: &str = "-";

/// Learning rates down the rows, weight decays across the columns;
/// diverged cells hold [`DIVERGED`].
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut lrs: Vec<f64> = Vec::new();
    let mut wds: Vec<f64> = Vec::new();
    for c in cells {
        if !lrs.contains(&c.lr) {
            lrs.push(c.lr);
        }
        if !wds.contains(&c.weight_decay) {
            wds.push(c.weight_decay);
        }
    }
    let mut out = String::from("lr\\wd");
    for wd in &wds {
        write!(out, ",{wd}").unwrap();
    }
    out.push('\n');
    for lr in &lrs {
        write!(out, "{lr}").unwrap();
        for wd in &wds {
            let cell = cells.iter().find(|c| c.lr == *lr && c.weight_decay == *wd);
            match cell.and_then(|c| c.dev_bpc) {
                Some(b) => write!(out, ",{b:.4}").unwrap(),
                None => write!(out, ",{DIVERGED}").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

/// Model, config, vocabulary and optimizer state restored from a checkpoint.
pub type Trained = (
    Model<f32>,
    RunConfig,
    Option<data::Vocab>,
    Option<RAdam<f32>>,
);

/// Loads a checkpoint written by [`train`] together with its config and
/// (byte) vocabulary.
pub fn load_trained(path: &Path) -> Result<Trained> {
    let ck = checkpoint::load(path)?;
    let cfg = ck.config()?;
    let model = ck.model::<f32>()?;
    let opt = ck.optimizer(&model)?;
    Ok((model, cfg, data::vocab_from_records(&ck.tensors), opt))
}
