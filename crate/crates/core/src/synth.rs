//! Synthetic long-range key-value recall.
//!
//! A sequence lists `pairs` key/value token pairs, then `gap` random filler
//! tokens, then `queries` of the keys each followed by its value. Only the
//! predictions of those final values are scored.

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, ForwardOptions, Model, ModelConfig};
use crate::optim::{clip_grad_norm, cosine_lr, OptimConfig, RAdam};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RecallTask {
    pub n_keys: usize,
    pub n_values: usize,
    pub n_fillers: usize,
    pub pairs: usize,
    pub gap: usize,
    pub queries: usize,
}

impl Default for RecallTask {
    /// One pair per sequence: the key is drawn afresh each time, so the
    /// value must be carried across the whole gap.
    fn default() -> Self {
        RecallTask {
            n_keys: 16,
            n_values: 16,
            n_fillers: 16,
            pairs: 1,
            gap: 256,
            queries: 1,
        }
    }
}

/// Time-major batch with a mask selecting the scored positions.
#[derive(Clone, Debug)]
pub struct RecallBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl RecallTask {
    pub fn vocab_size(&self) -> usize {
        self.n_keys + self.n_values + self.n_fillers
    }

    /// Tokens per sequence, including the final value.
    pub fn seq_len(&self) -> usize {
        2 * self.pairs + self.gap + 2 * self.queries
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0
            || self.queries == 0
            || self.queries > self.pairs
            || self.pairs > self.n_keys
            || self.n_values == 0
            || self.n_fillers == 0
        {
            return Err(Error::Config(format!("invalid recall task {self:?}")));
        }
        Ok(())
    }

    fn sequence(&self, rng: &mut impl Rng) -> Vec<u32> {
        let (k, v) = (self.n_keys as u32, self.n_values as u32);
        let keys: Vec<u32> = sample(rng, self.n_keys, self.pairs)
            .iter()
            .map(|i| i as u32)
            .collect();
        let values: Vec<u32> = (0..self.pairs).map(|_| k + rng.gen_range(0..v)).collect();
        let mut seq = Vec::with_capacity(self.seq_len());
        for (key, val) in keys.iter().zip(&values) {
            seq.extend([*key, *val]);
        }
        seq.extend((0..self.gap).map(|_| k + v + rng.gen_range(0..self.n_fillers as u32)));
        // Distinct keys, so no answer can be copied from an earlier query.
        for i in sample(rng, self.pairs, self.queries) {
            seq.extend([keys[i], values[i]]);
        }
        seq
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> RecallBatch {
        let seqs: Vec<Vec<u32>> = (0..batch).map(|_| self.sequence(rng)).collect();
        let len = self.seq_len() - 1;
        let first_scored = 2 * self.pairs + self.gap;
        let mut out = RecallBatch {
            inputs: Vec::with_capacity(len * batch),
            targets: Vec::with_capacity(len * batch),
            mask: Vec::with_capacity(len * batch),
            batch,
            len,
        };
        for t in 0..len {
            for s in &seqs {
                out.inputs.push(s[t]);
                out.targets.push(s[t + 1]);
                // Target at t + 1 is a queried value.
                out.mask
                    .push(t >= first_scored && (t - first_scored).is_multiple_of(2));
            }
        }
        out
    }
}

/// Fraction of scored positions whose argmax prediction is correct.
pub fn recall_accuracy<E: Element>(model: &Model<E>, batch: &RecallBatch) -> Result<f64> {
    let state = model.reset_state(batch.batch);
    let (logits, _) = model.forward(
        &batch.inputs,
        batch.batch,
        &state,
        ForwardOptions { max_mem: Some(0) },
    )?;
    let v = model.config().vocab_size;
    let (mut hits, mut total) = (0usize, 0usize);
    for ((row, &t), &m) in logits.data().chunks(v).zip(&batch.targets).zip(&batch.mask) {
        if !m {
            continue;
        }
        total += 1;
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, x)| if *x > row[b] { i } else { b });
        hits += usize::from(best == t as usize);
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct RecallRun {
    pub batch_size: usize,
    pub steps: u64,
    pub optim: OptimConfig,
    pub eval_batch: usize,
    /// Evaluate every this many steps; stops early once accuracy reaches
    /// `target` (0 disables early stopping).
    pub eval_interval: u64,
    pub target: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RecallReport {
    pub accuracy: f64,
    pub steps: u64,
    pub final_loss: f64,
    /// `(step, accuracy)` at every evaluation.
    pub curve: Vec<(u64, f64)>,
}

/// Trains a fresh model on freshly sampled batches; each sequence is one
/// segment with zero initial state.
pub fn train_recall(
    cfg: &ModelConfig,
    task: &RecallTask,
    run: &RecallRun,
) -> Result<(Model<f32>, RecallReport)> {
    task.validate()?;
    run.optim.validate()?;
    let mut cfg = cfg.clone();
    cfg.vocab_size = task.vocab_size();
    let mut model = build_model::<f32>(&cfg, run.seed)?;
    let mut opt = RAdam::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(1));
    let eval_batch = task.sample(
        run.eval_batch,
        &mut ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(2)),
    );
    let mut drop_rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(3));
    let mut curve = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 1..=run.steps {
        let b = task.sample(run.batch_size, &mut rng);
        let tape = Tape::new();
        let vars = model.register(&tape);
        let state = model.reset_state(b.batch);
        let drop = (cfg.dropout > 0.0).then_some(&mut drop_rng as &mut dyn RngCore);
        let opts = ForwardOptions { max_mem: Some(0) };
        let (loss, _) = model.loss_on(
            &tape,
            &vars,
            &b.inputs,
            &b.targets,
            b.batch,
            &state,
            opts,
            drop,
            Some(&b.mask),
        )?;
        final_loss = tape.value(loss).item().f64();
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: final_loss,
            });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.wrt(v)).collect();
        clip_grad_norm(&mut g, run.optim.clip_norm)?;
        opt.step(
            model.params_mut(),
            &g,
            cosine_lr(step, &run.optim),
            &run.optim,
        )?;
        let last = step == run.steps;
        if last || (run.eval_interval > 0 && step % run.eval_interval == 0) {
            let acc = recall_accuracy(&model, &eval_batch)?;
            log::info!("recall step {step}: loss {final_loss:.4} accuracy {acc:.4}");
            curve.push((step, acc));
            if run.target > 0.0 && acc >= run.target {
                break;
            }
        }
    }
    let (steps, accuracy) = *curve.last().expect("at least the final evaluation");
    Ok((
        model,
        RecallReport {
            accuracy,
            steps,
            final_loss,
            curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_layout() {
        let task = RecallTask {
            gap: 5,
            pairs: 8,
            queries: 8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = task.sample(3, &mut rng);
        assert_eq!(b.len, task.seq_len() - 1);
        assert_eq!(b.inputs.len(), 3 * b.len);
        let scored = b.mask.iter().filter(|&&m| m).count();
        assert_eq!(scored, 3 * task.queries);
        for s in 0..3 {
            let col: Vec<u32> = (0..b.len).map(|t| b.inputs[t * 3 + s]).collect();
            for t in 0..b.len {
                if b.mask[t * 3 + s] {
                    let key = col[t];
                    let value = b.targets[t * 3 + s];
                    assert!((key as usize) < task.n_keys);
                    let pos = (0..task.pairs).find(|&p| col[2 * p] == key).unwrap();
                    assert_eq!(col[2 * pos + 1], value);
                }
            }
            assert!(col[16..21]
                .iter()
                .all(|&x| x as usize >= task.n_keys + task.n_values));
        }
    }

    #[test]
    fn untrained_accuracy_is_low() {
        let task = RecallTask {
            gap: 8,
            pairs: 4,
            queries: 4,
            ..Default::default()
        };
        let cfg = ModelConfig {
            vocab_size: task.vocab_size(),
            n_layers: 1,
            d: 16,
            d_attn: 8,
            ..Default::default()
        };
        let model = build_model::<f32>(&cfg, 0).unwrap();
        let b = task.sample(32, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(recall_accuracy(&model, &b).unwrap() < 0.3);
    }
}
