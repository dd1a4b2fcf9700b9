//! Autoregressive sampling with carried state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Element;

/// Continues `prompt` by `n` tokens. `temperature == 0` picks the argmax;
/// otherwise tokens are sampled from `softmax(logits / temperature)`.
/// Returns the prompt followed by the generated tokens.
pub fn generate<E: Element>(
    model: &Model<E>,
    prompt: &[u32],
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u32>> {
    let vocab = model.config().vocab_size;
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Usage(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::IndexOutOfRange {
            what: "prompt token",
            index: bad as usize,
            bound: vocab,
        });
    }
    let mut out = prompt.to_vec();
    if n == 0 {
        return Ok(out);
    }
    if prompt.is_empty() {
        return Err(Error::Usage("generation needs a nonempty prompt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOptions::default();
    let (mut logits, mut state) = model.forward(prompt, 1, &model.reset_state(1), opts)?;
    for _ in 0..n {
        let last = &logits.data()[logits.len() - vocab..];
        let next = pick(last, temperature, &mut rng);
        out.push(next);
        (logits, state) = model.forward(&[next], 1, &state, opts)?;
    }
    Ok(out)
}

fn pick<E: Element>(logits: &[E], temperature: f64, rng: &mut impl Rng) -> u32 {
    let argmax = || {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best as u32
    };
    if temperature == 0.0 {
        return argmax();
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let weights: Vec<f64> = logits
        .iter()
        .map(|v| ((v.f64() - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return argmax();
    }
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}
