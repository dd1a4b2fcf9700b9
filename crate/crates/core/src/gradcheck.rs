//! Central finite-difference gradient checking (64-bit only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, ForwardOptions, Model, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Restricts checking to a random subset of coordinates per tensor.
#[derive(Clone, Copy, Debug)]
pub struct Subset {
    pub per_tensor: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor index, coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

fn coords(len: usize, subset: Option<Subset>, salt: usize) -> Vec<usize> {
    match subset {
        Some(s) if s.per_tensor < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(salt as u64));
            let mut idx = sample(&mut rng, len, s.per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` gradients against `(f(p + h) - f(p - h)) / 2h`.
pub fn compare_with_numeric(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    subset: Option<Subset>,
) -> Result<GradcheckReport> {
    compare(f, params, analytic, h, subset, false)
}

fn compare(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    subset: Option<Subset>,
    five_point: bool,
) -> Result<GradcheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::Usage(
            "one analytic gradient per parameter required".into(),
        ));
    }
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, (p, a)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != a.shape() {
            return Err(Error::shape("gradcheck", p.shape(), a.shape()));
        }
        for i in coords(p.len(), subset, pi) {
            let orig = p.data()[i];
            let mut at = |delta: f64| {
                work[pi].data_mut()[i] = orig + delta;
                let v = f(&work);
                work[pi].data_mut()[i] = orig;
                v
            };
            let numeric = if five_point {
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
            } else {
                (at(h) - at(-h)) / (2.0 * h)
            };
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradcheck: parameter {pi} coordinate {i}"),
                });
            }
            let an = a.data()[i];
            let abs = (an - numeric).abs();
            let rel = abs / (an.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, i));
                report.worst_analytic = an;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Builds the loss with `build` on a fresh tape, differentiates it, and
/// checks every parameter against central differences.
pub fn gradcheck<F>(
    build: F,
    params: &[Tensor<f64>],
    h: f64,
    subset: Option<Subset>,
) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        match build(&tape, &vars) {
            Ok(loss) => tape.value(loss).item(),
            Err(_) => f64::NAN,
        }
    };
    compare_with_numeric(&eval, params, &analytic, h, subset)
}

/// Step used by [`model_gradcheck`]'s fourth-order differences.
pub const MODEL_STEP: f64 = 1e-3;

/// Checks every parameter of a randomized 64-bit model on a random
/// `len x batch` segment. Memory and recurrent state are first filled by a
/// preceding segment, and `alpha`, biases and gains are moved off their
/// initial values so that no gradient is trivially zero.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    len: usize,
    batch: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut model: Model<f64> = build_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for p in model.params_mut() {
        if p.name.ends_with("alpha") {
            p.value = Tensor::full([1], rng.gen_range(0.3..0.7));
        } else if p.name == "head.weight" {
            p.value = p.value.scale(10.0);
        } else if p.value.rank() == 1 {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
    }
    let vocab = cfg.vocab_size as u32;
    let toks: Vec<u32> = (0..(2 * len + 1) * batch)
        .map(|_| rng.gen_range(0..vocab))
        .collect();
    let (warm, seg) = toks.split_at(len * batch);
    let (_, state) = model.forward(
        warm,
        batch,
        &model.reset_state(batch),
        ForwardOptions::default(),
    )?;
    let (inputs, targets) = (&seg[..len * batch], &seg[batch..]);
    let build = |t: &Tape<f64>, v: &[Var]| -> Result<Var> {
        let (loss, _) = model.loss_on(
            t,
            v,
            inputs,
            targets,
            batch,
            &state,
            ForwardOptions::default(),
            None,
            None,
        )?;
        Ok(loss)
    };
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let tape = Tape::new();
    let vars = model.register(&tape);
    let grads = tape.backward(build(&tape, &vars)?)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        build(&tape, &vars).map_or(f64::NAN, |l| tape.value(l).item())
    };
    compare(&eval, &params, &analytic, MODEL_STEP, None, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttnSchedule;

    #[test]
    fn two_layer_model() {
        let cfg = ModelConfig {
            vocab_size: 7,
            n_layers: 2,
            d: 8,
            d_attn: 4,
            schedule: AttnSchedule::EveryK(1),
            max_mem: 16,
            ..Default::default()
        };
        let r = model_gradcheck(&cfg, 5, 2, 3).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::new([4], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        let report = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[w],
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn sign_flip_is_detected() {
        let w = Tensor::new([3], vec![0.5, -1.5, 2.0]).unwrap();
        let f = |ps: &[Tensor<f64>]| ps[0].data().iter().map(|v| v * v).sum::<f64>();
        let wrong = w.map(|v| -2.0 * v);
        let report = compare_with_numeric(&f, &[w], &[wrong], 1e-5, None).unwrap();
        // |a - n| / (|a| + |n|) with a = -n.
        assert!((report.max_rel_error - 1.0).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let w = Tensor::new([2], vec![1.0, 1e-7]).unwrap();
        let f = |ps: &[Tensor<f64>]| ps[0].data()[1].ln();
        let err = compare_with_numeric(
            &f,
            std::slice::from_ref(&w),
            std::slice::from_ref(&w),
            1e-5,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn subset_limits_checked_coordinates() {
        let w = Tensor::from_fn([50], |i| i as f64 * 0.01);
        let report = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[w],
            1e-5,
            Some(Subset {
                per_tensor: 7,
                seed: 3,
            }),
        )
        .unwrap();
        assert_eq!(report.checked, 7);
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Every tape primitive on small random shapes.
    #[test]
    fn primitives_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tol = 1e-6;
        type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
            (
                "matmul",
                vec![rand_t(&[4, 3], &mut rng), rand_t(&[3, 5], &mut rng)],
                Box::new(|t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let s = t.mul(m, m)?;
                    t.sum(s)
                }),
            ),
            (
                "linear",
                vec![
                    rand_t(&[2, 3, 4], &mut rng),
                    rand_t(&[5, 4], &mut rng),
                    rand_t(&[5], &mut rng),
                ],
                Box::new(|t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    let s = t.mul(y, y)?;
                    t.sum(s)
                }),
            ),
            (
                "bmm",
                vec![
                    rand_t(&[2, 3, 4], &mut rng),
                    rand_t(&[2, 4, 5], &mut rng),
                    rand_t(&[2, 6, 4], &mut rng),
                ],
                Box::new(|t, v| {
                    let y = t.bmm(v[0], v[1], false)?;
                    let z = t.bmm(v[0], v[2], true)?;
                    let (sy, sz) = (t.mul(y, y)?, t.mul(z, z)?);
                    let a = t.sum(sy)?;
                    let b = t.sum(sz)?;
                    t.add(a, b)
                }),
            ),
            (
                "softmax+mask",
                vec![rand_t(&[2, 3, 5], &mut rng), rand_t(&[2, 3, 5], &mut rng)],
                Box::new(|t, v| {
                    let m = t.causal_mask(v[0], 2)?;
                    let p = t.softmax_rows(m)?;
                    let w = t.mul(p, v[1])?;
                    t.sum(w)
                }),
            ),
            (
                "layer_norm",
                vec![
                    rand_t(&[3, 6], &mut rng),
                    rand_t(&[6], &mut rng),
                    rand_t(&[6], &mut rng),
                    rand_t(&[3, 6], &mut rng),
                ],
                Box::new(|t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let w = t.mul(y, v[3])?;
                    t.sum(w)
                }),
            ),
            (
                "cross_entropy",
                vec![rand_t(&[4, 5], &mut rng)],
                Box::new(|t, v| {
                    t.cross_entropy(v[0], &[1, 4, 0, 2], Some(&[true, true, false, true]))
                }),
            ),
            (
                "embedding",
                vec![rand_t(&[4, 3], &mut rng), rand_t(&[2, 2, 3], &mut rng)],
                Box::new(|t, v| {
                    let e = t.embedding(v[0], &[1, 3, 1, 0], &[2, 2])?;
                    let w = t.mul(e, v[1])?;
                    t.sum(w)
                }),
            ),
            (
                "swap+concat+reshape",
                vec![
                    rand_t(&[2, 3, 2], &mut rng),
                    rand_t(&[3, 1, 2], &mut rng),
                    rand_t(&[3, 3, 2], &mut rng),
                ],
                Box::new(|t, v| {
                    let s = t.swap01(v[0])?;
                    let c = t.concat1(s, v[1])?;
                    let w = t.mul(c, v[2])?;
                    let r = t.reshape(w, &[9, 2])?;
                    let sq = t.mul(r, r)?;
                    t.sum(sq)
                }),
            ),
            (
                "scale_by+sigmoid+sub",
                vec![
                    rand_t(&[3, 2], &mut rng),
                    rand_t(&[1], &mut rng),
                    rand_t(&[3, 2], &mut rng),
                ],
                Box::new(|t, v| {
                    let a = t.scale_by(v[0], v[1])?;
                    let s = t.sigmoid(a)?;
                    let d = t.sub(s, v[2])?;
                    let k = t.scale(d, 1.7)?;
                    let sq = t.mul(k, k)?;
                    t.sum(sq)
                }),
            ),
        ];
        for (name, params, build) in cases {
            let report = gradcheck(|t, v| build(t, v), &params, 1e-5, None).unwrap();
            assert!(report.max_rel_error < tol, "{name}: {report:?}");
        }
    }

    #[test]
    fn dropout_gradient_uses_same_mask() {
        let x = Tensor::from_fn([20], |i| 0.1 * i as f64 + 0.3);
        let report = gradcheck(
            |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let y = t.dropout(v[0], 0.4, &mut rng)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &[x],
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
