//! RAdam with decoupled weight decay, the warmup + cosine schedule, and
//! global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            lr: 3e-4,
            weight_decay: 0.1,
            warmup_steps: 16_000,
            total_steps: 400_000,
            clip_norm: 1.0,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return fail("weight_decay must be >= 0, eps and clip_norm > 0".into());
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then a single half-cosine down to 0 at
/// `total_steps`. Steps past the end give 0.
pub fn cosine_lr(step: u64, cfg: &OptimConfig) -> f64 {
    if step > cfg.total_steps {
        log::warn!(
            "step {step} past total_steps {}; lr clamped to 0",
            cfg.total_steps
        );
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Length of the approximated simple moving average, `rho_t`.
pub fn rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let bt = beta2.powf(t as f64);
    rho_inf - 2.0 * t as f64 * bt / (1.0 - bt)
}

/// Variance rectification term `r_t`, or `None` when `rho_t <= 4` and the
/// un-rectified momentum step is used.
pub fn rectification(t: u64, beta2: f64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let rho_t = rho(t, beta2);
    (rho_t > 4.0).then(|| {
        (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            .sqrt()
    })
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<E: Element>(grads: &mut [Tensor<E>], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Usage(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient norm".into(),
        });
    }
    if norm > max_norm {
        let scale = E::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    Ok(norm)
}

/// Moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdam<E> {
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub s: Vec<Tensor<E>>,
}

impl<E: Element> RAdam<E> {
    pub fn new(params: &[Param<E>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        RAdam {
            step: 0,
            m: zeros(),
            s: zeros(),
        }
    }

    /// One update with learning rate `lr`. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [Param<E>],
        grads: &[Tensor<E>],
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "{} params, {} grads, {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("radam_step", p.value.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {}", p.name),
                });
            }
        }
        if lr < 0.0 {
            return Err(Error::Usage(format!("negative learning rate {lr}")));
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powf(t as f64);
        let bc2 = 1.0 - b2.powf(t as f64);
        let rect = rectification(t, b2);
        let (eb1, eb2) = (E::of(b1), E::of(b2));
        let (ob1, ob2) = (E::of(1.0 - b1), E::of(1.0 - b2));
        for ((p, g), (m, s)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.s.iter_mut()))
        {
            let decay = if p.decays() {
                lr * cfg.weight_decay
            } else {
                0.0
            };
            let decay = E::of(decay);
            let theta = p.value.data_mut();
            let (md, sd) = (m.data_mut(), s.data_mut());
            for i in 0..theta.len() {
                let gi = g.data()[i];
                md[i] = eb1 * md[i] + ob1 * gi;
                sd[i] = eb2 * sd[i] + ob2 * gi * gi;
                let m_hat = md[i].f64() / bc1;
                let update = match rect {
                    Some(r) => r * m_hat / ((sd[i].f64() / bc2).sqrt() + cfg.eps),
                    None => m_hat,
                };
                let old = theta[i];
                theta[i] = old - E::of(lr * update) - decay * old;
            }
        }
        Ok(())
    }
}
