use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{sru_forward_fused, sru_forward_naive, RecurrenceParams};
use crate::model::{AttnSchedule, ForwardOptions, Model, ModelConfig};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Operation category used to bucket forward time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpCategory {
    MatMul,
    Attention,
    Recurrence,
    LayerNorm,
    Transpose,
    Other,
}

impl OpCategory {
    pub const ALL: [OpCategory; 6] = [
        OpCategory::MatMul,
        OpCategory::Attention,
        OpCategory::Recurrence,
        OpCategory::LayerNorm,
        OpCategory::Transpose,
        OpCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCategory::MatMul => "matmul",
            OpCategory::Attention => "attention",
            OpCategory::Recurrence => "recurrence",
            OpCategory::LayerNorm => "layer_norm",
            OpCategory::Transpose => "transpose",
            OpCategory::Other => "other",
        }
    }

    fn index(self) -> usize {
        OpCategory::ALL
            .iter()
            .position(|&c| c == self)
            .expect("listed")
    }
}

/// Accumulated wall time and call count per category.
#[derive(Clone, Debug, Default)]
pub struct OpTimings {
    pub total: [Duration; 6],
    pub calls: [u64; 6],
}

impl OpTimings {
    pub fn record(&mut self, cat: OpCategory, d: Duration) {
        let i = cat.index();
        self.total[i] += d;
        self.calls[i] += 1;
    }

    pub fn get(&self, cat: OpCategory) -> (Duration, u64) {
        let i = cat.index();
        (self.total[i], self.calls[i])
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// A profiling setup: model shape plus batch and unroll.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: &'static str,
    pub model: ModelConfig,
    pub batch: usize,
    pub unroll: usize,
}

impl Scenario {
    /// Desk-scale `small` (M = 512) and `large` (M = 1024) setups, B = 16.
    pub fn named(name: &str) -> Result<Scenario> {
        let model = |n_layers, d, d_attn| ModelConfig {
            vocab_size: 256,
            n_layers,
            d,
            d_attn,
            schedule: AttnSchedule::EveryK(1),
            ..Default::default()
        };
        match name {
            "small" => Ok(Scenario {
                name: "small",
                model: ModelConfig {
                    max_mem: 512,
                    ..model(4, 256, 64)
                },
                batch: 16,
                unroll: 512,
            }),
            "large" => Ok(Scenario {
                name: "large",
                model: ModelConfig {
                    max_mem: 1024,
                    ..model(4, 512, 128)
                },
                batch: 16,
                unroll: 1024,
            }),
            other => Err(Error::Usage(format!(
                "unknown profile scenario '{other}' (small, large)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryStat {
    pub category: OpCategory,
    /// Median over repetitions of the per-forward total.
    pub total_ms: f64,
    /// Calls per forward.
    pub calls: u64,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub batch: usize,
    pub unroll: usize,
    pub d: usize,
    pub d_attn: usize,
    pub n_layers: usize,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Median wall time of one forward.
    pub forward_ms: f64,
    pub categories: Vec<CategoryStat>,
}

pub const PROFILE_CSV_HEADER: &str = "category,total_ms,calls,share";

impl ProfileReport {
    pub fn share(&self, cat: OpCategory) -> f64 {
        self.categories
            .iter()
            .find(|c| c.category == cat)
            .map_or(0.0, |c| c.share)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{PROFILE_CSV_HEADER}\n");
        for c in &self.categories {
            out.push_str(&format!(
                "{},{:.4},{},{:.6}\n",
                c.category.name(),
                c.total_ms,
                c.calls,
                c.share
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "forward B={} M={} d={} d'={} layers={} reps={} warmup={} threads={}: {:.2} ms\n",
            self.batch,
            self.unroll,
            self.d,
            self.d_attn,
            self.n_layers,
            self.reps,
            self.warmup,
            self.threads,
            self.forward_ms
        );
        out.push_str(&format!(
            "{:<12}{:>12}{:>8}{:>8}\n",
            "category", "ms", "calls", "share"
        ));
        for c in &self.categories {
            out.push_str(&format!(
                "{:<12}{:>12.3}{:>8}{:>7.1}%\n",
                c.category.name(),
                c.total_ms,
                c.calls,
                100.0 * c.share
            ));
        }
        out
    }
}

/// Times `reps` instrumented forward passes over a `batch x unroll` segment
/// (after `warmup` discarded ones) with attention memory already full, and
/// buckets the time by operation category. Time not attributed to any
/// primitive (bookkeeping) is counted as `other`.
pub fn profile_forward<E: Element>(
    model: &Model<E>,
    batch: usize,
    unroll: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<ProfileReport> {
    if reps < 3 {
        return Err(Error::Usage(format!(
            "profiling needs at least 3 repetitions, got {reps}"
        )));
    }
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = cfg.vocab_size as u32;
    let mut tokens = || -> Vec<u32> {
        (0..batch * unroll)
            .map(|_| rng.gen_range(0..vocab))
            .collect()
    };
    let (_, state) = model.forward(
        &tokens(),
        batch,
        &model.reset_state(batch),
        ForwardOptions::default(),
    )?;
    let input = tokens();
    let mut per_cat: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); OpCategory::ALL.len()];
    let mut calls = [0u64; 6];
    let mut walls = Vec::with_capacity(reps);
    for rep in 0..warmup + reps {
        let tape = Tape::no_grad().with_profiler();
        let vars = model.register(&tape);
        let start = Instant::now();
        model.forward_on(
            &tape,
            &vars,
            &input,
            batch,
            &state,
            ForwardOptions::default(),
            None,
        )?;
        let wall = start.elapsed().as_secs_f64() * 1e3;
        if rep < warmup {
            continue;
        }
        let t = tape.timings().expect("profiler enabled");
        let tracked: f64 = t.total.iter().map(|d| d.as_secs_f64() * 1e3).sum();
        for (i, cat) in OpCategory::ALL.iter().enumerate() {
            let (d, c) = t.get(*cat);
            let mut ms = d.as_secs_f64() * 1e3;
            if *cat == OpCategory::Other {
                ms += (wall - tracked).max(0.0);
            }
            per_cat[i].push(ms);
            calls[i] = c;
        }
        walls.push(wall);
    }
    let medians: Vec<f64> = per_cat.iter_mut().map(|v| median(v)).collect();
    let sum: f64 = medians.iter().sum();
    let categories = OpCategory::ALL
        .iter()
        .enumerate()
        .map(|(i, &category)| CategoryStat {
            category,
            total_ms: medians[i],
            calls: calls[i],
            share: if sum > 0.0 { medians[i] / sum } else { 0.0 },
        })
        .collect();
    Ok(ProfileReport {
        batch,
        unroll,
        d: cfg.d,
        d_attn: cfg.d_attn,
        n_layers: cfg.n_layers,
        reps,
        warmup,
        threads: rayon::current_num_threads(),
        forward_ms: median(&mut walls),
        categories,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelBench {
    pub len: usize,
    pub batch: usize,
    pub d: usize,
    pub reps: usize,
    pub threads: usize,
    pub max_diff: f64,
    pub fused_ms: f64,
    pub naive_ms: f64,
}

impl KernelBench {
    pub fn speedup(&self) -> f64 {
        self.naive_ms / self.fused_ms
    }
}

pub const KERNEL_TOLERANCE: f64 = 1e-6;

/// Median inference-mode wall time of the fused and naive scans on the same
/// random 32-bit inputs. Fails before timing if the outputs differ by
/// [`KERNEL_TOLERANCE`] or more.
pub fn bench_kernel(
    len: usize,
    batch: usize,
    d: usize,
    reps: usize,
    seed: u64,
) -> Result<KernelBench> {
    if reps < 5 {
        return Err(Error::Usage(format!(
            "kernel benchmark needs at least 5 repetitions, got {reps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize], scale: f32| {
        Tensor::<f32>::from_fn(shape, |_| rng.gen_range(-scale..scale))
    };
    let u = rand(&[len, batch, 3 * d], 1.0);
    let x = rand(&[len, batch, d], 1.0);
    let c0 = rand(&[batch, d], 1.0);
    let params = RecurrenceParams {
        v_f: rand(&[d], 0.5),
        v_r: rand(&[d], 0.5),
        b_f: rand(&[d], 0.5),
        b_r: rand(&[d], 0.5),
    };
    let fused = sru_forward_fused(&u, &x, &params, &c0, false)?;
    let (h, c) = sru_forward_naive(&u, &x, &params, &c0)?;
    let max_diff = fused.h.max_abs_diff(&h).max(fused.c_last.max_abs_diff(&c));
    if max_diff.is_nan() || max_diff >= KERNEL_TOLERANCE {
        return Err(Error::KernelMismatch { diff: max_diff });
    }
    let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
        let mut ts = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            f()?;
            ts.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(median(&mut ts))
    };
    let fused_ms = time(&mut || sru_forward_fused(&u, &x, &params, &c0, false).map(drop))?;
    let naive_ms = time(&mut || sru_forward_naive(&u, &x, &params, &c0).map(drop))?;
    Ok(KernelBench {
        len,
        batch,
        d,
        reps,
        threads: rayon::current_num_threads(),
        max_diff,
        fused_ms,
        naive_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn tiny() -> Model<f32> {
        let cfg = ModelConfig {
            vocab_size: 20,
            n_layers: 2,
            d: 16,
            d_attn: 8,
            max_mem: 32,
            ..Default::default()
        };
        build_model(&cfg, 1).unwrap()
    }

    #[test]
    fn shares_sum_to_one() {
        let r = profile_forward(&tiny(), 2, 16, 3, 1, 0).unwrap();
        let total: f64 = r.categories.iter().map(|c| c.share).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(r.categories.iter().all(|c| c.total_ms >= 0.0));
        assert!(
            r.categories
                .iter()
                .find(|c| c.category == OpCategory::Recurrence)
                .unwrap()
                .calls
                == 2
        );
        let csv = r.to_csv();
        assert!(csv.starts_with(PROFILE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
        assert!(profile_forward(&tiny(), 2, 16, 2, 1, 0).is_err());
    }

    #[test]
    fn instrumentation_does_not_change_logits() {
        let m = tiny();
        let toks: Vec<u32> = (0..24).map(|i| i % 20).collect();
        let state = m.reset_state(2);
        let plain = Tape::no_grad();
        let vars = m.register(&plain);
        let (a, _) = m
            .forward_on(
                &plain,
                &vars,
                &toks,
                2,
                &state,
                ForwardOptions::default(),
                None,
            )
            .unwrap();
        let prof = Tape::no_grad().with_profiler();
        let vars = m.register(&prof);
        let (b, _) = m
            .forward_on(
                &prof,
                &vars,
                &toks,
                2,
                &state,
                ForwardOptions::default(),
                None,
            )
            .unwrap();
        assert_eq!(plain.value(a), prof.value(b));
    }

    #[test]
    fn kernel_bench_gates_and_reports() {
        let r = bench_kernel(16, 2, 8, 5, 0).unwrap();
        assert!(r.max_diff < KERNEL_TOLERANCE);
        assert!(r.fused_ms > 0.0 && r.naive_ms > 0.0);
        assert!(bench_kernel(4, 1, 4, 4, 0).is_err());
    }

    #[test]
    fn scenarios() {
        assert_eq!(Scenario::named("small").unwrap().unroll, 512);
        assert_eq!(Scenario::named("large").unwrap().unroll, 1024);
        assert!(Scenario::named("huge").is_err());
    }
}
