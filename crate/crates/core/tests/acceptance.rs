//! Acceptance checks. Each prints one PASS/FAIL line with the measured
//! values; the process fails if any check fails. Pass a substring (such as
//! `6` or `recall`) to run only matching checks.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sruxx_core::attention::{
    attn_block, attn_block_on, AttentionMemory, AttentionOptions, AttentionParams,
};
use sruxx_core::data::{ingest_bytes, IngestOptions};
use sruxx_core::kernel::{sru_forward_fused, sru_forward_naive, RecurrenceParams};
use sruxx_core::optim::{rectification, rho};
use sruxx_core::synth::{train_recall, RecallRun, RecallTask};
use sruxx_core::train::{
    self, load_trained, resolve_vocab, sweep, sweep_csv, token_nlls, train_and_evaluate,
    TrainOptions, Trainer, DIVERGED,
};
use sruxx_core::{
    bench_kernel, build_model, cosine_lr, count_params, evaluate, model_gradcheck, profile_forward,
    AttnSchedule, Corpus, Element, ForwardOptions, Model, ModelConfig, OpCategory, OptimConfig,
    RAdam, RunConfig, Scenario, Tape, Tensor,
};

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, Duration, fn() -> Check);

fn criteria() -> Vec<Criterion> {
    let min = |m: u64| Duration::from_secs(60 * m);
    vec![
        (
            1,
            "fused kernel matches the naive oracle",
            Duration::from_secs(10),
            kernel_oracle,
        ),
        (
            2,
            "model gradients match finite differences",
            min(1),
            model_gradients,
        ),
        (
            3,
            "attention is skipped at alpha = 0 and engages in training",
            min(10),
            alpha_skip,
        ),
        (4, "logits are causal", min(5), causality),
        (
            5,
            "segmented evaluation and detached memory",
            min(5),
            memory_protocol,
        ),
        (
            6,
            "long-range recall needs attention",
            min(30),
            long_range_recall,
        ),
        (7, "desk-scale byte language model", min(60), desk_scale_lm),
        (
            8,
            "parameter counts of the full-size configurations",
            min(1),
            parameter_counts,
        ),
        (
            9,
            "learning-rate schedule and RAdam warm start",
            min(1),
            schedule_math,
        ),
        (
            10,
            "fused speedup and forward profile",
            min(10),
            performance,
        ),
        (
            11,
            "checkpoint round trip and lr x wd sweep",
            min(10),
            checkpoint_and_sweep,
        ),
    ]
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<Criterion> = criteria()
        .into_iter()
        .filter(|(id, name, ..)| {
            filters.is_empty()
                || filters
                    .iter()
                    .any(|f| id.to_string() == *f || name.contains(f.as_str()))
        })
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, budget, run) in selected {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = outcome.pass && in_time;
        let timing = if in_time {
            format!("{:.1} s", took.as_secs_f64())
        } else {
            format!(
                "{:.1} s, over the {} s budget",
                took.as_secs_f64(),
                budget.as_secs()
            )
        };
        println!(
            "{} {:>2} {name}: {} [{timing}]",
            if pass { "PASS" } else { "FAIL" },
            id,
            outcome.detail
        );
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn rand_tensor<E: Element>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::of(rng.gen_range(-scale..scale)))
}

fn kernel_max_diff<E: Element>(rng: &mut ChaCha8Rng) -> f64 {
    let (l, b, d) = (
        rng.gen_range(1..=64),
        rng.gen_range(1..=4),
        rng.gen_range(1..=32),
    );
    let u = rand_tensor::<E>(&[l, b, 3 * d], 2.0, rng);
    let x = rand_tensor::<E>(&[l, b, d], 2.0, rng);
    let c0 = rand_tensor::<E>(&[b, d], 1.0, rng);
    let p = RecurrenceParams {
        v_f: rand_tensor(&[d], 1.0, rng),
        v_r: rand_tensor(&[d], 1.0, rng),
        b_f: rand_tensor(&[d], 1.0, rng),
        b_r: rand_tensor(&[d], 1.0, rng),
    };
    let fused = sru_forward_fused(&u, &x, &p, &c0, true).unwrap();
    let (h, c) = sru_forward_naive(&u, &x, &p, &c0).unwrap();
    fused.h.max_abs_diff(&h).max(fused.c_last.max_abs_diff(&c))
}

fn kernel_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut d32, mut d64) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        d32 = d32.max(kernel_max_diff::<f32>(&mut rng));
        d64 = d64.max(kernel_max_diff::<f64>(&mut rng));
    }
    check(
        d32 < 1e-6 && d64 < 1e-12,
        format!("100 instances, max |fused - naive| {d32:.2e} (32-bit, < 1e-6), {d64:.2e} (64-bit, < 1e-12)"),
    )
}

fn model_gradients() -> Check {
    let cfg = ModelConfig {
        vocab_size: 7,
        n_layers: 2,
        d: 8,
        d_attn: 4,
        schedule: AttnSchedule::EveryK(1),
        dropout: 0.0,
        max_mem: 16,
        ..Default::default()
    };
    let r = model_gradcheck(&cfg, 5, 2, 1).unwrap();
    check(
        r.max_rel_error < 1e-6,
        format!(
            "2 layers, d=8, d'=4, L=5, B=2, 64-bit: max relative error {:.2e} over {} coordinates (< 1e-6)",
            r.max_rel_error, r.checked
        ),
    )
}

/// Up to 1 MB of English text: `$SRUXX_CORPUS`, else installed
/// documentation, else generated sentences.
fn real_text() -> (Vec<u8>, String) {
    const CAP: usize = 1 << 20;
    if let Ok(path) = std::env::var("SRUXX_CORPUS") {
        let mut bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
        bytes.truncate(CAP);
        return (bytes, path);
    }
    let mut files = Vec::new();
    for (root, ext) in [
        ("/usr/share/perl", "pod"),
        ("/usr/share/doc", "txt"),
        ("/usr/share/cmake", "rst"),
    ] {
        collect(Path::new(root), ext, &mut files);
        let parent = Path::new(root).parent().unwrap();
        if let Ok(entries) = std::fs::read_dir(parent) {
            for e in entries.flatten() {
                let p = e.path();
                let name = p.file_name().unwrap().to_string_lossy().to_string();
                let stem = Path::new(root)
                    .file_name()
                    .unwrap()
                    .to_string_lossy()
                    .to_string();
                if name.starts_with(&stem) && p != Path::new(root) {
                    collect(&p, ext, &mut files);
                }
            }
        }
    }
    files.sort();
    files.dedup();
    let mut bytes = Vec::new();
    for f in &files {
        if bytes.len() >= CAP {
            break;
        }
        if let Ok(b) = std::fs::read(f) {
            bytes.extend_from_slice(&b);
        }
    }
    if bytes.len() >= CAP / 2 {
        bytes.truncate(CAP);
        return (
            bytes,
            format!("{} installed documentation files", files.len()),
        );
    }
    (synthetic_text(CAP), "generated sentences".into())
}

fn collect(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect(&p, ext, out);
        } else if p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
}

fn synthetic_text(len: usize) -> Vec<u8> {
    let subjects = [
        "the model",
        "a small network",
        "the old reader",
        "every layer",
        "this recurrence",
    ];
    let verbs = ["learns", "reads", "predicts", "remembers", "forgets"];
    let objects = [
        "the next byte",
        "long contexts",
        "simple patterns",
        "its own state",
        "the sentence",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        let s = format!(
            "{} {} {}.\n",
            subjects[rng.gen_range(0..5)],
            verbs[rng.gen_range(0..5)],
            objects[rng.gen_range(0..5)]
        );
        out.extend_from_slice(s.as_bytes());
    }
    out.truncate(len);
    out
}

fn corpus(bytes: &[u8]) -> Corpus {
    ingest_bytes(bytes, &IngestOptions::default()).unwrap()
}

fn alpha_skip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, dp) = (16, 8);
    let mut p = AttentionParams::<f64> {
        w_q: rand_tensor(&[dp, d], 0.5, &mut rng),
        w_q_inner: None,
        w_k: rand_tensor(&[dp, dp], 0.5, &mut rng),
        w_v: rand_tensor(&[dp, dp], 0.5, &mut rng),
        w_o: rand_tensor(&[3 * d, dp], 0.5, &mut rng),
        alpha: Tensor::zeros([1]),
        ln_gain: Tensor::full([dp], 1.0),
        ln_bias: Tensor::zeros([dp]),
    };
    let opts = AttentionOptions {
        max_mem: 8,
        ..Default::default()
    };
    let x = rand_tensor::<f64>(&[6, 2, d], 1.0, &mut rng);
    let mem = AttentionMemory::from_states(rand_tensor(&[2, 8, dp], 1.0, &mut rng)).unwrap();
    let (base, _) = attn_block(&x, &mem, &p, &opts, None).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        p.w_k = rand_tensor(&[dp, dp], 3.0, &mut rng);
        p.w_v = rand_tensor(&[dp, dp], 3.0, &mut rng);
        let (u, _) = attn_block(&x, &mem, &p, &opts, None).unwrap();
        worst = worst.max(u.max_abs_diff(&base));
    }

    let (text, _) = real_text();
    let corpus = corpus(&text);
    let mut cfg = RunConfig::preset("tiny").unwrap();
    cfg.model.vocab_size = corpus.vocab.len();
    cfg.optim.total_steps = 200;
    cfg.optim.warmup_steps = 20;
    cfg.optim.lr = 2e-3;
    let model = build_model::<f32>(&cfg.model, 1).unwrap();
    let mut trainer = Trainer::new(model, &cfg, &corpus.train).unwrap();
    for _ in 0..200 {
        trainer.step().unwrap();
    }
    let alphas: Vec<f64> = trainer
        .model()
        .params()
        .iter()
        .filter(|p| p.name.ends_with("alpha"))
        .map(|p| p.value.data()[0] as f64)
        .collect();
    let engaged = !alphas.is_empty() && alphas.iter().all(|a| a.abs() > 0.0);
    check(
        worst < 1e-7 && engaged,
        format!(
            "alpha=0: max output change under random W_k, W_v {worst:.1e} (< 1e-7); alpha after 200 steps {:?}",
            alphas.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn randomized_model(cfg: &ModelConfig, seed: u64) -> Model<f32> {
    let mut m = build_model::<f32>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in m.params_mut() {
        if p.name.ends_with("alpha") {
            p.value = Tensor::full([1], rng.gen_range(0.3..1.0));
        }
    }
    m
}

fn causality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    for i in 0..20 {
        let cfg = ModelConfig {
            vocab_size: rng.gen_range(5..40),
            n_layers: rng.gen_range(1..=3),
            d: 8 * rng.gen_range(1..=4),
            d_attn: 4 * rng.gen_range(1..=2),
            schedule: AttnSchedule::EveryK(rng.gen_range(1..=2)),
            max_mem: rng.gen_range(0..=12),
            ..Default::default()
        };
        let m = randomized_model(&cfg, i);
        let (b, l) = (rng.gen_range(1..=3), rng.gen_range(2..=12));
        let v = cfg.vocab_size as u32;
        let warm: Vec<u32> = (0..b * 6).map(|_| rng.gen_range(0..v)).collect();
        let (_, state) = m
            .forward(&warm, b, &m.reset_state(b), ForwardOptions::default())
            .unwrap();
        let toks: Vec<u32> = (0..b * l).map(|_| rng.gen_range(0..v)).collect();
        let t = rng.gen_range(0..l - 1);
        let mut changed = toks.clone();
        for tok in &mut changed[(t + 1) * b..] {
            *tok = (*tok + rng.gen_range(1..v)) % v;
        }
        let (a, _) = m
            .forward(&toks, b, &state, ForwardOptions::default())
            .unwrap();
        let (c, _) = m
            .forward(&changed, b, &state, ForwardOptions::default())
            .unwrap();
        let keep = (t + 1) * b * cfg.vocab_size;
        let diff = a.data()[..keep]
            .iter()
            .zip(&c.data()[..keep])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        worst = worst.max(diff);
    }
    check(
        worst <= 1e-6,
        format!("20 random models: max change of logits at or before t {worst:.1e} (<= 1e-6)"),
    )
}

fn memory_protocol() -> Check {
    let cfg = ModelConfig {
        vocab_size: 30,
        n_layers: 3,
        d: 32,
        d_attn: 16,
        schedule: AttnSchedule::EveryK(1),
        max_mem: 64,
        ..Default::default()
    };
    let m = randomized_model(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens: Vec<u32> = (0..301).map(|_| rng.gen_range(0..30)).collect();
    let whole = token_nlls(&m, &tokens, 300, 300).unwrap();
    let mut worst = 0.0f64;
    for unroll in [7, 32, 100] {
        let split = token_nlls(&m, &tokens, unroll, 300).unwrap();
        worst = split
            .iter()
            .zip(&whole)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }

    let p = AttentionParams::<f64> {
        w_q: rand_tensor(&[4, 8], 0.5, &mut rng),
        w_q_inner: None,
        w_k: rand_tensor(&[4, 4], 0.5, &mut rng),
        w_v: rand_tensor(&[4, 4], 0.5, &mut rng),
        w_o: rand_tensor(&[24, 4], 0.5, &mut rng),
        alpha: Tensor::full([1], 0.8),
        ln_gain: Tensor::full([4], 1.0),
        ln_bias: Tensor::zeros([4]),
    };
    let opts = AttentionOptions {
        max_mem: 8,
        ..Default::default()
    };
    let tape = Tape::<f64>::new();
    let vars = p.register(&tape);
    let x1 = tape.param(rand_tensor(&[5, 2, 8], 1.0, &mut rng));
    let x2 = tape.param(rand_tensor(&[5, 2, 8], 1.0, &mut rng));
    let (_, mem) = attn_block_on(&tape, x1, &AttentionMemory::empty(), &vars, &opts, None).unwrap();
    let (u2, _) = attn_block_on(&tape, x2, &mem, &vars, &opts, None).unwrap();
    let loss = tape.sum(tape.mul(u2, u2).unwrap()).unwrap();
    let g = tape.backward(loss).unwrap();
    let into_memory = g.wrt(x1).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let live = g.wrt(x2).data().iter().any(|&v| v != 0.0);
    check(
        worst < 1e-4 && into_memory == 0.0 && live,
        format!("unroll 7/32/100 vs one segment: max per-token NLL diff {worst:.1e} (< 1e-4); max |grad| into memory {into_memory}"),
    )
}

fn long_range_recall() -> Check {
    let task = RecallTask::default();
    let base = ModelConfig {
        n_layers: 2,
        d: 64,
        d_attn: 32,
        max_mem: 0,
        ..Default::default()
    };
    let run = RecallRun {
        batch_size: 16,
        steps: 3000,
        optim: OptimConfig {
            lr: 3e-3,
            warmup_steps: 100,
            total_steps: 3000,
            weight_decay: 0.01,
            ..Default::default()
        },
        eval_batch: 256,
        eval_interval: 100,
        target: 0.995,
        seed: 1,
    };
    let attn_cfg = ModelConfig {
        schedule: AttnSchedule::EveryK(1),
        ..base.clone()
    };
    let (_, with) = train_recall(&attn_cfg, &task, &run).unwrap();
    let none_cfg = ModelConfig {
        schedule: AttnSchedule::none(),
        ..base
    };
    let (_, without) = train_recall(
        &none_cfg,
        &task,
        &RecallRun {
            eval_interval: 300,
            target: 0.0,
            ..run
        },
    )
    .unwrap();
    check(
        with.accuracy >= 0.99 && with.steps <= 3000 && without.accuracy <= 0.60,
        format!(
            "gap {}: attention every layer {:.3} accuracy at step {} (>= 0.99 within 3000); no attention {:.3} at step {} (<= 0.60)",
            task.gap, with.accuracy, with.steps, without.accuracy, without.steps
        ),
    )
}

fn desk_scale_lm() -> Check {
    let (text, source) = real_text();
    let corpus = corpus(&text);
    let mut cfg = RunConfig {
        model: ModelConfig {
            vocab_size: 0,
            n_layers: 4,
            d: 256,
            d_attn: 64,
            schedule: AttnSchedule::EveryK(2),
            max_mem: 128,
            dropout: 0.0,
            ..Default::default()
        },
        optim: OptimConfig {
            lr: 2e-3,
            warmup_steps: 200,
            total_steps: 3000,
            weight_decay: 0.1,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.batch_size = 16;
    cfg.train.unroll = 128;
    cfg.train.eval_interval = 0;
    cfg.train.log_interval = 100;
    resolve_vocab(&mut cfg, &corpus).unwrap();
    let out = train_and_evaluate(&cfg, &corpus, &TrainOptions::default()).unwrap();
    let dev = out.final_dev.unwrap();
    let first = out.rows.first().map_or(f64::NAN, |r| r.train_nll);
    check(
        dev.bpc < 3.0,
        format!(
            "{} KB from {source}, vocab {}: dev bpc {:.3} after 3000 steps (< 3.0); train nll {:.3} -> {:.3}",
            text.len() / 1024,
            corpus.vocab.len(),
            dev.bpc,
            first,
            out.rows.last().map_or(f64::NAN, |r| r.train_nll)
        ),
    )
}

fn parameter_counts() -> Check {
    let full = ModelConfig {
        vocab_size: 200,
        n_layers: 10,
        d: 3072,
        d_attn: 768,
        schedule: AttnSchedule::EveryK(1),
        ..Default::default()
    };
    let every5 = ModelConfig {
        schedule: AttnSchedule::EveryK(5),
        ..full.clone()
    };
    let (a, b) = (count_params(&full) as f64, count_params(&every5) as f64);
    let (ea, eb) = ((a - 108e6).abs() / 108e6, (b - 98e6).abs() / 98e6);
    check(
        ea < 0.02 && b < a && eb < 0.05,
        format!(
            "every layer {:.2}M ({:.2}% from 108M, < 2%); every 5th {:.2}M ({:.2}% from 98M, < 5%)",
            a / 1e6,
            100.0 * ea,
            b / 1e6,
            100.0 * eb
        ),
    )
}

fn schedule_math() -> Check {
    let cfg = OptimConfig {
        lr: 3e-4,
        warmup_steps: 16_000,
        total_steps: 400_000,
        ..Default::default()
    };
    let peak = cosine_lr(16_000, &cfg);
    let end = cosine_lr(400_000, &cfg);
    let rho1 = rho(1, cfg.beta2);
    let unrectified = rectification(1, cfg.beta2).is_none();

    // One RAdam step from zero moments moves every parameter by lr * g.
    let mcfg = ModelConfig {
        vocab_size: 5,
        n_layers: 1,
        d: 4,
        d_attn: 2,
        ..Default::default()
    };
    let mut m = build_model::<f64>(&mcfg, 9).unwrap();
    let before: Vec<Tensor<f64>> = m.params().iter().map(|p| p.value.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grads: Vec<Tensor<f64>> = before
        .iter()
        .map(|t| rand_tensor(t.shape(), 1.0, &mut rng))
        .collect();
    let step_cfg = OptimConfig {
        weight_decay: 0.0,
        ..cfg.clone()
    };
    let mut opt = RAdam::new(m.params());
    opt.step(m.params_mut(), &grads, 1e-3, &step_cfg).unwrap();
    let mut worst = 0.0f64;
    for ((p, b), g) in m.params().iter().zip(&before).zip(&grads) {
        for ((a, b), g) in p.value.data().iter().zip(b.data()).zip(g.data()) {
            worst = worst.max(((b - a) - 1e-3 * g).abs());
        }
    }
    check(
        peak == 3e-4 && end == 0.0 && rho1 == 1.0 && unrectified && worst < 1e-15,
        format!(
            "cosine_lr(16000) = {peak:e}, cosine_lr(total) = {end}, rho_1 = {rho1}, step 1 unrectified: {unrectified} (max |update - lr*g| {worst:.1e})"
        ),
    )
}

fn performance() -> Check {
    let k = bench_kernel(1024, 16, 1024, 5, 0).unwrap();
    let s = Scenario::named("small").unwrap();
    let mut shares = Vec::new();
    let mut sums = Vec::new();
    for m in [128usize, 256, 512, 1024] {
        let cfg = ModelConfig {
            max_mem: m,
            ..s.model.clone()
        };
        let model = build_model::<f32>(&cfg, 1).unwrap();
        let r = profile_forward(&model, s.batch, m, 5, 2, 1).unwrap();
        sums.push(r.categories.iter().map(|c| c.share).sum::<f64>());
        shares.push(r.share(OpCategory::Attention));
    }
    let monotone = shares.windows(2).all(|w| w[1] > w[0]);
    let sums_ok = sums.iter().all(|s| (s - 1.0).abs() <= 0.01);
    check(
        k.speedup() >= 2.0 && monotone && sums_ok,
        format!(
            "kernel L=1024 B=16 d=1024: fused {:.1} ms vs naive {:.1} ms = {:.2}x (>= 2, {} thread(s)); attention share at M=128/256/512/1024: {} (increasing); shares sum to 1 within 0.01: {sums_ok}",
            k.fused_ms,
            k.naive_ms,
            k.speedup(),
            k.threads,
            shares.iter().map(|s| format!("{:.3}", s)).collect::<Vec<_>>().join("/")
        ),
    )
}

fn checkpoint_and_sweep() -> Check {
    let (text, _) = real_text();
    let corpus = corpus(&text[..text.len().min(200_000)]);
    let mut cfg = RunConfig::preset("tiny").unwrap();
    cfg.model.vocab_size = corpus.vocab.len();
    cfg.optim.total_steps = 100;
    cfg.optim.warmup_steps = 10;
    cfg.train.eval_tokens = 4096;
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        extra_records: sruxx_core::data::vocab_records(&corpus.vocab),
        skip_eval: false,
    };
    let model = build_model::<f32>(&cfg.model, 1).unwrap();
    let out = train::train(
        Trainer::new(model, &cfg, &corpus.train).unwrap(),
        &corpus.dev,
        &opts,
    )
    .unwrap();
    let saved = out.final_dev.unwrap().bpc;
    let (loaded, lcfg, _, _) = load_trained(out.checkpoints.last().unwrap()).unwrap();
    let dev = &corpus.dev[..corpus.dev.len().min(4097)];
    let reloaded = evaluate(
        &loaded,
        dev,
        lcfg.train.eval_unroll(),
        lcfg.train.eval_mem(),
    )
    .unwrap()
    .bpc;
    let bitwise = saved.to_bits() == reloaded.to_bits();

    let cells = sweep(&cfg, &corpus, &[2e-3, 10.0], &[0.01, 0.0]).unwrap();
    let csv = sweep_csv(&cells);
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let shaped = rows.len() == 3 && rows.iter().all(|r| r.len() == 3);
    let sentinels = shaped && rows[2][1..].iter().all(|c| *c == DIVERGED);
    let finite = shaped && rows[1][1..].iter().all(|c| c.parse::<f64>().is_ok());
    check(
        bitwise && shaped && sentinels && finite,
        format!(
            "dev bpc {saved:.6} saved vs {reloaded:.6} reloaded (bitwise: {bitwise}); sweep csv {}",
            csv.trim_end().replace('\n', " | ")
        ),
    )
}
