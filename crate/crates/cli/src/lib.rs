//! The `sruxx` command line. [`run`] parses arguments, resolves the run
//! configuration and dispatches; it returns the process exit code
//! (0 success, 1 usage or validation error, 2 runtime failure).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sruxx_core::data::vocab_records;
use sruxx_core::generate::generate;
use sruxx_core::profile::PROFILE_CSV_HEADER;
use sruxx_core::train::{
    self, load_corpus, load_trained, resolve_vocab, sweep_csv, TrainOptions, Trainer,
};
use sruxx_core::{
    bench_kernel, build_model, evaluate, model_gradcheck, profile_forward, AttnSchedule, Error,
    ModelConfig, RunConfig, Scenario,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub const THREADS_ENV: &str = "SRUXX_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "sruxx",
    version,
    about = "SRU / SRU++ language models on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file (`key = value` lines); a bare preset name also works.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in preset applied before --config.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every source of randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Kernel worker threads (default: $SRUXX_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a language model; with --checkpoint, resume from it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Training unroll (segment length).
        #[arg(long)]
        unroll: Option<usize>,
        /// Attention memory length.
        #[arg(long)]
        mem: Option<usize>,
    },
    /// Evaluate a checkpoint on the dev or test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Evaluation segment length.
        #[arg(long)]
        unroll: Option<usize>,
        /// Attention memory at evaluation (default: the unroll).
        #[arg(long)]
        mem: Option<usize>,
        #[arg(long, default_value = "test", value_parser = ["dev", "test"])]
        split: String,
    },
    /// Time the fused recurrence kernel against the naive one.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Sequence length.
        #[arg(long, default_value_t = 1024)]
        unroll: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Per-category forward-time breakdown.
    Profile {
        #[command(flatten)]
        common: Common,
        /// `small` or `large`; ignored when a config or preset is given.
        #[arg(long, default_value = "small")]
        scenario: String,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        unroll: Option<usize>,
        #[arg(long)]
        mem: Option<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Finite-difference check of every gradient of a random model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        dattn: usize,
        #[arg(long, default_value_t = 5)]
        unroll: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Learning-rate x weight-decay grid of short runs.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated learning rates (default: sweep_lr).
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f64>,
        /// Comma-separated weight decays (default: sweep_wd).
        #[arg(long, value_delimiter = ',')]
        wds: Vec<f64>,
    },
    /// Continue a prompt with a trained byte-level model.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "\n")]
        prompt: String,
        #[arg(short = 'n', long, default_value_t = 256)]
        n: usize,
        /// 0 picks the most likely byte.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Errors before any work starts are the user's: exit 1.
fn invalid(e: Error) -> Failure {
    usage(e.to_string())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("run `sruxx help` for usage");
            }
            f.code
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                usage(format!("{THREADS_ENV}: expected a thread count, got '{v}'"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        // Only the first configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn read_config(path: &Path) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if !path.exists() {
        // `--config tiny.cfg` finds the built-in preset of that name.
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let bare = path.parent().is_none_or(|p| p.as_os_str().is_empty());
        if bare && RunConfig::preset(stem).is_ok() {
            return RunConfig::preset(stem);
        }
    }
    cfg.apply_file(path)?;
    Ok(cfg)
}

/// Defaults, then preset, then config file, then --seed, then --set.
fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.preset {
        Some(name) => RunConfig::preset(name).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        let file = read_config(path).map_err(invalid)?;
        if common.preset.is_some() {
            // Layer only the keys the file sets on top of the preset.
            let text = fs::read_to_string(path).unwrap_or_else(|_| file.to_text());
            cfg.apply_text(&text).map_err(invalid)?;
        } else {
            cfg = file;
        }
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    apply_sets(&mut cfg, &common.set)?;
    Ok(cfg)
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<(), Failure> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v).map_err(invalid)?;
    }
    Ok(())
}

fn print_config(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    println!("# resolved config");
    print!("{}", cfg.to_text());
    println!();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join("resolved.cfg");
        fs::write(&path, cfg.to_text()).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            common,
            checkpoint,
            unroll,
            mem,
        } => cmd_train(&common, checkpoint.as_deref(), unroll, mem),
        Command::Eval {
            common,
            checkpoint,
            unroll,
            mem,
            split,
        } => cmd_eval(&common, &checkpoint, unroll, mem, &split),
        Command::Bench {
            common,
            unroll,
            batch,
            d,
            reps,
        } => cmd_bench(&common, unroll, batch, d, reps),
        Command::Profile {
            common,
            scenario,
            batch,
            unroll,
            mem,
            reps,
            warmup,
        } => cmd_profile(&common, &scenario, batch, unroll, mem, reps, warmup),
        Command::Gradcheck {
            common,
            layers,
            d,
            dattn,
            unroll,
            batch,
        } => cmd_gradcheck(&common, layers, d, dattn, unroll, batch),
        Command::Sweep { common, lrs, wds } => cmd_sweep(&common, lrs, wds),
        Command::Generate {
            common,
            checkpoint,
            prompt,
            n,
            temperature,
        } => cmd_generate(&common, &checkpoint, &prompt, n, temperature),
    }
}

fn cmd_train(
    common: &Common,
    checkpoint: Option<&Path>,
    unroll: Option<usize>,
    mem: Option<usize>,
) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    let resumed = match checkpoint {
        Some(path) => {
            let (model, cfg, _, opt) = load_trained(path).map_err(invalid)?;
            let opt = opt.ok_or_else(|| {
                usage(format!(
                    "{}: no optimizer state to resume from",
                    path.display()
                ))
            })?;
            Some((model, cfg, opt))
        }
        None => None,
    };
    let mut cfg = match &resumed {
        // The checkpoint's config is the base; only --seed and --set apply.
        Some((_, cfg, _)) => {
            let mut cfg = cfg.clone();
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            apply_sets(&mut cfg, &common.set)?;
            cfg
        }
        None => resolve(common)?,
    };
    if let Some(u) = unroll {
        cfg.train.unroll = u;
    }
    if let Some(m) = mem {
        cfg.model.max_mem = m;
    }
    cfg.validate().map_err(invalid)?;
    let corpus = load_corpus(&cfg).map_err(invalid)?;
    resolve_vocab(&mut cfg, &corpus).map_err(invalid)?;
    cfg.validate().map_err(invalid)?;
    print_config(&cfg, common.out.as_deref())?;

    let trainer = match resumed {
        Some((model, _, opt)) => {
            if model.config() != &cfg.model {
                return Err(usage("model settings differ from the checkpoint's"));
            }
            Trainer::resume(model, opt, &cfg, &corpus.train)?
        }
        None => Trainer::new(
            build_model(&cfg.model, cfg.train.seed)?,
            &cfg,
            &corpus.train,
        )?,
    };
    let opts = TrainOptions {
        out_dir: common.out.clone(),
        extra_records: vocab_records(&corpus.vocab),
        skip_eval: false,
    };
    let outcome = train::train(trainer, &corpus.dev, &opts)?;
    if let Some(r) = &outcome.final_dev {
        println!(
            "dev: bpc {:.4} nll {:.4} ppl {:.3} tokens {}",
            r.bpc, r.nll, r.ppl, r.tokens
        );
    }
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    unroll: Option<usize>,
    mem: Option<usize>,
    split: &str,
) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    let (model, mut cfg, vocab, _) = load_trained(checkpoint).map_err(invalid)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    apply_sets(&mut cfg, &common.set)?;
    if let Some(u) = unroll {
        cfg.train.eval_unroll = Some(u);
    }
    if let Some(m) = mem {
        cfg.train.eval_mem = Some(m);
    }
    cfg.validate().map_err(invalid)?;
    if model.config() != &cfg.model {
        return Err(usage("model settings differ from the checkpoint's"));
    }
    let corpus = load_corpus(&cfg).map_err(invalid)?;
    if let Some(v) = &vocab {
        if v != &corpus.vocab {
            return Err(usage(format!(
                "{}: vocabulary differs from the checkpoint's",
                cfg.train.data
            )));
        }
    }
    print_config(&cfg, common.out.as_deref())?;
    let tokens = if split == "dev" {
        &corpus.dev
    } else {
        &corpus.test
    };
    let (u, m) = (cfg.train.eval_unroll(), cfg.train.eval_mem());
    let r = evaluate(&model, tokens, u, m)?;
    println!(
        "{split}: bpc {:.4} nll {:.4} ppl {:.3} tokens {} (unroll {u}, mem {m})",
        r.bpc, r.nll, r.ppl, r.tokens
    );
    Ok(())
}

fn cmd_bench(
    common: &Common,
    len: usize,
    batch: usize,
    d: usize,
    reps: usize,
) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    if len == 0 || batch == 0 || d == 0 {
        return Err(usage("--unroll, --batch and --d must be positive"));
    }
    println!("# kernel bench L={len} B={batch} d={d} reps={reps}");
    let r = bench_kernel(len, batch, d, reps, common.seed.unwrap_or(0))?;
    let csv = format!(
        "len,batch,d,reps,threads,max_diff,fused_ms,naive_ms,speedup\n{},{},{},{},{},{:e},{:.4},{:.4},{:.3}\n",
        r.len,
        r.batch,
        r.d,
        r.reps,
        r.threads,
        r.max_diff,
        r.fused_ms,
        r.naive_ms,
        r.speedup()
    );
    println!(
        "max |fused - naive| {:.3e}; fused {:.3} ms, naive {:.3} ms, speedup {:.2}x ({} threads)",
        r.max_diff,
        r.fused_ms,
        r.naive_ms,
        r.speedup(),
        r.threads
    );
    if let Some(dir) = &common.out {
        write_out(dir, "bench.csv", &csv)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_profile(
    common: &Common,
    scenario: &str,
    batch: Option<usize>,
    unroll: Option<usize>,
    mem: Option<usize>,
    reps: usize,
    warmup: usize,
) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    let mut cfg = if common.config.is_some() || common.preset.is_some() {
        resolve(common)?
    } else {
        let s = Scenario::named(scenario).map_err(invalid)?;
        let mut cfg = RunConfig {
            model: s.model,
            ..Default::default()
        };
        cfg.train.batch_size = s.batch;
        cfg.train.unroll = s.unroll;
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
        }
        apply_sets(&mut cfg, &common.set)?;
        cfg
    };
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = 256;
    }
    if let Some(b) = batch {
        cfg.train.batch_size = b;
    }
    if let Some(u) = unroll {
        cfg.train.unroll = u;
    }
    if let Some(m) = mem {
        cfg.model.max_mem = m;
    }
    cfg.validate().map_err(invalid)?;
    if reps < 3 {
        return Err(usage("--reps must be at least 3"));
    }
    print_config(&cfg, common.out.as_deref())?;
    let model = build_model::<f32>(&cfg.model, cfg.train.seed)?;
    let r = profile_forward(
        &model,
        cfg.train.batch_size,
        cfg.train.unroll,
        reps,
        warmup,
        cfg.train.seed,
    )?;
    print!("{}", r.to_table());
    if let Some(dir) = &common.out {
        write_out(dir, "profile.csv", &r.to_csv())?;
    }
    debug_assert!(r.to_csv().starts_with(PROFILE_CSV_HEADER));
    Ok(())
}

fn cmd_gradcheck(
    common: &Common,
    layers: usize,
    d: usize,
    dattn: usize,
    len: usize,
    batch: usize,
) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    let mut cfg = resolve(common)?;
    cfg.model = ModelConfig {
        vocab_size: if cfg.model.vocab_size == 0 {
            7
        } else {
            cfg.model.vocab_size
        },
        n_layers: layers,
        d,
        d_attn: dattn,
        dropout: 0.0,
        max_mem: cfg.model.max_mem.max(len),
        schedule: if cfg.model.schedule == AttnSchedule::none() {
            cfg.model.schedule
        } else {
            AttnSchedule::EveryK(1)
        },
        ..cfg.model
    };
    cfg.train.batch_size = batch;
    cfg.train.unroll = len;
    cfg.validate().map_err(invalid)?;
    print_config(&cfg, common.out.as_deref())?;
    let r = model_gradcheck(&cfg.model, len, batch, cfg.train.seed)?;
    println!(
        "max relative error {:.3e} (max abs {:.3e}, {} coordinates)",
        r.max_rel_error, r.max_abs_error, r.checked
    );
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            message: format!(
                "gradcheck failed: {:.3e} >= {GRADCHECK_TOLERANCE:e} at {:?} (analytic {}, numeric {})",
                r.max_rel_error, r.worst, r.worst_analytic, r.worst_numeric
            ),
        })
    }
}

fn cmd_sweep(common: &Common, lrs: Vec<f64>, wds: Vec<f64>) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    let mut cfg = resolve(common)?;
    if !lrs.is_empty() {
        cfg.train.sweep_lr = lrs;
    }
    if !wds.is_empty() {
        cfg.train.sweep_wd = wds;
    }
    if cfg.train.sweep_lr.is_empty() || cfg.train.sweep_wd.is_empty() {
        return Err(usage("sweep grid must be nonempty"));
    }
    cfg.validate().map_err(invalid)?;
    let corpus = load_corpus(&cfg).map_err(invalid)?;
    resolve_vocab(&mut cfg, &corpus).map_err(invalid)?;
    print_config(&cfg, common.out.as_deref())?;
    let cells = train::sweep(&cfg, &corpus, &cfg.train.sweep_lr, &cfg.train.sweep_wd)?;
    let csv = sweep_csv(&cells);
    print!("{csv}");
    if let Some(dir) = &common.out {
        write_out(dir, "sweep.csv", &csv)?;
    }
    Ok(())
}

fn cmd_generate(
    common: &Common,
    checkpoint: &Path,
    prompt: &str,
    n: usize,
    temperature: f64,
) -> Result<(), Failure> {
    configure_threads(common.threads)?;
    let (model, mut cfg, vocab, _) = load_trained(checkpoint).map_err(invalid)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    apply_sets(&mut cfg, &common.set)?;
    let vocab = vocab.ok_or_else(|| {
        usage(format!(
            "{}: no byte vocabulary stored",
            checkpoint.display()
        ))
    })?;
    let ids = vocab.encode_bytes(prompt.as_bytes()).map_err(invalid)?;
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(usage(format!(
            "--temperature must be finite and >= 0, got {temperature}"
        )));
    }
    print_config(&cfg, common.out.as_deref())?;
    let out = generate(&model, &ids, n, temperature, cfg.train.seed)?;
    let text = vocab.decode(&out);
    println!("{}", String::from_utf8_lossy(&text));
    Ok(())
}
