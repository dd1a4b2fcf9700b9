//! SRU and SRU++ language models on a small reverse-mode autodiff tape:
//! fused recurrence kernel, attention block, RAdam training, evaluation,
//! sweeps and a forward-pass profiler.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod generate;
pub mod gradcheck;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod profile;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{RunConfig, Tokenization, TrainSettings};
pub use data::{Corpus, Vocab};
pub use error::{Error, Result};
pub use gradcheck::{model_gradcheck, GradcheckReport};
pub use model::{
    build_model, count_params, AttnSchedule, ForwardOptions, LayerVariant, Model, ModelConfig,
    SegmentState,
};
pub use optim::{cosine_lr, OptimConfig, RAdam};
pub use profile::{
    bench_kernel, profile_forward, KernelBench, OpCategory, ProfileReport, Scenario,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Precision, Shape, Tensor};
pub use train::{evaluate, EvalResult, MetricsRow, SweepCell, TrainOptions, TrainOutcome, Trainer};
