//! Parameter-efficient fine-tuning on a frozen micro-transformer.
//!
//! The centrepiece is an input-dependent soft-prompt generator: a single
//! self-attention pass over the input embeddings, mean-pooled into a context
//! vector and pushed through a bottleneck MLP whose output is reshaped into a
//! `n × t` prompt. The prompt is prepended to the input of any backbone
//! layer. Static prompts (input layer or late injection), a mean-pooling
//! ablation and LoRA adapters share the same backbone and trainer so the
//! methods can be compared on equal footing.
//!
//! ```text
//! tokens ─ embed ─┬────────────────────────────► layers 0..m ─┐
//!                 └─ attend+pool ─ MLP ─ resize ─ prompt ────┴─► layers m..L ─ head
//! ```

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod methods;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use autodiff::{finite_diff_check, Tape, Var};
pub use backbone::{BackboneConfig, BackboneModel, EmbeddingMatrix};
pub use data::{Example, MetricKind, TaskDataset, Vocab};
pub use error::{Error, Result};
pub use methods::{
    IdSpamParams, LoraParams, MethodConfig, MethodKind, ParamCount, PromptMethod, PromptMlp,
    SoftPrompt, StaticPromptParams,
};
pub use model::PeftModel;
pub use tensor::Tensor;
pub use trainer::{evaluate, train, EvalMetrics, TrainConfig, TrainRecord};
