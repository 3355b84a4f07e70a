//! Sparse training for toy multimodal language models.
//!
//! Two sparsification arms are applied stage-wise over a two-stage training
//! run: visual token compression ([`vtc`]) while aligning the projector, and
//! stochastic, scheduled layer skipping ([`lds`]) while fine-tuning. The crate
//! carries its own tape-based autodiff engine ([`tape`]), a toy model
//! ([`model`]), FLOPs accounting ([`flops`]) and the training loop
//! ([`trainer`]). It needs only `alloc`; file formats and the command line
//! live in the companion `sts-lab` crate.

#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod flops;
pub mod lds;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vtc;

pub use error::{Error, Result};
pub use flops::{FlopsReport, RunFlops};
pub use lds::{SkipMask, SkipSchedule};
pub use model::{Batch, Mllm, ModelConfig, Stage};
pub use tape::{Tape, TensorId};
pub use tensor::{Shape, Tensor};
pub use trainer::{MetricsRecord, Mode, TrainConfig};
pub use vtc::{CompressionSpec, IndexSet, Strategy};
