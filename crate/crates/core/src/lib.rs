//! Ensemble slide encoder over multi-model patch embeddings.
//!
//! Bags of patch embeddings from several tile-level models are each
//! aggregated by gated multi-head attention, then fused by concatenation into
//! one slide vector. The encoder is pretrained with momentum-contrastive
//! InfoNCE plus weak cancer/organ supervision, and evaluated by linear
//! probing and the usual clinical statistics (balanced accuracy, AUC,
//! bootstrap intervals, Wilcoxon, Kaplan–Meier, log-rank).

pub mod attnmap;
pub mod encoder;
pub mod error;
pub mod io;
pub mod model;
pub mod objectives;
pub mod params;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
