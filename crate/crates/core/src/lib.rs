//! Skeleton-based action recognition with two graph-convolution streams
//! (head and upper body), adaptive fusion, and an attention-pooled sLSTM.

pub mod axlstm;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gcn;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod model_file;
pub mod numeric;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
