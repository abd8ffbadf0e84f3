//! Binary text classification with five interchangeable heads (linear,
//! TextCNN, BiLSTM, RCNN, DPCNN) over a small contextual encoder, built on
//! a double-precision reverse-mode autograd.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use config::{ConfigFile, TrainConfig};
pub use error::{CheckpointError, Error, Result};
pub use graph::{Activation, Graph, Mode, Padding, Var};
pub use heads::{HeadConfig, HeadKind};
pub use model::Model;
pub use rng::Rng;
pub use tensor::Tensor;
pub use text::{Dataset, Example, SplitSpec, Vocabulary};
