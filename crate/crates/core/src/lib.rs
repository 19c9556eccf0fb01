//! Source-free domain adaptation with a frozen anchor classifier and a
//! learnable bait classifier.
//!
//! A model trained on labelled source data is adapted to an unlabelled target
//! domain without touching the source data again. The anchor head keeps the
//! source class prototypes fixed; the bait head chases target samples the
//! anchor is unsure about, and the feature extractor is then pulled toward
//! both sets of prototypes.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tape`]) in
//! `f64`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{AdaptMode, TauSchedule, TrainConfig};
pub use data::{LabeledDataset, UnlabeledDataset};
pub use error::{Error, Result};
pub use model::{BaitModel, Head, ParamGroup};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
