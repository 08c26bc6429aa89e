//! Adaptive frequency-coupled connectivity networks for multivariate ROI
//! time series.
//!
//! The pipeline: a learnable cascade of dilated convolutions splits each
//! signal into low/high sub-bands ([`decompose`]), per-band Pearson matrices
//! are thresholded into intra-band graphs and coupled across bands by
//! bilinear attention ([`connectivity`]), a shared GCN propagates over the
//! unified multiplex graph ([`gcn`]), and a mean readout plus MLP head
//! classifies ([`head`]). Training ([`trainer`]) optimizes cross-entropy
//! with band-diversity and cross-band-sparsity regularizers ([`losses`])
//! under k-fold cross-validation with early stopping.
//!
//! Everything is f64 and seed-deterministic; gradients come from the
//! reverse-mode tape in [`tensor`].

pub mod checkpoint;
pub mod config;
pub mod connectivity;
pub mod data;
pub mod decompose;
pub mod error;
pub mod gcn;
pub mod head;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use config::{DtMode, ModelConfig, TrainConfig};
pub use data::{load_dataset, synth_band_dataset, write_dataset, Dataset};
pub use error::{Error, Result};
pub use model::{bind, forward_subject, init_model, ModelParams};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{run_cv, train_fold, CvSummary, FoldResult};
