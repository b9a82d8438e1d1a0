//! Multiple-instance classification of whole-slide images from tile
//! descriptors, with gradient-based interpretation.
//!
//! A [`WsiClassifier`] chains a tile feature extractor, a tile scorer, a
//! slide aggregator (min-max over tile scores, or attention pooling) and a
//! softmax decision head. Training needs only slide labels. The
//! [`interpret`] module walks the gradients back from a class probability to
//! the slide descriptor, then to tile descriptor features, and builds
//! per-tile heat-maps from the selected features.
//!
//! Everything runs on a small reverse-mode [`autodiff`] tape over `f64`.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod training;

pub use autodiff::{Tape, Tensor, TensorError, Var};
pub use data::{DataError, DatasetManifest, PlantedConfig, SlideBag, Split};
pub use eval::{compare_report, mann_whitney_u, roc_auc, CompareReport, EvalError};
pub use interpret::{HeatMap, InterpretError, SlideAttribution, TileAttribution};
pub use model::{AggregatorConfig, ExtractorConfig, ModelConfig, ModelError, WsiClassifier};
pub use pipeline::{ExperimentConfig, PipelineError};
pub use training::{TrainConfig, TrainError};
