//! Cross-view retrieval with a frozen vision transformer, a multi-granularity
//! convolutional adapter, and frequency-aware patch aggregation.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fanout;
pub mod fasa;
pub mod fft;
pub mod gradsuite;
pub mod heatmap;
pub mod loss;
pub mod mfea;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use backbone::{BackboneConfig, BackboneParams};
pub use checkpoint::Checkpoint;
pub use data::{DataConfig, DatasetManifest};
pub use error::{BggError, Result};
pub use fasa::FasaParams;
pub use loss::TemperatureParam;
pub use mfea::{MfeaConfig, MfeaParams};
pub use model::{BggModel, Descriptor, ModelConfig, TrainableParams};
pub use report::ParameterReport;
pub use retrieval::{RetrievalIndex, RetrievalReport};
pub use tensor::{ComplexTensor, Tensor};
pub use train::TrainConfig;
