//! Drift-robust training for binary classifiers over sparse binary feature
//! vectors.
//!
//! The crate provides:
//!
//! * a synthetic drifting-dataset generator and the dataset file format
//!   ([`datagen`], [`data`]);
//! * temporal environment segmentation ([`envsplit`]);
//! * an MLP encoder/head/proxy model ([`model`]) and the composite losses
//!   ([`losses`]);
//! * the two-stage invariant trainer and its plain control trainer
//!   ([`trainer`]);
//! * evaluation and feature-stability diagnostics ([`metrics`]);
//! * a drift-triggered continual update loop ([`continual`]).

pub mod continual;
pub mod data;
pub mod datagen;
pub mod envsplit;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod util;

pub use continual::{run_continual, ContinualConfig, ContinualReport, RetrainMode, TrainerKind};
pub use data::{read_dataset, write_dataset, FeatureRoles, Label, Sample, TemporalDataset};
pub use datagen::{default_spec, generate, GeneratorSpec};
pub use envsplit::{split, EnvironmentAssignment, Granularity};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use metrics::{aut, macro_f1, MetricSeries};
pub use model::{ModelDims, ModelState};
pub use trainer::{train_erm, train_tif, AblationFlags, TrainConfig, TrainReport};
