//! Semi-supervised 3D segmentation by co-training two students with EMA
//! teachers, masked-input cross pseudo-labels, decoder feature consistency
//! and teacher discrepancy terms.
//!
//! The crate is organised bottom-up: [`volume`] grid types, [`masking`],
//! the [`network`] with hand-written gradients, [`losses`], [`weights`],
//! [`ema`], the [`trainer`], [`metrics`], [`data`] files and [`checkpoint`]s.

pub mod checkpoint;
pub mod data;
pub mod ema;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod real;
pub mod rng;
pub mod trainer;
pub mod volume;
pub mod weights;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, SplitManifest, SplitTag, SynthSpec};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, RampUpSchedule};
pub use masking::{BinaryMask, MaskSpec};
pub use metrics::MetricsReport;
pub use network::{ForwardOutput, Network, NetworkConfig, ParamVector};
pub use trainer::{McpcDirection, RunOptions, RunSummary, Toggles, TrainConfig, Trainer, TrainerState};
pub use volume::{Dims, FeatureMap, LabelMap, ProbMap, Spacing, Volume};
pub use weights::{ClassStats, ClassWeights};
