//! Rigid registration of attenuation maps to cardiac SPECT volumes.
//!
//! The crate covers synthetic phantom generation, rigid motion simulation,
//! a dual-stream DenseNet with squeeze-fusion-excitation attention, a
//! mutual-information baseline and the evaluation metrics used to compare
//! them.

pub mod dusfe;
mod error;
pub mod geometry;
pub mod metrics;
pub mod mi;
pub mod motion;
pub mod phantom;
pub mod regnet;
mod seed;
pub mod train;
mod volume;

pub use dusfe::{DuSfeWeights, FeaturePair};
pub use error::{CoreError, Result};
pub use geometry::{invert, params_to_matrix, resample, Mat4, RigidParams};
pub use metrics::{aggregate, delta_r, delta_t, nmse_nmae, CaseResult, Method, MethodSummary};
pub use mi::{mutual_information, register_mi, MiConfig, MiResult};
pub use motion::{build_dataset, sample_params, MotionRanges, SamplePair, Split};
pub use phantom::{generate_cohort, generate_phantom, PhantomConfig, PhantomJitter};
pub use regnet::{register, ModelConfig, RegNet};
pub use seed::{derive_seed, rng_from};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome};
pub use volume::{Modality, Volume, DEFAULT_SPACING_MM};
