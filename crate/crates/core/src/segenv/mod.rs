//! Synthetic two-domain segmentation world and the toy learner trained in it.

pub mod learner;
pub mod mixing;
pub mod scene;
pub mod stats;

pub use learner::{mean_std, EvalReport, SegLossReport, ToyLearner};
pub use mixing::{build_mix_mask, mix_pair, MixMask, MixedPair, PasteHalf};
pub use scene::{long_tail_weights, EnvConfig, FeatureMap, LabelMap, Scene, SceneGenerator};
pub use stats::{snapshot_stats, target_observation, ClassStats, EnvStats, ExposureCounter, RecentStats, StepObservation};
