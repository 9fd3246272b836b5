//! Deterministic scene-parameter sampling and dataset manifests.
//!
//! A manifest is the renderer-agnostic record of every sampled scene: one
//! JSON header line followed by one [`SceneConfig`] per line.

mod config;
mod manifest;
mod pool;
mod scene;
mod summary;

pub use config::{
    AccessoryPolicy, ActionUnitVocabulary, AxisMixture, DemographicsSpec, EthnicGroup,
    ExclusiveProbs, GaussianComponent, GazeSpec, HairColorPolicy, HdriPeriod, IdentityTraitSpace,
    IndependentProbs, Interval, PoseDistribution, SamplerConfig, SpreadUnit, POSE_LIMITS,
};
pub use manifest::{
    build_manifest, identity_traits, sample_identity_scenes, validate_manifest, DatasetManifest,
    ManifestHeader, Violation, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use pool::{largest_remainder_counts, sample_identity_pool, Gender, IdentityRecord, IdentityTraits};
pub use scene::{
    sample_pose, sample_scene_config, Accessories, Expression, ExpressionPreset, Gaze,
    HairColorDelta, Pose, SceneConfig,
};
pub(crate) use config::check_probability;
pub use summary::{summarize_manifest, FieldStats, ManifestSummary, Rate};
