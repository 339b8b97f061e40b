//! Photometric operations, learnable policies and the base crop/flip.

pub mod base;
pub mod deployed;
pub mod ops;
pub mod policy;

pub use base::{base_augment, base_view, resize_bilinear, BaseAugmentConfig};
pub use deployed::{
    apply_deployed, finalize_policy, parse_rendered_policy, render_policy, DeployedOp, DeployedPolicy,
    DeployedSubpolicy, SamplingMode,
};
pub use ops::{apply_aug, apply_aug_value, grayscale, AugOpKind, AugmentConfig, MagnitudeSpec, NUM_OPS};
pub use policy::{
    blend_weights, map_magnitude, map_magnitude_value, map_magnitudes, policy_forward_search, subpolicy_forward,
    PolicyParams, PolicyRecord,
};
