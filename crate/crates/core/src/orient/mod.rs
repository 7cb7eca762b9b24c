//! Orientation-aware line pooling and the attention blocks built on it.

pub mod bottleneck;
pub mod cva;
pub mod geometry;
pub mod oap;
pub mod soa;

pub use bottleneck::{hidden_width, reduction_factor, Bottleneck, BottleneckKind};
pub use cva::{AttentionOut, Chain, Residual, VerticalAttention};
pub use geometry::{
    cot_magnitude, Lean, OapDenominator, OrientationGeometry, COT_FLOOR, OAP_EPSILON,
};
pub use oap::{fold_back, oap_forward};
pub use soa::{soa_equals_cva_at_vertical, OrientedAttention, SoaOptions};
