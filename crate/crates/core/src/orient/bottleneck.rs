use rand::Rng;

use crate::autodiff::{Activation, NodeId};
use crate::error::{Error, Result};
use crate::init::he_normal;
use crate::params::{Ctx, NormId, ParamGroup, ParamId, ParamStore};

/// Channel reduction factor `r = max(8, C / 32)`.
pub fn reduction_factor(channels: usize) -> usize {
    (channels / 32).max(8)
}

/// Hidden width `C / r`, at least one unit.
pub fn hidden_width(channels: usize) -> usize {
    (channels / reduction_factor(channels)).max(1)
}

/// Which nonlinearity sits between the two 1×1 maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BottleneckKind {
    /// batch norm followed by `x · relu(x + 3) / 6`
    NormHardSwish,
    /// GELU, no normalization
    Gelu,
}

/// `sigmoid(f2(act(f1(x))))` over `[B, C, 1, L]` line statistics, with
/// bias-free 1×1 maps `C -> C/r -> C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub reduce: ParamId,
    pub expand: ParamId,
    pub norm: Option<NormId>,
    pub activation: Activation,
    pub channels: usize,
    pub hidden: usize,
}

impl Bottleneck {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kind: BottleneckKind,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = hidden_width(channels);
        let reduce = store.add(
            format!("{name}.f1"),
            he_normal(&[hidden, channels, 1, 1], channels, rng),
            ParamGroup::Bottlenecks,
        );
        let expand = store.add(
            format!("{name}.f2"),
            he_normal(&[channels, hidden, 1, 1], hidden, rng),
            ParamGroup::Bottlenecks,
        );
        let (norm, activation) = match kind {
            BottleneckKind::NormHardSwish => (
                Some(store.add_norm(format!("{name}.bn"), hidden, ParamGroup::Blocks)),
                Activation::HardSwish,
            ),
            BottleneckKind::Gelu => (None, Activation::Gelu),
        };
        Bottleneck {
            reduce,
            expand,
            norm,
            activation,
            channels,
            hidden,
        }
    }

    /// Weights in the two 1×1 maps: `2 · C · (C/r)`.
    pub fn weight_count(&self) -> usize {
        2 * self.channels * self.hidden
    }

    /// Attention logits squashed to `(0, 1)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, pooled: NodeId) -> Result<NodeId> {
        let c = ctx.g.value(pooled).shape().get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape(format!(
                "bottleneck for {} channels got {:?}",
                self.channels,
                ctx.g.value(pooled).shape()
            )));
        }
        let mut y = ctx.g.conv2d(pooled, ctx.node(self.reduce), None, 1, 0)?;
        if let Some(norm) = self.norm {
            y = ctx.batchnorm(y, norm)?;
        }
        y = ctx.g.activation(y, self.activation)?;
        y = ctx.g.conv2d(y, ctx.node(self.expand), None, 1, 0)?;
        ctx.g.sigmoid(y)
    }
}
