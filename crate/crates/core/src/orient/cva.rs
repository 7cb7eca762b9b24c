use std::sync::Arc;

use rand::Rng;

use super::bottleneck::{Bottleneck, BottleneckKind};
use super::geometry::OrientationGeometry;
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::init::he_normal;
use crate::params::{Ctx, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `ReLU(f1x1(f3x3(F)) + shortcut(F))`, halving the spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub conv3: ParamId,
    pub bias3: ParamId,
    pub conv1: ParamId,
    pub shortcut: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Residual {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv3 = store.add(
            format!("{name}.f3x3"),
            he_normal(&[c_out, c_in, 3, 3], 9 * c_in, rng),
            ParamGroup::Blocks,
        );
        let bias3 = store.add(
            format!("{name}.f3x3.bias"),
            Tensor::zeros([c_out]),
            ParamGroup::Blocks,
        );
        let conv1 = store.add(
            format!("{name}.f1x1"),
            he_normal(&[c_out, c_out, 1, 1], c_out, rng),
            ParamGroup::Blocks,
        );
        let shortcut = store.add(
            format!("{name}.down"),
            he_normal(&[c_out, c_in, 1, 1], c_in, rng),
            ParamGroup::Blocks,
        );
        Residual {
            conv3,
            bias3,
            conv1,
            shortcut,
            in_channels: c_in,
            out_channels: c_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId) -> Result<NodeId> {
        let (w3, b3, w1, ws) = (
            ctx.node(self.conv3),
            ctx.node(self.bias3),
            ctx.node(self.conv1),
            ctx.node(self.shortcut),
        );
        let y = ctx.g.conv2d(x, w3, Some(b3), 2, 1)?;
        let y = ctx.g.conv2d(y, w1, None, 1, 0)?;
        let s = ctx.g.conv2d(x, ws, None, 2, 0)?;
        let sum = ctx.g.add(y, s)?;
        ctx.g.relu(sum)
    }
}

/// 1×1 map carrying the previous block's attention into this block's
/// channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub weight: ParamId,
    pub from_channels: usize,
}

impl Chain {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_prev: usize,
        c: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.chain"),
            he_normal(&[c, c_prev, 1, 1], c_prev, rng),
            ParamGroup::Blocks,
        );
        Chain {
            weight,
            from_channels: c_prev,
        }
    }
}

/// Attention from per-column height means, chained across blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalAttention {
    pub bottleneck: Bottleneck,
    pub chain: Option<Chain>,
}

/// What an attention stage hands back.
#[derive(Clone, Debug)]
pub struct AttentionOut {
    /// Reweighted feature map.
    pub output: NodeId,
    /// State passed to the next block's chain.
    pub carrier: NodeId,
    /// Attention vectors `[B,C,1,L]`, one per line geometry used.
    pub vectors: Vec<(Arc<OrientationGeometry>, NodeId)>,
}

impl VerticalAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        prev_channels: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let bottleneck = Bottleneck::new(store, name, channels, BottleneckKind::NormHardSwish, rng);
        let chain = prev_channels.map(|cp| Chain::new(store, name, cp, channels, rng));
        VerticalAttention { bottleneck, chain }
    }

    /// `F_conv ⊙ (σ(f2(act(BN(f1(P_AY F_conv))))) ⊗ f1x1(P_M prev))`.
    /// `prev` is the previous block's `[B,Cp,1,2W]` attention.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        fconv: NodeId,
        prev: Option<NodeId>,
    ) -> Result<AttentionOut> {
        let [_, _, h, w] = ctx.g.value(fconv).dims4()?;
        let pooled = ctx.g.avg_pool_height(fconv)?;
        let mut attn = self.bottleneck.forward(ctx, pooled)?;
        match (&self.chain, prev) {
            (Some(chain), Some(p)) => {
                let ps = ctx.g.value(p).shape().to_vec();
                if ps.len() != 4 || ps[1] != chain.from_channels || ps[2] != 1 || ps[3] / 2 != w {
                    return Err(Error::shape(format!(
                        "previous attention {ps:?} cannot be max-pooled to [B,{},1,{w}]",
                        chain.from_channels
                    )));
                }
                let pooled_prev = ctx.g.max_pool(p, (1, 2), (1, 2))?;
                let carried = ctx
                    .g
                    .conv2d(pooled_prev, ctx.node(chain.weight), None, 1, 0)?;
                attn = ctx.g.mul(attn, carried)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::invalid("chained block needs the previous attention"))
            }
            (None, Some(_)) => {
                return Err(Error::invalid("first block takes no previous attention"))
            }
        }
        let geom = Arc::new(OrientationGeometry::vertical(h, w)?);
        let grid = ctx.g.fold_back(attn, geom.clone())?;
        let output = ctx.g.mul(fconv, grid)?;
        Ok(AttentionOut {
            output,
            carrier: attn,
            vectors: vec![(geom, attn)],
        })
    }
}
