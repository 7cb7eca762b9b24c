use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bottleneck::{Bottleneck, BottleneckKind};
use super::cva::{AttentionOut, Chain, VerticalAttention};
use super::geometry::{Lean, OapDenominator, OrientationGeometry, OAP_EPSILON};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{Bound, Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoaOptions {
    pub epsilon: f64,
    pub denominator: OapDenominator,
    /// Pins the line step, bypassing θ (a single branch, no θ gradient).
    pub step_override: Option<usize>,
}

impl Default for SoaOptions {
    fn default() -> Self {
        SoaOptions {
            epsilon: OAP_EPSILON,
            denominator: OapDenominator::Count,
            step_override: None,
        }
    }
}

/// Attention pooled along the line family of a learnable orientation.
///
/// The integer line step is not differentiable in θ, so the layer runs two
/// branches at the neighbouring steps `⌊s⌋` and `⌊s⌋ + 1`, `s = max(|cot θ|,
/// 1e-2)`, and blends the two reweighting grids by `λ = s - ⌊s⌋`. θ gets its
/// gradient through `λ` only.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedAttention {
    pub bottleneck: Bottleneck,
    pub chain: Option<Chain>,
    pub options: SoaOptions,
}

impl OrientedAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        prev_channels: Option<usize>,
        options: SoaOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let bottleneck = Bottleneck::new(store, name, channels, BottleneckKind::Gelu, rng);
        let chain = prev_channels.map(|cp| Chain::new(store, name, cp, channels, rng));
        OrientedAttention {
            bottleneck,
            chain,
            options,
        }
    }

    /// Shares the weights, norm and activation of a vertical attention stage.
    pub fn from_vertical(v: &VerticalAttention, options: SoaOptions) -> Self {
        OrientedAttention {
            bottleneck: v.bottleneck.clone(),
            chain: v.chain.clone(),
            options,
        }
    }

    fn geometry(
        &self,
        lean: Lean,
        step: usize,
        h: usize,
        w: usize,
    ) -> Result<Arc<OrientationGeometry>> {
        Ok(Arc::new(
            OrientationGeometry::with_step(lean, step, h, w)?
                .with_epsilon(self.options.epsilon)
                .with_denominator(self.options.denominator),
        ))
    }

    /// One branch: pooled attention for a fixed step, folded back to a grid.
    fn branch(
        &self,
        ctx: &mut Ctx<'_>,
        fconv: NodeId,
        carried: Option<NodeId>,
        geom: &Arc<OrientationGeometry>,
    ) -> Result<(NodeId, NodeId)> {
        let pooled = ctx.g.line_pool(fconv, geom.clone())?;
        let mut attn = self.bottleneck.forward(ctx, pooled)?;
        if let Some(c) = carried {
            let lines = ctx.g.line_pool(c, geom.clone())?;
            attn = ctx.g.mul(attn, lines)?;
        }
        let grid = ctx.g.fold_back(attn, geom.clone())?;
        Ok((attn, grid))
    }

    /// `theta` is a one-element node holding θ in radians. `prev` is the
    /// previous block's `[B,Cp,2H,2W]` blended grid.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        fconv: NodeId,
        theta: NodeId,
        prev: Option<NodeId>,
    ) -> Result<AttentionOut> {
        let [_, _, h, w] = ctx.g.value(fconv).dims4()?;
        let carried = match (&self.chain, prev) {
            (Some(chain), Some(p)) => {
                let ps = ctx.g.value(p).shape().to_vec();
                if ps.len() != 4 || ps[1] != chain.from_channels || ps[2] / 2 != h || ps[3] / 2 != w
                {
                    return Err(Error::shape(format!(
                        "previous attention {ps:?} cannot be max-pooled to [B,{},{h},{w}]",
                        chain.from_channels
                    )));
                }
                let pooled = ctx.g.max_pool(p, (2, 2), (2, 2))?;
                Some(ctx.g.conv2d(pooled, ctx.node(chain.weight), None, 1, 0)?)
            }
            (None, None) => None,
            (Some(_), None) => {
                return Err(Error::invalid("chained block needs the previous attention"))
            }
            (None, Some(_)) => {
                return Err(Error::invalid("first block takes no previous attention"))
            }
        };

        if let Some(step) = self.options.step_override {
            let geom = self.geometry(Lean::Acute, step, h, w)?;
            let (attn, grid) = self.branch(ctx, fconv, carried, &geom)?;
            let output = ctx.g.mul(fconv, grid)?;
            return Ok(AttentionOut {
                output,
                carrier: grid,
                vectors: vec![(geom, attn)],
            });
        }

        let t = ctx
            .g
            .value(theta)
            .item()
            .ok_or_else(|| Error::shape("orientation must be a scalar"))?;
        let lean = Lean::of(t);
        let (lambda, lower) = ctx.g.step_fraction(theta)?;
        let lo = self.geometry(lean, lower, h, w)?;
        let hi = self.geometry(lean, lower + 1, h, w)?;
        let (attn_lo, grid_lo) = self.branch(ctx, fconv, carried, &lo)?;
        let mut vectors = vec![(lo.clone(), attn_lo)];
        // Past W - 1 both steps clip to the same lines and θ has no effect.
        let grid = if hi.step() == lo.step() {
            grid_lo
        } else {
            let (attn_hi, grid_hi) = self.branch(ctx, fconv, carried, &hi)?;
            vectors.push((hi, attn_hi));
            ctx.g.lerp(grid_lo, grid_hi, lambda)?
        };
        let output = ctx.g.mul(fconv, grid)?;
        Ok(AttentionOut {
            output,
            carrier: grid,
            vectors,
        })
    }
}

/// Runs a vertical stage and its weight-sharing oriented counterpart pinned
/// to step 0 on `probe` (`[B,C,H,W]`, first block, no chain) and reports
/// whether their attention vectors agree within `1e-9`. The oriented path
/// uses `ε = 0` so the line means are exact column means.
pub fn soa_equals_cva_at_vertical(
    store: &ParamStore,
    cva: &VerticalAttention,
    soa: &OrientedAttention,
    probe: &Tensor,
) -> Result<bool> {
    let mut pinned = soa.clone();
    pinned.options.step_override = Some(0);
    pinned.options.epsilon = 0.0;
    pinned.options.denominator = OapDenominator::Count;

    let mut g = Graph::new();
    let bound: Bound = store.bind(&mut g);
    let x = g.constant(probe.clone());
    let theta = g.constant(Tensor::scalar(std::f64::consts::FRAC_PI_2));
    let mode = if probe.shape()[0] >= 2 {
        Mode::Train
    } else {
        Mode::Eval
    };
    let mut ctx = Ctx::new(&mut g, store, &bound, mode);
    let a = cva.forward(&mut ctx, x, None)?;
    let b = pinned.forward(&mut ctx, x, theta, None)?;
    let (va, vb) = (ctx.g.value(a.vectors[0].1), ctx.g.value(b.vectors[0].1));
    Ok(va.shape() == vb.shape() && va.max_abs_diff(vb)? <= 1e-9)
}
