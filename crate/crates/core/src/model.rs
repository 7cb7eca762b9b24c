//! The motion-stream classifier: stem, four stride-2 residual blocks each
//! followed by vertical or oriented attention, pooling, optional AU bits and
//! a linear head.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::init::{he_normal, lecun_normal, raw_to_theta, theta_to_raw};
use crate::orient::{
    AttentionOut, OapDenominator, OrientedAttention, Residual, SoaOptions, VerticalAttention,
    OAP_EPSILON,
};
use crate::params::{Ctx, Mode, ParamGroup, ParamId, ParamStore};
use crate::snapshot::Snapshot;
use crate::tensor::Tensor;

pub const AU_LENGTH: usize = 21;
pub const NUM_BLOCKS: usize = 4;
pub const MANIFEST_ENTRY: &str = "__manifest__/config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// vertical attention, no θ
    A,
    /// oriented attention, one θ shared by all blocks
    B,
    /// oriented attention, one θ per block
    C,
    /// oriented attention, θ frozen near 0
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn theta_count(self) -> usize {
        match self {
            Variant::A => 0,
            Variant::B | Variant::D => 1,
            Variant::C => NUM_BLOCKS,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    Gap,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub use_au: bool,
    pub au_length: usize,
    pub seed: u64,
    pub head_input: HeadInput,
    /// Initial θ before jitter, radians.
    pub theta_init: f64,
    /// Half-width of the uniform jitter added to each initial θ.
    pub theta_jitter: f64,
    /// θ used by variant D.
    pub frozen_theta: f64,
    pub oap_denominator: OapDenominator,
    pub oap_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::B,
            input_size: 64,
            channels: vec![16, 32, 64, 128],
            num_classes: 4,
            use_au: false,
            au_length: AU_LENGTH,
            seed: 0,
            head_input: HeadInput::Gap,
            theta_init: FRAC_PI_4,
            theta_jitter: 0.1,
            frozen_theta: 1e-2,
            oap_denominator: OapDenominator::Count,
            oap_epsilon: OAP_EPSILON,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_BLOCKS {
            return Err(Error::config(
                "model.channels",
                format!(
                    "expected {NUM_BLOCKS} block widths, got {}",
                    self.channels.len()
                ),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::config(
                "model.channels",
                "block widths must be positive",
            ));
        }
        let down = 1 << NUM_BLOCKS;
        if self.input_size < down || !self.input_size.is_multiple_of(down) {
            return Err(Error::config(
                "model.input_size",
                format!(
                    "must be a positive multiple of {down}, got {}",
                    self.input_size
                ),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "model.num_classes",
                "need at least 2 classes",
            ));
        }
        if self.au_length != AU_LENGTH {
            return Err(Error::config(
                "model.au_length",
                format!("AU vectors have length {AU_LENGTH}"),
            ));
        }
        for (key, t) in [
            ("model.theta_init", self.theta_init),
            ("model.frozen_theta", self.frozen_theta),
        ] {
            if !(t > 0.0 && t < PI) {
                return Err(Error::config(key, format!("{t} is outside (0, pi)")));
            }
        }
        if !(self.theta_jitter >= 0.0)
            || self.theta_init - self.theta_jitter <= 0.0
            || self.theta_init + self.theta_jitter >= PI
        {
            return Err(Error::config(
                "model.theta_jitter",
                "jittered θ must stay inside (0, pi)",
            ));
        }
        if !(self.oap_epsilon >= 0.0) {
            return Err(Error::config("model.oap_epsilon", "must be nonnegative"));
        }
        Ok(())
    }

    fn final_width(&self) -> usize {
        self.input_size >> NUM_BLOCKS
    }

    pub fn head_width(&self) -> usize {
        let c = self.channels[NUM_BLOCKS - 1];
        let feat = match self.head_input {
            HeadInput::Gap => c,
            HeadInput::Flatten => c * self.final_width() * self.final_width(),
        };
        feat + if self.use_au { self.au_length } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    Vertical(VerticalAttention),
    Oriented {
        layer: OrientedAttention,
        theta: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub residual: Residual,
    pub attention: Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem_weight: ParamId,
    pub stem_bias: ParamId,
    pub blocks: Vec<Block>,
    /// Unconstrained θ parameters, `θ = π · sigmoid(raw)`.
    pub thetas: Vec<ParamId>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Forward-pass switches used by tests and diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Pins every oriented block to this line step.
    pub step_override: Option<usize>,
    /// Replaces the line-mean ε of oriented blocks.
    pub epsilon: Option<f64>,
    /// Drops the block-to-block attention product.
    pub ablate_chain: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits: NodeId,
    pub features: NodeId,
    pub attention: Vec<AttentionOut>,
    pub thetas: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub trainable: BTreeMap<ParamGroup, usize>,
    pub stored: BTreeMap<ParamGroup, usize>,
    pub total_trainable: usize,
    pub total_stored: usize,
    /// `2 · C · (C/r)` weights per attention bottleneck, in block order.
    pub bottleneck_per_block: Vec<usize>,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c0 = config.channels[0];
        let stem_weight = store.add(
            "stem.weight",
            he_normal(&[c0, 1, 3, 3], 9, &mut rng),
            ParamGroup::Preprocess,
        );
        let stem_bias = store.add("stem.bias", Tensor::zeros([c0]), ParamGroup::Preprocess);

        let soa = SoaOptions {
            epsilon: config.oap_epsilon,
            denominator: config.oap_denominator,
            step_override: None,
        };
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = c0;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("block{i}");
            let residual = Residual::new(&mut store, &name, c_in, c, &mut rng);
            let prev = (i > 0).then(|| config.channels[i - 1]);
            let attn_name = format!("{name}.attn");
            let attention = match config.variant {
                Variant::A => Attention::Vertical(VerticalAttention::new(
                    &mut store, &attn_name, c, prev, &mut rng,
                )),
                Variant::B | Variant::D => Attention::Oriented {
                    layer: OrientedAttention::new(&mut store, &attn_name, c, prev, soa, &mut rng),
                    theta: 0,
                },
                Variant::C => Attention::Oriented {
                    layer: OrientedAttention::new(&mut store, &attn_name, c, prev, soa, &mut rng),
                    theta: i,
                },
            };
            blocks.push(Block {
                residual,
                attention,
            });
            c_in = c;
        }

        let mut thetas = Vec::new();
        for k in 0..config.variant.theta_count() {
            let theta = match config.variant {
                Variant::D => config.frozen_theta,
                _ => {
                    let j = config.theta_jitter;
                    let jitter = if j > 0.0 {
                        rng.random_range(-j..=j)
                    } else {
                        0.0
                    };
                    config.theta_init + jitter
                }
            };
            let id = store.add(
                format!("theta{k}"),
                Tensor::scalar(theta_to_raw(theta)),
                ParamGroup::Theta,
            );
            if config.variant == Variant::D {
                store.set_trainable(id, false);
            }
            thetas.push(id);
        }

        let width = config.head_width();
        let head_weight = store.add(
            "head.weight",
            lecun_normal(&[config.num_classes, width], width, &mut rng),
            ParamGroup::Head,
        );
        let head_bias = store.add(
            "head.bias",
            Tensor::zeros([config.num_classes]),
            ParamGroup::Head,
        );

        Ok(Model {
            config: config.clone(),
            store,
            stem_weight,
            stem_bias,
            blocks,
            thetas,
            head_weight,
            head_bias,
        })
    }

    /// Current θ values in radians.
    pub fn theta_values(&self) -> Vec<f64> {
        self.thetas
            .iter()
            .map(|&id| raw_to_theta(self.store.value(id).data()[0]))
            .collect()
    }

    pub fn set_theta(&mut self, k: usize, theta: f64) -> Result<()> {
        let id = *self
            .thetas
            .get(k)
            .ok_or_else(|| Error::invalid(format!("model has no θ #{k}")))?;
        crate::orient::geometry::check_theta(theta)?;
        self.store
            .set_value(id, Tensor::scalar(theta_to_raw(theta)))
    }

    /// A variant-B model sharing every weight, norm and activation with this
    /// variant-A model, plus one θ set to π/2.
    pub fn transplant_to_oriented(&self) -> Result<Model> {
        if self.config.variant != Variant::A {
            return Err(Error::invalid("transplanting needs a variant A model"));
        }
        let mut out = self.clone();
        out.config.variant = Variant::B;
        let soa = SoaOptions {
            epsilon: self.config.oap_epsilon,
            denominator: self.config.oap_denominator,
            step_override: None,
        };
        for block in &mut out.blocks {
            if let Attention::Vertical(v) = &block.attention {
                block.attention = Attention::Oriented {
                    layer: OrientedAttention::from_vertical(v, soa),
                    theta: 0,
                };
            }
        }
        let id = out.store.add(
            "theta0",
            Tensor::scalar(theta_to_raw(PI / 2.0)),
            ParamGroup::Theta,
        );
        out.thetas = vec![id];
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: NodeId, au: Option<NodeId>) -> Result<ForwardOut> {
        self.forward_with(ctx, x, au, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        ctx: &mut Ctx<'_>,
        x: NodeId,
        au: Option<NodeId>,
        opts: ForwardOptions,
    ) -> Result<ForwardOut> {
        let s = self.config.input_size;
        let shape = ctx.g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(format!(
                "model input {shape:?} is not [B,1,{s},{s}]"
            )));
        }
        let batch = shape[0];
        match (self.config.use_au, au) {
            (false, Some(_)) => {
                return Err(Error::invalid(
                    "AU bits supplied but the model has use_au = false",
                ))
            }
            (true, None) => {
                return Err(Error::invalid(
                    "model has use_au = true but no AU bits were supplied",
                ))
            }
            (true, Some(a)) => {
                if ctx.g.value(a).shape() != [batch, self.config.au_length] {
                    return Err(Error::shape(format!(
                        "AU bits {:?} are not [{batch},{}]",
                        ctx.g.value(a).shape(),
                        self.config.au_length
                    )));
                }
            }
            (false, None) => {}
        }

        let thetas: Vec<NodeId> = self
            .thetas
            .iter()
            .map(|&id| {
                let raw = ctx.node(id);
                ctx.g.theta_from_raw(raw)
            })
            .collect::<Result<_>>()?;

        let (w, b) = (ctx.node(self.stem_weight), ctx.node(self.stem_bias));
        let y = ctx.g.conv2d(x, w, Some(b), 1, 1)?;
        let mut h = ctx.g.relu(y)?;
        let mut carrier: Option<NodeId> = None;
        let mut attention = Vec::with_capacity(NUM_BLOCKS);
        for block in &self.blocks {
            let fconv = block.residual.forward(ctx, h)?;
            let out = match &block.attention {
                Attention::Vertical(v) => {
                    if opts.ablate_chain {
                        let mut v = v.clone();
                        v.chain = None;
                        v.forward(ctx, fconv, None)?
                    } else {
                        v.forward(ctx, fconv, carrier)?
                    }
                }
                Attention::Oriented { layer, theta } => {
                    let mut layer = layer.clone();
                    if opts.step_override.is_some() {
                        layer.options.step_override = opts.step_override;
                    }
                    if let Some(eps) = opts.epsilon {
                        layer.options.epsilon = eps;
                    }
                    let prev = if opts.ablate_chain {
                        layer.chain = None;
                        None
                    } else {
                        carrier
                    };
                    layer.forward(ctx, fconv, thetas[*theta], prev)?
                }
            };
            h = out.output;
            carrier = Some(out.carrier);
            attention.push(out);
        }

        let features = match self.config.head_input {
            HeadInput::Gap => ctx.g.global_avg_pool(h)?,
            HeadInput::Flatten => {
                let n = ctx.g.value(h).len() / batch;
                ctx.g.reshape(h, &[batch, n])?
            }
        };
        let head_in = match au {
            Some(a) => ctx.g.concat(features, a)?,
            None => features,
        };
        let (hw, hb) = (ctx.node(self.head_weight), ctx.node(self.head_bias));
        let logits = ctx.g.linear(head_in, hw, hb)?;
        Ok(ForwardOut {
            logits,
            features,
            attention,
            thetas,
        })
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &Tensor, au: Option<&Tensor>) -> Result<Tensor> {
        self.predict_with(x, au, ForwardOptions::default())
    }

    pub fn predict_with(
        &self,
        x: &Tensor,
        au: Option<&Tensor>,
        opts: ForwardOptions,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.store.bind_constants(&mut g);
        let xi = g.constant(x.clone());
        let ai = au.map(|a| g.constant(a.clone()));
        let mut ctx = Ctx::new(&mut g, &self.store, &bound, Mode::Eval);
        let out = self.forward_with(&mut ctx, xi, ai, opts)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn param_count(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for g in ParamGroup::ALL {
            counts.trainable.insert(g, 0);
            counts.stored.insert(g, 0);
        }
        for p in self.store.params() {
            let n = p.value.len();
            *counts.stored.get_mut(&p.group).unwrap() += n;
            counts.total_stored += n;
            if p.trainable {
                *counts.trainable.get_mut(&p.group).unwrap() += n;
                counts.total_trainable += n;
            }
        }
        counts.bottleneck_per_block = self
            .blocks
            .iter()
            .map(|b| match &b.attention {
                Attention::Vertical(v) => v.bottleneck.weight_count(),
                Attention::Oriented { layer, .. } => layer.bottleneck.weight_count(),
            })
            .collect();
        counts
    }

    /// Parameters, norm statistics and the canonical config JSON.
    pub fn to_snapshot(&self) -> Result<Snapshot> {
        let mut snap = Snapshot::new();
        snap.push_bytes(MANIFEST_ENTRY, &serde_json::to_vec(&self.config)?)?;
        for p in self.store.params() {
            snap.push(p.name.clone(), p.value.clone());
        }
        for nb in self.store.norms() {
            let c = nb.running_mean.len();
            snap.push(
                format!("{}.running_mean", nb.name),
                Tensor::new([c], nb.running_mean.clone())?,
            );
            snap.push(
                format!("{}.running_var", nb.name),
                Tensor::new([c], nb.running_var.clone())?,
            );
        }
        Ok(snap)
    }

    pub fn from_snapshot(snap: &Snapshot) -> Result<Model> {
        let config: ModelConfig = serde_json::from_slice(&snap.get_bytes(MANIFEST_ENTRY)?)
            .map_err(|e| Error::Snapshot(format!("manifest: {e}")))?;
        config.validate()?;
        // Each of these widths is the length of some stored tensor, so a
        // genuine checkpoint holds at least that many values. Checking first
        // keeps a forged header from allocating a huge model.
        let held: usize = snap.tensors.iter().map(|(_, t)| t.len()).sum();
        let widest = config
            .channels
            .iter()
            .copied()
            .chain([config.num_classes, config.head_width()])
            .max()
            .unwrap_or(0);
        if widest > held {
            return Err(Error::Snapshot(format!(
                "checkpoint holds {held} values, too few for a layer of width {widest}"
            )));
        }
        let mut model = Model::build(&config)?;
        let mut expected = 1;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.param(id).name.clone();
            let t = snap
                .get(&name)
                .ok_or_else(|| Error::Snapshot(format!("checkpoint lacks `{name}`")))?;
            model
                .store
                .set_value(id, t.clone())
                .map_err(|e| Error::Snapshot(format!("`{name}`: {e}")))?;
            expected += 1;
        }
        for nb in model.store.norms_mut() {
            for (suffix, dst) in [
                ("running_mean", &mut nb.running_mean),
                ("running_var", &mut nb.running_var),
            ] {
                let key = format!("{}.{suffix}", nb.name);
                let t = snap
                    .get(&key)
                    .ok_or_else(|| Error::Snapshot(format!("checkpoint lacks `{key}`")))?;
                if t.len() != dst.len() {
                    return Err(Error::Snapshot(format!(
                        "`{key}` has {} values, expected {}",
                        t.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(t.data());
                expected += 1;
            }
        }
        if snap.tensors.len() != expected {
            return Err(Error::Snapshot(format!(
                "checkpoint has {} entries, the model expects {expected}",
                snap.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_snapshot()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_snapshot(&Snapshot::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_size: 16,
            channels: vec![2, 4, 4, 8],
            ..Default::default()
        }
    }

    #[test]
    fn rejects_wrong_block_count() {
        let cfg = ModelConfig {
            channels: vec![4, 8, 16],
            ..small(Variant::B)
        };
        assert!(Model::build(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let a = Model::build(&small(Variant::C)).unwrap();
        let b = Model::build(&small(Variant::C)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn theta_counts_per_variant() {
        let counts: Vec<usize> = Variant::ALL
            .iter()
            .map(|&v| Model::build(&small(v)).unwrap().param_count().trainable[&ParamGroup::Theta])
            .collect();
        assert_eq!(counts, vec![0, 1, 4, 0]);
        let d = Model::build(&small(Variant::D)).unwrap().param_count();
        assert_eq!(d.stored[&ParamGroup::Theta], 1);
    }

    #[test]
    fn snapshot_round_trip() {
        let m = Model::build(&small(Variant::B)).unwrap();
        let back =
            Model::from_snapshot(&Snapshot::decode(&m.to_snapshot().unwrap().encode()).unwrap())
                .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn au_protocol_is_enforced() {
        let m = Model::build(&small(Variant::A)).unwrap();
        let x = Tensor::zeros([1, 1, 16, 16]);
        let au = Tensor::zeros([1, AU_LENGTH]);
        assert!(m.predict(&x, Some(&au)).is_err());
        assert_eq!(m.predict(&x, None).unwrap().shape(), &[1, 4]);
    }
}
