//! Flat, named parameter storage plus the per-forward binding of parameters
//! to graph nodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tensor, BN_EPSILON, BN_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(usize);

/// Accounting bucket a parameter is reported under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Preprocess,
    Blocks,
    Bottlenecks,
    Theta,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Preprocess,
        ParamGroup::Blocks,
        ParamGroup::Bottlenecks,
        ParamGroup::Theta,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Preprocess => "preprocess",
            ParamGroup::Blocks => "blocks",
            ParamGroup::Bottlenecks => "bottlenecks",
            ParamGroup::Theta => "theta",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Running statistics of one batch-norm site. Its affine parameters live in
/// the store as ordinary parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBuffers {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    norms: Vec<NormBuffers>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_norm(
        &mut self,
        name: impl Into<String>,
        channels: usize,
        group: ParamGroup,
    ) -> NormId {
        let name = name.into();
        let gamma = self.add(format!("{name}.gamma"), Tensor::ones([channels]), group);
        let beta = self.add(format!("{name}.beta"), Tensor::zeros([channels]), group);
        self.norms.push(NormBuffers {
            name,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        });
        NormId(self.norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.params[id.0].value.expect_same_shape(&value)?;
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn norms(&self) -> &[NormBuffers] {
        &self.norms
    }

    pub fn norm(&self, id: NormId) -> &NormBuffers {
        &self.norms[id.0]
    }

    pub fn norm_mut(&mut self, id: NormId) -> &mut NormBuffers {
        &mut self.norms[id.0]
    }

    pub fn norms_mut(&mut self) -> &mut [NormBuffers] {
        &mut self.norms
    }

    /// Applies the momentum update collected during a training forward.
    pub fn apply_norm_updates(&mut self, updates: &[(NormId, BatchStats)]) {
        for (id, stats) in updates {
            let nb = &mut self.norms[id.0];
            let m = nb.momentum;
            let n = stats.count as f64;
            let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            for c in 0..nb.running_mean.len() {
                nb.running_mean[c] = (1.0 - m) * nb.running_mean[c] + m * stats.mean[c];
                nb.running_var[c] = (1.0 - m) * nb.running_var[c] + m * stats.var[c] * unbias;
            }
        }
    }

    /// Places every parameter on the graph: trainable ones as gradient
    /// leaves, frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if p.trainable {
                        g.param(p.value.clone())
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Places every parameter on the graph as a constant, for inference.
    pub fn bind_constants(&self, g: &mut Graph) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        )
    }

    /// Binding from nodes created elsewhere, e.g. by the gradient checker.
    pub fn bind_nodes(&self, nodes: &[NodeId]) -> Result<Bound> {
        if nodes.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} nodes supplied for {} parameters",
                nodes.len(),
                self.params.len()
            )));
        }
        Ok(Bound(nodes.to_vec()))
    }

    /// Gradient of every parameter, `None` for frozen ones.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.params
            .iter()
            .zip(&bound.0)
            .map(|(p, &n)| if p.trainable { grads.take(n) } else { None })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Everything a block needs while emitting its part of a forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub norm_updates: Vec<(NormId, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, bound: &'a Bound, mode: Mode) -> Self {
        Ctx {
            g,
            store,
            bound,
            mode,
            norm_updates: Vec::new(),
        }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.bound.node(id)
    }

    pub fn batchnorm(&mut self, x: NodeId, norm: NormId) -> Result<NodeId> {
        let nb = self.store.norm(norm);
        let (gamma, beta) = (self.bound.node(nb.gamma), self.bound.node(nb.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm_train(x, gamma, beta, nb.epsilon)?;
                self.norm_updates.push((norm, stats));
                Ok(y)
            }
            Mode::Eval => self.g.batchnorm_infer(
                x,
                gamma,
                beta,
                &nb.running_mean,
                &nb.running_var,
                nb.epsilon,
            ),
        }
    }
}
