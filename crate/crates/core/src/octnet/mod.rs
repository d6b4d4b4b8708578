//! Octave convolution and the Oct-ResNet feature extractor.

mod backbone;
mod layer;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Bound, Graph, NormMode, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

pub use backbone::{Backbone, BackboneConfig, Block, Preset};
pub use layer::{oct_conv_values, OctConvLayer, OctNorm, SplitLayer};

pub const DEFAULT_ALPHA: f64 = 0.25;

/// Channel counts of the two frequency branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OctChannels {
    pub high: usize,
    pub low: usize,
}

impl OctChannels {
    /// `low = round(alpha * total)`, `high = total - low`.
    pub fn split(total: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0, 1), got {alpha}")));
        }
        let low = (alpha * total as f64).round() as usize;
        if low >= total {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} leaves no high-frequency channels out of {total}"
            )));
        }
        Ok(OctChannels { high: total - low, low })
    }

    pub fn total(self) -> usize {
        self.high + self.low
    }
}

/// Value-level pair of feature maps. `low` is at half the spatial size of
/// `high` and absent when every channel is high-frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct OctTensor<T> {
    pub high: Tensor<T>,
    pub low: Option<Tensor<T>>,
}

/// Graph-level counterpart of [`OctTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OctVar {
    pub high: Var,
    pub low: Option<Var>,
}

/// Batch statistics to fold into a norm layer's running buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

pub const BN_MOMENTUM: f64 = 0.9;

/// `running = 0.9 * running + 0.1 * batch`.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    let keep = T::of(BN_MOMENTUM);
    let take = T::of(1.0 - BN_MOMENTUM);
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let dst = store.get_mut(id).value.data_mut();
            dst.iter_mut().zip(batch).for_each(|(r, &b)| *r = keep * *r + take * b);
        }
    }
}

/// State threaded through a forward pass: the graph under construction,
/// parameter handles, and the train/eval switch.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
    pub training: bool,
    pub stats: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, bound: &'a Bound, training: bool) -> Self {
        Forward { graph, store, bound, training, stats: Vec::new() }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

pub(crate) fn kaiming<T: Scalar, R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match")
}

pub(crate) fn add_weight<T: Scalar>(store: &mut ParamStore<T>, name: String, value: Tensor<T>) -> Result<ParamId> {
    store.add(name, value, ParamKind::Weight)
}

pub(crate) fn norm_mode<'s, T: Scalar>(store: &'s ParamStore<T>, training: bool, gamma: ParamId, mean: ParamId, var: ParamId) -> NormMode<'s, T> {
    if training && store.get(gamma).trainable {
        NormMode::Batch
    } else {
        NormMode::Running { mean: store.value(mean).data(), var: store.value(var).data() }
    }
}
