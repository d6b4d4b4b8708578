use rand::Rng;

use super::{add_weight, kaiming, norm_mode, Forward, OctChannels, OctTensor, OctVar, StatUpdate};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

/// Four-path octave convolution. Path `xy` maps branch `x` to branch `y`;
/// paths touching an empty branch are not created.
#[derive(Clone, Debug)]
pub struct OctConvLayer {
    pub name: String,
    pub input: OctChannels,
    pub output: OctChannels,
    pub kernel: usize,
    pub stride: usize,
    pub hh: ParamId,
    pub lh: Option<ParamId>,
    pub ll: Option<ParamId>,
    pub hl: Option<ParamId>,
}

impl OctConvLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: OctChannels,
        output: OctChannels,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input.high == 0 || output.high == 0 {
            return Err(Error::InvalidArgument(format!("{name}: the high branch cannot be empty")));
        }
        if kernel % 2 == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: kernel {kernel} must be odd and stride {stride} positive"
            )));
        }
        let fan_in = input.total() * kernel * kernel;
        let mut path = |tag: &str, from: usize, to: usize| -> Result<Option<ParamId>> {
            if from == 0 || to == 0 {
                return Ok(None);
            }
            let w = kaiming(&[to, from, kernel, kernel], fan_in, rng);
            add_weight(store, format!("{name}.{tag}"), w).map(Some)
        };
        let hh = path("hh", input.high, output.high)?.expect("both high branches are non-empty");
        let lh = path("lh", input.low, output.high)?;
        let ll = path("ll", input.low, output.low)?;
        let hl = path("hl", input.high, output.low)?;
        Ok(OctConvLayer { name: name.to_string(), input, output, kernel, stride, hh, lh, ll, hl })
    }

    pub fn weights(&self) -> Vec<ParamId> {
        [Some(self.hh), self.lh, self.ll, self.hl].into_iter().flatten().collect()
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: OctVar) -> Result<()> {
        let channels = |v: Var| {
            let d = g.dims(v);
            d[d.len() - 3]
        };
        let ok_high = channels(x.high) == self.input.high;
        let ok_low = match x.low {
            Some(l) => self.input.low == channels(l),
            None => self.input.low == 0,
        };
        if !(ok_high && ok_low) {
            return Err(Error::shape(
                "oct_conv",
                format!(
                    "{} expects {}+{} channels, got high {:?} low {:?}",
                    self.name,
                    self.input.high,
                    self.input.low,
                    g.dims(x.high),
                    x.low.map(|l| g.dims(l).to_vec())
                ),
            ));
        }
        Ok(())
    }

    /// `Y^H = f_HH(X^H) + up(f_LH(X^L))`, `Y^L = f_LL(X^L) + f_HL(pool(X^H))`.
    /// A stride of 2 is applied by every path convolution.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: OctVar) -> Result<OctVar> {
        self.check_input(f.graph, x)?;
        let (s, p) = (self.stride, self.kernel / 2);
        let mut high = f.graph.conv2d(x.high, f.param(self.hh), None, s, p)?;
        if let (Some(w), Some(xl)) = (self.lh, x.low) {
            let y = f.graph.conv2d(xl, f.param(w), None, s, p)?;
            let up = f.graph.upsample_nearest2x(y)?;
            high = self.merge(f.graph, high, up)?;
        }
        let low = match self.hl {
            None => None,
            Some(w_hl) => {
                let pooled = f.graph.avg_pool2x2(x.high)?;
                let mut low = f.graph.conv2d(pooled, f.param(w_hl), None, s, p)?;
                if let (Some(w), Some(xl)) = (self.ll, x.low) {
                    let y = f.graph.conv2d(xl, f.param(w), None, s, p)?;
                    low = self.merge(f.graph, low, y)?;
                }
                Some(low)
            }
        };
        Ok(OctVar { high, low })
    }

    fn merge<T: Scalar>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
        if g.dims(a) != g.dims(b) {
            return Err(Error::shape(
                "oct_conv",
                format!("{}: path outputs disagree, {:?} vs {:?}", self.name, g.dims(a), g.dims(b)),
            ));
        }
        g.add(a, b)
    }
}

/// Runs one octave convolution on concrete tensors (inference mode).
pub fn oct_conv_values<T: Scalar>(store: &ParamStore<T>, layer: &OctConvLayer, x: &OctTensor<T>) -> Result<OctTensor<T>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let high = g.input(x.high.clone())?;
    let low = x.low.clone().map(|l| g.input(l)).transpose()?;
    let mut f = Forward::new(&mut g, store, &bound, false);
    let y = layer.forward(&mut f, OctVar { high, low })?;
    Ok(OctTensor { high: g.value(y.high).clone(), low: y.low.map(|l| g.value(l).clone()) })
}

/// Adapter from a plain input to an octave pair. With `alpha == 0` the
/// input passes through as the high branch. Otherwise two 1×1 projections
/// produce the high channels and, after pooling, the low channels.
#[derive(Clone, Debug)]
pub struct SplitLayer {
    pub output: OctChannels,
    pub high: Option<ParamId>,
    pub low: Option<ParamId>,
}

impl SplitLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        width: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if alpha == 0.0 {
            return Ok(SplitLayer { output: OctChannels { high: in_channels, low: 0 }, high: None, low: None });
        }
        let output = OctChannels::split(width, alpha)?;
        let high = add_weight(store, format!("{name}.high"), kaiming(&[output.high, in_channels, 1, 1], in_channels, rng))?;
        let low = add_weight(store, format!("{name}.low"), kaiming(&[output.low, in_channels, 1, 1], in_channels, rng))?;
        Ok(SplitLayer { output, high: Some(high), low: Some(low) })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<OctVar> {
        let d = f.graph.dims(x);
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("oct_split", format!("spatial dims must be even, got {h}x{w}")));
        }
        match (self.high, self.low) {
            (Some(ph), Some(pl)) => {
                let high = f.graph.conv2d(x, f.param(ph), None, 1, 0)?;
                let projected = f.graph.conv2d(x, f.param(pl), None, 1, 0)?;
                let low = f.graph.avg_pool2x2(projected)?;
                Ok(OctVar { high, low: Some(low) })
            }
            _ => Ok(OctVar { high: x, low: None }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl NormIds {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(NormIds {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), ParamKind::Weight)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Weight)?,
            mean: store.add(format!("{name}.mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            var: store.add(format!("{name}.var"), Tensor::full(&[c], T::one()), ParamKind::Buffer)?,
        })
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, relu: bool) -> Result<Var> {
        let mode = norm_mode(f.store, f.training, self.gamma, self.mean, self.var);
        let (y, stats) = f.graph.batch_norm(x, f.bound.var(self.gamma), f.bound.var(self.beta), mode)?;
        if let Some(stats) = stats {
            f.stats.push(StatUpdate { mean: self.mean, var: self.var, stats });
        }
        if relu {
            f.graph.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// Batch normalization applied to each branch separately.
#[derive(Clone, Debug)]
pub struct OctNorm {
    high: NormIds,
    low: Option<NormIds>,
}

impl OctNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: OctChannels) -> Result<Self> {
        let high = NormIds::new(store, &format!("{name}.h"), channels.high)?;
        let low = if channels.low > 0 {
            Some(NormIds::new(store, &format!("{name}.l"), channels.low)?)
        } else {
            None
        };
        Ok(OctNorm { high, low })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: OctVar, relu: bool) -> Result<OctVar> {
        let high = self.high.forward(f, x.high, relu)?;
        let low = match (self.low, x.low) {
            (Some(n), Some(l)) => Some(n.forward(f, l, relu)?),
            (None, None) => None,
            _ => return Err(Error::shape("oct_norm", "branch layout does not match the norm layer")),
        };
        Ok(OctVar { high, low })
    }
}
