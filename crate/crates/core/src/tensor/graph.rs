use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization statistics source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Standardize with the statistics of the current batch.
    Batch,
    /// Standardize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics reported by [`Graph::batch_norm`] in batch mode.
/// `var` is the unbiased estimate used for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

/// Activation block used throughout the backbone.
#[derive(Clone, Copy, Debug)]
pub enum Activation<'a, T> {
    Relu,
    BatchNormRelu {
        gamma: Var,
        beta: Var,
        mode: NormMode<'a, T>,
    },
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    AttentionFuse {
        a: Var,
        b: Var,
        q: Var,
        weights: Vec<T>,
    },
    Mmd {
        x: Var,
        groups: Vec<Vec<usize>>,
        means: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the node vector is always topologically sorted.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("graph input")?;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every accumulated gradient, including those of leaves.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation (no kernel flip). `x` is `[C,H,W]` or `[N,C,H,W]`,
    /// `w` is `[C_out,C_in,kH,kW]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let (x4, batched) = match xd[..] {
            [n, c, h, wi] => ([n, c, h, wi], true),
            [c, h, wi] => ([1, c, h, wi], false),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be [C,H,W] or [N,C,H,W], got {xd:?}"),
                ))
            }
        };
        let w4: [usize; 4] = wd.as_slice().try_into().map_err(|_| {
            Error::shape("conv2d", format!("kernel must be [C_out,C_in,kH,kW], got {wd:?}"))
        })?;
        let geom = ConvGeom::new(x4, w4, stride, pad)?;
        if let Some(b) = b {
            if self.dims(b) != [geom.c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias dims {:?} do not match C_out {}", self.dims(b), geom.c_out),
                ));
            }
        }
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let dims = if batched {
            vec![geom.n, geom.c_out, geom.oh, geom.ow]
        } else {
            vec![geom.c_out, geom.oh, geom.ow]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(dims, y)?, Op::Conv2d { x, w, b, geom }, &inputs, "conv2d")
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let (n, h, w) = kernels::planes(&xd)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2x2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let y = kernels::avg_pool2x2(self.value(x).data(), n, h, w);
        let mut dims = xd;
        let r = dims.len();
        dims[r - 2] = h / 2;
        dims[r - 1] = w / 2;
        self.push(Tensor::new(dims, y)?, Op::AvgPool2 { x }, &[x], "avg_pool2x2")
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let (n, h, w) = kernels::planes(&xd)?;
        let y = kernels::upsample_nearest2x(self.value(x).data(), n, h, w);
        let mut dims = xd;
        let r = dims.len();
        dims[r - 2] = 2 * h;
        dims[r - 1] = 2 * w;
        self.push(Tensor::new(dims, y)?, Op::Upsample2 { x }, &[x], "upsample_nearest2x")
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push(Tensor::new(dims, y)?, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push(Tensor::new(dims, y)?, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let y: Vec<T> = self.value(x).data().iter().map(|&v| v * f).collect();
        let dims = self.dims(x).to_vec();
        self.push(Tensor::new(dims, y)?, Op::Scale { x, factor: f }, &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x], "sum")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let dims = self.dims(x).to_vec();
        self.push(Tensor::new(dims, y)?, Op::Relu { x }, &[x], "relu")
    }

    /// Per-channel standardization followed by the affine `gamma * xhat + beta`.
    /// Returns batch statistics when `mode` is [`NormMode::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, s) = kernels::channel_layout(self.dims(x))?;
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "affine params {:?}/{:?} do not match {c} channels",
                    self.dims(gamma),
                    self.dims(beta)
                ),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let m = n * s;
        let eps = T::of(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = matches!(mode, NormMode::Batch);
        match mode {
            NormMode::Batch => {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += kernels::sum(&xv[(i * c + ch) * s..(i * c + ch + 1) * s]);
                    }
                    mean[ch] = acc / T::of(m as f64);
                    let mut sq = T::zero();
                    for i in 0..n {
                        let plane = &xv[(i * c + ch) * s..(i * c + ch + 1) * s];
                        let centered: Vec<T> = plane.iter().map(|&v| v - mean[ch]).collect();
                        sq += kernels::dot(&centered, &centered);
                    }
                    var[ch] = sq / T::of(m as f64);
                }
            }
            NormMode::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats hold {}/{} values for {c} channels", rm.len(), rv.len()),
                    ));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    let h = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    y[k] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = batch_stats.then(|| {
            let unbias = if m > 1 {
                T::of(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbias).collect(),
            }
        });
        let dims = self.dims(x).to_vec();
        let out = self.push(
            Tensor::new(dims, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((out, stats))
    }

    /// `relu(x)` or `relu(batch_norm(x))`.
    pub fn activation_and_norm(
        &mut self,
        x: Var,
        act: Activation<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        match act {
            Activation::Relu => Ok((self.relu(x)?, None)),
            Activation::BatchNormRelu { gamma, beta, mode } => {
                let (y, stats) = self.batch_norm(x, gamma, beta, mode)?;
                Ok((self.relu(y)?, stats))
            }
        }
    }

    /// `x · wᵀ + b` with `x: [N, D_in]`, `w: [D_out, D_in]`, `b: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = match *self.dims(x) {
            [n, d] => (n, d),
            ref d => return Err(Error::shape("linear", format!("input must be [N, D_in], got {d:?}"))),
        };
        let dout = match *self.dims(w) {
            [o, i] if i == din => o,
            ref d => {
                return Err(Error::shape(
                    "linear",
                    format!("weight {d:?} incompatible with input [{n}, {din}]"),
                ))
            }
        };
        if self.dims(b) != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match D_out {dout}", self.dims(b)),
            ));
        }
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            false,
            true,
            n,
            dout,
            din,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut y,
        );
        self.push(Tensor::new(vec![n, dout], y)?, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = match *self.dims(x) {
            [n, c, h, w] => (n, c, h * w),
            ref d => {
                return Err(Error::shape(
                    "global_avg_pool",
                    format!("expected [N,C,H,W], got {d:?}"),
                ))
            }
        };
        let inv = T::of(1.0 / s as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(vec![n, c], y)?, Op::GlobalAvgPool { x }, &[x], "global_avg_pool")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.dims(logits) {
            [n, c] => (n, c),
            ref d => {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits must be [N, C], got {d:?}"),
                ))
            }
        };
        if n == 0 || labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            loss += lse - row[label];
            kernels::softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        loss = loss / T::of(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// Dot-product attention over two feature streams `a, b: [N, D]` with a
    /// shared kernel `q: [D]`. Row `i` of the result is
    /// `concat(w_a * a_i, w_b * b_i)` where `(w_a, w_b) = softmax(q·a_i, q·b_i)`.
    pub fn attention_fuse(&mut self, a: Var, b: Var, q: Var) -> Result<Var> {
        self.same_dims("attention_fuse", a, b)?;
        let (n, d) = match *self.dims(a) {
            [n, d] => (n, d),
            ref dd => {
                return Err(Error::shape(
                    "attention_fuse",
                    format!("features must be [N, D], got {dd:?}"),
                ))
            }
        };
        if self.dims(q) != [d] {
            return Err(Error::shape(
                "attention_fuse",
                format!("kernel {:?} does not match feature dim {d}", self.dims(q)),
            ));
        }
        let (av, bv, qv) = (self.value(a).data(), self.value(b).data(), self.value(q).data());
        let mut weights = vec![T::zero(); 2 * n];
        let mut y = vec![T::zero(); 2 * n * d];
        for i in 0..n {
            let ar = &av[i * d..(i + 1) * d];
            let br = &bv[i * d..(i + 1) * d];
            let sa: T = ar.iter().zip(qv).map(|(&x, &k)| x * k).sum();
            let sb: T = br.iter().zip(qv).map(|(&x, &k)| x * k).sum();
            kernels::softmax_row(&[sa, sb], &mut weights[2 * i..2 * i + 2]);
            let (wa, wb) = (weights[2 * i], weights[2 * i + 1]);
            let out = &mut y[2 * i * d..2 * (i + 1) * d];
            for k in 0..d {
                out[k] = wa * ar[k];
                out[d + k] = wb * br[k];
            }
        }
        self.push(
            Tensor::new(vec![n, 2 * d], y)?,
            Op::AttentionFuse { a, b, q, weights },
            &[a, b, q],
            "attention_fuse",
        )
    }

    /// Per-row `(w_a, w_b)` pairs of an [`Graph::attention_fuse`] node.
    pub fn fusion_weights(&self, v: Var) -> Option<Vec<(T, T)>> {
        match &self.nodes[v.0].op {
            Op::AttentionFuse { weights, .. } => {
                Some(weights.chunks(2).map(|w| (w[0], w[1])).collect())
            }
            _ => None,
        }
    }

    /// Mean-embedding discrepancy between row groups of `x: [N, D]`:
    /// `1/(K(K-1)) * sum over ordered pairs d != j of |mean_d - mean_j|^2`.
    pub fn mmd(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = match *self.dims(x) {
            [n, d] => (n, d),
            ref dd => return Err(Error::shape("mmd", format!("features must be [N, D], got {dd:?}"))),
        };
        let k = groups.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "alignment needs at least 2 domains, got {k}"
            )));
        }
        let mut seen = vec![false; n];
        for g in groups {
            if g.is_empty() {
                return Err(Error::InvalidArgument("empty domain batch".into()));
            }
            for &r in g {
                if r >= n || seen[r] {
                    return Err(Error::InvalidArgument(format!(
                        "row {r} is out of range or assigned to two domains"
                    )));
                }
                seen[r] = true;
            }
        }
        let xv = self.value(x).data();
        let means: Vec<Vec<T>> = groups
            .iter()
            .map(|g| {
                let mut m = vec![T::zero(); d];
                for &r in g {
                    for (acc, &v) in m.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                let inv = T::of(1.0 / g.len() as f64);
                m.iter_mut().for_each(|v| *v *= inv);
                m
            })
            .collect();
        let mut total = T::zero();
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    total += means[a]
                        .iter()
                        .zip(&means[b])
                        .map(|(&p, &q)| (p - q) * (p - q))
                        .sum::<T>();
                }
            }
        }
        let value = total / T::of((k * (k - 1)) as f64);
        self.push(
            Tensor::scalar(value),
            Op::Mmd {
                x,
                groups: groups.to_vec(),
                means,
            },
            &[x],
            "mmd",
        )
    }

    /// Reverse-mode accumulation from a scalar node. Gradients of
    /// intermediate nodes are recomputed on every call, gradients of leaves
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got dims {:?}", self.dims(loss)),
            ));
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &dy);
            self.nodes[i].grad = Some(dy);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn local_grads(&self, i: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want_b = b.is_some_and(rg);
                let grads = kernels::conv2d_backward(geom, val(*x), val(*w), dy, (rg(*x), rg(*w), want_b));
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::AvgPool2 { x } => {
                let (n, h, w) = kernels::planes(self.nodes[x.0].value.dims()).expect("checked in forward");
                out.push((*x, kernels::avg_pool2x2_backward(dy, n, h, w)));
            }
            Op::Upsample2 { x } => {
                let (n, h, w) = kernels::planes(self.nodes[x.0].value.dims()).expect("checked in forward");
                out.push((*x, kernels::upsample_nearest2x_backward(dy, n, h, w)));
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    out.push((*a, dy.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, dy.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    out.push((*a, dy.iter().zip(val(*b)).map(|(&g, &q)| g * q).collect()));
                }
                if rg(*b) {
                    out.push((*b, dy.iter().zip(val(*a)).map(|(&g, &p)| g * p).collect()));
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, dy.iter().map(|&g| g * *factor).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![dy[0]; self.nodes[x.0].value.len()]));
            }
            Op::Relu { x } => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, s) = kernels::channel_layout(self.nodes[x.0].value.dims()).expect("checked in forward");
                let g = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for smp in 0..n {
                    for ch in 0..c {
                        let r = (smp * c + ch) * s..(smp * c + ch + 1) * s;
                        dgamma[ch] += kernels::dot(&dy[r.clone()], &xhat[r.clone()]);
                        dbeta[ch] += kernels::sum(&dy[r]);
                    }
                }
                for ch in 0..c {
                    sum_dxhat[ch] = dbeta[ch] * g[ch];
                    sum_dxhat_xhat[ch] = dgamma[ch] * g[ch];
                }
                if rg(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::of((n * s) as f64);
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * s;
                            for k in base..base + s {
                                let dxh = dy[k] * g[ch];
                                dx[k] = if *batch_stats {
                                    inv_std[ch] / m * (m * dxh - sum_dxhat[ch] - xhat[k] * sum_dxhat_xhat[ch])
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if rg(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.nodes[x.0].value.dims()[0], self.nodes[x.0].value.dims()[1]);
                let dout = self.nodes[w.0].value.dims()[0];
                if rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(false, false, n, din, dout, T::one(), dy, val(*w), T::zero(), &mut dx);
                    out.push((*x, dx));
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(true, false, dout, din, n, T::one(), dy, val(*x), T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); dout];
                    for row in dy.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    out.push((*b, db));
                }
            }
            Op::GlobalAvgPool { x } => {
                let d = self.nodes[x.0].value.dims();
                let s = d[2] * d[3];
                let inv = T::of(1.0 / s as f64);
                let mut dx = Vec::with_capacity(dy.len() * s);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, s));
                }
                out.push((*x, dx));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = dy[0] / T::of(n as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * c + l] -= scale;
                }
                out.push((*logits, dz));
            }
            Op::AttentionFuse { a, b, q, weights } => {
                let (av, bv, qv) = (val(*a), val(*b), val(*q));
                let d = qv.len();
                let n = weights.len() / 2;
                let mut da = vec![T::zero(); n * d];
                let mut db = vec![T::zero(); n * d];
                let mut dq = vec![T::zero(); d];
                for r in 0..n {
                    let (wa, wb) = (weights[2 * r], weights[2 * r + 1]);
                    let ga = &dy[2 * r * d..2 * r * d + d];
                    let gb = &dy[2 * r * d + d..2 * (r + 1) * d];
                    let ar = &av[r * d..(r + 1) * d];
                    let br = &bv[r * d..(r + 1) * d];
                    let dwa: T = ga.iter().zip(ar).map(|(&g, &x)| g * x).sum();
                    let dwb: T = gb.iter().zip(br).map(|(&g, &x)| g * x).sum();
                    let mean = wa * dwa + wb * dwb;
                    let dsa = wa * (dwa - mean);
                    let dsb = wb * (dwb - mean);
                    for k in 0..d {
                        da[r * d + k] = wa * ga[k] + dsa * qv[k];
                        db[r * d + k] = wb * gb[k] + dsb * qv[k];
                        dq[k] += dsa * ar[k] + dsb * br[k];
                    }
                }
                if rg(*a) {
                    out.push((*a, da));
                }
                if rg(*b) {
                    out.push((*b, db));
                }
                if rg(*q) {
                    out.push((*q, dq));
                }
            }
            Op::Mmd { x, groups, means } => {
                let d = self.nodes[x.0].value.dims()[1];
                let k = groups.len();
                let coef = T::of(4.0 / (k * (k - 1)) as f64) * dy[0];
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (a, g) in groups.iter().enumerate() {
                    // d/dmean_a = 4/(K(K-1)) * sum_{j != a} (mean_a - mean_j)
                    let mut dm = vec![T::zero(); d];
                    for (j, mj) in means.iter().enumerate() {
                        if j != a {
                            for t in 0..d {
                                dm[t] += means[a][t] - mj[t];
                            }
                        }
                    }
                    let per_row = coef / T::of(g.len() as f64);
                    for &r in g {
                        for t in 0..d {
                            dx[r * d + t] = dm[t] * per_row;
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}
