//! Forward/backward kernels on raw row-major buffers.

use super::{direct, Scalar};
use crate::error::{Error, Result};

/// Dot product with eight independent accumulators so it vectorizes.
#[inline(always)]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline(always)]
pub(crate) fn sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    let tail = rest.iter().fold(T::zero(), |a, &v| a + v);
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], wd: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = x;
        let [c_out, wc_in, kh, kw] = wd;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {wc_in} (x {x:?}, w {wd:?})"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel dims must be odd, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Upper bound on the im2col buffer; small planes share one GEMM across samples.
const COLS_BUDGET: usize = 1 << 21;

fn group_size(g: &ConvGeom) -> usize {
    (COLS_BUDGET / (g.k() * g.p()).max(1)).clamp(1, g.n.max(1))
}

/// Writes sample `x` into columns `[off, off + p)` of a `k x ld` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize, off: usize) {
    let p = g.p();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copies `[c, p]` blocks of samples `s0..s0+gn` into / out of a `c x (gn * p)` matrix.
fn pack<T: Scalar>(src: &[T], c: usize, p: usize, s0: usize, gn: usize, dst: &mut [T]) {
    let ld = gn * p;
    for s in 0..gn {
        let sample = &src[(s0 + s) * c * p..(s0 + s + 1) * c * p];
        for (ch, row) in sample.chunks(p).enumerate() {
            dst[ch * ld + s * p..ch * ld + (s + 1) * p].copy_from_slice(row);
        }
    }
}

fn unpack<T: Scalar>(src: &[T], c: usize, p: usize, s0: usize, gn: usize, dst: &mut [T]) {
    let ld = gn * p;
    for s in 0..gn {
        let sample = &mut dst[(s0 + s) * c * p..(s0 + s + 1) * c * p];
        for (ch, row) in sample.chunks_mut(p).enumerate() {
            row.copy_from_slice(&src[ch * ld + s * p..ch * ld + (s + 1) * p]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut y = vec![T::zero(); g.n * out_sz];
    if let Some(b) = b {
        for (i, plane) in y.chunks_mut(p).enumerate() {
            plane.fill(b[i % g.c_out]);
        }
    }
    if direct::applies(g) {
        direct::forward(g, x, w, &mut y);
        return y;
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    let gs = group_size(g);
    if gs == 1 {
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
        for s in 0..g.n {
            let xs = &x[s * in_sz..(s + 1) * in_sz];
            let rhs = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols, p, 0);
                &cols
            };
            T::gemm(false, false, g.c_out, p, k, T::one(), w, rhs, beta, &mut y[s * out_sz..(s + 1) * out_sz]);
        }
        return y;
    }
    let mut cols = vec![T::zero(); k * gs * p];
    let mut out = vec![T::zero(); g.c_out * gs * p];
    for s0 in (0..g.n).step_by(gs) {
        let gn = gs.min(g.n - s0);
        let ld = gn * p;
        for s in 0..gn {
            im2col(g, &x[(s0 + s) * in_sz..(s0 + s + 1) * in_sz], &mut cols, ld, s * p);
        }
        pack(&y, g.c_out, p, s0, gn, &mut out);
        T::gemm(false, false, g.c_out, ld, k, T::one(), w, &cols[..k * ld], beta, &mut out[..g.c_out * ld]);
        unpack(&out, g.c_out, p, s0, gn, &mut y);
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_dx, want_dw, want_db) = want;
    let (k, p) = (g.k(), g.p());
    let in_sz = g.c_in * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_sz]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.c_out * k]);
    let mut db = want_db.then(|| vec![T::zero(); g.c_out]);
    if let Some(db) = db.as_mut() {
        for (i, plane) in dy.chunks(p).enumerate() {
            db[i % g.c_out] += sum(plane);
        }
    }
    if direct::applies(g) {
        if let Some(dw) = dw.as_mut() {
            direct::backward_weight(g, x, dy, dw);
        }
        if let Some(dx) = dx.as_mut() {
            direct::backward_input(g, w, dy, dx);
        }
        return ConvGrads { dx, dw, db };
    }
    let gs = group_size(g);
    let mut cols = vec![T::zero(); if want_dw { k * gs * p } else { 0 }];
    let mut dcols = vec![T::zero(); if want_dx { k * gs * p } else { 0 }];
    let mut dyg = vec![T::zero(); g.c_out * gs * p];
    for s0 in (0..g.n).step_by(gs) {
        let gn = gs.min(g.n - s0);
        let ld = gn * p;
        pack(dy, g.c_out, p, s0, gn, &mut dyg);
        let dyg = &dyg[..g.c_out * ld];
        if let Some(dw) = dw.as_mut() {
            for s in 0..gn {
                im2col(g, &x[(s0 + s) * in_sz..(s0 + s + 1) * in_sz], &mut cols, ld, s * p);
            }
            // dW (c_out x k) += dY (c_out x ld) * cols^T (ld x k)
            T::gemm(false, true, g.c_out, k, ld, T::one(), dyg, &cols[..k * ld], T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(true, false, k, ld, g.c_out, T::one(), w, dyg, T::zero(), &mut dcols[..k * ld]);
            for s in 0..gn {
                col2im(g, &dcols, ld, s * p, &mut dx[(s0 + s) * in_sz..(s0 + s + 1) * in_sz]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Splits dims `(.., H, W)` into (number of planes, H, W).
pub(crate) fn planes(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::shape(
            "spatial op",
            format!("need at least 2 dims, got {dims:?}"),
        ));
    }
    let h = dims[dims.len() - 2];
    let w = dims[dims.len() - 1];
    let n = dims[..dims.len() - 2].iter().product();
    Ok((n, h, w))
}

pub(crate) fn avg_pool2x2<T: Scalar>(x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); n * oh * ow];
    for p in 0..n {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let r0 = &src[2 * i * w..(2 * i + 1) * w];
            let r1 = &src[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                // Pairwise order keeps pool(upsample(x)) == x exact.
                let s = (r0[2 * j] + r0[2 * j + 1]) + (r1[2 * j] + r1[2 * j + 1]);
                dst[i * ow + j] = s * quarter;
            }
        }
    }
    y
}

pub(crate) fn upsample_nearest2x<T: Scalar>(x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); n * oh * ow];
    for p in 0..n {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let srow = &src[(i / 2) * w..(i / 2 + 1) * w];
            let drow = &mut dst[i * ow..(i + 1) * ow];
            for (j, d) in drow.iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    y
}

/// Adjoint of [`avg_pool2x2`].
pub(crate) fn avg_pool2x2_backward<T: Scalar>(dy: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = upsample_nearest2x(dy, n, h / 2, w / 2);
    let quarter = T::of(0.25);
    dx.iter_mut().for_each(|v| *v *= quarter);
    dx
}

/// Adjoint of [`upsample_nearest2x`]; `h`, `w` are the pre-upsampling dims.
pub(crate) fn upsample_nearest2x_backward<T: Scalar>(
    dy: &[T],
    n: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * h * w];
    for p in 0..n {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let a = src[2 * i * ow + 2 * j] + src[2 * i * ow + 2 * j + 1];
                let b = src[(2 * i + 1) * ow + 2 * j] + src[(2 * i + 1) * ow + 2 * j + 1];
                dst[i * w + j] = a + b;
            }
        }
    }
    dx
}

/// `(N, C, S)` view for per-channel statistics: `(N,C,H,W)`, `(C,H,W)` or `(N,C)`.
pub(crate) fn channel_layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [n, c, h, w] => Ok((n, c, h * w)),
        [c, h, w] => Ok((1, c, h * w)),
        [n, c] => Ok((n, c, 1)),
        _ => Err(Error::shape(
            "batch_norm",
            format!("expected a channel dim, got {dims:?}"),
        )),
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}
