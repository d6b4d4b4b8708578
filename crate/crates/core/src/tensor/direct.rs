//! Direct convolution for wide, shallow layers where im2col traffic and thin
//! GEMMs dominate: 3×3 with unit padding at stride 1 or 2, and 1×1 at stride 1.
//!
//! Each input channel is copied into zero-bordered planes laid out on the
//! output grid (four polyphase planes for stride 2), so every kernel tap is a
//! fixed offset into one flattened row of length `(oh - 1) * (ow + 2) + ow`.
//! Outputs use the same row stride; the two junk columns per row are dropped
//! when copying out and zeroed when copying gradients in.

use super::kernels::{dot, ConvGeom};
use super::Scalar;

/// Output planes narrower than this go through im2col + GEMM instead.
pub(crate) const MIN_WIDTH: usize = 16;

pub(crate) fn applies(g: &ConvGeom) -> bool {
    Plan::new(g).is_some()
}

struct Plan {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    /// Padded planes per channel: 1, or 4 polyphase planes at stride 2.
    phases: usize,
    /// Row stride of a padded plane.
    row: usize,
    /// Padded plane size.
    plane: usize,
    /// Length of the flattened output row.
    span: usize,
    /// `(phase, offset)` per kernel tap, in kernel memory order.
    taps: Vec<(usize, usize)>,
}

impl Plan {
    fn new(g: &ConvGeom) -> Option<Self> {
        if g.ow < MIN_WIDTH {
            return None;
        }
        let row = g.ow + 2;
        let grid = |f: &dyn Fn(usize) -> (usize, usize)| {
            let mut taps = Vec::with_capacity(9);
            for a in 0..3 {
                for b in 0..3 {
                    let ((pa, ra), (pb, rb)) = (f(a), f(b));
                    taps.push((pa * 2 + pb, ra * row + rb));
                }
            }
            taps
        };
        let (phases, taps) = match (g.kh, g.kw, g.stride, g.pad) {
            (3, 3, 1, 1) => (1, grid(&|a| (0, a))),
            // Input row 2*oy + a - 1 lives in phase (a + 1) % 2 at padded row oy + (a > 0).
            (3, 3, 2, 1) if g.h == 2 * g.oh && g.w == 2 * g.ow => {
                (4, grid(&|a| ((a + 1) % 2, usize::from(a > 0))))
            }
            (1, 1, 1, 0) => (1, vec![(0, row + 1)]),
            _ => return None,
        };
        Some(Plan {
            h: g.h,
            w: g.w,
            oh: g.oh,
            ow: g.ow,
            phases,
            row,
            plane: (g.oh + 2) * row,
            span: (g.oh - 1) * row + g.ow,
            taps,
        })
    }

    /// Slice of the padded buffer read by tap `t` of channel `c`.
    #[inline(always)]
    fn window<'a, T>(&self, padded: &'a [T], c: usize, t: usize) -> &'a [T] {
        let (phase, off) = self.taps[t];
        let at = (c * self.phases + phase) * self.plane + off;
        &padded[at..at + self.span]
    }

    #[inline(always)]
    fn window_mut<'a, T>(&self, padded: &'a mut [T], c: usize, t: usize) -> &'a mut [T] {
        let (phase, off) = self.taps[t];
        let at = (c * self.phases + phase) * self.plane + off;
        &mut padded[at..at + self.span]
    }

    /// Copies `h×w` input planes into zero-bordered (polyphase) planes.
    #[inline(always)]
    fn gather<T: Scalar>(&self, src: &[T], dst: &mut Vec<T>) {
        let channels = src.len() / (self.h * self.w);
        dst.clear();
        dst.resize(channels * self.phases * self.plane, T::zero());
        for (c, p) in src.chunks_exact(self.h * self.w).enumerate() {
            for phase in 0..self.phases {
                let d = &mut dst[(c * self.phases + phase) * self.plane..][..self.plane];
                let (pr, pc) = (phase / 2, phase % 2);
                for i in 0..self.oh {
                    let drow = &mut d[(i + 1) * self.row + 1..][..self.ow];
                    if self.phases == 1 {
                        drow.copy_from_slice(&p[i * self.w..][..self.ow]);
                    } else {
                        let srow = &p[(2 * i + pr) * self.w..][..self.w];
                        drow.iter_mut().zip(srow[pc..].iter().step_by(2)).for_each(|(d, &v)| *d = v);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::gather`]: adds the interiors back into `h×w` planes.
    #[inline(always)]
    fn scatter<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        for (c, p) in dst.chunks_exact_mut(self.h * self.w).enumerate() {
            for phase in 0..self.phases {
                let s = &src[(c * self.phases + phase) * self.plane..][..self.plane];
                let (pr, pc) = (phase / 2, phase % 2);
                for i in 0..self.oh {
                    let srow = &s[(i + 1) * self.row + 1..][..self.ow];
                    if self.phases == 1 {
                        p[i * self.w..][..self.ow].iter_mut().zip(srow).for_each(|(d, &v)| *d += v);
                    } else {
                        let drow = &mut p[(2 * i + pr) * self.w..][..self.w];
                        drow[pc..].iter_mut().step_by(2).zip(srow).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }

    /// Lays an `oh×ow` plane onto the flattened output row, junk columns zero.
    #[inline(always)]
    fn flatten<T: Scalar>(&self, plane: &[T], flat: &mut [T]) {
        flat.fill(T::zero());
        for (y, row) in plane.chunks_exact(self.ow).enumerate() {
            flat[y * self.row..][..self.ow].copy_from_slice(row);
        }
    }

    /// Adds the valid columns of a flattened output row into an `oh×ow` plane.
    #[inline(always)]
    fn add_out<T: Scalar>(&self, flat: &[T], plane: &mut [T]) {
        for (y, drow) in plane.chunks_exact_mut(self.ow).enumerate() {
            drow.iter_mut().zip(&flat[y * self.row..][..self.ow]).for_each(|(d, &v)| *d += v);
        }
    }
}

#[inline(always)]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[i] += k0*s0[i] + k1*s1[i] + k2*s2[i]`.
#[inline(always)]
fn axpy3<T: Scalar>(out: &mut [T], s: [&[T]; 3], k: [T; 3]) {
    let rows = s[0].iter().zip(s[1]).zip(s[2]);
    for (o, ((&a, &b), &c)) in out.iter_mut().zip(rows) {
        *o += k[0] * a + k[1] * b + k[2] * c;
    }
}

/// Nine dot products sharing `d`, eight lanes each.
#[inline(always)]
fn dot9<T: Scalar>(d: &[T], s: [&[T]; 9], acc: &mut [T]) {
    let mut lanes = [[T::zero(); 8]; 9];
    let full = d.len() / 8 * 8;
    for base in (0..full).step_by(8) {
        let dc: &[T; 8] = d[base..base + 8].try_into().expect("chunk of 8");
        for t in 0..9 {
            let sc: &[T; 8] = s[t][base..base + 8].try_into().expect("chunk of 8");
            for j in 0..8 {
                lanes[t][j] += dc[j] * sc[j];
            }
        }
    }
    for t in 0..9 {
        let l = lanes[t];
        let mut v = ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7]));
        for i in full..d.len() {
            v += d[i] * s[t][i];
        }
        acc[t] += v;
    }
}

#[inline(always)]
fn forward_impl<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    let plan = Plan::new(g).expect("direct conv plan");
    let (hw, ohw, nt) = (g.h * g.w, g.oh * g.ow, plan.taps.len());
    let mut padded = Vec::new();
    let mut flat = vec![T::zero(); plan.span];
    for s in 0..g.n {
        plan.gather(&x[s * g.c_in * hw..(s + 1) * g.c_in * hw], &mut padded);
        for co in 0..g.c_out {
            flat.fill(T::zero());
            for ci in 0..g.c_in {
                let k = &w[(co * g.c_in + ci) * nt..][..nt];
                if nt == 9 {
                    for r in 0..3 {
                        let src = [plan.window(&padded, ci, 3 * r), plan.window(&padded, ci, 3 * r + 1), plan.window(&padded, ci, 3 * r + 2)];
                        axpy3(&mut flat, src, [k[3 * r], k[3 * r + 1], k[3 * r + 2]]);
                    }
                } else {
                    axpy(k[0], plan.window(&padded, ci, 0), &mut flat);
                }
            }
            plan.add_out(&flat, &mut y[(s * g.c_out + co) * ohw..][..ohw]);
        }
    }
}

#[inline(always)]
fn backward_input_impl<T: Scalar>(g: &ConvGeom, w: &[T], dy: &[T], dx: &mut [T]) {
    let plan = Plan::new(g).expect("direct conv plan");
    let (hw, ohw, nt) = (g.h * g.w, g.oh * g.ow, plan.taps.len());
    let mut grads = vec![T::zero(); g.c_in * plan.phases * plan.plane];
    let mut flat = vec![T::zero(); plan.span];
    for s in 0..g.n {
        grads.fill(T::zero());
        for co in 0..g.c_out {
            plan.flatten(&dy[(s * g.c_out + co) * ohw..][..ohw], &mut flat);
            for ci in 0..g.c_in {
                let k = &w[(co * g.c_in + ci) * nt..][..nt];
                for (t, &kt) in k.iter().enumerate() {
                    axpy(kt, &flat, plan.window_mut(&mut grads, ci, t));
                }
            }
        }
        plan.scatter(&grads, &mut dx[s * g.c_in * hw..(s + 1) * g.c_in * hw]);
    }
}

#[inline(always)]
fn backward_weight_impl<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T], dw: &mut [T]) {
    let plan = Plan::new(g).expect("direct conv plan");
    let (hw, ohw, nt) = (g.h * g.w, g.oh * g.ow, plan.taps.len());
    let mut padded = Vec::new();
    let mut flat = vec![T::zero(); plan.span];
    for s in 0..g.n {
        plan.gather(&x[s * g.c_in * hw..(s + 1) * g.c_in * hw], &mut padded);
        for co in 0..g.c_out {
            plan.flatten(&dy[(s * g.c_out + co) * ohw..][..ohw], &mut flat);
            for ci in 0..g.c_in {
                let acc = &mut dw[(co * g.c_in + ci) * nt..][..nt];
                if nt == 9 {
                    let win = |t| plan.window(&padded, ci, t);
                    dot9(&flat, [win(0), win(1), win(2), win(3), win(4), win(5), win(6), win(7), win(8)], acc);
                } else {
                    acc[0] += dot(&flat, plan.window(&padded, ci, 0));
                }
            }
        }
    }
}

macro_rules! dispatch {
    ($public:ident, $avx:ident, $inner:ident, ($($arg:ident : $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx<T: Scalar>($($arg: $ty),*) {
            $inner($($arg),*)
        }

        pub(crate) fn $public<T: Scalar>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 support was verified at runtime just above.
                return unsafe { $avx($($arg),*) };
            }
            $inner($($arg),*)
        }
    };
}

dispatch!(forward, forward_avx2, forward_impl, (g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]));
dispatch!(backward_input, backward_input_avx2, backward_input_impl, (g: &ConvGeom, w: &[T], dy: &[T], dx: &mut [T]));
dispatch!(backward_weight, backward_weight_avx2, backward_weight_impl, (g: &ConvGeom, x: &[T], dy: &[T], dw: &mut [T]));
