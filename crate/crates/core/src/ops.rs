//! Forward and backward kernels on raw slices.
//!
//! The [`Graph`](crate::graph::Graph) records which kernel produced each node
//! and calls the matching `*_backward` routine during reverse accumulation.

use crate::error::{dim_err, AmdError, Result};
use crate::scalar::{count, Real};

/// Geometry of a 2-D convolution over a `C_in×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 {
            return Err(dim_err!("conv2d input must be C×H×W, got {:?}", input));
        }
        if kernel.len() != 4 || kernel[2] != kernel[3] {
            return Err(dim_err!(
                "conv2d kernel must be C_out×C_in×k×k, got {:?}",
                kernel
            ));
        }
        if kernel[1] != input[0] {
            return Err(dim_err!(
                "conv2d kernel expects {} input channels, input has {}",
                kernel[1],
                input[0]
            ));
        }
        if stride == 0 {
            return Err(AmdError::Config("conv2d stride must be positive".into()));
        }
        let (h, w, k) = (input[1], input[2], kernel[2]);
        if k == 0 || k > h + 2 * padding || k > w + 2 * padding {
            return Err(dim_err!(
                "kernel {} does not fit {}×{} input with padding {}",
                k,
                h,
                w,
                padding
            ));
        }
        Ok(ConvGeometry {
            c_in: input[0],
            h,
            w,
            c_out: kernel[0],
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    /// Output positions `o` for which `o*stride + tap - padding` lies in `0..extent`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let last = extent as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(out_extent as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.h_out * g.w_out];
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.w_out);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.padding;
                            out_row[ox] = out_row[ox] + wv * in_row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and/or kernel gradients given the output gradient.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = kernel[widx];
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.w_out);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let go_row = &go_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let gi_row =
                                &mut gi[ci * plane_in + iy * g.w..ci * plane_in + (iy + 1) * g.w];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.padding;
                                gi_row[ix] = gi_row[ix] + wv * go_row[ox];
                            }
                        }
                        if grad_kernel.is_some() {
                            let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.padding;
                                acc = acc + in_row[ix] * go_row[ox];
                            }
                        }
                    }
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        gk[widx] = gk[widx] + acc;
                    }
                }
            }
        }
    }
}

/// Positive exponential power unit: `κ(x+1)^τ` for `x > 0`, `κe^x` otherwise.
pub fn pepu<T: Real>(x: T, kappa: T, tau: T) -> T {
    if x > T::zero() {
        kappa * (x + T::one()).powf(tau)
    } else {
        kappa * x.exp()
    }
}

pub fn pepu_slope<T: Real>(x: T, kappa: T, tau: T) -> T {
    if x > T::zero() {
        kappa * tau * (x + T::one()).powf(tau - T::one())
    } else {
        kappa * x.exp()
    }
}

pub fn check_pepu_params<T: Real>(kappa: T, tau: T) -> Result<()> {
    let (zero, one) = (T::zero(), T::one());
    if !(kappa > zero && kappa < one) {
        return Err(AmdError::Config(format!("PePU kappa {} outside (0,1)", kappa)));
    }
    if !(tau > zero && tau < one) {
        return Err(AmdError::Config(format!("PePU tau {} outside (0,1)", tau)));
    }
    Ok(())
}

fn pow_p<T: Real>(v: T, p: T) -> T {
    if p == T::one() {
        v
    } else if p == T::of(2.0) {
        v * v
    } else if p == T::of(3.0) {
        v * v * v
    } else {
        v.powf(p)
    }
}

/// Per-channel generalized mean `((1/n) Σ v^p)^(1/p)` over a `C×n` buffer.
pub fn gmp_forward<T: Real>(x: &[T], channels: usize, p: T) -> Vec<T> {
    let n = x.len() / channels;
    let inv_n = T::one() / count::<T>(n);
    x.chunks_exact(n)
        .map(|ch| {
            if p == T::one() {
                ch.iter().copied().sum::<T>() * inv_n
            } else {
                let m = ch.iter().map(|&v| pow_p(v, p)).sum::<T>() * inv_n;
                m.powf(T::one() / p)
            }
        })
        .collect()
}

pub fn gmp_backward<T: Real>(x: &[T], out: &[T], channels: usize, p: T, grad_out: &[T], grad_x: &mut [T]) {
    let n = x.len() / channels;
    let inv_n = T::one() / count::<T>(n);
    for c in 0..channels {
        let ch = &x[c * n..(c + 1) * n];
        let gx = &mut grad_x[c * n..(c + 1) * n];
        if p == T::one() {
            let s = grad_out[c] * inv_n;
            gx.iter_mut().for_each(|g| *g = *g + s);
            continue;
        }
        // d/dv_i = m^(1/p-1) v_i^(p-1) / n, with m^(1/p-1) = out / m
        let m = pow_p(out[c], p);
        if m <= T::zero() {
            continue;
        }
        let scale = grad_out[c] * out[c] / m * inv_n;
        let pm1 = p - T::one();
        for (g, &v) in gx.iter_mut().zip(ch) {
            *g = *g + scale * pow_p(v, pm1);
        }
    }
}

pub fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn euclidean<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt()
}

/// Euclidean distance between L2-normalized copies of `u` and `v`.
pub fn normalized_distance<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(dim_err!("feature lengths differ: {} vs {}", u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu <= T::zero() || nv <= T::zero() {
        return Err(AmdError::DegenerateFeature("zero-norm feature vector".into()));
    }
    Ok(u
        .iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a / nu - b / nv;
            d * d
        })
        .sum::<T>()
        .sqrt())
}

/// Accumulates `g · ∂d/∂own` for `d = normalized_distance(own, other)`.
/// The distance is symmetric, so the same routine serves both arguments.
pub fn normalized_distance_grad<T: Real>(
    own: &[T],
    other: &[T],
    dist: T,
    g: T,
    grad: &mut [T],
) {
    if dist <= T::zero() {
        return;
    }
    let (n_own, n_other) = (norm(own), norm(other));
    // dd/dû = (û - v̂)/d ; dû/du = (I - ûûᵀ)/‖u‖
    let gh: Vec<T> = own
        .iter()
        .zip(other)
        .map(|(&a, &b)| g * (a / n_own - b / n_other) / dist)
        .collect();
    let proj: T = gh.iter().zip(own).map(|(&x, &a)| x * a / n_own).sum();
    for ((gr, &x), &a) in grad.iter_mut().zip(&gh).zip(own) {
        *gr = *gr + (x - a / n_own * proj) / n_own;
    }
}
