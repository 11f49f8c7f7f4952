//! Raw convolution/pooling kernels on flat slices. Single-threaded on
//! purpose: every output element is accumulated in a fixed loop order, so
//! results are bitwise reproducible run to run.

use super::real::Real;

pub fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

/// Valid output-column range so that `ox*stride + kx - pad` lands in [0, w).
fn ox_bounds(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_in = w + pad;
    let hi = if hi_in > kx { (hi_in - kx - 1) / stride + 1 } else { 0 };
    (lo.min(ow), hi.min(ow))
}

/// input [c_in, h, w] * kernel [c_out, c_in, k, k] -> out [c_out, oh, ow].
/// `out` must be zero-filled by the caller.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
    oh: usize,
    ow: usize,
) {
    for oc in 0..c_out {
        let out_plane = &mut out[oc * oh * ow..][..oh * ow];
        for ic in 0..c_in {
            let in_plane = &input[ic * h * w..][..h * w];
            let kbase = (oc * c_in + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kernel[kbase + ky * k + kx];
                    let (ox_lo, ox_hi) = ox_bounds(kx, pad, stride, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..][..w];
                        let out_row = &mut out_plane[oy * ow..][..ow];
                        let off = kx as isize - pad as isize;
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * stride) as isize + off;
                            out_row[ox] = out_row[ox] + wgt * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates into `d_input` (same layout as `input`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Real>(
    d_out: &[T],
    c_out: usize,
    oh: usize,
    ow: usize,
    kernel: &[T],
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    d_input: &mut [T],
    h: usize,
    w: usize,
) {
    for oc in 0..c_out {
        let g_plane = &d_out[oc * oh * ow..][..oh * ow];
        for ic in 0..c_in {
            let din_plane = &mut d_input[ic * h * w..][..h * w];
            let kbase = (oc * c_in + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kernel[kbase + ky * k + kx];
                    let (ox_lo, ox_hi) = ox_bounds(kx, pad, stride, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let din_row = &mut din_plane[iy as usize * w..][..w];
                        let g_row = &g_plane[oy * ow..][..ow];
                        let off = kx as isize - pad as isize;
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * stride) as isize + off) as usize;
                            din_row[ix] = din_row[ix] + wgt * g_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates into `d_kernel` [c_out, c_in, k, k].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel<T: Real>(
    d_out: &[T],
    c_out: usize,
    oh: usize,
    ow: usize,
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    d_kernel: &mut [T],
) {
    for oc in 0..c_out {
        let g_plane = &d_out[oc * oh * ow..][..oh * ow];
        for ic in 0..c_in {
            let in_plane = &input[ic * h * w..][..h * w];
            let kbase = (oc * c_in + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let (ox_lo, ox_hi) = ox_bounds(kx, pad, stride, w, ow);
                    let off = kx as isize - pad as isize;
                    let mut acc = T::ZERO;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..][..w];
                        let g_row = &g_plane[oy * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * stride) as isize + off) as usize;
                            acc = acc + g_row[ox] * in_row[ix];
                        }
                    }
                    let kk = kbase + ky * k + kx;
                    d_kernel[kk] = d_kernel[kk] + acc;
                }
            }
        }
    }
}

/// 3x3 stencil with replicate (clamp-to-edge) padding, applied per channel.
/// Spatial size is preserved. Used for the Laplacian filter.
pub fn stencil3x3_replicate<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[T; 9],
    out: &mut [T],
) {
    debug_assert!(h >= 1 && w >= 1);
    for ch in 0..c {
        let ip = &input[ch * h * w..][..h * w];
        let op = &mut out[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::ZERO;
                for dy in 0..3usize {
                    let iy = (y + dy).saturating_sub(1).min(h - 1);
                    for dx in 0..3usize {
                        let ix = (x + dx).saturating_sub(1).min(w - 1);
                        acc = acc + kernel[dy * 3 + dx] * ip[iy * w + ix];
                    }
                }
                op[y * w + x] = acc;
            }
        }
    }
}

/// Adjoint of `stencil3x3_replicate`; accumulates into `d_input`.
pub fn stencil3x3_replicate_backward<T: Real>(
    d_out: &[T],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[T; 9],
    d_input: &mut [T],
) {
    for ch in 0..c {
        let gp = &d_out[ch * h * w..][..h * w];
        let dp = &mut d_input[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let g = gp[y * w + x];
                for dy in 0..3usize {
                    let iy = (y + dy).saturating_sub(1).min(h - 1);
                    for dx in 0..3usize {
                        let ix = (x + dx).saturating_sub(1).min(w - 1);
                        dp[iy * w + ix] = dp[iy * w + ix] + kernel[dy * 3 + dx] * g;
                    }
                }
            }
        }
    }
}
