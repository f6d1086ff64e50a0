//! Stride-1, shape-preserving 2D convolution kernels on `(channels, height, width)`
//! buffers. Kernels are `(out, in, kh, kw)` with odd spatial extent; padding is zero.
//!
//! `conv2d` is a cross-correlation. `conv2d_transpose` is its exact adjoint in the
//! input argument and `conv2d_kernel_grad` is its adjoint in the kernel argument.

use super::{GradError, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn dims(input_channels_shape: &[usize], kernel: &Tensor, input_is_out: bool) -> Result<ConvDims, GradError> {
    let ks = kernel.shape();
    if ks.len() != 4 {
        return Err(GradError::Shape(format!("kernel must be 4-D, got {:?}", ks)));
    }
    if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
        return Err(GradError::Shape(format!("kernel extent must be odd, got {:?}", ks)));
    }
    if input_channels_shape.len() != 3 {
        return Err(GradError::Shape(format!(
            "conv input must be (C, H, W), got {:?}",
            input_channels_shape
        )));
    }
    let (c_out, c_in) = (ks[0], ks[1]);
    let expected_c = if input_is_out { c_out } else { c_in };
    if input_channels_shape[0] != expected_c {
        return Err(GradError::Shape(format!(
            "input has {} channels, kernel {:?} expects {}",
            input_channels_shape[0], ks, expected_c
        )));
    }
    Ok(ConvDims {
        c_in,
        c_out,
        h: input_channels_shape[1],
        w: input_channels_shape[2],
        kh: ks[2],
        kw: ks[3],
    })
}

/// Row/column ranges (in output coordinates) for which the shifted source index is in bounds.
#[inline]
fn span(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor, GradError> {
    let d = dims(input.shape(), kernel, false)?;
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.c_out * plane];
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let k = kernel.data();
    let src = input.data();
    for o in 0..d.c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        for c in 0..d.c_in {
            let in_plane = &src[c * plane..(c + 1) * plane];
            for ky in 0..d.kh {
                let dy = ky as isize - ph;
                let (y0, y1) = span(d.h, dy);
                for kx in 0..d.kw {
                    let wgt = k[((o * d.c_in + c) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw;
                    let (x0, x1) = span(d.w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut out_plane[y * d.w + x0..y * d.w + x1];
                        let s0 = (sy * d.w) as isize + x0 as isize + dx;
                        let s = &in_plane[s0 as usize..s0 as usize + (x1 - x0)];
                        for (a, b) in dst.iter_mut().zip(s) {
                            *a += wgt * b;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h, d.w], out)
}

pub fn conv2d_transpose(input: &Tensor, kernel: &Tensor) -> Result<Tensor, GradError> {
    let d = dims(input.shape(), kernel, true)?;
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.c_in * plane];
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let k = kernel.data();
    let src = input.data();
    for c in 0..d.c_in {
        let out_plane = &mut out[c * plane..(c + 1) * plane];
        for o in 0..d.c_out {
            let in_plane = &src[o * plane..(o + 1) * plane];
            for ky in 0..d.kh {
                let dy = ky as isize - ph;
                let (y0, y1) = span(d.h, dy);
                for kx in 0..d.kw {
                    let wgt = k[((o * d.c_in + c) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw;
                    let (x0, x1) = span(d.w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s = &in_plane[y * d.w + x0..y * d.w + x1];
                        let t0 = ((sy * d.w) as isize + x0 as isize + dx) as usize;
                        let dst = &mut out_plane[t0..t0 + (x1 - x0)];
                        for (a, b) in dst.iter_mut().zip(s) {
                            *a += wgt * b;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_in, d.h, d.w], out)
}

/// Gradient of `<grad_out, conv2d(input, K)>` with respect to `K`.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
) -> Result<Tensor, GradError> {
    let probe = Tensor::zeros(kernel_shape);
    let d = dims(input.shape(), &probe, false)?;
    if grad_out.shape() != [d.c_out, d.h, d.w] {
        return Err(GradError::Shape(format!(
            "kernel grad: output gradient {:?} does not match ({}, {}, {})",
            grad_out.shape(),
            d.c_out,
            d.h,
            d.w
        )));
    }
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut gk = vec![0.0; kernel_shape.iter().product()];
    let src = input.data();
    let g = grad_out.data();
    for o in 0..d.c_out {
        let g_plane = &g[o * plane..(o + 1) * plane];
        for c in 0..d.c_in {
            let in_plane = &src[c * plane..(c + 1) * plane];
            for ky in 0..d.kh {
                let dy = ky as isize - ph;
                let (y0, y1) = span(d.h, dy);
                for kx in 0..d.kw {
                    let dx = kx as isize - pw;
                    let (x0, x1) = span(d.w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let a = &g_plane[y * d.w + x0..y * d.w + x1];
                        let s0 = ((sy * d.w) as isize + x0 as isize + dx) as usize;
                        let b = &in_plane[s0..s0 + (x1 - x0)];
                        acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    }
                    gk[((o * d.c_in + c) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), gk)
}

/// Rotate the trailing two (square) axes by `quarter_turns` x 90 degrees counter-clockwise,
/// with row 0 at the top of the image.
pub fn rot90(input: &Tensor, quarter_turns: i32) -> Result<Tensor, GradError> {
    let s = input.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(GradError::Shape(format!("rot90 needs square trailing axes, got {:?}", s)));
    }
    let n = s[s.len() - 1];
    let plane = n * n;
    let turns = quarter_turns.rem_euclid(4);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for (p, chunk) in out.chunks_mut(plane).enumerate() {
        let base = &src[p * plane..(p + 1) * plane];
        for r in 0..n {
            for c in 0..n {
                // destination (r, c) reads source (sr, sc)
                let (sr, sc) = match turns {
                    0 => (r, c),
                    1 => (c, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - c),
                    _ => (n - 1 - c, r),
                };
                chunk[r * n + c] = base[sr * n + sc];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}
