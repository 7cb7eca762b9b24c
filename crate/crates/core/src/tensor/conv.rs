//! 2-D cross-correlation (no kernel flip) via im2col and GEMM.

use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(input: [usize; 4], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, c_in, h, w] = input;
        let &[c_out, wc_in, kh, kw] = weight else {
            return Err(Error::shape(format!(
                "conv weight must be [C_out,C_in,k,k], got {weight:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv input {:?} has {c_in} channels but weight {weight:?} expects {wc_in}",
                [batch, c_in, h, w]
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {weight:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "kernel {k} larger than padded input {h}x{w} (padding {pad})"
            )));
        }
        Ok(Geometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1 stride-1 unpadded conv reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let (k, n) = (self.k, self.out_pixels());
        for ci in 0..self.c_in {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], img: &mut [f64]) {
        let (k, n) = (self.k, self.out_pixels());
        for ci in 0..self.c_in {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c_out] => Err(Error::shape(format!(
            "bias {:?} does not match {c_out} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

/// Convolution over a rank-3 `[C,H,W]` or rank-4 `[B,C,H,W]` input; the
/// output has the same rank as the input.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let out = conv2d_forward(input, weight, bias, stride, padding)?;
    if input.rank() == 3 {
        let s = out.shape()[1..].to_vec();
        out.reshape(s)
    } else {
        Ok(out)
    }
}

/// Rank-4 output convolution used by the graph.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input.dims4()?, weight.shape(), stride, padding)?;
    check_bias(bias, g.c_out)?;
    let (kk, n) = (g.patch_len(), g.out_pixels());
    let in_plane = g.c_in * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.c_out * n];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * n]
    };
    for b in 0..g.batch {
        let img = &input.data()[b * in_plane..(b + 1) * in_plane];
        let colref: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut col);
            &col
        };
        let dst = &mut out[b * g.c_out * n..(b + 1) * g.c_out * n];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_exact_mut(n).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm(
            g.c_out,
            kk,
            n,
            (weight.data(), kk as isize, 1),
            (colref, n as isize, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    Tensor::new([g.batch, g.c_out, g.h_out, g.w_out], out)
}

pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_bias: bool,
) -> Result<Conv2dGrads> {
    let g = Geometry::new(input.dims4()?, weight.shape(), stride, padding)?;
    let (kk, n) = (g.patch_len(), g.out_pixels());
    if grad_out.len() != g.batch * g.c_out * n {
        return Err(Error::shape(format!(
            "conv grad {:?} does not match output [{}, {}, {}, {}]",
            grad_out.shape(),
            g.batch,
            g.c_out,
            g.h_out,
            g.w_out
        )));
    }
    let in_plane = g.c_in * g.h * g.w;
    let mut gw = vec![0.0; g.c_out * kk];
    let mut gb = vec![0.0; g.c_out];
    let mut gin = need_input.then(|| vec![0.0; input.len()]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * n]
    };
    let mut gcol = vec![0.0; kk * n];
    for b in 0..g.batch {
        let img = &input.data()[b * in_plane..(b + 1) * in_plane];
        let go = &grad_out.data()[b * g.c_out * n..(b + 1) * g.c_out * n];
        let colref: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut col);
            &col
        };
        // gW[co, kk] += gout[co, n] · col[kk, n]^T
        gemm(
            g.c_out,
            n,
            kk,
            (go, n as isize, 1),
            (colref, 1, n as isize),
            1.0,
            &mut gw,
        );
        if need_bias {
            for (co, chunk) in go.chunks_exact(n).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gin) = gin.as_mut() {
            // gcol[kk, n] = W[co, kk]^T · gout[co, n]
            gemm(
                kk,
                g.c_out,
                n,
                (weight.data(), 1, kk as isize),
                (go, n as isize, 1),
                0.0,
                &mut gcol,
            );
            let dst = &mut gin[b * in_plane..(b + 1) * in_plane];
            if g.is_pointwise() {
                for (d, &s) in dst.iter_mut().zip(&gcol) {
                    *d += s;
                }
            } else {
                g.col2im_add(&gcol, dst);
            }
        }
    }
    Ok(Conv2dGrads {
        input: gin
            .map(|v| Tensor::new(input.shape().to_vec(), v))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: need_bias.then(|| Tensor::new([g.c_out], gb)).transpose()?,
    })
}
