//! 2-D cross-correlation over `(C, H, W)` feature maps with zero padding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn out_size(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv: input {len} too small for kernel {k} with padding {pad}"
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + tap - pad` lands in `[0, len)`.
fn valid_range(out: usize, len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // largest o with o*stride + tap - pad <= len - 1
    let hi = if len + pad > tap {
        ((len + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn check_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            expected: vec![
                ws.first().copied().unwrap_or(0),
                cin,
                ws.get(2).copied().unwrap_or(0),
                ws.get(2).copied().unwrap_or(0),
            ],
            got: ws.to_vec(),
        });
    }
    bias.expect_shape(&[ws[0]])?;
    Ok((cin, h, w, ws[0], ws[2]))
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, h, w, cout, k) = check_shapes(input, weight, bias)?;
    let (oh, ow) = (out_size(h, k, stride, pad)?, out_size(w, k, stride, pad)?);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
        plane.fill(bias.data()[oc]);
        for ic in 0..cin {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let (x_lo, x_hi) = valid_range(ow, w, kx, stride, pad);
                    let wv = wt[((oc * cin + ic) * k + ky) * k + kx];
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let src = &row[(x_lo as isize + off) as usize..(x_hi as isize + off) as usize];
                            for (o, s) in orow[x_lo..x_hi].iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let (cin, h, w, cout, k) = check_shapes(input, weight, bias)?;
    let (oh, ow) = (out_size(h, k, stride, pad)?, out_size(w, k, stride, pad)?);
    grad_out.expect_shape(&[cout, oh, ow])?;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; cin * h * w];
    let mut gw = vec![0.0; wt.len()];
    let gb: Vec<f64> = go.chunks(oh * ow).map(|p| p.iter().sum()).collect();

    for oc in 0..cout {
        let gplane = &go[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            let gxin = &mut gx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let (x_lo, x_hi) = valid_range(ow, w, kx, stride, pad);
                    let widx = ((oc * cin + ic) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let a = (x_lo as isize + off) as usize;
                            let b = (x_hi as isize + off) as usize;
                            let row = &xin[iy * w + a..iy * w + b];
                            let grow = &grow[x_lo..x_hi];
                            for (g, s) in grow.iter().zip(row) {
                                acc += g * s;
                            }
                            let gxrow = &mut gxin[iy * w + a..iy * w + b];
                            for (gxv, g) in gxrow.iter_mut().zip(grow) {
                                *gxv += wv * g;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = iy * w + ox * stride + kx - pad;
                                acc += grow[ox] * xin[ix];
                                gxin[ix] += wv * grow[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_vec(&[cin, h, w], gx)?,
        weight: gw,
        bias: gb,
    })
}

/// Convolution layer owning its parameters. Padding is `(k - 1) / 2`, so
/// stride 1 preserves the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    /// He-normal kernel (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let fan_in = (in_ch * k * k) as f64;
        Self::with_std(in_ch, out_ch, k, stride, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn with_std<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if k.is_multiple_of(2) || k == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
        let data = (0..out_ch * in_ch * k * k).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            weight: Tensor::parameter(&[out_ch, in_ch, k, k], data)?,
            bias: Tensor::parameter(&[out_ch], vec![0.0; out_ch])?,
            stride,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, &self.bias, self.stride, self.padding())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = conv2d_backward(x, &self.weight, &self.bias, self.stride, self.padding(), grad_out)?;
        self.weight.accumulate_grad(&g.weight)?;
        self.bias.accumulate_grad(&g.bias)?;
        Ok(g.input)
    }
}
