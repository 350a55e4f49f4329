//! Group normalization over `(C, H, W)` maps.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_GN_EPS: f64 = 1e-5;

/// Default group count: `min(32, channels)`, reduced until it divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    let mut g = channels.min(32);
    while g > 1 && !channels.is_multiple_of(g) {
        g -= 1;
    }
    g.max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Saved forward quantities for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize, eps: f64) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
        }
        Ok(Self {
            groups,
            eps,
            gamma: Tensor::parameter(&[channels], vec![1.0; channels])?,
            beta: Tensor::parameter(&[channels], vec![0.0; channels])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GroupNormCache)> {
        let (c, h, w) = x.chw()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels(), h, w],
                got: x.shape().to_vec(),
            });
        }
        let per_group = c / self.groups * h * w;
        let hw = h * w;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for (src, dst) in x.data().chunks(per_group).zip(xhat.chunks_mut(per_group)) {
            let n = per_group as f64;
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let (ga, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for i in ch * hw..(ch + 1) * hw {
                out[i] = ga * xhat[i] + be;
            }
        }
        Ok((Tensor::from_vec(&[c, h, w], out)?, GroupNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &GroupNormCache, grad_out: &Tensor) -> Result<Tensor> {
        let (c, h, w) = grad_out.chw()?;
        let hw = h * w;
        let go = grad_out.data();
        let mut g_gamma = vec![0.0; c];
        let mut g_beta = vec![0.0; c];
        let mut dxhat = vec![0.0; go.len()];
        for ch in 0..c {
            let ga = self.gamma.data()[ch];
            for i in ch * hw..(ch + 1) * hw {
                g_gamma[ch] += go[i] * cache.xhat[i];
                g_beta[ch] += go[i];
                dxhat[i] = go[i] * ga;
            }
        }
        let per_group = c / self.groups * hw;
        let n = per_group as f64;
        let mut gx = vec![0.0; go.len()];
        for g in 0..self.groups {
            let r = g * per_group..(g + 1) * per_group;
            let sum_d: f64 = dxhat[r.clone()].iter().sum();
            let sum_dx: f64 = dxhat[r.clone()]
                .iter()
                .zip(&cache.xhat[r.clone()])
                .map(|(d, x)| d * x)
                .sum();
            let is = cache.inv_std[g];
            for i in r {
                gx[i] = is / n * (n * dxhat[i] - sum_d - cache.xhat[i] * sum_dx);
            }
        }
        self.gamma.accumulate_grad(&g_gamma)?;
        self.beta.accumulate_grad(&g_beta)?;
        Tensor::from_vec(&[c, h, w], gx)
    }
}
