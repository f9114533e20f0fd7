use super::{join, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// Group normalization: statistics per sample and per channel group, then a
/// per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub scale: Param,
    pub shift: Param,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} does not divide {channels} channels"
            )));
        }
        Ok(GroupNorm {
            groups,
            channels,
            scale: Param::filled(&[channels], 1.0),
            shift: Param::zeros(&[channels]),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GroupNormCache)> {
        if x.channels() != self.channels {
            return Err(Error::dim(
                "group_norm",
                format!("expected {} channels, got {}", self.channels, x.channels()),
            ));
        }
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let cpg = c / self.groups;
        let span = cpg * hw;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for g in 0..self.groups {
                let off = b * c * hw + g * span;
                let xs = &x.data()[off..off + span];
                let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
                let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
                let istd = 1.0 / (var + GN_EPS).sqrt();
                inv_std.push(istd as f32);
                let xh = &mut xhat.data_mut()[off..off + span];
                for (d, &v) in xh.iter_mut().zip(xs) {
                    *d = ((v as f64 - mean) * istd) as f32;
                }
                let xh = &xhat.data()[off..off + span];
                let od = &mut out.data_mut()[off..off + span];
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let (s, t) = (self.scale.value[ch], self.shift.value[ch]);
                    for i in ci * hw..(ci + 1) * hw {
                        od[i] = xh[i] * s + t;
                    }
                }
            }
        }
        Ok((out, GroupNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let cpg = c / self.groups;
        let span = cpg * hw;
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![0.0f32; span];
        for b in 0..n {
            for g in 0..self.groups {
                let off = b * c * hw + g * span;
                let dys = &dy.data()[off..off + span];
                let xh = &cache.xhat.data()[off..off + span];
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let s = self.scale.value[ch];
                    let mut ds = 0.0f64;
                    let mut dt = 0.0f64;
                    for i in ci * hw..(ci + 1) * hw {
                        ds += (dys[i] * xh[i]) as f64;
                        dt += dys[i] as f64;
                        dxhat[i] = dys[i] * s;
                    }
                    self.scale.grad[ch] += ds as f32;
                    self.shift.grad[ch] += dt as f32;
                }
                let sum_d: f64 = dxhat.iter().map(|&v| v as f64).sum();
                let sum_dx: f64 = dxhat.iter().zip(xh).map(|(&d, &x)| (d * x) as f64).sum();
                let istd = cache.inv_std[b * self.groups + g] as f64;
                let m = span as f64;
                let dxs = &mut dx.data_mut()[off..off + span];
                for i in 0..span {
                    dxs[i] = (istd / m * (m * dxhat[i] as f64 - sum_d - xh[i] as f64 * sum_dx)) as f32;
                }
            }
        }
        dx
    }
}

/// Group-normalizes `x` with the given per-channel `scale` and `shift`.
pub fn group_normalize(x: &Tensor, groups: usize, scale: &[f32], shift: &[f32]) -> Result<Tensor> {
    let mut gn = GroupNorm::new(groups, x.channels())?;
    if scale.len() != x.channels() || shift.len() != x.channels() {
        return Err(Error::dim(
            "group_normalize",
            format!("affine parameters must have {} entries", x.channels()),
        ));
    }
    gn.scale.value.copy_from_slice(scale);
    gn.shift.value.copy_from_slice(shift);
    Ok(gn.forward(x)?.0)
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}
