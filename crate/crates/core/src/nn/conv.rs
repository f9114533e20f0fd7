use rand::Rng;

use super::{join, sgemm, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on the im2col buffer, in values. Batches are processed in
/// sample chunks that fit.
const COL_BUDGET: usize = 1 << 22;

/// 2-D convolution (cross-correlation) with zero padding, lowered to GEMM.
///
/// Weights are `[out, in, k, k]`, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let bias = bias.then(|| Param::fan_in_uniform(&[out_channels], fan_in, rng));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            weight: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("expected {} input channels, got {}", self.in_channels, x.channels()),
            ));
        }
        if x.height() + 2 * self.padding < self.kernel || x.width() + 2 * self.padding < self.kernel {
            return Err(Error::dim(
                "conv2d",
                format!("input {}x{} smaller than kernel {}", x.height(), x.width(), self.kernel),
            ));
        }
        Ok(())
    }

    fn chunk_samples(&self, ohw: usize) -> usize {
        let k = self.in_channels * self.kernel * self.kernel;
        (COL_BUDGET / (k * ohw).max(1)).max(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let ohw = oh * ow;
        let cout = self.out_channels;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let chunk = self.chunk_samples(ohw);
        let mut col = Vec::new();
        let mut tmp = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let cols = (end - start) * ohw;
            self.im2col(x, start, end, &mut col);
            tmp.clear();
            tmp.resize(cout * cols, 0.0);
            sgemm(cout, kdim, cols, &self.weight.value, (kdim, 1), &col, (cols, 1), 0.0, &mut tmp, (cols, 1));
            let od = out.data_mut();
            for s in 0..end - start {
                for co in 0..cout {
                    let b = self.bias.as_ref().map_or(0.0, |b| b.value[co]);
                    let src = &tmp[co * cols + s * ohw..co * cols + (s + 1) * ohw];
                    let dst = &mut od[((start + s) * cout + co) * ohw..((start + s) * cout + co + 1) * ohw];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + b;
                    }
                }
            }
            start = end;
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for `dy` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let [n, cin, h, w] = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let ohw = oh * ow;
        let cout = self.out_channels;
        debug_assert_eq!(dy.shape(), [n, cout, oh, ow]);
        let kdim = cin * self.kernel * self.kernel;
        let mut dx = need_dx.then(|| Tensor::zeros([n, cin, h, w]));
        let chunk = self.chunk_samples(ohw);
        let mut col = Vec::new();
        let mut dyc = Vec::new();
        let mut dcol = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let cols = (end - start) * ohw;
            dyc.clear();
            dyc.resize(cout * cols, 0.0);
            for s in 0..end - start {
                let sample = dy.sample(start + s);
                for co in 0..cout {
                    dyc[co * cols + s * ohw..co * cols + (s + 1) * ohw]
                        .copy_from_slice(&sample[co * ohw..(co + 1) * ohw]);
                }
            }
            if let Some(b) = self.bias.as_mut() {
                for co in 0..cout {
                    b.grad[co] += dyc[co * cols..(co + 1) * cols].iter().sum::<f32>();
                }
            }
            self.im2col(x, start, end, &mut col);
            // dW += dY · colᵀ
            sgemm(cout, cols, kdim, &dyc, (cols, 1), &col, (1, cols), 1.0, &mut self.weight.grad, (kdim, 1));
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(kdim * cols, 0.0);
                // dcol = Wᵀ · dY
                sgemm(kdim, cout, cols, &self.weight.value, (1, kdim), &dyc, (cols, 1), 0.0, &mut dcol, (cols, 1));
                self.col2im(&dcol, start, end, dx);
            }
            start = end;
        }
        dx
    }

    fn im2col(&self, x: &Tensor, start: usize, end: usize, col: &mut Vec<f32>) {
        let [_, cin, h, w] = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let (k, stride, pad) = (self.kernel, self.stride, self.padding);
        let ohw = oh * ow;
        let cols = (end - start) * ohw;
        col.clear();
        col.resize(cin * k * k * cols, 0.0);
        for s in 0..end - start {
            let sample = x.sample(start + s);
            for ci in 0..cin {
                let plane = &sample[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let base = row * cols + s * ohw;
                        let (x0, x1) = valid_range(kx, pad, stride, w, ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || x0 >= x1 {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut col[base + oy * ow..base + (oy + 1) * ow];
                            if stride == 1 {
                                let ix0 = x0 + kx - pad;
                                dst[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    dst[ox] = src_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dcol: &[f32], start: usize, end: usize, dx: &mut Tensor) {
        let [_, cin, h, w] = dx.shape();
        let (oh, ow) = self.output_size(h, w);
        let (k, stride, pad) = (self.kernel, self.stride, self.padding);
        let ohw = oh * ow;
        let cols = (end - start) * ohw;
        for s in 0..end - start {
            let sample = dx.sample_mut(start + s);
            for ci in 0..cin {
                let plane = &mut sample[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let base = row * cols + s * ohw;
                        let (x0, x1) = valid_range(kx, pad, stride, w, ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || x0 >= x1 {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            let src = &dcol[base + oy * ow..base + (oy + 1) * ow];
                            for ox in x0..x1 {
                                dst_row[ox * stride + kx - pad] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[x0, x1)` whose input column `ox*stride + kx - pad` is
/// inside `[0, w)`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let x0 = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox*stride + kx - pad <= w - 1
    let lim = w as isize - 1 + pad as isize - kx as isize;
    let x1 = if lim < 0 {
        0
    } else {
        ((lim as usize) / stride + 1).min(ow)
    };
    (x0.min(x1), x1)
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
