use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling with `-inf` padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_shape: [usize; 4],
    argmax: Vec<u32>,
}

impl MaxPool {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
        let [n, c, h, w] = x.shape();
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::dim("max_pool", format!("input {h}x{w} too small")));
        }
        let (oh, ow) = self.output_size(h, w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let od = out.data_mut();
        let mut o = 0;
        for plane in x.data().chunks_exact(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut idx = 0u32;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                idx = i as u32;
                            }
                        }
                    }
                    od[o] = best;
                    argmax.push(idx);
                    o += 1;
                }
            }
        }
        Ok((
            out,
            MaxPoolCache {
                input_shape: x.shape(),
                argmax,
            },
        ))
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Tensor) -> Tensor {
        let [_, _, h, w] = cache.input_shape;
        let mut dx = Tensor::zeros(cache.input_shape);
        let ohw = dy.height() * dy.width();
        let dxd = dx.data_mut();
        for (p, (grads, idx)) in dy.data().chunks_exact(ohw).zip(cache.argmax.chunks_exact(ohw)).enumerate() {
            let plane = &mut dxd[p * h * w..(p + 1) * h * w];
            for (g, &i) in grads.iter().zip(idx) {
                plane[i as usize] += g;
            }
        }
        dx
    }
}

/// Spatial mean per channel: `[N, C, H, W] → [N, C, 1, 1]`.
pub fn avg_pool_global(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f32;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().sum::<f32>() / hw)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape")
}

pub fn avg_pool_global_backward(dy: &Tensor, input_shape: [usize; 4]) -> Tensor {
    let [_, _, h, w] = input_shape;
    let hw = h * w;
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(dy.data()) {
        plane.fill(g / hw as f32);
    }
    dx
}
