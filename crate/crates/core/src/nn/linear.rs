use rand::Rng;

use super::{join, sgemm, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer on `[N, in, 1, 1]` inputs; weight is `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::fan_in_uniform(&[out_features, in_features], in_features, rng),
            bias: Param::fan_in_uniform(&[out_features], in_features, rng),
            in_features,
            out_features,
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Param::zeros(&[out_features, in_features]),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.sample_len() != self.in_features {
            return Err(Error::dim(
                "linear",
                format!("expected {} features, got {}", self.in_features, x.sample_len()),
            ));
        }
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        let mut out = Vec::with_capacity(n * fo);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        // out[n, fo] += x[n, fi] · Wᵀ
        sgemm(n, fi, fo, x.data(), (fi, 1), &self.weight.value, (1, fi), 1.0, &mut out, (fo, 1));
        Tensor::from_vec([n, fo, 1, 1], out)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        for row in dy.data().chunks_exact(fo) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW[fo, fi] += dyᵀ · x
        sgemm(fo, n, fi, dy.data(), (1, fo), x.data(), (fi, 1), 1.0, &mut self.weight.grad, (fi, 1));
        let mut dx = vec![0.0; n * fi];
        sgemm(n, fo, fi, dy.data(), (fo, 1), &self.weight.value, (fi, 1), 0.0, &mut dx, (fi, 1));
        Tensor::from_vec([n, fi, 1, 1], dx).expect("linear input shape")
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
