//! Minimal layer library with hand-written backward passes.
//!
//! Every layer's `forward` is a pure function of `&self` and its input, so
//! many forwards may share one set of weights. `backward` takes `&mut self`
//! and accumulates into the parameter gradients.

mod conv;
mod gemm;
mod linear;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{group_normalize, GroupNorm, GroupNormCache};
pub use pool::{avg_pool_global, avg_pool_global_backward, MaxPool, MaxPoolCache};

pub(crate) use gemm::sgemm;

#[cfg(test)]
pub(crate) use conv::tests as conv_tests;

use rand::Rng;

use crate::tensor::Tensor;

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Param::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut p = Param::zeros(shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named traversal over the parameters of a layer tree.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient of `relu` given its output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &out) in dx.data_mut().iter_mut().zip(y.data()) {
        if out <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}
