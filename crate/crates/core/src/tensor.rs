//! Dense `f32` arrays in batch × channel × height × width layout.

use crate::error::{Error, Result};

/// A batch of feature maps stored contiguously in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values in one sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("Tensor::stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.sample_len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::dim(
                    "Tensor::stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copies sample `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "Tensor::sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "Tensor::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data)
    }
}

/// An image with `channels` planes of `height × width` values in `[0, 1]`.
///
/// Pixels are stored planar (channel-major) so an image is directly a
/// batch-of-one [`Tensor`].
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RawImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "RawImage::new",
                format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(RawImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        RawImage {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds an RGB image by evaluating `f(channel, y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        RawImage {
            channels: 3,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: [1, self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    /// Reads sample `n` of a tensor back as an image.
    pub fn from_tensor(t: &Tensor, n: usize) -> RawImage {
        RawImage {
            channels: t.channels(),
            height: t.height(),
            width: t.width(),
            data: t.sample(n).to_vec(),
        }
    }

    pub fn batch(images: &[RawImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::dim("RawImage::batch", "empty image list"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.channels, im.height, im.width) != (first.channels, first.height, first.width) {
                return Err(Error::dim(
                    "RawImage::batch",
                    format!(
                        "{}x{}x{} vs {}x{}x{}",
                        im.channels, im.height, im.width, first.channels, first.height, first.width
                    ),
                ));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::from_vec(
            [images.len(), first.channels, first.height, first.width],
            data,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_select_round_trip() {
        let a = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([1, 2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 2]);
        assert_eq!(s.select(1), b);
        assert_eq!(s.at(0, 1, 0, 1), 4.0);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let a = Tensor::zeros([1, 1, 2, 2]);
        let b = Tensor::zeros([1, 2, 2, 2]);
        assert!(a.sub(&b).is_err());
        assert!(RawImage::new(3, 2, 2, vec![0.0; 11]).is_err());
    }
}
