//! High-frequency pre-processing: the fixed eight-direction differential
//! filter bank (EDDF), the two trainable convolutions that consume its
//! residuals, and the augmented-image recomposition.

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::{RawImage, Tensor};

/// Neighbor offsets `(dy, dx)` in kernel order E, NE, N, NW, W, SW, S, SE.
pub const DIRECTIONS: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub const EDDF_KERNELS: usize = 8;

/// The eight fixed 3×3 first-difference kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    pub kernels: [[[f32; 3]; 3]; EDDF_KERNELS],
}

pub fn eddf_kernels() -> KernelBank {
    let mut kernels = [[[0.0f32; 3]; 3]; EDDF_KERNELS];
    for (k, &(dy, dx)) in DIRECTIONS.iter().enumerate() {
        kernels[k][1][1] = -1.0;
        kernels[k][(1 + dy) as usize][(1 + dx) as usize] = 1.0;
    }
    KernelBank { kernels }
}

/// `M_diff`: 24 residual maps, kernel `k` on input channel `c` at `8·c + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack(pub Tensor);

/// `M_hf`: output of `Conv_hf`.
#[derive(Clone, Debug, PartialEq)]
pub struct HfFeature(pub Tensor);

/// `I_aug`: learned 3-channel augmentation components.
#[derive(Clone, Debug, PartialEq)]
pub struct AugComponent(pub Tensor);

/// Applies the filter bank to a batch of 3-channel images with replicate
/// padding, so constant regions map to exactly zero.
pub fn eddf_batch(images: &Tensor) -> Result<ResidualStack> {
    let [n, c, h, w] = images.shape();
    if c != 3 {
        return Err(Error::dim("apply_eddf", format!("expected 3 channels, got {c}")));
    }
    let mut out = Tensor::zeros([n, c * EDDF_KERNELS, h, w]);
    let hw = h * w;
    for b in 0..n {
        let src = images.sample(b);
        let dst = out.sample_mut(b);
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            for (k, &(dy, dx)) in DIRECTIONS.iter().enumerate() {
                let o = &mut dst[(EDDF_KERNELS * ch + k) * hw..(EDDF_KERNELS * ch + k + 1) * hw];
                for y in 0..h {
                    let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for x in 0..w {
                        let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        o[y * w + x] = plane[ny * w + nx] - plane[y * w + x];
                    }
                }
            }
        }
    }
    Ok(ResidualStack(out))
}

pub fn apply_eddf(image: &RawImage) -> Result<ResidualStack> {
    eddf_batch(&image.to_tensor())
}

fn check_residuals(op: &'static str, r: &ResidualStack, conv: &Conv2d) -> Result<()> {
    if r.0.channels() != conv.in_channels {
        return Err(Error::dim(
            op,
            format!("expected {} residual channels, got {}", conv.in_channels, r.0.channels()),
        ));
    }
    Ok(())
}

/// `Conv_hf`: 5×5, size-preserving.
pub fn conv_hf(conv: &Conv2d, residuals: &ResidualStack) -> Result<HfFeature> {
    check_residuals("conv_hf", residuals, conv)?;
    Ok(HfFeature(conv.forward(&residuals.0)?))
}

/// `Conv_aug`: 3×3 to three channels, size-preserving.
pub fn conv_aug(conv: &Conv2d, residuals: &ResidualStack) -> Result<AugComponent> {
    check_residuals("conv_aug", residuals, conv)?;
    Ok(AugComponent(conv.forward(&residuals.0)?))
}

pub fn new_conv_hf(out_channels: usize, rng: &mut impl rand::Rng) -> Conv2d {
    Conv2d::new(3 * EDDF_KERNELS, out_channels, 5, 1, 2, true, rng)
}

pub fn new_conv_aug(rng: &mut impl rand::Rng) -> Conv2d {
    Conv2d::new(3 * EDDF_KERNELS, 3, 3, 1, 1, true, rng)
}

/// Adds the augmentation components to the images and clamps to `[0, 1]`.
pub fn recompose_batch(images: &Tensor, aug: &AugComponent) -> Result<Tensor> {
    images.same_shape(&aug.0, "recompose")?;
    let mut out = images.clone();
    for (o, a) in out.data_mut().iter_mut().zip(aug.0.data()) {
        *o = (*o + a).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn recompose(image: &RawImage, aug: &AugComponent) -> Result<RawImage> {
    let t = recompose_batch(&image.to_tensor(), aug)?;
    Ok(RawImage::from_tensor(&t, 0))
}

/// Gradient of `recompose` with respect to the augmentation components:
/// passes through where the sum was not clamped.
pub fn recompose_backward(images: &Tensor, aug: &AugComponent, dy: &Tensor) -> Tensor {
    let mut d = dy.clone();
    for ((g, &x), &a) in d.data_mut().iter_mut().zip(images.data()).zip(aug.0.data()) {
        let s = x + a;
        if !(0.0..=1.0).contains(&s) {
            *g = 0.0;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawImage::from_fn(h, w, |_, _, _| rng.gen())
    }

    /// Brute-force correlation with an explicit 3×3 window and replicate
    /// border handling.
    fn correlate(image: &RawImage, c: usize, kernel: &[[f32; 3]; 3]) -> Vec<f32> {
        let (h, w) = (image.height() as isize, image.width() as isize);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        let iy = (y + ky as isize - 1).clamp(0, h - 1) as usize;
                        let ix = (x + kx as isize - 1).clamp(0, w - 1) as usize;
                        acc += kv * image.get(c, iy, ix);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn kernel_bank_shape_and_structure() {
        let bank = eddf_kernels();
        let mut plus_positions = Vec::new();
        for k in &bank.kernels {
            let flat: Vec<f32> = k.iter().flatten().copied().collect();
            assert_eq!(flat.iter().sum::<f32>(), 0.0);
            assert_eq!(k[1][1], -1.0);
            assert_eq!(flat.iter().filter(|&&v| v == 1.0).count(), 1);
            assert!(flat.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0));
            plus_positions.push(flat.iter().position(|&v| v == 1.0).unwrap());
        }
        plus_positions.sort();
        plus_positions.dedup();
        assert_eq!(plus_positions.len(), 8);
    }

    #[test]
    fn constant_image_gives_zero_residuals() {
        let img = RawImage::filled(3, 9, 7, 0.37);
        let r = apply_eddf(&img).unwrap();
        assert_eq!(r.0.shape(), [1, 24, 9, 7]);
        assert!(r.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn east_kernel_on_column_ramp_is_one() {
        let img = RawImage::from_fn(5, 6, |_, _, x| x as f32);
        let r = apply_eddf(&img).unwrap();
        for c in 0..3 {
            assert_eq!(r.0.at(0, 8 * c, 2, 3), 1.0);
        }
    }

    #[test]
    fn full_size_shape() {
        let img = RawImage::filled(3, 224, 224, 0.5);
        assert_eq!(apply_eddf(&img).unwrap().0.shape(), [1, 24, 224, 224]);
    }

    #[test]
    fn single_white_pixel_matches_direct_correlation() {
        let mut img = RawImage::filled(3, 7, 7, 0.0);
        img.set(1, 3, 3, 1.0);
        let r = apply_eddf(&img).unwrap();
        let bank = eddf_kernels();
        for c in 0..3 {
            for k in 0..8 {
                let want = correlate(&img, c, &bank.kernels[k]);
                let got = &r.0.sample(0)[(8 * c + k) * 49..(8 * c + k + 1) * 49];
                assert_eq!(got, &want[..]);
            }
        }
        // the pixel itself reads -1 in every direction of channel 1
        for k in 0..8 {
            assert_eq!(r.0.at(0, 8 + k, 3, 3), -1.0);
            let (dy, dx) = DIRECTIONS[k];
            // its mirrored neighbor sees +1
            assert_eq!(r.0.at(0, 8 + k, (3 - dy) as usize, (3 - dx) as usize), 1.0);
        }
    }

    #[test]
    fn random_image_matches_direct_correlation() {
        let img = random_image(6, 5, 11);
        let r = apply_eddf(&img).unwrap();
        let bank = eddf_kernels();
        for c in 0..3 {
            for k in 0..8 {
                let want = correlate(&img, c, &bank.kernels[k]);
                let got = &r.0.sample(0)[(8 * c + k) * 30..(8 * c + k + 1) * 30];
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn non_rgb_input_is_rejected() {
        let img = RawImage::filled(1, 4, 4, 0.0);
        assert!(matches!(apply_eddf(&img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn interior_responses_are_translation_covariant() {
        let img = random_image(10, 10, 4);
        let shifted = RawImage::from_fn(10, 10, |c, y, x| img.get(c, y.saturating_sub(1), x.saturating_sub(2)));
        let a = apply_eddf(&img).unwrap().0;
        let b = apply_eddf(&shifted).unwrap().0;
        for ch in 0..24 {
            for y in 1..8 {
                for x in 1..7 {
                    assert_eq!(b.at(0, ch, y + 1, x + 2), a.at(0, ch, y, x));
                }
            }
        }
    }

    #[test]
    fn conv_hf_and_conv_aug_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(16, 16, 2);
        let r = apply_eddf(&img).unwrap();
        let hf = new_conv_hf(64, &mut rng);
        assert_eq!(conv_hf(&hf, &r).unwrap().0.shape(), [1, 64, 16, 16]);
        let aug = new_conv_aug(&mut rng);
        assert_eq!(conv_aug(&aug, &r).unwrap().0.shape(), [1, 3, 16, 16]);
        let zero_hf = Conv2d::zeros(24, 64, 5, 1, 2, true);
        assert!(conv_hf(&zero_hf, &r).unwrap().0.data().iter().all(|&v| v == 0.0));
        let zero_aug = Conv2d::zeros(24, 3, 3, 1, 1, true);
        assert!(conv_aug(&zero_aug, &r).unwrap().0.data().iter().all(|&v| v == 0.0));
        // wrong channel count
        let bad = ResidualStack(Tensor::zeros([1, 3, 16, 16]));
        assert!(conv_hf(&hf, &bad).is_err());
        assert!(conv_aug(&aug, &bad).is_err());
    }

    #[test]
    fn conv_hf_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(8, 8, 6);
        let r = apply_eddf(&img).unwrap();
        let hf = new_conv_hf(4, &mut rng);
        let got = conv_hf(&hf, &r).unwrap().0;
        let want = crate::nn::conv_tests::naive_conv(&hf, &r.0);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut aug = Conv2d::zeros(24, 3, 3, 1, 1, true);
        aug.weight = Param::fan_in_uniform(&[3, 24, 3, 3], 216, &mut rng);
        let got = conv_aug(&aug, &r).unwrap().0;
        let want = crate::nn::conv_tests::naive_conv(&aug, &r.0);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn recompose_identity_clamp_and_sum() {
        let img = random_image(4, 4, 3);
        let zero = AugComponent(Tensor::zeros([1, 3, 4, 4]));
        assert_eq!(recompose(&img, &zero).unwrap(), img);

        let one = RawImage::filled(3, 2, 2, 1.0);
        let half = AugComponent(Tensor::from_vec([1, 3, 2, 2], vec![0.5; 12]).unwrap());
        assert!(recompose(&one, &half).unwrap().data().iter().all(|&v| v == 1.0));

        let small = AugComponent(Tensor::from_vec([1, 3, 4, 4], vec![0.01; 48]).unwrap());
        let out = recompose(&img, &small).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            if *i + 0.01 <= 1.0 {
                assert_eq!(*o, i + 0.01);
            }
        }
        let wrong = AugComponent(Tensor::zeros([1, 3, 5, 4]));
        assert!(recompose(&img, &wrong).is_err());
    }

    proptest! {
        #[test]
        fn eddf_is_linear(a in -2.0f32..2.0, b in -2.0f32..2.0, s1 in 0u64..1000, s2 in 0u64..1000) {
            let i = random_image(6, 6, s1);
            let j = random_image(6, 6, s2);
            let mix = RawImage::new(3, 6, 6, i.data().iter().zip(j.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let ri = apply_eddf(&i).unwrap().0;
            let rj = apply_eddf(&j).unwrap().0;
            let rm = apply_eddf(&mix).unwrap().0;
            for ((m, x), y) in rm.data().iter().zip(ri.data()).zip(rj.data()) {
                prop_assert!((m - (a * x + b * y)).abs() < 1e-5);
            }
        }
    }
}
