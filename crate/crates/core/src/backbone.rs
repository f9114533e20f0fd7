//! Residual trunk: 7×7/2 stem convolution, 3×3/2 max-pool, then three
//! stages of two basic residual blocks each, with group normalization
//! throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Conv2d, GroupNorm, GroupNormCache, MaxPool, MaxPoolCache, Module, Param};
use crate::tensor::Tensor;

pub const FULL_STEM_CHANNELS: usize = 64;
pub const FULL_STAGE_CHANNELS: [usize; 3] = [128, 256, 512];
pub const FULL_GN_GROUPS: usize = 32;
/// Total spatial reduction from input to trunk output.
pub const TRUNK_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrunkConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub gn_groups: usize,
}

impl TrunkConfig {
    pub fn full(in_channels: usize) -> Self {
        TrunkConfig {
            in_channels,
            stem_channels: FULL_STEM_CHANNELS,
            stage_channels: FULL_STAGE_CHANNELS,
            gn_groups: FULL_GN_GROUPS,
        }
    }

    /// Same topology with every width divided by `width_div`.
    pub fn scaled(in_channels: usize, width_div: usize, gn_groups: usize) -> Self {
        TrunkConfig {
            in_channels,
            stem_channels: FULL_STEM_CHANNELS / width_div,
            stage_channels: FULL_STAGE_CHANNELS.map(|c| c / width_div),
            gn_groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.stem_channels, self.stage_channels[0], self.stage_channels[1], self.stage_channels[2]];
        if self.in_channels == 0 || widths.contains(&0) {
            return Err(Error::Config(format!("trunk widths must be positive: {self:?}")));
        }
        if let Some(c) = widths.iter().find(|&&c| self.gn_groups == 0 || c % self.gn_groups != 0) {
            return Err(Error::Config(format!(
                "gn_groups {} does not divide channel count {c}",
                self.gn_groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Projection {
    conv: Conv2d,
    gn: GroupNorm,
}

/// Two 3×3 convolutions with a skip connection; projection shortcut when
/// the stride or width changes.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    proj: Option<Projection>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    x: Tensor,
    gn1: GroupNormCache,
    r1: Tensor,
    gn2: GroupNormCache,
    proj_gn: Option<GroupNormCache>,
    out: Tensor,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        let proj = if stride != 1 || cin != cout {
            Some(Projection {
                conv: Conv2d::new(cin, cout, 1, stride, 0, false, rng),
                gn: GroupNorm::new(groups, cout)?,
            })
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            gn1: GroupNorm::new(groups, cout)?,
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            gn2: GroupNorm::new(groups, cout)?,
            proj,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (g1, gn1) = self.gn1.forward(&self.conv1.forward(x)?)?;
        let r1 = relu(&g1);
        let (mut sum, gn2) = self.gn2.forward(&self.conv2.forward(&r1)?)?;
        let proj_gn = match &self.proj {
            Some(p) => {
                let (s, c) = p.gn.forward(&p.conv.forward(x)?)?;
                sum.add_assign(&s)?;
                Some(c)
            }
            None => {
                sum.add_assign(x)?;
                None
            }
        };
        let out = relu(&sum);
        Ok((
            out.clone(),
            BlockCache {
                x: x.clone(),
                gn1,
                r1,
                gn2,
                proj_gn,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dsum = relu_backward(&cache.out, dy);
        let d2 = self.gn2.backward(&cache.gn2, &dsum);
        let dr1 = self.conv2.backward(&cache.r1, &d2, true).expect("dx requested");
        let dg1 = relu_backward(&cache.r1, &dr1);
        let d1 = self.gn1.backward(&cache.gn1, &dg1);
        let dx_main = self.conv1.backward(&cache.x, &d1, need_dx);
        let dx_skip = match (&mut self.proj, &cache.proj_gn) {
            (Some(p), Some(gc)) => {
                let dp = p.gn.backward(gc, &dsum);
                p.conv.backward(&cache.x, &dp, need_dx)
            }
            _ => need_dx.then(|| dsum.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b).expect("matching block gradients");
                Some(a)
            }
            _ => None,
        }
    }
}

impl Module for BasicBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.gn1.visit(&join(prefix, "gn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.gn2.visit(&join(prefix, "gn2"), f);
        if let Some(p) = &self.proj {
            p.conv.visit(&join(prefix, "proj.conv"), f);
            p.gn.visit(&join(prefix, "proj.gn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.gn1.visit_mut(&join(prefix, "gn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.gn2.visit_mut(&join(prefix, "gn2"), f);
        if let Some(p) = &mut self.proj {
            p.conv.visit_mut(&join(prefix, "proj.conv"), f);
            p.gn.visit_mut(&join(prefix, "proj.gn"), f);
        }
    }
}

/// One residual trunk instance (`M_cam`, `M_mix` or `M_aug` producer).
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    stem: Conv2d,
    stem_gn: GroupNorm,
    pool: MaxPool,
    /// Two blocks per stage, stages in order.
    blocks: Vec<BasicBlock>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    input: Tensor,
    stem_gn: GroupNormCache,
    stem_act: Tensor,
    pool: MaxPoolCache,
    pooled: Tensor,
    blocks: Vec<BlockCache>,
}

impl TrunkCache {
    /// `(channels, height, width)` after the stem, the pool, and each stage.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let dims = |t: &Tensor| (t.channels(), t.height(), t.width());
        let mut v = vec![dims(&self.stem_act), dims(&self.pooled)];
        v.extend(self.blocks.iter().skip(1).step_by(2).map(|b| dims(&b.out)));
        v
    }

    pub fn output_shape(&self) -> [usize; 4] {
        self.blocks.last().map_or(self.pooled.shape(), |b| b.out.shape())
    }
}

impl Trunk {
    pub fn new(config: TrunkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let g = config.gn_groups;
        let mut blocks = Vec::with_capacity(6);
        let mut cin = config.stem_channels;
        for (stage, &cout) in config.stage_channels.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(cin, cout, stride, g, rng)?);
            blocks.push(BasicBlock::new(cout, cout, 1, g, rng)?);
            cin = cout;
        }
        Ok(Trunk {
            stem: Conv2d::new(config.in_channels, config.stem_channels, 7, 2, 3, false, rng),
            stem_gn: GroupNorm::new(g, config.stem_channels)?,
            pool: MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, TrunkCache)> {
        if x.channels() != self.config.in_channels {
            return Err(Error::dim(
                "trunk_forward",
                format!("expected {} channels, got {}", self.config.in_channels, x.channels()),
            ));
        }
        if x.height() % TRUNK_STRIDE != 0 || x.width() % TRUNK_STRIDE != 0 || x.height() == 0 || x.width() == 0 {
            return Err(Error::dim(
                "trunk_forward",
                format!("spatial size {}x{} is not divisible by {TRUNK_STRIDE}", x.height(), x.width()),
            ));
        }
        let (g, stem_gn) = self.stem_gn.forward(&self.stem.forward(x)?)?;
        let stem_act = relu(&g);
        let (pooled, pool) = self.pool.forward(&stem_act)?;
        let mut h = pooled.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o, c) = b.forward(&h)?;
            blocks.push(c);
            h = o;
        }
        Ok((
            h,
            TrunkCache {
                input: x.clone(),
                stem_gn,
                stem_act,
                pool,
                pooled,
                blocks,
            },
        ))
    }

    /// Accumulates gradients for `dy` (the gradient of the trunk output).
    pub fn backward(&mut self, cache: &TrunkCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d, true).expect("dx requested");
        }
        let d = self.pool.backward(&cache.pool, &d);
        let d = relu_backward(&cache.stem_act, &d);
        let d = self.stem_gn.backward(&cache.stem_gn, &d);
        self.stem.backward(&cache.input, &d, need_dx)
    }
}

impl Module for Trunk {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_gn.visit(&join(prefix, "stem.gn"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage{}.{}", i / 2 + 1, i % 2)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_gn.visit_mut(&join(prefix, "stem.gn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage{}.{}", i / 2 + 1, i % 2)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_trunk(cin: usize, seed: u64) -> Trunk {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Trunk::new(TrunkConfig::scaled(cin, 16, 2), &mut rng).unwrap()
    }

    #[test]
    fn desk_profile_shapes() {
        let trunk = Trunk::new(TrunkConfig::full(64), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (out, cache) = trunk.forward(&random([1, 64, 64, 64], 1)).unwrap();
        assert_eq!(out.shape(), [1, 512, 4, 4]);
        assert_eq!(
            cache.stage_shapes(),
            vec![(64, 32, 32), (64, 16, 16), (128, 16, 16), (256, 8, 8), (512, 4, 4)]
        );
    }

    #[test]
    fn three_channel_stem_for_the_augmentation_branch() {
        let trunk = small_trunk(3, 2);
        let (out, _) = trunk.forward(&random([2, 3, 32, 32], 3)).unwrap();
        assert_eq!(out.shape(), [2, 32, 2, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let trunk = small_trunk(3, 2);
        assert!(trunk.forward(&random([1, 3, 40, 40], 1)).is_err());
        assert!(trunk.forward(&random([1, 4, 32, 32], 1)).is_err());
        assert!(Trunk::new(TrunkConfig::scaled(3, 16, 3), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_is_per_sample_and_deterministic() {
        let trunk = small_trunk(4, 5);
        let x = random([3, 4, 32, 32], 6);
        let (y, _) = trunk.forward(&x).unwrap();
        let (y2, _) = trunk.forward(&x).unwrap();
        assert_eq!(y, y2);
        // permuting samples permutes outputs
        let perm = Tensor::stack(&[x.select(2), x.select(0), x.select(1)]).unwrap();
        let (yp, _) = trunk.forward(&perm).unwrap();
        assert_eq!(yp.sample(0), y.sample(2));
        assert_eq!(yp.sample(1), y.sample(0));
        assert_eq!(yp.sample(2), y.sample(1));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // ReLU and max-pool kinks make a few central differences unreliable,
        // so the check asks for broad agreement rather than every entry.
        let mut trunk = small_trunk(2, 8);
        let x = random([2, 2, 16, 16], 9);
        let (y, cache) = trunk.forward(&x).unwrap();
        let proj = random(y.shape(), 10);
        let obj = |t: &Trunk, x: &Tensor| -> f64 {
            let (y, _) = t.forward(x).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        trunk.zero_grad();
        let dx = trunk.backward(&cache, &proj, true).unwrap();
        let eps = 1e-3f32;
        let close = |fd: f64, an: f64| (fd - an).abs() < 3e-2 * (1.0 + an.abs());
        let (mut agree, mut total) = (0, 0);
        for i in (0..x.data().len()).step_by(37) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (obj(&trunk, &xp) - obj(&trunk, &xm)) / (2.0 * eps as f64);
            agree += close(fd, dx.data()[i] as f64) as usize;
            total += 1;
        }
        // a stem weight touches every position, so it needs a smaller step
        let weight_eps = 1e-4f32;
        let grads: Vec<f32> = trunk.stem.weight.grad.clone();
        for i in (0..grads.len()).step_by(7) {
            let mut tp = trunk.clone();
            tp.stem.weight.value[i] += weight_eps;
            let mut tm = trunk.clone();
            tm.stem.weight.value[i] -= weight_eps;
            let fd = (obj(&tp, &x) - obj(&tm, &x)) / (2.0 * weight_eps as f64);
            agree += close(fd, grads[i] as f64) as usize;
            total += 1;
        }
        assert!(agree * 10 >= total * 9, "{agree} of {total} gradients agree");
    }

    #[test]
    fn parameter_names_are_unique() {
        let trunk = small_trunk(3, 1);
        let mut names = Vec::new();
        trunk.visit("trunk_aug", &mut |n, _| names.push(n.to_string()));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(total, names.len());
        assert!(names.contains(&"trunk_aug.stage2.0.proj.conv.weight".to_string()));
    }
}
