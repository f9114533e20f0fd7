//! The two-branch network.
//!
//! The invariant branch runs one high-frequency feature through two trunks
//! of identical shape (`trunk_cam`, `trunk_mix`); their difference is the
//! camera-free spoofing map. One 3×3 camera classifier is applied to all
//! three maps. The augmentation branch classifies the image plus a learned
//! residual component. Every binary head is FC → ReLU → FC(2), index 0 live.

use rand::Rng;

use crate::backbone::{Trunk, TrunkCache, TrunkConfig, FULL_GN_GROUPS, FULL_STAGE_CHANNELS, TRUNK_STRIDE};
use crate::error::{Error, Result};
use crate::filters::{
    conv_aug, conv_hf, eddf_batch, new_conv_aug, new_conv_hf, recompose_backward, recompose_batch, AugComponent,
    ResidualStack,
};
use crate::nn::{avg_pool_global, avg_pool_global_backward, join, relu, relu_backward, Conv2d, Linear, Module, Param};
use crate::tensor::{RawImage, Tensor};

pub const FULL_HF_CHANNELS: usize = 64;
pub const FULL_HEAD_HIDDEN: usize = 128;

/// Components removed for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Invariant branch sees the raw image instead of the high-frequency map.
    pub no_eddf_branch1: bool,
    /// Augmentation branch sees the raw image.
    pub no_eddf_branch2: bool,
    /// No camera trunk, classifier or decomposition; the invariant score is
    /// the `F_mix` head.
    pub no_cam_id: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub n_cameras: usize,
    pub hf_channels: usize,
    pub width_div: usize,
    pub gn_groups: usize,
    pub head_hidden: usize,
    pub ablation: Ablation,
}

impl ArchConfig {
    pub fn full(n_cameras: usize) -> Self {
        ArchConfig {
            n_cameras,
            hf_channels: FULL_HF_CHANNELS,
            width_div: 1,
            gn_groups: FULL_GN_GROUPS,
            head_hidden: FULL_HEAD_HIDDEN,
            ablation: Ablation::default(),
        }
    }

    /// Every convolutional width divided by `width_div`; the heads keep
    /// their full hidden width.
    pub fn scaled(n_cameras: usize, width_div: usize, gn_groups: usize) -> Self {
        let d = width_div.max(1);
        ArchConfig {
            n_cameras,
            hf_channels: FULL_HF_CHANNELS / d,
            width_div: d,
            gn_groups,
            head_hidden: FULL_HEAD_HIDDEN,
            ablation: Ablation::default(),
        }
    }

    pub fn feature_channels(&self) -> usize {
        FULL_STAGE_CHANNELS[2] / self.width_div
    }

    fn trunk(&self, in_channels: usize) -> TrunkConfig {
        TrunkConfig::scaled(in_channels, self.width_div, self.gn_groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cameras < 2 {
            return Err(Error::Config(format!("need at least 2 cameras, got {}", self.n_cameras)));
        }
        if self.width_div == 0 || FULL_HF_CHANNELS % self.width_div != 0 || self.hf_channels == 0 || self.head_hidden == 0 {
            return Err(Error::Config(format!("width_div {} does not divide the layer widths", self.width_div)));
        }
        self.trunk(3).validate()
    }
}

/// FC → ReLU → FC(2).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    input: Tensor,
    hidden: Tensor,
}

impl BinaryHead {
    pub fn new(features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BinaryHead {
            fc1: Linear::new(features, hidden, rng),
            fc2: Linear::new(hidden, 2, rng),
        }
    }

    pub fn zeros(features: usize, hidden: usize) -> Self {
        BinaryHead {
            fc1: Linear::zeros(features, hidden),
            fc2: Linear::zeros(hidden, 2),
        }
    }

    /// Logits `[N, 2, 1, 1]`.
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, HeadCache)> {
        let hidden = relu(&self.fc1.forward(features)?);
        let logits = self.fc2.forward(&hidden)?;
        Ok((
            logits,
            HeadCache {
                input: features.clone(),
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache, dlogits: &Tensor) -> Tensor {
        let dh = self.fc2.backward(&cache.hidden, dlogits);
        let dh = relu_backward(&cache.hidden, &dh);
        self.fc1.backward(&cache.input, &dh)
    }
}

impl Module for BinaryHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `(p_live, p_spoof)` from a pair of logits.
pub fn softmax_pair(live: f32, spoof: f32) -> (f64, f64) {
    let d = spoof as f64 - live as f64;
    let p_live = 1.0 / (1.0 + d.exp());
    (p_live, 1.0 - p_live)
}

/// Head on a single feature vector.
pub fn binary_head(features: &[f32], head: &BinaryHead) -> Result<(f64, f64)> {
    let x = Tensor::from_vec([1, features.len(), 1, 1], features.to_vec())?;
    let (logits, _) = head.forward(&x)?;
    Ok(softmax_pair(logits.data()[0], logits.data()[1]))
}

/// `M_spf = M_mix − M_cam`.
pub fn decompose(m_mix: &Tensor, m_cam: &Tensor) -> Result<Tensor> {
    m_mix.sub(m_cam)
}

pub fn camera_logits(m: &Tensor, conv_cam: &Conv2d) -> Result<Tensor> {
    if m.channels() != conv_cam.in_channels {
        return Err(Error::dim(
            "camera_logits",
            format!("expected {} channels, got {}", conv_cam.in_channels, m.channels()),
        ));
    }
    conv_cam.forward(m)
}

/// Spatial mean of the per-location softmax of sample `n` of a logit map.
pub fn image_camera_probs(o: &Tensor, n: usize) -> Vec<f64> {
    let [_, k, h, w] = o.shape();
    let hw = h * w;
    let s = o.sample(n);
    let mut acc = vec![0.0f64; k];
    let mut e = vec![0.0f64; k];
    for pos in 0..hw {
        let max = (0..k).map(|c| s[c * hw + pos] as f64).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            e[c] = (s[c * hw + pos] as f64 - max).exp();
            sum += e[c];
        }
        for c in 0..k {
            acc[c] += e[c] / sum;
        }
    }
    acc.iter().map(|v| v / hw as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraInvariantModel {
    pub config: ArchConfig,
    pub conv_hf: Option<Conv2d>,
    pub conv_aug: Option<Conv2d>,
    pub trunk_cam: Option<Trunk>,
    pub trunk_mix: Trunk,
    pub trunk_aug: Trunk,
    pub conv_cam: Option<Conv2d>,
    pub head_mix: BinaryHead,
    pub head_spf: Option<BinaryHead>,
    pub head_aug: BinaryHead,
}

/// Batched outputs of both branches. Camera-related fields are `None` when
/// the camera path is ablated.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub m_cam: Option<Tensor>,
    pub m_mix: Tensor,
    pub m_spf: Option<Tensor>,
    pub o_cam: Option<Tensor>,
    pub o_mix: Option<Tensor>,
    pub o_spf: Option<Tensor>,
    pub f_mix: Tensor,
    pub f_spf: Option<Tensor>,
    pub f_aug: Tensor,
    pub logits_mix: Tensor,
    pub logits_spf: Option<Tensor>,
    pub logits_aug: Tensor,
}

fn live_prob(logits: &Tensor, n: usize) -> f64 {
    let s = logits.sample(n);
    softmax_pair(s[0], s[1]).0
}

impl BranchOutputs {
    pub fn batch(&self) -> usize {
        self.m_mix.batch()
    }

    pub fn p_mix(&self, n: usize) -> f64 {
        live_prob(&self.logits_mix, n)
    }

    /// Invariant-branch score; the `F_mix` head when the camera path is
    /// ablated.
    pub fn p_spf(&self, n: usize) -> f64 {
        match &self.logits_spf {
            Some(l) => live_prob(l, n),
            None => self.p_mix(n),
        }
    }

    pub fn p_aug(&self, n: usize) -> f64 {
        live_prob(&self.logits_aug, n)
    }
}

#[derive(Clone, Debug)]
pub struct InvariantCache {
    residuals: Option<ResidualStack>,
    cam: Option<TrunkCache>,
    mix: TrunkCache,
    head_mix: HeadCache,
    head_spf: Option<HeadCache>,
}

#[derive(Clone, Debug)]
pub struct AugmentationCache {
    images: Tensor,
    residuals: Option<ResidualStack>,
    aug: Option<AugComponent>,
    trunk: TrunkCache,
    head: HeadCache,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    invariant: InvariantCache,
    augmentation: AugmentationCache,
}

/// Gradients of a scalar objective with respect to the network outputs.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub o_cam: Option<Tensor>,
    pub o_mix: Option<Tensor>,
    pub o_spf: Option<Tensor>,
    pub logits_mix: Option<Tensor>,
    pub logits_spf: Option<Tensor>,
    pub logits_aug: Option<Tensor>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

impl CameraInvariantModel {
    pub fn new(config: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ab = config.ablation;
        let feat = config.feature_channels();
        let (conv_hf, branch1_in) = if ab.no_eddf_branch1 {
            (None, 3)
        } else {
            (Some(new_conv_hf(config.hf_channels, rng)), config.hf_channels)
        };
        let conv_aug = (!ab.no_eddf_branch2).then(|| new_conv_aug(rng));
        let trunk_cam = if ab.no_cam_id { None } else { Some(Trunk::new(config.trunk(branch1_in), rng)?) };
        let trunk_mix = Trunk::new(config.trunk(branch1_in), rng)?;
        let trunk_aug = Trunk::new(config.trunk(3), rng)?;
        let conv_cam = (!ab.no_cam_id).then(|| Conv2d::new(feat, config.n_cameras, 3, 1, 1, true, rng));
        let head_mix = BinaryHead::new(feat, config.head_hidden, rng);
        let head_spf = (!ab.no_cam_id).then(|| BinaryHead::new(feat, config.head_hidden, rng));
        let head_aug = BinaryHead::new(feat, config.head_hidden, rng);
        Ok(CameraInvariantModel {
            config,
            conv_hf,
            conv_aug,
            trunk_cam,
            trunk_mix,
            trunk_aug,
            conv_cam,
            head_mix,
            head_spf,
            head_aug,
        })
    }

    pub fn n_cameras(&self) -> usize {
        self.config.n_cameras
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let [_, c, h, w] = images.shape();
        if c != 3 || h == 0 || w == 0 || h % TRUNK_STRIDE != 0 || w % TRUNK_STRIDE != 0 {
            return Err(Error::dim(
                "model input",
                format!("expected 3×H×W with H, W multiples of {TRUNK_STRIDE}, got {c}×{h}×{w}"),
            ));
        }
        Ok(())
    }

    fn forward_invariant_cached(&self, images: &Tensor) -> Result<(InvariantParts, InvariantCache)> {
        self.check_images(images)?;
        let (input, residuals) = match &self.conv_hf {
            Some(conv) => {
                let r = eddf_batch(images)?;
                (conv_hf(conv, &r)?.0, Some(r))
            }
            None => (images.clone(), None),
        };
        let (m_mix, mix) = self.trunk_mix.forward(&input)?;
        let f_mix = avg_pool_global(&m_mix);
        let (logits_mix, head_mix) = self.head_mix.forward(&f_mix)?;
        let mut parts = InvariantParts {
            m_cam: None,
            m_mix,
            m_spf: None,
            o_cam: None,
            o_mix: None,
            o_spf: None,
            f_mix,
            f_spf: None,
            logits_mix,
            logits_spf: None,
        };
        let mut cache = InvariantCache {
            residuals,
            cam: None,
            mix,
            head_mix,
            head_spf: None,
        };
        if let (Some(trunk_cam), Some(conv_cam), Some(head_spf)) = (&self.trunk_cam, &self.conv_cam, &self.head_spf) {
            let (m_cam, cam) = trunk_cam.forward(&input)?;
            let m_spf = decompose(&parts.m_mix, &m_cam)?;
            parts.o_cam = Some(camera_logits(&m_cam, conv_cam)?);
            parts.o_mix = Some(camera_logits(&parts.m_mix, conv_cam)?);
            parts.o_spf = Some(camera_logits(&m_spf, conv_cam)?);
            let f_spf = avg_pool_global(&m_spf);
            let (logits_spf, hc) = head_spf.forward(&f_spf)?;
            parts.m_cam = Some(m_cam);
            parts.m_spf = Some(m_spf);
            parts.f_spf = Some(f_spf);
            parts.logits_spf = Some(logits_spf);
            cache.cam = Some(cam);
            cache.head_spf = Some(hc);
        }
        Ok((parts, cache))
    }

    fn forward_augmentation_cached(&self, images: &Tensor) -> Result<(Tensor, Tensor, AugmentationCache)> {
        self.check_images(images)?;
        let (input, residuals, aug) = match &self.conv_aug {
            Some(conv) => {
                let r = eddf_batch(images)?;
                let a = conv_aug(conv, &r)?;
                (recompose_batch(images, &a)?, Some(r), Some(a))
            }
            None => (images.clone(), None, None),
        };
        let (m_aug, trunk) = self.trunk_aug.forward(&input)?;
        let f_aug = avg_pool_global(&m_aug);
        let (logits, head) = self.head_aug.forward(&f_aug)?;
        Ok((
            f_aug,
            logits,
            AugmentationCache {
                images: images.clone(),
                residuals,
                aug,
                trunk,
                head,
            },
        ))
    }

    /// Invariant branch only; augmentation fields of the result are absent.
    pub fn forward_invariant(&self, images: &Tensor) -> Result<InvariantParts> {
        Ok(self.forward_invariant_cached(images)?.0)
    }

    /// `(F_aug, p_aug)` per sample.
    pub fn forward_augmentation(&self, images: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (f, logits, _) = self.forward_augmentation_cached(images)?;
        let p = (0..logits.batch()).map(|n| live_prob(&logits, n)).collect();
        Ok((f, p))
    }

    pub fn forward(&self, images: &Tensor) -> Result<BranchOutputs> {
        Ok(self.forward_train(images)?.0)
    }

    pub fn forward_image(&self, image: &RawImage) -> Result<BranchOutputs> {
        self.forward(&image.to_tensor())
    }

    pub fn forward_train(&self, images: &Tensor) -> Result<(BranchOutputs, ForwardCache)> {
        let (inv, invariant) = self.forward_invariant_cached(images)?;
        let (f_aug, logits_aug, augmentation) = self.forward_augmentation_cached(images)?;
        Ok((
            BranchOutputs {
                m_cam: inv.m_cam,
                m_mix: inv.m_mix,
                m_spf: inv.m_spf,
                o_cam: inv.o_cam,
                o_mix: inv.o_mix,
                o_spf: inv.o_spf,
                f_mix: inv.f_mix,
                f_spf: inv.f_spf,
                f_aug,
                logits_mix: inv.logits_mix,
                logits_spf: inv.logits_spf,
                logits_aug,
            },
            ForwardCache {
                invariant,
                augmentation,
            },
        ))
    }

    /// Live-probability of the `F_spf` head for an externally supplied
    /// spoofing map (used after attention refinement).
    pub fn spoof_probability(&self, m_spf: &Tensor) -> Result<Vec<f64>> {
        let head = self.head_spf.as_ref().unwrap_or(&self.head_mix);
        let (logits, _) = head.forward(&avg_pool_global(m_spf))?;
        Ok((0..logits.batch()).map(|n| live_prob(&logits, n)).collect())
    }

    /// Accumulates parameter gradients. `outputs` must come from the same
    /// `forward_train` call as `cache`.
    pub fn backward(&mut self, outputs: &BranchOutputs, cache: &ForwardCache, grads: &OutputGrads) -> Result<()> {
        let inv = &cache.invariant;
        let mut d_mix: Option<Tensor> = None;
        let mut d_cam: Option<Tensor> = None;
        let mut d_spf: Option<Tensor> = None;
        if let Some(g) = &grads.logits_mix {
            let df = self.head_mix.backward(&inv.head_mix, g);
            accumulate(&mut d_mix, avg_pool_global_backward(&df, outputs.m_mix.shape()));
        }
        if let (Some(g), Some(head), Some(hc)) = (&grads.logits_spf, self.head_spf.as_mut(), inv.head_spf.as_ref()) {
            let df = head.backward(hc, g);
            accumulate(&mut d_spf, avg_pool_global_backward(&df, outputs.m_mix.shape()));
        }
        if let Some(conv_cam) = self.conv_cam.as_mut() {
            let maps = [
                (&grads.o_cam, &outputs.m_cam, &mut d_cam),
                (&grads.o_mix, &Some(outputs.m_mix.clone()), &mut d_mix),
                (&grads.o_spf, &outputs.m_spf, &mut d_spf),
            ];
            for (g, m, slot) in maps {
                if let (Some(g), Some(m)) = (g, m) {
                    let dm = conv_cam.backward(m, g, true).expect("dx requested");
                    accumulate(slot, dm);
                }
            }
        }
        if let Some(ds) = d_spf {
            accumulate(&mut d_mix, ds.clone());
            let mut neg = ds;
            neg.scale(-1.0);
            accumulate(&mut d_cam, neg);
        }
        let need_input_grad = self.conv_hf.is_some();
        let mut d_input: Option<Tensor> = None;
        if let Some(d) = d_mix {
            if let Some(dx) = self.trunk_mix.backward(&inv.mix, &d, need_input_grad) {
                accumulate(&mut d_input, dx);
            }
        }
        if let (Some(d), Some(trunk), Some(tc)) = (d_cam, self.trunk_cam.as_mut(), inv.cam.as_ref()) {
            if let Some(dx) = trunk.backward(tc, &d, need_input_grad) {
                accumulate(&mut d_input, dx);
            }
        }
        if let (Some(conv), Some(r), Some(d)) = (self.conv_hf.as_mut(), inv.residuals.as_ref(), d_input) {
            conv.backward(&r.0, &d, false);
        }

        let aug = &cache.augmentation;
        if let Some(g) = &grads.logits_aug {
            let df = self.head_aug.backward(&aug.head, g);
            let dm = avg_pool_global_backward(&df, aug.trunk.output_shape());
            let need = self.conv_aug.is_some();
            if let Some(dx) = self.trunk_aug.backward(&aug.trunk, &dm, need) {
                if let (Some(conv), Some(r), Some(a)) = (self.conv_aug.as_mut(), aug.residuals.as_ref(), aug.aug.as_ref()) {
                    let da = recompose_backward(&aug.images, a, &dx);
                    conv.backward(&r.0, &da, false);
                }
            }
        }
        Ok(())
    }
}

/// Invariant-branch part of [`BranchOutputs`].
#[derive(Clone, Debug)]
pub struct InvariantParts {
    pub m_cam: Option<Tensor>,
    pub m_mix: Tensor,
    pub m_spf: Option<Tensor>,
    pub o_cam: Option<Tensor>,
    pub o_mix: Option<Tensor>,
    pub o_spf: Option<Tensor>,
    pub f_mix: Tensor,
    pub f_spf: Option<Tensor>,
    pub logits_mix: Tensor,
    pub logits_spf: Option<Tensor>,
}

impl Module for CameraInvariantModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(c) = &self.conv_hf {
            c.visit(&join(prefix, "filters.conv_hf"), f);
        }
        if let Some(c) = &self.conv_aug {
            c.visit(&join(prefix, "filters.conv_aug"), f);
        }
        if let Some(t) = &self.trunk_cam {
            t.visit(&join(prefix, "trunk_cam"), f);
        }
        self.trunk_mix.visit(&join(prefix, "trunk_mix"), f);
        self.trunk_aug.visit(&join(prefix, "trunk_aug"), f);
        if let Some(c) = &self.conv_cam {
            c.visit(&join(prefix, "conv_cam"), f);
        }
        self.head_mix.visit(&join(prefix, "head_mix"), f);
        if let Some(h) = &self.head_spf {
            h.visit(&join(prefix, "head_spf"), f);
        }
        self.head_aug.visit(&join(prefix, "head_aug"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(c) = &mut self.conv_hf {
            c.visit_mut(&join(prefix, "filters.conv_hf"), f);
        }
        if let Some(c) = &mut self.conv_aug {
            c.visit_mut(&join(prefix, "filters.conv_aug"), f);
        }
        if let Some(t) = &mut self.trunk_cam {
            t.visit_mut(&join(prefix, "trunk_cam"), f);
        }
        self.trunk_mix.visit_mut(&join(prefix, "trunk_mix"), f);
        self.trunk_aug.visit_mut(&join(prefix, "trunk_aug"), f);
        if let Some(c) = &mut self.conv_cam {
            c.visit_mut(&join(prefix, "conv_cam"), f);
        }
        self.head_mix.visit_mut(&join(prefix, "head_mix"), f);
        if let Some(h) = &mut self.head_spf {
            h.visit_mut(&join(prefix, "head_spf"), f);
        }
        self.head_aug.visit_mut(&join(prefix, "head_aug"), f);
    }
}
