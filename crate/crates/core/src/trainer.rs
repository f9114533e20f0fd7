//! Training loop: balanced batches, augmentation, the six-term objective and
//! Adam with a step-decay learning rate.

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::losses::{
    binary_focal_loss, camera_focal_loss, decam_loss, total_loss, CameraTarget, HyperParams, LossComponents, LossGrad,
    MapShape,
};
use crate::model::{Ablation, ArchConfig, BranchOutputs, CameraInvariantModel, OutputGrads};
use crate::nn::{Module, Param};
use crate::synthdata::{load_png, record_path, Manifest, SampleRecord, Split};
use crate::tensor::{RawImage, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_start: usize,
    pub decay_every: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub input_size: usize,
    pub width_div: usize,
    pub gn_groups: usize,
    pub ablation: Ablation,
    pub hp: HyperParams,
    /// Cameras whose training samples are used; `None` means all.
    pub train_cameras: Option<Vec<usize>>,
    pub augment: bool,
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Full-size network and schedule.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 32,
            lr0: 0.004,
            decay_factor: 0.2,
            decay_start: 20_000,
            decay_every: 10_000,
            total_steps: 40_000,
            seed: 0,
            input_size: 224,
            width_div: 1,
            gn_groups: 32,
            ablation: Ablation::default(),
            hp: HyperParams::default(),
            train_cameras: None,
            augment: true,
            log_every: 10,
            checkpoint_every: 0,
        }
    }

    /// 64×64 inputs, widths ÷8, schedule breakpoints ÷20, half the batch
    /// and learning rate, λ₁ = 2 and λ₃ = 5.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            lr0: 0.002,
            hp: HyperParams {
                lambda1: 2.0,
                lambda3: 5.0,
                ..HyperParams::default()
            },
            total_steps: 2_000,
            decay_start: 1_000,
            decay_every: 500,
            input_size: 64,
            width_div: 8,
            gn_groups: 4,
            ..Self::paper()
        }
    }

    pub fn arch(&self, n_cameras: usize) -> ArchConfig {
        let mut a = ArchConfig::scaled(n_cameras, self.width_div, self.gn_groups);
        a.ablation = self.ablation;
        a
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even and ≥ 2, got {}", self.batch_size)));
        }
        if self.total_steps == 0 || self.decay_every == 0 {
            return Err(Error::Config("total_steps and decay_every must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("lr0 and decay_factor must be positive".into()));
        }
        self.hp.validate()
    }

    /// Desk defaults, overridden by any keys present.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let d = Self::desk();
        let cfg = TrainConfig {
            batch_size: map.get("batch_size", d.batch_size)?,
            lr0: map.get("lr0", d.lr0)?,
            decay_factor: map.get("decay_factor", d.decay_factor)?,
            decay_start: map.get("decay_start", d.decay_start)?,
            decay_every: map.get("decay_every", d.decay_every)?,
            total_steps: map.get("total_steps", d.total_steps)?,
            seed: map.get("seed", d.seed)?,
            input_size: map.get("input_size", map.get("image_size", d.input_size)?)?,
            width_div: map.get("width_div", d.width_div)?,
            gn_groups: map.get("gn_groups", d.gn_groups)?,
            ablation: Ablation::from_map(map)?,
            hp: HyperParams::from_map(map, d.hp)?,
            train_cameras: map.get_list("train_cameras")?,
            augment: map.get_bool("augment", d.augment)?,
            log_every: map.get("log_every", d.log_every)?,
            checkpoint_every: map.get("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::default();
        let set = |m: &mut ConfigMap, k: &str, v: String| m.set(k, &v).expect("known key");
        set(&mut m, "batch_size", self.batch_size.to_string());
        set(&mut m, "lr0", self.lr0.to_string());
        set(&mut m, "decay_factor", self.decay_factor.to_string());
        set(&mut m, "decay_start", self.decay_start.to_string());
        set(&mut m, "decay_every", self.decay_every.to_string());
        set(&mut m, "total_steps", self.total_steps.to_string());
        set(&mut m, "seed", self.seed.to_string());
        set(&mut m, "input_size", self.input_size.to_string());
        set(&mut m, "width_div", self.width_div.to_string());
        set(&mut m, "gn_groups", self.gn_groups.to_string());
        set(&mut m, "augment", self.augment.to_string());
        set(&mut m, "log_every", self.log_every.to_string());
        set(&mut m, "checkpoint_every", self.checkpoint_every.to_string());
        if let Some(c) = &self.train_cameras {
            set(&mut m, "train_cameras", c.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        }
        self.ablation.write_map(&mut m);
        self.hp.write_map(&mut m);
        m
    }
}

/// `lr0` before `decay_start`, then multiplied by `decay_factor` at
/// `decay_start` and after every further `decay_every` steps.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.decay_start {
        cfg.lr0
    } else {
        let decays = 1 + (step - cfg.decay_start) / cfg.decay_every;
        cfg.lr0 * cfg.decay_factor.powi(decays as i32)
    }
}

/// Random draws of one augmentation; the default value is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for AugmentDraw {
    fn default() -> Self {
        AugmentDraw {
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

impl AugmentDraw {
    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentDraw {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-15.0..=15.0),
            brightness: rng.gen_range(0.8..=1.2),
            contrast: rng.gen_range(0.8..=1.2),
            saturation: rng.gen_range(0.8..=1.2),
        }
    }

    pub fn apply(&self, image: &RawImage) -> RawImage {
        let (h, w) = (image.height(), image.width());
        let mut out = image.clone();
        if self.hflip {
            out = RawImage::from_fn(h, w, |c, y, x| out.get(c, y, w - 1 - x));
        }
        if self.vflip {
            out = RawImage::from_fn(h, w, |c, y, x| out.get(c, h - 1 - y, x));
        }
        if self.angle_deg != 0.0 {
            out = rotate(&out, self.angle_deg);
        }
        if self.brightness != 1.0 {
            out.data_mut().iter_mut().for_each(|v| *v *= self.brightness);
        }
        if self.contrast != 1.0 {
            let mean = out.data().iter().sum::<f32>() / out.data().len() as f32;
            out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * self.contrast + mean);
        }
        if self.saturation != 1.0 {
            let hw = h * w;
            let d = out.data_mut();
            for i in 0..hw {
                let gray = 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i];
                for c in 0..3 {
                    d[c * hw + i] = gray + (d[c * hw + i] - gray) * self.saturation;
                }
            }
        }
        out.clamp_unit();
        out
    }
}

/// Bilinear rotation about the image centre with replicated borders.
fn rotate(img: &RawImage, angle_deg: f32) -> RawImage {
    let (h, w) = (img.height(), img.width());
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let sample = |ch: usize, y: f32, x: f32| {
        let y = y.clamp(0.0, h as f32 - 1.0);
        let x = x.clamp(0.0, w as f32 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = img.get(ch, y0, x0) * (1.0 - fx) + img.get(ch, y0, x1) * fx;
        let bottom = img.get(ch, y1, x0) * (1.0 - fx) + img.get(ch, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    };
    RawImage::from_fn(h, w, |ch, y, x| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        // inverse mapping
        sample(ch, cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

pub fn augment(image: &RawImage, rng: &mut impl Rng) -> RawImage {
    AugmentDraw::sample(rng).apply(image)
}

/// Training images held in memory with their camera class indices.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Vec<RawImage>,
    pub records: Vec<SampleRecord>,
    /// Sorted camera ids; a sample's class is its position here.
    pub camera_ids: Vec<usize>,
    live: Vec<usize>,
    spoof: Vec<usize>,
}

impl TrainData {
    pub fn new(images: Vec<RawImage>, records: Vec<SampleRecord>, camera_ids: Vec<usize>) -> Result<Self> {
        if images.len() != records.len() {
            return Err(Error::Data("image and record counts differ".into()));
        }
        if let Some(r) = records.iter().find(|r| !camera_ids.contains(&r.camera_id)) {
            return Err(Error::Data(format!("{} uses camera {} outside {camera_ids:?}", r.relative_path, r.camera_id)));
        }
        let live = (0..records.len()).filter(|&i| records[i].is_live()).collect();
        let spoof = (0..records.len()).filter(|&i| !records[i].is_live()).collect();
        Ok(TrainData {
            images,
            records,
            camera_ids,
            live,
            spoof,
        })
    }

    /// Loads one split of a dataset directory, optionally restricted to a
    /// set of cameras.
    pub fn load(root: &Path, manifest: &Manifest, split: Split, cameras: Option<&[usize]>) -> Result<Self> {
        let records: Vec<SampleRecord> = manifest
            .split(split)
            .into_iter()
            .filter(|r| cameras.map_or(true, |c| c.contains(&r.camera_id)))
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(Error::Data(format!("no {split} samples for cameras {cameras:?}")));
        }
        let images = records.iter().map(|r| load_png(&record_path(root, r))).collect::<Result<Vec<_>>>()?;
        let camera_ids = match cameras {
            Some(c) => {
                let mut c = c.to_vec();
                c.sort_unstable();
                c.dedup();
                c
            }
            None => manifest.cameras().into_iter().collect(),
        };
        Self::new(images, records, camera_ids)
    }

    pub fn camera_class(&self, index: usize) -> usize {
        let id = self.records[index].camera_id;
        self.camera_ids.iter().position(|&c| c == id).expect("checked in new")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Indices of a batch: the first half live, the second half spoof, each
/// drawn uniformly with replacement.
pub fn sample_batch(data: &TrainData, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if data.live.is_empty() || data.spoof.is_empty() {
        return Err(Error::Data(format!(
            "balanced batches need both classes ({} live, {} spoof)",
            data.live.len(),
            data.spoof.len()
        )));
    }
    if batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size {batch_size} is odd")));
    }
    let half = batch_size / 2;
    let mut idx = Vec::with_capacity(batch_size);
    idx.extend((0..half).map(|_| data.live[rng.gen_range(0..data.live.len())]));
    idx.extend((0..half).map(|_| data.spoof[rng.gen_range(0..data.spoof.len())]));
    Ok(idx)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &impl Module) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p: &Param| m.push(vec![0.0; p.len()]));
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step(&mut self, model: &mut impl Module, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = lr * c2.sqrt() / c1;
        let eps_hat = self.eps * c2.sqrt();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut("", &mut |_, p| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for ((w, &g), (mi, vi)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * g;
                let vn = b2 * *vi as f64 + (1.0 - b2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                *w -= (step * mn / (vn.sqrt() + eps_hat)) as f32;
            }
            i += 1;
        });
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn grad_tensor(shape: [usize; 4], g: &LossGrad, weight: f64) -> Result<Tensor> {
    Tensor::from_vec(shape, g.grad.iter().map(|&v| (v * weight) as f32).collect())
}

fn map_shape(t: &Tensor) -> MapShape {
    let [batch, classes, height, width] = t.shape();
    MapShape {
        batch,
        classes,
        height,
        width,
    }
}

/// The six loss components and the gradient of the weighted total with
/// respect to the network outputs.
pub fn compute_losses(
    outputs: &BranchOutputs,
    camera_classes: &[usize],
    live: &[bool],
    hp: &HyperParams,
) -> Result<(LossComponents, OutputGrads)> {
    let mut c = LossComponents::default();
    let mut g = OutputGrads::default();
    let anti = |logits: &Tensor| binary_focal_loss(&to_f64(logits), live, hp);
    let l = anti(&outputs.logits_mix)?;
    c.anti_1 = l.value;
    g.logits_mix = Some(grad_tensor(outputs.logits_mix.shape(), &l, hp.lambda2)?);
    let l = anti(&outputs.logits_aug)?;
    c.anti_3 = l.value;
    g.logits_aug = Some(grad_tensor(outputs.logits_aug.shape(), &l, hp.lambda2)?);
    if let (Some(o_cam), Some(o_mix), Some(o_spf), Some(logits_spf)) =
        (&outputs.o_cam, &outputs.o_mix, &outputs.o_spf, &outputs.logits_spf)
    {
        let classes = o_cam.channels();
        let targets: Vec<CameraTarget> = camera_classes.iter().map(|&class| CameraTarget { class, classes }).collect();
        let l = camera_focal_loss(&to_f64(o_cam), map_shape(o_cam), &targets, hp.gamma)?;
        c.cam_id_1 = l.value;
        g.o_cam = Some(grad_tensor(o_cam.shape(), &l, hp.lambda1)?);
        let l = camera_focal_loss(&to_f64(o_mix), map_shape(o_mix), &targets, hp.gamma)?;
        c.cam_id_2 = l.value;
        g.o_mix = Some(grad_tensor(o_mix.shape(), &l, hp.lambda1)?);
        let l = decam_loss(&to_f64(o_spf), map_shape(o_spf))?;
        c.decam = l.value;
        g.o_spf = Some(grad_tensor(o_spf.shape(), &l, hp.lambda3)?);
        let l = anti(logits_spf)?;
        c.anti_2 = l.value;
        g.logits_spf = Some(grad_tensor(logits_spf.shape(), &l, hp.lambda2)?);
    }
    Ok((c, g))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossComponents,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,lr,l1_cam,l2_cam,l1_anti,l2_anti,l3_anti,decam,total";

impl LogRow {
    pub fn to_csv_line(&self) -> String {
        let c = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.lr, c.cam_id_1, c.cam_id_2, c.anti_1, c.anti_2, c.anti_3, c.decam, self.total
        )
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a TrainData,
    pub model: CameraInvariantModel,
    pub optimizer: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainData) -> Result<Self> {
        config.validate()?;
        if data.camera_ids.len() < 2 && !config.ablation.no_cam_id {
            return Err(Error::Config("camera losses need at least two training cameras".into()));
        }
        if let Some(img) = data.images.first() {
            if img.height() != config.input_size || img.width() != config.input_size {
                return Err(Error::Config(format!(
                    "input_size {} does not match {}×{} images",
                    config.input_size,
                    img.height(),
                    img.width()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = CameraInvariantModel::new(config.arch(data.camera_ids.len().max(2)), &mut rng)?;
        let optimizer = Adam::new(&model);
        Ok(Trainer {
            config,
            data,
            model,
            optimizer,
            step: 0,
            rng,
        })
    }

    /// Builds the batch tensor and labels for the next step.
    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>, Vec<bool>)> {
        let idx = sample_batch(self.data, self.config.batch_size, &mut self.rng)?;
        let mut images = Vec::with_capacity(idx.len());
        for &i in &idx {
            let img = &self.data.images[i];
            images.push(if self.config.augment { augment(img, &mut self.rng) } else { img.clone() });
        }
        let cams = idx.iter().map(|&i| self.data.camera_class(i)).collect();
        let live = idx.iter().map(|&i| self.data.records[i].is_live()).collect();
        Ok((RawImage::batch(&images)?, cams, live))
    }

    /// Forward, backward and update on one batch.
    pub fn train_on(&mut self, images: &Tensor, cams: &[usize], live: &[bool]) -> Result<LogRow> {
        let lr = lr_schedule(self.step, &self.config);
        let (outputs, cache) = self.model.forward_train(images)?;
        let (losses, grads) = compute_losses(&outputs, cams, live, &self.config.hp)?;
        let total = total_loss(&losses, &self.config.hp)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step)))?;
        self.model.zero_grad();
        self.model.backward(&outputs, &cache, &grads)?;
        self.optimizer.step(&mut self.model, lr);
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            lr,
            losses,
            total,
        })
    }

    pub fn step(&mut self) -> Result<LogRow> {
        let (images, cams, live) = self.next_batch()?;
        self.train_on(&images, &cams, &live)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            camera_ids: self.data.camera_ids.clone(),
            step: self.step,
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            calibration: None,
        }
    }

    /// Runs to `total_steps`. `on_checkpoint` sees intermediate checkpoints
    /// every `checkpoint_every` steps.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        while self.step < self.config.total_steps {
            let row = self.step()?;
            let every = self.config.log_every.max(1);
            if row.step % every == 0 || row.step == 1 || row.step == self.config.total_steps {
                debug!("step {} lr {:.2e} total {:.5}", row.step, row.lr, row.total);
                log.push(row);
            }
            if self.config.checkpoint_every > 0
                && row.step % self.config.checkpoint_every == 0
                && row.step < self.config.total_steps
            {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        info!("trained {} steps", self.step);
        Ok(log)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

/// Trains from scratch and returns the final checkpoint with the log.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let log = trainer.run(|_| Ok(()))?;
    Ok((trainer.checkpoint(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PaiType;
    use crate::synthdata::DatasetConfig;

    fn tiny_data(cameras: usize, scenes: usize, size: usize) -> TrainData {
        let cfg = DatasetConfig {
            n_cameras: cameras,
            scenes,
            image_size: size,
            ..DatasetConfig::default()
        };
        let mut images = Vec::new();
        let mut records = Vec::new();
        for s in 0..scenes {
            for c in 0..cameras {
                for pai in [PaiType::None, PaiType::Print, PaiType::Replay] {
                    images.push(cfg.render(s, c, &pai).unwrap());
                    records.push(SampleRecord {
                        relative_path: DatasetConfig::sample_path(Split::Train, c, s, &pai),
                        camera_id: c,
                        label: (pai == PaiType::None) as u8,
                        pai_type: pai,
                        split: Split::Train,
                    });
                }
            }
        }
        TrainData::new(images, records, (0..cameras).collect()).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            input_size: 32,
            width_div: 16,
            gn_groups: 2,
            total_steps: 50,
            log_every: 1,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(0, &cfg), 0.004);
        assert_eq!(lr_schedule(19_999, &cfg), 0.004);
        assert!((lr_schedule(20_000, &cfg) - 0.0008).abs() < 1e-15);
        assert!((lr_schedule(29_999, &cfg) - 0.0008).abs() < 1e-15);
        assert!((lr_schedule(30_000, &cfg) - 0.00016).abs() < 1e-15);
        let desk = TrainConfig::desk();
        assert_eq!(lr_schedule(999, &desk), 0.002);
        assert!((lr_schedule(1_000, &desk) - 0.0004).abs() < 1e-15);
        assert!((lr_schedule(1_500, &desk) - 0.00008).abs() < 1e-15);
    }

    #[test]
    fn batches_are_balanced_and_reproducible() {
        let data = tiny_data(2, 3, 16);
        let a = sample_batch(&data, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&data, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&i| data.records[i].is_live()).count(), 16);
        assert!(a.iter().all(|&i| data.camera_ids.contains(&data.records[i].camera_id)));
        assert!(sample_batch(&data, 3, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
        let only_live: Vec<usize> = (0..data.len()).filter(|&i| data.records[i].is_live()).collect();
        let live_data = TrainData::new(
            only_live.iter().map(|&i| data.images[i].clone()).collect(),
            only_live.iter().map(|&i| data.records[i].clone()).collect(),
            vec![0, 1],
        )
        .unwrap();
        assert!(matches!(sample_batch(&live_data, 4, &mut ChaCha8Rng::seed_from_u64(1)), Err(Error::Data(_))));
    }

    #[test]
    fn augmentation_identity_flips_and_range() {
        let img = crate::synthdata::render_base_scene(2, 24);
        assert_eq!(AugmentDraw::default().apply(&img), img);
        let flips = AugmentDraw { hflip: true, vflip: true, ..Default::default() };
        assert_eq!(flips.apply(&flips.apply(&img)), img);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = AugmentDraw::sample(&mut rng);
            assert!(d.angle_deg.abs() <= 15.0);
            for f in [d.brightness, d.contrast, d.saturation] {
                assert!((0.8..=1.2).contains(&f));
            }
            assert!(d.apply(&img).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // 90° rotation of an asymmetric pattern moves columns to rows
        let stripe = RawImage::from_fn(5, 5, |_, _, x| if x == 4 { 1.0 } else { 0.0 });
        let r = rotate(&stripe, 90.0);
        let row_sums: Vec<f32> = (0..5).map(|y| (0..5).map(|x| r.get(0, y, x)).sum()).collect();
        assert!(row_sums.iter().any(|&s| (s - 5.0).abs() < 1e-4), "{row_sums:?}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = crate::nn::Linear::zeros(1, 1);
        p.weight.grad = vec![3.0];
        p.bias.grad = vec![-0.5];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, 0.01);
        assert!((p.weight.value[0] + 0.01).abs() < 1e-6);
        assert!((p.bias.value[0] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn one_step_descends_on_the_mixed_head_loss() {
        let data = tiny_data(2, 2, 32);
        let mut hp = HyperParams { lambda1: 0.0, lambda2: 5.0, lambda3: 0.0, ..HyperParams::default() };
        hp.alpha1 = 1.0;
        let cfg = TrainConfig { hp, lr0: 1e-4, augment: false, ..tiny_config() };
        let mut t = Trainer::new(cfg, &data).unwrap();
        let (images, cams, live) = t.next_batch().unwrap();
        let before = t.train_on(&images, &cams, &live).unwrap().losses.anti_1;
        let out = t.model.forward(&images).unwrap();
        let (after, _) = compute_losses(&out, &cams, &live, &hp).unwrap();
        assert!(after.anti_1 < before, "{} !< {before}", after.anti_1);
    }

    #[test]
    fn camera_gradients_reach_the_camera_trunk() {
        let data = tiny_data(2, 2, 32);
        let mut t = Trainer::new(TrainConfig { augment: false, ..tiny_config() }, &data).unwrap();
        let (images, cams, live) = t.next_batch().unwrap();
        t.train_on(&images, &cams, &live).unwrap();
        let mut norm = 0.0f64;
        t.model.trunk_cam.as_ref().unwrap().visit("", &mut |_, p| norm += p.grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>());
        assert!(norm > 0.0);
        let no_cam = TrainConfig { ablation: Ablation { no_cam_id: true, ..Ablation::default() }, ..tiny_config() };
        let t = Trainer::new(no_cam, &data).unwrap();
        assert!(t.model.trunk_cam.is_none() && t.model.conv_cam.is_none());
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let data = tiny_data(2, 4, 32);
        let cfg = TrainConfig { total_steps: 50, lr0: 1e-3, ..tiny_config() };
        let (ck, log) = train(&cfg, &data).unwrap();
        assert_eq!(log.len(), 50);
        let first = log[..5].iter().map(|r| r.total).sum::<f64>();
        let last = log[45..].iter().map(|r| r.total).sum::<f64>();
        assert!(last < first, "first {first} last {last}");
        let (ck2, _) = train(&cfg, &data).unwrap();
        assert_eq!(ck.model, ck2.model);
        assert!(log_csv(&log).starts_with(LOG_HEADER));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut cfg = TrainConfig::desk();
        cfg.train_cameras = Some(vec![0, 1]);
        cfg.ablation.no_cam_id = true;
        assert_eq!(TrainConfig::from_map(&cfg.to_map()).unwrap(), cfg);
        let mut m = ConfigMap::default();
        m.set("batch_size", "7").unwrap();
        assert!(matches!(TrainConfig::from_map(&m), Err(Error::Config(_))));
    }
}
