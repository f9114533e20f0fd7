//! Test-time scoring: branch fusion, unknown-camera detection via a
//! calibrated top-two gap, and attention refinement of the camera feature
//! for samples flagged as coming from an unseen camera.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{decompose, image_camera_probs, CameraInvariantModel};
use crate::tensor::Tensor;

pub const DEFAULT_W_AUG: f64 = 0.7;
pub const UNKNOWN_MODE_W_AUG: f64 = 0.49;
pub const SELECTION_FLOOR: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub w_inv: f64,
    pub w_aug: f64,
    pub unknown_mode_w_aug: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            w_inv: 1.0,
            w_aug: DEFAULT_W_AUG,
            unknown_mode_w_aug: UNKNOWN_MODE_W_AUG,
        }
    }
}

impl FusionWeights {
    pub fn with_lambda4(lambda4: f64) -> Self {
        FusionWeights {
            w_aug: lambda4,
            unknown_mode_w_aug: lambda4 * lambda4,
            ..Self::default()
        }
    }
}

/// `(w_inv·p_spf + w_aug·p_aug) / (w_inv + w_aug)`.
pub fn fuse_scores(p_spf: f64, p_aug: f64, w_inv: f64, w_aug: f64) -> Result<f64> {
    if !(w_inv >= 0.0 && w_aug >= 0.0 && w_inv + w_aug > 0.0) || !w_inv.is_finite() || !w_aug.is_finite() {
        return Err(Error::Config(format!("fusion weights must be non-negative with a positive sum, got ({w_inv}, {w_aug})")));
    }
    Ok((w_inv * p_spf + w_aug * p_aug) / (w_inv + w_aug))
}

fn top_two(probs: &[f64]) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first, second)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraCalibration {
    pub tau: f64,
    pub floor: f64,
    pub n_cameras: usize,
}

/// `τ(x) = (p₁ − p₂) / (1 − p₁)`; `None` when `p₁ = 1`.
pub fn tau_descriptor(probs: &[f64]) -> Option<f64> {
    let (p1, p2) = top_two(probs);
    (p1 < 1.0).then(|| (p1 - p2) / (1.0 - p1))
}

/// Minimum descriptor over training samples whose top probability exceeds
/// `floor`.
pub fn calibrate_tau(train_probs: &[Vec<f64>], floor: f64) -> Result<CameraCalibration> {
    let n_cameras = train_probs.first().map_or(0, Vec::len);
    if n_cameras < 2 || train_probs.iter().any(|p| p.len() != n_cameras) {
        return Err(Error::Calibration("camera probability vectors must share a length of at least 2".into()));
    }
    let tau = train_probs
        .iter()
        .filter(|p| top_two(p).0 > floor)
        .filter_map(|p| tau_descriptor(p))
        .fold(f64::INFINITY, f64::min);
    if !tau.is_finite() {
        return Err(Error::Calibration(format!(
            "no training sample has a top camera probability above {floor}; lower the floor explicitly"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Calibration(format!("calibrated tau {tau} is not positive")));
    }
    Ok(CameraCalibration { tau, floor, n_cameras })
}

impl CameraCalibration {
    pub fn to_text(&self) -> String {
        format!("tau={}\nfloor={}\nn_cameras={}\n", self.tau, self.floor, self.n_cameras)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut tau, mut floor, mut n) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Calibration(format!("malformed calibration line {line:?}")))?;
            let bad = |_| Error::Calibration(format!("bad value in calibration line {line:?}"));
            match k.trim() {
                "tau" => tau = Some(v.trim().parse::<f64>().map_err(bad)?),
                "floor" => floor = Some(v.trim().parse::<f64>().map_err(bad)?),
                "n_cameras" => n = Some(v.trim().parse::<usize>().map_err(|_| Error::Calibration(format!("bad value in calibration line {line:?}")))?),
                other => return Err(Error::Calibration(format!("unknown calibration key {other:?}"))),
            }
        }
        match (tau, floor, n) {
            (Some(tau), Some(floor), Some(n_cameras)) if tau > 0.0 && tau.is_finite() => Ok(CameraCalibration { tau, floor, n_cameras }),
            (Some(tau), Some(_), Some(_)) => Err(Error::Calibration(format!("tau must be positive, got {tau}"))),
            _ => Err(Error::Calibration("calibration needs tau, floor and n_cameras".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// `1 − (p₁ − p₂)/τ`, clamped to `[0, 1]`.
pub fn unknown_probability(p_max1st: f64, p_max2nd: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Calibration(format!("tau must be positive, got {tau}")));
    }
    Ok((1.0 - (p_max1st - p_max2nd) / tau).clamp(0.0, 1.0))
}

/// Appends `p_unknown` and divides by the total.
pub fn normalize_probs(known: &[f64], p_unknown: f64) -> Result<Vec<f64>> {
    if known.iter().chain([&p_unknown]).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = known.iter().sum::<f64>() + p_unknown;
    if total <= 0.0 {
        return Err(Error::Data("cannot normalize an all-zero probability vector".into()));
    }
    Ok(known.iter().chain([&p_unknown]).map(|v| v / total).collect())
}

/// 1-based argmax; the first maximum wins. The last index means "unknown".
pub fn classify_camera(normalized: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in normalized.iter().enumerate() {
        if v > normalized[best] {
            best = i;
        }
    }
    best + 1
}

/// Self-attention over spatial positions of one `c × hw` feature matrix
/// (row-major, `x[ch * hw + pos]`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub hw: usize,
    pub c: usize,
    /// `hw × hw`, row-major.
    pub g: Vec<f64>,
    /// Row-wise softmax of `g`.
    pub h: Vec<f64>,
    /// `c × hw`.
    pub x_att: Vec<f64>,
}

pub fn attention_refine(x_cam: &[f64], c: usize, hw: usize) -> Result<AttentionState> {
    if c == 0 || hw == 0 || x_cam.len() != c * hw {
        return Err(Error::dim("attention_refine", format!("{} values for a {c}×{hw} matrix", x_cam.len())));
    }
    let mut g = vec![0.0; hw * hw];
    for ch in 0..c {
        let row = &x_cam[ch * hw..(ch + 1) * hw];
        for u in 0..hw {
            let a = row[u];
            if a == 0.0 {
                continue;
            }
            for v in 0..hw {
                g[u * hw + v] += a * row[v];
            }
        }
    }
    let mut h = g.clone();
    for r in h.chunks_exact_mut(hw) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    let mut x_att = vec![0.0; c * hw];
    for ch in 0..c {
        let row = &x_cam[ch * hw..(ch + 1) * hw];
        let out = &mut x_att[ch * hw..(ch + 1) * hw];
        for (u, &a) in row.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&h[u * hw..(u + 1) * hw]) {
                *o += a * w;
            }
        }
    }
    Ok(AttentionState { hw, c, g, h, x_att })
}

/// Per-sample scoring output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_spf: f64,
    pub p_aug: f64,
    pub p_fused: f64,
    /// 1-based; `n_cameras + 1` means unknown. 0 when the camera path is
    /// ablated.
    pub camera_pred: usize,
    pub p_unknown: f64,
    /// Normalized `N+1` distribution (empty without a camera path).
    pub camera_probs: Vec<f64>,
    pub refined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions<'a> {
    pub weights: FusionWeights,
    /// Enables N+1 classification, refinement and reweighting.
    pub unknown_mode: Option<&'a CameraCalibration>,
}

impl Default for PredictOptions<'_> {
    fn default() -> Self {
        PredictOptions {
            weights: FusionWeights::default(),
            unknown_mode: None,
        }
    }
}

/// Scores a batch of images.
pub fn predict(model: &CameraInvariantModel, images: &Tensor, opts: &PredictOptions) -> Result<Vec<Prediction>> {
    let out = model.forward(images)?;
    let w = opts.weights;
    let mut preds = Vec::with_capacity(out.batch());
    for n in 0..out.batch() {
        let p_spf = out.p_spf(n);
        let p_aug = out.p_aug(n);
        let mut pred = Prediction {
            p_spf,
            p_aug,
            p_fused: fuse_scores(p_spf, p_aug, w.w_inv, w.w_aug)?,
            camera_pred: 0,
            p_unknown: 0.0,
            camera_probs: Vec::new(),
            refined: false,
        };
        if let Some(o_cam) = &out.o_cam {
            let known = image_camera_probs(o_cam, n);
            match opts.unknown_mode {
                Some(cal) => {
                    if cal.n_cameras != known.len() {
                        return Err(Error::Calibration(format!(
                            "calibration is for {} cameras, model has {}",
                            cal.n_cameras,
                            known.len()
                        )));
                    }
                    let (p1, p2) = top_two(&known);
                    pred.p_unknown = unknown_probability(p1, p2, cal.tau)?;
                    pred.camera_probs = normalize_probs(&known, pred.p_unknown)?;
                    pred.camera_pred = classify_camera(&pred.camera_probs);
                    if pred.camera_pred == known.len() + 1 {
                        let m_cam = out.m_cam.as_ref().expect("camera path present");
                        let [_, c, h, wd] = m_cam.shape();
                        let x: Vec<f64> = m_cam.sample(n).iter().map(|&v| v as f64).collect();
                        let att = attention_refine(&x, c, h * wd)?;
                        let refined_cam = Tensor::from_vec([1, c, h, wd], att.x_att.iter().map(|&v| v as f32).collect())?;
                        let m_mix = Tensor::from_vec([1, c, h, wd], out.m_mix.sample(n).to_vec())?;
                        let m_spf = decompose(&m_mix, &refined_cam)?;
                        pred.p_spf = model.spoof_probability(&m_spf)?[0];
                        pred.p_fused = fuse_scores(pred.p_spf, p_aug, w.w_inv, w.unknown_mode_w_aug)?;
                        pred.refined = true;
                    }
                }
                None => {
                    pred.camera_probs = known.clone();
                    pred.camera_pred = classify_camera(&known);
                }
            }
        }
        preds.push(pred);
    }
    Ok(preds)
}

/// Score CSV: one row per sample, columns
/// `sample_id,p_spf,p_aug,p_fused,label,pai_type,camera_pred,p_unknown`.
pub struct ScoreRow<'a> {
    pub sample_id: &'a str,
    pub label: u8,
    pub pai_type: &'a str,
    pub prediction: &'a Prediction,
}

pub const SCORE_HEADER: &str = "sample_id,p_spf,p_aug,p_fused,label,pai_type,camera_pred,p_unknown";

pub fn score_csv<'a>(rows: impl IntoIterator<Item = ScoreRow<'a>>) -> String {
    let mut s = String::from(SCORE_HEADER);
    s.push('\n');
    for r in rows {
        let p = r.prediction;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.sample_id, p.p_spf, p.p_aug, p.p_fused, r.label, r.pai_type, p.camera_pred, p.p_unknown
        )
        .expect("writing to a String");
    }
    s
}
