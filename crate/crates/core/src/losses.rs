//! Training objectives: per-pixel camera focal loss, binary live/spoof focal
//! loss, the camera-confusion ("decam") loss and their weighted total.
//!
//! All losses are computed in `f64` on raw logits and return the gradient
//! with respect to those logits. Spatial terms are summed over positions and
//! classes; every loss is averaged over the batch.

use crate::error::{Error, Result};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha1: 0.5,
            alpha2: 1.0,
            gamma: 4.0,
            lambda1: 0.005,
            lambda2: 5.0,
            lambda3: 0.1,
            lambda4: 0.7,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha1,
            self.alpha2,
            self.gamma,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Layout of a batch of logit maps, `[batch, classes, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapShape {
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    fn len(&self) -> usize {
        self.batch * self.classes * self.height * self.width
    }

    fn index(&self, b: usize, k: usize, pos: usize) -> usize {
        (b * self.classes + k) * self.height * self.width + pos
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// One-hot camera label shared by every location of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CameraTarget {
    pub class: usize,
    pub classes: usize,
}

impl CameraTarget {
    pub fn one_hot(&self) -> Vec<f64> {
        (0..self.classes).map(|k| if k == self.class { 1.0 } else { 0.0 }).collect()
    }
}

fn check_map(logits: &[f64], shape: MapShape) -> Result<()> {
    if logits.len() != shape.len() {
        return Err(Error::dim(
            "logit map",
            format!("{shape:?} needs {} values, got {}", shape.len(), logits.len()),
        ));
    }
    if shape.classes < 2 {
        return Err(Error::dim("logit map", "at least two camera classes are required"));
    }
    Ok(())
}

/// Log-softmax over the class axis at one location; also returns the
/// probabilities.
fn log_softmax_at(logits: &[f64], shape: MapShape, b: usize, pos: usize, logp: &mut [f64], p: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..shape.classes {
        max = max.max(logits[shape.index(b, k, pos)]);
    }
    let mut sum = 0.0;
    for k in 0..shape.classes {
        sum += (logits[shape.index(b, k, pos)] - max).exp();
    }
    let lse = max + sum.ln();
    for k in 0..shape.classes {
        logp[k] = logits[shape.index(b, k, pos)] - lse;
        p[k] = logp[k].exp();
    }
}

/// Per-pixel multi-class focal loss against one camera label per image.
pub fn camera_focal_loss(logits: &[f64], shape: MapShape, targets: &[CameraTarget], gamma: f64) -> Result<LossGrad> {
    check_map(logits, shape)?;
    if targets.len() != shape.batch {
        return Err(Error::dim(
            "camera_focal_loss",
            format!("{} targets for a batch of {}", targets.len(), shape.batch),
        ));
    }
    if let Some(t) = targets.iter().find(|t| t.classes != shape.classes || t.class >= shape.classes) {
        return Err(Error::dim(
            "camera_focal_loss",
            format!("target {t:?} does not match {} logit classes", shape.classes),
        ));
    }
    let floor = PROB_FLOOR.ln();
    let inv_batch = 1.0 / shape.batch as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut logp = vec![0.0; shape.classes];
    let mut p = vec![0.0; shape.classes];
    let mut total = 0.0;
    for (b, target) in targets.iter().enumerate() {
        let t = target.class;
        for pos in 0..shape.height * shape.width {
            log_softmax_at(logits, shape, b, pos, &mut logp, &mut p);
            let pt = p[t];
            let q = 1.0 - pt;
            let (lp, floored) = if logp[t] < floor { (floor, true) } else { (logp[t], false) };
            total += -q.powf(gamma) * lp;
            // dL/dh_k = [γ q^{γ-1} p_t lp - q^γ·1{not floored}] · (δ_tk - p_k)
            let focal_term = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt * lp };
            let ce_term = if floored { 0.0 } else { q.powf(gamma) };
            let coef = (focal_term - ce_term) * inv_batch;
            for k in 0..shape.classes {
                let delta = if k == t { 1.0 } else { 0.0 };
                grad[shape.index(b, k, pos)] = coef * (delta - p[k]);
            }
        }
    }
    Ok(LossGrad {
        value: total * inv_batch,
        grad,
    })
}

/// Cross-entropy of every location against the uniform camera
/// distribution `1/Φ`. Minimal (`H·W·ln Φ` per image) at uniform predictions.
pub fn decam_loss(logits: &[f64], shape: MapShape) -> Result<LossGrad> {
    check_map(logits, shape)?;
    let floor = PROB_FLOOR.ln();
    let inv_batch = 1.0 / shape.batch as f64;
    let inv_phi = 1.0 / shape.classes as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut logp = vec![0.0; shape.classes];
    let mut p = vec![0.0; shape.classes];
    let mut total = 0.0;
    for b in 0..shape.batch {
        for pos in 0..shape.height * shape.width {
            log_softmax_at(logits, shape, b, pos, &mut logp, &mut p);
            let mut unfloored = 0.0;
            let mut active = vec![false; shape.classes];
            for k in 0..shape.classes {
                if logp[k] < floor {
                    total -= inv_phi * floor;
                } else {
                    total -= inv_phi * logp[k];
                    active[k] = true;
                    unfloored += 1.0;
                }
            }
            for k in 0..shape.classes {
                let own = if active[k] { 1.0 } else { 0.0 };
                grad[shape.index(b, k, pos)] = -inv_phi * (own - p[k] * unfloored) * inv_batch;
            }
        }
    }
    Ok(LossGrad {
        value: total * inv_batch,
        grad,
    })
}

/// Scalar binary focal loss for a live-probability `p` and label `y`
/// (1 = live). Both terms carry a negative log so the loss is non-negative.
pub fn binary_focal(p: f64, live: bool, alpha1: f64, alpha2: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if live {
        alpha1 * (1.0 - p).powf(gamma) * -p.ln()
    } else {
        alpha2 * p.powf(gamma) * -(1.0 - p).ln()
    }
}

/// Binary focal loss over a batch of two-way logits `[live, spoof]`.
pub fn binary_focal_loss(logits: &[f64], live: &[bool], hp: &HyperParams) -> Result<LossGrad> {
    if logits.len() != 2 * live.len() || live.is_empty() {
        return Err(Error::dim(
            "binary_focal_loss",
            format!("{} logits for {} labels", logits.len(), live.len()),
        ));
    }
    let floor = PROB_FLOOR.ln();
    let inv_batch = 1.0 / live.len() as f64;
    let g = hp.gamma;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (b, &y) in live.iter().enumerate() {
        let d = logits[2 * b] - logits[2 * b + 1];
        // log p = -softplus(-d), log(1-p) = -softplus(d)
        let log_p = -softplus(-d);
        let log_q = -softplus(d);
        let p = log_p.exp();
        let q = log_q.exp();
        let dz = if y {
            let (lp, nf) = if log_p < floor { (floor, 0.0) } else { (log_p, 1.0) };
            total += hp.alpha1 * q.powf(g) * -lp;
            hp.alpha1 * (g * q.powf(g) * p * lp - q.powf(g + 1.0) * nf)
        } else {
            let (lq, nf) = if log_q < floor { (floor, 0.0) } else { (log_q, 1.0) };
            total += hp.alpha2 * p.powf(g) * -lq;
            hp.alpha2 * (-g * p.powf(g) * q * lq + p.powf(g + 1.0) * nf)
        };
        grad[2 * b] = dz * inv_batch;
        grad[2 * b + 1] = -dz * inv_batch;
    }
    Ok(LossGrad {
        value: total * inv_batch,
        grad,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The six loss components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cam_id_1: f64,
    pub cam_id_2: f64,
    pub anti_1: f64,
    pub anti_2: f64,
    pub anti_3: f64,
    pub decam: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("l1_cam", self.cam_id_1),
            ("l2_cam", self.cam_id_2),
            ("l1_anti", self.anti_1),
            ("l2_anti", self.anti_2),
            ("l3_anti", self.anti_3),
            ("decam", self.decam),
        ]
    }
}

/// `λ₁(ℒ¹cam+ℒ²cam) + λ₂(ℒ¹anti+ℒ²anti+ℒ³anti) + λ₃ℒdecam`.
pub fn total_loss(c: &LossComponents, hp: &HyperParams) -> Result<f64> {
    if let Some((name, v)) = c.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss component {name} = {v}")));
    }
    Ok(hp.lambda1 * (c.cam_id_1 + c.cam_id_2)
        + hp.lambda2 * (c.anti_1 + c.anti_2 + c.anti_3)
        + hp.lambda3 * c.decam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(batch: usize, classes: usize, h: usize, w: usize) -> MapShape {
        MapShape {
            batch,
            classes,
            height: h,
            width: w,
        }
    }

    fn random_logits(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    fn targets(classes: usize, ids: &[usize]) -> Vec<CameraTarget> {
        ids.iter().map(|&class| CameraTarget { class, classes }).collect()
    }

    /// Central differences of `f` at `x`, compared entrywise to `grad`.
    fn check_gradient(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "index {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn camera_focal_single_pixel_value() {
        // two equal logits: P = 0.5 for the true class
        let l = camera_focal_loss(&[0.3, 0.3], shape(1, 2, 1, 1), &targets(2, &[0]), 4.0).unwrap();
        let want = 0.5f64.powi(4) * -(0.5f64.ln());
        assert!((l.value - want).abs() < 1e-12);
        assert!((l.value - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn camera_focal_vanishes_for_confident_correct_prediction() {
        let l = camera_focal_loss(&[40.0, 40.0, -40.0, -40.0], shape(1, 2, 1, 2), &targets(2, &[0]), 4.0).unwrap();
        assert!(l.value < 1e-30);
    }

    #[test]
    fn camera_focal_with_zero_gamma_is_cross_entropy() {
        let s = shape(2, 3, 2, 2);
        let logits = random_logits(24, 1, 3.0);
        let tg = targets(3, &[2, 0]);
        let l = camera_focal_loss(&logits, s, &tg, 0.0).unwrap();
        let mut ce = 0.0;
        for (b, t) in tg.iter().enumerate() {
            for pos in 0..4 {
                let z: Vec<f64> = (0..3).map(|k| logits[s.index(b, k, pos)]).collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                ce += lse - z[t.class];
            }
        }
        assert!((l.value - ce / 2.0).abs() < 1e-9);
    }

    #[test]
    fn camera_focal_rejects_mismatched_targets() {
        let s = shape(1, 3, 1, 1);
        assert!(camera_focal_loss(&[0.0; 3], s, &targets(2, &[0]), 4.0).is_err());
        assert!(camera_focal_loss(&[0.0; 3], s, &targets(3, &[3]), 4.0).is_err());
        assert!(camera_focal_loss(&[0.0; 3], s, &targets(3, &[0, 1]), 4.0).is_err());
    }

    #[test]
    fn camera_focal_gradient_matches_finite_differences() {
        let s = shape(2, 3, 2, 3);
        for seed in 0..4 {
            let logits = random_logits(36, seed, 2.5);
            let tg = targets(3, &[1, 2]);
            let l = camera_focal_loss(&logits, s, &tg, 4.0).unwrap();
            check_gradient(&logits, &l.grad, |x| camera_focal_loss(x, s, &tg, 4.0).unwrap().value);
        }
    }

    #[test]
    fn binary_focal_values() {
        let hp = HyperParams::default();
        assert!((binary_focal(0.5, true, hp.alpha1, hp.alpha2, hp.gamma) - 0.021661).abs() < 1e-6);
        assert!(binary_focal(1.0 - 1e-15, true, 0.5, 1.0, 4.0) < 1e-20);
        assert!(binary_focal(1e-15, false, 0.5, 1.0, 4.0) < 1e-20);
        // logits route agrees with the scalar form
        let l = binary_focal_loss(&[0.4, -0.9], &[false], &hp).unwrap();
        let p = 1.0 / (1.0 + (-1.3f64).exp());
        assert!((l.value - binary_focal(p, false, 0.5, 1.0, 4.0)).abs() < 1e-12);
    }

    #[test]
    fn binary_focal_with_unit_alphas_and_zero_gamma_is_bce() {
        let hp = HyperParams {
            alpha1: 1.0,
            alpha2: 1.0,
            gamma: 0.0,
            ..HyperParams::default()
        };
        let logits = random_logits(16, 3, 4.0);
        let labels: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
        let l = binary_focal_loss(&logits, &labels, &hp).unwrap();
        let mut bce = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let p = 1.0 / (1.0 + (logits[2 * b + 1] - logits[2 * b]).exp());
            bce -= if y { p.ln() } else { (1.0 - p).ln() };
        }
        assert!((l.value - bce / 8.0).abs() < 1e-9);
    }

    #[test]
    fn binary_focal_gradient_matches_finite_differences() {
        let hp = HyperParams::default();
        let logits = random_logits(20, 9, 3.0);
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let l = binary_focal_loss(&logits, &labels, &hp).unwrap();
        check_gradient(&logits, &l.grad, |x| binary_focal_loss(x, &labels, &hp).unwrap().value);
    }

    #[test]
    fn decam_uniform_is_ln_phi_and_gradient_zero() {
        let l = decam_loss(&[0.7, 0.7, 0.7], shape(1, 3, 1, 1)).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.098612).abs() < 1e-6);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-12));
        let f = |x: &[f64]| decam_loss(x, shape(1, 3, 1, 1)).unwrap().value;
        let h = 1e-5;
        for i in 0..3 {
            let mut xp = vec![0.7; 3];
            xp[i] += h;
            let mut xm = vec![0.7; 3];
            xm[i] -= h;
            assert!(((f(&xp) - f(&xm)) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn decam_gradient_matches_finite_differences() {
        let s = shape(3, 4, 2, 2);
        let logits = random_logits(48, 21, 3.0);
        let l = decam_loss(&logits, s).unwrap();
        check_gradient(&logits, &l.grad, |x| decam_loss(x, s).unwrap().value);
    }

    #[test]
    fn total_loss_arithmetic_and_non_finite_abort() {
        let hp = HyperParams::default();
        assert_eq!(total_loss(&LossComponents::default(), &hp).unwrap(), 0.0);
        let ones = LossComponents {
            cam_id_1: 1.0,
            cam_id_2: 1.0,
            anti_1: 1.0,
            anti_2: 1.0,
            anti_3: 1.0,
            decam: 1.0,
        };
        assert!((total_loss(&ones, &hp).unwrap() - 15.11).abs() < 1e-12);
        let c = LossComponents {
            cam_id_1: 2.0,
            cam_id_2: 3.0,
            anti_1: 0.25,
            anti_2: 0.5,
            anti_3: 0.125,
            decam: 4.0,
        };
        let want = 0.005 * 5.0 + 5.0 * 0.875 + 0.1 * 4.0;
        assert!((total_loss(&c, &hp).unwrap() - want).abs() < 1e-12);
        let bad = LossComponents { decam: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, &hp), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000, scale in 0.1f64..20.0, t in 0usize..3) {
            let s = shape(1, 3, 2, 2);
            let logits = random_logits(12, seed, scale);
            prop_assert!(camera_focal_loss(&logits, s, &targets(3, &[t]), 4.0).unwrap().value >= 0.0);
            prop_assert!(decam_loss(&logits, s).unwrap().value >= 0.0);
            let hp = HyperParams::default();
            prop_assert!(binary_focal_loss(&logits[..4], &[t == 0, t != 0], &hp).unwrap().value >= 0.0);
        }

        #[test]
        fn decam_exceeds_ln_phi_off_uniform(seed in 0u64..10_000) {
            let logits = random_logits(3, seed, 2.0);
            let l = decam_loss(&logits, shape(1, 3, 1, 1)).unwrap();
            prop_assert!(l.value >= 3f64.ln() - 1e-12);
        }
    }
}
