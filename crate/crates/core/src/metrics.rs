//! Biometric error rates.
//!
//! Scores are live-probabilities: a sample is accepted as live iff
//! `score >= threshold`. FAR counts accepted attacks, FRR rejected bona fide
//! samples.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Presentation-attack instrument.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PaiType {
    None,
    Print,
    Replay,
    Other(String),
}

impl PaiType {
    pub fn as_str(&self) -> &str {
        match self {
            PaiType::None => "none",
            PaiType::Print => "print",
            PaiType::Replay => "replay",
            PaiType::Other(s) => s,
        }
    }
}

impl fmt::Display for PaiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaiType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "" => return Err(Error::Data("empty PAI type".into())),
            "none" => PaiType::None,
            "print" => PaiType::Print,
            "replay" => PaiType::Replay,
            other => PaiType::Other(other.to_string()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub live: bool,
    pub pai_type: PaiType,
}

impl ScoreRecord {
    pub fn new(sample_id: impl Into<String>, score: f64, live: bool, pai_type: PaiType) -> Self {
        ScoreRecord {
            sample_id: sample_id.into(),
            score,
            live,
            pai_type,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn counts(records: &[ScoreRecord]) -> Result<(usize, usize)> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Data(format!("non-finite score for sample {}", r.sample_id)));
    }
    let lives = records.iter().filter(|r| r.live).count();
    let spoofs = records.len() - lives;
    if lives == 0 || spoofs == 0 {
        return Err(Error::Data(format!(
            "threshold sweep needs both classes, got {lives} live and {spoofs} spoof records"
        )));
    }
    Ok((lives, spoofs))
}

/// `(threshold, FAR, FRR)` at every distinct score plus the `-inf`/`+inf`
/// sentinels, in increasing threshold order.
pub fn roc_sweep(records: &[ScoreRecord]) -> Result<Vec<RocPoint>> {
    let (lives, spoofs) = counts(records)?;
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.live)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    });
    // everything strictly below the current threshold is rejected
    let (mut lives_below, mut spoofs_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(RocPoint {
            threshold: t,
            far: (spoofs - spoofs_below) as f64 / spoofs as f64,
            frr: lives_below as f64 / lives as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                lives_below += 1;
            } else {
                spoofs_below += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Equal error rate and the threshold where `|FAR - FRR|` is smallest
/// (ties go to the smaller threshold). The rate is `(FAR + FRR) / 2` there.
pub fn eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let points = roc_sweep(records)?;
    let best = points
        .iter()
        .min_by(|a, b| (a.far - a.frr).abs().total_cmp(&(b.far - b.frr).abs()))
        .expect("sweep has sentinels");
    Ok(((best.far + best.frr) / 2.0, best.threshold))
}

pub fn hter(far: f64, frr: f64) -> f64 {
    (far + frr) / 2.0
}

/// FAR and FRR at a fixed threshold.
pub fn far_frr_at(records: &[ScoreRecord], threshold: f64) -> Result<(f64, f64)> {
    let (lives, spoofs) = counts(records)?;
    let accepted_spoofs = records.iter().filter(|r| !r.live && r.score >= threshold).count();
    let rejected_lives = records.iter().filter(|r| r.live && r.score < threshold).count();
    Ok((accepted_spoofs as f64 / spoofs as f64, rejected_lives as f64 / lives as f64))
}

pub fn hter_at(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let (far, frr) = far_frr_at(records, threshold)?;
    Ok(hter(far, frr))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRates {
    /// Worst APCER over PAI types.
    pub apcer: f64,
    pub per_pai: BTreeMap<PaiType, f64>,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn apcer_bpcer_acer(records: &[ScoreRecord], threshold: f64) -> Result<AttackRates> {
    counts(records)?;
    let mut per_type: BTreeMap<PaiType, (usize, usize)> = BTreeMap::new();
    let (mut bona_fide, mut rejected) = (0usize, 0usize);
    for r in records {
        let predicted_attack = r.score < threshold;
        if r.live {
            bona_fide += 1;
            rejected += predicted_attack as usize;
        } else {
            if r.pai_type == PaiType::None {
                return Err(Error::Data(format!("spoof sample {} has PAI type none", r.sample_id)));
            }
            let e = per_type.entry(r.pai_type.clone()).or_default();
            e.0 += 1;
            e.1 += (!predicted_attack) as usize;
        }
    }
    let per_pai: BTreeMap<PaiType, f64> = per_type
        .into_iter()
        .map(|(k, (n, missed))| (k, missed as f64 / n as f64))
        .collect();
    let apcer = per_pai.values().copied().fold(0.0, f64::max);
    let bpcer = rejected as f64 / bona_fide as f64;
    Ok(AttackRates {
        apcer,
        per_pai,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub apcer: f64,
    pub per_pai_apcer: BTreeMap<PaiType, f64>,
    pub bpcer: f64,
    pub acer: f64,
}

impl MetricsReport {
    /// Threshold and EER from `dev`; every other rate on `test` at that
    /// threshold.
    pub fn dev_test(dev: &[ScoreRecord], test: &[ScoreRecord]) -> Result<Self> {
        let (eer_value, threshold) = eer(dev)?;
        let (far, frr) = far_frr_at(test, threshold)?;
        let rates = apcer_bpcer_acer(test, threshold)?;
        Ok(MetricsReport {
            eer: eer_value,
            threshold,
            far,
            frr,
            hter: hter(far, frr),
            apcer: rates.apcer,
            per_pai_apcer: rates.per_pai,
            bpcer: rates.bpcer,
            acer: rates.acer,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "EER    {:.4}\nthresh {}\nFAR    {:.4}\nFRR    {:.4}\nHTER   {:.4}\nAPCER  {:.4}\nBPCER  {:.4}\nACER   {:.4}\n",
            self.eer, self.threshold, self.far, self.frr, self.hter, self.apcer, self.bpcer, self.acer
        );
        for (pai, v) in &self.per_pai_apcer {
            s.push_str(&format!("APCER[{pai}] {v:.4}\n"));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("eer", self.eer),
            ("threshold", self.threshold),
            ("far", self.far),
            ("frr", self.frr),
            ("hter", self.hter),
            ("apcer", self.apcer),
            ("bpcer", self.bpcer),
            ("acer", self.acer),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        for (pai, v) in &self.per_pai_apcer {
            s.push_str(&format!("apcer_{pai},{v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(score: f64, live: bool) -> ScoreRecord {
        let pai = if live { PaiType::None } else { PaiType::Print };
        ScoreRecord::new("s", score, live, pai)
    }

    fn set(lives: &[f64], spoofs: &[f64]) -> Vec<ScoreRecord> {
        lives.iter().map(|&s| rec(s, true)).chain(spoofs.iter().map(|&s| rec(s, false))).collect()
    }

    fn random_set(n: usize, seed: u64) -> Vec<ScoreRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<ScoreRecord> = (0..n)
            .map(|i| {
                let live = rng.gen_bool(0.5);
                let pai = match (live, rng.gen_bool(0.5)) {
                    (true, _) => PaiType::None,
                    (false, true) => PaiType::Print,
                    (false, false) => PaiType::Replay,
                };
                // coarse grid to force ties
                let score = (rng.gen_range(0.0..1.0f64) * 40.0).floor() / 40.0;
                ScoreRecord::new(format!("r{i}"), score, live, pai)
            })
            .collect();
        v[0].live = true;
        v[0].pai_type = PaiType::None;
        v[1].live = false;
        v[1].pai_type = PaiType::Replay;
        v
    }

    /// Counting oracle: every threshold examined independently.
    fn oracle_rates(records: &[ScoreRecord], t: f64) -> (f64, f64) {
        let mut acc_spoof = 0.0;
        let mut n_spoof = 0.0;
        let mut rej_live = 0.0;
        let mut n_live = 0.0;
        for r in records {
            if r.live {
                n_live += 1.0;
                if !(r.score >= t) {
                    rej_live += 1.0;
                }
            } else {
                n_spoof += 1.0;
                if r.score >= t {
                    acc_spoof += 1.0;
                }
            }
        }
        (acc_spoof / n_spoof, rej_live / n_live)
    }

    fn oracle_thresholds(records: &[ScoreRecord]) -> Vec<f64> {
        let mut t: Vec<f64> = records.iter().map(|r| r.score).collect();
        t.push(f64::NEG_INFINITY);
        t.push(f64::INFINITY);
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    fn oracle_eer(records: &[ScoreRecord]) -> (f64, f64) {
        let mut best: Option<(f64, f64, f64)> = None;
        for t in oracle_thresholds(records) {
            let (far, frr) = oracle_rates(records, t);
            let gap = (far - frr).abs();
            if best.map_or(true, |(g, _, _)| gap < g) {
                best = Some((gap, (far + frr) / 2.0, t));
            }
        }
        let (_, e, t) = best.unwrap();
        (e, t)
    }

    fn oracle_attack(records: &[ScoreRecord], t: f64) -> (f64, f64) {
        let mut worst = 0.0f64;
        for pai in [PaiType::Print, PaiType::Replay] {
            let of_type: Vec<_> = records.iter().filter(|r| !r.live && r.pai_type == pai).collect();
            if of_type.is_empty() {
                continue;
            }
            let missed = of_type.iter().filter(|r| r.score >= t).count();
            worst = worst.max(missed as f64 / of_type.len() as f64);
        }
        let lives: Vec<_> = records.iter().filter(|r| r.live).collect();
        let bpcer = lives.iter().filter(|r| r.score < t).count() as f64 / lives.len() as f64;
        (worst, bpcer)
    }

    #[test]
    fn separable_scores() {
        let r = set(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(eer(&r).unwrap().0, 0.0);
        let sweep = roc_sweep(&r).unwrap();
        assert!(sweep.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
        assert_eq!(sweep[0], RocPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 });
    }

    #[test]
    fn overlapping_example() {
        let r = set(&[0.9, 0.8, 0.4], &[0.6, 0.2, 0.1]);
        let (e, t) = eer(&r).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
        assert!(t > 0.4 && t <= 0.6);
        let mut doubled = r.clone();
        doubled.extend(r.iter().cloned());
        assert_eq!(eer(&doubled).unwrap(), (e, t));
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(roc_sweep(&set(&[0.1, 0.5], &[])), Err(Error::Data(_))));
        assert!(eer(&set(&[], &[0.3])).is_err());
    }

    #[test]
    fn sweep_is_monotone_and_matches_oracle() {
        let r = random_set(50, 7);
        let sweep = roc_sweep(&r).unwrap();
        assert_eq!(sweep.iter().map(|p| p.threshold).collect::<Vec<_>>(), oracle_thresholds(&r));
        for p in &sweep {
            assert_eq!((p.far, p.frr), oracle_rates(&r, p.threshold));
        }
        for w in sweep.windows(2) {
            assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
        }
    }

    #[test]
    fn hter_arithmetic_and_fixed_threshold() {
        assert!((hter(0.2, 0.1) - 0.15).abs() < 1e-15);
        assert_eq!(hter(0.0, 0.0), 0.0);
        let r = random_set(20, 3);
        let (far, frr) = oracle_rates(&r, 0.5);
        assert_eq!(hter_at(&r, 0.5).unwrap(), (far + frr) / 2.0);
    }

    #[test]
    fn worst_case_apcer() {
        let mut r = Vec::new();
        for i in 0..10 {
            r.push(ScoreRecord::new("p", if i == 0 { 0.9 } else { 0.1 }, false, PaiType::Print));
            r.push(ScoreRecord::new("r", if i < 2 { 0.9 } else { 0.1 }, false, PaiType::Replay));
        }
        for i in 0..20 {
            r.push(ScoreRecord::new("l", if i == 0 { 0.2 } else { 0.8 }, true, PaiType::None));
        }
        let a = apcer_bpcer_acer(&r, 0.5).unwrap();
        assert!((a.per_pai[&PaiType::Print] - 0.1).abs() < 1e-15);
        assert!((a.apcer - 0.2).abs() < 1e-15);
        assert!((a.bpcer - 0.05).abs() < 1e-15);
        assert!((a.acer - 0.125).abs() < 1e-15);
    }

    #[test]
    fn spoof_without_pai_type_is_rejected() {
        let r = vec![rec(0.5, true), ScoreRecord::new("x", 0.2, false, PaiType::None)];
        assert!(matches!(apcer_bpcer_acer(&r, 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn thousand_random_records_match_oracles() {
        let r = random_set(1000, 11);
        assert_eq!(eer(&r).unwrap(), oracle_eer(&r));
        for t in [0.0, 0.25, 0.5, 0.7, 1.0] {
            assert_eq!(far_frr_at(&r, t).unwrap(), oracle_rates(&r, t));
            let a = apcer_bpcer_acer(&r, t).unwrap();
            assert_eq!((a.apcer, a.bpcer), oracle_attack(&r, t));
        }
    }

    #[test]
    fn report_uses_dev_threshold_on_test() {
        let dev = set(&[0.9, 0.8, 0.4], &[0.6, 0.2, 0.1]);
        let test = set(&[0.7, 0.5, 0.3], &[0.65, 0.55, 0.1]);
        let m = MetricsReport::dev_test(&dev, &test).unwrap();
        assert_eq!(m.threshold, 0.6);
        assert!((m.far - 1.0 / 3.0).abs() < 1e-12 && (m.frr - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.hter, (m.far + m.frr) / 2.0);
        assert_eq!(m.acer, (m.apcer + m.bpcer) / 2.0);
        assert!(m.to_csv().starts_with("metric,value\neer,"));
        assert!(m.to_text().contains("HTER"));
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform_and_permutation(seed in 0u64..5000, shift in 0usize..60) {
            let r = random_set(60, seed);
            let (e, t) = eer(&r).unwrap();
            let transformed: Vec<ScoreRecord> = r
                .iter()
                .map(|x| ScoreRecord { score: (3.0 * x.score).exp() - 1.0, ..x.clone() })
                .collect();
            let (e2, t2) = eer(&transformed).unwrap();
            prop_assert_eq!(e, e2);
            prop_assert!(t2 == (3.0 * t).exp() - 1.0);
            let mut rotated = r.clone();
            rotated.rotate_left(shift);
            prop_assert_eq!(eer(&rotated).unwrap(), (e, t));
            let a = apcer_bpcer_acer(&r, t).unwrap();
            for v in [e, a.apcer, a.bpcer, a.acer] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
