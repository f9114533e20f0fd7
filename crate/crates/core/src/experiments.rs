//! End-to-end protocols on a generated dataset: intra-camera evaluation,
//! cross-camera evaluation with a held-out device, the branch ablation grid
//! and camera-identification accuracy of the feature maps.

use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::inference::{calibrate_tau, predict, score_csv, CameraCalibration, FusionWeights, PredictOptions, Prediction, ScoreRow};
use crate::metrics::{eer, hter_at, MetricsReport, ScoreRecord};
use crate::model::{image_camera_probs, Ablation, CameraInvariantModel};
use crate::synthdata::{load_png, record_path, Manifest, SampleRecord, Split, MANIFEST_FILE};
use crate::tensor::RawImage;
use crate::trainer::{train, TrainConfig, TrainData};

pub const DEFAULT_EVAL_BATCH: usize = 64;

/// A generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: Manifest::load(&root.join(MANIFEST_FILE))?,
        })
    }

    /// Records of `split`, restricted to `cameras` when given, sorted by
    /// relative path.
    pub fn records(&self, split: Split, cameras: Option<&[usize]>) -> Vec<SampleRecord> {
        let mut r: Vec<SampleRecord> = self
            .manifest
            .split(split)
            .into_iter()
            .filter(|r| cameras.map_or(true, |c| c.contains(&r.camera_id)))
            .cloned()
            .collect();
        r.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
        r
    }

    pub fn images(&self, records: &[SampleRecord]) -> Result<Vec<RawImage>> {
        records.iter().map(|r| load_png(&record_path(&self.root, r))).collect()
    }

    pub fn train_data(&self, cameras: Option<&[usize]>) -> Result<TrainData> {
        TrainData::load(&self.root, &self.manifest, Split::Train, cameras)
    }
}

/// Which probability a metric is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    Fused,
    Invariant,
    Augmentation,
}

impl ScoreSource {
    pub fn of(&self, p: &Prediction) -> f64 {
        match self {
            ScoreSource::Fused => p.p_fused,
            ScoreSource::Invariant => p.p_spf,
            ScoreSource::Augmentation => p.p_aug,
        }
    }
}

pub fn predict_images(
    model: &CameraInvariantModel,
    images: &[RawImage],
    opts: &PredictOptions,
    eval_batch: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(eval_batch.max(1)) {
        out.extend(predict(model, &RawImage::batch(chunk)?, opts)?);
    }
    Ok(out)
}

pub fn score_records(records: &[SampleRecord], preds: &[Prediction], source: ScoreSource) -> Vec<ScoreRecord> {
    records
        .iter()
        .zip(preds)
        .map(|(r, p)| ScoreRecord::new(r.relative_path.clone(), source.of(p), r.is_live(), r.pai_type.clone()))
        .collect()
}

pub fn scores_csv(records: &[SampleRecord], preds: &[Prediction]) -> String {
    score_csv(records.iter().zip(preds).map(|(r, p)| ScoreRow {
        sample_id: &r.relative_path,
        label: r.label,
        pai_type: r.pai_type.as_str(),
        prediction: p,
    }))
}

/// Calibrates τ from forward passes over training images.
pub fn calibrate(model: &CameraInvariantModel, images: &[RawImage], floor: f64, eval_batch: usize) -> Result<CameraCalibration> {
    if model.conv_cam.is_none() {
        return Err(Error::Calibration("model was trained without the camera path".into()));
    }
    let mut probs = Vec::with_capacity(images.len());
    for chunk in images.chunks(eval_batch.max(1)) {
        let out = model.forward(&RawImage::batch(chunk)?)?;
        let o_cam = out.o_cam.as_ref().expect("camera path present");
        probs.extend((0..out.batch()).map(|n| image_camera_probs(o_cam, n)));
    }
    calibrate_tau(&probs, floor)
}

/// Fraction of spatial positions whose camera logit argmax is the true
/// class, for the mixed and the decomposed feature maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraAccuracy {
    pub o_mix: f64,
    pub o_spf: f64,
    pub chance: f64,
}

pub fn camera_accuracy(
    model: &CameraInvariantModel,
    images: &[RawImage],
    classes: &[usize],
    eval_batch: usize,
) -> Result<CameraAccuracy> {
    if model.conv_cam.is_none() {
        return Err(Error::Config("camera accuracy needs the camera path".into()));
    }
    let (mut hit_mix, mut hit_spf, mut total) = (0usize, 0usize, 0usize);
    for (chunk, cls) in images.chunks(eval_batch.max(1)).zip(classes.chunks(eval_batch.max(1))) {
        let out = model.forward(&RawImage::batch(chunk)?)?;
        let (o_mix, o_spf) = (out.o_mix.as_ref().expect("camera path"), out.o_spf.as_ref().expect("camera path"));
        let [n, k, h, w] = o_mix.shape();
        let hw = h * w;
        for (s, &class) in cls.iter().enumerate().take(n) {
            for pos in 0..hw {
                let argmax = |o: &crate::tensor::Tensor| {
                    let v = o.sample(s);
                    (0..k).fold(0, |b, c| if v[c * hw + pos] > v[b * hw + pos] { c } else { b })
                };
                hit_mix += (argmax(o_mix) == class) as usize;
                hit_spf += (argmax(o_spf) == class) as usize;
                total += 1;
            }
        }
    }
    let k = model.n_cameras() as f64;
    Ok(CameraAccuracy {
        o_mix: hit_mix as f64 / total.max(1) as f64,
        o_spf: hit_spf as f64 / total.max(1) as f64,
        chance: 1.0 / k,
    })
}

/// Predictions for a set of records with and without unknown-camera mode.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub records: Vec<SampleRecord>,
    pub plain: Vec<Prediction>,
    pub unknown_mode: Option<Vec<Prediction>>,
}

impl Evaluated {
    pub fn new(
        ds: &Dataset,
        model: &CameraInvariantModel,
        weights: FusionWeights,
        calibration: Option<&CameraCalibration>,
        records: Vec<SampleRecord>,
        eval_batch: usize,
    ) -> Result<Self> {
        let images = ds.images(&records)?;
        let plain = predict_images(model, &images, &PredictOptions { weights, unknown_mode: None }, eval_batch)?;
        let unknown_mode = match calibration {
            Some(cal) => Some(predict_images(
                model,
                &images,
                &PredictOptions { weights, unknown_mode: Some(cal) },
                eval_batch,
            )?),
            None => None,
        };
        Ok(Evaluated {
            records,
            plain,
            unknown_mode,
        })
    }

    pub fn predictions(&self, unknown_mode: bool) -> &[Prediction] {
        match (&self.unknown_mode, unknown_mode) {
            (Some(u), true) => u,
            _ => &self.plain,
        }
    }

    pub fn scores(&self, source: ScoreSource, unknown_mode: bool) -> Vec<ScoreRecord> {
        score_records(&self.records, self.predictions(unknown_mode), source)
    }

    /// Mean of the normalized unknown-camera probability.
    pub fn mean_unknown(&self) -> Option<f64> {
        let u = self.unknown_mode.as_ref()?;
        let n = self.camera_count()?;
        Some(u.iter().map(|p| p.camera_probs[n]).sum::<f64>() / u.len().max(1) as f64)
    }

    fn camera_count(&self) -> Option<usize> {
        self.unknown_mode.as_ref()?.first().map(|p| p.camera_probs.len() - 1)
    }
}

/// Intra-dataset metrics: threshold from the dev split, rates on test.
pub fn evaluate(
    ds: &Dataset,
    ck: &Checkpoint,
    calibration: Option<&CameraCalibration>,
    eval_batch: usize,
) -> Result<(MetricsReport, Evaluated, Evaluated)> {
    let weights = FusionWeights::with_lambda4(ck.config.hp.lambda4);
    let cams = Some(ck.camera_ids.as_slice());
    let dev = Evaluated::new(ds, &ck.model, weights, calibration, ds.records(Split::Dev, cams), eval_batch)?;
    let test = Evaluated::new(ds, &ck.model, weights, calibration, ds.records(Split::Test, cams), eval_batch)?;
    let on = calibration.is_some();
    let report = MetricsReport::dev_test(&dev.scores(ScoreSource::Fused, on), &test.scores(ScoreSource::Fused, on))?;
    Ok((report, dev, test))
}

/// HTER on `test` at the EER threshold of `dev`.
pub fn dev_test_hter(dev: &[ScoreRecord], test: &[ScoreRecord]) -> Result<f64> {
    let (_, thr) = eer(dev)?;
    hter_at(test, thr)
}

/// Training cameras versus held-out cameras.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub train_cameras: Vec<usize>,
    pub test_cameras: Vec<usize>,
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.train_cameras.is_empty() || self.test_cameras.is_empty() {
            return Err(Error::Config("train_cameras and test_cameras must both be non-empty".into()));
        }
        if self.train_cameras.iter().any(|c| self.test_cameras.contains(c)) {
            return Err(Error::Config("train_cameras and test_cameras overlap".into()));
        }
        Ok(())
    }
}

/// A trained model evaluated on known-camera dev/test data and on the
/// held-out cameras.
#[derive(Clone, Debug)]
pub struct CrossEval {
    pub checkpoint: Checkpoint,
    pub calibration: Option<CameraCalibration>,
    pub dev: Evaluated,
    pub known_test: Evaluated,
    pub heldout: Evaluated,
}

impl CrossEval {
    pub fn hter(&self, source: ScoreSource, unknown_mode: bool) -> Result<f64> {
        dev_test_hter(&self.dev.scores(source, unknown_mode), &self.heldout.scores(source, unknown_mode))
    }
}

pub fn cross_eval(ds: &Dataset, cfg: &TrainConfig, protocol: &Protocol, floor: f64, eval_batch: usize) -> Result<CrossEval> {
    protocol.validate()?;
    let data = ds.train_data(Some(&protocol.train_cameras))?;
    info!("cross-eval: training on cameras {:?} ({} samples)", data.camera_ids, data.len());
    let (mut ck, _) = train(cfg, &data)?;
    let calibration = if cfg.ablation.no_cam_id {
        None
    } else {
        Some(calibrate(&ck.model, &data.images, floor, eval_batch)?)
    };
    ck.calibration = calibration;
    let weights = FusionWeights::with_lambda4(cfg.hp.lambda4);
    let cal = calibration.as_ref();
    let train_cams = Some(protocol.train_cameras.as_slice());
    let dev = Evaluated::new(ds, &ck.model, weights, cal, ds.records(Split::Dev, train_cams), eval_batch)?;
    let known_test = Evaluated::new(ds, &ck.model, weights, cal, ds.records(Split::Test, train_cams), eval_batch)?;
    let held = ds.records(Split::Test, Some(&protocol.test_cameras));
    if held.is_empty() {
        return Err(Error::Data(format!("no test samples for cameras {:?}", protocol.test_cameras)));
    }
    let heldout = Evaluated::new(ds, &ck.model, weights, cal, held, eval_batch)?;
    Ok(CrossEval {
        checkpoint: ck,
        calibration,
        dev,
        known_test,
        heldout,
    })
}

/// Cross-camera HTERs for one trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEvalSummary {
    pub seed: u64,
    pub hter_fused: f64,
    pub hter_fused_unknown_mode: Option<f64>,
    pub hter_invariant: f64,
    pub hter_augmentation: f64,
    pub mean_unknown_heldout: Option<f64>,
    pub mean_unknown_known: Option<f64>,
}

impl CrossEval {
    pub fn summary(&self) -> Result<CrossEvalSummary> {
        let unknown = self.calibration.is_some();
        Ok(CrossEvalSummary {
            seed: self.checkpoint.config.seed,
            hter_fused: self.hter(ScoreSource::Fused, false)?,
            hter_fused_unknown_mode: if unknown { Some(self.hter(ScoreSource::Fused, true)?) } else { None },
            hter_invariant: self.hter(ScoreSource::Invariant, false)?,
            hter_augmentation: self.hter(ScoreSource::Augmentation, false)?,
            mean_unknown_heldout: self.heldout.mean_unknown(),
            mean_unknown_known: self.known_test.mean_unknown(),
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub const CROSS_EVAL_HEADER: &str =
    "seed,hter_fused,hter_fused_unknown_mode,hter_invariant,hter_augmentation,mean_unknown_heldout,mean_unknown_known";

pub fn cross_eval_csv(rows: &[CrossEvalSummary]) -> String {
    let mut s = format!("{CROSS_EVAL_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6},{},{}\n",
            r.seed,
            r.hter_fused,
            opt(r.hter_fused_unknown_mode),
            r.hter_invariant,
            r.hter_augmentation,
            opt(r.mean_unknown_heldout),
            opt(r.mean_unknown_known)
        ));
    }
    s
}

/// One row of the branch ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub configuration: &'static str,
    pub ablation: Ablation,
    pub source: ScoreSource,
    pub hter: f64,
    pub dev_eer: f64,
}

/// The ablation grid: each branch with and without the residual filters,
/// fusion without the camera path, and the full fusion. Variants that only
/// differ in a branch that does not affect the scored output share one
/// training run.
pub fn ablate(ds: &Dataset, cfg: &TrainConfig, protocol: &Protocol, floor: f64, eval_batch: usize) -> Result<Vec<AblationRow>> {
    let no_eddf = Ablation {
        no_eddf_branch1: true,
        no_eddf_branch2: true,
        no_cam_id: false,
    };
    let no_cam = Ablation {
        no_cam_id: true,
        ..Ablation::default()
    };
    let grid: [(&'static str, Ablation, ScoreSource); 6] = [
        ("first_branch_without_eddf", no_eddf, ScoreSource::Invariant),
        ("first_branch", Ablation::default(), ScoreSource::Invariant),
        ("second_branch_without_eddf", no_eddf, ScoreSource::Augmentation),
        ("second_branch", Ablation::default(), ScoreSource::Augmentation),
        ("fusion_without_cam_id", no_cam, ScoreSource::Fused),
        ("fusion", Ablation::default(), ScoreSource::Fused),
    ];
    let mut runs: Vec<(Ablation, CrossEval)> = Vec::new();
    let mut rows = Vec::with_capacity(grid.len());
    for (name, ablation, source) in grid {
        if !runs.iter().any(|(a, _)| *a == ablation) {
            let c = TrainConfig {
                ablation,
                ..cfg.clone()
            };
            runs.push((ablation, cross_eval(ds, &c, protocol, floor, eval_batch)?));
        }
        let run = &runs.iter().find(|(a, _)| *a == ablation).expect("just trained").1;
        rows.push(AblationRow {
            configuration: name,
            ablation,
            source,
            hter: run.hter(source, false)?,
            dev_eer: eer(&run.dev.scores(source, false))?.0,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("configuration,hter,dev_eer\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.configuration, r.hter, r.dev_eer));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PaiType;
    use crate::synthdata::{generate_dataset, DatasetConfig};

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = DatasetConfig {
            scenes: 10,
            image_size: 32,
            ..DatasetConfig::default()
        };
        generate_dataset(&cfg, dir).unwrap();
        Dataset::open(dir).unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            input_size: 32,
            width_div: 16,
            gn_groups: 2,
            total_steps: 3,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn records_are_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let r = ds.records(Split::Test, Some(&[2]));
        assert!(!r.is_empty());
        assert!(r.iter().all(|r| r.camera_id == 2 && r.split == Split::Test));
        assert!(r.windows(2).all(|w| w[0].relative_path < w[1].relative_path));
        assert!(matches!(Dataset::open(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn cross_eval_reports_every_column() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let protocol = Protocol {
            train_cameras: vec![0, 1],
            test_cameras: vec![2],
        };
        let run = cross_eval(&ds, &tiny_train(), &protocol, 0.0, 16).unwrap();
        let s = run.summary().unwrap();
        assert!(s.hter_fused_unknown_mode.is_some() && s.mean_unknown_heldout.is_some());
        let csv = cross_eval_csv(&[s]);
        assert_eq!(csv.lines().next().unwrap(), CROSS_EVAL_HEADER);
        assert!(!csv.lines().nth(1).unwrap().contains("NA"));
        for p in run.heldout.predictions(true) {
            assert_eq!(p.camera_probs.len(), 3);
            assert!((p.camera_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let bad = Protocol {
            train_cameras: vec![0, 1],
            test_cameras: vec![1],
        };
        assert!(matches!(cross_eval(&ds, &tiny_train(), &bad, 0.0, 16), Err(Error::Config(_))));
    }

    #[test]
    fn camera_accuracy_is_a_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let data = ds.train_data(None).unwrap();
        let (ck, _) = train(&tiny_train(), &data).unwrap();
        let classes: Vec<usize> = (0..data.len()).map(|i| data.camera_class(i)).collect();
        let acc = camera_accuracy(&ck.model, &data.images, &classes, 16).unwrap();
        for v in [acc.o_mix, acc.o_spf] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((acc.chance - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scores_follow_source() {
        let p = Prediction {
            p_spf: 0.1,
            p_aug: 0.2,
            p_fused: 0.3,
            camera_pred: 1,
            p_unknown: 0.0,
            camera_probs: vec![],
            refined: false,
        };
        let r = SampleRecord {
            relative_path: "a.png".into(),
            camera_id: 0,
            label: 1,
            pai_type: PaiType::None,
            split: Split::Test,
        };
        let s = score_records(&[r.clone()], &[p.clone()], ScoreSource::Augmentation);
        assert_eq!(s[0].score, 0.2);
        assert!(s[0].live);
        assert!(scores_csv(&[r], &[p]).contains("a.png,0.1,0.2,0.3,1,none,1,0"));
    }
}
