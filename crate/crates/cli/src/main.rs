//! `fasinv`: dataset generation, training, calibration and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use fasinv_core::checkpoint::Checkpoint;
use fasinv_core::config::ConfigMap;
use fasinv_core::experiments::{
    ablate, ablation_csv, calibrate, cross_eval, cross_eval_csv, evaluate, predict_images, scores_csv, Dataset,
    Protocol, DEFAULT_EVAL_BATCH,
};
use fasinv_core::inference::{CameraCalibration, FusionWeights, PredictOptions, SELECTION_FLOOR};
use fasinv_core::synthdata::{generate_dataset, sha256_hex, DatasetConfig, Split, MANIFEST_FILE};
use fasinv_core::trainer::{log_csv, TrainConfig, Trainer};
use fasinv_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fasinv", version, about = "Camera-invariant face anti-spoofing experiments")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets `seed` (and `master_seed` for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-camera dataset.
    GenData(Overrides),
    /// Train a model and write its checkpoint and loss log.
    Train(Overrides),
    /// Calibrate the unknown-camera constant on training images.
    CalibrateTau(Overrides),
    /// Dev/test metrics and score files for a checkpoint.
    Eval(Overrides),
    /// Train on a camera subset and evaluate on held-out cameras.
    CrossEval(Overrides),
    /// Branch ablation table under the cross-camera protocol.
    Ablate(Overrides),
    /// Score CSV for one split.
    ExportScores(Overrides),
}

#[derive(clap::Args, Debug)]
struct Overrides {
    /// `--key=value` assignments applied after the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    assignments: Vec<String>,
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData(o)
            | Command::Train(o)
            | Command::CalibrateTau(o)
            | Command::Eval(o)
            | Command::CrossEval(o)
            | Command::Ablate(o)
            | Command::ExportScores(o) => &o.assignments,
        }
    }
}

/// Effective configuration plus resolved paths.
struct Ctx {
    map: ConfigMap,
    out_dir: PathBuf,
}

impl Ctx {
    fn build(cli: &Cli) -> Result<Self> {
        let mut map = match &cli.config {
            Some(p) => ConfigMap::load(p)?,
            None => ConfigMap::default(),
        };
        if let Some(seed) = cli.seed {
            map.set("seed", &seed.to_string())?;
            if matches!(cli.command, Command::GenData(_)) {
                map.set("master_seed", &seed.to_string())?;
            }
        }
        if let Some(dir) = &cli.out_dir {
            map.set("out_dir", &dir.display().to_string())?;
        }
        for a in cli.command.overrides() {
            map.apply_override(a)?;
        }
        let default_out = if matches!(cli.command, Command::GenData(_)) { "data" } else { "out" };
        let out_dir = PathBuf::from(map.get_str("out_dir").unwrap_or(default_out));
        Ok(Ctx { map, out_dir })
    }

    fn path(&self, key: &str, default: impl FnOnce() -> PathBuf) -> PathBuf {
        self.map.get_str(key).map(PathBuf::from).unwrap_or_else(default)
    }

    fn data_dir(&self) -> PathBuf {
        self.path("data_dir", || PathBuf::from("data"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.path("checkpoint", || self.out_dir.join("checkpoint.ckpt"))
    }

    fn calibration_path(&self) -> PathBuf {
        self.path("calibration", || self.out_dir.join("calibration.txt"))
    }

    fn eval_batch(&self) -> Result<usize> {
        self.map.get("eval_batch", DEFAULT_EVAL_BATCH)
    }

    fn floor(&self) -> Result<f64> {
        self.map.get("floor", SELECTION_FLOOR)
    }

    fn protocol(&self) -> Result<Protocol> {
        Ok(Protocol {
            train_cameras: self.map.get_list("train_cameras")?.unwrap_or_else(|| vec![0, 1]),
            test_cameras: self.map.get_list("test_cameras")?.unwrap_or_else(|| vec![2]),
        })
    }

    /// Creates the output directory and echoes the effective configuration.
    fn prepare_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join("effective_config.txt"), self.map.to_text())?;
        Ok(())
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out_dir.join(name);
        std::fs::write(&p, contents)?;
        println!("wrote {}", p.display());
        Ok(p)
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = DatasetConfig::from_map(&ctx.map)?;
    ctx.prepare_out()?;
    let manifest = generate_dataset(&cfg, &ctx.out_dir)?;
    let bytes = std::fs::read(ctx.out_dir.join(MANIFEST_FILE))?;
    println!("manifest rows {}", manifest.records.len());
    println!("manifest sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = TrainConfig::from_map(&ctx.map)?;
    let ds = Dataset::open(&ctx.data_dir())?;
    let data = ds.train_data(cfg.train_cameras.as_deref())?;
    ctx.prepare_out()?;
    info!("training on {} samples from cameras {:?}", data.len(), data.camera_ids);
    let mut trainer = Trainer::new(cfg, &data)?;
    let out_dir = ctx.out_dir.clone();
    let log = trainer.run(|ck| {
        let p = out_dir.join(format!("checkpoint_step{}.ckpt", ck.step));
        info!("checkpoint {}", p.display());
        ck.save(&p)
    })?;
    let ck = trainer.checkpoint();
    ck.save(&ctx.checkpoint_path())?;
    println!("wrote {}", ctx.checkpoint_path().display());
    ctx.write("train_log.csv", log_csv(&log))?;
    if let Some(last) = log.last() {
        println!("final step {} total loss {:.6}", last.step, last.total);
    }
    Ok(())
}

fn load_calibration(ctx: &Ctx, ck: &Checkpoint) -> Result<Option<CameraCalibration>> {
    if !ctx.map.get_bool("unknown_mode", false)? {
        return Ok(None);
    }
    if ctx.map.get_str("calibration").is_none() {
        if let Some(c) = ck.calibration {
            return Ok(Some(c));
        }
    }
    CameraCalibration::load(&ctx.calibration_path()).map(Some)
}

fn calibrate_cmd(ctx: &Ctx) -> Result<()> {
    let ck = Checkpoint::load(&ctx.checkpoint_path())?;
    let ds = Dataset::open(&ctx.data_dir())?;
    let data = ds.train_data(Some(&ck.camera_ids))?;
    ctx.prepare_out()?;
    let cal = calibrate(&ck.model, &data.images, ctx.floor()?, ctx.eval_batch()?)?;
    println!("tau {}", cal.tau);
    ctx.write("calibration.txt", cal.to_text())?;
    Ok(())
}

fn eval_cmd(ctx: &Ctx) -> Result<()> {
    let ck = Checkpoint::load(&ctx.checkpoint_path())?;
    let cal = load_calibration(ctx, &ck)?;
    let ds = Dataset::open(&ctx.data_dir())?;
    ctx.prepare_out()?;
    let (report, dev, test) = evaluate(&ds, &ck, cal.as_ref(), ctx.eval_batch()?)?;
    let on = cal.is_some();
    print!("{}", report.to_text());
    ctx.write("report.txt", report.to_text())?;
    ctx.write("metrics.csv", report.to_csv())?;
    ctx.write("scores_dev.csv", scores_csv(&dev.records, dev.predictions(on)))?;
    ctx.write("scores_test.csv", scores_csv(&test.records, test.predictions(on)))?;
    Ok(())
}

fn seeds(ctx: &Ctx, cfg: &TrainConfig) -> Result<Vec<u64>> {
    Ok(ctx.map.get_list("seeds")?.unwrap_or_else(|| vec![cfg.seed]))
}

fn cross_eval_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = TrainConfig::from_map(&ctx.map)?;
    let protocol = ctx.protocol()?;
    protocol.validate()?;
    let ds = Dataset::open(&ctx.data_dir())?;
    ctx.prepare_out()?;
    let mut rows = Vec::new();
    for seed in seeds(ctx, &cfg)? {
        let c = TrainConfig { seed, ..cfg.clone() };
        let run = cross_eval(&ds, &c, &protocol, ctx.floor()?, ctx.eval_batch()?)?;
        run.checkpoint.save(&ctx.out_dir.join(format!("cross_eval_seed{seed}.ckpt")))?;
        rows.push(run.summary()?);
    }
    let csv = cross_eval_csv(&rows);
    print!("{csv}");
    ctx.write("cross_eval.csv", csv)?;
    Ok(())
}

fn ablate_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = TrainConfig::from_map(&ctx.map)?;
    let protocol = ctx.protocol()?;
    let ds = Dataset::open(&ctx.data_dir())?;
    ctx.prepare_out()?;
    let rows = ablate(&ds, &cfg, &protocol, ctx.floor()?, ctx.eval_batch()?)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    ctx.write("ablation.csv", csv)?;
    Ok(())
}

fn export_scores_cmd(ctx: &Ctx) -> Result<()> {
    let split: Split = ctx.map.get_str("split").unwrap_or("test").parse()?;
    let ck = Checkpoint::load(&ctx.checkpoint_path())?;
    let cal = load_calibration(ctx, &ck)?;
    let ds = Dataset::open(&ctx.data_dir())?;
    let records = ds.records(split, None);
    if records.is_empty() {
        return Err(Error::Data(format!("split {split} has no samples in the manifest")));
    }
    ctx.prepare_out()?;
    let weights = FusionWeights::with_lambda4(ck.config.hp.lambda4);
    println!(
        "fusion weights w_inv={} w_aug={} unknown_mode_w_aug={}",
        weights.w_inv, weights.w_aug, weights.unknown_mode_w_aug
    );
    let images = ds.images(&records)?;
    let opts = PredictOptions {
        weights,
        unknown_mode: cal.as_ref(),
    };
    let preds = predict_images(&ck.model, &images, &opts, ctx.eval_batch()?)?;
    ctx.write(&format!("scores_{split}.csv"), scores_csv(&records, &preds))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::build(cli)?;
    match &cli.command {
        Command::GenData(_) => gen_data(&ctx),
        Command::Train(_) => train_cmd(&ctx),
        Command::CalibrateTau(_) => calibrate_cmd(&ctx),
        Command::Eval(_) => eval_cmd(&ctx),
        Command::CrossEval(_) => cross_eval_cmd(&ctx),
        Command::Ablate(_) => ablate_cmd(&ctx),
        Command::ExportScores(_) => export_scores_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn ctx(args: &[&str]) -> Result<Ctx> {
        Ctx::build(&Cli::try_parse_from(args).expect("parses"))
    }

    #[test]
    fn overrides_win_over_flags() {
        let c = ctx(&["fasinv", "--seed", "3", "train", "--seed=9", "lr0=0.01"]).unwrap();
        assert_eq!(c.map.get("seed", 0u64).unwrap(), 9);
        assert_eq!(c.map.get("lr0", 0.0f64).unwrap(), 0.01);
        assert_eq!(c.out_dir, Path::new("out"));
    }

    #[test]
    fn gen_data_seed_sets_master_seed() {
        let c = ctx(&["fasinv", "gen-data", "--out-dir", "d", "--scenes=3"]).unwrap();
        assert_eq!(c.out_dir, Path::new("d"));
        assert_eq!(c.map.get("scenes", 0usize).unwrap(), 3);
        let c = ctx(&["fasinv", "--seed", "4", "gen-data"]).unwrap();
        assert_eq!(c.map.get("master_seed", 0u64).unwrap(), 4);
        assert_eq!(c.out_dir, Path::new("data"));
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        match ctx(&["fasinv", "train", "--bogus=1"]) {
            Err(e) => assert_eq!(e.exit_code(), 2),
            Ok(_) => panic!("accepted unknown key"),
        }
    }
}
