//! Flat `key = value` configuration with command-line overrides.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so
//! overrides are simply applied after the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::metrics::PaiType;
use crate::model::Ablation;
use crate::synthdata::{DatasetConfig, SpoofStrength};

/// Every key any command understands.
pub const KNOWN_KEYS: &[&str] = &[
    // dataset
    "master_seed",
    "n_cameras",
    "scenes",
    "train_fraction",
    "dev_fraction",
    "image_size",
    "noise_amplitude",
    "camera_amplitudes",
    "noise_jitter",
    "dct_step",
    "pai_types",
    "print_grain",
    "print_blur",
    "replay_amplitude",
    "replay_freq_min",
    "replay_freq_max",
    // training
    "seed",
    "batch_size",
    "lr0",
    "decay_factor",
    "decay_start",
    "decay_every",
    "total_steps",
    "input_size",
    "width_div",
    "gn_groups",
    "no_eddf_branch1",
    "no_eddf_branch2",
    "no_cam_id",
    "alpha1",
    "alpha2",
    "gamma",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "train_cameras",
    "test_cameras",
    "augment",
    "log_every",
    "checkpoint_every",
    // inference and experiments
    "unknown_mode",
    "floor",
    "eval_batch",
    "seeds",
    // paths
    "data_dir",
    "out_dir",
    "checkpoint",
    "calibration",
    "split",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            map.set(k.trim(), v.trim())?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets a key, rejecting names outside [`KNOWN_KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim().trim_start_matches("--"), v.trim())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(|s| s.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {v:?} for key {key}"))),
            },
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list entry {s:?} for key {key}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl DatasetConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let d = DatasetConfig::default();
        let s = SpoofStrength::default();
        let cfg = DatasetConfig {
            master_seed: map.get("master_seed", d.master_seed)?,
            n_cameras: map.get("n_cameras", d.n_cameras)?,
            scenes: map.get("scenes", d.scenes)?,
            train_fraction: map.get("train_fraction", d.train_fraction)?,
            dev_fraction: map.get("dev_fraction", d.dev_fraction)?,
            image_size: map.get("image_size", d.image_size)?,
            noise_amplitude: map.get("noise_amplitude", d.noise_amplitude)?,
            camera_amplitudes: map.get_list("camera_amplitudes")?.unwrap_or_default(),
            noise_jitter: map.get("noise_jitter", d.noise_jitter)?,
            dct_step: map.get("dct_step", d.dct_step)?,
            pai_types: map.get_list::<PaiType>("pai_types")?.unwrap_or(d.pai_types),
            spoof: SpoofStrength {
                print_grain: map.get("print_grain", s.print_grain)?,
                print_blur: map.get("print_blur", s.print_blur)?,
                replay_amplitude: map.get("replay_amplitude", s.replay_amplitude)?,
                replay_frequency: (
                    map.get("replay_freq_min", s.replay_frequency.0)?,
                    map.get("replay_freq_max", s.replay_frequency.1)?,
                ),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::default();
        let pais: Vec<&str> = self.pai_types.iter().map(PaiType::as_str).collect();
        for (k, v) in [
            ("master_seed", self.master_seed.to_string()),
            ("n_cameras", self.n_cameras.to_string()),
            ("scenes", self.scenes.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("dev_fraction", self.dev_fraction.to_string()),
            ("image_size", self.image_size.to_string()),
            ("noise_amplitude", self.noise_amplitude.to_string()),
            ("camera_amplitudes", join_list(&self.camera_amplitudes)),
            ("noise_jitter", self.noise_jitter.to_string()),
            ("dct_step", self.dct_step.to_string()),
            ("pai_types", pais.join(",")),
            ("print_grain", self.spoof.print_grain.to_string()),
            ("print_blur", self.spoof.print_blur.to_string()),
            ("replay_amplitude", self.spoof.replay_amplitude.to_string()),
            ("replay_freq_min", self.spoof.replay_frequency.0.to_string()),
            ("replay_freq_max", self.spoof.replay_frequency.1.to_string()),
        ] {
            m.set(k, &v).expect("known key");
        }
        m
    }
}

impl HyperParams {
    /// `defaults`, overridden by any keys present.
    pub fn from_map(map: &ConfigMap, d: HyperParams) -> Result<Self> {
        let hp = HyperParams {
            alpha1: map.get("alpha1", d.alpha1)?,
            alpha2: map.get("alpha2", d.alpha2)?,
            gamma: map.get("gamma", d.gamma)?,
            lambda1: map.get("lambda1", d.lambda1)?,
            lambda2: map.get("lambda2", d.lambda2)?,
            lambda3: map.get("lambda3", d.lambda3)?,
            lambda4: map.get("lambda4", d.lambda4)?,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn write_map(&self, m: &mut ConfigMap) {
        for (k, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            m.set(k, &v.to_string()).expect("known key");
        }
    }
}

impl Ablation {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        Ok(Ablation {
            no_eddf_branch1: map.get_bool("no_eddf_branch1", false)?,
            no_eddf_branch2: map.get_bool("no_eddf_branch2", false)?,
            no_cam_id: map.get_bool("no_cam_id", false)?,
        })
    }

    pub fn write_map(&self, m: &mut ConfigMap) {
        m.set("no_eddf_branch1", &self.no_eddf_branch1.to_string()).expect("known key");
        m.set("no_eddf_branch2", &self.no_eddf_branch2.to_string()).expect("known key");
        m.set("no_cam_id", &self.no_cam_id.to_string()).expect("known key");
    }
}
