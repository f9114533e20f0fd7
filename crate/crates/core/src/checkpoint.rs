//! Self-describing checkpoint files.
//!
//! ```text
//! fasinv-checkpoint 1
//! section <name> <text|f32> <len>
//! <payload>
//! ...
//! end
//! ```
//!
//! Text payloads are `len` UTF-8 bytes; `f32` payloads are `len` little-endian
//! floats. Every payload is followed by a newline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::inference::CameraCalibration;
use crate::model::CameraInvariantModel;
use crate::nn::{Module, Param};
use crate::trainer::{Adam, TrainConfig};

pub const MAGIC: &str = "fasinv-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Sorted ids of the training cameras; class `k` is `camera_ids[k]`.
    pub camera_ids: Vec<usize>,
    pub step: usize,
    pub model: CameraInvariantModel,
    pub optimizer: Option<Adam>,
    pub calibration: Option<CameraCalibration>,
}

enum Payload {
    Text(String),
    Floats(Vec<f32>),
}

fn write_section(out: &mut Vec<u8>, name: &str, payload: &Payload) {
    match payload {
        Payload::Text(s) => {
            out.extend_from_slice(format!("section {name} text {}\n", s.len()).as_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        Payload::Floats(v) => {
            out.extend_from_slice(format!("section {name} f32 {}\n", v.len()).as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.push(b'\n');
}

fn parse_err(section: &str, detail: impl Into<String>) -> Error {
    Error::CheckpointParse {
        section: section.to_string(),
        detail: detail.into(),
    }
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize, section: &str) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err(section, "unexpected end of file"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| parse_err(section, "header is not UTF-8"))
}

fn read_sections(bytes: &[u8]) -> Result<BTreeMap<String, Payload>> {
    let mut pos = 0;
    let header = read_line(bytes, &mut pos, "header")?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| parse_err("header", format!("missing {MAGIC} header")))?;
    let found: u32 = version.parse().map_err(|_| parse_err("header", format!("bad version {version:?}")))?;
    if found != VERSION {
        return Err(Error::CheckpointVersion {
            found,
            expected: VERSION,
        });
    }
    let mut sections = BTreeMap::new();
    loop {
        let line = read_line(bytes, &mut pos, "end")?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [tag, name, kind, len] = parts[..] else {
            return Err(parse_err("header", format!("malformed section line {line:?}")));
        };
        if tag != "section" {
            return Err(parse_err(name, format!("malformed section line {line:?}")));
        }
        let len: usize = len.parse().map_err(|_| parse_err(name, format!("bad length {len:?}")))?;
        let width = match kind {
            "text" => 1,
            "f32" => 4,
            other => return Err(parse_err(name, format!("unknown payload kind {other:?}"))),
        };
        let end = pos
            .checked_add(len.checked_mul(width).ok_or_else(|| parse_err(name, "length overflow"))?)
            .filter(|&e| e < bytes.len())
            .ok_or_else(|| parse_err(name, "truncated payload"))?;
        let raw = &bytes[pos..end];
        if bytes[end] != b'\n' {
            return Err(parse_err(name, "payload not terminated by newline"));
        }
        pos = end + 1;
        let payload = if width == 1 {
            Payload::Text(String::from_utf8(raw.to_vec()).map_err(|_| parse_err(name, "text payload is not UTF-8"))?)
        } else {
            Payload::Floats(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        if sections.insert(name.to_string(), payload).is_some() {
            return Err(parse_err(name, "duplicate section"));
        }
    }
    if pos != bytes.len() {
        return Err(parse_err("end", "trailing bytes after end marker"));
    }
    Ok(sections)
}

fn text<'a>(sections: &'a BTreeMap<String, Payload>, name: &str) -> Result<&'a str> {
    match sections.get(name) {
        Some(Payload::Text(s)) => Ok(s),
        Some(Payload::Floats(_)) => Err(parse_err(name, "expected a text payload")),
        None => Err(parse_err(name, "missing section")),
    }
}

fn floats<'a>(sections: &'a BTreeMap<String, Payload>, name: &str, len: usize) -> Result<&'a [f32]> {
    match sections.get(name) {
        Some(Payload::Floats(v)) if v.len() == len => Ok(v),
        Some(Payload::Floats(v)) => Err(parse_err(name, format!("expected {len} values, found {}", v.len()))),
        Some(Payload::Text(_)) => Err(parse_err(name, "expected an f32 payload")),
        None => Err(parse_err(name, "missing section")),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {VERSION}\n").into_bytes();
        write_section(&mut out, "config", &Payload::Text(self.config.to_map().to_text()));
        let ids = self.camera_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut state = format!("step={}\ncamera_ids={ids}\n", self.step);
        if let Some(adam) = &self.optimizer {
            state.push_str(&format!("adam_t={}\n", adam.t));
        }
        write_section(&mut out, "state", &Payload::Text(state));
        let mut i = 0;
        self.model.visit("", &mut |name, p: &Param| {
            write_section(&mut out, &format!("param:{name}"), &Payload::Floats(p.value.clone()));
            if let Some(adam) = &self.optimizer {
                write_section(&mut out, &format!("adam_m:{name}"), &Payload::Floats(adam.m[i].clone()));
                write_section(&mut out, &format!("adam_v:{name}"), &Payload::Floats(adam.v[i].clone()));
            }
            i += 1;
        });
        if let Some(c) = &self.calibration {
            write_section(&mut out, "calibration", &Payload::Text(c.to_text()));
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let config = TrainConfig::from_map(&ConfigMap::parse(text(&sections, "config")?)?)
            .map_err(|e| parse_err("config", e.to_string()))?;
        let state = ConfigStateText::parse(text(&sections, "state")?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = CameraInvariantModel::new(config.arch(state.camera_ids.len().max(2)), &mut rng)
            .map_err(|e| parse_err("config", e.to_string()))?;
        let mut optimizer = state.adam_t.map(|t| {
            let mut a = Adam::new(&model);
            a.t = t;
            a
        });
        let mut failure = None;
        let mut i = 0;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let result = (|| -> Result<()> {
                let len = p.len();
                p.value.copy_from_slice(floats(&sections, &format!("param:{name}"), len)?);
                if let Some(a) = optimizer.as_mut() {
                    a.m[i].copy_from_slice(floats(&sections, &format!("adam_m:{name}"), len)?);
                    a.v[i].copy_from_slice(floats(&sections, &format!("adam_v:{name}"), len)?);
                }
                Ok(())
            })();
            if let Err(e) = result {
                failure = Some(e);
            }
            i += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let expected = i * if optimizer.is_some() { 3 } else { 1 } + 2;
        let calibration = match sections.get("calibration") {
            None => None,
            Some(_) => Some(
                CameraCalibration::parse(text(&sections, "calibration")?)
                    .map_err(|e| parse_err("calibration", e.to_string()))?,
            ),
        };
        let extra = sections.len() - expected - calibration.is_some() as usize;
        if extra != 0 {
            let known = |n: &str| n == "config" || n == "state" || n == "calibration";
            let mut names = Vec::new();
            model.visit("", &mut |name, _| names.push(name.to_string()));
            let stray = sections
                .keys()
                .find(|k| {
                    !known(k)
                        && !names.iter().any(|n| {
                            **k == format!("param:{n}") || **k == format!("adam_m:{n}") || **k == format!("adam_v:{n}")
                        })
                })
                .cloned()
                .unwrap_or_default();
            return Err(parse_err(&stray, "section does not match the configured architecture"));
        }
        Ok(Checkpoint {
            config,
            camera_ids: state.camera_ids,
            step: state.step,
            model,
            optimizer,
            calibration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Ids of the parameters stored, in file order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.model.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }
}

struct ConfigStateText {
    step: usize,
    camera_ids: Vec<usize>,
    adam_t: Option<u64>,
}

impl ConfigStateText {
    fn parse(text: &str) -> Result<Self> {
        let (mut step, mut ids, mut adam_t) = (None, None, None);
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err("state", format!("bad line {line:?}")))?;
            let bad = || parse_err("state", format!("bad value in {line:?}"));
            match k {
                "step" => step = Some(v.parse().map_err(|_| bad())?),
                "adam_t" => adam_t = Some(v.parse().map_err(|_| bad())?),
                "camera_ids" => {
                    ids = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|s| s.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?
                    })
                }
                other => return Err(parse_err("state", format!("unknown key {other:?}"))),
            }
        }
        Ok(ConfigStateText {
            step: step.ok_or_else(|| parse_err("state", "missing step"))?,
            camera_ids: ids.ok_or_else(|| parse_err("state", "missing camera_ids"))?,
            adam_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    fn sample(ablation: Ablation) -> Checkpoint {
        let config = TrainConfig {
            width_div: 16,
            gn_groups: 2,
            input_size: 32,
            ablation,
            ..TrainConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = CameraInvariantModel::new(config.arch(2), &mut rng).unwrap();
        let mut adam = Adam::new(&model);
        adam.t = 17;
        for (k, m) in adam.m.iter_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(j, v)| *v = (k * 31 + j) as f32 * 1e-3);
        }
        Checkpoint {
            config,
            camera_ids: vec![0, 2],
            step: 17,
            model,
            optimizer: Some(adam),
            calibration: Some(CameraCalibration {
                tau: 0.123456789,
                floor: 0.6,
                n_cameras: 2,
            }),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample(Ablation::default());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let mut ck = sample(Ablation::default());
        ck.optimizer = None;
        ck.calibration = None;
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let missing = dir.path().join("absent.ckpt");
        assert!(matches!(Checkpoint::load(&missing), Err(Error::MissingArtifact(p)) if p == missing));
    }

    #[test]
    fn no_cam_id_omits_camera_modules() {
        let ck = sample(Ablation { no_cam_id: true, ..Ablation::default() });
        let names = ck.param_names();
        assert!(names.iter().all(|n| !n.starts_with("trunk_cam") && !n.starts_with("conv_cam") && !n.starts_with("head_spf")));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.model.trunk_cam.is_none());
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = sample(Ablation::default()).to_bytes();
        for cut in [10, bytes.len() / 3, bytes.len() / 2, bytes.len() - 3] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::CheckpointParse { section, .. }) => assert!(!section.is_empty()),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let bytes = sample(Ablation::default()).to_bytes();
        let mut v2 = b"fasinv-checkpoint 2".to_vec();
        v2.extend_from_slice(&bytes[MAGIC.len() + 2..]);
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"garbage\n"), Err(Error::CheckpointParse { .. })));
    }

    #[test]
    fn architecture_mismatch_names_the_section() {
        let full = sample(Ablation::default());
        let mut bytes = full.to_bytes();
        // flip the ablation flag inside the config text without changing its length
        let pos = bytes.windows(16).position(|w| w == b"no_cam_id = fals").unwrap();
        bytes[pos..pos + 17].copy_from_slice(b"no_cam_id = true ");
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CheckpointParse { section, .. }) => assert!(section.contains("cam") || section.contains("head_spf"), "{section}"),
            other => panic!("{other:?}"),
        }
    }
}
