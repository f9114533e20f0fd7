//! Procedural face-like images with known camera fingerprints and spoof
//! textures.
//!
//! Rendering order is scene → spoof medium → capturing camera. A camera is a
//! per-channel gamma curve followed by multiplicative fixed-pattern noise
//! `I·(1 + a·F)`. Each camera's field `F` is a fixed, seed-determined noise
//! texture with a camera-specific spatial correlation (horizontal, vertical or
//! diagonal streaks, or isotropic grain), scaled per sample by an exposure
//! gain. Prints add fine grain and a slight blur; replays add a sinusoidal
//! moiré pattern.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::PaiType;
use crate::tensor::RawImage;

pub const MANIFEST_HEADER: [&str; 5] = ["relative_path", "camera_id", "label", "pai_type", "split"];
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Splitmix-style mixing of a seed path into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Spatial correlation of a camera's noise field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FingerprintTexture {
    Horizontal,
    Vertical,
    Diagonal,
    Isotropic,
}

impl FingerprintTexture {
    pub fn for_camera(camera_id: usize) -> Self {
        match camera_id % 4 {
            0 => FingerprintTexture::Horizontal,
            1 => FingerprintTexture::Vertical,
            2 => FingerprintTexture::Diagonal,
            _ => FingerprintTexture::Isotropic,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraProfile {
    pub camera_id: usize,
    pub fingerprint_seed: u64,
    pub noise_amplitude: f32,
    pub response_gamma: [f32; 3],
    pub texture: FingerprintTexture,
    /// Block-DCT quantization step; 0 disables it.
    pub dct_step: f32,
}

impl CameraProfile {
    pub fn identity(camera_id: usize) -> Self {
        CameraProfile {
            camera_id,
            fingerprint_seed: 0,
            noise_amplitude: 0.0,
            response_gamma: [1.0; 3],
            texture: FingerprintTexture::Isotropic,
            dct_step: 0.0,
        }
    }

    /// Profile for camera `camera_id` under `master_seed`: gammas uniform in
    /// `[0.8, 1.2]`, texture by camera index.
    pub fn sampled(master_seed: u64, camera_id: usize, noise_amplitude: f32) -> Self {
        let mut rng = rng_for(&[master_seed, 0xCA3E, camera_id as u64]);
        let response_gamma = [0; 3].map(|_| rng.gen_range(0.8f32..1.2));
        CameraProfile {
            camera_id,
            fingerprint_seed: rng.gen(),
            noise_amplitude,
            response_gamma,
            texture: FingerprintTexture::for_camera(camera_id),
            dct_step: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.noise_amplitude) {
            return Err(Error::Config(format!(
                "camera {} noise amplitude {} outside [0, 0.1]",
                self.camera_id, self.noise_amplitude
            )));
        }
        if self.response_gamma.iter().any(|g| !(*g > 0.0)) || self.dct_step < 0.0 {
            return Err(Error::Config(format!("camera {} has invalid gamma or DCT step", self.camera_id)));
        }
        Ok(())
    }

    /// Unit-variance fixed-pattern field, `3 × size × size`.
    pub fn fingerprint(&self, height: usize, width: usize) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(self.fingerprint_seed);
        let mut f = RawImage::filled(3, height, width, 0.0);
        let raw: Vec<f32> = (0..3 * height * width).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let at = |c: usize, y: usize, x: usize| raw[(c * height + y.min(height - 1)) * width + x.min(width - 1)];
        // streak length along the correlated axis
        const TAPS: [f32; 5] = [1.0, 1.0, 1.0, 1.0, 1.0];
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let v = match self.texture {
                        FingerprintTexture::Horizontal => TAPS.iter().enumerate().map(|(i, t)| t * at(c, y, x + i)).sum(),
                        FingerprintTexture::Vertical => TAPS.iter().enumerate().map(|(i, t)| t * at(c, y + i, x)).sum(),
                        FingerprintTexture::Diagonal => TAPS.iter().enumerate().map(|(i, t)| t * at(c, y + i, x + i)).sum(),
                        FingerprintTexture::Isotropic => {
                            at(c, y, x) + 0.5 * (at(c, y + 1, x) + at(c, y, x + 1)) + 0.25 * at(c, y + 1, x + 1)
                        }
                    };
                    f.set(c, y, x, v);
                }
            }
        }
        normalize_unit(&mut f);
        f
    }
}

fn normalize_unit(img: &mut RawImage) {
    let n = img.data().len() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in img.data_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpoofProfile {
    Print {
        grain_amplitude: f32,
        /// Gaussian width of the grain in pixels.
        grain_scale: f32,
        /// Blend factor toward a 3×3 box blur.
        blur: f32,
        seed: u64,
    },
    Replay {
        /// Cycles per pixel along x and y.
        frequency: (f32, f32),
        amplitude: f32,
        phase: f32,
    },
}

impl SpoofProfile {
    pub fn pai_type(&self) -> PaiType {
        match self {
            SpoofProfile::Print { .. } => PaiType::Print,
            SpoofProfile::Replay { .. } => PaiType::Replay,
        }
    }
}

/// Knobs for the spoof textures drawn per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SpoofStrength {
    pub print_grain: f32,
    pub print_blur: f32,
    pub replay_amplitude: f32,
    /// Range of the moiré frequency magnitude, cycles per pixel.
    pub replay_frequency: (f32, f32),
}

impl Default for SpoofStrength {
    fn default() -> Self {
        SpoofStrength {
            print_grain: 0.04,
            print_blur: 0.5,
            replay_amplitude: 0.04,
            replay_frequency: (0.12, 0.3),
        }
    }
}

impl SpoofStrength {
    pub fn draw(&self, pai: &PaiType, rng: &mut impl Rng) -> Result<Option<SpoofProfile>> {
        Ok(match pai {
            PaiType::None => None,
            PaiType::Print => Some(SpoofProfile::Print {
                grain_amplitude: self.print_grain,
                grain_scale: 0.7,
                blur: self.print_blur,
                seed: rng.gen(),
            }),
            PaiType::Replay => {
                let (lo, hi) = self.replay_frequency;
                let mag = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let angle = rng.gen_range(0.0..std::f32::consts::PI);
                Some(SpoofProfile::Replay {
                    frequency: (mag * angle.cos(), mag * angle.sin()),
                    amplitude: self.replay_amplitude,
                    phase: rng.gen_range(0.0..std::f32::consts::TAU),
                })
            }
            PaiType::Other(s) => return Err(Error::Data(format!("no spoof renderer for PAI type {s:?}"))),
        })
    }
}

/// Smooth face-like scene: gradient background, skin ellipse, two eyes and a
/// mouth, all with seed-dependent placement and colour.
pub fn render_base_scene(scene_seed: u64, size: usize) -> RawImage {
    let mut rng = rng_for(&[scene_seed, 0x5CE4E]);
    let s = size as f32;
    let bg0: [f32; 3] = [0; 3].map(|_| rng.gen_range(0.15..0.75));
    let bg1: [f32; 3] = [0; 3].map(|_| rng.gen_range(0.15..0.75));
    let bg_angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let skin_base = rng.gen_range(0.35..0.8f32);
    let skin = [skin_base * 1.05, skin_base * rng.gen_range(0.75..0.9), skin_base * rng.gen_range(0.6..0.8)];
    let (cx, cy) = (s * rng.gen_range(0.42..0.58), s * rng.gen_range(0.42..0.58));
    let (rx, ry) = (s * rng.gen_range(0.22..0.3), s * rng.gen_range(0.3..0.38));
    let eye_dx = rx * rng.gen_range(0.35..0.5);
    let eye_y = cy - ry * rng.gen_range(0.15..0.3);
    let eye_r = s * rng.gen_range(0.035..0.055);
    let mouth_y = cy + ry * rng.gen_range(0.35..0.5);
    let mouth_w = rx * rng.gen_range(0.3..0.5);
    let (ca, sa) = (bg_angle.cos(), bg_angle.sin());
    let soft = |d: f32, edge: f32| 1.0 / (1.0 + (d / edge).exp());
    RawImage::from_fn(size, size, |c, y, x| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let t = (((fx / s - 0.5) * ca + (fy / s - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
        let mut v = bg0[c] * (1.0 - t) + bg1[c] * t;
        let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
        let face = soft((e.sqrt() - 1.0) * rx, 1.0);
        // gentle shading across the face
        let shade = 1.0 - 0.15 * ((fx - cx) / rx);
        v = v * (1.0 - face) + skin[c] * shade * face;
        for ex in [cx - eye_dx, cx + eye_dx] {
            let d = ((fx - ex).powi(2) + (fy - eye_y).powi(2)).sqrt();
            v *= 1.0 - 0.75 * soft(d - eye_r, 0.7) * face;
        }
        let md = ((fx - cx) / mouth_w).powi(2) + ((fy - mouth_y) / (0.3 * mouth_w)).powi(2);
        v *= 1.0 - 0.45 * soft((md.sqrt() - 1.0) * mouth_w * 0.3, 0.5) * face;
        v.clamp(0.0, 1.0)
    })
}

fn box_blur(img: &RawImage) -> RawImage {
    let (h, w) = (img.height(), img.width());
    RawImage::from_fn(h, w, |c, y, x| {
        let mut acc = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += img.get(c, yy, xx);
            }
        }
        acc / 9.0
    })
}

fn gaussian_blur(img: &RawImage, sigma: f32) -> RawImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = taps.iter().sum();
    let (h, w) = (img.height(), img.width());
    let pass = |src: &RawImage, horizontal: bool| {
        RawImage::from_fn(h, w, |c, y, x| {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let o = k as isize - r;
                let (yy, xx) = if horizontal {
                    (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                } else {
                    ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                };
                acc += t * src.get(c, yy as usize, xx as usize);
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

pub fn apply_spoof(image: &RawImage, spoof: &SpoofProfile) -> RawImage {
    let (h, w) = (image.height(), image.width());
    let mut out = match spoof {
        SpoofProfile::Print {
            grain_amplitude,
            grain_scale,
            blur,
            seed,
        } => {
            if *grain_amplitude == 0.0 && *blur == 0.0 {
                return image.clone();
            }
            let blurred = box_blur(image);
            let mut base = image.clone();
            for (b, s) in base.data_mut().iter_mut().zip(blurred.data()) {
                *b = *b * (1.0 - blur) + s * blur;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            // monochrome paper grain
            let mut grain = RawImage::filled(3, h, w, 0.0);
            let plane: Vec<f32> = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            for c in 0..3 {
                for i in 0..h * w {
                    grain.data_mut()[c * h * w + i] = plane[i];
                }
            }
            let mut grain = gaussian_blur(&grain, *grain_scale);
            normalize_unit(&mut grain);
            for (b, g) in base.data_mut().iter_mut().zip(grain.data()) {
                *b += grain_amplitude * g;
            }
            base
        }
        SpoofProfile::Replay {
            frequency: (fx, fy),
            amplitude,
            phase,
        } => {
            if *amplitude == 0.0 {
                return image.clone();
            }
            let tau = std::f32::consts::TAU;
            RawImage::from_fn(h, w, |c, y, x| {
                // sub-pixel colour offsets mimic screen subpixels
                let p = tau * (fx * x as f32 + fy * y as f32) + phase + c as f32 * 0.4;
                image.get(c, y, x) + amplitude * p.sin()
            })
        }
    };
    out.clamp_unit();
    out
}

fn dct_basis(n: usize) -> Vec<f32> {
    let mut b = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f32).sqrt() } else { (2.0 / n as f32).sqrt() };
        for i in 0..n {
            b[k * n + i] = scale * ((std::f32::consts::PI / n as f32) * (i as f32 + 0.5) * k as f32).cos();
        }
    }
    b
}

/// 8×8 block DCT with uniform quantization, coarser for higher frequencies.
fn dct_quantize(img: &mut RawImage, step: f32) {
    const N: usize = 8;
    let basis = dct_basis(N);
    let (h, w) = (img.height(), img.width());
    let mut block = [0.0f32; N * N];
    let mut tmp = [0.0f32; N * N];
    for c in 0..3 {
        for by in (0..h - h % N).step_by(N) {
            for bx in (0..w - w % N).step_by(N) {
                for y in 0..N {
                    for x in 0..N {
                        block[y * N + x] = img.get(c, by + y, bx + x);
                    }
                }
                // coefficients = B · X · Bᵀ
                for k in 0..N {
                    for x in 0..N {
                        tmp[k * N + x] = (0..N).map(|y| basis[k * N + y] * block[y * N + x]).sum();
                    }
                }
                for k in 0..N {
                    for l in 0..N {
                        let coef: f32 = (0..N).map(|x| tmp[k * N + x] * basis[l * N + x]).sum();
                        let q = step * (1.0 + (k + l) as f32);
                        block[k * N + l] = (coef / q).round() * q;
                    }
                }
                for y in 0..N {
                    for l in 0..N {
                        tmp[y * N + l] = (0..N).map(|k| basis[k * N + y] * block[k * N + l]).sum();
                    }
                }
                for y in 0..N {
                    for x in 0..N {
                        let v: f32 = (0..N).map(|l| tmp[y * N + l] * basis[l * N + x]).sum();
                        img.set(c, by + y, bx + x, v);
                    }
                }
            }
        }
    }
}

pub fn apply_camera(image: &RawImage, cam: &CameraProfile) -> RawImage {
    let mut out = image.clone();
    let (h, w) = (image.height(), image.width());
    for c in 0..3 {
        let g = cam.response_gamma[c];
        if g != 1.0 {
            for v in &mut out.data_mut()[c * h * w..(c + 1) * h * w] {
                *v = v.max(0.0).powf(g);
            }
        }
    }
    if cam.noise_amplitude > 0.0 {
        let f = cam.fingerprint(h, w);
        for (v, n) in out.data_mut().iter_mut().zip(f.data()) {
            *v *= 1.0 + cam.noise_amplitude * n;
        }
    }
    if cam.dct_step > 0.0 {
        dct_quantize(&mut out, cam.dct_step);
    }
    out.clamp_unit();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub relative_path: String,
    pub camera_id: usize,
    pub label: u8,
    pub pai_type: PaiType,
    pub split: Split,
}

impl SampleRecord {
    pub fn is_live(&self) -> bool {
        self.label == 1
    }

    /// Scene number encoded in the file name (`…/s00042_print.png`).
    pub fn scene(&self) -> Option<u64> {
        let name = self.relative_path.rsplit('/').next()?;
        name.strip_prefix('s')?.split('_').next()?.parse().ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.relative_path.as_str(),
                &r.camera_id.to_string(),
                &r.label.to_string(),
                r.pai_type.as_str(),
                r.split.as_str(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Data(format!("manifest header {header:?} != {MANIFEST_HEADER:?}")));
        }
        let mut records = Vec::new();
        for (i, row) in r.records().enumerate() {
            let row = row.map_err(csv_err)?;
            let field = |k: usize| row.get(k).unwrap_or("");
            let bad = |what: &str| Error::Data(format!("manifest row {}: bad {what}", i + 2));
            let label: u8 = field(2).parse().map_err(|_| bad("label"))?;
            let pai_type: PaiType = field(3).parse()?;
            if label > 1 || (label == 1) != (pai_type == PaiType::None) {
                return Err(bad("label/pai_type combination"));
            }
            records.push(SampleRecord {
                relative_path: field(0).to_string(),
                camera_id: field(1).parse().map_err(|_| bad("camera_id"))?,
                label,
                pai_type,
                split: field(4).parse()?,
            });
        }
        Ok(Manifest { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read(path)?)
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn cameras(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.camera_id).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub master_seed: u64,
    pub n_cameras: usize,
    pub scenes: usize,
    /// Fractions of scenes in train and dev; the rest is test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub image_size: usize,
    pub noise_amplitude: f32,
    /// Per-camera amplitude overrides, by camera id.
    pub camera_amplitudes: Vec<f32>,
    /// Each sample's noise amplitude is scaled by a gain uniform in
    /// `[1 - noise_jitter, 1 + noise_jitter]`.
    pub noise_jitter: f32,
    pub dct_step: f32,
    pub pai_types: Vec<PaiType>,
    pub spoof: SpoofStrength,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            master_seed: 0,
            n_cameras: 3,
            scenes: 100,
            train_fraction: 0.6,
            dev_fraction: 0.2,
            image_size: 64,
            noise_amplitude: 0.05,
            camera_amplitudes: Vec::new(),
            noise_jitter: 0.5,
            dct_step: 0.0,
            pai_types: vec![PaiType::Print, PaiType::Replay],
            spoof: SpoofStrength::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 || self.scenes < 3 || self.image_size < 8 {
            return Err(Error::Config("need ≥1 camera, ≥3 scenes and images of at least 8 pixels".into()));
        }
        if !(0.0..1.0).contains(&self.noise_jitter) {
            return Err(Error::Config(format!("noise_jitter {} outside [0, 1)", self.noise_jitter)));
        }
        let f = (self.train_fraction, self.dev_fraction);
        if !(f.0 > 0.0 && f.1 > 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::Config(format!("split fractions {f:?} must be positive and sum below 1")));
        }
        if self.pai_types.is_empty() || self.pai_types.contains(&PaiType::None) {
            return Err(Error::Config("pai_types must list at least one attack type".into()));
        }
        for c in 0..self.n_cameras {
            self.camera(c).validate()?;
        }
        Ok(())
    }

    pub fn camera(&self, camera_id: usize) -> CameraProfile {
        let amp = self.camera_amplitudes.get(camera_id).copied().unwrap_or(self.noise_amplitude);
        let mut cam = CameraProfile::sampled(self.master_seed, camera_id, amp);
        cam.dct_step = self.dct_step;
        cam
    }

    pub fn scene_split(&self, scene: usize) -> Split {
        let n_train = ((self.scenes as f64) * self.train_fraction).round() as usize;
        let n_dev = ((self.scenes as f64) * self.dev_fraction).round() as usize;
        if scene < n_train {
            Split::Train
        } else if scene < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        }
    }

    fn scene_seed(&self, scene: usize) -> u64 {
        derive_seed(&[self.master_seed, 0x5EED, scene as u64])
    }

    /// Renders one sample in memory.
    pub fn render(&self, scene: usize, camera_id: usize, pai: &PaiType) -> Result<RawImage> {
        let base = render_base_scene(self.scene_seed(scene), self.image_size);
        let pai_code = match pai {
            PaiType::None => 0,
            PaiType::Print => 1,
            PaiType::Replay => 2,
            PaiType::Other(_) => 3,
        };
        let mut rng = rng_for(&[self.master_seed, scene as u64, camera_id as u64, pai_code]);
        let medium = match self.spoof.draw(pai, &mut rng)? {
            Some(s) => apply_spoof(&base, &s),
            None => base,
        };
        let mut cam = self.camera(camera_id);
        if self.noise_jitter > 0.0 {
            cam.noise_amplitude *= rng.gen_range(1.0 - self.noise_jitter..=1.0 + self.noise_jitter);
        }
        Ok(apply_camera(&medium, &cam))
    }

    pub fn sample_path(split: Split, camera_id: usize, scene: usize, pai: &PaiType) -> String {
        format!("{split}/cam{camera_id}/s{scene:05}_{pai}.png")
    }
}

/// Writes every image plus `manifest.csv` under `out_dir`; returns the
/// manifest.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut classes = vec![PaiType::None];
    classes.extend(config.pai_types.iter().cloned());
    let mut records = Vec::new();
    for scene in 0..config.scenes {
        let split = config.scene_split(scene);
        for camera_id in 0..config.n_cameras {
            for pai in &classes {
                let rel = DatasetConfig::sample_path(split, camera_id, scene, pai);
                let img = config.render(scene, camera_id, pai)?;
                let path = out_dir.join(&rel);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                save_png(&img, &path)?;
                records.push(SampleRecord {
                    relative_path: rel,
                    camera_id,
                    label: (*pai == PaiType::None) as u8,
                    pai_type: pai.clone(),
                    split,
                });
            }
        }
    }
    let manifest = Manifest { records };
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest.to_csv()?)?;
    Ok(manifest)
}

/// 8-bit RGB PNG.
pub fn save_png(img: &RawImage, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::dim("save_png", format!("expected 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Data("PNG too large".into()))?];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (png::ColorType::Rgba, png::BitDepth::Eight) => 4,
        other => return Err(Error::Data(format!("{}: unsupported PNG format {other:?}", path.display()))),
    };
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = buf[(y * w + x) * stride + c] as f32 / 255.0;
            }
        }
    }
    RawImage::new(3, h, w, data)
}

/// Image of a manifest row, relative to the dataset root.
pub fn record_path(root: &Path, record: &SampleRecord) -> PathBuf {
    root.join(&record.relative_path)
}
