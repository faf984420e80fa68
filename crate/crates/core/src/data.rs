//! Synthetic multi-camera re-identification dataset.
//!
//! Each identity is a fixed low-frequency pattern; each camera applies a
//! fixed intensity map and a small geometric shift; each sample adds its
//! own noise. Test identities are disjoint from training identities, and
//! per test identity the first sample of every camera becomes a query
//! while the rest go to the gallery.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::stream::{derive_seed, stream, TAG_DATA_CAMERA, TAG_DATA_IDENTITY, TAG_DATA_NOISE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::invalid("split", other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::invalid("difficulty", other.to_string())),
        }
    }

    fn factor(&self) -> f64 {
        match self {
            Difficulty::Easy => 1.0,
            Difficulty::Hard => 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub cameras: usize,
    pub samples_per_id_per_camera: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub camera_strength: f64,
    pub noise_level: f64,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_train_ids: 12,
            num_test_ids: 8,
            cameras: 3,
            samples_per_id_per_camera: 4,
            height: 32,
            width: 16,
            latent_dim: 6,
            camera_strength: 0.12,
            noise_level: 0.03,
            difficulty: Difficulty::Easy,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 {
            return Err(Error::invalid(
                "gen config",
                format!("cameras must be >= 2 (every test identity needs two views), got {}", self.cameras),
            ));
        }
        if self.num_train_ids == 0 || self.num_test_ids == 0 {
            return Err(Error::invalid("gen config", "need at least one train and one test identity"));
        }
        if self.samples_per_id_per_camera == 0 {
            return Err(Error::invalid("gen config", "samples_per_id_per_camera must be >= 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("gen config", "image size must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("gen config", "latent_dim must be >= 1"));
        }
        if self.camera_strength < 0.0 || self.noise_level < 0.0 {
            return Err(Error::invalid("gen config", "strengths must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major H x W grayscale pixels in [0, 1].
    pub pixels: Vec<f64>,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct training identities in ascending order; positions define
    /// the 0-based class indices.
    pub fn train_classes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

struct CameraParams {
    gain: f64,
    offset: f64,
    dy: i64,
    dx: i64,
}

/// Low-frequency 2-D cosine basis, skipping the constant term.
fn basis_value(freq: (usize, usize), y: usize, x: usize, h: usize, w: usize) -> f64 {
    let fy = freq.0 as f64;
    let fx = freq.1 as f64;
    let cy = (std::f64::consts::PI * fy * (y as f64 + 0.5) / h as f64).cos();
    let cx = (std::f64::consts::PI * fx * (x as f64 + 0.5) / w as f64).cos();
    cy * cx
}

fn frequency_table(n: usize) -> Vec<(usize, usize)> {
    let mut freqs = Vec::new();
    let mut order = 1;
    while freqs.len() < n {
        for fy in 0..=order {
            let fx = order - fy;
            freqs.push((fy, fx));
            if freqs.len() == n {
                break;
            }
        }
        order += 1;
    }
    freqs
}

fn identity_pattern(cfg: &GenConfig, identity: u32) -> Vec<f64> {
    let mut rng = stream(
        derive_seed(cfg.seed, TAG_DATA_IDENTITY),
        identity as u64,
    );
    let freqs = frequency_table(cfg.latent_dim);
    let coeffs: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for (c, f) in coeffs.iter().zip(&freqs) {
                v += c * basis_value(*f, y, x, h, w);
            }
            img[y * w + x] = v;
        }
    }
    // normalize to [0, 1]
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    for v in &mut img {
        *v = (*v - lo) / span;
    }
    img
}

fn camera_params(cfg: &GenConfig, camera: u32) -> CameraParams {
    let mut rng = stream(derive_seed(cfg.seed, TAG_DATA_CAMERA), camera as u64);
    let s = cfg.camera_strength * cfg.difficulty.factor();
    let shift_max = ((s * 8.0).round() as i64).clamp(0, (cfg.height.min(cfg.width) / 4) as i64);
    CameraParams {
        gain: rng.gen_range(1.0 - s..=1.0 + s),
        offset: rng.gen_range(-s / 2.0..=s / 2.0),
        dy: rng.gen_range(-shift_max..=shift_max),
        dx: rng.gen_range(-shift_max..=shift_max),
    }
}

fn render_sample(
    cfg: &GenConfig,
    pattern: &[f64],
    cam: &CameraParams,
    identity: u32,
    camera: u32,
    index: usize,
) -> Vec<f64> {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let noise = cfg.noise_level * cfg.difficulty.factor();
    let tag = (identity as u64) << 32 | (camera as u64) << 16 | index as u64;
    let mut rng = stream(derive_seed(cfg.seed, TAG_DATA_NOISE), tag);
    let mut out = vec![0.0; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let sy = y - cam.dy;
            let sx = x - cam.dx;
            let base = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                pattern[(sy * w + sx) as usize]
            } else {
                0.0
            };
            let mut v = cam.gain * base + cam.offset;
            if noise > 0.0 {
                v += rng.gen_range(-noise..=noise);
            } else {
                // keep the stream aligned regardless of noise level
                let _ = rng.gen::<f64>();
            }
            out[(y * w + x) as usize] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Deterministic dataset generation. Train identities are 0..T-1; test
/// identities continue from T and never appear in training.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let cams: Vec<CameraParams> = (0..cfg.cameras)
        .map(|c| camera_params(cfg, c as u32))
        .collect();
    let mut samples = Vec::new();
    let total_ids = cfg.num_train_ids + cfg.num_test_ids;
    for id in 0..total_ids {
        let identity = id as u32;
        let is_train = id < cfg.num_train_ids;
        let pattern = identity_pattern(cfg, identity);
        for (ci, cam) in cams.iter().enumerate() {
            for k in 0..cfg.samples_per_id_per_camera {
                let pixels = render_sample(cfg, &pattern, cam, identity, ci as u32, k);
                let split = if is_train {
                    Split::Train
                } else if k == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                };
                samples.push(Sample {
                    pixels,
                    identity,
                    camera: ci as u32,
                    split,
                });
            }
        }
    }
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        samples,
    })
}

const MANIFEST: &str = "manifest.csv";
const BLOB: &str = "images.blob";

/// Writes `manifest.csv` (index, identity, camera, split, byte offset) and
/// a single raster blob of little-endian f64 pixels.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    let blob_path = dir.join(BLOB);
    let mut manifest = String::from("index,identity,camera,split,file_offset\n");
    manifest.push_str(&format!(
        "# height={} width={}\n",
        dataset.height, dataset.width
    ));
    let mut blob = Vec::with_capacity(dataset.samples.len() * dataset.height * dataset.width * 8);
    for (i, s) in dataset.samples.iter().enumerate() {
        manifest.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            s.identity,
            s.camera,
            s.split.as_str(),
            blob.len()
        ));
        for &px in &s.pixels {
            blob.extend_from_slice(&px.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))?;
    let mut f = std::fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let blob_path = dir.join(BLOB);
    let manifest =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut blob = Vec::new();
    std::fs::File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(&blob_path, e))?;

    let mut lines = manifest.lines();
    match lines.next() {
        Some("index,identity,camera,split,file_offset") => {}
        other => {
            return Err(Error::format(
                &manifest_path,
                format!("unexpected header: {:?}", other),
            ))
        }
    }
    let dims = lines
        .next()
        .and_then(|l| l.strip_prefix("# height="))
        .ok_or_else(|| Error::format(&manifest_path, "missing dimension line"))?;
    let (h_str, w_str) = dims
        .split_once(" width=")
        .ok_or_else(|| Error::format(&manifest_path, "malformed dimension line"))?;
    let height: usize = h_str
        .parse()
        .map_err(|_| Error::format(&manifest_path, "bad height"))?;
    let width: usize = w_str
        .parse()
        .map_err(|_| Error::format(&manifest_path, "bad width"))?;
    let px_bytes = height * width * 8;

    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                &manifest_path,
                format!("line {}: expected 5 fields", lineno + 3),
            ));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(&manifest_path, format!("line {}: bad index", lineno + 3)))?;
        if index != samples.len() {
            return Err(Error::format(
                &manifest_path,
                format!("line {}: index {} out of order", lineno + 3, index),
            ));
        }
        let identity: u32 = fields[1]
            .parse()
            .map_err(|_| Error::format(&manifest_path, format!("line {}: bad identity", lineno + 3)))?;
        let camera: u32 = fields[2]
            .parse()
            .map_err(|_| Error::format(&manifest_path, format!("line {}: bad camera", lineno + 3)))?;
        let split = Split::parse(fields[3])
            .map_err(|_| Error::format(&manifest_path, format!("line {}: bad split", lineno + 3)))?;
        let offset: usize = fields[4]
            .parse()
            .map_err(|_| Error::format(&manifest_path, format!("line {}: bad offset", lineno + 3)))?;
        if offset + px_bytes > blob.len() {
            return Err(Error::format(
                &blob_path,
                format!(
                    "sample {} needs bytes {}..{} but blob has {}",
                    index,
                    offset,
                    offset + px_bytes,
                    blob.len()
                ),
            ));
        }
        let pixels: Vec<f64> = blob[offset..offset + px_bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            pixels,
            identity,
            camera,
            split,
        });
    }
    let expected = samples.len() * px_bytes;
    if blob.len() != expected {
        return Err(Error::format(
            &blob_path,
            format!("blob has {} bytes, manifest describes {}", blob.len(), expected),
        ));
    }
    Ok(Dataset {
        height,
        width,
        samples,
    })
}
