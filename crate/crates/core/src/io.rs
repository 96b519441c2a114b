//! Checkpoints, run manifests, metrics streams and PNG export.
//!
//! Layout: `runs/<name>/{ae,gan}/step_<k>.ckpt` with a `step_<k>.json`
//! sidecar, `runs/<name>/manifest.json`, samples under `runs/<name>/samples/`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainingConfig;
use crate::data::ImageTensor;
use crate::error::{ArtemisError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Autoencoder,
    Gan,
}

impl CheckpointKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Autoencoder => "ae",
            Self::Gan => "gan",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub step: usize,
    pub epoch: u64,
    pub config: TrainingConfig,
    pub rng: ChaCha8Rng,
    pub optimizer_steps: BTreeMap<String, u64>,
    /// SHA-256 of the `.ckpt` file, filled in on save.
    #[serde(default)]
    pub weights_sha256: String,
}

impl CheckpointMeta {
    pub fn new(
        kind: CheckpointKind,
        step: usize,
        epoch: u64,
        config: &TrainingConfig,
        rng: ChaCha8Rng,
        optimizer_steps: BTreeMap<String, u64>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            step,
            epoch,
            config: config.clone(),
            rng,
            optimizer_steps,
            weights_sha256: String::new(),
        }
    }

    /// A checkpoint can be restored into a run whose architecture matches.
    pub fn check_compatible(&self, cfg: &TrainingConfig) -> Result<()> {
        let saved = &self.config;
        if saved.blocks != cfg.blocks {
            return Err(ArtemisError::config(format!(
                "checkpoint trained on blocks {:?}, run configured for {:?}",
                saved.blocks, cfg.blocks
            )));
        }
        if saved.image_size != cfg.image_size
            || saved.decoder_channel_rule != cfg.decoder_channel_rule
        {
            return Err(ArtemisError::config(
                "checkpoint architecture (image_size / decoder_channel_rule) differs from config",
            ));
        }
        Ok(())
    }
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| ArtemisError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ArtemisError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ArtemisError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ArtemisError::io(path, e))
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Write `step_<k>.ckpt` + sidecar into `dir` (created if needed). With
/// `diagnostic` the files are named `diagnostic_step_<k>` so that they are
/// never picked up as a resume point.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path, diagnostic: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| ArtemisError::io(dir, e))?;
    let stem = if diagnostic {
        format!("diagnostic_step_{}", ckpt.meta.step)
    } else {
        format!("step_{}", ckpt.meta.step)
    };
    let path = dir.join(format!("{stem}.ckpt"));
    let bytes = safetensors::serialize(ckpt.tensors.iter().map(|(k, v)| (k.as_str(), v)), None)
        .map_err(|e| ArtemisError::Integrity {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    let mut meta = ckpt.meta.clone();
    meta.weights_sha256 = hex::encode(Sha256::digest(&bytes));
    write_atomic(&path, &bytes)?;
    write_atomic(
        &sidecar_path(&path),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    Ok(path)
}

/// Load a checkpoint file, or the newest one when given a directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = if path.is_dir() {
        latest_checkpoint(path)?.ok_or_else(|| {
            ArtemisError::config(format!("no checkpoint found in {}", path.display()))
        })?
    } else {
        path.to_path_buf()
    };
    let side = sidecar_path(&path);
    let text = fs::read_to_string(&side).map_err(|e| ArtemisError::io(&side, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(ArtemisError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw)?;
    let bytes = fs::read(&path).map_err(|e| ArtemisError::io(&path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != meta.weights_sha256 {
        return Err(ArtemisError::Integrity {
            path,
            reason: format!(
                "sha256 {digest} does not match recorded {}",
                meta.weights_sha256
            ),
        });
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| {
        ArtemisError::Integrity {
            path: path.clone(),
            reason: e.to_string(),
        }
    })?;
    Ok(Checkpoint { meta, tensors })
}

/// Highest-step `step_<k>.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| ArtemisError::io(dir, e))? {
        let p = entry.map_err(|e| ArtemisError::io(dir, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, p));
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub seed: u64,
    pub config_hash: String,
    pub start_time_unix: u64,
    pub source_revision: String,
    pub config: TrainingConfig,
}

impl RunManifest {
    pub fn new(cfg: &TrainingConfig) -> Self {
        let start = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let revision = option_env!("ARTEMIS_SOURCE_REV")
            .map(str::to_string)
            .unwrap_or_else(|| format!("artemis-core {}", env!("CARGO_PKG_VERSION")));
        Self {
            run_name: cfg.run_name.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            start_time_unix: start,
            source_revision: revision,
            config: cfg.clone(),
        }
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(run_dir).map_err(|e| ArtemisError::io(run_dir, e))?;
        let path = run_dir.join("manifest.json");
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| ArtemisError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.config.hash() != m.config_hash {
            return Err(ArtemisError::Integrity {
                path,
                reason: "config hash does not match the stored config".into(),
            });
        }
        Ok(m)
    }
}

/// Append-only JSON-lines writer.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| ArtemisError::io(parent, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ArtemisError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| ArtemisError::io(&self.path, e))
    }
}

/// Round half up and clamp to a byte.
pub fn quantize(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn to_rgb(img: &ImageTensor) -> image::RgbImage {
    let bytes = img.data().iter().map(|&v| quantize(v)).collect();
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer sized from image dims")
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => ArtemisError::io(path, io),
            other => ArtemisError::io(path, std::io::Error::other(other.to_string())),
        })
}

/// Write `sample_<i>.png` per image, or a single `grid.png` with ⌈√n⌉
/// columns. Returns the written paths.
pub fn export_samples(images: &[ImageTensor], out_dir: &Path, grid: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| ArtemisError::io(out_dir, e))?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    if !grid {
        return images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let p = out_dir.join(format!("sample_{i:03}.png"));
                save_png(&to_rgb(img), &p)?;
                Ok(p)
            })
            .collect();
    }
    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (h, w) = (images[0].height(), images[0].width());
    if images.iter().any(|im| im.height() != h || im.width() != w) {
        return Err(ArtemisError::shape("grid images must share one size"));
    }
    let mut canvas = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for (i, img) in images.iter().enumerate() {
        let tile = to_rgb(img);
        let (x0, y0) = ((i % cols) * w, (i / cols) * h);
        image::imageops::replace(&mut canvas, &tile, x0 as i64, y0 as i64);
    }
    let p = out_dir.join("grid.png");
    save_png(&canvas, &p)?;
    Ok(vec![p])
}
