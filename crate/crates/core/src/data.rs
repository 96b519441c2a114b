//! Image ingestion: decoding, deterministic normalisation to a square
//! 256×256×3 canvas, manifests and epoch-shuffled batches.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArtemisError, Result};

/// Side length every source image is normalised to.
pub const CANVAS: usize = 256;

/// An `H×W×3` image stored row-major, channel-last, values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 3 {
            return Err(ArtemisError::ChannelCount(channels));
        }
        if height == 0 || width == 0 {
            return Err(ArtemisError::shape(format!(
                "image must be at least 1×1, got {height}×{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(ArtemisError::shape(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(ArtemisError::shape(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    /// Area-average downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(ArtemisError::shape(format!(
                "cannot downsample {}×{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = 1.0 / (factor * factor) as f32;
        Ok(Self::from_fn(h, w, |r, c, ch| {
            let mut acc = 0.0f32;
            for dr in 0..factor {
                for dc in 0..factor {
                    acc += self.get(r * factor + dr, c * factor + dc, ch);
                }
            }
            acc * norm
        }))
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageTensor::to_tensor`] for a single `(3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, data)
    }
}

/// Stack images into an `(N, 3, H, W)` batch.
pub fn images_to_batch(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| im.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Split an `(N, 3, H, W)` batch back into images.
pub fn batch_to_images(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    let n = batch.dim(0)?;
    (0..n)
        .map(|i| ImageTensor::from_tensor(&batch.get(i)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessAction {
    Crop,
    TileThenCrop,
}

impl PreprocessAction {
    pub fn for_size(height: usize, width: usize) -> Self {
        if height >= CANVAS && width >= CANVAS {
            Self::Crop
        } else {
            Self::TileThenCrop
        }
    }
}

/// Normalise an arbitrary `H×W×3` image to exactly `256×256×3`.
///
/// Axes shorter than 256 are self-concatenated until they reach at least 256,
/// then the result is centre-cropped. Tiling is never materialised: each
/// output pixel indexes the source modulo its size.
pub fn preprocess_image(raw: &ImageTensor) -> ImageTensor {
    let (h, w) = (raw.height, raw.width);
    let tiled_h = h * h.max(CANVAS).div_ceil(h);
    let tiled_w = w * w.max(CANVAS).div_ceil(w);
    let off_r = (tiled_h - CANVAS) / 2;
    let off_c = (tiled_w - CANVAS) / 2;
    ImageTensor::from_fn(CANVAS, CANVAS, |r, c, ch| {
        raw.get((r + off_r) % h, (c + off_c) % w, ch)
    })
}

/// Decode a JPEG or PNG. Grayscale is replicated to RGB, alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let decode_err = |reason: String| ArtemisError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| ArtemisError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| ArtemisError::io(path, e))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(f32::from).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

fn is_supported_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// `(height, width)` of the source image.
    pub original_size: (usize, usize),
    pub action: PreprocessAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    /// Files that were seen but not admitted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<PathBuf>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| ArtemisError::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| ArtemisError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Scan `root_dir` (recursively) for JPEG/PNG files.
///
/// Order is a function of the file set and `seed` only: paths are sorted and
/// then shuffled with a seeded generator.
pub fn build_manifest(root_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    if !root_dir.is_dir() {
        return Err(ArtemisError::config(format!(
            "data directory {} does not exist",
            root_dir.display()
        )));
    }
    let mut files = Vec::new();
    collect_files(root_dir, &mut files)?;
    files.sort();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        if !is_supported_image(&path) {
            log::warn!("skipping non-image file {}", path.display());
            skipped.push(path);
            continue;
        }
        match image::image_dimensions(&path) {
            Ok((w, h)) => {
                let (h, w) = (h as usize, w as usize);
                entries.push(ManifestEntry {
                    path,
                    original_size: (h, w),
                    action: PreprocessAction::for_size(h, w),
                });
            }
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                skipped.push(path);
            }
        }
    }
    if entries.is_empty() {
        return Err(ArtemisError::EmptyDataset(root_dir.to_path_buf()));
    }
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(DatasetManifest {
        entries,
        seed,
        skipped,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| ArtemisError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArtemisError::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.entries.is_empty() {
            return Err(ArtemisError::EmptyDataset(path.to_path_buf()));
        }
        Ok(manifest)
    }

    /// Permutation of entry indices used for `epoch`.
    pub fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        let mixed = self.seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
        order
    }
}

/// Preprocessed images addressable by (epoch, batch index).
///
/// Small datasets are decoded once and kept in memory.
pub struct Dataset {
    manifest: DatasetManifest,
    batch_size: usize,
    image_size: usize,
    cache: Option<Vec<ImageTensor>>,
}

const PRELOAD_BYTES: usize = 256 << 20;

impl Dataset {
    pub fn new(manifest: DatasetManifest, batch_size: usize, image_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(ArtemisError::config("batch size must be at least 1"));
        }
        if batch_size > manifest.len() {
            return Err(ArtemisError::config(format!(
                "batch size {batch_size} exceeds dataset size {}",
                manifest.len()
            )));
        }
        if image_size == 0 || CANVAS % image_size != 0 {
            return Err(ArtemisError::config(format!(
                "image size {image_size} must divide {CANVAS}"
            )));
        }
        let mut ds = Self {
            manifest,
            batch_size,
            image_size,
            cache: None,
        };
        if ds.manifest.len() * image_size * image_size * 3 * 4 <= PRELOAD_BYTES {
            let images = (0..ds.manifest.len())
                .map(|i| ds.load_entry(i))
                .collect::<Result<Vec<_>>>()?;
            ds.cache = Some(images);
        }
        Ok(ds)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Full batches per epoch; the trailing partial batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.manifest.len() / self.batch_size
    }

    fn load_entry(&self, index: usize) -> Result<ImageTensor> {
        let entry = &self.manifest.entries[index];
        let img = preprocess_image(&load_image(&entry.path)?);
        img.downsample(CANVAS / self.image_size)
    }

    fn image(&self, index: usize) -> Result<ImageTensor> {
        match &self.cache {
            Some(images) => Ok(images[index].clone()),
            None => self.load_entry(index),
        }
    }

    /// Manifest indices making up batch `batch` of `epoch`.
    pub fn batch_indices(&self, epoch: u64, batch: usize) -> Vec<usize> {
        let perm = self.manifest.epoch_permutation(epoch);
        perm[batch * self.batch_size..(batch + 1) * self.batch_size].to_vec()
    }

    pub fn batch(&self, epoch: u64, batch: usize) -> Result<Vec<ImageTensor>> {
        if batch >= self.batches_per_epoch() {
            return Err(ArtemisError::config(format!(
                "batch {batch} out of range for {} batches per epoch",
                self.batches_per_epoch()
            )));
        }
        self.batch_indices(epoch, batch)
            .into_iter()
            .map(|i| self.image(i))
            .collect()
    }

    /// Batch at a global optimiser step, wrapping over epochs.
    pub fn batch_for_step(&self, step: usize) -> Result<(u64, Vec<ImageTensor>)> {
        let per_epoch = self.batches_per_epoch();
        let epoch = (step / per_epoch) as u64;
        Ok((epoch, self.batch(epoch, step % per_epoch)?))
    }

    pub fn iter_epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Vec<ImageTensor>>> + '_ {
        (0..self.batches_per_epoch()).map(move |b| self.batch(epoch, b))
    }
}

/// Stream the batches of one epoch at full 256×256 resolution.
pub fn iterate_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<Vec<ImageTensor>>>> {
    let ds = Dataset::new(manifest.clone(), batch_size, CANVAS)?;
    let n = ds.batches_per_epoch();
    Ok((0..n).map(move |b| ds.batch(epoch, b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |r, c, ch| ((r * 7 + c * 3 + ch * 11) % 256) as f32)
    }

    /// Materialised self-concatenation, the reference for the modular indexing.
    fn tile_explicit(img: &ImageTensor, reps_h: usize, reps_w: usize) -> ImageTensor {
        let mut rows: Vec<Vec<[f32; 3]>> = Vec::new();
        for _ in 0..reps_h {
            for r in 0..img.height() {
                let mut row = Vec::new();
                for _ in 0..reps_w {
                    for c in 0..img.width() {
                        row.push([img.get(r, c, 0), img.get(r, c, 1), img.get(r, c, 2)]);
                    }
                }
                rows.push(row);
            }
        }
        let (h, w) = (rows.len(), rows[0].len());
        ImageTensor::from_fn(h, w, |r, c, ch| rows[r][c][ch])
    }

    fn crop(img: &ImageTensor, top: usize, left: usize) -> ImageTensor {
        ImageTensor::from_fn(CANVAS, CANVAS, |r, c, ch| img.get(top + r, left + c, ch))
    }

    #[test]
    fn oversized_input_is_centre_cropped() {
        let img = ramp(512, 512);
        let out = preprocess_image(&img);
        assert_eq!(out, crop(&img, 128, 128));
    }

    #[test]
    fn short_input_is_tiled_then_cropped() {
        let img = ramp(100, 300);
        let tiled = tile_explicit(&img, 3, 1);
        assert_eq!((tiled.height(), tiled.width()), (300, 300));
        let out = preprocess_image(&img);
        assert_eq!(out, crop(&tiled, 22, 22));
    }

    #[test]
    fn both_axes_tiled_independently() {
        let img = ramp(37, 90);
        let tiled = tile_explicit(&img, 7, 3);
        let out = preprocess_image(&img);
        let top = (tiled.height() - CANVAS) / 2;
        let left = (tiled.width() - CANVAS) / 2;
        assert_eq!(out, crop(&tiled, top, left));
    }

    #[test]
    fn canvas_sized_input_is_unchanged() {
        let img = ramp(256, 256);
        assert_eq!(preprocess_image(&img), img);
    }

    #[test]
    fn one_pixel_image() {
        let img = ImageTensor::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = preprocess_image(&img);
        assert!(out.data().chunks(3).all(|p| p == [1.0, 2.0, 3.0]));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let err = ImageTensor::new(2, 2, 4, vec![0.0; 16]).unwrap_err();
        assert!(matches!(err, ArtemisError::ChannelCount(4)));
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageTensor::from_fn(4, 4, |r, c, _| (r * 4 + c) as f32);
        let d = img.downsample(2).unwrap();
        assert_eq!(d.get(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(d.get(1, 1, 2), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(5, 7);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 5, 7]);
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), img);
    }

    proptest::proptest! {
        #[test]
        fn preprocess_always_canvas_and_in_range(h in 1usize..300, w in 1usize..300, seed in 0u32..1000) {
            let img = ImageTensor::from_fn(h, w, |r, c, ch| ((r * 31 + c * 17 + ch * 5 + seed as usize) % 256) as f32);
            let out = preprocess_image(&img);
            proptest::prop_assert_eq!((out.height(), out.width()), (CANVAS, CANVAS));
            proptest::prop_assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
            proptest::prop_assert_eq!(preprocess_image(&out), out);
        }
    }
}
