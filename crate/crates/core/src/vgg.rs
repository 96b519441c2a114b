//! Frozen VGG-19 feature extractor and the block registry.
//!
//! Tensors are `(N, C, H, W)`; block dimensions are reported as `(H, W, C)`.
//!
//! Weights are read from a safetensors archive using torchvision's layout
//! (`features.<index>.weight` / `.bias`), as produced by exporting
//! `torchvision.models.vgg19(weights="IMAGENET1K_V1").features`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CANVAS;
use crate::error::{ArtemisError, Result};
use crate::nn::{into_storage, storage_tensor};
use crate::params::{gaussian_tensor, tensors_checksum};

/// A selectable style-representation layer. `None` is the raw image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockName {
    None,
    Block1Conv1,
    Block2Conv1,
    Block3Conv1,
    Block4Conv1,
    Block5Conv1,
}

impl BlockName {
    pub const ALL: [BlockName; 6] = [
        BlockName::None,
        BlockName::Block1Conv1,
        BlockName::Block2Conv1,
        BlockName::Block3Conv1,
        BlockName::Block4Conv1,
        BlockName::Block5Conv1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockName::None => "none",
            BlockName::Block1Conv1 => "block1_conv1",
            BlockName::Block2Conv1 => "block2_conv1",
            BlockName::Block3Conv1 => "block3_conv1",
            BlockName::Block4Conv1 => "block4_conv1",
            BlockName::Block5Conv1 => "block5_conv1",
        }
    }

    /// 0 for the raw image, otherwise the VGG stage `k` of `block{k}_conv1`.
    pub fn stage(self) -> usize {
        BlockName::ALL.iter().position(|&b| b == self).unwrap()
    }

    /// Registry dimensions for a 256×256 input.
    pub fn dims(self) -> (usize, usize, usize) {
        self.dims_at(CANVAS)
    }

    /// Dimensions for a square input of side `image_size`.
    pub fn dims_at(self, image_size: usize) -> (usize, usize, usize) {
        match self.stage() {
            0 => (image_size, image_size, 3),
            k => {
                let side = image_size >> (k - 1);
                (side, side, VGG_STAGE_WIDTHS[k - 1])
            }
        }
    }
}

impl fmt::Display for BlockName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockName {
    type Err = ArtemisError;

    fn from_str(s: &str) -> Result<Self> {
        BlockName::ALL
            .into_iter()
            .find(|b| b.as_str() == s.trim())
            .ok_or_else(|| ArtemisError::UnknownBlock(s.to_string()))
    }
}

/// Registry lookup by name.
pub fn block_dims(name: &str) -> Result<(usize, usize, usize)> {
    Ok(name.parse::<BlockName>()?.dims())
}

/// Parse a comma-separated block list, rejecting duplicates.
pub fn parse_block_list(s: &str) -> Result<Vec<BlockName>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let b: BlockName = part.parse()?;
        if out.contains(&b) {
            return Err(ArtemisError::config(format!("block {b} listed twice")));
        }
        out.push(b);
    }
    if out.is_empty() {
        return Err(ArtemisError::config("block list is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: BlockName,
    pub dims: (usize, usize, usize),
}

impl From<BlockName> for BlockSpec {
    fn from(name: BlockName) -> Self {
        Self {
            name,
            dims: name.dims(),
        }
    }
}

/// A batch of feature maps tagged with the block that produced them.
#[derive(Debug, Clone)]
pub struct StyleRepresentation {
    pub block: BlockName,
    pub data: Tensor,
}

impl StyleRepresentation {
    pub fn new(block: BlockName, data: Tensor, image_size: usize) -> Result<Self> {
        let (h, w, c) = block.dims_at(image_size);
        let (_, dc, dh, dw) = data.dims4()?;
        if (dh, dw, dc) != (h, w, c) {
            return Err(ArtemisError::shape(format!(
                "{block} representation must be {h}×{w}×{c}, got {dh}×{dw}×{dc}"
            )));
        }
        Ok(Self { block, data })
    }
}

const VGG_STAGE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const VGG_STAGE_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

struct ConvLayer {
    name: String,
    key: usize,
    weight: Tensor,
    bias: Tensor,
    /// Flipped, in/out-swapped kernel for the input gradient.
    weight_t: Tensor,
}

/// 3×3 same-padded conv + bias with the parameters baked into the op, so
/// backprop produces an input gradient only.
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    weight_t: Tensor,
}

impl CustomOp1 for FrozenConv {
    fn name(&self) -> &'static str {
        "frozen-conv3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = storage_tensor(s, l)?;
        into_storage(
            &x.conv2d(&self.weight, 1, 1, 1, 1)?
                .broadcast_add(&self.bias)?,
        )
    }

    fn bwd(&self, _x: &Tensor, _y: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.detach().conv2d(&self.weight_t, 1, 1, 1, 1)?))
    }
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if !x.track_op() {
            return Ok(x.conv2d(&self.weight, 1, 1, 1, 1)?.broadcast_add(&self.bias)?);
        }
        let op = FrozenConv {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            weight_t: self.weight_t.clone(),
        };
        Ok(x.contiguous()?.apply_op1(op)?)
    }
}

/// `(name, torchvision index, c_in, c_out)` for the 16 conv layers.
fn vgg19_topology() -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut index = 0;
    let mut c_in = 3;
    for (stage, (&width, &depth)) in VGG_STAGE_WIDTHS.iter().zip(&VGG_STAGE_DEPTHS).enumerate() {
        for conv in 0..depth {
            out.push((
                format!("block{}_conv{}", stage + 1, conv + 1),
                index,
                c_in,
                width,
            ));
            c_in = width;
            // conv + relu
            index += 2;
        }
        // max-pool
        index += 1;
    }
    out
}

/// Immutable VGG-19 convolutional trunk.
///
/// Weights are plain tensors, never [`candle_core::Var`]s, so no optimiser
/// can reach them and backpropagation stops at them while still flowing to
/// the input.
pub struct Backbone {
    layers: Vec<ConvLayer>,
    checksum: String,
    dtype: DType,
    device: Device,
    mean: Tensor,
    inv_std: Tensor,
    chunk: usize,
}

impl Backbone {
    pub fn load(weights_path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let load_err = |reason: String| ArtemisError::WeightLoad {
            path: weights_path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(weights_path).map_err(|e| load_err(e.to_string()))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)
            .map_err(|e| load_err(e.to_string()))?;
        Self::from_tensors(&tensors, dtype, device).map_err(|e| match e {
            ArtemisError::Shape(reason) => load_err(reason),
            other => other,
        })
    }

    pub fn from_tensors(
        tensors: &HashMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (name, key, c_in, c_out) in vgg19_topology() {
            let w_key = format!("features.{key}.weight");
            let b_key = format!("features.{key}.bias");
            let weight = tensors
                .get(&w_key)
                .ok_or_else(|| ArtemisError::shape(format!("layer {name}: missing {w_key}")))?;
            let bias = tensors
                .get(&b_key)
                .ok_or_else(|| ArtemisError::shape(format!("layer {name}: missing {b_key}")))?;
            if weight.dims() != [c_out, c_in, 3, 3] || bias.dims() != [c_out] {
                return Err(ArtemisError::shape(format!(
                    "layer {name}: expected weight {:?} and bias {:?}, found {:?} and {:?}",
                    [c_out, c_in, 3, 3],
                    [c_out],
                    weight.dims(),
                    bias.dims()
                )));
            }
            layers.push(ConvLayer {
                name,
                key,
                weight: weight.to_dtype(dtype)?.detach(),
                bias: bias.to_dtype(dtype)?.reshape((1, c_out, 1, 1))?.detach(),
                weight_t: weight
                    .to_dtype(dtype)?
                    .flip(&[2, 3])?
                    .transpose(0, 1)?
                    .contiguous()?
                    .detach(),
            });
        }
        let checksum = tensors_checksum(
            layers
                .iter()
                .flat_map(|l| [(l.name.as_str(), &l.weight), (l.name.as_str(), &l.bias)]),
        )?;
        log::info!("loaded VGG-19 trunk, 16 conv layers, sha256 {checksum}");
        let mean = (Tensor::new(&IMAGENET_MEAN, device)? * 255.0)?
            .to_dtype(dtype)?
            .reshape((1, 3, 1, 1))?;
        let inv_std = (Tensor::new(&IMAGENET_STD, device)? * 255.0)?
            .recip()?
            .to_dtype(dtype)?
            .reshape((1, 3, 1, 1))?;
        Ok(Self {
            layers,
            checksum,
            dtype,
            device: device.clone(),
            mean,
            inv_std,
            chunk: 2,
        })
    }

    /// Write a He-initialised VGG-19 trunk in the expected archive layout.
    ///
    /// Used when no ImageNet-pretrained export is available (offline tests,
    /// smoke runs). Same seed, same bytes.
    pub fn write_random_weights(path: &Path, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let device = Device::Cpu;
        let mut out = HashMap::new();
        for (_, key, c_in, c_out) in vgg19_topology() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let w = (gaussian_tensor(&mut rng, (c_out, c_in, 3, 3), DType::F32, &device)? * std)?;
            let b = Tensor::zeros(c_out, DType::F32, &device)?;
            out.insert(format!("features.{key}.weight"), w);
            out.insert(format!("features.{key}.bias"), b);
        }
        candle_core::safetensors::save(&out, path).map_err(|e| match e {
            candle_core::Error::Io(io) => ArtemisError::io(path, io),
            other => other.into(),
        })
    }

    pub fn num_conv_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Checksum recomputed from the live tensors.
    pub fn current_checksum(&self) -> Result<String> {
        tensors_checksum(
            self.layers
                .iter()
                .flat_map(|l| [(l.name.as_str(), &l.weight), (l.name.as_str(), &l.bias)]),
        )
    }

    /// All weight and bias tensors, for gradient assertions.
    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn layer_names(&self) -> impl Iterator<Item = (&str, usize)> {
        self.layers.iter().map(|l| (l.name.as_str(), l.key))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Images per forward pass; bounds peak memory of the im2col buffers.
    pub fn set_chunk(&mut self, chunk: usize) {
        self.chunk = chunk.max(1);
    }

    /// `(N, 3, H, W)` images in `[0, 255]` → one feature batch per block.
    pub fn extract(
        &self,
        images: &Tensor,
        blocks: &[BlockName],
    ) -> Result<BTreeMap<BlockName, Tensor>> {
        if blocks.is_empty() {
            return Err(ArtemisError::config("no blocks requested"));
        }
        let (n, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(ArtemisError::ChannelCount(c));
        }
        if n <= self.chunk {
            return self.extract_chunk(images, blocks);
        }
        let mut parts: BTreeMap<BlockName, Vec<Tensor>> = BTreeMap::new();
        let mut start = 0;
        while start < n {
            let len = self.chunk.min(n - start);
            for (b, t) in self.extract_chunk(&images.narrow(0, start, len)?, blocks)? {
                parts.entry(b).or_default().push(t);
            }
            start += len;
        }
        parts
            .into_iter()
            .map(|(b, ts)| Ok((b, Tensor::cat(&ts, 0)?)))
            .collect()
    }

    fn extract_chunk(
        &self,
        images: &Tensor,
        blocks: &[BlockName],
    ) -> Result<BTreeMap<BlockName, Tensor>> {
        let mut out = BTreeMap::new();
        let deepest = blocks.iter().map(|b| b.stage()).max().unwrap();
        if blocks.contains(&BlockName::None) {
            out.insert(BlockName::None, images.clone());
        }
        if deepest == 0 {
            return Ok(out);
        }
        let mut x = images
            .broadcast_sub(&self.mean)?
            .broadcast_mul(&self.inv_std)?;
        let mut layer = 0;
        for stage in 1..=deepest {
            if stage > 1 {
                x = x.max_pool2d(2)?;
            }
            let depth = if stage == deepest {
                1
            } else {
                VGG_STAGE_DEPTHS[stage - 1]
            };
            for conv in 0..depth {
                let l = &self.layers[layer + conv];
                x = l.forward(&x)?.relu()?;
                if conv == 0 {
                    let b = BlockName::ALL[stage];
                    if blocks.contains(&b) {
                        out.insert(b, x.clone());
                    }
                }
            }
            layer += VGG_STAGE_DEPTHS[stage - 1];
        }
        Ok(out)
    }
}
