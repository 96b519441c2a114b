use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{sample_latents, Decoder};
use crate::data::{batch_to_images, ImageTensor};
use crate::error::{ArtemisError, Result};
use crate::nn::{leaky_relu, BatchNorm, DiscriminatorBlock, DiscriminatorBlockCfg, Linear};
use crate::params::ParamStore;
use crate::vgg::{Backbone, BlockName};

/// `Generator_B = VGG_B ∘ Decoder`.
pub struct Generator {
    decoder: Decoder,
    blocks: Vec<BlockName>,
}

impl Generator {
    pub fn new(decoder: Decoder, blocks: &[BlockName]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(ArtemisError::config("generator needs at least one block"));
        }
        Ok(Self {
            decoder,
            blocks: blocks.to_vec(),
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn blocks(&self) -> &[BlockName] {
        &self.blocks
    }

    /// Decoded images and their representation for every block in `B`.
    pub fn forward_t(
        &self,
        z: &Tensor,
        backbone: &Backbone,
        train: bool,
    ) -> Result<(Tensor, BTreeMap<BlockName, Tensor>)> {
        let images = self.decoder.forward_t(z, train)?;
        let reps = backbone.extract(&images, &self.blocks)?;
        Ok((images, reps))
    }

    /// `n` images from `N(0, 1)` latents seeded by `seed`, inference mode.
    pub fn sample(&self, n: usize, seed: u64, dtype: DType) -> Result<Vec<ImageTensor>> {
        sample_images(&self.decoder, n, seed, dtype)
    }
}

pub fn sample_images(
    decoder: &Decoder,
    n: usize,
    seed: u64,
    dtype: DType,
) -> Result<Vec<ImageTensor>> {
    if n == 0 {
        return Err(ArtemisError::config("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_latents(&mut rng, n, dtype, &candle_core::Device::Cpu)?;
    batch_to_images(&decoder.forward_t(&z, false)?)
}

/// Layer plan of a discriminator: per-block `(c, resnext, stride)` and the
/// flattened width entering the dense head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorPlan {
    pub blocks: Vec<(DiscriminatorBlockCfg, usize)>,
    pub flat: usize,
}

pub const DISCRIMINATOR_BLOCKS: usize = 4;
pub const DISCRIMINATOR_MIN_CHANNELS: usize = 8;
pub const DENSE_WIDTH: usize = 8;

impl DiscriminatorPlan {
    pub fn new(block: BlockName, image_size: usize) -> Self {
        let (mut side, _, mut c) = block.dims_at(image_size);
        let mut blocks = Vec::new();
        for i in 0..DISCRIMINATOR_BLOCKS {
            c = (c / 2).max(DISCRIMINATOR_MIN_CHANNELS);
            let stride = if side > 1 { 2 } else { 1 };
            side /= stride;
            blocks.push((DiscriminatorBlockCfg { c, resnext: i > 0 }, stride));
        }
        Self {
            blocks,
            flat: side * side * c,
        }
    }
}

/// `DIM_block → (0, 1)`.
pub struct Discriminator {
    block: BlockName,
    image_size: usize,
    blocks: Vec<DiscriminatorBlock>,
    dense: Linear,
    bn: BatchNorm,
    head: Linear,
}

impl Discriminator {
    pub fn new(store: &ParamStore, block: BlockName, image_size: usize) -> Result<Self> {
        let plan = DiscriminatorPlan::new(block, image_size);
        let (mut side, _, mut c_in) = block.dims_at(image_size);
        let mut blocks = Vec::new();
        for (i, (cfg, _)) in plan.blocks.iter().enumerate() {
            let b = DiscriminatorBlock::new(&store.pp(format!("block{i}")), c_in, *cfg, side)?;
            side /= b.stride();
            c_in = cfg.c;
            blocks.push(b);
        }
        Ok(Self {
            block,
            image_size,
            blocks,
            dense: Linear::new(&store.pp("dense"), plan.flat, DENSE_WIDTH)?,
            bn: BatchNorm::new(&store.pp("dense_bn"), DENSE_WIDTH)?,
            head: Linear::new(&store.pp("head"), DENSE_WIDTH, 1)?,
        })
    }

    pub fn block(&self) -> BlockName {
        self.block
    }

    /// `(N,)` probabilities.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let (eh, ew, ec) = self.block.dims_at(self.image_size);
        if (h, w, c) != (eh, ew, ec) {
            return Err(ArtemisError::shape(format!(
                "{} discriminator expects {eh}×{ew}×{ec}, got {h}×{w}×{c}",
                self.block
            )));
        }
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward_t(&x, train)?;
        }
        let x = x.flatten_from(1)?;
        let x = leaky_relu(&self.bn.forward_t(&self.dense.forward(&x)?, train)?)?;
        let logits = self.head.forward(&x)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.flatten_all()?)
    }
}
