//! Per-block encoders, the shared decoder, and reconstruction pretraining.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderChannelRule, TrainingConfig};
use crate::data::{images_to_batch, Dataset};
use crate::error::{ArtemisError, Result};
use crate::io::{save_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta, MetricsWriter};
use crate::nn::{
    leaky_relu, BatchDecoderBlock, BatchDecoderBlockCfg, BatchNorm, Conv2d, EncoderBlock,
    EncoderBlockCfg, GroupDecoderBlock, GroupDecoderBlockCfg, Padding,
};
use crate::params::{gaussian_tensor, safe_sqrt, Adam, ParamStore};
use crate::vgg::{Backbone, BlockName};

pub const LATENT_CHANNELS: usize = 64;
pub const LATENT_SIDE: usize = 2;

/// A single `2×2×64` latent, stored `(64, 2, 2)`.
#[derive(Debug, Clone)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.dims() != [LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE] {
            return Err(ArtemisError::shape(format!(
                "latent code must be 2×2×64, got {:?}",
                z.dims()
            )));
        }
        Ok(Self(z))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `(n, 64, 2, 2)` standard normal latents.
pub fn sample_latents(
    rng: &mut ChaCha8Rng,
    n: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    gaussian_tensor(
        rng,
        (n, LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE),
        dtype,
        device,
    )
}

fn log2_exact(n: usize, what: &str) -> Result<usize> {
    if n == 0 || !n.is_power_of_two() {
        return Err(ArtemisError::shape(format!(
            "{what} {n} is not a power of two"
        )));
    }
    Ok(n.trailing_zeros() as usize)
}

/// Layer plan of an encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderPlan {
    /// 8-channel 8×8 stem conv, used for raw images only.
    pub stem: bool,
    pub stages: Vec<EncoderBlockCfg>,
}

impl EncoderPlan {
    pub fn for_block(block: BlockName, image_size: usize) -> Result<Self> {
        let (h, _, c) = block.dims_at(image_size);
        let mut stages = Vec::new();
        let stem = block == BlockName::None;
        if stem {
            for c in [16, 32, 64] {
                stages.push(EncoderBlockCfg { c, s: 1 });
            }
        } else {
            let mut c = c;
            while c > LATENT_CHANNELS {
                c /= 2;
                stages.push(EncoderBlockCfg { c, s: 1 });
            }
        }
        let downsamples = log2_exact(h, "representation side")?
            .checked_sub(1)
            .ok_or_else(|| ArtemisError::shape("representation smaller than the latent"))?;
        for _ in 0..downsamples {
            stages.push(EncoderBlockCfg {
                c: LATENT_CHANNELS,
                s: 2,
            });
        }
        Ok(Self { stem, stages })
    }

    /// Channel count after each stage, starting with the input width.
    pub fn channel_path(&self, input_channels: usize) -> Vec<usize> {
        let mut out = vec![input_channels];
        if self.stem {
            out.push(8);
        }
        for s in &self.stages {
            if out.last() != Some(&s.c) {
                out.push(s.c);
            }
        }
        out
    }

    pub fn downsample_count(&self) -> usize {
        self.stages.iter().filter(|s| s.s == 2).count()
    }
}

/// `DIM_block → 2×2×64`. Adds N(0, 1) noise to its output in training mode.
pub struct Encoder {
    block: BlockName,
    image_size: usize,
    stem: Option<(Conv2d, BatchNorm)>,
    stages: Vec<EncoderBlock>,
    noise: bool,
}

impl Encoder {
    pub fn new(
        store: &ParamStore,
        block: BlockName,
        image_size: usize,
        noise: bool,
    ) -> Result<Self> {
        let plan = EncoderPlan::for_block(block, image_size)?;
        let (_, _, mut c_in) = block.dims_at(image_size);
        let stem = if plan.stem {
            let conv = Conv2d::new(&store.pp("stem.conv"), c_in, 8, 8, 1, Padding::Same, 1)?;
            let bn = BatchNorm::new(&store.pp("stem.bn"), 8)?;
            c_in = 8;
            Some((conv, bn))
        } else {
            None
        };
        let mut stages = Vec::new();
        for (i, cfg) in plan.stages.iter().enumerate() {
            stages.push(EncoderBlock::new(
                &store.pp(format!("stage{i}")),
                c_in,
                *cfg,
            )?);
            c_in = cfg.c;
        }
        Ok(Self {
            block,
            image_size,
            stem,
            stages,
            noise,
        })
    }

    pub fn block(&self) -> BlockName {
        self.block
    }

    pub fn forward_t(
        &self,
        x: &Tensor,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let (eh, ew, ec) = self.block.dims_at(self.image_size);
        if (h, w, c) != (eh, ew, ec) {
            return Err(ArtemisError::shape(format!(
                "{} encoder expects {eh}×{ew}×{ec}, got {h}×{w}×{c}",
                self.block
            )));
        }
        let mut x = x.clone();
        if let Some((conv, bn)) = &self.stem {
            x = leaky_relu(&bn.forward_t(&conv.forward(&x)?, train)?)?;
        }
        for s in &self.stages {
            x = s.forward_t(&x, train)?;
        }
        match rng {
            Some(rng) if train && self.noise => {
                let noise = gaussian_tensor(rng, x.shape(), x.dtype(), x.device())?;
                Ok((x + noise)?)
            }
            _ => Ok(x),
        }
    }
}

pub const GROUP_DECODER_STAGES: [GroupDecoderBlockCfg; 3] = [
    GroupDecoderBlockCfg { c: 16, k: 8 },
    GroupDecoderBlockCfg { c: 8, k: 8 },
    GroupDecoderBlockCfg { c: 4, k: 4 },
];

const ATTENTION_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderPlan {
    pub batch: Vec<BatchDecoderBlockCfg>,
    pub group: Vec<GroupDecoderBlockCfg>,
}

impl DecoderPlan {
    /// One upsampling block per doubling from 2 to `image_size` (seven at
    /// 256); attention on the first four.
    pub fn new(image_size: usize, rule: DecoderChannelRule) -> Result<Self> {
        let n = log2_exact(image_size, "image size")? - 1;
        let mut c = LATENT_CHANNELS;
        let batch = (0..n)
            .map(|i| {
                c = rule.next(c);
                BatchDecoderBlockCfg {
                    c,
                    attention: i < ATTENTION_BLOCKS,
                }
            })
            .collect();
        Ok(Self {
            batch,
            group: GROUP_DECODER_STAGES.to_vec(),
        })
    }
}

/// `2×2×64 → S×S×3` in `[0, 255]`.
pub struct Decoder {
    batch: Vec<BatchDecoderBlock>,
    group: Vec<GroupDecoderBlock>,
    out: Conv2d,
    image_size: usize,
}

impl Decoder {
    pub fn new(store: &ParamStore, image_size: usize, rule: DecoderChannelRule) -> Result<Self> {
        let plan = DecoderPlan::new(image_size, rule)?;
        let mut c_in = LATENT_CHANNELS;
        let mut batch = Vec::new();
        for (i, cfg) in plan.batch.iter().enumerate() {
            batch.push(BatchDecoderBlock::new(
                &store.pp(format!("up{i}")),
                c_in,
                *cfg,
            )?);
            c_in = cfg.c;
        }
        let mut group = Vec::new();
        for (i, cfg) in plan.group.iter().enumerate() {
            group.push(GroupDecoderBlock::new(
                &store.pp(format!("group{i}")),
                c_in,
                *cfg,
            )?);
            c_in = cfg.c;
        }
        let out = Conv2d::new(&store.pp("out"), c_in, 3, 3, 1, Padding::Same, 1)?;
        Ok(Self {
            batch,
            group,
            out,
            image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn batch_blocks(&self) -> &[BatchDecoderBlock] {
        &self.batch
    }

    pub fn forward_t(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if (c, h, w) != (LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE) {
            return Err(ArtemisError::shape(format!(
                "decoder expects 2×2×64 latents, got {h}×{w}×{c}"
            )));
        }
        let mut x = z.clone();
        for b in &self.batch {
            x = b.forward_t(&x, train)?;
        }
        for g in &self.group {
            x = g.forward(&x)?;
        }
        Ok((candle_nn::ops::sigmoid(&self.out.forward(&x)?)? * 255.0)?)
    }
}

/// `Σᵢ ‖xᵢ − x′ᵢ‖_F` over the leading (batch) axis.
pub fn reconstruction_loss(x: &Tensor, x_rec: &Tensor) -> Result<Tensor> {
    if x.shape() != x_rec.shape() {
        return Err(ArtemisError::shape(format!(
            "reconstruction of shape {:?} compared against {:?}",
            x_rec.dims(),
            x.dims()
        )));
    }
    let n = x.dim(0)?;
    let sq = (x - x_rec)?.sqr()?.reshape((n, ()))?.sum(1)?;
    Ok(safe_sqrt(&sq)?.sum_all()?)
}

/// `VGG_block(Decoder(Encoder_block(x)))`.
pub fn autoencoder_forward(
    encoder: &Encoder,
    decoder: &Decoder,
    backbone: &Backbone,
    block: BlockName,
    x: &Tensor,
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    if block != encoder.block() {
        return Err(ArtemisError::config(format!(
            "{block} representation given to the {} encoder",
            encoder.block()
        )));
    }
    let z = encoder.forward_t(x, train, rng)?;
    let images = decoder.forward_t(&z, train)?;
    let mut reps = backbone.extract(&images, &[block])?;
    Ok(reps.remove(&block).expect("requested block extracted"))
}

/// Encoders for each configured block plus the shared decoder, in one store.
pub struct Autoencoder {
    pub store: ParamStore,
    pub encoders: BTreeMap<BlockName, Encoder>,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(cfg: &TrainingConfig, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(cfg.seed, dtype, device);
        Self::in_store(store, cfg)
    }

    pub fn in_store(store: ParamStore, cfg: &TrainingConfig) -> Result<Self> {
        let mut encoders = BTreeMap::new();
        for &b in &cfg.blocks {
            let enc = Encoder::new(
                &store.pp("encoder").pp(b.as_str()),
                b,
                cfg.image_size,
                cfg.encoder_noise,
            )?;
            encoders.insert(b, enc);
        }
        let decoder = Decoder::new(
            &store.pp("decoder"),
            cfg.image_size,
            cfg.decoder_channel_rule,
        )?;
        Ok(Self {
            store,
            encoders,
            decoder,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeRecord {
    pub step: usize,
    pub epoch: u64,
    pub loss_ae: f64,
}

/// Where a trainer persists checkpoints and metrics.
#[derive(Debug, Clone)]
pub struct StageDir(pub PathBuf);

impl StageDir {
    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.jsonl")
    }
}

/// Stateful reconstruction trainer; resumable from any checkpoint it wrote.
pub struct AeTrainer<'a> {
    cfg: TrainingConfig,
    backbone: &'a Backbone,
    dataset: &'a Dataset,
    model: Autoencoder,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    history: Vec<AeRecord>,
}

const AE_RNG_SALT: u64 = 0xA17E_0001;

impl<'a> AeTrainer<'a> {
    pub fn new(cfg: &TrainingConfig, dataset: &'a Dataset, backbone: &'a Backbone) -> Result<Self> {
        cfg.validate()?;
        if dataset.image_size() != cfg.image_size {
            return Err(ArtemisError::config(format!(
                "dataset prepared at {} px, config wants {}",
                dataset.image_size(),
                cfg.image_size
            )));
        }
        let model = Autoencoder::new(cfg, backbone.dtype(), backbone.device())?;
        let adam = Adam::new(model.store.trainable(), cfg.adam(cfg.lr_ae))?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            dataset,
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ AE_RNG_SALT),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Autoencoder {
        &self.model
    }

    pub fn into_model(self) -> Autoencoder {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[AeRecord] {
        &self.history
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.ae_epochs * self.dataset.batches_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn train_step(&mut self) -> Result<AeRecord> {
        let (epoch, images) = self.dataset.batch_for_step(self.step)?;
        let x = images_to_batch(&images, self.backbone.dtype(), self.backbone.device())?;
        let reps = self.backbone.extract(&x, &self.cfg.blocks)?;
        let mut total: Option<Tensor> = None;
        for (block, rep) in &reps {
            let enc = &self.model.encoders[block];
            let rec = autoencoder_forward(
                enc,
                &self.model.decoder,
                self.backbone,
                *block,
                rep,
                true,
                Some(&mut self.rng),
            )?;
            let l = reconstruction_loss(rep, &rec)?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let loss = total.expect("at least one block");
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(ArtemisError::NonFinite {
                what: "loss_ae".into(),
                step: self.step,
            });
        }
        self.adam.step(&loss.backward()?)?;
        let rec = AeRecord {
            step: self.step,
            epoch,
            loss_ae: value,
        };
        self.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Train until `total_steps`, checkpointing into `dir` when given.
    pub fn run(&mut self, dir: Option<&StageDir>) -> Result<()> {
        let mut metrics = match dir {
            Some(d) => Some(MetricsWriter::append(&d.metrics())?),
            None => None,
        };
        let total = self.total_steps();
        while self.step < total {
            match self.train_step() {
                Ok(rec) => {
                    if rec.step % 10 == 0 {
                        log::info!(
                            "ae step {} epoch {} loss_ae {:.4}",
                            rec.step,
                            rec.epoch,
                            rec.loss_ae
                        );
                    }
                    if let Some(m) = metrics.as_mut() {
                        m.write(&rec)?;
                    }
                }
                Err(e @ ArtemisError::NonFinite { .. }) => {
                    if let Some(d) = dir {
                        let p = save_checkpoint(&self.checkpoint()?, d.path(), true)?;
                        log::error!("diagnostic checkpoint written to {}", p.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            let every = self.cfg.checkpoint_every;
            if let Some(d) = dir {
                if every > 0 && self.step % every == 0 && self.step < total {
                    save_checkpoint(&self.checkpoint()?, d.path(), false)?;
                }
            }
        }
        if let Some(d) = dir {
            save_checkpoint(&self.checkpoint()?, d.path(), false)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: HashMap<String, Tensor> = self.model.store.tensors().into_iter().collect();
        tensors.extend(self.adam.state_tensors("adam"));
        let per_epoch = self.dataset.batches_per_epoch().max(1);
        Ok(Checkpoint {
            meta: CheckpointMeta::new(
                CheckpointKind::Autoencoder,
                self.step,
                (self.step / per_epoch) as u64,
                &self.cfg,
                self.rng.clone(),
                [("adam".to_string(), self.adam.steps())].into(),
            ),
            tensors,
        })
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let meta = &ckpt.meta;
        if meta.kind != CheckpointKind::Autoencoder {
            return Err(ArtemisError::config("not an autoencoder checkpoint"));
        }
        meta.check_compatible(&self.cfg)?;
        self.model.store.load(&ckpt.tensors)?;
        self.adam.load_state(
            "adam",
            &ckpt.tensors,
            meta.optimizer_steps.get("adam").copied().unwrap_or(0),
        )?;
        self.rng = meta.rng.clone();
        self.step = meta.step;
        Ok(())
    }
}

/// Outcome of a full pretraining run.
pub struct AeOutcome {
    pub model: Autoencoder,
    pub history: Vec<AeRecord>,
}

/// Pretrain without persisting anything.
pub fn train_autoencoder(
    cfg: &TrainingConfig,
    dataset: &Dataset,
    backbone: &Backbone,
) -> Result<AeOutcome> {
    let mut t = AeTrainer::new(cfg, dataset, backbone)?;
    t.run(None)?;
    let history = t.history.clone();
    Ok(AeOutcome {
        model: t.into_model(),
        history,
    })
}
