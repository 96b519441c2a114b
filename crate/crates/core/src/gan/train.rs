use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{
    discriminator_loss, distinct_latents, diversity_loss, generator_adversarial_loss,
    smooth_labels, total_generator_loss,
};
use super::models::{Discriminator, Generator};
use crate::autoencoder::{reconstruction_loss, sample_latents, Decoder, Encoder, StageDir};
use crate::config::{LceMode, TrainingConfig};
use crate::data::{images_to_batch, Dataset, ImageTensor};
use crate::error::{ArtemisError, Result};
use crate::io::{save_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta, MetricsWriter};
use crate::params::{Adam, ParamStore};
use crate::vgg::{Backbone, BlockName};

/// Metrics for one adversarial step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanRecord {
    pub step: usize,
    pub epoch: u64,
    pub loss_d: BTreeMap<BlockName, f64>,
    pub loss_ga: f64,
    pub loss_dv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_ce: Option<f64>,
    pub loss_g: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

const GAN_STORE_SALT: u64 = 0x6A4E_0001;
const GAN_RNG_SALT: u64 = 0x6A4E_0002;
const LATENT_REDRAW_BUDGET: usize = 16;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mean(t: &Tensor) -> Result<f64> {
    scalar(&t.mean_all()?)
}

/// Generator plus one discriminator per block, with their optimisers.
///
/// Invariant: `discriminators` has exactly the generator's blocks as keys.
pub struct GanTrainer<'a> {
    cfg: TrainingConfig,
    backbone: &'a Backbone,
    dataset: &'a Dataset,
    store: ParamStore,
    generator: Generator,
    discriminators: BTreeMap<BlockName, Discriminator>,
    encoders: BTreeMap<BlockName, Encoder>,
    adam_g: Adam,
    adam_d: Adam,
    rng: ChaCha8Rng,
    step: usize,
    history: Vec<GanRecord>,
}

impl<'a> GanTrainer<'a> {
    /// `pretrained` is an autoencoder checkpoint whose decoder seeds the
    /// generator; it may be omitted only with `from_scratch`.
    pub fn new(
        cfg: &TrainingConfig,
        dataset: &'a Dataset,
        backbone: &'a Backbone,
        pretrained: Option<&Checkpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.image_size() != cfg.image_size {
            return Err(ArtemisError::config(format!(
                "dataset prepared at {} px, config wants {}",
                dataset.image_size(),
                cfg.image_size
            )));
        }
        if pretrained.is_none() && !cfg.from_scratch {
            return Err(ArtemisError::config(
                "a pretrained decoder checkpoint is required unless from_scratch is set",
            ));
        }
        if pretrained.is_none() && cfg.l_ce_mode == LceMode::Reconstruction {
            return Err(ArtemisError::config(
                "l_ce_mode = reconstruction needs pretrained encoders",
            ));
        }
        let store = ParamStore::new(
            cfg.seed ^ GAN_STORE_SALT,
            backbone.dtype(),
            backbone.device(),
        );
        let decoder = Decoder::new(
            &store.pp("decoder"),
            cfg.image_size,
            cfg.decoder_channel_rule,
        )?;
        let mut encoders = BTreeMap::new();
        if cfg.l_ce_mode == LceMode::Reconstruction {
            for &b in &cfg.blocks {
                let enc = Encoder::new(
                    &store.pp("encoder").pp(b.as_str()),
                    b,
                    cfg.image_size,
                    false,
                )?;
                encoders.insert(b, enc);
            }
        }
        if let Some(ckpt) = pretrained {
            let saved = &ckpt.meta.config;
            if saved.image_size != cfg.image_size
                || saved.decoder_channel_rule != cfg.decoder_channel_rule
            {
                return Err(ArtemisError::config(
                    "pretrained decoder was built for a different image_size / decoder_channel_rule",
                ));
            }
            store.pp("decoder").load(&ckpt.tensors)?;
            for b in encoders.keys() {
                store
                    .pp("encoder")
                    .pp(b.as_str())
                    .load(&ckpt.tensors)
                    .map_err(|_| {
                        ArtemisError::config(format!("pretrained checkpoint has no {b} encoder"))
                    })?;
            }
        }
        let generator = Generator::new(decoder, &cfg.blocks)?;
        let mut discriminators = BTreeMap::new();
        for &b in &cfg.blocks {
            discriminators.insert(
                b,
                Discriminator::new(&store.pp("disc").pp(b.as_str()), b, cfg.image_size)?,
            );
        }
        let adam_g = Adam::new(store.pp("decoder").trainable(), cfg.adam(cfg.lr_g))?;
        let adam_d = Adam::new(store.pp("disc").trainable(), cfg.adam(cfg.lr_d))?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            dataset,
            store,
            generator,
            discriminators,
            encoders,
            adam_g,
            adam_d,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ GAN_RNG_SALT),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminators(&self) -> &BTreeMap<BlockName, Discriminator> {
        &self.discriminators
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[GanRecord] {
        &self.history
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.gan_epochs * self.dataset.batches_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    fn smoothed(&mut self, label: f32, n: usize) -> Result<Tensor> {
        let ys = smooth_labels(&vec![label; n], self.cfg.label_noise_sigma(), &mut self.rng)?;
        Ok(Tensor::from_vec(ys, n, self.backbone.device())?.to_dtype(self.backbone.dtype())?)
    }

    fn check_finite(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(ArtemisError::NonFinite {
                what: what.to_string(),
                step: self.step,
            })
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<GanRecord> {
        let dtype = self.backbone.dtype();
        let device = self.backbone.device().clone();
        let (epoch, images) = self.dataset.batch_for_step(self.step)?;
        let real = images_to_batch(&images, dtype, &device)?;
        let n = real.dim(0)?;
        let blocks = self.cfg.blocks.clone();
        let real_reps = self.backbone.extract(&real, &blocks)?;

        let z = sample_latents(&mut self.rng, n, dtype, &device)?;
        let (_, fake_reps) = self.generator.forward_t(&z, self.backbone, true)?;

        // Discriminators.
        let mut loss_d = BTreeMap::new();
        let mut d_total: Option<Tensor> = None;
        let (mut real_means, mut fake_means) = (Vec::new(), Vec::new());
        for &b in &blocks {
            let y_real = self.smoothed(1.0, n)?;
            let y_fake = self.smoothed(0.0, n)?;
            let d = &self.discriminators[&b];
            let p_real = d.forward_t(&real_reps[&b], true)?;
            let p_fake = d.forward_t(&fake_reps[&b].detach(), true)?;
            real_means.push(mean(&p_real)?);
            fake_means.push(mean(&p_fake)?);
            let l = discriminator_loss(&p_real, &p_fake, &y_real, &y_fake)?;
            let v = scalar(&l)?;
            self.check_finite(&format!("loss_d[{b}]"), v)?;
            loss_d.insert(b, v);
            d_total = Some(match d_total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let d_total = d_total.expect("non-empty block set");
        self.adam_d.step(&d_total.backward()?)?;

        // Generator.
        let mut fooled = BTreeMap::new();
        for &b in &blocks {
            fooled.insert(b, self.discriminators[&b].forward_t(&fake_reps[&b], true)?);
        }
        let l_ga = generator_adversarial_loss(&fooled)?;

        let k = self.cfg.k_diversity;
        let rng = &mut self.rng;
        let z_div = distinct_latents(k, LATENT_REDRAW_BUDGET, || {
            Ok(sample_latents(rng, 1, dtype, &device)?.squeeze(0)?)
        })?;
        let div_images = self.generator.decoder().forward_t(&z_div, true)?;
        let l_dv = diversity_loss(&z_div, &div_images)?;

        let l_ce = if self.cfg.l_ce_mode == LceMode::Reconstruction {
            let mut total: Option<Tensor> = None;
            for (b, enc) in &self.encoders {
                let code = enc.forward_t(&real_reps[b], false, None)?.detach();
                let rec_img = self.generator.decoder().forward_t(&code, true)?;
                let rec = self
                    .backbone
                    .extract(&rec_img, &[*b])?
                    .remove(b)
                    .expect("block extracted");
                let l = reconstruction_loss(&real_reps[b], &rec)?;
                total = Some(match total {
                    Some(t) => (t + l)?,
                    None => l,
                });
            }
            total
        } else {
            None
        };

        let l_g = total_generator_loss(&l_ga, &l_dv, l_ce.as_ref(), &self.cfg)?;
        let rec = GanRecord {
            step: self.step,
            epoch,
            loss_d,
            loss_ga: scalar(&l_ga)?,
            loss_dv: scalar(&l_dv)?,
            loss_ce: l_ce.as_ref().map(scalar).transpose()?,
            loss_g: scalar(&l_g)?,
            d_real_mean: real_means.iter().sum::<f64>() / real_means.len() as f64,
            d_fake_mean: fake_means.iter().sum::<f64>() / fake_means.len() as f64,
        };
        for (what, v) in [
            ("loss_ga", rec.loss_ga),
            ("loss_dv", rec.loss_dv),
            ("loss_g", rec.loss_g),
        ] {
            self.check_finite(what, v)?;
        }
        self.adam_g.step(&l_g.backward()?)?;

        self.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

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
                            "gan step {} loss_g {:.4} loss_ga {:.4} loss_dv {:.4} d_real {:.3} d_fake {:.3}",
                            rec.step, rec.loss_g, rec.loss_ga, rec.loss_dv, rec.d_real_mean, rec.d_fake_mean
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
        let mut tensors: HashMap<String, Tensor> = self.store.tensors().into_iter().collect();
        tensors.extend(self.adam_g.state_tensors("adam_g"));
        tensors.extend(self.adam_d.state_tensors("adam_d"));
        let per_epoch = self.dataset.batches_per_epoch().max(1);
        Ok(Checkpoint {
            meta: CheckpointMeta::new(
                CheckpointKind::Gan,
                self.step,
                (self.step / per_epoch) as u64,
                &self.cfg,
                self.rng.clone(),
                [
                    ("adam_g".to_string(), self.adam_g.steps()),
                    ("adam_d".to_string(), self.adam_d.steps()),
                ]
                .into(),
            ),
            tensors,
        })
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let meta = &ckpt.meta;
        if meta.kind != CheckpointKind::Gan {
            return Err(ArtemisError::config("not a GAN checkpoint"));
        }
        meta.check_compatible(&self.cfg)?;
        self.store.load(&ckpt.tensors)?;
        let steps = |k: &str| meta.optimizer_steps.get(k).copied().unwrap_or(0);
        self.adam_g
            .load_state("adam_g", &ckpt.tensors, steps("adam_g"))?;
        self.adam_d
            .load_state("adam_d", &ckpt.tensors, steps("adam_d"))?;
        self.rng = meta.rng.clone();
        self.step = meta.step;
        Ok(())
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<ImageTensor>> {
        self.generator.sample(n, seed, self.backbone.dtype())
    }

    pub fn into_generator(self) -> Generator {
        self.generator
    }
}

pub struct GanOutcome {
    pub generator: Generator,
    pub history: Vec<GanRecord>,
}

/// Adversarial training without persistence.
pub fn train_gan(
    cfg: &TrainingConfig,
    dataset: &Dataset,
    backbone: &Backbone,
    pretrained: Option<&Checkpoint>,
) -> Result<GanOutcome> {
    let mut t = GanTrainer::new(cfg, dataset, backbone, pretrained)?;
    t.run(None)?;
    let history = t.history.clone();
    Ok(GanOutcome {
        generator: t.into_generator(),
        history,
    })
}

/// Rebuild the generator's decoder from any checkpoint holding `decoder.*`.
pub fn decoder_from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Decoder> {
    let cfg = &ckpt.meta.config;
    let store = ParamStore::new(0, dtype, &candle_core::Device::Cpu);
    let decoder = Decoder::new(
        &store.pp("decoder"),
        cfg.image_size,
        cfg.decoder_channel_rule,
    )?;
    store.pp("decoder").load(&ckpt.tensors)?;
    Ok(decoder)
}
