//! Abstract-art synthesis with an autoencoder-pretrained generator and an
//! ensemble of discriminators, one per VGG-19 feature block.
//!
//! Pipeline:
//! 1. [`data`] normalises source images to 256×256×3 and serves batches.
//! 2. [`vgg`] maps images to style representations for a block set.
//! 3. [`autoencoder`] pretrains per-block encoders with one shared decoder.
//! 4. [`gan`] reuses that decoder as the generator and trains it against a
//!    discriminator per block, plus a diversity term.
//! 5. [`io`] persists checkpoints, metrics and PNG samples.
//!
//! All tensors are `(N, C, H, W)`.

pub mod autoencoder;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod io;
pub mod nn;
pub mod params;
pub mod vgg;

pub use autoencoder::{
    autoencoder_forward, reconstruction_loss, sample_latents, train_autoencoder, AeRecord,
    AeTrainer, Autoencoder, Decoder, DecoderPlan, Encoder, EncoderPlan, LatentCode, StageDir,
};
pub use config::{DecoderChannelRule, LceMode, TrainingConfig};
pub use data::{
    build_manifest, iterate_batches, preprocess_image, Dataset, DatasetManifest, ImageTensor,
};
pub use error::{ArtemisError, Result};
pub use gan::{
    diversity_loss, generator_adversarial_loss, smooth_labels, total_generator_loss, train_gan,
    Discriminator, GanRecord, GanTrainer, Generator,
};
pub use io::{export_samples, load_checkpoint, save_checkpoint, Checkpoint, RunManifest};
pub use params::{Adam, AdamConfig, ParamStore};
pub use vgg::{block_dims, Backbone, BlockName, BlockSpec, StyleRepresentation};
