//! Generator, discriminator ensemble, adversarial and diversity losses, and
//! the alternating training loop.

mod losses;
mod models;
mod train;

pub use losses::{
    bce, discriminator_loss, distinct_latents, diversity_loss, generator_adversarial_loss,
    label_noise, smooth_labels, total_generator_loss, DIVERSITY_EPS, LOG_FLOOR,
};
pub use models::{
    sample_images, Discriminator, DiscriminatorPlan, Generator, DENSE_WIDTH, DISCRIMINATOR_BLOCKS,
};
pub use train::{decoder_from_checkpoint, train_gan, GanOutcome, GanRecord, GanTrainer};
