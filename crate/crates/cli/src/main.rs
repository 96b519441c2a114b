//! `artemis`: preprocess images, pretrain the autoencoder, train the GAN,
//! and sample from it.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use artemis_core::config::{DecoderChannelRule, LceMode, TrainingConfig};
use artemis_core::vgg::parse_block_list;
use artemis_core::ArtemisError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "artemis",
    version,
    about = "Abstract-art GAN over VGG-19 style representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a directory of JPEG/PNG files and write a dataset manifest.
    Preprocess {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "manifest.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain one encoder per block and the shared decoder.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from the newest autoencoder checkpoint of the run.
        #[arg(long)]
        resume: bool,
    },
    /// Adversarial training of the pretrained decoder against one
    /// discriminator per block.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        /// Autoencoder checkpoint, file or directory; defaults to the run's newest.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Start the generator from random weights instead.
        #[arg(long)]
        from_scratch: bool,
        /// Continue from the newest GAN checkpoint of the run.
        #[arg(long)]
        resume: bool,
    },
    /// Decode random latents with a trained generator and write PNGs.
    Sample {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one grid image instead of one file per sample.
        #[arg(long)]
        grid: bool,
        /// GAN checkpoint, file or directory; defaults to the run's newest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "artemis")]
        run_name: String,
    },
    /// Print metadata for a checkpoint, run directory or dataset manifest.
    Inspect { path: PathBuf },
    /// Write a randomly initialised VGG-19 trunk in the expected weight layout.
    ///
    /// For smoke runs where no ImageNet-pretrained export is available.
    InitVgg {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Halving,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum LceArg {
    Off,
    Reconstruction,
}

/// Flags shared by the training commands. Each one overrides the config-file
/// key of the same name (dashes become underscores).
#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// TOML (`key = value`) or JSON file with any `TrainingConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    /// Comma-separated block names, e.g. `block1_conv1,block4_conv1`.
    #[arg(long, visible_alias = "block")]
    blocks: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs for this stage (`ae_epochs` or `gan_epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    k_diversity: Option<usize>,
    #[arg(long)]
    label_noise_is_sigma: Option<bool>,
    #[arg(long, value_enum)]
    l_ce_mode: Option<LceArg>,
    #[arg(long, value_enum)]
    decoder_channel_rule: Option<RuleArg>,
    #[arg(long)]
    encoder_noise: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_ae: Option<f64>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    lambda_ga: Option<f64>,
    #[arg(long)]
    lambda_dv: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Pretrain,
    Train,
}

impl TrainArgs {
    fn resolve(&self, stage: Stage) -> artemis_core::Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::from_file(p)?,
            None => TrainingConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        set!(data_dir, manifest, vgg_weights);
        set!(
            image_size,
            batch_size,
            k_diversity,
            label_noise_is_sigma,
            encoder_noise,
            seed
        );
        set!(
            lr_ae,
            lr_g,
            lr_d,
            beta1,
            beta2,
            lambda_ga,
            lambda_dv,
            checkpoint_every,
            run_name
        );
        if let Some(b) = &self.blocks {
            cfg.blocks = parse_block_list(b)?;
        }
        if let Some(m) = self.max_steps {
            cfg.max_steps = Some(m);
        }
        if let Some(e) = self.epochs {
            match stage {
                Stage::Pretrain => cfg.ae_epochs = e,
                Stage::Train => cfg.gan_epochs = e,
            }
        }
        if let Some(m) = self.l_ce_mode {
            cfg.l_ce_mode = match m {
                LceArg::Off => LceMode::Off,
                LceArg::Reconstruction => LceMode::Reconstruction,
            };
        }
        if let Some(r) = self.decoder_channel_rule {
            cfg.decoder_channel_rule = match r {
                RuleArg::Halving => DecoderChannelRule::Halving,
                RuleArg::Literal => DecoderChannelRule::Literal,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess {
            data_dir,
            out,
            seed,
        } => commands::preprocess(&data_dir, &out, seed),
        Command::Pretrain { train, resume } => {
            let cfg = train.resolve(Stage::Pretrain)?;
            commands::pretrain(&cfg, resume)
        }
        Command::Train {
            train,
            pretrained,
            from_scratch,
            resume,
        } => {
            let mut cfg = train.resolve(Stage::Train)?;
            if pretrained.is_some() {
                cfg.pretrained = pretrained;
            }
            cfg.from_scratch |= from_scratch;
            commands::train(&cfg, resume)
        }
        Command::Sample {
            n,
            seed,
            grid,
            checkpoint,
            out,
            run_name,
        } => commands::sample(n, seed, grid, checkpoint, out, &run_name),
        Command::Inspect { path } => commands::inspect(&path),
        Command::InitVgg { out, seed } => commands::init_vgg(&out, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                c.downcast_ref::<ArtemisError>()
                    .is_some_and(ArtemisError::is_usage)
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
