use std::path::{Path, PathBuf};

use anyhow::Context;
use artemis_core::autoencoder::{AeTrainer, StageDir};
use artemis_core::config::TrainingConfig;
use artemis_core::data::{build_manifest, Dataset, DatasetManifest};
use artemis_core::gan::{decoder_from_checkpoint, sample_images, GanTrainer};
use artemis_core::io::{
    export_samples, latest_checkpoint, load_checkpoint, CheckpointKind, RunManifest,
};
use artemis_core::vgg::Backbone;
use artemis_core::{ArtemisError, Checkpoint};
use candle_core::{DType, Device};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    ArtemisError::config(msg).into()
}

pub fn preprocess(data_dir: &Path, out: &Path, seed: u64) -> anyhow::Result<()> {
    let manifest = build_manifest(data_dir, seed)?;
    manifest.write(out)?;
    println!(
        "{} images ({} skipped) → {}",
        manifest.len(),
        manifest.skipped.len(),
        out.display()
    );
    Ok(())
}

fn load_manifest(cfg: &TrainingConfig) -> anyhow::Result<DatasetManifest> {
    match (&cfg.manifest, &cfg.data_dir) {
        (Some(m), _) => {
            if !m.is_file() {
                return Err(usage(format!("manifest {} does not exist", m.display())));
            }
            Ok(DatasetManifest::read(m)?)
        }
        (None, Some(d)) => Ok(build_manifest(d, cfg.seed)?),
        (None, None) => Err(usage("either manifest or data_dir is required")),
    }
}

fn load_backbone(cfg: &TrainingConfig) -> anyhow::Result<Backbone> {
    let path = cfg
        .vgg_weights
        .as_ref()
        .ok_or_else(|| usage("vgg_weights is required"))?;
    if !path.is_file() {
        return Err(usage(format!(
            "VGG weights {} do not exist",
            path.display()
        )));
    }
    Ok(Backbone::load(path, DType::F32, &Device::Cpu)?)
}

/// Everything a training stage needs, loaded before any model is built.
struct Prepared {
    dataset: Dataset,
    backbone: Backbone,
    run_dir: PathBuf,
}

fn prepare(cfg: &TrainingConfig) -> anyhow::Result<Prepared> {
    let manifest = load_manifest(cfg)?;
    let dataset = Dataset::new(manifest, cfg.batch_size, cfg.image_size)?;
    let backbone = load_backbone(cfg)?;
    let run_dir = cfg.run_dir();
    let path = RunManifest::new(cfg).write(&run_dir)?;
    log::info!("effective config recorded in {}", path.display());
    Ok(Prepared {
        dataset,
        backbone,
        run_dir,
    })
}

fn resume_point(stage: &StageDir) -> anyhow::Result<Checkpoint> {
    let path = latest_checkpoint(stage.path())?.ok_or_else(|| {
        usage(format!(
            "nothing to resume: no checkpoint in {}",
            stage.path().display()
        ))
    })?;
    log::info!("resuming from {}", path.display());
    Ok(load_checkpoint(&path)?)
}

fn require_kind(ckpt: &Checkpoint, kind: CheckpointKind, path: &Path) -> anyhow::Result<()> {
    if ckpt.meta.kind != kind {
        return Err(usage(format!(
            "{} is a {:?} checkpoint, expected {kind:?}",
            path.display(),
            ckpt.meta.kind
        )));
    }
    Ok(())
}

pub fn pretrain(cfg: &TrainingConfig, resume: bool) -> anyhow::Result<()> {
    let p = prepare(cfg)?;
    let stage = StageDir(p.run_dir.join(CheckpointKind::Autoencoder.dir_name()));
    let mut trainer = AeTrainer::new(cfg, &p.dataset, &p.backbone)?;
    if resume {
        trainer.restore(&resume_point(&stage)?)?;
    }
    trainer.run(Some(&stage))?;
    let last = trainer.history().last();
    println!(
        "autoencoder: {} steps, final loss {}, checkpoints in {}",
        trainer.step(),
        last.map_or("n/a".into(), |r| format!("{:.4}", r.loss_ae)),
        stage.path().display()
    );
    Ok(())
}

pub fn train(cfg: &TrainingConfig, resume: bool) -> anyhow::Result<()> {
    let pretrained = if cfg.from_scratch {
        None
    } else {
        let path = cfg
            .pretrained
            .clone()
            .unwrap_or_else(|| cfg.run_dir().join(CheckpointKind::Autoencoder.dir_name()));
        let found = if path.is_dir() {
            latest_checkpoint(&path)?
        } else {
            path.is_file().then(|| path.clone())
        };
        let Some(file) = found else {
            return Err(usage(format!(
                "no pretrained decoder checkpoint at {}; run `artemis pretrain` or pass --from-scratch",
                path.display()
            )));
        };
        let ckpt = load_checkpoint(&file)?;
        require_kind(&ckpt, CheckpointKind::Autoencoder, &file)?;
        Some(ckpt)
    };
    let p = prepare(cfg)?;
    let stage = StageDir(p.run_dir.join(CheckpointKind::Gan.dir_name()));
    let mut trainer = GanTrainer::new(cfg, &p.dataset, &p.backbone, pretrained.as_ref())?;
    if resume {
        trainer.restore(&resume_point(&stage)?)?;
    }
    trainer.run(Some(&stage))?;
    println!(
        "gan: {} steps, {} discriminator(s), checkpoints in {}",
        trainer.step(),
        trainer.discriminators().len(),
        stage.path().display()
    );
    Ok(())
}

pub fn sample(
    n: usize,
    seed: u64,
    grid: bool,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    run_name: &str,
) -> anyhow::Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let run_dir = TrainingConfig::runs_root().join(run_name);
    let path = checkpoint.unwrap_or_else(|| run_dir.join(CheckpointKind::Gan.dir_name()));
    let file = if path.is_dir() {
        latest_checkpoint(&path)?
    } else {
        path.is_file().then(|| path.clone())
    };
    let Some(file) = file else {
        return Err(usage(format!("no GAN checkpoint at {}", path.display())));
    };
    let ckpt = load_checkpoint(&file)?;
    require_kind(&ckpt, CheckpointKind::Gan, &file)?;
    let decoder = decoder_from_checkpoint(&ckpt, DType::F32)?;
    let images = sample_images(&decoder, n, seed, DType::F32)?;
    let out = out.unwrap_or_else(|| run_dir.join("samples"));
    for p in export_samples(&images, &out, grid)? {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn inspect(path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        if path.join("manifest.json").is_file() {
            let m = RunManifest::read(path)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            for kind in [CheckpointKind::Autoencoder, CheckpointKind::Gan] {
                let dir = path.join(kind.dir_name());
                if let Some(latest) = latest_checkpoint(&dir)? {
                    println!("latest {kind:?} checkpoint: {}", latest.display());
                }
            }
            return Ok(());
        }
        if let Some(latest) = latest_checkpoint(path)? {
            return inspect(&latest);
        }
        return Err(usage(format!(
            "{} holds neither a run nor checkpoints",
            path.display()
        )));
    }
    if !path.is_file() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    if path.extension().is_some_and(|e| e == "ckpt") {
        let ckpt = load_checkpoint(path)?;
        let elements: usize = ckpt.tensors.values().map(|t| t.elem_count()).sum();
        println!("{}", serde_json::to_string_pretty(&ckpt.meta)?);
        println!("{} tensors, {elements} values", ckpt.tensors.len());
        return Ok(());
    }
    let m = DatasetManifest::read(path).with_context(|| {
        format!(
            "{} is not a checkpoint, run directory or manifest",
            path.display()
        )
    })?;
    println!("dataset manifest: {} images, seed {}", m.len(), m.seed);
    for e in m.entries.iter().take(10) {
        println!(
            "  {} {:?} {:?}",
            e.path.display(),
            e.original_size,
            e.action
        );
    }
    if m.len() > 10 {
        println!("  … {} more", m.len() - 10);
    }
    Ok(())
}

pub fn init_vgg(out: &Path, seed: u64) -> anyhow::Result<()> {
    Backbone::write_random_weights(out, seed)?;
    log::warn!(
        "{} holds random weights; use an ImageNet-pretrained export for real runs",
        out.display()
    );
    println!("{}", out.display());
    Ok(())
}
