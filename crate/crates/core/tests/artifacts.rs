mod common;

use std::collections::HashMap;

use artemis_core::config::TrainingConfig;
use artemis_core::data::ImageTensor;
use artemis_core::io::{
    export_samples, latest_checkpoint, load_checkpoint, save_checkpoint, sidecar_path, Checkpoint,
    CheckpointKind, CheckpointMeta, RunManifest, FORMAT_VERSION,
};
use artemis_core::vgg::BlockName;
use artemis_core::ArtemisError;
use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_checkpoint(step: usize) -> Checkpoint {
    let dev = Device::Cpu;
    let tensors: HashMap<String, Tensor> = [
        (
            "enc.w".to_string(),
            Tensor::new(&[[0.1f32, -0.2], [1e-30, f32::MAX]], &dev).unwrap(),
        ),
        (
            "dec.b".to_string(),
            Tensor::new(&[3.0f64, -0.0, 7.25], &dev).unwrap(),
        ),
    ]
    .into();
    Checkpoint {
        meta: CheckpointMeta::new(
            CheckpointKind::Autoencoder,
            step,
            0,
            &TrainingConfig::default(),
            ChaCha8Rng::seed_from_u64(4),
            [("adam".to_string(), step as u64)].into(),
        ),
        tensors,
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    match t.dtype() {
        candle_core::DType::F32 => t
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits() as u64)
            .collect(),
        _ => t
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect(),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = sample_checkpoint(12);
    let path = save_checkpoint(&ckpt, tmp.path(), false).unwrap();
    assert!(path.ends_with("step_12.ckpt"));
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.meta.step, 12);
    assert_eq!(back.meta.rng, ckpt.meta.rng);
    assert_eq!(back.meta.optimizer_steps, ckpt.meta.optimizer_steps);
    assert_eq!(back.tensors.len(), ckpt.tensors.len());
    for (k, v) in &ckpt.tensors {
        assert_eq!(bits(&back.tensors[k]), bits(v), "{k}");
        assert_eq!(back.tensors[k].dtype(), v.dtype());
    }
}

#[test]
fn newer_format_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = save_checkpoint(&sample_checkpoint(1), tmp.path(), false).unwrap();
    let side = sidecar_path(&path);
    let mut meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&side).unwrap()).unwrap();
    meta["format_version"] = (FORMAT_VERSION + 1).into();
    std::fs::write(&side, meta.to_string()).unwrap();
    match load_checkpoint(&path) {
        Err(ArtemisError::Version { found, expected }) => {
            assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("expected a version error, got {:?}", other.err()),
    }
}

#[test]
fn corrupted_weights_fail_the_integrity_check() {
    let tmp = tempfile::tempdir().unwrap();
    let path = save_checkpoint(&sample_checkpoint(1), tmp.path(), false).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(ArtemisError::Integrity { .. })
    ));
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    // A regular file where a directory is needed fails even for root.
    let err = save_checkpoint(&sample_checkpoint(1), &blocker.join("ae"), false).unwrap_err();
    assert!(matches!(err, ArtemisError::Io { .. }), "{err}");
}

#[test]
fn block_mismatch_is_a_config_error() {
    let meta = sample_checkpoint(1).meta;
    let other = TrainingConfig {
        blocks: vec![BlockName::Block4Conv1],
        ..TrainingConfig::default()
    };
    let err = meta.check_compatible(&other).unwrap_err();
    assert!(matches!(err, ArtemisError::Config(_)), "{err}");
    meta.check_compatible(&TrainingConfig::default()).unwrap();
}

#[test]
fn latest_checkpoint_picks_highest_step() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(latest_checkpoint(tmp.path()).unwrap().is_none());
    for step in [5, 40, 9] {
        save_checkpoint(&sample_checkpoint(step), tmp.path(), false).unwrap();
    }
    save_checkpoint(&sample_checkpoint(99), tmp.path(), true).unwrap();
    let latest = latest_checkpoint(tmp.path()).unwrap().unwrap();
    assert!(latest.ends_with("step_40.ckpt"), "{}", latest.display());
    assert_eq!(load_checkpoint(tmp.path()).unwrap().meta.step, 40);
}

#[test]
fn run_manifest_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let m = RunManifest::new(&TrainingConfig::default());
    m.write(tmp.path()).unwrap();
    assert_eq!(RunManifest::read(tmp.path()).unwrap(), m);
}

fn flat(v: f32, side: usize) -> ImageTensor {
    ImageTensor::from_fn(side, side, |_, _, _| v)
}

#[test]
fn export_writes_one_png_per_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs: Vec<_> = (0..5).map(|i| flat(i as f32 * 50.0, 256)).collect();
    let paths = export_samples(&imgs, tmp.path(), false).unwrap();
    assert_eq!(paths.len(), 5);
    for (i, p) in paths.iter().enumerate() {
        let img = image::open(p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (256, 256));
        assert_eq!(img.get_pixel(10, 10).0, [(i * 50) as u8; 3]);
    }
}

#[test]
fn grid_of_four_is_two_by_two() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs: Vec<_> = [0.0, 127.5, 200.0, 255.0]
        .iter()
        .map(|&v| flat(v, 16))
        .collect();
    let paths = export_samples(&imgs, tmp.path(), true).unwrap();
    assert_eq!(paths.len(), 1);
    let g = image::open(&paths[0]).unwrap().to_rgb8();
    assert_eq!(g.dimensions(), (32, 32));
    assert_eq!(g.get_pixel(20, 3).0, [128; 3], "127.5 rounds half up");
    assert_eq!(g.get_pixel(3, 20).0, [200; 3]);
    assert_eq!(g.get_pixel(20, 20).0, [255; 3]);
}
