mod common;

use std::collections::BTreeSet;
use std::path::Path;

use artemis_core::data::{build_manifest, iterate_batches, Dataset, DatasetManifest, CANVAS};
use artemis_core::ArtemisError;
use image::{Rgb, RgbImage};

fn write_jpegs(dir: &Path, sizes: &[(u32, u32)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, &(w, h)) in sizes.iter().enumerate() {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 90]));
        img.save(dir.join(format!("p{i}.jpg"))).unwrap();
    }
}

#[test]
fn three_jpegs_make_three_entries() {
    let tmp = tempfile::tempdir().unwrap();
    write_jpegs(tmp.path(), &[(300, 280), (100, 120), (256, 256)]);
    let m = build_manifest(tmp.path(), 0).unwrap();
    assert_eq!(m.len(), 3);
    assert!(m.skipped.is_empty());
    let sizes: BTreeSet<_> = m.entries.iter().map(|e| e.original_size).collect();
    assert_eq!(sizes, [(120, 100), (256, 256), (280, 300)].into());
}

#[test]
fn non_images_are_skipped_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    write_jpegs(tmp.path(), &[(64, 64), (80, 40)]);
    std::fs::write(tmp.path().join("readme.txt"), "hello").unwrap();
    let m = build_manifest(tmp.path(), 0).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.skipped.len(), 1);
    assert!(m.skipped[0].ends_with("readme.txt"));
}

#[test]
fn only_non_images_is_an_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("a.txt"), "x").unwrap();
    std::fs::write(tmp.path().join("b.jpg"), "not really a jpeg").unwrap();
    let err = build_manifest(tmp.path(), 0).unwrap_err();
    assert!(matches!(err, ArtemisError::EmptyDataset(_)), "{err}");
    assert!(err.is_usage());
}

#[test]
fn missing_directory_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = build_manifest(&tmp.path().join("absent"), 0).unwrap_err();
    assert!(err.is_usage(), "{err}");
}

#[test]
fn manifest_is_deterministic_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_synthetic_images(&tmp.path().join("img"), 12, 40, 3);
    let a = build_manifest(&tmp.path().join("img"), 9).unwrap();
    let b = build_manifest(&tmp.path().join("img"), 9).unwrap();
    assert_eq!(a, b);
    let c = build_manifest(&tmp.path().join("img"), 10).unwrap();
    assert_ne!(a.entries, c.entries, "seed should change the order");

    let path = tmp.path().join("m.json");
    a.write(&path).unwrap();
    assert_eq!(DatasetManifest::read(&path).unwrap(), a);
}

#[test]
fn partial_batches_are_dropped() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_synthetic_images(&tmp.path().join("a"), 17, 32, 1);
    common::write_synthetic_images(&tmp.path().join("b"), 8, 32, 2);
    let m17 = build_manifest(&tmp.path().join("a"), 0).unwrap();
    let m8 = build_manifest(&tmp.path().join("b"), 0).unwrap();

    let batches: Vec<_> = iterate_batches(&m17, 8, 0)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(batches.len(), 2);
    for b in &batches {
        assert_eq!(b.len(), 8);
        assert!(b
            .iter()
            .all(|im| im.height() == CANVAS && im.width() == CANVAS));
    }
    assert_eq!(iterate_batches(&m8, 8, 0).unwrap().count(), 1);
    assert!(Dataset::new(m8, 9, 64).is_err());
}

#[test]
fn each_epoch_visits_every_image_once() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_synthetic_images(tmp.path(), 16, 32, 4);
    let ds = Dataset::new(build_manifest(tmp.path(), 0).unwrap(), 4, 64).unwrap();
    let mut orders = Vec::new();
    for epoch in 0..3 {
        let seen: Vec<usize> = (0..ds.batches_per_epoch())
            .flat_map(|b| ds.batch_indices(epoch, b))
            .collect();
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        orders.push(seen);
    }
    assert_ne!(orders[0], orders[1]);
    // Same (epoch, batch) always yields the same pixels.
    let x = ds.batch(1, 2).unwrap();
    let y = ds.batch(1, 2).unwrap();
    assert_eq!(x, y);
    assert!(x.iter().all(|im| im.height() == 64));
}
