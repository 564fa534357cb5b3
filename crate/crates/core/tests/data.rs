use std::fs;
use std::path::{Path, PathBuf};

use dfkit_core::data::{
    augment, decode_image, histogram_check, split_dataset, synth_dataset, template, AugmentKind, AugmentPolicy,
    DatasetIndex, Label, Loader, Record, Split, SynthConfig, DEFAULT_FRACTIONS,
};
use dfkit_core::Error;
use proptest::prelude::*;

fn synthetic_index(real: usize, fake: usize) -> DatasetIndex {
    let mut records = Vec::new();
    for (label, n) in [(Label::Real, real), (Label::Fake, fake)] {
        for i in 0..n {
            records.push(Record {
                path: format!("{}/{i:05}.png", label.name()),
                label,
                split: None,
            });
        }
    }
    DatasetIndex {
        root: PathBuf::from("."),
        records,
        seed: None,
    }
}

fn synth(dir: &Path, per_class: usize, size: usize, noise: f64, seed: u64) -> DatasetIndex {
    synth_dataset(
        dir,
        &SynthConfig {
            per_class,
            size,
            noise,
            seed,
        },
    )
    .unwrap()
}

fn file_bytes(ix: &DatasetIndex) -> Vec<(String, Vec<u8>)> {
    ix.records
        .iter()
        .map(|r| (r.path.clone(), fs::read(ix.full_path(r)).unwrap()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_stratified_disjoint_and_reproducible(real in 7usize..300, fake in 7usize..300, seed in 0u64..1 << 40) {
        let ix = synthetic_index(real, fake);
        let a = split_dataset(&ix, DEFAULT_FRACTIONS, seed).unwrap();
        prop_assert_eq!(&a, &split_dataset(&ix, DEFAULT_FRACTIONS, seed).unwrap());
        prop_assert!(a.records.iter().all(|r| r.split.is_some()));
        for (label, n) in [(Label::Real, real), (Label::Fake, fake)] {
            let held = (n as f64 * 0.15 + 1e-9).floor() as usize;
            prop_assert_eq!(a.count(Some(Split::Val), label), held);
            prop_assert_eq!(a.count(Some(Split::Test), label), held);
            prop_assert_eq!(a.count(Some(Split::Train), label), n - 2 * held);
        }
        // paths and labels are kept in their original order
        for (x, y) in a.records.iter().zip(&ix.records) {
            prop_assert_eq!(&x.path, &y.path);
            prop_assert_eq!(x.label, y.label);
        }
    }
}

#[test]
fn split_depends_on_the_seed() {
    let ix = synthetic_index(100, 100);
    let a = split_dataset(&ix, DEFAULT_FRACTIONS, 1).unwrap();
    let b = split_dataset(&ix, DEFAULT_FRACTIONS, 2).unwrap();
    assert_ne!(a, b);
}

#[test]
fn bad_fractions_and_tiny_classes_are_rejected() {
    let ix = synthetic_index(50, 50);
    assert!(matches!(split_dataset(&ix, [0.5, 0.2, 0.2], 0), Err(Error::Config(_))));
    assert!(matches!(
        split_dataset(&ix, [1.2, -0.1, -0.1], 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        split_dataset(&synthetic_index(3, 50), DEFAULT_FRACTIONS, 0),
        Err(Error::ClassStarvation { .. })
    ));
}

#[test]
fn synthesis_is_byte_identical_under_a_seed() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let ia = synth(a.path(), 5, 16, 0.1, 42);
    let ib = synth(b.path(), 5, 16, 0.1, 42);
    let ic = synth(c.path(), 5, 16, 0.1, 43);
    assert_eq!(ia.len(), 10);
    assert_eq!(file_bytes(&ia), file_bytes(&ib));
    assert_ne!(file_bytes(&ia), file_bytes(&ic));
}

#[test]
fn noiseless_synthesis_reproduces_the_template() {
    let dir = tempfile::tempdir().unwrap();
    let ix = synth(dir.path(), 3, 12, 0.0, 5);
    for r in &ix.records {
        let img = decode_image(&ix.full_path(r), 12, 12).unwrap();
        let t = template(r.label, 12);
        for p in 0..144 {
            for c in 0..3 {
                assert!((img[c * 144 + p] as f64 - t[p * 3 + c].clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}

#[test]
fn manifest_round_trips_through_text() {
    let dir = tempfile::tempdir().unwrap();
    let ix = split_dataset(&synth(dir.path(), 20, 8, 0.1, 1), DEFAULT_FRACTIONS, 9).unwrap();
    let path = dir.path().join("split.tsv");
    ix.write_manifest(&path).unwrap();
    let back = DatasetIndex::read_manifest(&path, dir.path()).unwrap();
    assert_eq!(back.records, ix.records);
    assert!(DatasetIndex::from_manifest("garbage\n", dir.path()).is_err());
}

#[test]
fn scanning_picks_up_split_directories() {
    let dir = tempfile::tempdir().unwrap();
    for split in ["train", "val", "test"] {
        synth(&dir.path().join(split), 2, 8, 0.1, 3);
    }
    let ix = dfkit_core::data::scan_directory(dir.path()).unwrap();
    assert_eq!(ix.len(), 12);
    for split in Split::ALL {
        assert_eq!(ix.count(Some(split), Label::Fake), 2);
        assert_eq!(ix.count(Some(split), Label::Real), 2);
    }
}

#[test]
fn synthetic_splits_have_matching_brightness() {
    let dir = tempfile::tempdir().unwrap();
    // 0.15 of 1400 is 210 images per held-out split
    let ix = split_dataset(&synth(dir.path(), 700, 16, 0.1, 8), DEFAULT_FRACTIONS, 4).unwrap();
    let report = histogram_check(&ix, 0.1).unwrap();
    assert_eq!(report.distances.len(), 3);
    for (a, b, d) in &report.distances {
        assert!(*d < 0.1, "{a}/{b}: {d}");
    }
    assert!(report.divergent().is_empty());
}

#[test]
fn loader_batches_cover_the_split_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut ix = synth(dir.path(), 20, 8, 0.1, 2);
    for r in ix.records.iter_mut().take(35) {
        r.split = Some(Split::Train);
    }
    let loader = Loader::new(&ix, Split::Train, 8, 8).unwrap();
    assert_eq!(loader.len(), 35);
    let sizes: Vec<usize> = loader.batches(16, None).map(|b| b.unwrap().len()).collect();
    assert_eq!(sizes, [16, 16, 3]);
    let seen: Vec<usize> = loader.batches(16, None).flat_map(|b| b.unwrap().indices).collect();
    assert_eq!(seen, (0..35).collect::<Vec<_>>());

    let mut shuffled: Vec<usize> = loader.batches(16, Some(7)).flat_map(|b| b.unwrap().indices).collect();
    assert_ne!(shuffled, seen);
    assert_eq!(loader.order(Some(7)), loader.order(Some(7)));
    shuffled.sort();
    assert_eq!(shuffled, seen);
}

#[test]
fn decoding_scales_to_unit_range_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let white = dir.path().join("white.png");
    let black = dir.path().join("black.png");
    image::RgbImage::from_pixel(10, 6, image::Rgb([255, 255, 255]))
        .save(&white)
        .unwrap();
    image::RgbImage::from_pixel(10, 6, image::Rgb([0, 0, 0]))
        .save(&black)
        .unwrap();
    let w = decode_image(&white, 4, 5).unwrap();
    assert_eq!(w.len(), 3 * 4 * 5);
    assert!(w.iter().all(|&v| v == 1.0));
    assert!(decode_image(&black, 6, 10).unwrap().iter().all(|&v| v == 0.0));

    let broken = dir.path().join("broken.png");
    fs::write(&broken, b"no image here").unwrap();
    assert!(matches!(decode_image(&broken, 4, 4), Err(Error::Decode { .. })));
}

#[test]
fn augmentation_keeps_shapes_labels_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let ix = split_dataset(&synth(dir.path(), 20, 16, 0.1, 6), DEFAULT_FRACTIONS, 1).unwrap();
    let loader = Loader::new(&ix, Split::Train, 16, 16).unwrap();
    let batch = loader.batch(&(0..8).collect::<Vec<_>>()).unwrap();

    assert_eq!(
        augment(&batch, &AugmentPolicy::none(), 3).images.data(),
        batch.images.data()
    );
    let kinds = [
        AugmentKind::Basic,
        AugmentKind::RandAugment {
            n_ops: 2,
            magnitude: 9.0,
        },
        AugmentKind::AutoLite,
        AugmentKind::Combined,
    ];
    for kind in kinds {
        let policy = AugmentPolicy::new(kind, 11);
        policy.validate().unwrap();
        let out = augment(&batch, &policy, 3);
        assert_eq!(out.images.shape(), batch.images.shape(), "{kind}");
        assert_eq!(out.labels, batch.labels);
        assert_eq!(out.indices, batch.indices);
        assert!(out.images.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        assert_ne!(out.images.data(), batch.images.data(), "{kind}");
        assert_eq!(out.images.data(), augment(&batch, &policy, 3).images.data(), "{kind}");
        assert_ne!(out.images.data(), augment(&batch, &policy, 4).images.data(), "{kind}");
    }
    let bad = AugmentPolicy {
        flip_prob: 1.5,
        ..AugmentPolicy::none()
    };
    assert!(bad.validate().is_err());
}
