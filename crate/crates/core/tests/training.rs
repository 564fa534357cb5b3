use std::path::Path;

use dfkit_core::data::{split_dataset, synth_dataset, Loader, Split, SynthConfig, DEFAULT_FRACTIONS};
use dfkit_core::models::{Model, ModelConfig, ModelKind, Scale};
use dfkit_core::optim::{curves_csv, evaluate, fit, parse_curves_csv, AdamConfig, FitConfig};
use dfkit_core::Error;

fn loaders(dir: &Path, per_class: usize) -> (Loader, Loader) {
    let ix = synth_dataset(
        dir,
        &SynthConfig {
            per_class,
            size: 32,
            noise: 0.1,
            seed: 3,
        },
    )
    .unwrap();
    let ix = split_dataset(&ix, DEFAULT_FRACTIONS, 5).unwrap();
    (
        Loader::new(&ix, Split::Train, 32, 32).unwrap(),
        Loader::new(&ix, Split::Val, 32, 32).unwrap(),
    )
}

fn dfcnet() -> Model {
    Model::build(ModelConfig::new(ModelKind::Dfcnet, Scale::Desk), 1).unwrap()
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = loaders(dir.path(), 20);
    let mut model = dfcnet();
    let before = model.params.fingerprint();
    let out = fit(
        &mut model,
        &train,
        &val,
        &FitConfig {
            epochs: 0,
            ..Default::default()
        },
        |_| {},
    )
    .unwrap();
    assert!(out.records.is_empty());
    assert!(out.best.is_none());
    assert_eq!(model.params.fingerprint(), before);
    assert_eq!(curves_csv(&out.records).lines().count(), 1);
}

#[test]
fn evaluation_does_not_change_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (_, val) = loaders(dir.path(), 20);
    for kind in ModelKind::ALL {
        let model = Model::build(ModelConfig::new(kind, Scale::Desk), 2).unwrap();
        let before = model.params.fingerprint();
        let a = evaluate(&model, &val, 4).unwrap();
        let b = evaluate(&model, &val, 16).unwrap();
        assert_eq!(model.params.fingerprint(), before, "{kind}");
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.probs.len(), val.len());
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-5, "{kind}: {x} vs {y}");
        }
    }
}

#[test]
fn fitting_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = loaders(dir.path(), 30);
    let cfg = FitConfig {
        epochs: 3,
        seed: 7,
        dropout_seed: 8,
        ..Default::default()
    };
    let run = || {
        let mut model = dfcnet();
        let out = fit(&mut model, &train, &val, &cfg, |_| {}).unwrap();
        (
            curves_csv(&out.records),
            model.params.fingerprint(),
            out.best.unwrap().1.fingerprint(),
        )
    };
    let first = run();
    assert_eq!(first, run());
    let parsed = parse_curves_csv(&first.0).unwrap();
    assert_eq!(parsed.len(), 3);
    assert!(parsed.iter().all(|r| r.seconds == 0.0));
}

#[test]
fn smoothed_training_loss_goes_down() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = loaders(dir.path(), 60);
    let mut model = dfcnet();
    let mut seen = Vec::new();
    let out = fit(
        &mut model,
        &train,
        &val,
        &FitConfig {
            epochs: 10,
            seed: 1,
            ..Default::default()
        },
        |r| seen.push(r.epoch),
    )
    .unwrap();
    assert_eq!(seen, (1..=10).collect::<Vec<_>>());
    let loss: Vec<f64> = out.records.iter().map(|r| r.train_loss).collect();
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let early = window(&loss[..5]);
    let late = window(&loss[5..]);
    assert!(late < early, "{loss:?}");
    let (best_epoch, _) = out.best.as_ref().unwrap();
    let best_loss = out.records[best_epoch - 1].val_loss;
    assert!(out.records.iter().all(|r| r.val_loss >= best_loss));
}

#[test]
fn invalid_settings_and_divergence_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = loaders(dir.path(), 20);
    let mut model = dfcnet();
    let bad = FitConfig {
        adam: AdamConfig {
            lr: -1.0,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(matches!(
        fit(&mut model, &train, &val, &bad, |_| {}),
        Err(Error::Config(_))
    ));

    let huge = FitConfig {
        epochs: 2,
        adam: AdamConfig {
            lr: 1e39,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(matches!(
        fit(&mut model, &train, &val, &huge, |_| {}),
        Err(Error::NonFiniteLoss { .. })
    ));
}
