//! Metrics against a brute-force tally, plus threshold and F1 invariants.

use dfkit_core::metrics::{accuracy, confusion, f1, precision, recall, MetricsReport};
use proptest::prelude::*;

fn cases() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tally_matches_brute_force((probs, labels) in cases(), threshold in 0.0f64..=1.0) {
        let cm = confusion(&probs, &labels, threshold).unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (p, l) in probs.iter().zip(&labels) {
            match (*p >= threshold, *l == 1.0) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        prop_assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (tp, tn, fp, fn_));
        prop_assert_eq!(cm.total() as usize, probs.len());
        let acc = accuracy(&cm).unwrap();
        prop_assert!((acc - (tp + tn) as f64 / probs.len() as f64).abs() < 1e-12);
        if tp + fp > 0 {
            prop_assert!((precision(&cm).value - tp as f64 / (tp + fp) as f64).abs() < 1e-12);
        }
        if tp + fn_ > 0 {
            prop_assert!((recall(&cm).value - tp as f64 / (tp + fn_) as f64).abs() < 1e-12);
        }
        if tp > 0 {
            let want = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            prop_assert!((f1(&cm).value - want).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_positives((probs, labels) in cases(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = confusion(&probs, &labels, lo).unwrap();
        let high = confusion(&probs, &labels, hi).unwrap();
        prop_assert!(high.tp + high.fp <= low.tp + low.fp);
        prop_assert!(high.tp <= low.tp);
        prop_assert!(high.fn_ >= low.fn_);
    }

    #[test]
    fn f1_lies_between_precision_and_recall((probs, labels) in cases(), threshold in 0.0f64..=1.0) {
        let report = MetricsReport::from_confusion(confusion(&probs, &labels, threshold).unwrap()).unwrap();
        let (p, r, f) = (report.precision.value, report.recall.value, report.f1.value);
        prop_assert!(f <= p.max(r) + 1e-12);
        prop_assert!(f >= p.min(r) - 1e-12);
        for v in [report.accuracy, p, r, f] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn csv_row_has_every_column() {
    let cm = confusion(&[0.9f64, 0.2, 0.7, 0.4], &[1.0f64, 0.0, 0.0, 1.0], 0.5).unwrap();
    let row = MetricsReport::from_confusion(cm).unwrap().csv_row("m");
    assert_eq!(row, "m,0.500000,0.500000,0.500000,0.500000,1,1,1,1");
}

#[test]
fn empty_and_invalid_inputs_are_rejected() {
    let cm = confusion::<f64, f64>(&[], &[], 0.5).unwrap();
    assert!(accuracy(&cm).is_err());
    assert!(confusion(&[0.5f64], &[0.5f64], 0.5).is_err());
    assert!(confusion(&[0.5f64, 0.1], &[1.0f64], 0.5).is_err());
    let all_real = confusion(&[0.1f64, 0.2], &[0.0f64, 0.0], 0.5).unwrap();
    let report = MetricsReport::from_confusion(all_real).unwrap();
    assert!(report.is_degenerate());
    assert_eq!(report.f1.value, 0.0);
}
