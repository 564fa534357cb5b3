//! Confusion matrix and the four binary classification metrics.
//! Fake (label 1) is the positive class.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// A ratio whose denominator may be zero. Degenerate ratios have value 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Ratio {
                value: num / den,
                degenerate: false,
            }
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Tally one prediction. `predicted_fake` is `prob >= threshold`.
    pub fn record(&mut self, predicted_fake: bool, actual_fake: bool) {
        match (predicted_fake, actual_fake) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Threshold probabilities (ties count as fake) and tally against labels.
pub fn confusion<P, L>(probs: &[P], labels: &[L], threshold: f64) -> Result<ConfusionMatrix>
where
    P: Copy + Into<f64>,
    L: Copy + Into<f64>,
{
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            shape: vec![labels.len()],
            expected: labels.len(),
            actual: probs.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in probs.iter().zip(labels) {
        let l: f64 = l.into();
        let actual = if l == 1.0 {
            true
        } else if l == 0.0 {
            false
        } else {
            return Err(Error::InvalidLabel(l));
        };
        cm.record(p.into() >= threshold, actual);
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Ratio {
    Ratio::of(cm.tp as f64, (cm.tp + cm.fp) as f64)
}

pub fn recall(cm: &ConfusionMatrix) -> Ratio {
    Ratio::of(cm.tp as f64, (cm.tp + cm.fn_) as f64)
}

/// Harmonic mean `2PR / (P + R)`.
pub fn f1_from(precision: f64, recall: f64) -> Ratio {
    Ratio::of(2.0 * precision * recall, precision + recall)
}

pub fn f1(cm: &ConfusionMatrix) -> Ratio {
    let (p, r) = (precision(cm), recall(cm));
    let mut out = f1_from(p.value, r.value);
    out.degenerate |= p.degenerate || r.degenerate;
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
    pub confusion: ConfusionMatrix,
}

pub const METRICS_CSV_HEADER: &str = "model,accuracy,precision,recall,f1,tp,tn,fp,fn";

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        Ok(MetricsReport {
            accuracy: accuracy(&cm)?,
            precision: precision(&cm),
            recall: recall(&cm),
            f1: f1(&cm),
            confusion: cm,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.precision.degenerate || self.recall.degenerate || self.f1.degenerate
    }

    pub fn csv_row(&self, model: &str) -> String {
        let c = &self.confusion;
        format!(
            "{model},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.accuracy, self.precision.value, self.recall.value, self.f1.value, c.tp, c.tn, c.fp, c.fn_
        )
    }
}

/// 2x2 grid, rows actual fake/real, columns predicted fake/real.
pub fn confusion_grid_csv(cm: &ConfusionMatrix) -> String {
    format!(
        "actual\\predicted,fake,real\nfake,{},{}\nreal,{},{}\n",
        cm.tp, cm.fn_, cm.fp, cm.tn
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9f32, 0.1], &[1.0f32, 0.0], 0.5).unwrap();
        assert_eq!(c, cm(1, 1, 0, 0));
        let c = confusion(&[0.5f64], &[0.0f64], 0.5).unwrap();
        assert_eq!(c.fp, 1);
        assert!(confusion(&[0.5f64], &[2.0f64], 0.5).is_err());
        assert!(confusion(&[0.5f64], &[] as &[f64], 0.5).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let counts = cm(9984, 9975, 25, 16);
        assert!((accuracy(&counts).unwrap() - 0.99795).abs() < 1e-12);
        assert_eq!(accuracy(&cm(3, 4, 0, 0)).unwrap(), 1.0);
        assert_eq!(accuracy(&cm(5, 5, 5, 5)).unwrap(), 0.5);
        assert!(matches!(accuracy(&cm(0, 0, 0, 0)), Err(Error::EmptyConfusion)));
    }

    #[test]
    fn precision_recall_examples() {
        assert!((precision(&cm(50, 0, 10, 0)).value - 50.0 / 60.0).abs() < 1e-15);
        assert_eq!(precision(&cm(3, 0, 0, 1)).value, 1.0);
        assert_eq!(precision(&cm(0, 1, 4, 0)).value, 0.0);
        let p = precision(&cm(0, 5, 0, 2));
        assert!(p.degenerate && p.value == 0.0);
        assert!((recall(&cm(9984, 0, 0, 16)).value - 0.9984).abs() < 1e-15);
        assert_eq!(recall(&cm(0, 3, 1, 2)).value, 0.0);
    }

    #[test]
    fn f1_examples() {
        assert!((f1_from(0.7, 0.7).value - 0.7).abs() < 1e-15);
        assert!((f1_from(0.92, 0.91).value - 0.91497).abs() < 1e-5);
        let z = f1_from(1.0, 0.0);
        assert_eq!(z.value, 0.0);
        assert!(!z.degenerate);
        assert!(f1_from(0.0, 0.0).degenerate);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport::from_confusion(cm(2, 1, 1, 0)).unwrap();
        assert_eq!(
            r.csv_row("dfcnet"),
            "dfcnet,0.750000,0.666667,1.000000,0.800000,2,1,1,0"
        );
        assert_eq!(
            confusion_grid_csv(&cm(9984, 9975, 25, 16)),
            "actual\\predicted,fake,real\nfake,9984,16\nreal,25,9975\n"
        );
    }
}
