//! Confusion matrix and classification report in the layout of a
//! scikit-learn style report: per class precision/recall/F1/support, then
//! accuracy, macro and weighted averages.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ClassLabel;

/// Counts indexed `[true][predicted]` in `ClassLabel::ALL` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2]) -> Self {
        Self { counts }
    }

    pub fn get(&self, truth: ClassLabel, pred: ClassLabel) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    pub fn add(&mut self, truth: ClassLabel, pred: ClassLabel) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: ClassLabel) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    /// Number of samples predicted as `c`.
    pub fn predicted(&self, c: ClassLabel) -> u64 {
        self.counts.iter().map(|row| row[c.index()]).sum()
    }
}

pub fn confusion(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::shape("confusion", &[preds.len()], &[truths.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub nontroll: ClassMetrics,
    pub troll: ClassMetrics,
    pub accuracy: f64,
    pub macro_avg: Average,
    pub weighted_avg: Average,
    pub total: u64,
    pub confusion: ConfusionMatrix,
    /// Metrics that were 0/0 and reported as 0.
    pub undefined: Vec<String>,
}

impl ClassificationReport {
    pub fn class(&self, c: ClassLabel) -> &ClassMetrics {
        match c {
            ClassLabel::NonTroll => &self.nontroll,
            ClassLabel::Troll => &self.troll,
        }
    }

    /// Flat key/value TOML with full-precision values and raw counts.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("metrics document: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::input(path, e.to_string()))
    }
}

fn ratio(num: u64, den: u64, name: String, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut undefined = Vec::new();
    let mut per_class = [ClassMetrics::default(); 2];
    for c in ClassLabel::ALL {
        let tp = cm.get(c, c);
        let support = cm.support(c);
        let precision = ratio(tp, cm.predicted(c), format!("precision.{c}"), &mut undefined);
        let recall = ratio(tp, support, format!("recall.{c}"), &mut undefined);
        let f1 = if precision + recall == 0.0 {
            undefined.push(format!("f1.{c}"));
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class[c.index()] = ClassMetrics {
            precision,
            recall,
            f1,
            support,
        };
    }
    let avg = |weight: &dyn Fn(&ClassMetrics) -> f64| {
        let norm: f64 = per_class.iter().map(weight).sum();
        let mean = |m: &dyn Fn(&ClassMetrics) -> f64| per_class.iter().map(|c| weight(c) * m(c)).sum::<f64>() / norm;
        Average {
            precision: mean(&|c| c.precision),
            recall: mean(&|c| c.recall),
            f1: mean(&|c| c.f1),
        }
    };
    Ok(ClassificationReport {
        nontroll: per_class[0],
        troll: per_class[1],
        accuracy: cm.correct() as f64 / total as f64,
        macro_avg: avg(&|_| 1.0),
        weighted_avg: avg(&|c| c.support as f64),
        total,
        confusion: *cm,
        undefined,
    })
}

/// Half-up rounding to two decimals. The small bias absorbs binary
/// representation error so that e.g. 0.955 rounds up.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

fn row(out: &mut String, label: &str, cells: [&str; 3], support: u64) {
    writeln!(
        out,
        "{label:<14}{:>11}{:>11}{:>11}{support:>11}",
        cells[0], cells[1], cells[2]
    )
    .expect("write to string");
}

/// Human-readable table: classes, blank line, Accuracy, Macro Avg,
/// Weighted Avg. The accuracy row fills only the F1-Score and Support
/// columns.
pub fn render(r: &ClassificationReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<14}{:>11}{:>11}{:>11}{:>11}",
        "", "Precision", "Recall", "F1-Score", "Support"
    )
    .expect("write to string");
    for c in ClassLabel::ALL {
        let m = r.class(c);
        row(
            &mut out,
            c.display_name(),
            [&fmt2(m.precision), &fmt2(m.recall), &fmt2(m.f1)],
            m.support,
        );
    }
    out.push('\n');
    row(&mut out, "Accuracy", ["", "", &fmt2(r.accuracy)], r.total);
    for (label, a) in [("Macro Avg", &r.macro_avg), ("Weighted Avg", &r.weighted_avg)] {
        row(
            &mut out,
            label,
            [&fmt2(a.precision), &fmt2(a.recall), &fmt2(a.f1)],
            r.total,
        );
    }
    out
}
