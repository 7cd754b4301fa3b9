//! Classification metrics: 3×3 confusion matrix, per-class accuracy, and
//! overall accuracy, reported in the fixed order Positive, Neutral,
//! Negative, Overall.

use crate::model::Label;
use crate::tensor::TensorError;

/// Confusion counts; `counts[t][p]` is the number of samples with true
/// class `t` predicted as class `p` (indices follow `Label::index`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: Label) -> usize {
        self.counts[class.index()].iter().sum()
    }

    pub fn correct(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    /// Per-class accuracy in label-index order; `None` when the class has
    /// zero support in the evaluated set.
    pub per_class: [Option<f64>; 3],
    pub overall: f64,
}

/// Builds metrics from (truth, prediction) pairs. An empty input has no
/// meaningful accuracy and is rejected.
pub fn compute_metrics(pairs: &[(Label, Label)]) -> Result<Metrics, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::invalid("metrics", "no predictions to score"));
    }
    let mut confusion = ConfusionMatrix::default();
    for &(truth, predicted) in pairs {
        confusion.record(truth, predicted);
    }
    let mut per_class = [None; 3];
    for i in 0..3 {
        let support: usize = confusion.counts[i].iter().sum();
        if support > 0 {
            per_class[i] = Some(confusion.counts[i][i] as f64 / support as f64);
        }
    }
    let overall = confusion.correct() as f64 / confusion.total() as f64;
    Ok(Metrics { confusion, per_class, overall })
}

impl Metrics {
    /// Multi-line accuracy report in the order Positive, Neutral,
    /// Negative, Overall. Classes absent from the evaluated set show
    /// `n/a`.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for label in [Label::Positive, Label::Neutral, Label::Negative] {
            let line = match self.per_class[label.index()] {
                Some(acc) => format!(
                    "{:<9} {:>6.1}%  (n={})\n",
                    label.name(),
                    acc * 100.0,
                    self.confusion.support(label)
                ),
                None => format!("{:<9} {:>6}   (n=0)\n", label.name(), "n/a"),
            };
            out.push_str(&line);
        }
        out.push_str(&format!(
            "{:<9} {:>6.1}%  (n={})\n",
            "Overall",
            self.overall * 100.0,
            self.confusion.total()
        ));
        out
    }
}
