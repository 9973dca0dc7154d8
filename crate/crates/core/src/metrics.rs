//! Confusion matrices, classification metrics, ROC AUC and fold reports.
//!
//! Rates with a zero denominator are reported as 0 and flagged as
//! degenerate instead of failing, so folds without positive predictions
//! still aggregate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!(
            "{a} predictions but {b} ground-truth labels"
        )));
    }
    Ok(())
}

/// Counts relative to `positive`; every other label is negative.
pub fn confusion_binary(predicted: &[usize], truth: &[usize], positive: usize) -> Result<ConfusionCounts> {
    check_lengths(predicted.len(), truth.len())?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Which rates hit a zero denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.specificity || self.f1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Accuracy, precision, recall, specificity and F1. F1 is evaluated as
/// `2TP/(2TP + FP + FN)`, the harmonic mean of precision and recall.
pub fn binary_metrics(c: &ConfusionCounts) -> Result<BinaryMetrics> {
    if c.total() == 0 {
        return Err(Error::Validation("empty confusion counts".into()));
    }
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    let (precision, dp) = ratio(c.tp, c.tp + c.fp);
    let (recall, dr) = ratio(c.tp, c.tp + c.fn_);
    let (specificity, ds) = ratio(c.tn, c.tn + c.fp);
    let (f1, df) = if c.tp == 0 {
        (0.0, true)
    } else {
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
    };
    Ok(BinaryMetrics {
        accuracy,
        precision,
        recall,
        specificity,
        f1,
        degenerate: Degenerate {
            precision: dp,
            recall: dr,
            specificity: ds,
            f1: df,
        },
    })
}

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting half. Computed with a sorted sweep.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), positives.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("non-finite score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count() as u128;
    let n_neg = positives.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation(
            "AUC needs at least one positive and one negative sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Counted in half-pairs so ties stay integral.
    let mut half_pairs: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_pairs += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(half_pairs as f64 / (2 * n_pos * n_neg) as f64)
}

/// K×K counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MultiClassConfusion {
    k: usize,
    counts: Vec<u64>,
}

impl MultiClassConfusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(predicted: &[usize], truth: &[usize], k: usize) -> Result<Self> {
        check_lengths(predicted.len(), truth.len())?;
        let mut m = Self::new(k);
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::Validation(format!(
                    "label {} out of range for {k} classes",
                    p.max(t)
                )));
            }
            m.counts[t * k + p] += 1;
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Binary counts treating class `c` as positive.
    pub fn one_vs_rest(&self, c: usize) -> ConfusionCounts {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        ConfusionCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Mean of per-class F1 scores, not the F1 of the means.
    pub macro_f1: f64,
    pub macro_specificity: f64,
    pub per_class: Vec<BinaryMetrics>,
}

pub fn macro_metrics(m: &MultiClassConfusion) -> Result<MacroMetrics> {
    if m.k() < 2 {
        return Err(Error::Validation("macro metrics need at least 2 classes".into()));
    }
    if m.total() == 0 {
        return Err(Error::Validation("empty confusion matrix".into()));
    }
    let per_class = (0..m.k())
        .map(|c| binary_metrics(&m.one_vs_rest(c)))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&BinaryMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / m.k() as f64;
    Ok(MacroMetrics {
        accuracy: m.trace() as f64 / m.total() as f64,
        macro_precision: mean(|b| b.precision),
        macro_recall: mean(|b| b.recall),
        macro_f1: mean(|b| b.f1),
        macro_specificity: mean(|b| b.specificity),
        per_class,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub fold: String,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Binary tasks only.
    pub auc: Option<f64>,
    pub degenerate: bool,
}

/// Metrics from logits (B×K) against ground truth.
///
/// For K = 2 the row holds the binary metrics relative to
/// `positive_class` with AUC over its softmax probability (left empty when
/// the truth contains a single class). For K > 2 it holds accuracy and
/// macro-averaged precision, recall, F1 and specificity.
pub fn evaluate_logits<T: Scalar>(
    fold: impl Into<String>,
    logits: &Tensor<T>,
    truth: &[usize],
    positive_class: usize,
) -> Result<MetricsRow> {
    let (b, k) = logits.dims2("evaluate")?;
    check_lengths(b, truth.len())?;
    if b == 0 {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    if k < 2 {
        return Err(Error::Validation("need at least 2 classes".into()));
    }
    let rows: Vec<&[T]> = logits.data().chunks(k).collect();
    let predicted: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    let fold = fold.into();
    if k == 2 {
        if positive_class >= k {
            return Err(Error::Validation(format!(
                "positive class {positive_class} out of range"
            )));
        }
        let c = confusion_binary(&predicted, truth, positive_class)?;
        let m = binary_metrics(&c)?;
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                let mut p: Vec<T> = r.to_vec();
                softmax_in_place(&mut p);
                p[positive_class].as_f64()
            })
            .collect();
        let positives: Vec<bool> = truth.iter().map(|&t| t == positive_class).collect();
        let single_class = positives.iter().all(|&p| p) || positives.iter().all(|&p| !p);
        let auc = if single_class {
            None
        } else {
            Some(roc_auc(&scores, &positives)?)
        };
        Ok(MetricsRow {
            fold,
            accuracy: m.accuracy,
            precision: m.precision,
            sensitivity: m.recall,
            f1: m.f1,
            specificity: m.specificity,
            auc,
            degenerate: m.degenerate.any() || single_class,
        })
    } else {
        let cm = MultiClassConfusion::from_labels(&predicted, truth, k)?;
        let m = macro_metrics(&cm)?;
        Ok(MetricsRow {
            fold,
            accuracy: m.accuracy,
            precision: m.macro_precision,
            sensitivity: m.macro_recall,
            f1: m.macro_f1,
            specificity: m.macro_specificity,
            auc: None,
            degenerate: m.per_class.iter().any(|b| b.degenerate.any()),
        })
    }
}

/// Per-fold rows plus their column-wise mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub folds: Vec<MetricsRow>,
    pub average: MetricsRow,
}

impl MetricsReport {
    /// Fold rows followed by the average row.
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.folds.iter().chain(std::iter::once(&self.average))
    }
}

pub const AVERAGE_LABEL: &str = "average";

pub fn aggregate_folds(folds: Vec<MetricsRow>) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::Validation("no fold results to aggregate".into()));
    }
    let n = folds.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| folds.iter().map(f).sum::<f64>() / n;
    let auc = folds
        .iter()
        .map(|r| r.auc)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    let average = MetricsRow {
        fold: AVERAGE_LABEL.to_string(),
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        sensitivity: mean(|r| r.sensitivity),
        f1: mean(|r| r.f1),
        specificity: mean(|r| r.specificity),
        auc,
        degenerate: folds.iter().any(|r| r.degenerate),
    };
    Ok(MetricsReport { folds, average })
}
