//! Positional DDx evaluation: confusion counting, per-class and macro
//! scores, GTPA@1 and the geometric-mean summary.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions. Positions present in only
/// one of the two sequences are tallied separately per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    /// Row-major `n_classes × n_classes`.
    pub counts: Vec<u64>,
    pub unmatched_gt: Vec<u64>,
    pub unmatched_pred: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
            unmatched_gt: vec![0; n_classes],
            unmatched_pred: vec![0; n_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    fn check(&self, label: usize) -> Result<usize> {
        if label < self.n_classes {
            Ok(label)
        } else {
            Err(Error::Index {
                what: "class label",
                index: label,
                size: self.n_classes,
            })
        }
    }

    /// Compares two label sequences position by position. Validates every
    /// label before touching any count.
    pub fn accumulate_sequence(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        for &l in gt.iter().chain(pred) {
            self.check(l)?;
        }
        let n = self.n_classes;
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[g * n + p] += 1;
        }
        let m = gt.len().min(pred.len());
        for &g in &gt[m..] {
            self.unmatched_gt[g] += 1;
        }
        for &p in &pred[m..] {
            self.unmatched_pred[p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Shape {
                op: "confusion merge",
                lhs: vec![self.n_classes],
                rhs: vec![other.n_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unmatched_gt.iter_mut().zip(&other.unmatched_gt) {
            *a += b;
        }
        for (a, b) in self.unmatched_pred.iter_mut().zip(&other.unmatched_pred) {
            *a += b;
        }
        Ok(())
    }

    pub fn matched(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn gold_positions(&self) -> u64 {
        self.matched() + self.unmatched_gt.iter().sum::<u64>()
    }

    pub fn predicted_positions(&self) -> u64 {
        self.matched() + self.unmatched_pred.iter().sum::<u64>()
    }

    /// Every counted position: matched pairs plus both unmatched tallies.
    pub fn total(&self) -> u64 {
        self.matched() + self.unmatched_gt.iter().sum::<u64>() + self.unmatched_pred.iter().sum::<u64>()
    }

    /// One-vs-rest tallies for class `c`.
    pub fn outcome(&self, c: usize) -> Outcome {
        let n = self.n_classes;
        let tp = self.get(c, c);
        let row: u64 = (0..n).map(|j| self.get(c, j)).sum();
        let col: u64 = (0..n).map(|i| self.get(i, c)).sum();
        let fn_ = row - tp + self.unmatched_gt[c];
        let fp = col - tp + self.unmatched_pred[c];
        let tn = self.total() - tp - fn_ - fp;
        Outcome { tp, fp, fn_, tn }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Accuracy, precision and recall in percent; F1 as a fraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from precision and recall given in percent.
pub fn f1_from_percent(precision: f64, recall: f64) -> f64 {
    let (p, r) = (precision / 100.0, recall / 100.0);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl From<Outcome> for ClassMetrics {
    fn from(o: Outcome) -> Self {
        let total = o.tp + o.fp + o.fn_ + o.tn;
        let precision = 100.0 * ratio(o.tp, o.tp + o.fp);
        let recall = 100.0 * ratio(o.tp, o.tp + o.fn_);
        ClassMetrics {
            accuracy: 100.0 * ratio(o.tp + o.tn, total),
            precision,
            recall,
            f1: f1_from_percent(precision, recall),
        }
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.n_classes).map(|c| cm.outcome(c).into()).collect()
}

/// Unweighted mean of each field.
pub fn macro_mean(metrics: &[ClassMetrics]) -> Result<ClassMetrics> {
    if metrics.is_empty() {
        return Err(Error::Degenerate("macro mean of no classes".into()));
    }
    let n = metrics.len() as f64;
    let mut m = ClassMetrics::default();
    for c in metrics {
        m.accuracy += c.accuracy;
        m.precision += c.precision;
        m.recall += c.recall;
        m.f1 += c.f1;
    }
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    Ok(m)
}

/// Percentage of exact top-1 matches.
pub fn gtpa_at_1<L: PartialEq>(predicted: &[L], gold: &[L]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Degenerate("no cases to score".into()));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

pub fn geometric_mean3(a: f64, p: f64, r: f64) -> Result<f64> {
    if !(a > 0.0 && p > 0.0 && r > 0.0) {
        return Err(Error::Domain(format!(
            "geometric mean needs positive inputs, got ({a}, {p}, {r})"
        )));
    }
    Ok(Float::cbrt(a * p * r))
}

/// How the scored sequences were produced and compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub n_records: usize,
    pub gold_positions: u64,
    pub predicted_positions: u64,
    pub matched_positions: u64,
    pub decoding: String,
    pub length_protocol: String,
    pub checkpoint: Option<String>,
}

pub const LENGTH_PROTOCOL: &str =
    "positional; gold positions without a prediction count as false negatives, extra predictions as false positives";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub mean: ClassMetrics,
    pub gtpa_at_1: f64,
    pub ddp: f64,
    pub ddr: f64,
    /// Macro mean of per-class F1.
    pub ddf1: f64,
    /// `None` when one of its inputs is zero.
    pub gm: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub meta: ReportMeta,
}

/// Builds the full report from gold/predicted label sequences and top-1
/// classes. Sequences hold class indices, specials already stripped.
pub fn evaluate(
    class_names: Vec<String>,
    gold_seqs: &[Vec<usize>],
    pred_seqs: &[Vec<usize>],
    gold_classes: &[usize],
    pred_classes: &[usize],
    decoding: &str,
) -> Result<EvalReport> {
    if gold_seqs.len() != pred_seqs.len() {
        return Err(Error::Contract(format!(
            "{} predicted sequences for {} gold sequences",
            pred_seqs.len(),
            gold_seqs.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(class_names.len());
    for (i, (g, p)) in gold_seqs.iter().zip(pred_seqs).enumerate() {
        cm.accumulate_sequence(g, p).map_err(|e| e.at_record(i))?;
    }
    let per_class = per_class_metrics(&cm);
    let mean = macro_mean(&per_class)?;
    let gtpa = gtpa_at_1(pred_classes, gold_classes)?;
    let gm = geometric_mean3(gtpa, mean.precision, mean.recall).ok();
    let meta = ReportMeta {
        n_records: gold_seqs.len(),
        gold_positions: cm.gold_positions(),
        predicted_positions: cm.predicted_positions(),
        matched_positions: cm.matched(),
        decoding: decoding.into(),
        length_protocol: LENGTH_PROTOCOL.into(),
        checkpoint: None,
    };
    Ok(EvalReport {
        class_names,
        per_class,
        gtpa_at_1: gtpa,
        ddp: mean.precision,
        ddr: mean.recall,
        ddf1: mean.f1,
        gm,
        mean,
        confusion: cm,
        meta,
    })
}
