//! Classification metrics: confusion matrix, per-class and support-weighted
//! F1, accuracy, one-vs-rest AUROC and average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::argmax;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Evaluation(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    /// Builds a matrix from explicit row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Evaluation(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Label(format!(
                "class pair ({truth}, {predicted}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    fn predicted_total(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    /// F1 per class; 0 when precision + recall is 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let (pred, sup) = (self.predicted_total(c) as f64, self.support(c) as f64);
                let precision = if pred > 0.0 { tp / pred } else { 0.0 };
                let recall = if sup > 0.0 { tp / sup } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.nonempty_total()?;
        Ok((0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total)
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Evaluation("confusion matrix is empty".into())),
            n => Ok(n as f64),
        }
    }
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.nonempty_total()?;
    Ok(cm
        .per_class_f1()
        .iter()
        .enumerate()
        .map(|(c, f1)| cm.support(c) as f64 / total * f1)
        .sum())
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let c = scores[0].len();
    if c < 2 || scores.iter().any(|r| r.len() != c) {
        return Err(Error::Evaluation("score rows must share a width of at least 2".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label(format!("label {l} outside {c} classes")));
    }
    Ok(c)
}

/// Classes to evaluate one-vs-rest: class 1 alone for binary problems.
fn evaluated_classes(c: usize) -> Vec<usize> {
    if c == 2 {
        vec![1]
    } else {
        (0..c).collect()
    }
}

fn positives_and_negatives(labels: &[usize], class: usize) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == class).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "class {class} needs both positive and negative samples ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Binary ROC area from the Mann-Whitney rank statistic, ties at midrank.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Non-interpolated average precision: `sum_n (R_n - R_{n-1}) P_n` over
/// distinct score thresholds, highest first.
pub fn binary_average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    if pos == 0 || pos == positive.len() {
        return Err(Error::UndefinedMetric("AUPRC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| positive[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

fn one_vs_rest(
    scores: &[Vec<f64>],
    labels: &[usize],
    metric: fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<f64> {
    let c = check_scores(scores, labels)?;
    let classes = evaluated_classes(c);
    let mut total = 0.0;
    for &class in &classes {
        positives_and_negatives(labels, class)?;
        let s: Vec<f64> = scores.iter().map(|r| r[class]).collect();
        let p: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        total += metric(&s, &p)?;
    }
    Ok(total / classes.len() as f64)
}

/// Macro-averaged one-vs-rest AUROC (the class-1 AUROC for binary problems).
pub fn auroc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    one_vs_rest(scores, labels, binary_auroc)
}

/// Macro-averaged one-vs-rest average precision.
pub fn auprc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    one_vs_rest(scores, labels, binary_average_precision)
}

/// Everything reported for one evaluated partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: u64,
    pub class_names: Vec<String>,
    pub per_class_f1: Vec<f64>,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// `None` when some evaluated class is absent or universal.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub confusion_matrix: Vec<Vec<u64>>,
}

impl MetricReport {
    /// Scores rows are class-probability vectors; predictions are their argmax.
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<Self> {
        let c = check_scores(scores, labels)?;
        if class_names.len() != c {
            return Err(Error::Evaluation(format!(
                "{} class names for {c}-class scores",
                class_names.len()
            )));
        }
        let predicted: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let cm = ConfusionMatrix::from_predictions(c, labels, &predicted)?;
        let undefined_ok = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricReport {
            samples: cm.total(),
            class_names: class_names.to_vec(),
            per_class_f1: cm.per_class_f1(),
            weighted_f1: weighted_f1(&cm)?,
            accuracy: cm.accuracy()?,
            auroc: undefined_ok(auroc(scores, labels))?,
            auprc: undefined_ok(auprc(scores, labels))?,
            confusion_matrix: cm.rows(),
        })
    }
}

/// JSON schema of [`MetricReport`], published alongside reports.
pub fn report_schema() -> serde_json::Value {
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "MetricReport",
        "type": "object",
        "required": ["samples", "class_names", "per_class_f1", "weighted_f1", "accuracy",
                     "auroc", "auprc", "confusion_matrix"],
        "properties": {
            "samples": {"type": "integer", "minimum": 1},
            "class_names": {"type": "array", "items": {"type": "string"}},
            "per_class_f1": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
            "weighted_f1": {"type": "number", "minimum": 0, "maximum": 1},
            "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
            "auroc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            "auprc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            "confusion_matrix": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}}
        },
        "additionalProperties": false
    })
}

/// Sample mean and (n - 1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
