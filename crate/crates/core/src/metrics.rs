//! Balanced accuracy, macro one-vs-rest AUC and clean/corrupted evaluation.

use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::federation::AggregationWeights;
use crate::nn::{forward, MlpArchitecture, ParameterVector};

fn check_classes(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass { class });
    }
    Ok(counts)
}

/// Mean over classes of per-class recall.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: predictions.len(),
            context: "predictions",
        });
    }
    let counts = check_classes(labels, num_classes)?;
    let mut hits = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| h as f64 / n as f64)
        .sum::<f64>()
        / num_classes as f64)
}

/// Mann-Whitney AUC of `scores` for `positive` labels, ties counted as half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Macro average over classes of class-vs-rest AUC on that class's score.
pub fn macro_auc_ovr(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
            context: "score rows",
        });
    }
    if let Some(row) = scores.iter().find(|row| row.len() != num_classes) {
        return Err(Error::DimensionMismatch {
            expected: num_classes,
            actual: row.len(),
            context: "score row width",
        });
    }
    let counts = check_classes(labels, num_classes)?;
    if counts.contains(&labels.len()) {
        return Err(Error::InvalidArgument(
            "AUC needs at least two classes among labels".into(),
        ));
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let column: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        total += binary_auc(&column, &positive);
    }
    Ok(total / num_classes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub acc_clean: f64,
    pub auc_clean: f64,
    pub acc_corrupted: f64,
    pub auc_corrupted: f64,
    pub acc_avg: f64,
    pub auc_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub eval: Evaluation,
    pub sharpness_mean: f64,
    pub sharpness_std: f64,
    pub weights: AggregationWeights,
}

/// Names of the scalar metrics, in CSV column order.
pub const METRIC_NAMES: [&str; 8] = [
    "acc_clean",
    "auc_clean",
    "acc_corrupted",
    "auc_corrupted",
    "acc_avg",
    "auc_avg",
    "sharpness_mean",
    "sharpness_std",
];

impl RoundMetrics {
    pub fn values(&self) -> [f64; 8] {
        let e = &self.eval;
        [
            e.acc_clean,
            e.auc_clean,
            e.acc_corrupted,
            e.auc_corrupted,
            e.acc_avg,
            e.auc_avg,
            self.sharpness_mean,
            self.sharpness_std,
        ]
    }
}

/// Balanced accuracy and macro AUC on one test set, scored with raw logits.
pub fn evaluate_set(arch: &MlpArchitecture, params: &ParameterVector, test: &[Sample]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let c = arch.num_classes();
    let mut preds = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    for s in test {
        let logits = forward(arch, params, &s.x)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("at least one class");
        preds.push(pred);
        scores.push(logits);
    }
    let labels: Vec<usize> = test.iter().map(|s| s.y).collect();
    Ok((
        balanced_accuracy(&preds, &labels, c)?,
        macro_auc_ovr(&scores, &labels, c)?,
    ))
}

pub fn evaluate(
    arch: &MlpArchitecture,
    params: &ParameterVector,
    clean_test: &[Sample],
    corrupted_test: &[Sample],
) -> Result<Evaluation> {
    let (acc_clean, auc_clean) = evaluate_set(arch, params, clean_test)?;
    let (acc_corrupted, auc_corrupted) = evaluate_set(arch, params, corrupted_test)?;
    Ok(Evaluation {
        acc_clean,
        auc_clean,
        acc_corrupted,
        auc_corrupted,
        acc_avg: (acc_clean + acc_corrupted) / 2.0,
        auc_avg: (auc_clean + auc_corrupted) / 2.0,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
