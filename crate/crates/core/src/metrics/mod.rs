//! Classification and attention metrics, macro-averaged one-vs-rest.
//!
//! Conventions: precision, recall and F1 are 0 when their denominator is 0;
//! ROC AUC is the Mann-Whitney rank statistic with ties counted as 1/2;
//! PR AUC is step-wise average precision over distinct score thresholds.

mod export;

pub use export::{
    parse_attention_csv, parse_predictions_csv, write_attention_csv, write_confusion_csv,
    write_embeddings_csv, write_pr_csv, write_predictions_csv, write_roc_csv, AttentionRecord,
    ATTENTION_CSV_FIXED_COLUMNS,
};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::PlantedTruth;
use crate::error::{Error, Result};

/// Tolerance on each probability vector's sum.
pub const PROBABILITY_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub bag_id: String,
    pub true_label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

/// Predictions for one test fold of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    n_classes: usize,
    records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn new(n_classes: usize, records: Vec<PredictionRecord>) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidParameter("prediction set with zero classes".into()));
        }
        for r in &records {
            if r.true_label >= n_classes || r.predicted >= n_classes {
                return Err(Error::InvalidParameter(format!(
                    "bag {}: label {} / prediction {} outside {n_classes} classes",
                    r.bag_id, r.true_label, r.predicted
                )));
            }
            if r.probabilities.len() != n_classes {
                return Err(Error::ShapeMismatch(format!(
                    "bag {}: {} probabilities for {n_classes} classes",
                    r.bag_id,
                    r.probabilities.len()
                )));
            }
            if r.probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::NonFinite(format!("bag {}: probabilities", r.bag_id)));
            }
            let s: f64 = r.probabilities.iter().sum();
            if (s - 1.0).abs() > PROBABILITY_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "bag {}: probabilities sum to {s}",
                    r.bag_id
                )));
            }
        }
        Ok(Self { n_classes, records })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn nonempty(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Empty("prediction set".into()));
        }
        Ok(())
    }

    /// One-vs-rest view of class `c`: (score, is_positive) per record.
    pub fn one_vs_rest(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        self.records
            .iter()
            .map(|r| (r.probabilities[c], r.true_label == c))
            .unzip()
    }
}

/// Row `i`, column `j`: bags of true class `i` predicted as `j`.
pub fn confusion_matrix(preds: &PredictionSet) -> Result<Vec<Vec<u64>>> {
    preds.nonempty()?;
    let c = preds.n_classes;
    let mut m = vec![vec![0u64; c]; c];
    for r in &preds.records {
        m[r.true_label][r.predicted] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
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

pub fn per_class_scores(confusion: &[Vec<u64>]) -> Vec<ClassScores> {
    let c = confusion.len();
    (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let actual: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { precision, recall, f1 }
        })
        .collect()
}

pub fn macro_f1(preds: &PredictionSet) -> Result<f64> {
    let scores = per_class_scores(&confusion_matrix(preds)?);
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Binary ROC AUC, or `None` when one side is empty.
pub fn binary_roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Walking down from the top score, each positive outranks the negatives
    // below its group and ties with the negatives inside it.
    let mut neg_above = 0u64;
    let mut twice_wins = 0u64;
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| positive[i]).count() as u64;
        let gn = g.len() as u64 - gp;
        let neg_below = n_neg as u64 - neg_above - gn;
        twice_wins += gp * (2 * neg_below + gn);
        neg_above += gn;
    }
    Some(twice_wins as f64 / (2 * n_pos as u64 * n_neg as u64) as f64)
}

/// Binary average precision, or `None` without positives or negatives.
pub fn binary_average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return None;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for g in tie_groups(scores) {
        for &i in &g {
            if positive[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn macro_over_classes(
    preds: &PredictionSet,
    what: &str,
    f: fn(&[f64], &[bool]) -> Option<f64>,
) -> Result<f64> {
    preds.nonempty()?;
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..preds.n_classes {
        let (s, p) = preds.one_vs_rest(c);
        match f(&s, &p) {
            Some(v) => {
                total += v;
                used += 1;
            }
            None => warn!("{what}: class {c} skipped, one-vs-rest view has a single side"),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(format!("{what}: no class has both positives and negatives")));
    }
    Ok(total / used as f64)
}

pub fn roc_auc_macro(preds: &PredictionSet) -> Result<f64> {
    macro_over_classes(preds, "roc auc", binary_roc_auc)
}

pub fn pr_auc_macro(preds: &PredictionSet) -> Result<f64> {
    macro_over_classes(preds, "pr auc", binary_average_precision)
}

/// (threshold, false positive rate, true positive rate) at every distinct
/// threshold, starting from (+inf, 0, 0).
pub fn roc_points(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64, f64)> {
    let n_pos = positive.iter().filter(|p| **p).count().max(1) as f64;
    let n_neg = positive.iter().filter(|p| !**p).count().max(1) as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    for g in tie_groups(scores) {
        for &i in &g {
            if positive[i] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        out.push((scores[g[0]], fp / n_neg, tp / n_pos));
    }
    out
}

/// (threshold, recall, precision) at every distinct threshold.
pub fn pr_points(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64, f64)> {
    let n_pos = positive.iter().filter(|p| **p).count().max(1) as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut out = Vec::new();
    for g in tie_groups(scores) {
        for &i in &g {
            if positive[i] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        out.push((scores[g[0]], tp / n_pos, tp / (tp + fp)));
    }
    out
}

/// Pooled AUC of each instance's attention for its bag's true class,
/// separating planted from background instances.
pub fn attention_rank_auc(records: &[AttentionRecord], truth: &PlantedTruth) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("attention export".into()));
    }
    let mut scores = Vec::with_capacity(records.len());
    let mut positive = Vec::with_capacity(records.len());
    for r in records {
        if !truth.planted.contains_key(&r.bag_id) {
            return Err(Error::InvalidParameter(format!("bag {} missing from planted truth", r.bag_id)));
        }
        let w = r.weights.get(r.true_label).ok_or_else(|| {
            Error::ShapeMismatch(format!("bag {}: no attention column for class {}", r.bag_id, r.true_label))
        })?;
        scores.push(*w);
        positive.push(truth.is_planted(&r.bag_id, r.instance_id));
    }
    binary_roc_auc(&scores, &positive)
        .ok_or_else(|| Error::Degenerate("attention export has only planted or only background instances".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub f1_macro: f64,
    pub roc_auc_macro: f64,
    pub pr_auc_macro: f64,
    pub per_class: Vec<ClassScores>,
    pub attention_rank_auc: Option<f64>,
}

impl MetricsReport {
    pub fn compute(preds: &PredictionSet, attention_rank_auc: Option<f64>) -> Result<Self> {
        let confusion = confusion_matrix(preds)?;
        let per_class = per_class_scores(&confusion);
        Ok(Self {
            f1_macro: per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64,
            roc_auc_macro: roc_auc_macro(preds)?,
            pr_auc_macro: pr_auc_macro(preds)?,
            confusion,
            per_class,
            attention_rank_auc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample (n - 1) standard deviation; s.d. is 0 for one value.
pub fn mean_sd(values: &[f64]) -> Result<MeanSd> {
    if values.is_empty() {
        return Err(Error::Empty("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        warn!("aggregating a single report, standard deviation set to 0");
        return Ok(MeanSd { mean, sd: 0.0 });
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(MeanSd {
        mean,
        sd: (ss / (n - 1.0)).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_reports: usize,
    pub f1_macro: MeanSd,
    pub roc_auc_macro: MeanSd,
    pub pr_auc_macro: MeanSd,
    pub attention_rank_auc: Option<MeanSd>,
    /// Summed over all reports.
    pub confusion: Vec<Vec<u64>>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| Error::Empty("no reports to aggregate".into()))?;
    let c = first.confusion.len();
    let mut confusion = vec![vec![0u64; c]; c];
    for r in reports {
        if r.confusion.len() != c {
            return Err(Error::ShapeMismatch("reports disagree on the class count".into()));
        }
        for (acc, row) in confusion.iter_mut().zip(&r.confusion) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let pick = |f: fn(&MetricsReport) -> f64| mean_sd(&reports.iter().map(f).collect::<Vec<_>>());
    let attention: Option<Vec<f64>> = reports.iter().map(|r| r.attention_rank_auc).collect();
    Ok(AggregateReport {
        n_reports: reports.len(),
        f1_macro: pick(|r| r.f1_macro)?,
        roc_auc_macro: pick(|r| r.roc_auc_macro)?,
        pr_auc_macro: pick(|r| r.pr_auc_macro)?,
        attention_rank_auc: attention.map(|v| mean_sd(&v)).transpose()?,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: usize, p: usize, probs: Vec<f64>) -> PredictionRecord {
        PredictionRecord {
            bag_id: format!("b{t}{p}"),
            true_label: t,
            predicted: p,
            probabilities: probs,
        }
    }

    #[test]
    fn confusion_single_off_diagonal() {
        let set = PredictionSet::new(2, vec![record(0, 1, vec![0.4, 0.6])]).unwrap();
        assert_eq!(confusion_matrix(&set).unwrap(), vec![vec![0, 1], vec![0, 0]]);
        assert!(confusion_matrix(&PredictionSet::new(2, vec![]).unwrap()).is_err());
        assert!(PredictionSet::new(2, vec![record(2, 0, vec![0.5, 0.5])]).is_err());
        assert!(PredictionSet::new(2, vec![record(0, 0, vec![0.5, 0.6])]).is_err());
    }

    #[test]
    fn f1_all_one_class_is_one_third() {
        let recs = vec![
            record(0, 0, vec![0.9, 0.1]),
            record(0, 0, vec![0.9, 0.1]),
            record(1, 0, vec![0.9, 0.1]),
            record(1, 0, vec![0.9, 0.1]),
        ];
        let set = PredictionSet::new(2, recs).unwrap();
        assert!((macro_f1(&set).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn roc_ties_and_separation() {
        assert_eq!(binary_roc_auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(binary_roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(binary_roc_auc(&[0.9, 0.8], &[true, true]), None);
    }

    #[test]
    fn average_precision_last_ranked_positive() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut positive = vec![false; n];
        positive[n - 1] = true;
        let ap = binary_average_precision(&scores, &positive).unwrap();
        assert!((ap - 1.0 / n as f64).abs() < 1e-15);
        assert_eq!(binary_average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
    }

    #[test]
    fn aggregate_two_values() {
        let m = mean_sd(&[0.8, 1.0]).unwrap();
        assert!((m.mean - 0.9).abs() < 1e-15);
        assert!((m.sd - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(mean_sd(&[0.7, 0.7, 0.7]).unwrap().sd < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn attention_auc_uniform_is_half() {
        let mut truth = PlantedTruth::default();
        truth.planted.insert("a".into(), vec![1]);
        let recs: Vec<AttentionRecord> = (0..4)
            .map(|i| AttentionRecord {
                bag_id: "a".into(),
                instance_id: i,
                true_label: 0,
                predicted_class: 0,
                weights: vec![0.25],
            })
            .collect();
        assert_eq!(attention_rank_auc(&recs, &truth).unwrap(), 0.5);
        let mut sharp = recs.clone();
        sharp[1].weights = vec![0.7];
        assert_eq!(attention_rank_auc(&sharp, &truth).unwrap(), 1.0);
        assert!(attention_rank_auc(&recs, &PlantedTruth::default()).is_err());
    }
}
