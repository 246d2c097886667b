use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{binary_roc_auc, pr_points, roc_points, PredictionRecord, PredictionSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Columns before the per-class weights `a0..a{C-1}`.
pub const ATTENTION_CSV_FIXED_COLUMNS: [&str; 4] = ["bag_id", "instance_id", "true_label", "predicted_class"];

/// One instance's attention weights, one per class column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub bag_id: String,
    pub instance_id: u32,
    pub true_label: usize,
    pub predicted_class: usize,
    pub weights: Vec<f64>,
}

/// Weights are written with Rust's shortest round-trip formatting, so
/// parsing the output reproduces them exactly.
pub fn write_attention_csv(records: &[AttentionRecord], n_classes: usize) -> Result<String> {
    let mut out = ATTENTION_CSV_FIXED_COLUMNS.join(",");
    for c in 0..n_classes {
        write!(out, ",a{c}").unwrap();
    }
    out.push('\n');
    for r in records {
        if r.weights.len() != n_classes {
            return Err(Error::ShapeMismatch(format!(
                "bag {}: {} weights for {n_classes} classes",
                r.bag_id,
                r.weights.len()
            )));
        }
        if r.bag_id.contains([',', '\n', '\r', '"']) {
            return Err(Error::InvalidParameter(format!("bag id {:?} needs quoting", r.bag_id)));
        }
        write!(out, "{},{},{},{}", r.bag_id, r.instance_id, r.true_label, r.predicted_class).unwrap();
        for w in &r.weights {
            write!(out, ",{w:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_attention_csv(text: &str) -> Result<(usize, Vec<AttentionRecord>)> {
    let bad = |line: usize, reason: String| Error::format("attention csv", format!("line {line}: {reason}"));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..4] != ATTENTION_CSV_FIXED_COLUMNS {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let n_classes = cols.len() - 4;
    for (c, name) in cols[4..].iter().enumerate() {
        if *name != format!("a{c}") {
            return Err(bad(1, format!("column {name:?}, expected a{c}")));
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(ln, format!("{} fields, expected {}", fields.len(), cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(ln, format!("{s:?}: {e}")));
        let true_label = int(fields[2])?;
        let predicted_class = int(fields[3])?;
        if true_label >= n_classes || predicted_class >= n_classes {
            return Err(bad(ln, "class index out of range".into()));
        }
        let weights = fields[4..]
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(ln, format!("weight {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(AttentionRecord {
            bag_id: fields[0].to_string(),
            instance_id: fields[1].parse().map_err(|e| bad(ln, format!("instance id: {e}")))?,
            true_label,
            predicted_class,
            weights,
        });
    }
    Ok((n_classes, records))
}

/// `true\predicted` header row then one row per true class.
pub fn write_confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::from("true_label");
    for c in 0..confusion.len() {
        write!(out, ",pred{c}").unwrap();
    }
    out.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One-vs-rest ROC points for every class: `class,threshold,fpr,tpr`.
/// Degenerate classes are left out.
pub fn write_roc_csv(preds: &PredictionSet) -> String {
    curve_csv(preds, "class,threshold,fpr,tpr\n", |s, p| {
        binary_roc_auc(s, p).map(|_| roc_points(s, p))
    })
}

/// One-vs-rest precision/recall points: `class,threshold,recall,precision`.
pub fn write_pr_csv(preds: &PredictionSet) -> String {
    curve_csv(preds, "class,threshold,recall,precision\n", |s, p| {
        binary_roc_auc(s, p).map(|_| pr_points(s, p))
    })
}

fn curve_csv(
    preds: &PredictionSet,
    header: &str,
    points: impl Fn(&[f64], &[bool]) -> Option<Vec<(f64, f64, f64)>>,
) -> String {
    let mut out = header.to_string();
    for c in 0..preds.n_classes() {
        let (scores, positive) = preds.one_vs_rest(c);
        for (t, x, y) in points(&scores, &positive).unwrap_or_default() {
            writeln!(out, "{c},{t:?},{x:?},{y:?}").unwrap();
        }
    }
    out
}

/// `bag_id,true_label,predicted,p0..p{C-1}` with round-trip floats.
pub fn write_predictions_csv(preds: &PredictionSet) -> Result<String> {
    let mut out = String::from("bag_id,true_label,predicted");
    for c in 0..preds.n_classes() {
        write!(out, ",p{c}").unwrap();
    }
    out.push('\n');
    for r in preds.records() {
        if r.bag_id.contains([',', '\n', '\r', '"']) {
            return Err(Error::InvalidParameter(format!("bag id {:?} needs quoting", r.bag_id)));
        }
        write!(out, "{},{},{}", r.bag_id, r.true_label, r.predicted).unwrap();
        for p in &r.probabilities {
            write!(out, ",{p:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_predictions_csv(text: &str) -> Result<PredictionSet> {
    let bad = |line: usize, reason: String| Error::format("predictions csv", format!("line {line}: {reason}"));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["bag_id", "true_label", "predicted"] {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let n_classes = cols.len() - 3;
    for (c, name) in cols[3..].iter().enumerate() {
        if *name != format!("p{c}") {
            return Err(bad(1, format!("column {name:?}, expected p{c}")));
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(ln, format!("{} fields, expected {}", fields.len(), cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(ln, format!("{s:?}: {e}")));
        let probabilities = fields[3..]
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(ln, format!("probability {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(PredictionRecord {
            bag_id: fields[0].to_string(),
            true_label: int(fields[1])?,
            predicted: int(fields[2])?,
            probabilities,
        });
    }
    PredictionSet::new(n_classes, records)
}

/// Encoder outputs per instance: `bag_id,instance_id,z0..z{k-1}`.
pub fn write_embeddings_csv(rows: &[(String, Matrix)]) -> Result<String> {
    let k = rows.first().map_or(0, |(_, z)| z.cols());
    let mut out = String::from("bag_id,instance_id");
    for j in 0..k {
        write!(out, ",z{j}").unwrap();
    }
    out.push('\n');
    for (bag, z) in rows {
        if z.cols() != k {
            return Err(Error::ShapeMismatch(format!("bag {bag}: embedding width {}", z.cols())));
        }
        for i in 0..z.rows() {
            write!(out, "{bag},{i}").unwrap();
            for v in z.row(i) {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}
