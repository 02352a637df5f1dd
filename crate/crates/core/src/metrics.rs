//! Exact AP, ROC-AUC and accuracy.
//!
//! Ties: AUC counts a tied positive/negative pair as one half; AP evaluates
//! precision and recall only at distinct-score boundaries, so tied items enter
//! together.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embeddings::Label;
use crate::error::{CmtaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub clip_id: String,
    /// Predicted probability of the fake class.
    pub score: f64,
    pub label: Label,
}

impl ScoredPrediction {
    pub fn new(clip_id: impl Into<String>, score: f64, label: Label) -> Self {
        ScoredPrediction {
            clip_id: clip_id.into(),
            score,
            label,
        }
    }
}

fn check_finite(preds: &[ScoredPrediction]) -> Result<()> {
    match preds.iter().find(|p| !p.score.is_finite()) {
        Some(p) => Err(CmtaError::Data(format!("non-finite score for clip `{}`", p.clip_id))),
        None => Ok(()),
    }
}

/// `(positives, negatives)` per distinct score, highest score first.
fn tie_groups(preds: &[ScoredPrediction]) -> Vec<(u64, u64)> {
    let mut sorted: Vec<&ScoredPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for p in sorted {
        if last != Some(p.score) {
            groups.push((0, 0));
            last = Some(p.score);
        }
        let g = groups.last_mut().expect("pushed");
        match p.label {
            Label::Fake => g.0 += 1,
            Label::Real => g.1 += 1,
        }
    }
    groups
}

/// Mann–Whitney AUC: `(#{s_pos > s_neg} + ½·#ties) / (P·N)`.
pub fn auc(preds: &[ScoredPrediction]) -> Result<f64> {
    check_finite(preds)?;
    let groups = tie_groups(preds);
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1).sum();
    if pos == 0 || neg == 0 {
        return Err(CmtaError::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    // Walk from the lowest score up, counting negatives strictly below.
    // Doubled integer counts keep the numerator exact.
    let mut neg_below = 0u64;
    let mut twice = 0u64;
    for &(p, n) in groups.iter().rev() {
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// `Σ (R_n − R_{n−1})·P_n` over distinct-score thresholds, descending.
pub fn average_precision(preds: &[ScoredPrediction]) -> Result<f64> {
    check_finite(preds)?;
    let groups = tie_groups(preds);
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    if pos == 0 {
        return Err(CmtaError::UndefinedMetric("AP needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, n) in groups {
        tp += p;
        fp += n;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of clips where `(score ≥ threshold) == (label is fake)`.
pub fn accuracy(preds: &[ScoredPrediction], threshold: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(CmtaError::UndefinedMetric("accuracy of an empty set".into()));
    }
    check_finite(preds)?;
    let correct = preds
        .iter()
        .filter(|p| (p.score >= threshold) == (p.label == Label::Fake))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Default decision threshold on the fake-class probability.
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetRow {
    pub subset: String,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<SubsetRow>,
    pub mean: SubsetRow,
    pub warnings: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = values.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Metrics per subset (in order of first appearance) plus an unweighted mean
/// row. Undefined metrics become blank cells and a warning.
pub fn per_subset_report(preds: &[(String, ScoredPrediction)]) -> Report {
    let mut order: Vec<&str> = Vec::new();
    for (s, _) in preds {
        if !order.contains(&s.as_str()) {
            order.push(s);
        }
    }
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(order.len());
    for subset in order {
        let items: Vec<ScoredPrediction> =
            preds.iter().filter(|(s, _)| s == subset).map(|(_, p)| p.clone()).collect();
        let mut cell = |name: &str, r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("subset `{subset}`: {name}: {e}"));
                None
            }
        };
        rows.push(SubsetRow {
            subset: subset.to_string(),
            ap: cell("ap", average_precision(&items)),
            auc: cell("auc", auc(&items)),
            acc: cell("acc", accuracy(&items, ACC_THRESHOLD)),
        });
    }
    let mean = SubsetRow {
        subset: "mean".into(),
        ap: mean_of(rows.iter().map(|r| r.ap)),
        auc: mean_of(rows.iter().map(|r| r.auc)),
        acc: mean_of(rows.iter().map(|r| r.acc)),
    };
    Report { rows, mean, warnings }
}

impl Report {
    /// `subset,ap,auc,acc` with a final `mean` row; values as fractions.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("subset,ap,auc,acc\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(out, "{},{},{},{}", r.subset, fmt(r.ap), fmt(r.auc), fmt(r.acc));
        }
        out
    }
}
