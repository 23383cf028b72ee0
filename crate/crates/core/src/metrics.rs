//! Challenge metrics: CCC for valence and arousal, macro F1 for
//! expressions and action units, and the combined P score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ccc;
use crate::model::{N_AU, N_EXPR};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `2TP / (2TP + FP + FN)`, 0 when nothing is positive.
pub fn binary_f1(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "binary_f1 lengths {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    })
}

/// One-vs-rest F1 per class and their mean over `n_classes`. Classes
/// absent from both sequences score 0.
pub fn per_class_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::contract("prediction and truth lengths differ"));
    }
    if let Some(c) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::contract(format!("class {c} out of range 0..{n_classes}")));
    }
    (0..n_classes)
        .map(|k| {
            let p: Vec<bool> = pred.iter().map(|&c| c == k).collect();
            let t: Vec<bool> = truth.iter().map(|&c| c == k).collect();
            binary_f1(&p, &t)
        })
        .collect()
}

pub fn macro_f1_expr(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let f = per_class_f1(pred, truth, N_EXPR)?;
    Ok(f.iter().sum::<f64>() / N_EXPR as f64)
}

/// Thresholded AU F1. `probs` and `truth` are row-major `[N, 12]`;
/// an AU is predicted active when `prob >= threshold`.
pub fn macro_f1_au(probs: &[f64], truth: &[bool], thresholds: &[f64; N_AU]) -> Result<(f64, [f64; N_AU])> {
    if probs.len() != truth.len() || !probs.len().is_multiple_of(N_AU) {
        return Err(Error::contract(format!(
            "AU probs ({}) and truth ({}) must both be [N, {N_AU}]",
            probs.len(),
            truth.len()
        )));
    }
    let mut per_au = [0.0; N_AU];
    for (j, f) in per_au.iter_mut().enumerate() {
        let (p, t) = au_column(probs, truth, j, thresholds[j]);
        *f = binary_f1(&p, &t)?;
    }
    Ok((per_au.iter().sum::<f64>() / N_AU as f64, per_au))
}

pub(crate) fn au_column(probs: &[f64], truth: &[bool], j: usize, threshold: f64) -> (Vec<bool>, Vec<bool>) {
    let p = probs.iter().skip(j).step_by(N_AU).map(|&x| x >= threshold).collect();
    let t = truth.iter().skip(j).step_by(N_AU).copied().collect();
    (p, t)
}

/// `(ccc_v + ccc_a) / 2 + f1_expr + f1_au` with macro-averaged F1 inputs.
pub fn p_score(ccc_v: f64, ccc_a: f64, f1_expr: f64, f1_au: f64) -> f64 {
    (ccc_v + ccc_a) / 2.0 + f1_expr + f1_au
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub ccc_va: f64,
    pub f1_expr: f64,
    pub f1_au: f64,
    pub p_score: f64,
    pub per_class_f1: Vec<f64>,
    pub per_au_f1: Vec<f64>,
    pub thresholds_used: Vec<f64>,
    /// Plain accuracy of the argmax expression (diagnostic).
    pub expr_accuracy: f64,
}

/// Raw predictions for a set of frames, ready for scoring.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
    pub expr_pred: Vec<usize>,
    /// Row-major `[N, 12]` sigmoid outputs.
    pub au_probs: Vec<f64>,
    pub truth_valence: Vec<f64>,
    pub truth_arousal: Vec<f64>,
    pub truth_expr: Vec<usize>,
    pub truth_au: Vec<bool>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.expr_pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expr_pred.is_empty()
    }
}

impl MetricReport {
    pub fn compute(preds: &PredictionSet, thresholds: &[f64; N_AU]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::contract("cannot score an empty prediction set"));
        }
        let ccc_v = ccc(&preds.valence, &preds.truth_valence)?;
        let ccc_a = ccc(&preds.arousal, &preds.truth_arousal)?;
        let per_class = per_class_f1(&preds.expr_pred, &preds.truth_expr, N_EXPR)?;
        let f1_expr = per_class.iter().sum::<f64>() / N_EXPR as f64;
        let (f1_au, per_au) = macro_f1_au(&preds.au_probs, &preds.truth_au, thresholds)?;
        let correct = preds
            .expr_pred
            .iter()
            .zip(&preds.truth_expr)
            .filter(|(p, t)| p == t)
            .count();
        Ok(MetricReport {
            ccc_v,
            ccc_a,
            ccc_va: (ccc_v + ccc_a) / 2.0,
            f1_expr,
            f1_au,
            p_score: p_score(ccc_v, ccc_a, f1_expr, f1_au),
            per_class_f1: per_class,
            per_au_f1: per_au.to_vec(),
            thresholds_used: thresholds.to_vec(),
            expr_accuracy: correct as f64 / preds.len() as f64,
        })
    }
}

/// Aligned comparison table, one row per labelled report.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(std::iter::once("Trainable layers".len()))
        .max()
        .unwrap_or(0);
    let cols = ["CCC_V", "CCC_A", "CCC_VA", "F1_Expr", "F1_AU", "P"];
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Trainable layers");
    for c in cols {
        let _ = write!(out, "  {c:>7}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + cols.len() * 9));
    out.push('\n');
    for (label, r) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in [r.ccc_v, r.ccc_a, r.ccc_va, r.f1_expr, r.f1_au, r.p_score] {
            let _ = write!(out, "  {v:>7.3}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn binary_f1_examples() {
        assert_eq!(binary_f1(&b(&[1, 0, 1]), &b(&[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(binary_f1(&b(&[1, 0, 1, 0]), &b(&[1, 1, 0, 0])).unwrap(), 0.5);
        assert_eq!(binary_f1(&b(&[0, 0]), &b(&[0, 0])).unwrap(), 0.0);
        assert!(binary_f1(&b(&[0]), &b(&[0, 1])).is_err());
    }

    #[test]
    fn macro_f1_expr_examples() {
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(macro_f1_expr(&all, &all).unwrap(), 1.0);
        assert_eq!(macro_f1_expr(&[1, 0], &[0, 1]).unwrap(), 0.0);
        // class 0: TP1 FN1 -> 2/3; class 1: TP1 FP1 -> 2/3; class 2: 1
        let m = macro_f1_expr(&[0, 1, 1, 2], &[0, 0, 1, 2]).unwrap();
        assert!((m - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 8.0).abs() < 1e-15);
        assert!((m - 0.2917).abs() < 1e-4);
        assert!(matches!(macro_f1_expr(&[8], &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn macro_f1_au_examples() {
        let truth = b(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0, 1, 0, 0, 1, 1, 0, 1, 0, 1, 0, 1]);
        let probs: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let (m, _) = macro_f1_au(&probs, &truth, &[0.5; 12]).unwrap();
        assert_eq!(m, 1.0);

        // single AU column of interest: probs [0.6, 0.4], truth [1, 0]
        let mut probs = vec![0.0; 24];
        let mut truth = vec![false; 24];
        probs[0] = 0.6;
        probs[12] = 0.4;
        truth[0] = true;
        let mut t = [0.5; 12];
        let (_, per) = macro_f1_au(&probs, &truth, &t).unwrap();
        assert_eq!(per[0], 1.0);
        t[0] = 0.7;
        let (_, per) = macro_f1_au(&probs, &truth, &t).unwrap();
        assert_eq!(per[0], 0.0);

        assert!(macro_f1_au(&[0.5; 11], &[false; 11], &[0.5; 12]).is_err());
    }

    #[test]
    fn p_score_examples() {
        assert!((p_score(0.549, 0.524, 0.277, 0.470) - 1.2835).abs() < 1e-12);
        assert!((p_score(0.549, 0.524, 0.277, 0.470) - 1.287).abs() <= 0.006);
        assert!((p_score(0.604, 0.550, 0.287, 0.529) - 1.393).abs() <= 0.006);
        assert_eq!(p_score(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(p_score(1.0, 1.0, 1.0, 1.0), 3.0);
    }

    #[test]
    fn report_perfect_predictions() {
        let truth_v = vec![0.1, -0.4, 0.8, 0.3, -0.9, 0.0, 0.5, -0.2];
        let truth_a = vec![-0.3, 0.2, 0.6, -0.8, 0.4, 0.1, -0.5, 0.9];
        let expr: Vec<usize> = (0..8).collect();
        let au: Vec<bool> = (0..96).map(|i| (i % 12 + i / 12) % 2 == 0).collect();
        let preds = PredictionSet {
            valence: truth_v.clone(),
            arousal: truth_a.clone(),
            expr_pred: expr.clone(),
            au_probs: au.iter().map(|&a| if a { 0.9 } else { 0.1 }).collect(),
            truth_valence: truth_v,
            truth_arousal: truth_a,
            truth_expr: expr,
            truth_au: au,
        };
        let r = MetricReport::compute(&preds, &[0.5; 12]).unwrap();
        assert!((r.p_score - 3.0).abs() < 1e-6);
        assert_eq!(r.ccc_va, (r.ccc_v + r.ccc_a) / 2.0);
        assert_eq!(r.expr_accuracy, 1.0);
        assert!(MetricReport::compute(&PredictionSet::default(), &[0.5; 12]).is_err());
        let table = format_table(&[("DDAMFN".into(), &r)]);
        assert!(table.contains("3.000"));
        assert_eq!(table.lines().count(), 3);
    }
}
