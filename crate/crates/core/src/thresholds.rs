//! Per-AU decision thresholds tuned by grid search on held-out predictions.

use std::path::Path;

use serde_json::{Map, Value};

use crate::dataset::AU_NAMES;
use crate::error::{Error, Result};
use crate::metrics::{au_column, binary_f1, DEFAULT_THRESHOLD};
use crate::model::N_AU;

/// `{0.05, 0.10, ..., 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSet(pub [f64; N_AU]);

impl Default for ThresholdSet {
    fn default() -> Self {
        ThresholdSet([DEFAULT_THRESHOLD; N_AU])
    }
}

impl ThresholdSet {
    pub fn values(&self) -> &[f64; N_AU] {
        &self.0
    }

    pub fn to_json(&self) -> Value {
        let map: Map<String, Value> = AU_NAMES
            .iter()
            .zip(self.0)
            .map(|(name, t)| (name.to_string(), Value::from(t)))
            .collect();
        Value::Object(map)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Data("thresholds must be a JSON object".into()))?;
        let mut out = [0.0; N_AU];
        for (slot, name) in out.iter_mut().zip(AU_NAMES) {
            let t = obj
                .get(name)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Data(format!("threshold for {name} missing or not a number")))?;
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Data(format!("threshold for {name} must lie in (0, 1), got {t}")));
            }
            *slot = t;
        }
        Ok(ThresholdSet(out))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_json(&v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSearch {
    pub thresholds: ThresholdSet,
    /// Per-AU F1 at the default 0.5 threshold.
    pub f1_before: [f64; N_AU],
    pub f1_after: [f64; N_AU],
}

/// For each AU independently, the grid value maximizing binary F1; ties go
/// to the lowest threshold. `probs`/`truth` are row-major `[N, 12]`.
pub fn optimize_thresholds(probs: &[f64], truth: &[bool], grid: &[f64]) -> Result<ThresholdSearch> {
    if grid.is_empty() || grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::contract(
            "threshold grid must be non-empty with values in (0, 1)",
        ));
    }
    if probs.is_empty() {
        return Err(Error::contract("threshold search needs at least one frame"));
    }
    if probs.len() != truth.len() || !probs.len().is_multiple_of(N_AU) {
        return Err(Error::contract(format!("AU probs and truth must both be [N, {N_AU}]")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut thresholds = [0.0; N_AU];
    let mut f1_before = [0.0; N_AU];
    let mut f1_after = [0.0; N_AU];
    for j in 0..N_AU {
        let (p, t) = au_column(probs, truth, j, DEFAULT_THRESHOLD);
        f1_before[j] = binary_f1(&p, &t)?;
        let mut best = (sorted[0], f64::NEG_INFINITY);
        for &g in &sorted {
            let (p, t) = au_column(probs, truth, j, g);
            let f = binary_f1(&p, &t)?;
            if f > best.1 {
                best = (g, f);
            }
        }
        thresholds[j] = best.0;
        f1_after[j] = best.1;
    }
    Ok(ThresholdSearch {
        thresholds: ThresholdSet(thresholds),
        f1_before,
        f1_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        let g = default_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[4], 0.25);
        assert_eq!(g[9], 0.5);
        assert_eq!(g[18], 0.95);
    }

    #[test]
    fn separable_probs_pick_lowest_perfect_threshold() {
        let n = 6;
        let mut probs = vec![0.0; n * N_AU];
        let mut truth = vec![false; n * N_AU];
        for i in 0..n {
            for j in 0..N_AU {
                let pos = (i + j) % 2 == 0;
                truth[i * N_AU + j] = pos;
                probs[i * N_AU + j] = if pos { 0.8 + 0.03 * i as f64 } else { 0.22 };
            }
        }
        let r = optimize_thresholds(&probs, &truth, &default_grid()).unwrap();
        assert_eq!(r.thresholds.0, [0.25; N_AU]);
        assert_eq!(r.f1_after, [1.0; N_AU]);
    }

    #[test]
    fn exact_probs_pick_first_grid_value() {
        let truth: Vec<bool> = (0..48).map(|i| i % 3 == 0).collect();
        let probs: Vec<f64> = truth.iter().map(|&t| f64::from(u8::from(t))).collect();
        let r = optimize_thresholds(&probs, &truth, &default_grid()).unwrap();
        assert_eq!(r.thresholds.0, [0.05; N_AU]);
    }

    #[test]
    fn errors() {
        assert!(optimize_thresholds(&[], &[], &default_grid()).is_err());
        assert!(optimize_thresholds(&[0.5; 12], &[true; 12], &[]).is_err());
        assert!(optimize_thresholds(&[0.5; 12], &[true; 12], &[1.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut t = ThresholdSet::default();
        t.0[3] = 0.35;
        let j = t.to_json();
        assert_eq!(j["AU6"], 0.35);
        assert_eq!(j.as_object().unwrap().keys().next().unwrap(), "AU1");
        assert_eq!(ThresholdSet::from_json(&j).unwrap(), t);
        let mut bad = j.clone();
        bad["AU1"] = Value::from(1.5);
        assert!(ThresholdSet::from_json(&bad).is_err());
    }
}
