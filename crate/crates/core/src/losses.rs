//! Training criteria: concordance (CCC) loss for valence/arousal,
//! cross-entropy for expressions, binary cross-entropy for action units
//! and the pairwise attention-head consistency term.

use serde::{Deserialize, Serialize};

use crate::dataset::BatchTargets;
use crate::error::{Error, Result};
use crate::model::{ModelOutput, N_AU, N_EXPR, N_VA};
use crate::tensor::{Tape, Tensor, Var};

/// Guards the CCC denominator and the pair-count normalization.
pub const LOSS_EPS: f64 = 1e-8;

/// Lin's concordance correlation coefficient with population moments:
/// `2 cov(x, y) / (var x + var y + (mean x - mean y)^2 + eps)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::contract(format!(
            "ccc needs equal non-empty lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    let (cov, vx, vy) = (cov / n, vx / n, vy / n);
    Ok(2.0 * cov / (vx + vy + (mx - my) * (mx - my) + LOSS_EPS))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_va: f64,
    pub w_expr: f64,
    pub w_au: f64,
    pub w_att: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_va: 1.0,
            w_expr: 1.0,
            w_au: 1.0,
            w_att: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_va, self.w_expr, self.w_au, self.w_att];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Training stage. Stage 2 adds the attention-consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// `mean over {valence, arousal} of (1 - CCC)`, batch statistics.
pub fn ccc_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if ps != ts || ps.len() != 2 {
        return Err(Error::shape(format!("ccc_loss shapes {ps:?} vs {ts:?}")));
    }
    if ps[0] < 2 {
        return Err(Error::contract("ccc_loss needs a batch of at least 2"));
    }
    let mp = tape.mean(pred, &[0], true)?;
    let mt = tape.mean(target, &[0], true)?;
    let cp = tape.sub(pred, mp)?;
    let ct = tape.sub(target, mt)?;
    let prod = tape.mul(cp, ct)?;
    let cov = tape.mean(prod, &[0], true)?;
    let sp = tape.square(cp)?;
    let vp = tape.mean(sp, &[0], true)?;
    let st = tape.square(ct)?;
    let vt = tape.mean(st, &[0], true)?;
    let dm = tape.sub(mp, mt)?;
    let dm2 = tape.square(dm)?;
    let var_sum = tape.add(vp, vt)?;
    let denom = tape.add(var_sum, dm2)?;
    let denom = tape.add_scalar(denom, LOSS_EPS)?;
    let num = tape.scale(cov, 2.0)?;
    let c = tape.div(num, denom)?;
    let one_minus = tape.scale(c, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    tape.mean_all(one_minus)
}

/// Mean of `-log softmax(logits)[target]` over the batch.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape(format!(
            "cross_entropy logits {s:?} vs {} targets",
            targets.len()
        )));
    }
    let classes = s[1];
    let mut onehot = vec![0.0; s[0] * classes];
    for (row, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::contract(format!("class {t} out of range 0..{classes}")));
        }
        onehot[row * classes + t] = 1.0;
    }
    let onehot = tape.constant(&Tensor::from_vec(&s, onehot)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / s[0] as f64)
}

/// Mean binary cross-entropy over all entries, in the logit form
/// `softplus(z) - y z`.
pub fn bce(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(Error::shape(format!(
            "bce logits {:?} vs targets {:?}",
            tape.shape(logits),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract("bce targets must be 0 or 1"));
    }
    let y = tape.constant(targets);
    let sp = tape.softplus(logits)?;
    let zy = tape.mul(logits, y)?;
    let per = tape.sub(sp, zy)?;
    tape.mean_all(per)
}

/// Sum of pairwise mean squared errors between head maps divided by
/// `n_pairs + eps`. A single head yields 0.
pub fn attention_consistency(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let first = *maps
        .first()
        .ok_or_else(|| Error::contract("attention_consistency needs at least one map"))?;
    let shape = tape.shape(first).to_vec();
    if maps.iter().any(|&m| tape.shape(m) != shape.as_slice()) {
        return Err(Error::contract("attention maps differ in shape"));
    }
    let n_pairs = maps.len() * (maps.len() - 1) / 2;
    if n_pairs == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let d = tape.sub(maps[i], maps[j])?;
            let d2 = tape.square(d)?;
            let mse = tape.mean_all(d2)?;
            total = Some(match total {
                Some(t) => tape.add(t, mse)?,
                None => mse,
            });
        }
    }
    tape.scale(total.unwrap(), 1.0 / (n_pairs as f64 + LOSS_EPS))
}

/// Weighted total and the unweighted components, for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub va: f64,
    pub expr: f64,
    pub au: f64,
    /// Zero in stage 1.
    pub att: f64,
}

/// `w_va·ccc_loss + w_expr·ce + w_au·bce`, plus `w_att·consistency` in
/// stage 2. Terms with zero weight are skipped.
pub fn multitask_loss(
    tape: &mut Tape,
    output: &ModelOutput,
    targets: &BatchTargets,
    weights: &LossWeights,
    stage: Stage,
) -> Result<LossTerms> {
    weights.validate()?;
    let b = targets.len();
    if targets.va.shape() != [b, N_VA] || targets.au.shape() != [b, N_AU] {
        return Err(Error::shape("targets do not match the head widths"));
    }
    if tape.shape(output.expr_logits) != [b, N_EXPR] {
        return Err(Error::shape(format!(
            "expression logits {:?} vs batch {b}",
            tape.shape(output.expr_logits)
        )));
    }
    let mut total: Option<Var> = None;
    let mut terms = [0.0; 4];
    let mut add = |tape: &mut Tape, slot: usize, term: Var, w: f64| -> Result<()> {
        terms[slot] = tape.data(term)[0];
        let weighted = tape.scale(term, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
        Ok(())
    };
    if weights.w_va > 0.0 {
        let target = tape.constant(&targets.va);
        let l = ccc_loss(tape, output.va, target)?;
        add(tape, 0, l, weights.w_va)?;
    }
    if weights.w_expr > 0.0 {
        let l = cross_entropy(tape, output.expr_logits, &targets.expr)?;
        add(tape, 1, l, weights.w_expr)?;
    }
    if weights.w_au > 0.0 {
        let l = bce(tape, output.au_logits, &targets.au)?;
        add(tape, 2, l, weights.w_au)?;
    }
    if stage == Stage::Two && weights.w_att > 0.0 {
        let l = attention_consistency(tape, &output.attention_maps)?;
        add(tape, 3, l, weights.w_att)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(&Tensor::scalar(0.0)),
    };
    Ok(LossTerms {
        total,
        va: terms[0],
        expr: terms[1],
        au: terms[2],
        att: terms[3],
    })
}
