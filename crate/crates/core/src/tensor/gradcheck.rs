//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between autodiff and central differences over
/// every coordinate of every tensor in `params`.
///
/// `f` builds a scalar on the tape from one leaf per entry of `params`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_grad_tracked(true);
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (i, g_ad) in analytic.iter().enumerate() {
        for (j, &ad) in g_ad.iter().enumerate() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let (tp, _, o) = eval(&work)?;
            let plus = tp.data(o)[0];
            work[i].data_mut()[j] = x0 - eps;
            let (tp, _, o) = eval(&work)?;
            let minus = tp.data(o)[0];
            work[i].data_mut()[j] = x0;
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(ad, fd));
        }
    }
    Ok(worst)
}

/// The coordinate with the largest relative error in a finite-difference
/// check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorstCoord {
    /// Position in the `coords` slice passed to the check.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Finite-difference check where the parameters live outside the tape.
///
/// `coords` enumerates `(param, index)` pairs, `get`/`set` read and write
/// one coordinate, `analytic` returns the autodiff gradient at a coordinate
/// and `value` evaluates the scalar function at the current parameters.
pub fn grad_check_params<S>(
    state: &mut S,
    coords: &[(usize, usize)],
    analytic: &[f64],
    get: impl Fn(&S, usize, usize) -> f64,
    set: impl Fn(&mut S, usize, usize, f64),
    value: impl FnMut(&mut S) -> Result<f64>,
    eps: f64,
) -> Result<f64> {
    let worst = grad_check_params_worst(state, coords, analytic, get, set, value, eps)?;
    Ok(worst.map_or(0.0, |w| w.rel_error))
}

/// Like [`grad_check_params`] but reports where the worst error occurs.
/// `None` when `coords` is empty.
pub fn grad_check_params_worst<S>(
    state: &mut S,
    coords: &[(usize, usize)],
    analytic: &[f64],
    get: impl Fn(&S, usize, usize) -> f64,
    set: impl Fn(&mut S, usize, usize, f64),
    mut value: impl FnMut(&mut S) -> Result<f64>,
    eps: f64,
) -> Result<Option<WorstCoord>> {
    let mut worst: Option<WorstCoord> = None;
    for (i, (&(p, j), &ad)) in coords.iter().zip(analytic).enumerate() {
        let x0 = get(state, p, j);
        set(state, p, j, x0 + eps);
        let plus = value(state)?;
        set(state, p, j, x0 - eps);
        let minus = value(state)?;
        set(state, p, j, x0);
        let fd = (plus - minus) / (2.0 * eps);
        let rel_error = relative_error(ad, fd);
        if worst.is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(WorstCoord {
                coord: i,
                analytic: ad,
                numeric: fd,
                rel_error,
            });
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Conv2dOpts;

    #[test]
    fn quadratic_in_three_params() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |tp, v| {
                let sq = tp.square(v[0])?;
                let s = tp.scale(sq, 1.5)?;
                let l = tp.add_scalar(v[0], 0.7)?;
                let t = tp.add(s, l)?;
                tp.sum_all(t)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn conv_sigmoid_composite() {
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.71).cos() * 0.5).collect()).unwrap();
        let err = grad_check(
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], Conv2dOpts::new(1, 1))?;
                let s = tp.sigmoid(y)?;
                tp.mean_all(s)
            },
            &[x, k],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tp, v| {
                let z = tp.scale(v[0], 0.0)?;
                let s = tp.sum_all(z)?;
                tp.add_scalar(s, 4.0)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
