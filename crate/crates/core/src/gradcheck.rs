//! Finite-difference gradient checking.
//!
//! Compares tape-computed gradients of a scalar function against central
//! differences, coordinate by coordinate. Coordinates probed at or across a
//! kink (the one-sided differences disagree) are excluded and reported
//! rather than failed, since the central difference is meaningless there.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, ValueId};
use crate::tensor::Tensor;

/// One problematic coordinate: either a mismatch or a non-finite probe.
#[derive(Clone, Debug)]
pub struct CoordIssue {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub non_finite: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max relative error over checked (non-excluded) coordinates.
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub failures: Vec<CoordIssue>,
    /// (param index, coordinate) pairs probed at a kink.
    pub excluded: Vec<(usize, usize)>,
}

/// Relative error with the guarded denominator max(1e-12, |a| + |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Central differences of `build` at `params`, probing each coordinate with
/// step `h`. Returns per-parameter gradient estimates plus the kink
/// exclusions and non-finite probes encountered.
pub fn numeric_gradients<F: Scalar>(
    params: &[(ParamId, Tensor<F>)],
    h: F,
    build: &impl Fn(&mut Tape<F>) -> Result<ValueId>,
) -> Result<(Vec<Tensor<F>>, Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if h <= F::zero() {
        return Err(Error::invalid("grad check step", "h must be positive"));
    }
    let eval = |mutate: Option<(usize, usize, F)>| -> Result<F> {
        let mut tape = Tape::new();
        for (i, (pid, t)) in params.iter().enumerate() {
            let mut t = t.clone();
            if let Some((pi, ci, delta)) = mutate {
                if pi == i {
                    t.data_mut()[ci] += delta;
                }
            }
            tape.param(*pid, &t);
        }
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let base = eval(None)?;
    let mut grads = Vec::with_capacity(params.len());
    let mut excluded = Vec::new();
    let mut non_finite = Vec::new();
    let two_h = h + h;
    for (pi, (_, t)) in params.iter().enumerate() {
        let mut g = Tensor::zeros(t.shape());
        for ci in 0..t.len() {
            let fp = eval(Some((pi, ci, h)))?;
            let fm = eval(Some((pi, ci, -h)))?;
            if !fp.is_finite() || !fm.is_finite() || !base.is_finite() {
                non_finite.push((pi, ci));
                continue;
            }
            let central = (fp - fm) / two_h;
            let d_plus = (fp - base) / h;
            let d_minus = (base - fm) / h;
            if is_kink(d_plus.as_f64(), d_minus.as_f64()) {
                excluded.push((pi, ci));
                continue;
            }
            g.data_mut()[ci] = central;
        }
        grads.push(g);
    }
    Ok((grads, excluded, non_finite))
}

// One-sided slopes disagreeing by more than this fraction of their
// magnitude (and by more than an absolute floor above finite-difference
// noise) indicate a kink between x-h and x+h.
fn is_kink(d_plus: f64, d_minus: f64) -> bool {
    let diff = (d_plus - d_minus).abs();
    diff > 1e-4 && diff > 0.25 * d_plus.abs().max(d_minus.abs())
}

/// Compare analytic gradients against finite-difference estimates.
pub fn compare_gradients<F: Scalar>(
    analytic: &[Tensor<F>],
    numeric: &[Tensor<F>],
    skip: &[(usize, usize)],
    non_finite: &[(usize, usize)],
    tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        pass: true,
        excluded: skip.to_vec(),
        ..Default::default()
    };
    for &(pi, ci) in non_finite {
        report.pass = false;
        report.failures.push(CoordIssue {
            param: pi,
            coord: ci,
            analytic: f64::NAN,
            numeric: f64::NAN,
            rel_err: f64::INFINITY,
            non_finite: true,
        });
    }
    for (pi, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        for ci in 0..a.len() {
            if skip.contains(&(pi, ci)) || non_finite.contains(&(pi, ci)) {
                continue;
            }
            let av = a.data()[ci].as_f64();
            let nv = n.data()[ci].as_f64();
            let rel = relative_error(av, nv);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > tol {
                report.pass = false;
                report.failures.push(CoordIssue {
                    param: pi,
                    coord: ci,
                    analytic: av,
                    numeric: nv,
                    rel_err: rel,
                    non_finite: false,
                });
            }
        }
    }
    report
}

/// Full check: analytic gradients from one backward pass versus central
/// differences of the same function.
pub fn grad_check<F: Scalar>(
    params: &[(ParamId, Tensor<F>)],
    h: F,
    tol: f64,
    build: impl Fn(&mut Tape<F>) -> Result<ValueId>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    for (pid, t) in params {
        tape.param(*pid, t);
    }
    let loss = build(&mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<F>> = params
        .iter()
        .map(|(pid, t)| {
            grads
                .get(*pid)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let (numeric, excluded, non_finite) = numeric_gradients(params, h, &build)?;
    Ok(compare_gradients(&analytic, &numeric, &excluded, &non_finite, tol))
}
