//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::params::NamedParams;

/// Absolute error below which a coordinate always passes.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// Coordinates where `f` was non-finite at a perturbed point.
    pub non_finite: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: BTreeMap<String, LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves
            .values()
            .map(|l| l.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves
            .values()
            .all(|l| l.non_finite.is_empty() && l.max_rel_err <= self.tol)
    }
}

/// Coordinate error with the absolute-error fallback near zero.
pub fn coord_error(analytic: f64, numeric: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    if abs <= ABS_FALLBACK {
        0.0
    } else {
        abs / analytic.abs().max(numeric.abs())
    }
}

/// Compares `backward` against central differences for every coordinate of
/// every leaf. `f` must record `leaves` on the tape (in the given order)
/// and return a scalar loss; it receives one handle per leaf.
pub fn finite_diff_check<F>(f: F, leaves: &NamedParams, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &NamedParams| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.leaves(params);
        let loss = f(&mut tape, &vars)?;
        tape.scalar(loss)
    };

    let mut tape = Tape::new();
    let vars = tape.leaves(leaves);
    let loss = f(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?;

    let mut report = GradCheckReport {
        leaves: BTreeMap::new(),
        tol,
    };
    let mut probe = leaves.clone();
    for (name, value) in leaves.iter() {
        let grad = analytic.require(name)?;
        let mut leaf = LeafReport {
            max_rel_err: 0.0,
            worst_index: None,
            non_finite: Vec::new(),
        };
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                leaf.non_finite.push(i);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = coord_error(grad.data()[i], numeric);
            if err > leaf.max_rel_err {
                leaf.max_rel_err = err;
                leaf.worst_index = Some(i);
            }
        }
        report.leaves.insert(name.to_string(), leaf);
    }
    Ok(report)
}
