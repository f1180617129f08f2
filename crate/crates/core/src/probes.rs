//! Diagnostics for update redundancy.
//!
//! * online gradient drop: `g ← m ⊙ g`, `m ~ Bernoulli(1 − p_on)` per
//!   coordinate and step;
//! * post-hoc prune: `θ_post = θ_0 + m ⊙ (θ_T − θ_0)` with one mask;
//! * selective drop: revert whole named tensors with the largest cumulative
//!   change (or random ones at the same count);
//! * per-layer update magnitude `||θ_T − θ_0||₂`;
//! * decision–redundancy ratio of a margin `m(θ) = z_y − z_k*`:
//!   `DR = ||Δθ||·||∇m(θ_0)|| / (ε − m_0)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::ledger::{floor_count, NamedScalars};
use crate::model::{forward_logits_on, Bound, ModelConfig};
use crate::params::NamedParams;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub p_on: f64,
    pub p_post: f64,
    /// Seed of the probe streams, independent of `master_seed`.
    pub rng_seed: u64,
    /// Fraction of named tensors reverted by the selective drop.
    pub topk_fraction: f64,
    pub prune_grid: Vec<f64>,
    /// Contexts sampled for the DR report.
    pub dr_contexts: usize,
    /// `ε_target = m_0 + dr_margin_offset`.
    pub dr_margin_offset: f64,
    /// Learning rate shared by the SFT and RL runs of the paradigm pair.
    pub matched_learning_rate: f64,
    pub matched_epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            p_on: 0.5,
            p_post: 0.5,
            rng_seed: 7,
            topk_fraction: 0.1,
            prune_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            dr_contexts: 200,
            dr_margin_offset: 1.0,
            matched_learning_rate: 1e-3,
            matched_epochs: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.p_on, self.p_post].into_iter().chain(self.prune_grid.iter().copied());
        for r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rate {r} outside [0, 1]")));
            }
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction < 1.0) {
            return Err(Error::Config(format!("topk_fraction {} outside (0, 1)", self.topk_fraction)));
        }
        if !(self.matched_learning_rate >= 0.0) || self.matched_epochs == 0 {
            return Err(Error::Config("matched learning rate / epochs invalid".into()));
        }
        if !(self.dr_margin_offset > 0.0) {
            return Err(Error::Config("dr_margin_offset must be positive".into()));
        }
        Ok(())
    }
}

/// Zeroes each gradient coordinate independently with probability `p_on`.
/// `p_on = 0` draws nothing and leaves `grads` untouched.
pub fn online_grad_drop<R: Rng>(grads: &mut NamedParams, p_on: f64, rng: &mut R) -> Result<()> {
    if !(0.0..=1.0).contains(&p_on) {
        return Err(Error::Invalid(format!("p_on {p_on} outside [0, 1]")));
    }
    if p_on == 0.0 {
        return Ok(());
    }
    for (_, g) in grads.iter_mut() {
        for x in g.data_mut() {
            if rng.random::<f64>() < p_on {
                *x = 0.0;
            }
        }
    }
    Ok(())
}

/// Stateful per-step wrapper: step `t` draws from `(rng_seed, mask, [t])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDropper {
    pub p_on: f64,
    pub seed: u64,
    pub step: u64,
}

impl GradDropper {
    pub fn new(p_on: f64, seed: u64) -> Self {
        Self { p_on, seed, step: 0 }
    }

    pub fn apply(&mut self, grads: &mut NamedParams) -> Result<()> {
        let mut rng = seeds::rng(self.seed, seeds::Stream::Mask, &[self.step]);
        self.step += 1;
        online_grad_drop(grads, self.p_on, &mut rng)
    }
}

/// Keeps each coordinate of `θ_T` with probability `1 − p_post`, otherwise
/// reverts it to `θ_0`. Kept coordinates are copied, so `p_post = 0` gives
/// `θ_T` and `p_post = 1` gives `θ_0` bit-exactly.
pub fn posthoc_prune<R: Rng>(
    theta0: &NamedParams,
    theta_t: &NamedParams,
    p_post: f64,
    rng: &mut R,
) -> Result<NamedParams> {
    theta0.check_layout(theta_t)?;
    if !(0.0..=1.0).contains(&p_post) {
        return Err(Error::Invalid(format!("p_post {p_post} outside [0, 1]")));
    }
    let mut out = theta_t.clone();
    for ((_, o), (_, a)) in out.iter_mut().zip(theta0.iter()) {
        for (x, &x0) in o.data_mut().iter_mut().zip(a.data()) {
            if rng.random::<f64>() < p_post {
                *x = x0;
            }
        }
    }
    Ok(out)
}

/// Running per-name sum of step-change norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeTracker {
    pub totals: NamedScalars,
}

impl ChangeTracker {
    pub fn new(params: &NamedParams) -> Self {
        Self {
            totals: params.names().map(|n| (n.to_string(), 0.0)).collect(),
        }
    }

    pub fn record(&mut self, before: &NamedParams, after: &NamedParams) -> Result<()> {
        let step = crate::ledger::rl_update_magnitudes(before, after, false)?;
        for ((_, t), (_, s)) in self.totals.iter_mut().zip(step) {
            *t += s;
        }
        Ok(())
    }
}

fn revert(theta0: &NamedParams, theta_t: &NamedParams, revert: &[bool]) -> NamedParams {
    let mut out = theta_t.clone();
    for (((_, o), (_, a)), &r) in out.iter_mut().zip(theta0.iter()).zip(revert) {
        if r {
            *o = a.clone();
        }
    }
    out
}

/// Reverts the `floor(fraction·d)` named tensors with the largest cumulative
/// change (ties by canonical order) to `θ_0`.
pub fn selective_topk_drop(
    theta0: &NamedParams,
    theta_t: &NamedParams,
    cumulative: &NamedScalars,
    fraction: f64,
) -> Result<NamedParams> {
    theta0.check_layout(theta_t)?;
    if cumulative.len() != theta0.len()
        || cumulative.iter().zip(theta0.names()).any(|((a, _), b)| a != b)
    {
        return Err(Error::KeyMismatch("cumulative change keys differ".into()));
    }
    let n = floor_count(fraction, theta0.len());
    let mut order: Vec<usize> = (0..cumulative.len()).collect();
    order.sort_by(|&a, &b| cumulative[b].1.total_cmp(&cumulative[a].1));
    let mut mask = vec![false; theta0.len()];
    for &i in &order[..n] {
        mask[i] = true;
    }
    Ok(revert(theta0, theta_t, &mask))
}

/// Counterpart of [`selective_topk_drop`] reverting uniformly random names.
pub fn random_name_drop<R: Rng>(
    theta0: &NamedParams,
    theta_t: &NamedParams,
    fraction: f64,
    rng: &mut R,
) -> Result<NamedParams> {
    theta0.check_layout(theta_t)?;
    let d = theta0.len();
    let n = floor_count(fraction, d);
    let perm = seeds::permutation(d, rng.random());
    let mut mask = vec![false; d];
    for &i in &perm[..n] {
        mask[i] = true;
    }
    Ok(revert(theta0, theta_t, &mask))
}

/// Per-group L2 norm of the concatenated change of its members. `grouping`
/// must partition the parameter names.
pub fn layer_update_magnitude(
    theta0: &NamedParams,
    theta_t: &NamedParams,
    grouping: &[(String, Vec<String>)],
) -> Result<Vec<(String, f64)>> {
    theta0.check_layout(theta_t)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(grouping.len());
    for (group, members) in grouping {
        let mut sq = 0.0;
        for name in members {
            if !seen.insert(name.as_str()) {
                return Err(Error::KeyMismatch(format!("`{name}` in more than one group")));
            }
            let a = theta0.require(name)?;
            let b = theta_t.require(name)?;
            sq += a.data().iter().zip(b.data()).map(|(x, y)| (y - x) * (y - x)).sum::<f64>();
        }
        out.push((group.clone(), sq.sqrt()));
    }
    if let Some(n) = theta0.names().find(|n| !seen.contains(n)) {
        return Err(Error::KeyMismatch(format!("`{n}` is not in any group")));
    }
    Ok(out)
}

/// A fixed context and target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginProbe {
    pub context: Vec<usize>,
    pub target: usize,
    /// Target margin; `None` means `m_0 + 1`.
    pub eps_target: Option<f64>,
}

/// `z_y − z_k` at the last context position, on a tape.
pub fn margin_on(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    context: &[usize],
    target: usize,
    competitor: usize,
) -> Result<Var> {
    let logits = forward_logits_on(tape, bound, model, context)?;
    let last = context.len() - 1;
    let zy = tape.gather(logits, vec![(last, target)])?;
    let zk = tape.gather(logits, vec![(last, competitor)])?;
    let m = tape.sub(zy, zk)?;
    tape.sum(m)
}

/// Margin at `params`, with `k*` the strongest non-target logit there.
#[derive(Debug, Clone)]
pub struct Margin {
    pub value: f64,
    pub competitor: usize,
    pub grad: NamedParams,
}

pub fn margin_and_grad(
    params: &NamedParams,
    model: &ModelConfig,
    context: &[usize],
    target: usize,
) -> Result<Margin> {
    if target >= model.vocab_size {
        return Err(Error::Invalid(format!("target {target} out of vocabulary")));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let logits = forward_logits_on(&mut tape, &bound, model, context)?;
    let row = {
        let v = model.vocab_size;
        let last = context.len() - 1;
        tape.value(logits)?.data()[last * v..(last + 1) * v].to_vec()
    };
    let mut competitor = if target == 0 { 1 } else { 0 };
    for (j, &z) in row.iter().enumerate() {
        if j != target && z > row[competitor] {
            competitor = j;
        }
    }
    let m = margin_on(&mut tape, &bound, model, context, target, competitor)?;
    Ok(Margin {
        value: tape.scalar(m)?,
        competitor,
        grad: tape.backward(m)?,
    })
}

/// Margin `z_y − z_k` at `params` for a fixed competitor.
pub fn margin_value(
    params: &NamedParams,
    model: &ModelConfig,
    context: &[usize],
    target: usize,
    competitor: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let m = margin_on(&mut tape, &bound, model, context, target, competitor)?;
    tape.scalar(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrStatus {
    Defined,
    /// `ε_target ≤ m_0`; DR is reported as 0.
    MarginMet,
    /// `||g|| = 0`.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrReport {
    pub m0: f64,
    pub grad_norm: f64,
    pub delta_norm: f64,
    pub eps_target: f64,
    pub dr: Option<f64>,
    pub status: DrStatus,
}

/// Assembles a report from the margin, its gradient norm and the update norm.
pub fn dr_report(m0: f64, grad_norm: f64, delta_norm: f64, eps_target: f64) -> DrReport {
    let (dr, status) = if grad_norm == 0.0 {
        (None, DrStatus::Undefined)
    } else if eps_target <= m0 {
        (Some(0.0), DrStatus::MarginMet)
    } else {
        (Some(delta_norm * grad_norm / (eps_target - m0)), DrStatus::Defined)
    };
    DrReport {
        m0,
        grad_norm,
        delta_norm,
        eps_target,
        dr,
        status,
    }
}

/// Decision–redundancy ratio of the update `θ_T − θ_0` for `probe`.
pub fn dr_ratio(
    theta0: &NamedParams,
    theta_t: &NamedParams,
    probe: &MarginProbe,
    model: &ModelConfig,
) -> Result<DrReport> {
    let delta = theta_t.diff(theta0)?;
    let m = margin_and_grad(theta0, model, &probe.context, probe.target)?;
    let eps = probe.eps_target.unwrap_or(m.value + 1.0);
    Ok(dr_report(m.value, m.grad.l2_norm(), delta.l2_norm(), eps))
}

/// DR against the margin the update actually reached,
/// `ε = m(θ_T)` with the competitor fixed at `θ_0`'s.
pub fn dr_ratio_achieved(
    theta0: &NamedParams,
    theta_t: &NamedParams,
    context: &[usize],
    target: usize,
    model: &ModelConfig,
) -> Result<DrReport> {
    let delta = theta_t.diff(theta0)?;
    let m = margin_and_grad(theta0, model, context, target)?;
    let reached = margin_value(theta_t, model, context, target, m.competitor)?;
    Ok(dr_report(m.value, m.grad.l2_norm(), delta.l2_norm(), reached))
}

/// Minimal displacement `Δ* = ((ε − m_0)/||g||²)·g` reaching margin `ε`
/// under linearization.
pub fn minimal_displacement(grad: &NamedParams, m0: f64, eps_target: f64) -> NamedParams {
    let g2 = grad.l2_norm().powi(2);
    let c = (eps_target - m0) / g2;
    grad.map(|_, g| g.scaled(c))
}

/// `θ + Δ`.
pub fn displaced(theta: &NamedParams, delta: &NamedParams) -> Result<NamedParams> {
    let mut out = theta.clone();
    out.add_assign(delta)?;
    Ok(out)
}

/// Median of finite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests;
