//! RL-importance bookkeeping and TopK freezing.
//!
//! Per RL→SFT interval `i`:
//!
//! ```text
//! Δ_i^j  = ||θ_end^j − θ_start^j||₂            (per named parameter j)
//! C̃_i   = α·C_{i−1} + (1−α)·Δ_i                (C_0 = 0)
//! M_i    = 1[j ∈ TopK(C̃_i, ceil(k·d))]
//! C_i    = M_i ⊙ C̃_i                           (carried to interval i+1)
//! ```
//!
//! Everything here works per named parameter (per tensor).

use serde::{Deserialize, Serialize};

use crate::engine::RealArray;
use crate::error::{Error, Result};
use crate::params::NamedParams;

/// One real per named parameter, in canonical order.
pub type NamedScalars = Vec<(String, f64)>;

/// `ceil(fraction · n)` that ignores float noise in the product (`0.1 · 30`
/// is `3.0000000000000004`).
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c.max(0.0) as usize).min(n)
}

/// `floor(fraction · n)` with the same tolerance as [`ceil_count`].
pub fn floor_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.floor() };
    (c.max(0.0) as usize).min(n)
}

/// Binary per-name freeze indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    entries: Vec<(String, bool)>,
}

impl FreezeMask {
    pub fn new(entries: Vec<(String, bool)>) -> Self {
        Self { entries }
    }

    pub fn none(params: &NamedParams) -> Self {
        Self::new(params.names().map(|n| (n.to_string(), false)).collect())
    }

    pub fn all(params: &NamedParams) -> Self {
        Self::new(params.names().map(|n| (n.to_string(), true)).collect())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, f)| *f && n == name)
    }

    pub fn frozen_count(&self) -> usize {
        self.entries.iter().filter(|(_, f)| *f).count()
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, f)| *f)
            .map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.entries.iter().map(|(n, f)| (n.as_str(), *f))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_keys<'a>(&self, names: impl Iterator<Item = &'a str>) -> Result<()> {
        let names: Vec<&str> = names.collect();
        if names.len() != self.entries.len()
            || names.iter().zip(&self.entries).any(|(a, (b, _))| a != b)
        {
            return Err(Error::KeyMismatch("freeze mask keys differ from parameters".into()));
        }
        Ok(())
    }
}

/// Per-name L2 norm of `end − start`. With `size_normalized`, each norm is
/// divided by `sqrt(numel)`.
pub fn rl_update_magnitudes(
    start: &NamedParams,
    end: &NamedParams,
    size_normalized: bool,
) -> Result<NamedScalars> {
    start.check_layout(end)?;
    Ok(start
        .iter()
        .zip(end.iter())
        .map(|((name, a), (_, b))| {
            let sq: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (y - x) * (y - x))
                .sum();
            let mut norm = sq.sqrt();
            if size_normalized {
                norm /= (a.len() as f64).sqrt();
            }
            (name.to_string(), norm)
        })
        .collect())
}

fn check_scalar_keys(a: &NamedScalars, b: &NamedScalars) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|((x, _), (y, _))| x != y) {
        return Err(Error::KeyMismatch("importance keys differ".into()));
    }
    Ok(())
}

/// Importance map with its decay and freeze fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceLedger {
    /// Retained (masked) importance `C_i`.
    pub c: NamedScalars,
    pub alpha: f64,
    pub k: f64,
    /// Number of completed intervals.
    pub interval: u64,
    /// Mask of the SFT phase in progress, if any.
    pub mask: Option<FreezeMask>,
    pub size_normalized: bool,
}

impl ImportanceLedger {
    pub fn new(params: &NamedParams, alpha: f64, k: f64, size_normalized: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1)")));
        }
        if !(k > 0.0 && k < 1.0) {
            return Err(Error::Config(format!("k {k} outside (0, 1)")));
        }
        Ok(Self {
            c: params.names().map(|n| (n.to_string(), 0.0)).collect(),
            alpha,
            k,
            interval: 0,
            mask: None,
            size_normalized,
        })
    }

    /// Closes an RL session: folds its update into the map and returns the
    /// freeze mask for the following SFT phase, along with the raw deltas.
    pub fn close_interval(
        &mut self,
        start: &NamedParams,
        end: &NamedParams,
    ) -> Result<(FreezeMask, NamedScalars)> {
        let deltas = rl_update_magnitudes(start, end, self.size_normalized)?;
        let interim = update_importance(self, &deltas)?;
        let (mask, retained) = topk_mask_and_retain(&interim, self.k);
        self.c = retained;
        self.interval += 1;
        self.mask = Some(mask.clone());
        Ok((mask, deltas))
    }

    /// Clears the active mask; the retained map is kept.
    pub fn unfreeze_all(&mut self) {
        self.mask = None;
    }

    pub fn frozen_count(&self) -> usize {
        self.mask.as_ref().map_or(0, FreezeMask::frozen_count)
    }
}

/// `C̃ = α·C + (1−α)·Δ`.
pub fn update_importance(ledger: &ImportanceLedger, deltas: &NamedScalars) -> Result<NamedScalars> {
    check_scalar_keys(&ledger.c, deltas)?;
    let a = ledger.alpha;
    Ok(ledger
        .c
        .iter()
        .zip(deltas)
        .map(|((n, c), (_, d))| (n.clone(), a * c + (1.0 - a) * d))
        .collect())
}

/// Marks the `ceil(k·d)` largest entries (ties by canonical order) and zeroes
/// the rest of the map.
pub fn topk_mask_and_retain(interim: &NamedScalars, k: f64) -> (FreezeMask, NamedScalars) {
    let n = ceil_count(k, interim.len());
    let mut order: Vec<usize> = (0..interim.len()).collect();
    // stable sort keeps canonical order among equal values
    order.sort_by(|&a, &b| interim[b].1.total_cmp(&interim[a].1));
    let mut frozen = vec![false; interim.len()];
    for &i in &order[..n] {
        frozen[i] = true;
    }
    let mask = FreezeMask::new(
        interim
            .iter()
            .zip(&frozen)
            .map(|((name, _), &f)| (name.clone(), f))
            .collect(),
    );
    let retained = interim
        .iter()
        .zip(&frozen)
        .map(|((name, v), &f)| (name.clone(), if f { *v } else { 0.0 }))
        .collect();
    (mask, retained)
}

/// Replaces frozen gradients with zero arrays.
pub fn apply_freeze(grads: &mut NamedParams, mask: &FreezeMask) -> Result<()> {
    mask.check_keys(grads.names())?;
    for ((_, g), (_, frozen)) in grads.iter_mut().zip(mask.iter()) {
        if frozen {
            *g = RealArray::zeros(g.shape());
        }
    }
    Ok(())
}
