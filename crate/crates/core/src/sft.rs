//! Accuracy-gated SFT buffer and the entropy-masked SFT phase.
//!
//! A question whose rollout accuracy is at most `p` gets a verified teacher
//! demonstration appended to the buffer. Once the buffer holds `S` entries
//! the trainer switches to SFT, trains every entry once in FIFO batches and
//! empties the buffer. Per entry the loss is
//!
//! ```text
//! L = −(1/|s|) Σ_t 1[H_t ≥ τ_ρ] · log π_θ(s_t | q, s_<t)
//! ```
//!
//! where `τ_ρ` is the entropy of the `ceil(ρ·|s|)`-th most uncertain
//! position, entropies being taken under the current parameters.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::{RealArray, Tape, Var};
use crate::error::{Error, Result};
use crate::grpo::{GradHook, RolloutGroup};
use crate::ledger::{apply_freeze, ceil_count, FreezeMask};
use crate::model::{score_on, Bound, ModelConfig};
use crate::optim::{is_zero, AdamW};
use crate::params::NamedParams;
use crate::task::{extract, Demonstration, Question, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Admission threshold on rollout accuracy (inclusive).
    pub p: f64,
    /// Fraction of highest-entropy tokens that carry loss.
    pub rho: f64,
    /// Buffer size that triggers an SFT phase.
    #[serde(rename = "S")]
    pub s: usize,
    pub learning_rate: f64,
    pub training_batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            p: 0.125,
            rho: 0.2,
            s: 64,
            learning_rate: 1e-3,
            training_batch_size: 8,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p {} outside [0, 1]", self.p)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.s == 0 || self.training_batch_size == 0 {
            return Err(Error::Config("S and training_batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("negative learning_rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub question: Question,
    pub solution: TokenSequence,
    pub acc_at_admission: f64,
}

/// FIFO buffer of admitted demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftBuffer {
    entries: VecDeque<BufferEntry>,
    /// Switch threshold `S`.
    pub threshold: usize,
}

/// Outcome of an admission attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    Admitted,
    AboveThreshold,
    FailedVerification,
    Duplicate,
}

impl Admission {
    pub fn admitted(self) -> bool {
        self == Admission::Admitted
    }
}

impl SftBuffer {
    pub fn new(threshold: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn contains(&self, q: &Question) -> bool {
        self.entries.iter().any(|e| e.question.prompt == q.prompt)
    }

    /// Appends without any gate; admission should go through [`maybe_admit`].
    fn push(&mut self, e: BufferEntry) {
        self.entries.push_back(e);
    }

    fn take_all(&mut self) -> Vec<BufferEntry> {
        self.entries.drain(..).collect()
    }

    /// Checks that every resident entry passed the gates for threshold `p`.
    pub fn audit(&self, p: f64) -> Result<()> {
        for e in &self.entries {
            if e.acc_at_admission > p || extract(&e.solution).as_deref() != Some(&e.question.answer) {
                return Err(Error::Invalid(format!(
                    "unsound buffer entry for question seed {}",
                    e.question.seed
                )));
            }
        }
        Ok(())
    }
}

/// Admits `demo` iff `group.acc ≤ p`, the demonstration verifies, and the
/// question is not already resident.
pub fn maybe_admit(
    buffer: &mut SftBuffer,
    group: &RolloutGroup,
    demo: &Demonstration,
    cfg: &SftConfig,
) -> Result<Admission> {
    if demo.question.prompt != group.question.prompt {
        return Err(Error::Invalid("demonstration is for a different question".into()));
    }
    let outcome = if group.acc > cfg.p {
        Admission::AboveThreshold
    } else if extract(&demo.solution).as_deref() != Some(&group.question.answer) {
        Admission::FailedVerification
    } else if buffer.contains(&group.question) {
        Admission::Duplicate
    } else {
        buffer.push(BufferEntry {
            question: group.question.clone(),
            solution: demo.solution.clone(),
            acc_at_admission: group.acc,
        });
        Admission::Admitted
    };
    Ok(outcome)
}

pub fn should_switch(buffer: &SftBuffer) -> bool {
    !buffer.is_empty() && buffer.len() >= buffer.threshold
}

/// Marks the `ceil(ρ·T)` highest entropies (ties to the earliest position)
/// and returns the mask with `τ_ρ`, the smallest selected entropy.
pub fn select_high_entropy(entropies: &[f64], rho: f64) -> Result<(Vec<bool>, f64)> {
    if entropies.is_empty() {
        return Err(Error::Invalid("no tokens to select from".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Invalid(format!("rho {rho} outside (0, 1]")));
    }
    let n = ceil_count(rho, entropies.len()).max(1);
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]));
    let mut mask = vec![false; entropies.len()];
    for &i in &order[..n] {
        mask[i] = true;
    }
    Ok((mask, entropies[order[n - 1]]))
}

/// `−(1/|s|) Σ_t mask_t · log π(s_t)` given per-token log-probs on the tape.
pub fn masked_nll_on(tape: &mut Tape, log_probs: Var, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("all-zero SFT mask".into()));
    }
    let n = mask.len();
    let m = tape.constant(RealArray::from_vec(
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let kept = tape.mul(log_probs, m)?;
    let s = tape.sum(kept)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Masked SFT loss for one prompt/solution pair on a tape.
pub fn sft_loss_on(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    prompt: &[usize],
    solution: &[usize],
    mask: &[bool],
) -> Result<Var> {
    if mask.len() != solution.len() {
        return Err(Error::Invalid(format!(
            "mask length {} differs from solution length {}",
            mask.len(),
            solution.len()
        )));
    }
    let s = score_on(tape, bound, model, prompt, solution, false)?;
    masked_nll_on(tape, s.log_probs, mask)
}

pub fn sft_loss(
    params: &NamedParams,
    model: &ModelConfig,
    entry: &BufferEntry,
    mask: &[bool],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let l = sft_loss_on(&mut tape, &bound, model, &entry.question.prompt, &entry.solution, mask)?;
    tape.scalar(l)
}

/// Which tokens of a solution carry loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenSelection {
    All,
    HighEntropy { rho: f64 },
}

/// Loss for one entry with the selection made under the live parameters,
/// on a single forward pass. Returns the loss and the number of selected
/// tokens.
pub fn entry_loss_on(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    entry: &BufferEntry,
    selection: TokenSelection,
) -> Result<(Var, usize)> {
    let (prompt, sol) = (&entry.question.prompt, &entry.solution);
    match selection {
        TokenSelection::All => {
            let s = score_on(tape, bound, model, prompt, sol, false)?;
            Ok((masked_nll_on(tape, s.log_probs, &vec![true; sol.len()])?, sol.len()))
        }
        TokenSelection::HighEntropy { rho } => {
            let s = score_on(tape, bound, model, prompt, sol, true)?;
            let h = tape.value(s.entropies.expect("requested"))?.data().to_vec();
            let (mask, _) = select_high_entropy(&h, rho)?;
            let n = mask.iter().filter(|&&m| m).count();
            Ok((masked_nll_on(tape, s.log_probs, &mask)?, n))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftStepReport {
    /// Mean entry loss over the batch.
    pub loss: f64,
    pub batch: usize,
    pub selected_tokens: usize,
    pub total_tokens: usize,
    /// False when the gradient was exactly zero and the optimizer was not stepped.
    pub stepped: bool,
}

/// One gradient step on `batch`, averaged over entries.
pub fn sft_step(
    params: &mut NamedParams,
    model: &ModelConfig,
    batch: &[BufferEntry],
    selection: TokenSelection,
    lr: f64,
    freeze: Option<&FreezeMask>,
    opt: &mut AdamW,
    hook: Option<&mut GradHook<'_>>,
) -> Result<SftStepReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty SFT batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let (mut selected, mut total) = (0, 0);
    for e in batch {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let (l, n) = entry_loss_on(&mut tape, &bound, model, e, selection)?;
        let l = tape.scale(l, w)?;
        loss += tape.scalar(l)?;
        grads.add_assign(&tape.backward(l)?)?;
        selected += n;
        total += e.solution.len();
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!("sft loss {loss}")));
    }
    if let Some(h) = hook {
        h(&mut grads)?;
    }
    if let Some(m) = freeze {
        apply_freeze(&mut grads, m)?;
    }
    let stepped = !is_zero(&grads);
    if stepped {
        opt.step(params, &grads, lr, freeze)?;
    }
    Ok(SftStepReport {
        loss,
        batch: batch.len(),
        selected_tokens: selected,
        total_tokens: total,
        stepped,
    })
}

/// One pass over `entries` in FIFO batches of `batch_size`. On error the
/// parameters and optimizer are restored to their values on entry.
#[allow(clippy::too_many_arguments)]
pub fn sft_train(
    params: &mut NamedParams,
    model: &ModelConfig,
    entries: &[BufferEntry],
    batch_size: usize,
    selection: TokenSelection,
    lr: f64,
    freeze: Option<&FreezeMask>,
    opt: &mut AdamW,
    mut hook: Option<GradHook<'_>>,
) -> Result<Vec<SftStepReport>> {
    let saved = (params.clone(), opt.clone());
    let mut reports = Vec::new();
    for batch in entries.chunks(batch_size.max(1)) {
        match sft_step(params, model, batch, selection, lr, freeze, opt, hook.as_mut()) {
            Ok(r) => reports.push(r),
            Err(e) => {
                *params = saved.0;
                *opt = saved.1;
                return Err(e);
            }
        }
    }
    Ok(reports)
}

/// Trains the whole buffer once and empties it. Requires
/// [`should_switch`]. The buffer is left untouched if the phase aborts.
#[allow(clippy::too_many_arguments)]
pub fn sft_phase(
    params: &mut NamedParams,
    buffer: &mut SftBuffer,
    model: &ModelConfig,
    cfg: &SftConfig,
    entropy_selection: bool,
    freeze: Option<&FreezeMask>,
    opt: &mut AdamW,
    hook: Option<GradHook<'_>>,
) -> Result<Vec<SftStepReport>> {
    if !should_switch(buffer) {
        return Err(Error::Invalid(format!(
            "buffer holds {} < S = {} entries",
            buffer.len(),
            buffer.threshold
        )));
    }
    let selection = if entropy_selection {
        TokenSelection::HighEntropy { rho: cfg.rho }
    } else {
        TokenSelection::All
    };
    let entries: Vec<BufferEntry> = buffer.entries().cloned().collect();
    let reports = sft_train(
        params,
        model,
        &entries,
        cfg.training_batch_size,
        selection,
        cfg.learning_rate,
        freeze,
        opt,
        hook,
    )?;
    buffer.take_all();
    Ok(reports)
}
