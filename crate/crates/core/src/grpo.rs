//! Group-relative policy optimization.
//!
//! For a batch of `G` groups, each with `N` responses sampled from the old
//! policy,
//!
//! ```text
//! r_{i,t} = exp(log π_θ(o_{i,t}) − log π_old(o_{i,t}))
//! S_g     = Σ_i Σ_t min(r_{i,t}·A_i, clip(r_{i,t}, 1−ε, 1+ε)·A_i)
//! loss    = −(1/G) Σ_g S_g / Z_g − c_H · mean_t H_t
//! ```
//!
//! with `Z_g = Σ_i |o_i|` for the vanilla variant and the constant
//! `N · max_new_tokens` for the reduced one (no length normalization).
//! The entropy mean runs over every response token of the batch.
//!
//! `params_old` never has to be kept around: each [`RolloutGroup`] stores the
//! old policy's per-token log-probabilities recorded while sampling.

use serde::{Deserialize, Serialize};

use crate::engine::{RealArray, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{generate, score_on, Bound, ModelConfig};
use crate::optim::{is_zero, AdamW};
use crate::params::NamedParams;
use crate::seeds;
use crate::task::{reward, Question, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Std-normalized advantages, per-token length normalization.
    Vanilla,
    /// Mean-centred advantages, constant normalizer.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// N.
    pub rollouts_per_query: usize,
    pub clip_eps: f64,
    pub variant: Variant,
    pub entropy_coefficient: f64,
    pub learning_rate: f64,
    /// Questions sampled per rollout batch.
    pub rollout_batch_size: usize,
    /// Questions per gradient update; must divide `rollout_batch_size`.
    pub update_batch_size: usize,
    pub rollout_temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            rollouts_per_query: 8,
            clip_eps: 0.2,
            variant: Variant::Reduced,
            entropy_coefficient: 0.001,
            learning_rate: 1e-4,
            rollout_batch_size: 16,
            update_batch_size: 8,
            rollout_temperature: 1.0,
            max_new_tokens: 32,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rollouts_per_query < 2 {
            return bad(format!("rollouts_per_query {} < 2", self.rollouts_per_query));
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps {} must be positive", self.clip_eps));
        }
        if self.update_batch_size == 0
            || self.rollout_batch_size == 0
            || self.rollout_batch_size % self.update_batch_size != 0
        {
            return bad(format!(
                "update_batch_size {} must divide rollout_batch_size {}",
                self.update_batch_size, self.rollout_batch_size
            ));
        }
        if !(self.rollout_temperature >= 0.0) || !self.rollout_temperature.is_finite() {
            return bad(format!("rollout_temperature {}", self.rollout_temperature));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.entropy_coefficient >= 0.0) {
            return bad("learning_rate and entropy_coefficient must be non-negative".into());
        }
        Ok(())
    }

    /// Gradient updates per rollout batch.
    pub fn updates_per_rollout_batch(&self) -> usize {
        self.rollout_batch_size / self.update_batch_size
    }
}

/// One question with `N` sampled responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question: Question,
    pub responses: Vec<TokenSequence>,
    /// Per-token `log π_old`, one vector per response.
    pub old_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub acc: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Fills rewards, accuracy and advantages from the responses.
    pub fn new(
        question: Question,
        responses: Vec<TokenSequence>,
        old_log_probs: Vec<Vec<f64>>,
        variant: Variant,
    ) -> Result<Self> {
        if responses.len() < 2 || responses.len() != old_log_probs.len() {
            return Err(Error::Invalid(format!(
                "group needs >= 2 responses with log-probs, got {}/{}",
                responses.len(),
                old_log_probs.len()
            )));
        }
        let rewards: Vec<f64> = responses.iter().map(|o| reward(o, &question)).collect();
        let correct = rewards.iter().filter(|&&r| r == 1.0).count();
        let acc = correct as f64 / rewards.len() as f64;
        let advantages = advantages(&rewards, variant);
        Ok(Self {
            question,
            responses,
            old_log_probs,
            rewards,
            acc,
            advantages,
        })
    }

    pub fn mean_response_length(&self) -> f64 {
        self.responses.iter().map(|r| r.len()).sum::<usize>() as f64 / self.responses.len() as f64
    }
}

/// Samples `N` responses from `params_old`; response `i` uses the stream
/// `(seed, rollout, [i])`.
pub fn rollout_group(
    params_old: &NamedParams,
    model: &ModelConfig,
    q: &Question,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    let n = cfg.rollouts_per_query;
    let mut responses = Vec::with_capacity(n);
    let mut old = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeds::rng(seed, seeds::Stream::Rollout, &[i as u64]);
        let g = generate(
            params_old,
            model,
            &q.prompt,
            cfg.rollout_temperature,
            cfg.max_new_tokens,
            &mut rng,
        )?;
        responses.push(TokenSequence(g.tokens));
        old.push(g.log_probs);
    }
    RolloutGroup::new(q.clone(), responses, old, cfg.variant)
}

/// Group-relative advantages. Equal rewards give the zero vector.
pub fn advantages(rewards: &[f64], variant: Variant) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    match variant {
        Variant::Reduced => rewards.iter().map(|r| r - mean).collect(),
        Variant::Vanilla => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            rewards.iter().map(|r| (r - mean) / std).collect()
        }
    }
}

/// Clipped surrogate for one response: `Σ_t min(r·A, clip(r)·A)`.
pub fn surrogate_on(tape: &mut Tape, log_probs: Var, old: &[f64], adv: f64, clip_eps: f64) -> Result<Var> {
    let old = tape.constant(RealArray::from_vec(old.to_vec()));
    let diff = tape.sub(log_probs, old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.scale(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
    let clipped = tape.scale(clipped, adv)?;
    let m = tape.minimum(unclipped, clipped)?;
    tape.sum(m)
}

/// Per-response loss weights `(w_surrogate, w_entropy)` for a batch.
fn weights(groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<Vec<(f64, f64)>> {
    if groups.is_empty() {
        return Err(Error::Invalid("no rollout groups".into()));
    }
    let mut total_tokens = 0usize;
    for g in groups {
        for (o, old) in g.responses.iter().zip(&g.old_log_probs) {
            if o.is_empty() {
                return Err(Error::Invalid("empty response in group".into()));
            }
            if old.len() != o.len() {
                return Err(Error::Invalid("old log-prob length differs from response".into()));
            }
            total_tokens += o.len();
        }
    }
    let w_h = -cfg.entropy_coefficient / total_tokens as f64;
    let gn = groups.len() as f64;
    Ok(groups
        .iter()
        .map(|g| {
            let z = match cfg.variant {
                Variant::Vanilla => g.responses.iter().map(|o| o.len()).sum::<usize>() as f64,
                Variant::Reduced => (g.responses.len() * cfg.max_new_tokens) as f64,
            };
            (-1.0 / (gn * z), w_h)
        })
        .collect())
}

/// Contribution of one response to the loss, or `None` when it is
/// identically zero (zero advantage and no entropy bonus).
#[allow(clippy::too_many_arguments)]
fn response_term_on(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    prompt: &[usize],
    response: &[usize],
    old: &[f64],
    adv: f64,
    clip_eps: f64,
    (w_s, w_h): (f64, f64),
) -> Result<Option<Var>> {
    if adv == 0.0 && w_h == 0.0 {
        return Ok(None);
    }
    let s = score_on(tape, bound, model, prompt, response, w_h != 0.0)?;
    let sur = surrogate_on(tape, s.log_probs, old, adv, clip_eps)?;
    let mut term = tape.scale(sur, w_s)?;
    if let Some(h) = s.entropies {
        let h = tape.sum(h)?;
        let h = tape.scale(h, w_h)?;
        term = tape.add(term, h)?;
    }
    Ok(Some(term))
}

/// The whole batch loss on one tape.
pub fn grpo_loss_on(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<Var> {
    let w = weights(groups, cfg)?;
    let mut loss = tape.constant(RealArray::scalar(0.0));
    for (g, &wg) in groups.iter().zip(&w) {
        for ((o, old), &a) in g.responses.iter().zip(&g.old_log_probs).zip(&g.advantages) {
            if let Some(t) =
                response_term_on(tape, bound, model, &g.question.prompt, o, old, a, cfg.clip_eps, wg)?
            {
                loss = tape.add(loss, t)?;
            }
        }
    }
    Ok(loss)
}

/// Loss value and gradient, one tape per response to bound memory.
pub fn grpo_loss_and_grad(
    params: &NamedParams,
    model: &ModelConfig,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, NamedParams)> {
    let w = weights(groups, cfg)?;
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for (g, &wg) in groups.iter().zip(&w) {
        for ((o, old), &a) in g.responses.iter().zip(&g.old_log_probs).zip(&g.advantages) {
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, params);
            if let Some(t) = response_term_on(
                &mut tape,
                &bound,
                model,
                &g.question.prompt,
                o,
                old,
                a,
                cfg.clip_eps,
                wg,
            )? {
                loss += tape.scalar(t)?;
                grads.add_assign(&tape.backward(t)?)?;
            }
        }
    }
    Ok((loss, grads))
}

pub fn grpo_loss(
    params: &NamedParams,
    model: &ModelConfig,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let l = grpo_loss_on(&mut tape, &bound, model, groups, cfg)?;
    tape.scalar(l)
}

/// Summary of one rollout batch's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlStepReport {
    /// Mean loss over the update batches.
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_acc: f64,
    pub mean_response_length: f64,
    /// Update batches processed.
    pub updates: usize,
    /// Update batches whose gradient was exactly zero (optimizer not stepped).
    pub skipped: usize,
}

/// Hook applied to each accumulated gradient before the optimizer step.
pub type GradHook<'a> = &'a mut dyn FnMut(&mut NamedParams) -> Result<()>;

/// Splits `groups` into update batches and applies one AdamW step per
/// batch. On a non-finite loss or gradient, `params` and `opt` are restored
/// to their state on entry.
pub fn rl_step(
    params: &mut NamedParams,
    model: &ModelConfig,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    opt: &mut AdamW,
    mut hook: Option<GradHook<'_>>,
) -> Result<RlStepReport> {
    if groups.is_empty() {
        return Err(Error::Invalid("rl_step needs at least one group".into()));
    }
    let saved = (params.clone(), opt.clone());
    let mut report = RlStepReport {
        loss: 0.0,
        mean_reward: 0.0,
        mean_acc: 0.0,
        mean_response_length: 0.0,
        updates: 0,
        skipped: 0,
    };
    let mut run = || -> Result<()> {
        for batch in groups.chunks(cfg.update_batch_size) {
            let (loss, mut grads) = grpo_loss_and_grad(params, model, batch, cfg)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("grpo loss {loss}")));
            }
            if let Some(h) = hook.as_mut() {
                h(&mut grads)?;
            }
            report.loss += loss;
            report.updates += 1;
            if is_zero(&grads) {
                report.skipped += 1;
                continue;
            }
            opt.step(params, &grads, cfg.learning_rate, None)?;
        }
        Ok(())
    };
    if let Err(e) = run() {
        *params = saved.0;
        *opt = saved.1;
        return Err(e);
    }
    let n = groups.len() as f64;
    report.loss /= report.updates as f64;
    report.mean_acc = groups.iter().map(|g| g.acc).sum::<f64>() / n;
    report.mean_reward = groups
        .iter()
        .map(|g| g.rewards.iter().sum::<f64>() / g.rewards.len() as f64)
        .sum::<f64>()
        / n;
    report.mean_response_length = groups.iter().map(RolloutGroup::mean_response_length).sum::<f64>() / n;
    Ok(report)
}

#[cfg(test)]
mod tests;
