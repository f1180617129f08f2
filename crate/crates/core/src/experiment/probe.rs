//! Probe harness. The SFT and RL runs of a paradigm pair start from the same
//! `θ_0`, see the same questions in the same order, take the same number of
//! optimizer steps at the same learning rate, and differ only in the loss.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::evaluate::{evaluate, split_questions, EvalSettings};
use super::metrics::{read_metrics, EvalScores, Event, MetricsRecord, MetricsWriter, Phase};
use super::run::{base_policy, METRICS_FILE};
use crate::error::{Error, Result};
use crate::grpo::{rl_step, rollout_group, GradHook, GrpoConfig};
use crate::ledger::NamedScalars;
use crate::model::{self, ModelConfig};
use crate::optim::AdamW;
use crate::params::NamedParams;
use crate::probes::{
    dr_report, layer_update_magnitude, margin_and_grad, margin_value, median, posthoc_prune,
    random_name_drop, selective_topk_drop, ChangeTracker, DrReport, DrStatus, GradDropper,
};
use crate::seeds::{self, Stream};
use crate::sft::{sft_step, BufferEntry, TokenSelection};
use crate::task::{generate_question, teacher_solve, Question, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    GradDrop,
    Prune,
    Magnitude,
    SelectiveDrop,
    Dr,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::GradDrop => "grad-drop",
            ProbeKind::Prune => "prune",
            ProbeKind::Magnitude => "magnitude",
            ProbeKind::SelectiveDrop => "selective-drop",
            ProbeKind::Dr => "dr",
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grad-drop" => ProbeKind::GradDrop,
            "prune" => ProbeKind::Prune,
            "magnitude" => ProbeKind::Magnitude,
            "selective-drop" => ProbeKind::SelectiveDrop,
            "dr" => ProbeKind::Dr,
            other => return Err(Error::Invalid(format!("unknown probe `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Sft,
    Rl,
}

impl Paradigm {
    fn id(self) -> u64 {
        match self {
            Paradigm::Sft => 0,
            Paradigm::Rl => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    /// Mean rollout reward (RL only).
    pub reward: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ParadigmRun {
    pub paradigm: Paradigm,
    pub params: NamedParams,
    /// Per-name sum of per-step change norms.
    pub cumulative: NamedScalars,
    pub curve: Vec<CurvePoint>,
}

/// Settings of one matched run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedRun {
    pub learning_rate: f64,
    pub epochs: usize,
    pub p_on: f64,
    /// Seeds question order and rollouts.
    pub seed: u64,
    /// Questions per SFT step; RL steps take twice as many and update
    /// twice, so both take one optimizer step per `batch` questions.
    pub batch: usize,
}

impl MatchedRun {
    pub fn from_config(cfg: &ExperimentConfig, p_on: f64) -> Self {
        Self {
            learning_rate: cfg.probes.matched_learning_rate,
            epochs: cfg.probes.matched_epochs,
            p_on,
            seed: cfg.master_seed,
            batch: cfg.grpo.update_batch_size,
        }
    }
}

/// Trains `θ_0` with one paradigm over the training questions.
pub fn train_paradigm(
    cfg: &ExperimentConfig,
    theta0: &NamedParams,
    paradigm: Paradigm,
    run: &MatchedRun,
) -> Result<ParadigmRun> {
    let task = &cfg.task;
    let n = task.train_seeds.len() as usize;
    let mut params = theta0.clone();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &params);
    let mut tracker = ChangeTracker::new(&params);
    let mut dropper = GradDropper::new(
        run.p_on,
        seeds::derive(cfg.probes.rng_seed, Stream::Mask, &[paradigm.id()]),
    );
    let grpo = GrpoConfig {
        learning_rate: run.learning_rate,
        update_batch_size: run.batch,
        rollout_batch_size: 2 * run.batch,
        ..cfg.grpo.clone()
    };
    let mut curve = Vec::new();
    let mut step = 0u64;
    for epoch in 0..run.epochs as u64 {
        let order = seeds::permutation(n, seeds::derive(run.seed, Stream::Data, &[epoch]));
        let questions: Vec<Question> = order
            .iter()
            .map(|&i| generate_question(task, task.train_seeds.nth(i as u64)))
            .collect();
        let chunk = match paradigm {
            Paradigm::Sft => run.batch,
            Paradigm::Rl => 2 * run.batch,
        };
        for qs in questions.chunks(chunk) {
            let before = params.clone();
            let mut f = |g: &mut NamedParams| dropper.apply(g);
            let hook: Option<GradHook<'_>> = if run.p_on > 0.0 { Some(&mut f) } else { None };
            let point = match paradigm {
                Paradigm::Sft => {
                    let batch: Vec<BufferEntry> = qs
                        .iter()
                        .map(|q| {
                            let d = teacher_solve(q);
                            BufferEntry {
                                question: d.question,
                                solution: d.solution,
                                acc_at_admission: 0.0,
                            }
                        })
                        .collect();
                    let mut hook = hook;
                    let r = sft_step(
                        &mut params,
                        &cfg.model,
                        &batch,
                        TokenSelection::All,
                        run.learning_rate,
                        None,
                        &mut opt,
                        hook.as_mut(),
                    )?;
                    CurvePoint { step, loss: r.loss, reward: None }
                }
                Paradigm::Rl => {
                    let mut groups = Vec::with_capacity(qs.len());
                    for (j, q) in qs.iter().enumerate() {
                        let seed = seeds::derive(run.seed, Stream::Rollout, &[step, j as u64]);
                        groups.push(rollout_group(&params, &cfg.model, q, &grpo, seed)?);
                    }
                    let r = rl_step(&mut params, &cfg.model, &groups, &grpo, &mut opt, hook)?;
                    CurvePoint { step, loss: r.loss, reward: Some(r.mean_reward) }
                }
            };
            tracker.record(&before, &params)?;
            curve.push(point);
            step += 1;
        }
    }
    Ok(ParadigmRun {
        paradigm,
        params,
        cumulative: tracker.totals,
        curve,
    })
}

fn eval_settings(cfg: &ExperimentConfig) -> EvalSettings {
    EvalSettings {
        k: cfg.eval.k,
        temperature: cfg.eval.temperature,
        max_new_tokens: cfg.grpo.max_new_tokens,
        seed: seeds::derive(cfg.master_seed, Stream::Eval, &[]),
    }
}

fn eval_questions(cfg: &ExperimentConfig) -> Vec<Question> {
    split_questions(&cfg.task, Split::Eval, cfg.eval.questions)
}

/// Score used for comparisons: avg@k when sampled, else pass@1.
pub fn headline(s: &EvalScores) -> f64 {
    s.avg_at_k.unwrap_or(s.pass_at_1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub p_post: f64,
    pub scores: EvalScores,
}

/// Accuracy of `θ_0 + m ⊙ (θ_T − θ_0)` across `grid`. Grid point `i` uses
/// the mask stream `(rng_seed, probe, [i])` whatever the paradigm.
pub fn prune_sweep(
    cfg: &ExperimentConfig,
    theta0: &NamedParams,
    theta_t: &NamedParams,
    grid: &[f64],
) -> Result<Vec<PrunePoint>> {
    let qs = eval_questions(cfg);
    let s = eval_settings(cfg);
    grid.iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut rng = seeds::rng(cfg.probes.rng_seed, Stream::Probe, &[i as u64]);
            let pruned = posthoc_prune(theta0, theta_t, p, &mut rng)?;
            Ok(PrunePoint {
                p_post: p,
                scores: evaluate(&pruned, &cfg.model, &qs, &s)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    pub total: f64,
    pub layers: Vec<(String, f64)>,
}

pub fn magnitude(model: &ModelConfig, theta0: &NamedParams, theta_t: &NamedParams) -> Result<MagnitudeReport> {
    Ok(MagnitudeReport {
        total: theta_t.diff(theta0)?.l2_norm(),
        layers: layer_update_magnitude(theta0, theta_t, &model::layer_groups(model))?,
    })
}

/// Fraction of layers where `a ≥ b`.
pub fn layer_fraction_ge(a: &MagnitudeReport, b: &MagnitudeReport) -> f64 {
    let hits = a.layers.iter().zip(&b.layers).filter(|(x, y)| x.1 >= y.1).count();
    hits as f64 / a.layers.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveDropReport {
    pub trained: f64,
    pub topk_dropped: f64,
    pub random_dropped: f64,
    pub fraction: f64,
}

pub fn selective_drop(
    cfg: &ExperimentConfig,
    theta0: &NamedParams,
    theta_t: &NamedParams,
    cumulative: &NamedScalars,
) -> Result<SelectiveDropReport> {
    let qs = eval_questions(cfg);
    let s = eval_settings(cfg);
    let f = cfg.probes.topk_fraction;
    let top = selective_topk_drop(theta0, theta_t, cumulative, f)?;
    let mut rng = seeds::rng(cfg.probes.rng_seed, Stream::Probe, &[u64::MAX]);
    let rand = random_name_drop(theta0, theta_t, f, &mut rng)?;
    Ok(SelectiveDropReport {
        trained: headline(&evaluate(theta_t, &cfg.model, &qs, &s)?),
        topk_dropped: headline(&evaluate(&top, &cfg.model, &qs, &s)?),
        random_dropped: headline(&evaluate(&rand, &cfg.model, &qs, &s)?),
        fraction: f,
    })
}

/// A context sampled from a teacher trace, with the trace's next token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrContext {
    pub context: Vec<usize>,
    pub target: usize,
}

/// Contexts drawn from teacher solutions of training questions.
pub fn dr_contexts(cfg: &ExperimentConfig, n: usize) -> Vec<DrContext> {
    let task = &cfg.task;
    (0..n as u64)
        .map(|i| {
            let mut rng = seeds::rng(cfg.probes.rng_seed, Stream::Probe, &[0xD2, i]);
            use rand::Rng;
            let q = generate_question(task, task.train_seeds.nth(rng.random_range(0..task.train_seeds.len())));
            let sol = teacher_solve(&q).solution.0;
            let j = rng.random_range(0..sol.len());
            DrContext {
                context: q.prompt.concat(&sol[..j]),
                target: sol[j],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrSummary {
    /// Fixed target `ε = m_0 + dr_margin_offset`.
    pub fixed: Vec<DrReport>,
    /// Target set to the margin the update reached.
    pub achieved: Vec<DrReport>,
    pub median_fixed: Option<f64>,
    /// Median over contexts whose margin grew; the rest are counted in
    /// `not_improved`.
    pub median_achieved: Option<f64>,
    pub not_improved: usize,
}

/// DR of each update in `thetas` over the same contexts; the margin and its
/// gradient at `θ_0` are computed once per context.
pub fn dr_sample(
    cfg: &ExperimentConfig,
    theta0: &NamedParams,
    thetas: &[&NamedParams],
    contexts: &[DrContext],
) -> Result<Vec<DrSummary>> {
    let deltas: Vec<f64> = thetas
        .iter()
        .map(|t| t.diff(theta0).map(|d| d.l2_norm()))
        .collect::<Result<_>>()?;
    let mut out: Vec<DrSummary> = thetas
        .iter()
        .map(|_| DrSummary {
            fixed: Vec::new(),
            achieved: Vec::new(),
            median_fixed: None,
            median_achieved: None,
            not_improved: 0,
        })
        .collect();
    for c in contexts {
        let m = margin_and_grad(theta0, &cfg.model, &c.context, c.target)?;
        let g = m.grad.l2_norm();
        for ((summary, theta), &d) in out.iter_mut().zip(thetas).zip(&deltas) {
            summary.fixed.push(dr_report(m.value, g, d, m.value + cfg.probes.dr_margin_offset));
            let reached = margin_value(theta, &cfg.model, &c.context, c.target, m.competitor)?;
            summary.achieved.push(dr_report(m.value, g, d, reached));
        }
    }
    for s in &mut out {
        let vals = |v: &[DrReport]| v.iter().filter_map(|r| r.dr).collect::<Vec<f64>>();
        s.median_fixed = median(&vals(&s.fixed));
        let grew: Vec<f64> = s
            .achieved
            .iter()
            .filter(|r| r.status == DrStatus::Defined)
            .filter_map(|r| r.dr)
            .collect();
        s.not_improved = s.achieved.len() - grew.len();
        s.median_achieved = median(&grew);
    }
    Ok(out)
}

fn load_params(path: &Path) -> Result<NamedParams> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    Checkpoint::load(path)?.params()
}

fn theta0_of(cfg: &ExperimentConfig, ckpt_a: Option<&Path>) -> Result<NamedParams> {
    let p = match ckpt_a {
        Some(a) => load_params(a)?,
        None => base_policy(cfg)?,
    };
    p.check_layout(&model::init(&cfg.model)?)?;
    Ok(p)
}

/// Runs a probe and returns its JSON report. With both checkpoints the probe
/// compares `θ_a → θ_b`; otherwise it trains the SFT/RL pair from `θ_a` (or
/// the base policy) and reports both. The report is appended to the metrics
/// stream in `output_dir`.
pub fn probe_command(
    kind: ProbeKind,
    cfg: &ExperimentConfig,
    ckpt_a: Option<&Path>,
    ckpt_b: Option<&Path>,
) -> Result<serde_json::Value> {
    let theta0 = theta0_of(cfg, ckpt_a)?;
    let given = ckpt_b.map(load_params).transpose()?;
    if let Some(b) = &given {
        theta0.check_layout(b)?;
    }
    let pair = |p_on: f64| -> Result<(ParadigmRun, ParadigmRun)> {
        let run = MatchedRun::from_config(cfg, p_on);
        Ok((
            train_paradigm(cfg, &theta0, Paradigm::Sft, &run)?,
            train_paradigm(cfg, &theta0, Paradigm::Rl, &run)?,
        ))
    };
    let report = match (kind, &given) {
        (ProbeKind::GradDrop, _) => {
            let (sft0, rl0) = pair(0.0)?;
            let (sft, rl) = pair(cfg.probes.p_on)?;
            let qs = eval_questions(cfg);
            let s = eval_settings(cfg);
            let score = |p: &NamedParams| evaluate(p, &cfg.model, &qs, &s);
            serde_json::json!({
                "p_on": cfg.probes.p_on,
                "sft": {"baseline": sft0.curve, "dropped": sft.curve,
                        "baseline_eval": score(&sft0.params)?, "dropped_eval": score(&sft.params)?},
                "rl": {"baseline": rl0.curve, "dropped": rl.curve,
                       "baseline_eval": score(&rl0.params)?, "dropped_eval": score(&rl.params)?},
            })
        }
        (ProbeKind::Prune, Some(b)) => {
            serde_json::json!({"single": prune_sweep(cfg, &theta0, b, &cfg.probes.prune_grid)?})
        }
        (ProbeKind::Prune, None) => {
            let (sft, rl) = pair(0.0)?;
            serde_json::json!({
                "sft": prune_sweep(cfg, &theta0, &sft.params, &cfg.probes.prune_grid)?,
                "rl": prune_sweep(cfg, &theta0, &rl.params, &cfg.probes.prune_grid)?,
            })
        }
        (ProbeKind::Magnitude, Some(b)) => {
            serde_json::json!({"single": magnitude(&cfg.model, &theta0, b)?})
        }
        (ProbeKind::Magnitude, None) => {
            let (sft, rl) = pair(0.0)?;
            let a = magnitude(&cfg.model, &theta0, &sft.params)?;
            let b = magnitude(&cfg.model, &theta0, &rl.params)?;
            serde_json::json!({
                "fraction_layers_sft_ge_rl": layer_fraction_ge(&a, &b),
                "sft": a,
                "rl": b,
            })
        }
        (ProbeKind::SelectiveDrop, Some(b)) => {
            // without a step history the final per-name change ranks the names
            let ranking = crate::ledger::rl_update_magnitudes(&theta0, b, false)?;
            serde_json::json!({"single": selective_drop(cfg, &theta0, b, &ranking)?})
        }
        (ProbeKind::SelectiveDrop, None) => {
            let (sft, rl) = pair(0.0)?;
            serde_json::json!({
                "sft": selective_drop(cfg, &theta0, &sft.params, &sft.cumulative)?,
                "rl": selective_drop(cfg, &theta0, &rl.params, &rl.cumulative)?,
            })
        }
        (ProbeKind::Dr, Some(b)) => {
            let ctx = dr_contexts(cfg, cfg.probes.dr_contexts);
            let s = dr_sample(cfg, &theta0, &[b], &ctx)?.remove(0);
            serde_json::json!({"single": {"median_fixed": s.median_fixed, "median_achieved": s.median_achieved,
                                          "not_improved": s.not_improved}})
        }
        (ProbeKind::Dr, None) => {
            let (sft, rl) = pair(0.0)?;
            let ctx = dr_contexts(cfg, cfg.probes.dr_contexts);
            let mut v = dr_sample(cfg, &theta0, &[&sft.params, &rl.params], &ctx)?;
            let (rl_s, sft_s) = (v.remove(1), v.remove(0));
            let gt = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(x, y)| x > y);
            serde_json::json!({
                "contexts": ctx.len(),
                "sft": {"median_fixed": sft_s.median_fixed, "median_achieved": sft_s.median_achieved,
                        "not_improved": sft_s.not_improved},
                "rl": {"median_fixed": rl_s.median_fixed, "median_achieved": rl_s.median_achieved,
                       "not_improved": rl_s.not_improved},
                "sft_gt_rl_fixed": gt(sft_s.median_fixed, rl_s.median_fixed),
                "sft_gt_rl_achieved": gt(sft_s.median_achieved, rl_s.median_achieved),
            })
        }
    };
    append_probe_record(cfg, kind, &report)?;
    Ok(report)
}

fn append_probe_record(cfg: &ExperimentConfig, kind: ProbeKind, report: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(METRICS_FILE);
    let last = if path.exists() {
        read_metrics(&path)?.0.iter().map(|r| r.step).max().unwrap_or(0)
    } else {
        0
    };
    let mut w = MetricsWriter::append(&path)?;
    let mut r = MetricsRecord::new(last + 1, Phase::Probe, Event::Probe, 0);
    r.probe = Some(kind.as_str().to_string());
    r.report = Some(report.clone());
    w.write(&r)
}
