//! Interval loop: RL steps with buffer admission, and an SFT phase whenever
//! the buffer reaches `S`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{Checkpoint, Manifest, Progress, Stage};
use super::config::{ExperimentConfig, Mode};
use super::evaluate::{evaluate, split_questions, EvalSettings};
use super::metrics::{
    AdmissionRecord, EvalScores, Event, LedgerRecord, MetricsRecord, MetricsWriter, Phase,
};
use crate::error::{Error, Result};
use crate::grpo::{rl_step, rollout_group, GradHook};
use crate::ledger::{FreezeMask, ImportanceLedger, NamedScalars};
use crate::model;
use crate::optim::AdamW;
use crate::params::NamedParams;
use crate::probes::GradDropper;
use crate::seeds::{self, Stream};
use crate::sft::{
    maybe_admit, sft_phase, sft_step, should_switch, BufferEntry, SftBuffer, TokenSelection,
};
use crate::task::{extract, generate_question, teacher_solve, Question, Split, TaskConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

/// State handed to an [`Observer`] at the edges of an SFT phase.
pub struct PhaseView<'a> {
    pub interval: u64,
    pub params: &'a NamedParams,
    pub rl_start: &'a NamedParams,
    pub mask: Option<&'a FreezeMask>,
    pub deltas: Option<&'a NamedScalars>,
    pub ledger: Option<&'a ImportanceLedger>,
    pub buffer: &'a SftBuffer,
}

/// Read-only hooks into a run.
pub trait Observer {
    fn on_sft_start(&mut self, _view: &PhaseView<'_>) {}
    fn on_sft_end(&mut self, _view: &PhaseView<'_>) {}
    fn on_rl_step(&mut self, _rl_step: u64, _params: &NamedParams) {}
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub params: NamedParams,
    pub metrics: PathBuf,
    /// `final.ckpt`, or the checkpoint written when `max_rl_steps` stopped the run.
    pub checkpoint: PathBuf,
    pub rl_steps: u64,
    pub sft_phases: u64,
    pub finished: bool,
    pub final_eval: Option<EvalScores>,
}

/// Random init followed by the supervised warm-up. Depends on the model,
/// task and base configs only, never on `master_seed`.
pub fn base_policy(cfg: &ExperimentConfig) -> Result<NamedParams> {
    let mut params = model::init(&cfg.model)?;
    let b = &cfg.base;
    if b.sft_steps == 0 {
        return Ok(params);
    }
    let task = cfg.base_task();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &params);
    for step in 0..b.sft_steps {
        let batch: Vec<BufferEntry> = (0..b.batch_size)
            .map(|j| {
                let r = seeds::derive(cfg.model.init_seed, Stream::Base, &[step as u64, j as u64]);
                let q = generate_question(&task, b.seeds.nth(r % b.seeds.len()));
                entry(&q)
            })
            .collect();
        sft_step(&mut params, &cfg.model, &batch, TokenSelection::All, b.learning_rate, None, &mut opt, None)?;
    }
    Ok(params)
}

fn entry(q: &Question) -> BufferEntry {
    let d = teacher_solve(q);
    BufferEntry {
        question: d.question,
        solution: d.solution,
        acc_at_admission: 0.0,
    }
}

fn train_question(task: &TaskConfig, i: usize) -> Question {
    generate_question(task, task.train_seeds.nth(i as u64))
}

/// Stateful trainer; [`Trainer::run`] drives it to completion or to `max_rl_steps`.
pub struct Trainer<'o> {
    cfg: ExperimentConfig,
    params: NamedParams,
    opt_rl: AdamW,
    opt_sft: AdamW,
    ledger: Option<ImportanceLedger>,
    buffer: SftBuffer,
    rl_start: NamedParams,
    progress: Progress,
    metrics: MetricsWriter,
    eval_questions: Vec<Question>,
    observer: Option<&'o mut dyn Observer>,
    clock: Instant,
}

impl<'o> Trainer<'o> {
    /// Fresh run from `base`; truncates any previous metrics stream.
    pub fn new(cfg: ExperimentConfig, base: NamedParams, observer: Option<&'o mut dyn Observer>) -> Result<Self> {
        cfg.validate()?;
        base.check_layout(&model::init(&cfg.model)?)?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        let metrics = MetricsWriter::create(&cfg.output_dir.join(METRICS_FILE))?;
        let ledger = if cfg.mode.freezing() {
            Some(ImportanceLedger::new(&base, cfg.ledger.alpha, cfg.ledger.k, cfg.ledger.size_normalized)?)
        } else {
            None
        };
        let stage = match cfg.mode {
            Mode::SftOnly | Mode::SftThenRl => Stage::Sft,
            _ => Stage::Rl,
        };
        Ok(Self {
            opt_rl: AdamW::new(cfg.optimizer.clone(), &base),
            opt_sft: AdamW::new(cfg.optimizer.clone(), &base),
            ledger,
            buffer: SftBuffer::new(cfg.sft.s),
            rl_start: base.clone(),
            progress: Progress::start(stage),
            eval_questions: split_questions(&cfg.task, Split::Eval, cfg.eval.questions),
            metrics,
            params: base,
            cfg,
            observer,
            clock: Instant::now(),
        })
    }

    /// Continues from `ckpt`. `cfg` must match the checkpoint's config except
    /// for `output_dir`, `max_rl_steps` and `checkpoint_every`; the metrics
    /// stream in `cfg.output_dir` is cut back to the checkpoint's offset.
    pub fn resume(cfg: ExperimentConfig, ckpt: &Path, observer: Option<&'o mut dyn Observer>) -> Result<Self> {
        cfg.validate()?;
        let c = Checkpoint::load(ckpt)?;
        let m = c.manifest.clone();
        let comparable = |x: &ExperimentConfig| ExperimentConfig {
            output_dir: PathBuf::new(),
            max_rl_steps: None,
            checkpoint_every: 0,
            record_wall_time: false,
            ..x.clone()
        };
        if comparable(&cfg) != comparable(&m.config) {
            return Err(Error::Checkpoint("config differs from the checkpoint's".into()));
        }
        let path = cfg.output_dir.join(METRICS_FILE);
        let have = std::fs::metadata(&path).map(|x| x.len()).unwrap_or(0);
        if have < m.metrics_offset {
            return Err(Error::Checkpoint(format!(
                "{} holds {have} bytes, checkpoint expects {}",
                path.display(),
                m.metrics_offset
            )));
        }
        let metrics = MetricsWriter::open_at(&path, m.metrics_offset)?;
        let params = c.params()?;
        params.check_layout(&model::init(&cfg.model)?)?;
        let adam = |prefix: &str, steps: Vec<u64>| -> Result<AdamW> {
            let opt = AdamW {
                cfg: cfg.optimizer.clone(),
                m: c.group(&format!("{prefix}_m"))?,
                v: c.group(&format!("{prefix}_v"))?,
                steps,
            };
            params.check_layout(&opt.m)?;
            params.check_layout(&opt.v)?;
            if opt.steps.len() != params.len() {
                return Err(Error::Checkpoint("optimizer step count length".into()));
            }
            Ok(opt)
        };
        Ok(Self {
            opt_rl: adam("adam_rl", m.adam_rl_steps)?,
            opt_sft: adam("adam_sft", m.adam_sft_steps)?,
            ledger: m.ledger,
            buffer: m.buffer,
            rl_start: c.group("rl_start")?,
            progress: m.progress,
            eval_questions: split_questions(&cfg.task, Split::Eval, cfg.eval.questions),
            metrics,
            params,
            cfg,
            observer,
            clock: Instant::now(),
        })
    }

    pub fn params(&self) -> &NamedParams {
        &self.params
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn buffer(&self) -> &SftBuffer {
        &self.buffer
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint {
            manifest: Manifest {
                config: self.cfg.clone(),
                progress: self.progress.clone(),
                ledger: self.ledger.clone(),
                buffer: self.buffer.clone(),
                adam_rl_steps: self.opt_rl.steps.clone(),
                adam_sft_steps: self.opt_sft.steps.clone(),
                metrics_offset: self.metrics.offset(),
            },
            tensors: NamedParams::new(),
        };
        c.add_group("param", &self.params);
        c.add_group("adam_rl_m", &self.opt_rl.m);
        c.add_group("adam_rl_v", &self.opt_rl.v);
        c.add_group("adam_sft_m", &self.opt_sft.m);
        c.add_group("adam_sft_v", &self.opt_sft.v);
        c.add_group("rl_start", &self.rl_start);
        c
    }

    fn save(&self, name: &str) -> Result<PathBuf> {
        let path = self.cfg.output_dir.join(name);
        self.checkpoint().save(&path)?;
        Ok(path)
    }

    /// Runs until done or until `max_rl_steps`. On a non-finite failure the
    /// state is rolled back to the last good step, saved as
    /// `last_good.ckpt`, and the error returned.
    pub fn run(&mut self) -> Result<RunSummary> {
        match self.drive() {
            Ok(s) => Ok(s),
            Err(e) => {
                if matches!(e, Error::NonFinite(_)) {
                    self.save(LAST_GOOD_CHECKPOINT)?;
                }
                Err(e)
            }
        }
    }

    fn drive(&mut self) -> Result<RunSummary> {
        if self.progress.stage == Stage::Sft {
            self.supervised_stage()?;
        }
        let mut stopped = false;
        if self.progress.stage == Stage::Rl {
            stopped = !self.rl_stage()?;
        }
        let mut final_eval = None;
        let checkpoint = if stopped {
            self.save(&format!("step_{:06}.ckpt", self.progress.rl_steps))?
        } else {
            if self.progress.stage != Stage::Done {
                final_eval = Some(self.record_eval("final")?);
                self.progress.stage = Stage::Done;
            }
            self.save(FINAL_CHECKPOINT)?
        };
        Ok(RunSummary {
            params: self.params.clone(),
            metrics: self.metrics.path().to_path_buf(),
            checkpoint,
            rl_steps: self.progress.rl_steps,
            sft_phases: self.progress.sft_phases,
            finished: !stopped,
            final_eval,
        })
    }

    fn next_step(&mut self) -> u64 {
        self.progress.record_step += 1;
        self.progress.record_step
    }

    fn write(&mut self, mut r: MetricsRecord) -> Result<()> {
        if self.cfg.record_wall_time {
            r.wall_time = Some(self.clock.elapsed().as_secs_f64());
        }
        self.metrics.write(&r)
    }

    fn interval(&self) -> u64 {
        self.progress.sft_phases
    }

    fn dropper(&self) -> Option<GradDropper> {
        (self.cfg.grad_drop > 0.0).then(|| GradDropper {
            p_on: self.cfg.grad_drop,
            seed: seeds::derive(self.cfg.master_seed, Stream::Mask, &[]),
            step: self.progress.drop_step,
        })
    }

    fn record_eval(&mut self, tag: &str) -> Result<EvalScores> {
        let s = EvalSettings {
            k: self.cfg.eval.k,
            temperature: self.cfg.eval.temperature,
            max_new_tokens: self.cfg.grpo.max_new_tokens,
            seed: seeds::derive(self.cfg.master_seed, Stream::Eval, &[]),
        };
        let scores = evaluate(&self.params, &self.cfg.model, &self.eval_questions, &s)?;
        let step = self.next_step();
        let mut r = MetricsRecord::new(step, Phase::Eval, Event::Eval, self.interval());
        r.epoch = Some(self.progress.epoch);
        r.tag = Some(tag.to_string());
        r.buffer_size = Some(self.buffer.len());
        r.eval_scores = Some(BTreeMap::from([(Split::Eval.to_string(), scores.clone())]));
        self.write(r)?;
        Ok(scores)
    }

    /// `epochs` passes of full-token SFT over teacher demonstrations of the
    /// training questions, as one bracketed phase.
    fn supervised_stage(&mut self) -> Result<()> {
        let model = self.cfg.model.clone();
        let n = self.cfg.task.train_seeds.len() as usize;
        let step = self.next_step();
        let mut r = MetricsRecord::new(step, Phase::Sft, Event::SftStart, self.interval());
        r.buffer_size = Some(0);
        r.frozen_count = Some(0);
        self.write(r)?;
        let mut dropper = self.dropper();
        for epoch in 0..self.cfg.epochs as u64 {
            let order = seeds::permutation(n, seeds::derive(self.cfg.master_seed, Stream::Data, &[epoch]));
            let entries: Vec<BufferEntry> =
                order.iter().map(|&i| entry(&train_question(&self.cfg.task, i))).collect();
            for batch in entries.chunks(self.cfg.sft.training_batch_size) {
                let mut f = |g: &mut NamedParams| dropper.as_mut().map_or(Ok(()), |d| d.apply(g));
                let mut hook: GradHook<'_> = &mut f;
                let rep = sft_step(
                    &mut self.params,
                    &model,
                    batch,
                    TokenSelection::All,
                    self.cfg.sft.learning_rate,
                    None,
                    &mut self.opt_sft,
                    Some(&mut hook),
                )?;
                self.progress.sft_steps += 1;
                let step = self.next_step();
                let mut r = MetricsRecord::new(step, Phase::Sft, Event::SftStep, self.interval());
                r.epoch = Some(epoch);
                r.loss = Some(rep.loss);
                r.frozen_count = Some(0);
                r.selected_tokens = Some(rep.selected_tokens);
                r.total_tokens = Some(rep.total_tokens);
                self.write(r)?;
            }
        }
        if let Some(d) = dropper {
            self.progress.drop_step = d.step;
        }
        let step = self.next_step();
        let mut r = MetricsRecord::new(step, Phase::Sft, Event::SftEnd, self.interval());
        r.buffer_size = Some(0);
        r.frozen_count = Some(0);
        self.write(r)?;
        self.progress.sft_phases += 1;
        if self.cfg.mode == Mode::SftThenRl {
            self.progress.stage = Stage::Rl;
            self.rl_start = self.params.clone();
        }
        Ok(())
    }

    /// Returns false when stopped early by `max_rl_steps`.
    fn rl_stage(&mut self) -> Result<bool> {
        let n = self.cfg.task.train_seeds.len() as usize;
        let batch = self.cfg.grpo.rollout_batch_size;
        let admit = self.cfg.mode.interleaves() || self.cfg.mode == Mode::RlOnly;
        while (self.progress.epoch as usize) < self.cfg.epochs {
            let order = seeds::permutation(
                n,
                seeds::derive(self.cfg.master_seed, Stream::Data, &[self.progress.epoch]),
            );
            while (self.progress.cursor as usize) < n {
                if self
                    .cfg
                    .max_rl_steps
                    .is_some_and(|m| self.progress.rl_steps >= m as u64)
                {
                    return Ok(false);
                }
                let start = self.progress.cursor as usize;
                let idx = &order[start..(start + batch).min(n)];
                self.one_rl_step(idx, admit)?;
                self.progress.cursor = (start + idx.len()) as u64;
                if self.cfg.mode.interleaves() && should_switch(&self.buffer) {
                    self.sft_interval()?;
                }
                let every = self.cfg.eval.every as u64;
                if every > 0 && self.progress.rl_steps % every == 0 {
                    self.record_eval("periodic")?;
                }
                let ck = self.cfg.checkpoint_every as u64;
                if ck > 0 && self.progress.rl_steps % ck == 0 {
                    self.save(&format!("step_{:06}.ckpt", self.progress.rl_steps))?;
                }
            }
            self.progress.epoch += 1;
            self.progress.cursor = 0;
        }
        Ok(true)
    }

    fn one_rl_step(&mut self, idx: &[usize], admit: bool) -> Result<()> {
        let cfg = &self.cfg;
        let mut groups = Vec::with_capacity(idx.len());
        for (j, &i) in idx.iter().enumerate() {
            let q = train_question(&cfg.task, i);
            let seed = seeds::derive(cfg.master_seed, Stream::Rollout, &[self.progress.rl_steps, j as u64]);
            groups.push(rollout_group(&self.params, &cfg.model, &q, &cfg.grpo, seed)?);
        }
        let mut admissions = Vec::new();
        if admit {
            for g in &groups {
                let demo = teacher_solve(&g.question);
                let verified = extract(&demo.solution).as_deref() == Some(g.question.answer.as_str());
                let outcome = maybe_admit(&mut self.buffer, g, &demo, &cfg.sft)?;
                admissions.push(AdmissionRecord {
                    seed: g.question.seed,
                    acc: g.acc,
                    verified,
                    outcome,
                });
            }
        }
        let mut dropper = self.dropper();
        let mut f = |g: &mut NamedParams| dropper.as_mut().map_or(Ok(()), |d| d.apply(g));
        let hook: Option<GradHook<'_>> = if cfg.grad_drop > 0.0 { Some(&mut f) } else { None };
        let rep = rl_step(&mut self.params, &cfg.model, &groups, &cfg.grpo, &mut self.opt_rl, hook)?;
        if let Some(d) = dropper {
            self.progress.drop_step = d.step;
        }
        self.progress.rl_steps += 1;
        let step = self.next_step();
        let mut r = MetricsRecord::new(step, Phase::Rl, Event::RlStep, self.interval());
        r.epoch = Some(self.progress.epoch);
        r.loss = Some(rep.loss);
        r.mean_reward = Some(rep.mean_reward);
        r.mean_acc = Some(rep.mean_acc);
        r.mean_response_length = Some(rep.mean_response_length);
        r.buffer_size = Some(self.buffer.len());
        r.frozen_count = Some(0);
        if admit {
            r.admissions = Some(admissions);
        }
        self.write(r)?;
        if let Some(o) = self.observer.as_mut() {
            o.on_rl_step(self.progress.rl_steps, &self.params);
        }
        Ok(())
    }

    fn sft_interval(&mut self) -> Result<()> {
        if self.cfg.eval.around_sft {
            self.record_eval("before_sft")?;
        }
        let mut closed = None;
        if let Some(l) = self.ledger.as_mut() {
            closed = Some(l.close_interval(&self.rl_start, &self.params)?);
        }
        let mask = closed.as_ref().map(|(m, _)| m.clone());
        let frozen = mask.as_ref().map_or(0, FreezeMask::frozen_count);
        let interval = self.interval();
        if let Some(o) = self.observer.as_mut() {
            o.on_sft_start(&PhaseView {
                interval,
                params: &self.params,
                rl_start: &self.rl_start,
                mask: mask.as_ref(),
                deltas: closed.as_ref().map(|(_, d)| d),
                ledger: self.ledger.as_ref(),
                buffer: &self.buffer,
            });
        }
        let step = self.next_step();
        let mut r = MetricsRecord::new(step, Phase::Sft, Event::SftStart, interval);
        r.epoch = Some(self.progress.epoch);
        r.buffer_size = Some(self.buffer.len());
        r.frozen_count = Some(frozen);
        if let (Some((m, deltas)), Some(l)) = (&closed, &self.ledger) {
            r.ledger = Some(LedgerRecord {
                deltas: deltas.clone(),
                c: l.c.clone(),
                frozen: m.frozen_names().map(str::to_string).collect(),
            });
        }
        self.write(r)?;

        let mut dropper = self.dropper();
        let mut f = |g: &mut NamedParams| dropper.as_mut().map_or(Ok(()), |d| d.apply(g));
        let hook: Option<GradHook<'_>> = if self.cfg.grad_drop > 0.0 { Some(&mut f) } else { None };
        let reports = sft_phase(
            &mut self.params,
            &mut self.buffer,
            &self.cfg.model,
            &self.cfg.sft,
            self.cfg.mode.entropy_selection(),
            mask.as_ref(),
            &mut self.opt_sft,
            hook,
        )?;
        if let Some(d) = dropper {
            self.progress.drop_step = d.step;
        }
        for rep in reports {
            self.progress.sft_steps += 1;
            let step = self.next_step();
            let mut r = MetricsRecord::new(step, Phase::Sft, Event::SftStep, interval);
            r.epoch = Some(self.progress.epoch);
            r.loss = Some(rep.loss);
            r.frozen_count = Some(frozen);
            r.selected_tokens = Some(rep.selected_tokens);
            r.total_tokens = Some(rep.total_tokens);
            self.write(r)?;
        }
        if let Some(o) = self.observer.as_mut() {
            o.on_sft_end(&PhaseView {
                interval,
                params: &self.params,
                rl_start: &self.rl_start,
                mask: mask.as_ref(),
                deltas: closed.as_ref().map(|(_, d)| d),
                ledger: self.ledger.as_ref(),
                buffer: &self.buffer,
            });
        }
        if let Some(l) = self.ledger.as_mut() {
            l.unfreeze_all();
        }
        let step = self.next_step();
        let mut r = MetricsRecord::new(step, Phase::Sft, Event::SftEnd, interval);
        r.epoch = Some(self.progress.epoch);
        r.buffer_size = Some(self.buffer.len());
        r.frozen_count = Some(frozen);
        self.write(r)?;
        self.progress.sft_phases += 1;
        self.rl_start = self.params.clone();
        if self.cfg.eval.around_sft {
            self.record_eval("after_sft")?;
        }
        Ok(())
    }
}

/// Builds the base policy and runs `cfg` from scratch.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let base = base_policy(cfg)?;
    Trainer::new(cfg.clone(), base, None)?.run()
}
