use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::probes::ProbeConfig;
use crate::sft::SftConfig;
use crate::task::{SeedRange, TaskConfig};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MIFO_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Interleaved RL/SFT with entropy selection and freezing.
    Mifo,
    /// As `mifo` with `alpha` forced to 0.
    MifoDagger,
    /// Interleaved RL/SFT, full-token SFT, no freezing.
    Interleave,
    /// Interleave plus entropy selection.
    InterleaveEs,
    /// Interleave plus parameter freezing.
    InterleavePf,
    RlOnly,
    SftOnly,
    /// `epochs` of SFT over all training questions, then `epochs` of RL.
    SftThenRl,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Mifo,
        Mode::MifoDagger,
        Mode::Interleave,
        Mode::InterleaveEs,
        Mode::InterleavePf,
        Mode::RlOnly,
        Mode::SftOnly,
        Mode::SftThenRl,
    ];

    pub fn interleaves(self) -> bool {
        matches!(
            self,
            Mode::Mifo | Mode::MifoDagger | Mode::Interleave | Mode::InterleaveEs | Mode::InterleavePf
        )
    }

    pub fn entropy_selection(self) -> bool {
        matches!(self, Mode::Mifo | Mode::MifoDagger | Mode::InterleaveEs)
    }

    pub fn freezing(self) -> bool {
        matches!(self, Mode::Mifo | Mode::MifoDagger | Mode::InterleavePf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mifo => "mifo",
            Mode::MifoDagger => "mifo_dagger",
            Mode::Interleave => "interleave",
            Mode::InterleaveEs => "interleave_es",
            Mode::InterleavePf => "interleave_pf",
            Mode::RlOnly => "rl_only",
            Mode::SftOnly => "sft_only",
            Mode::SftThenRl => "sft_then_rl",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerConfig {
    /// Decay of the importance map (`alpha = 0.5` by default).
    pub alpha: f64,
    /// Freeze fraction (`k = 0.5`).
    pub k: f64,
    /// Divide each tensor's norm by `sqrt(numel)`; off by default.
    pub size_normalized: bool,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k: 0.5,
            size_normalized: false,
        }
    }
}

/// Supervised warm-up that turns the random init into a base policy with
/// non-zero rollout accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    /// Optimizer steps; 0 keeps the random initialization.
    pub sft_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds of the warm-up questions; must not overlap the eval seeds.
    pub seeds: SeedRange,
    pub min_chain: usize,
    pub max_chain: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            sft_steps: 1000,
            learning_rate: 3e-3,
            batch_size: 16,
            seeds: SeedRange {
                start: 1 << 40,
                end: (1 << 40) + 4096,
            },
            min_chain: 1,
            max_chain: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Questions taken from the front of the eval seed range.
    pub questions: usize,
    /// Samples per question for avg@k; 0 skips sampling.
    pub k: usize,
    pub temperature: f64,
    /// Evaluate every this many RL steps; 0 disables periodic evaluation.
    pub every: usize,
    /// Evaluate immediately before and after every SFT phase.
    pub around_sft: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            questions: 128,
            k: 4,
            temperature: 0.6,
            every: 0,
            around_sft: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub grpo: GrpoConfig,
    pub sft: SftConfig,
    pub optimizer: AdamWConfig,
    pub ledger: LedgerConfig,
    pub probes: ProbeConfig,
    pub base: BaseConfig,
    pub eval: EvalConfig,
    pub epochs: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Online gradient drop rate applied to every update of this run.
    pub grad_drop: f64,
    /// Save a checkpoint every this many RL steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Stop after this many RL steps in total.
    pub max_rl_steps: Option<usize>,
    /// Add wall-clock seconds to metrics records (breaks byte identity).
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mifo,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            grpo: GrpoConfig::default(),
            sft: SftConfig::default(),
            optimizer: AdamWConfig::default(),
            ledger: LedgerConfig::default(),
            probes: ProbeConfig::default(),
            base: BaseConfig::default(),
            eval: EvalConfig::default(),
            epochs: 3,
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            grad_drop: 0.0,
            checkpoint_every: 0,
            max_rl_steps: None,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    /// Reads a config file and applies the output-dir override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    /// Applies mode-implied settings and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.mode == Mode::MifoDagger {
            self.ledger.alpha = 0.0;
        }
        self.sft.s = self.sft.s.max(1);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.grpo.validate()?;
        self.sft.validate()?;
        self.probes.validate()?;
        if !(0.0..1.0).contains(&self.ledger.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1)", self.ledger.alpha)));
        }
        if !(self.ledger.k > 0.0 && self.ledger.k < 1.0) {
            return Err(Error::Config(format!("k {} outside (0, 1)", self.ledger.k)));
        }
        if self.mode == Mode::MifoDagger && self.ledger.alpha != 0.0 {
            return Err(Error::Config("mifo_dagger requires alpha = 0".into()));
        }
        if !(0.0..=1.0).contains(&self.grad_drop) {
            return Err(Error::Config(format!("grad_drop {} outside [0, 1]", self.grad_drop)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let b = &self.base;
        let e = &self.task.eval_seeds;
        if b.sft_steps > 0 {
            if b.seeds.is_empty() || (b.seeds.start < e.end && e.start < b.seeds.end) {
                return Err(Error::Config("base seeds empty or overlapping eval seeds".into()));
            }
            if b.min_chain == 0 || b.max_chain < b.min_chain || b.batch_size == 0 {
                return Err(Error::Config("invalid base chain range or batch size".into()));
            }
        }
        if self.eval.questions as u64 > e.len() {
            return Err(Error::Config(format!(
                "eval.questions {} exceeds the eval seed range ({})",
                self.eval.questions,
                e.len()
            )));
        }
        let longest = self.task.max_prompt_len() + self.task.max_solution_len();
        if longest > self.model.max_seq_len + 1 {
            return Err(Error::Config(format!(
                "max_seq_len {} too short for prompt+solution of {longest} tokens",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// Task config used for the warm-up questions.
    pub fn base_task(&self) -> TaskConfig {
        TaskConfig {
            min_chain: self.base.min_chain,
            max_chain: self.base.max_chain,
            ..self.task.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn recorded_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.sft.rho, 0.2);
        assert_eq!(c.ledger.k, 0.5);
        assert_eq!(c.ledger.alpha, 0.5);
        assert_eq!(c.sft.p, 1.0 / 8.0);
        assert_eq!(c.grpo.entropy_coefficient, 0.001);
        assert_eq!(c.grpo.rollout_temperature, 1.0);
        assert_eq!(c.grpo.rollouts_per_query, 8);
        assert_eq!(c.eval.temperature, 0.6);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.grpo.rollout_batch_size / c.grpo.update_batch_size, 2);
        assert!((c.sft.learning_rate / c.grpo.learning_rate - 10.0).abs() < 1e-9);
    }

    #[test]
    fn dagger_forces_alpha_zero() {
        let c = ExperimentConfig::from_json(r#"{"mode": "mifo_dagger"}"#).unwrap();
        assert_eq!(c.ledger.alpha, 0.0);
        let c = ExperimentConfig::from_json(r#"{"mode": "mifo"}"#).unwrap();
        assert_eq!(c.ledger.alpha, 0.5);
    }

    #[test]
    fn mode_gating() {
        assert!(!Mode::Interleave.entropy_selection() && !Mode::Interleave.freezing());
        assert!(Mode::InterleaveEs.entropy_selection() && !Mode::InterleaveEs.freezing());
        assert!(!Mode::InterleavePf.entropy_selection() && Mode::InterleavePf.freezing());
        assert!(!Mode::RlOnly.interleaves());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
        assert!("MIFO".parse::<Mode>().is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_json(r#"{"mode": "mifo", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"ledger": {"k": 1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"vocab_size": 32, "n_layers": 2, "d_model": 64, "n_heads": 4, "max_seq_len": 10, "init_seed": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"eval": {"questions": 100000}}"#).is_err());
    }
}
