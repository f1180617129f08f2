//! Append-only JSONL metrics stream.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ledger::NamedScalars;
use crate::sft::Admission;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rl,
    Sft,
    Probe,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    RlStep,
    SftStart,
    SftStep,
    SftEnd,
    Eval,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub pass_at_1: f64,
    pub avg_at_k: Option<f64>,
    pub k: usize,
    pub mean_response_length: f64,
    pub questions: usize,
}

/// One admission attempt, kept so the buffer gates can be audited offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub seed: u64,
    pub acc: f64,
    /// Whether the teacher solution extracted to the ground-truth answer.
    pub verified: bool,
    pub outcome: Admission,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub deltas: NamedScalars,
    /// Retained importance after this interval.
    pub c: NamedScalars,
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: Option<Phase>,
    pub event: Option<Event>,
    pub interval_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_response_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_scores: Option<BTreeMap<String, EvalScores>>,
    /// `before_sft`, `after_sft`, `periodic`, `final`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissions: Option<Vec<AdmissionRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<LedgerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_tokens: Option<usize>,
    /// Probe type discriminator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

impl MetricsRecord {
    pub fn new(step: u64, phase: Phase, event: Event, interval_index: u64) -> Self {
        Self {
            step,
            phase: Some(phase),
            event: Some(event),
            interval_index,
            ..Self::default()
        }
    }
}

/// Writes one record per line and flushes after each.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    offset: u64,
}

impl MetricsWriter {
    /// Opens `path` for appending after truncating it to `offset` bytes.
    pub fn open_at(path: &Path, offset: u64) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(path)?;
        file.set_len(offset)?;
        let mut w = Self {
            path: path.to_path_buf(),
            file,
            offset,
        };
        use std::io::Seek;
        w.file.seek(std::io::SeekFrom::Start(offset))?;
        Ok(w)
    }

    pub fn create(path: &Path) -> Result<Self> {
        Self::open_at(path, 0)
    }

    /// Appends to the end of an existing file.
    pub fn append(path: &Path) -> Result<Self> {
        let len = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        Self::open_at(path, len)
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.offset += line.len() as u64;
        Ok(())
    }

    /// Bytes written so far; stored in checkpoints so a resume can cut off
    /// records written after the save.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parsed records plus the number of malformed lines.
pub fn read_metrics(path: &Path) -> Result<(Vec<MetricsRecord>, usize)> {
    let mut records = Vec::new();
    let mut bad = 0;
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricsRecord>(&line) {
            Ok(r) if r.phase.is_some() => records.push(r),
            _ => bad += 1,
        }
    }
    Ok((records, bad))
}

/// Stream-level checks: strictly increasing steps, SFT only after RL,
/// each SFT phase bracketed by start/end with the end leaving an empty buffer.
pub fn check_stream(records: &[MetricsRecord]) -> std::result::Result<(), String> {
    let mut last_step: Option<u64> = None;
    let mut in_sft = false;
    let mut rl_since_sft = true;
    for r in records {
        if last_step.is_some_and(|s| r.step <= s) {
            return Err(format!("step {} not increasing", r.step));
        }
        last_step = Some(r.step);
        match r.event {
            Some(Event::RlStep) => {
                if in_sft {
                    return Err(format!("rl step {} inside an sft phase", r.step));
                }
                rl_since_sft = true;
            }
            Some(Event::SftStart) => {
                if in_sft || !rl_since_sft {
                    return Err(format!("sft phase at step {} without intervening rl", r.step));
                }
                in_sft = true;
                rl_since_sft = false;
            }
            Some(Event::SftStep) if !in_sft => {
                return Err(format!("sft step {} outside a phase", r.step));
            }
            Some(Event::SftEnd) => {
                if !in_sft || r.buffer_size != Some(0) {
                    return Err(format!("bad sft end at step {}", r.step));
                }
                in_sft = false;
            }
            _ => {}
        }
    }
    if in_sft {
        return Err("stream ends inside an sft phase".into());
    }
    Ok(())
}
