//! Synthetic verifiable arithmetic tasks.
//!
//! A question is a left-to-right chain `a1 op a2 op ... op ak+1 = ?` over
//! integers modulo a small prime, with `op ∈ {+, -, *}`. The procedural
//! teacher writes one reduction per step followed by `#### <answer>` and an
//! end-of-answer token:
//!
//! ```text
//! prompt:   3 + 5 * 2 = ?
//! solution: 3 + 5 = 1 ; 1 * 2 = 2 ; #### 2 <eoa>
//! ```
//!
//! Numbers are written in decimal with one token per digit.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub const TOK_PLUS: usize = 10;
pub const TOK_MINUS: usize = 11;
pub const TOK_TIMES: usize = 12;
pub const TOK_EQUALS: usize = 13;
/// Question delimiter; every prompt ends with it.
pub const TOK_QUESTION: usize = 14;
pub const TOK_STEP: usize = 15;
/// Answer delimiter (`####`).
pub const TOK_ANSWER: usize = 16;
/// End of answer; generation stops after emitting it.
pub const TOK_EOA: usize = 17;
/// Number of token ids the task uses; the model vocabulary must cover it.
pub const ALPHABET_SIZE: usize = 18;

/// Token ids. Length limits are enforced by the model, not here.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl Deref for TokenSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl TokenSequence {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn concat(&self, other: &[usize]) -> Vec<usize> {
        let mut v = self.0.clone();
        v.extend_from_slice(other);
        v
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

pub fn token_symbol(t: usize) -> &'static str {
    const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
    match t {
        0..=9 => DIGITS[t],
        TOK_PLUS => "+",
        TOK_MINUS => "-",
        TOK_TIMES => "*",
        TOK_EQUALS => "=",
        TOK_QUESTION => "?",
        TOK_STEP => ";",
        TOK_ANSWER => "####",
        TOK_EOA => "<eoa>",
        _ => "<unk>",
    }
}

/// Renders tokens as text; consecutive digits form one word.
pub fn render(tokens: &[usize]) -> String {
    let mut out = String::new();
    let mut prev_digit = false;
    for &t in tokens {
        let digit = t <= 9;
        if !out.is_empty() && !(digit && prev_digit) {
            out.push(' ');
        }
        out.push_str(token_symbol(t));
        prev_digit = digit;
    }
    out
}

/// Inverse of [`render`].
pub fn parse_text(text: &str) -> Result<TokenSequence> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        match word {
            "+" => out.push(TOK_PLUS),
            "-" => out.push(TOK_MINUS),
            "*" => out.push(TOK_TIMES),
            "=" => out.push(TOK_EQUALS),
            "?" => out.push(TOK_QUESTION),
            ";" => out.push(TOK_STEP),
            "####" => out.push(TOK_ANSWER),
            "<eoa>" => out.push(TOK_EOA),
            w if w.bytes().all(|b| b.is_ascii_digit()) => {
                out.extend(w.bytes().map(|b| (b - b'0') as usize))
            }
            w => return Err(Error::Invalid(format!("unknown word `{w}`"))),
        }
    }
    Ok(TokenSequence(out))
}

fn number_tokens(n: u64) -> Vec<usize> {
    n.to_string().bytes().map(|b| (b - b'0') as usize).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn token(self) -> usize {
        match self {
            Op::Add => TOK_PLUS,
            Op::Sub => TOK_MINUS,
            Op::Mul => TOK_TIMES,
        }
    }

    fn apply(self, a: u64, b: u64, m: u64) -> u64 {
        match self {
            Op::Add => (a + b) % m,
            Op::Sub => (a + m - b) % m,
            Op::Mul => (a * b) % m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn contains(&self, seed: u64) -> bool {
        (self.start..self.end).contains(&seed)
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nth(&self, i: u64) -> u64 {
        self.start + i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Small prime modulus.
    pub modulus: u64,
    /// Minimum number of chained operations.
    pub min_chain: usize,
    pub max_chain: usize,
    pub train_seeds: SeedRange,
    pub eval_seeds: SeedRange,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            modulus: 7,
            min_chain: 1,
            max_chain: 3,
            train_seeds: SeedRange { start: 0, end: 256 },
            eval_seeds: SeedRange {
                start: 1 << 32,
                end: (1 << 32) + 128,
            },
        }
    }
}

fn is_prime(n: u64) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !is_prime(self.modulus) {
            return Err(Error::Config(format!("modulus {} is not prime", self.modulus)));
        }
        if self.min_chain == 0 || self.max_chain < self.min_chain {
            return Err(Error::Config(format!(
                "chain range {}..={} is empty",
                self.min_chain, self.max_chain
            )));
        }
        let (a, b) = (self.train_seeds, self.eval_seeds);
        if a.is_empty() || b.is_empty() {
            return Err(Error::Config("empty seed range".into()));
        }
        if a.start < b.end && b.start < a.end {
            return Err(Error::Config("train and eval seed ranges overlap".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, seed: u64) -> Split {
        if self.eval_seeds.contains(seed) {
            Split::Eval
        } else {
            Split::Train
        }
    }

    pub fn seeds(&self, split: Split) -> SeedRange {
        match split {
            Split::Train => self.train_seeds,
            Split::Eval => self.eval_seeds,
        }
    }

    fn max_number_tokens(&self) -> usize {
        number_tokens(self.modulus - 1).len()
    }

    /// Longest prompt the generator can emit.
    pub fn max_prompt_len(&self) -> usize {
        let n = self.max_number_tokens();
        (self.max_chain + 1) * n + self.max_chain + 2
    }

    /// Longest teacher solution.
    pub fn max_solution_len(&self) -> usize {
        let n = self.max_number_tokens();
        self.max_chain * (3 * n + 3) + n + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub seed: u64,
    pub prompt: TokenSequence,
    /// Canonical decimal answer.
    pub answer: String,
    /// Number of chained operations.
    pub difficulty: usize,
    pub operands: Vec<u64>,
    pub ops: Vec<Op>,
    pub modulus: u64,
}

/// Content bucket used to keep train and eval questions disjoint.
fn content_bucket(tokens: &[usize]) -> Split {
    // FNV-1a over token ids
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        h ^= t as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    if h % 5 == 0 {
        Split::Eval
    } else {
        Split::Train
    }
}

const MAX_ATTEMPTS: u64 = 4096;

/// Deterministic question for `seed`. Seeds inside `cfg.eval_seeds` yield
/// eval-bucket questions, all other seeds train-bucket ones, so no eval
/// question is token-identical to a train question.
pub fn generate_question(cfg: &TaskConfig, seed: u64) -> Question {
    let split = cfg.split_of(seed);
    let m = cfg.modulus;
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = seeds::rng(seed, seeds::Stream::Data, &[attempt]);
        let k = rng.random_range(cfg.min_chain..=cfg.max_chain);
        let operands: Vec<u64> = (0..=k).map(|_| rng.random_range(0..m)).collect();
        let ops: Vec<Op> = (0..k)
            .map(|_| match rng.random_range(0..3) {
                0 => Op::Add,
                1 => Op::Sub,
                _ => Op::Mul,
            })
            .collect();
        let mut prompt = number_tokens(operands[0]);
        for (op, &x) in ops.iter().zip(&operands[1..]) {
            prompt.push(op.token());
            prompt.extend(number_tokens(x));
        }
        prompt.push(TOK_EQUALS);
        prompt.push(TOK_QUESTION);
        let value = ops
            .iter()
            .zip(&operands[1..])
            .fold(operands[0], |acc, (op, &x)| op.apply(acc, x, m));
        let q = Question {
            seed,
            prompt: TokenSequence(prompt),
            answer: value.to_string(),
            difficulty: k,
            operands,
            ops,
            modulus: m,
        };
        if content_bucket(&q.prompt) == split {
            return q;
        }
        last = Some(q);
    }
    // Degenerate configs with too few distinct questions land here.
    last.expect("at least one attempt")
}

/// A question with a solution whose extracted answer is the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: Question,
    pub solution: TokenSequence,
}

impl Demonstration {
    pub fn new(question: Question, solution: TokenSequence) -> Result<Self> {
        if extract(&solution).as_deref() != Some(question.answer.as_str()) {
            return Err(Error::Invalid(format!(
                "solution `{}` does not yield answer {}",
                render(&solution),
                question.answer
            )));
        }
        Ok(Self { question, solution })
    }
}

/// Procedural chain-of-thought teacher.
pub fn teacher_solve(q: &Question) -> Demonstration {
    let mut s = Vec::new();
    let mut acc = q.operands[0];
    for (op, &x) in q.ops.iter().zip(&q.operands[1..]) {
        let next = op.apply(acc, x, q.modulus);
        s.extend(number_tokens(acc));
        s.push(op.token());
        s.extend(number_tokens(x));
        s.push(TOK_EQUALS);
        s.extend(number_tokens(next));
        s.push(TOK_STEP);
        acc = next;
    }
    s.push(TOK_ANSWER);
    s.extend(number_tokens(acc));
    s.push(TOK_EOA);
    Demonstration::new(q.clone(), TokenSequence(s)).expect("teacher is sound")
}

/// The maximal digit run immediately after the last answer delimiter.
pub fn extract(s: &[usize]) -> Option<String> {
    let pos = s.iter().rposition(|&t| t == TOK_ANSWER)?;
    let digits: String = s[pos + 1..]
        .iter()
        .take_while(|&&t| t <= 9)
        .map(|&t| token_symbol(t))
        .collect();
    (!digits.is_empty()).then_some(digits)
}

/// Binary verifiable reward.
pub fn reward(o: &[usize], q: &Question) -> f64 {
    match extract(o) {
        Some(a) if a == q.answer => 1.0,
        _ => 0.0,
    }
}

/// One line of a question dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub seed: u64,
    pub prompt_text: String,
    pub answer: String,
    pub difficulty: usize,
}

impl From<&Question> for QuestionRecord {
    fn from(q: &Question) -> Self {
        Self {
            seed: q.seed,
            prompt_text: render(&q.prompt),
            answer: q.answer.clone(),
            difficulty: q.difficulty,
        }
    }
}

pub fn dump_questions<W: Write>(mut w: W, questions: &[Question]) -> Result<()> {
    for q in questions {
        serde_json::to_writer(&mut w, &QuestionRecord::from(q))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_questions<R: BufRead>(r: R) -> Result<Vec<QuestionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TaskConfig {
        TaskConfig::default()
    }

    fn question(operands: Vec<u64>, ops: Vec<Op>, m: u64) -> Question {
        let mut prompt = number_tokens(operands[0]);
        for (op, &x) in ops.iter().zip(&operands[1..]) {
            prompt.push(op.token());
            prompt.extend(number_tokens(x));
        }
        prompt.extend([TOK_EQUALS, TOK_QUESTION]);
        let v = ops
            .iter()
            .zip(&operands[1..])
            .fold(operands[0], |a, (op, &x)| op.apply(a, x, m));
        Question {
            seed: 0,
            prompt: TokenSequence(prompt),
            answer: v.to_string(),
            difficulty: ops.len(),
            operands,
            ops,
            modulus: m,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_question(&cfg(), 11), generate_question(&cfg(), 11));
    }

    #[test]
    fn answers_lie_in_residue_range() {
        for seed in 0..200 {
            let q = generate_question(&cfg(), seed);
            let a: u64 = q.answer.parse().unwrap();
            assert!(a < 7);
            assert_eq!(*q.prompt.last().unwrap(), TOK_QUESTION);
            // brute-force re-evaluation of the chain
            let mut v = q.operands[0] as i64;
            for (op, &x) in q.ops.iter().zip(&q.operands[1..]) {
                v = match op {
                    Op::Add => v + x as i64,
                    Op::Sub => v - x as i64,
                    Op::Mul => v * x as i64,
                }
                .rem_euclid(7);
            }
            assert_eq!(a, v as u64);
        }
    }

    #[test]
    fn single_operation_has_single_step() {
        let c = TaskConfig {
            min_chain: 1,
            max_chain: 1,
            ..cfg()
        };
        let q = generate_question(&c, 5);
        assert_eq!(q.difficulty, 1);
        let d = teacher_solve(&q);
        assert_eq!(d.solution.iter().filter(|&&t| t == TOK_STEP).count(), 1);
    }

    #[test]
    fn three_plus_five_mod_seven() {
        let q = question(vec![3, 5], vec![Op::Add], 7);
        let d = teacher_solve(&q);
        assert_eq!(render(&d.solution), "3 + 5 = 1 ; #### 1 <eoa>");
        assert_eq!(extract(&d.solution).as_deref(), Some("1"));
    }

    #[test]
    fn extract_cases() {
        assert_eq!(extract(&parse_text("1 + 3 = 4 ; #### 4").unwrap()).as_deref(), Some("4"));
        assert_eq!(extract(&parse_text("1 + 3 = 4").unwrap()), None);
        assert_eq!(
            extract(&parse_text("#### 3 ; 2 + 3 = 5 #### 5 <eoa>").unwrap()).as_deref(),
            Some("5")
        );
        assert_eq!(extract(&parse_text("#### <eoa>").unwrap()), None);
        assert_eq!(extract(&parse_text("#### 12 ; 3").unwrap()).as_deref(), Some("12"));
    }

    #[test]
    fn reward_cases() {
        let q = question(vec![3, 5], vec![Op::Add], 7);
        assert_eq!(reward(&parse_text("#### 1 <eoa>").unwrap(), &q), 1.0);
        assert_eq!(reward(&parse_text("#### 2 <eoa>").unwrap(), &q), 0.0);
        assert_eq!(reward(&parse_text("3 + 5 = 1").unwrap(), &q), 0.0);
    }

    #[test]
    fn demonstration_rejects_wrong_solution() {
        let q = question(vec![3, 5], vec![Op::Add], 7);
        assert!(Demonstration::new(q, parse_text("#### 2").unwrap()).is_err());
    }

    #[test]
    fn split_hygiene() {
        let c = cfg();
        let train: std::collections::HashSet<_> = (0..2000)
            .map(|s| generate_question(&c, s).prompt)
            .collect();
        for i in 0..c.eval_seeds.len() {
            let q = generate_question(&c, c.eval_seeds.nth(i));
            assert_eq!(content_bucket(&q.prompt), Split::Eval);
            assert!(!train.contains(&q.prompt));
        }
    }

    #[test]
    fn render_round_trip() {
        let c = TaskConfig {
            modulus: 13,
            ..cfg()
        };
        for seed in 0..50 {
            let d = teacher_solve(&generate_question(&c, seed));
            assert_eq!(parse_text(&render(&d.solution)).unwrap(), d.solution);
            assert!(d.solution.len() <= c.max_solution_len());
            assert!(d.question.prompt.len() <= c.max_prompt_len());
        }
    }

    #[test]
    fn dump_and_load() {
        let qs: Vec<_> = (0..5).map(|s| generate_question(&cfg(), s)).collect();
        let mut buf = Vec::new();
        dump_questions(&mut buf, &qs).unwrap();
        let recs = load_questions(&buf[..]).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[2].prompt_text, render(&qs[2].prompt));
        assert_eq!(parse_text(&recs[2].prompt_text).unwrap(), qs[2].prompt);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TaskConfig { modulus: 8, ..cfg() }.validate().is_err());
        let overlap = TaskConfig {
            eval_seeds: SeedRange { start: 100, end: 300 },
            ..cfg()
        };
        assert!(overlap.validate().is_err());
    }
}
