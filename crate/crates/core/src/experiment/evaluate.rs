//! pass@1 (greedy) and avg@k (sampled) accuracy.

use super::metrics::EvalScores;
use crate::error::{Error, Result};
use crate::model::{generate, ModelConfig};
use crate::params::NamedParams;
use crate::seeds::{self, Stream};
use crate::task::{generate_question, reward, Question, Split, TaskConfig};

/// The first `n` questions of `split`.
pub fn split_questions(task: &TaskConfig, split: Split, n: usize) -> Vec<Question> {
    let range = task.seeds(split);
    (0..(n as u64).min(range.len()))
        .map(|i| generate_question(task, range.nth(i)))
        .collect()
}

/// Mean binary reward of `responses[i]` against `questions[i]`.
pub fn accuracy(questions: &[Question], responses: &[Vec<usize>]) -> Result<f64> {
    if questions.is_empty() || questions.len() != responses.len() {
        return Err(Error::Invalid("need one response per question".into()));
    }
    let hits: f64 = questions.iter().zip(responses).map(|(q, o)| reward(o, q)).sum();
    Ok(hits / questions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Sample `j` of question `i` uses the stream `(seed, eval, [i, j])`.
    pub seed: u64,
}

/// Greedy accuracy, and the mean accuracy of `k` samples per question when
/// `k > 0`. The length is the mean greedy response length.
pub fn evaluate(
    params: &NamedParams,
    model: &ModelConfig,
    questions: &[Question],
    s: &EvalSettings,
) -> Result<EvalScores> {
    if questions.is_empty() {
        return Err(Error::Invalid("no evaluation questions".into()));
    }
    let mut greedy_hits = 0.0;
    let mut sampled_hits = 0.0;
    let mut length = 0usize;
    let mut unused = seeds::rng(s.seed, Stream::Eval, &[u64::MAX]);
    for (i, q) in questions.iter().enumerate() {
        let g = generate(params, model, &q.prompt, 0.0, s.max_new_tokens, &mut unused)?;
        greedy_hits += reward(&g.tokens, q);
        length += g.tokens.len();
        for j in 0..s.k {
            let mut rng = seeds::rng(s.seed, Stream::Eval, &[i as u64, j as u64]);
            let o = generate(params, model, &q.prompt, s.temperature, s.max_new_tokens, &mut rng)?;
            sampled_hits += reward(&o.tokens, q);
        }
    }
    let n = questions.len() as f64;
    Ok(EvalScores {
        pass_at_1: greedy_hits / n,
        avg_at_k: (s.k > 0).then(|| sampled_hits / (n * s.k as f64)),
        k: s.k,
        mean_response_length: length as f64 / n,
        questions: questions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init;
    use crate::task::teacher_solve;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 48,
            init_seed: 3,
        }
    }

    #[test]
    fn teacher_responses_score_one() {
        let qs = split_questions(&TaskConfig::default(), Split::Eval, 50);
        let rs: Vec<Vec<usize>> = qs.iter().map(|q| teacher_solve(q).solution.0).collect();
        assert_eq!(accuracy(&qs, &rs).unwrap(), 1.0);
    }

    #[test]
    fn k1_at_temperature_zero_equals_pass1() {
        let m = tiny();
        let p = init(&m).unwrap();
        let qs = split_questions(&TaskConfig::default(), Split::Eval, 10);
        let s = EvalSettings { k: 1, temperature: 0.0, max_new_tokens: 16, seed: 1 };
        let e = evaluate(&p, &m, &qs, &s).unwrap();
        assert_eq!(e.avg_at_k, Some(e.pass_at_1));
    }

    #[test]
    fn guessing_a_uniform_answer_is_near_chance() {
        // a policy answering "#### r <eoa>" for a uniform r is right with
        // probability 1/m; check the scorer agrees on 700 questions
        let task = TaskConfig {
            eval_seeds: crate::task::SeedRange { start: 1 << 32, end: (1 << 32) + 700 },
            ..TaskConfig::default()
        };
        let qs = split_questions(&task, Split::Eval, 700);
        let mut rng = seeds::rng(5, Stream::Eval, &[]);
        let rs: Vec<Vec<usize>> = qs
            .iter()
            .map(|_| {
                use rand::Rng;
                vec![crate::task::TOK_ANSWER, rng.random_range(0..7), crate::task::TOK_EOA]
            })
            .collect();
        let acc = accuracy(&qs, &rs).unwrap();
        let half_width = 3.0 * ((1.0 / 7.0) * (6.0 / 7.0) / 700.0f64).sqrt();
        assert!((acc - 1.0 / 7.0).abs() < half_width, "acc {acc}");
    }
}
