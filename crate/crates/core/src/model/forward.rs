use std::collections::HashMap;

use super::ModelConfig;
use crate::engine::{RealArray, Tape, Var};
use crate::error::{Error, Result};
use crate::params::NamedParams;

/// Model parameters recorded as leaves on one tape.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &NamedParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, value)| (name.to_string(), tape.leaf(name, value.clone())))
            .collect();
        Self { vars }
    }

    pub fn from_vars(params: &NamedParams, vars: &[Var]) -> Self {
        Self {
            vars: params
                .names()
                .map(String::from)
                .zip(vars.iter().copied())
                .collect(),
        }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{name}`")))
    }
}

/// Causal forward pass: logits `[len × V]`.
pub fn forward_logits_on(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &[usize],
) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if t > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.embedding(p.get("embed.token")?, tokens)?;
    let pos = tape.embedding(p.get("embed.position")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    for i in 0..cfg.n_layers {
        let name = |c: &str| format!("layer.{i}.{c}");
        let h = tape.layer_norm(x, p.get(&name("ln1.gain"))?, p.get(&name("ln1.bias"))?)?;
        let q = tape.matmul(h, p.get(&name("attn.wq"))?)?;
        let k = tape.matmul(h, p.get(&name("attn.wk"))?)?;
        let v = tape.matmul(h, p.get(&name("attn.wv"))?)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let o = tape.matmul(cat, p.get(&name("attn.wo"))?)?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm(x, p.get(&name("ln2.gain"))?, p.get(&name("ln2.bias"))?)?;
        let u = tape.matmul(h, p.get(&name("mlp.w1"))?)?;
        let u = tape.add_row(u, p.get(&name("mlp.b1"))?)?;
        let u = tape.gelu(u)?;
        let u = tape.matmul(u, p.get(&name("mlp.w2"))?)?;
        let u = tape.add_row(u, p.get(&name("mlp.b2"))?)?;
        x = tape.add(x, u)?;
    }
    let h = tape.layer_norm(x, p.get("head.ln.gain")?, p.get("head.ln.bias")?)?;
    tape.matmul(h, p.get("head.proj")?)
}

/// Logits for `tokens` without keeping a tape around.
pub fn forward_logits(params: &NamedParams, cfg: &ModelConfig, tokens: &[usize]) -> Result<RealArray> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let logits = forward_logits_on(&mut tape, &bound, cfg, tokens)?;
    Ok(tape.value(logits)?.clone())
}

/// Per-response-token quantities recorded on a tape.
pub struct Scored {
    /// `log π(s_t | q, s_<t)` for each response token, shape `[R]`.
    pub log_probs: Var,
    /// `H_t` of the predictive distribution at each response position, `[R]`.
    pub entropies: Option<Var>,
}

/// Scores `response` given `prompt` with one forward pass over
/// `prompt ++ response[..R-1]`.
pub fn score_on(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    prompt: &[usize],
    response: &[usize],
    with_entropy: bool,
) -> Result<Scored> {
    if response.is_empty() {
        return Err(Error::Invalid("empty response".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&response[..response.len() - 1]);
    let logits = forward_logits_on(tape, p, cfg, &input)?;
    let lp = tape.log_softmax(logits)?;
    let first = prompt.len() - 1;
    let pairs: Vec<(usize, usize)> = response
        .iter()
        .enumerate()
        .map(|(j, &tok)| (first + j, tok))
        .collect();
    let log_probs = tape.gather(lp, pairs)?;
    let entropies = if with_entropy {
        let probs = tape.softmax(logits)?;
        let plogp = tape.mul(probs, lp)?;
        let rows = tape.sum_rows(plogp)?;
        let h = tape.scale(rows, -1.0)?;
        let mask: Vec<bool> = (0..input.len()).map(|r| r >= first).collect();
        Some(if first == 0 { h } else { tape.masked_select(h, mask)? })
    } else {
        None
    };
    Ok(Scored {
        log_probs,
        entropies,
    })
}

pub fn token_log_probs(
    params: &NamedParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    response: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let s = score_on(&mut tape, &bound, cfg, prompt, response, false)?;
    Ok(tape.value(s.log_probs)?.data().to_vec())
}

pub fn token_entropies(
    params: &NamedParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    response: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let s = score_on(&mut tape, &bound, cfg, prompt, response, true)?;
    Ok(tape.value(s.entropies.expect("requested"))?.data().to_vec())
}
