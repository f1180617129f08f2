//! Incremental (cached keys/values) forward pass used for sampling.
//!
//! Mirrors the tape forward operation for operation with the same kernels,
//! so logits agree with [`super::forward_logits`] row for row.

use rand::Rng;

use super::ModelConfig;
use crate::engine::kernels;
use crate::error::{Error, Result};
use crate::params::NamedParams;
use crate::seeds;
use crate::task::TOK_EOA;

struct LayerRefs<'a> {
    ln1_g: &'a [f64],
    ln1_b: &'a [f64],
    wq: &'a [f64],
    wk: &'a [f64],
    wv: &'a [f64],
    wo: &'a [f64],
    ln2_g: &'a [f64],
    ln2_b: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Stateful single-sequence decoder.
pub struct Decoder<'a> {
    cfg: &'a ModelConfig,
    tok: &'a [f64],
    pos_emb: &'a [f64],
    layers: Vec<LayerRefs<'a>>,
    head_g: &'a [f64],
    head_b: &'a [f64],
    head_w: &'a [f64],
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a NamedParams, cfg: &'a ModelConfig) -> Result<Self> {
        let get = |n: &str| params.require(n).map(|a| a.data());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let g = |c: &str| get(&format!("layer.{i}.{c}"));
            layers.push(LayerRefs {
                ln1_g: g("ln1.gain")?,
                ln1_b: g("ln1.bias")?,
                wq: g("attn.wq")?,
                wk: g("attn.wk")?,
                wv: g("attn.wv")?,
                wo: g("attn.wo")?,
                ln2_g: g("ln2.gain")?,
                ln2_b: g("ln2.bias")?,
                w1: g("mlp.w1")?,
                b1: g("mlp.b1")?,
                w2: g("mlp.w2")?,
                b2: g("mlp.b2")?,
            });
        }
        Ok(Self {
            cfg,
            tok: get("embed.token")?,
            pos_emb: get("embed.position")?,
            layers,
            head_g: get("head.ln.gain")?,
            head_b: get("head.ln.bias")?,
            head_w: get("head.proj")?,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff());
        if self.pos >= cfg.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if token >= v {
            return Err(Error::Invalid(format!("token id {token} out of range {v}")));
        }
        let t = self.pos;
        let mut x: Vec<f64> = self.tok[token * d..(token + 1) * d]
            .iter()
            .zip(&self.pos_emb[t * d..(t + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = vec![0.0; d];
        for (li, l) in self.layers.iter().enumerate() {
            kernels::layer_norm_row(&x, l.ln1_g, l.ln1_b, &mut h);
            let q = kernels::matmul(&h, l.wq, 1, d, d);
            let k = kernels::matmul(&h, l.wk, 1, d, d);
            let val = kernels::matmul(&h, l.wv, 1, d, d);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&val);
            let keys = &self.keys[li];
            let values = &self.values[li];
            let n = t + 1;
            let mut cat = vec![0.0; d];
            let mut scores = vec![0.0; n];
            let mut att = vec![0.0; n];
            let mut vh = vec![0.0; n * dh];
            for hd in 0..cfg.n_heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                for j in 0..n {
                    scores[j] = kernels::dot(qh, &keys[j * d + off..j * d + off + dh]) * scale;
                }
                kernels::softmax_row(&scores, &mut att, n);
                for j in 0..n {
                    vh[j * dh..(j + 1) * dh].copy_from_slice(&values[j * d + off..j * d + off + dh]);
                }
                let out = kernels::matmul(&att, &vh, 1, n, dh);
                cat[off..off + dh].copy_from_slice(&out);
            }
            let o = kernels::matmul(&cat, l.wo, 1, d, d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            kernels::layer_norm_row(&x, l.ln2_g, l.ln2_b, &mut h);
            let mut u = kernels::matmul(&h, l.w1, 1, d, f);
            for (ui, bi) in u.iter_mut().zip(l.b1) {
                *ui += bi;
                *ui = kernels::gelu(*ui);
            }
            let mut w = kernels::matmul(&u, l.w2, 1, f, d);
            for (wi, bi) in w.iter_mut().zip(l.b2) {
                *wi += bi;
            }
            for (xi, wi) in x.iter_mut().zip(&w) {
                *xi += wi;
            }
        }
        kernels::layer_norm_row(&x, self.head_g, self.head_b, &mut h);
        self.pos += 1;
        Ok(kernels::matmul(&h, self.head_w, 1, d, v))
    }
}

/// A sampled response plus the sampling policy's per-token log-probabilities
/// (untempered, i.e. `log π(o_t | q, o_<t)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Samples up to `max_new` tokens after `prompt`, stopping after the
/// end-of-answer token. `temperature == 0` decodes greedily.
pub fn generate<R: Rng>(
    params: &NamedParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    temperature: f64,
    max_new: usize,
    rng: &mut R,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature {temperature}")));
    }
    let mut out = Generation {
        tokens: Vec::new(),
        log_probs: Vec::new(),
    };
    // The last sampled token is never fed back, hence the +1.
    let budget = max_new.min((cfg.max_seq_len + 1).saturating_sub(prompt.len()));
    if budget == 0 {
        return Ok(out);
    }
    let mut dec = Decoder::new(params, cfg)?;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut lp = vec![0.0; logits.len()];
    let mut probs = vec![0.0; logits.len()];
    loop {
        kernels::log_softmax_row(&logits, &mut lp);
        let next = if temperature == 0.0 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            kernels::softmax_row(&scaled, &mut probs, scaled.len());
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        out.tokens.push(next);
        out.log_probs.push(lp[next]);
        if next == TOK_EOA || out.tokens.len() >= budget {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(out)
}

/// Seeded sampling; identical seeds give identical responses.
pub fn sample_response(
    params: &NamedParams,
    cfg: &ModelConfig,
    prompt: &[usize],
    temperature: f64,
    max_new: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = seeds::rng(rng_seed, seeds::Stream::Rollout, &[]);
    Ok(generate(params, cfg, prompt, temperature, max_new, &mut rng)?.tokens)
}
