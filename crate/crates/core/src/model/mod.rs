//! Tiny decoder-only transformer policy.
//!
//! # Parameter names
//!
//! Names are the unit of importance accounting and freezing, so the scheme
//! is part of the public contract. In iteration (canonical) order:
//!
//! ```text
//! embed.token          [V, d]
//! embed.position       [max_seq_len, d]
//! layer.<i>.ln1.gain   [d]        layer.<i>.ln1.bias  [d]
//! layer.<i>.attn.wq    [d, d]     layer.<i>.attn.wk   [d, d]
//! layer.<i>.attn.wv    [d, d]     layer.<i>.attn.wo   [d, d]
//! layer.<i>.ln2.gain   [d]        layer.<i>.ln2.bias  [d]
//! layer.<i>.mlp.w1     [d, 4d]    layer.<i>.mlp.b1    [4d]
//! layer.<i>.mlp.w2     [4d, d]    layer.<i>.mlp.b2    [d]
//! head.ln.gain         [d]        head.ln.bias        [d]
//! head.proj            [d, V]
//! ```
//!
//! giving `12 · n_layers + 5` named parameters. Position embeddings are
//! learned and absolute; embedding and output projection are untied.

mod config;
mod decoder;
mod forward;

pub use config::ModelConfig;
pub use decoder::{generate, sample_response, Decoder, Generation};
pub use forward::{
    forward_logits, forward_logits_on, score_on, token_entropies, token_log_probs, Bound, Scored,
};

use rand_distr::{Distribution, Normal};

use crate::engine::RealArray;
use crate::error::Result;
use crate::params::NamedParams;
use crate::seeds;

/// Names in canonical order for `cfg`.
pub fn param_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embed.token".to_string(), "embed.position".to_string()];
    for i in 0..cfg.n_layers {
        for c in [
            "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain",
            "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
        ] {
            names.push(format!("layer.{i}.{c}"));
        }
    }
    names.extend(["head.ln.gain", "head.ln.bias", "head.proj"].map(String::from));
    names
}

/// Layer group of a parameter name: `embed`, `layer.<i>` or `head`.
pub fn layer_of(name: &str) -> &str {
    if let Some(rest) = name.strip_prefix("layer.") {
        let end = rest.find('.').map_or(name.len(), |p| "layer.".len() + p);
        &name[..end]
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

/// Ordered layer groups covering all names of `cfg`.
pub fn layer_groups(cfg: &ModelConfig) -> Vec<(String, Vec<String>)> {
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    for name in param_names(cfg) {
        let g = layer_of(&name).to_string();
        match groups.last_mut() {
            Some((last, members)) if *last == g => members.push(name),
            _ => groups.push((g, vec![name])),
        }
    }
    groups
}

fn shape_of(cfg: &ModelConfig, name: &str) -> Vec<usize> {
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff());
    let leaf = name.rsplit_once('.').map_or(name, |(_, l)| l);
    match name {
        "embed.token" => vec![v, d],
        "embed.position" => vec![cfg.max_seq_len, d],
        "head.proj" => vec![d, v],
        _ if name.ends_with("mlp.w1") => vec![d, f],
        _ if name.ends_with("mlp.b1") => vec![f],
        _ if name.ends_with("mlp.w2") => vec![f, d],
        _ if leaf.starts_with('w') => vec![d, d],
        _ => vec![d],
    }
}

/// Deterministic initialization: normal weights scaled by `1/sqrt(fan_in)`
/// (residual output projections further by `1/sqrt(2·n_layers)`),
/// embeddings with std 0.1, unit layer-norm gains and zero biases.
pub fn init(cfg: &ModelConfig) -> Result<NamedParams> {
    cfg.validate()?;
    let mut params = NamedParams::new();
    let residual = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
    for (k, name) in param_names(cfg).into_iter().enumerate() {
        let shape = shape_of(cfg, &name);
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with("bias") || name.contains(".b") {
            vec![0.0; n]
        } else {
            let std = if name.starts_with("embed") {
                0.1
            } else {
                let fan_in = shape[0] as f64;
                let s = 1.0 / fan_in.sqrt();
                if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    s * residual
                } else {
                    s
                }
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut rng = seeds::rng(cfg.init_seed, seeds::Stream::Init, &[k as u64]);
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        params.insert(name, RealArray::new(shape, data)?);
    }
    Ok(params)
}
