//! Which solution tokens carry SFT loss under high-entropy selection.
//! Selected tokens print in brackets, with the policy's entropy at each one.
//!
//!     cargo run --release --example entropy_mask -- [rho]

use mifo::experiment::{base_policy, ExperimentConfig};
use mifo::model::token_entropies;
use mifo::sft::select_high_entropy;
use mifo::task::{generate_question, render, teacher_solve, token_symbol};

fn main() -> mifo::Result<()> {
    let rho: f64 = match std::env::args().nth(1) {
        Some(r) => r.parse().map_err(|_| mifo::Error::Invalid(format!("bad rho `{r}`")))?,
        None => 0.2,
    };
    let cfg = ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?;
    let params = base_policy(&cfg)?;
    for seed in 0..6 {
        let q = generate_question(&cfg.task, cfg.task.train_seeds.nth(seed));
        let sol = teacher_solve(&q).solution;
        let h = token_entropies(&params, &cfg.model, &q.prompt, &sol)?;
        let (mask, threshold) = select_high_entropy(&h, rho)?;
        let shown: Vec<String> = sol
            .iter()
            .zip(&mask)
            .zip(&h)
            .map(|((&t, &m), e)| {
                let s = token_symbol(t);
                if m { format!("[{s}:{e:.2}]") } else { s.to_string() }
            })
            .collect();
        println!("{}", render(&q.prompt));
        println!("  {}  (threshold {threshold:.3})", shown.join(" "));
    }
    Ok(())
}
