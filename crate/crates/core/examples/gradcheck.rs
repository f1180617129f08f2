//! Central-difference check of the SFT loss gradient on a tiny model, per
//! named tensor.
//!
//!     cargo run --release --example gradcheck

use mifo::engine::{finite_diff_check, Tape};
use mifo::model::{init, Bound, ModelConfig};
use mifo::sft::sft_loss_on;
use mifo::task::{generate_question, teacher_solve, TaskConfig, ALPHABET_SIZE};

fn main() -> mifo::Result<()> {
    let m = ModelConfig {
        vocab_size: ALPHABET_SIZE,
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        max_seq_len: 32,
        init_seed: 0,
    };
    let p = init(&m)?;
    let q = generate_question(&TaskConfig::default(), 3);
    let sol = teacher_solve(&q).solution;
    let mask: Vec<bool> = (0..sol.len()).map(|i| i % 2 == 0).collect();
    let report = finite_diff_check(
        |t: &mut Tape, v| sft_loss_on(t, &Bound::from_vars(&p, v), &m, &q.prompt, &sol, &mask),
        &p,
        1e-5,
        1e-4,
    )?;
    for (name, leaf) in &report.leaves {
        println!("{name:<22} max rel err {:.2e}", leaf.max_rel_err);
    }
    println!("passed: {}", report.passed());
    Ok(())
}
