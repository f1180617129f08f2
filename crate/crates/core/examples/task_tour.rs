//! The synthetic task: a few questions per split, their teacher traces,
//! and how the reward treats a handful of candidate responses.
//!
//!     cargo run --example task_tour

use mifo::task::{generate_question, parse_text, render, reward, teacher_solve, Split, TaskConfig};

fn main() -> mifo::Result<()> {
    let task = TaskConfig::default();
    for split in [Split::Train, Split::Eval] {
        println!("{split}:");
        for i in 0..3 {
            let q = generate_question(&task, task.seeds(split).nth(i));
            let d = teacher_solve(&q);
            println!("  {}  =>  {}", render(&q.prompt), render(&d.solution));
        }
    }

    let q = generate_question(&task, 0);
    let right = teacher_solve(&q).solution;
    let wrong_answer = format!("#### {} <eoa>", (q.answer.parse::<u64>().unwrap_or(0) + 1) % task.modulus);
    println!("\nrewards for {}", render(&q.prompt));
    for text in [render(&right), format!("#### {} <eoa>", q.answer), wrong_answer, "1 + 2".to_string()] {
        let o = parse_text(&text)?;
        println!("  {:>3}  {text}", reward(&o, &q));
    }
    Ok(())
}
