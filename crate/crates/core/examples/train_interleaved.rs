//! One interleaved run on the small config, then a walk through its metrics
//! stream: every SFT phase with its buffer size, frozen count and the eval
//! score on either side of it.
//!
//!     cargo run --release --example train_interleaved -- [mode]

use mifo::experiment::{read_metrics, run, Event, ExperimentConfig, Mode};

fn main() -> mifo::Result<()> {
    let mode: Mode = std::env::args().nth(1).as_deref().unwrap_or("mifo").parse()?;
    let cfg = ExperimentConfig {
        mode,
        output_dir: std::env::temp_dir().join("mifo-examples").join(mode.as_str()),
        ..ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?
    };
    let summary = run(&cfg)?;
    println!("{} rl steps, {} sft phases -> {}", summary.rl_steps, summary.sft_phases, summary.metrics.display());

    let (records, _) = read_metrics(&summary.metrics)?;
    let score = |r: &mifo::experiment::MetricsRecord| {
        r.eval_scores.as_ref().and_then(|m| m.get("eval")).map(|s| s.pass_at_1)
    };
    for r in &records {
        match (r.event, r.tag.as_deref()) {
            (Some(Event::SftStart), _) => print!(
                "interval {:>2}: buffer {:>3}, frozen {:>2}",
                r.interval_index,
                r.buffer_size.unwrap_or(0),
                r.frozen_count.unwrap_or(0)
            ),
            (Some(Event::Eval), Some("before_sft")) => print!("pass@1 {:.3} -> ", score(r).unwrap_or(f64::NAN)),
            (Some(Event::Eval), Some("after_sft")) => println!("  after {:.3}", score(r).unwrap_or(f64::NAN)),
            _ => {}
        }
    }
    if let Some(f) = summary.final_eval {
        println!("final pass@1 {:.3} avg@{} {:.3}", f.pass_at_1, f.k, f.avg_at_k.unwrap_or(f64::NAN));
    }
    Ok(())
}
