//! Trains mifo and interleave on the small config, scores both final
//! checkpoints on the train and eval splits, and writes CSV/SVG charts
//! of the two metrics streams.
//!
//!     cargo run --release --example eval_and_plot

use mifo::experiment::{
    emit_plots, evaluate, run, split_questions, Checkpoint, EvalSettings, ExperimentConfig, Mode,
};
use mifo::task::Split;

fn main() -> mifo::Result<()> {
    let small = ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?;
    let root = std::env::temp_dir().join("mifo-examples/plot");
    let mut streams = Vec::new();
    for mode in [Mode::Mifo, Mode::Interleave] {
        let cfg = ExperimentConfig {
            mode,
            output_dir: root.join(mode.as_str()),
            ..small.clone()
        };
        let s = run(&cfg)?;
        let c = Checkpoint::load(&s.checkpoint)?;
        let params = c.params()?;
        let settings = EvalSettings {
            k: 4,
            temperature: cfg.eval.temperature,
            max_new_tokens: cfg.grpo.max_new_tokens,
            seed: 1,
        };
        for split in [Split::Train, Split::Eval] {
            let qs = split_questions(&cfg.task, split, 64);
            let e = evaluate(&params, &cfg.model, &qs, &settings)?;
            println!(
                "{:<10} {split:<5} pass@1 {:.3} avg@4 {:.3} len {:.1}",
                mode.as_str(),
                e.pass_at_1,
                e.avg_at_k.unwrap_or(f64::NAN),
                e.mean_response_length
            );
        }
        streams.push(s.metrics);
    }
    let p = emit_plots(&streams, &root.join("plots"))?;
    for f in p.csv.iter().chain(&p.svg) {
        println!("wrote {}", f.display());
    }
    Ok(())
}
