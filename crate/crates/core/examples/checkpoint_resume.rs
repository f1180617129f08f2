//! Stops a run after a few RL steps, resumes it from the checkpoint and
//! checks the result against an uninterrupted run, bit for bit.
//!
//!     cargo run --release --example checkpoint_resume

use mifo::experiment::{base_policy, ExperimentConfig, Trainer};

fn main() -> mifo::Result<()> {
    let small = ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?;
    let root = std::env::temp_dir().join("mifo-examples/resume");
    let cfg = |dir: &str, stop: Option<usize>| ExperimentConfig {
        epochs: 1,
        output_dir: root.join(dir),
        max_rl_steps: stop,
        ..small.clone()
    };
    let base = base_policy(&small)?;

    let whole = Trainer::new(cfg("whole", None), base.clone(), None)?.run()?;

    let cut = Trainer::new(cfg("cut", Some(3)), base, None)?.run()?;
    println!("stopped after {} rl steps: {}", cut.rl_steps, cut.checkpoint.display());
    let rest = Trainer::resume(cfg("cut", None), &cut.checkpoint, None)?.run()?;

    let same_params = whole.params.bit_equal(&rest.params);
    let same_metrics = std::fs::read(&whole.metrics)? == std::fs::read(&rest.metrics)?;
    println!("params identical: {same_params}, metrics identical: {same_metrics}");
    Ok(())
}
