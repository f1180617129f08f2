//! Every training mode from the same base policy and seed, side by side.
//!
//!     cargo run --release --example compare_modes

use mifo::experiment::{base_policy, read_metrics, ExperimentConfig, Mode, Trainer};

fn main() -> mifo::Result<()> {
    let small = ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?;
    let base = base_policy(&small)?;
    println!("{:<14} {:>7} {:>7} {:>7} {:>10}", "mode", "pass@1", "avg@k", "phases", "mean drop");
    for mode in Mode::ALL {
        let cfg = ExperimentConfig {
            mode,
            output_dir: std::env::temp_dir().join("mifo-examples/compare").join(mode.as_str()),
            ..small.clone()
        }
        .resolved()?;
        let s = Trainer::new(cfg, base.clone(), None)?.run()?;
        let (records, _) = read_metrics(&s.metrics)?;

        // pass@1 lost across each SFT phase
        let mut drops = Vec::new();
        let mut before = None;
        for r in &records {
            let p1 = r.eval_scores.as_ref().and_then(|m| m.get("eval")).map(|e| e.pass_at_1);
            match r.tag.as_deref() {
                Some("before_sft") => before = p1,
                Some("after_sft") => drops.extend(before.take().zip(p1).map(|(b, a)| b - a)),
                _ => {}
            }
        }
        let drop = if drops.is_empty() {
            "-".to_string()
        } else {
            format!("{:.3}", drops.iter().sum::<f64>() / drops.len() as f64)
        };
        let f = s.final_eval.expect("finished run");
        println!(
            "{:<14} {:>7.3} {:>7.3} {:>7} {:>10}",
            mode.as_str(),
            f.pass_at_1,
            f.avg_at_k.unwrap_or(f64::NAN),
            s.sft_phases,
            drop
        );
    }
    Ok(())
}
