//! The importance ledger during a mifo run: per interval, the largest RL
//! updates, the decayed map and the tensors frozen for the SFT phase.
//!
//!     cargo run --release --example freeze_ledger -- [alpha]

use mifo::experiment::{base_policy, ExperimentConfig, LedgerConfig, Mode, Observer, PhaseView, Trainer};

struct Print;

impl Observer for Print {
    fn on_sft_start(&mut self, v: &PhaseView<'_>) {
        let (Some(deltas), Some(ledger), Some(mask)) = (v.deltas, v.ledger, v.mask) else {
            return;
        };
        let mut top: Vec<&(String, f64)> = deltas.iter().collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1));
        println!("interval {} ({} entries buffered)", v.interval, v.buffer.len());
        for (name, d) in top.iter().take(4) {
            let c = ledger.c.iter().find(|(n, _)| n == name).map_or(0.0, |x| x.1);
            println!("  {name:<22} delta {d:.4}  C {c:.4}");
        }
        println!("  frozen {}/{}: {}", mask.frozen_count(), mask.len(), mask.frozen_names().collect::<Vec<_>>().join(" "));
    }
}

fn main() -> mifo::Result<()> {
    let alpha: f64 = match std::env::args().nth(1) {
        Some(a) => a.parse().map_err(|_| mifo::Error::Invalid(format!("bad alpha `{a}`")))?,
        None => 0.5,
    };
    let small = ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?;
    let cfg = ExperimentConfig {
        mode: Mode::Mifo,
        ledger: LedgerConfig { alpha, ..small.ledger.clone() },
        output_dir: std::env::temp_dir().join("mifo-examples/ledger"),
        ..small
    };
    let base = base_policy(&cfg)?;
    let mut obs = Print;
    Trainer::new(cfg, base, Some(&mut obs))?.run()?;
    Ok(())
}
