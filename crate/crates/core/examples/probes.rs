//! Trains a matched SFT/RL pair from the base policy and runs one probe on
//! it: grad-drop, prune, magnitude, selective-drop or dr.
//!
//!     cargo run --release --example probes -- prune

use mifo::experiment::{probe_command, ExperimentConfig, ProbeKind};

fn main() -> mifo::Result<()> {
    let kind: ProbeKind = std::env::args().nth(1).as_deref().unwrap_or("magnitude").parse()?;
    let small = ExperimentConfig::from_json(include_str!("../../../configs/small.json"))?;
    let cfg = ExperimentConfig {
        output_dir: std::env::temp_dir().join("mifo-examples/probes"),
        ..small
    };
    let report = probe_command(kind, &cfg, None, None)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}
