//! Runs every stage through the library entry points the CLI uses, on a
//! small synthetic corpus in a scratch directory.

use ramp_transfer::pipeline::{self, RunConfig};
use ramp_transfer::synth::SynthConfig;
use ramp_transfer::transfer::TransferConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("ramp_transfer_example");
    let cfg = RunConfig {
        seed: 11,
        out: out.clone(),
        synth: SynthConfig { n_sections: 4, weeks: 2, ..SynthConfig::default() },
        transfer: TransferConfig { steps: 2, folds: 2, n_estimators: 10, ..TransferConfig::default() },
        targets: vec!["After_up_mean_speed".into(), "After_up_flow".into()],
        ..RunConfig::default()
    };
    cfg.validate()?;
    println!("{}", pipeline::synth(&cfg)?);
    for stage in [
        pipeline::ingest,
        pipeline::correct,
        pipeline::pair,
        pipeline::ridge,
        pipeline::train,
        pipeline::predict,
        pipeline::evaluate,
        pipeline::report,
    ] {
        println!("{}", stage(&cfg)?);
    }
    println!("{}", std::fs::read_to_string(out.join("report").join("rmse.csv"))?);
    Ok(())
}
