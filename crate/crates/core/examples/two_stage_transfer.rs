//! Fits a two-stage transfer model from the source sections to the held-out
//! section's before inputs, then scores it on that section's after values.

use ramp_transfer::correction::{build_dataset, correct_all, PairingOptions};
use ramp_transfer::eval::rmse;
use ramp_transfer::synth::{Corpus, SynthConfig};
use ramp_transfer::transfer::{two_stage_fit, TransferConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::build(&SynthConfig { seed: 3, n_sections: 6, ..SynthConfig::default() })?;
    let (d, _) = build_dataset(&correct_all(&corpus.samples()), PairingOptions::default());
    let held = corpus.held_out().clone();
    let source = d.filter(|r| r.section != held);
    let target = d.filter(|r| r.section == held);
    let name = "After_up_mean_speed";
    let cfg = TransferConfig { steps: 5, n_estimators: 30, ..TransferConfig::default() };
    let model = two_stage_fit(
        name,
        d.input_names(),
        &source.input_rows(),
        &source.target_column(name)?,
        &target.input_rows(),
        &cfg,
    )?;
    println!(
        "{} source rows, {} substitute rows, step {} chosen, CV errors {:?}",
        model.source_rows,
        model.substitute_rows,
        model.best_step,
        model.step_errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>()
    );
    let pred = model.predict(d.input_names(), &target.input_rows())?;
    println!("held-out {} RMSE {:.3} mph", held.as_str(), rmse(&target.target_column(name)?, &pred)?);
    Ok(())
}
