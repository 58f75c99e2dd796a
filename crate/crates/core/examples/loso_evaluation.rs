//! Leave-one-section-out scores for the transfer model and both baselines.

use ramp_transfer::correction::{build_dataset, correct_all, PairingOptions};
use ramp_transfer::eval::{loso_cv, ModelSpec};
use ramp_transfer::synth::{Corpus, SynthConfig};
use ramp_transfer::transfer::TransferConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::build(&SynthConfig { seed: 4, n_sections: 5, weeks: 2, ..SynthConfig::default() })?;
    let (d, _) = build_dataset(&correct_all(&corpus.samples()), PairingOptions::default());
    let tcfg = TransferConfig { steps: 3, folds: 3, n_estimators: 20, ..TransferConfig::default() };
    let target = "After_ramp_flow";
    for spec in [ModelSpec::Transfer(tcfg), ModelSpec::source_only_like(&tcfg), ModelSpec::Knn { k: 5 }] {
        let folds = loso_cv(&d, target, &spec, 4)?;
        let cells: Vec<String> = folds.iter().map(|f| format!("{}={:.1}", f.section.as_str(), f.scores.rmse)).collect();
        let mean = folds.iter().map(|f| f.scores.rmse).sum::<f64>() / folds.len() as f64;
        println!("{} RMSE {}  mean {mean:.2}", spec.label(), cells.join(" "));
    }
    Ok(())
}
