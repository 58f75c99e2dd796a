//! Ridge regression on standardized inputs and threshold-based variable
//! selection, on a corpus whose after values are linear in the inputs.

use ramp_transfer::correction::{build_dataset, correct_all, PairingOptions};
use ramp_transfer::ridge::{averaged_fit, filter_variables, RidgeConfig, Thresholds};
use ramp_transfer::synth::{Corpus, Regime, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::build(&SynthConfig { seed: 2, regime: Regime::Linear, ..SynthConfig::default() })?;
    let (d, _) = build_dataset(&correct_all(&corpus.samples()), PairingOptions::default());
    let truth = corpus.manifest().linear_truth.expect("linear regime records its truth");
    let cfg = RidgeConfig { runs: 3, ..RidgeConfig::default() };
    let coeffs = d
        .target_names()
        .iter()
        .map(|t| averaged_fit(&d, t, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let sel = filter_variables(&coeffs, &Thresholds::default())?;
    for (target, s) in &sel.targets {
        let true_vars: Vec<&String> = truth.effects[target].iter().filter(|(_, e)| **e != 0.0).map(|(n, _)| n).collect();
        println!("{target} (threshold {}):", s.threshold);
        println!("  selected {:?}", s.selected);
        println!("  true     {true_vars:?}");
    }
    Ok(())
}
