//! Grid search over tree depth and ensemble size, capped by a budget.

use ramp_transfer::correction::{build_dataset, correct_all, PairingOptions};
use ramp_transfer::eval::{grid_search, GridModel, GridSpec};
use ramp_transfer::synth::{Corpus, SynthConfig};
use ramp_transfer::transfer::TransferConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::build(&SynthConfig { seed: 5, n_sections: 4, weeks: 2, ..SynthConfig::default() })?;
    let (d, _) = build_dataset(&correct_all(&corpus.samples()), PairingOptions::default());
    let grid = GridSpec { max_depth: vec![2, 4, 6], n_estimators: vec![10, 20], ..GridSpec::default() };
    let base = TransferConfig::default();
    for model in [GridModel::SourceOnly, GridModel::Knn] {
        let res = grid_search(&d, "After_up_occupancy", model, &grid, &base, 5, Some(4))?;
        for r in &res.rows {
            println!(
                "{} depth {:?} trees {:?} k {:?}: MAE {:.3}",
                res.model, r.max_depth, r.n_estimators, r.n_neighbors, r.mean_mae
            );
        }
        println!("  best: {:?}", res.best_row().spec);
    }
    Ok(())
}
