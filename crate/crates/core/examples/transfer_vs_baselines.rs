//! Held-out-section RMSE of the transfer model against source-only boosting
//! and KNN over a sweep of corpus seeds.
//!
//! `cargo run --release --example transfer_vs_baselines -- [seeds] [target]`

use ramp_transfer::correction::{build_dataset, correct_all, PairingOptions};
use ramp_transfer::eval::{run_fold, ModelSpec};
use ramp_transfer::synth::{Corpus, SynthConfig};
use ramp_transfer::transfer::TransferConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse())?;
    let target = args.next().unwrap_or_else(|| "After_up_mean_speed".into());
    let cfg = TransferConfig::default();
    let (mut vs_ada, mut vs_knn) = (0, 0);
    for seed in 0..seeds {
        let corpus = Corpus::build(&SynthConfig { seed, ..SynthConfig::default() })?;
        let (d, _) = build_dataset(&correct_all(&corpus.samples()), PairingOptions::default());
        let t = d.target_index(&target).ok_or("unknown target")?;
        let held = corpus.held_out();
        let score = |spec: &ModelSpec| run_fold(&d, t, &target, spec, held, seed).map(|f| f.scores.rmse);
        let tra = score(&ModelSpec::Transfer(cfg))?;
        let ada = score(&ModelSpec::source_only_like(&cfg))?;
        let knn = score(&ModelSpec::Knn { k: 5 })?;
        vs_ada += usize::from(tra <= ada);
        vs_knn += usize::from(tra <= knn);
        println!("seed {seed}: TRA {tra:.3} ADA {ada:.3} KNN {knn:.3}");
    }
    println!("transfer no worse than ADA on {vs_ada}/{seeds}, than KNN on {vs_knn}/{seeds}");
    Ok(())
}
