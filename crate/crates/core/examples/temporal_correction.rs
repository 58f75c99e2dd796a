//! Averages each time-of-week slot over the observed weeks and pairs the
//! before and after profiles into feature rows.

use ramp_transfer::correction::{build_dataset, correct_all, PairingOptions};
use ramp_transfer::synth::{Corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = Corpus::build(&SynthConfig { seed: 1, n_sections: 3, weeks: 4, ..SynthConfig::default() })?;
    let samples = corpus.samples();
    let profiles = correct_all(&samples);
    println!("{} samples -> {} profiles", samples.len(), profiles.len());
    let p = &profiles[0];
    for (key, e) in p.entries.iter().take(4) {
        println!(
            "  {} {:?} {:?} {:?}: speed {:.2} over {} weeks",
            p.section.as_str(),
            p.position,
            p.period,
            key,
            e.mean_speed,
            e.weeks_used
        );
    }
    let (d, dropped) = build_dataset(&profiles, PairingOptions::default());
    println!("{} feature rows ({dropped} keys dropped), {} inputs, {} targets", d.len(), d.input_names().len(), d.target_names().len());
    Ok(())
}
