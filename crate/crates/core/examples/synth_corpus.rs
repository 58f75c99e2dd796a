//! Generates a small synthetic corpus and writes it to a directory.
//!
//! `cargo run --example synth_corpus -- /tmp/corpus`

use ramp_transfer::synth::{Corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synth_corpus_out".into());
    let cfg = SynthConfig { seed: 7, n_sections: 4, weeks: 2, ..SynthConfig::default() };
    let corpus = Corpus::build(&cfg)?;
    let counts = corpus.write_all(dir.as_ref())?;
    let m = corpus.manifest();
    println!("{} loop rows, {} probe rows in {dir}", counts.loop_rows, counts.probe_rows);
    println!("held-out section {} (shift {})", m.held_out_section.as_str(), m.moderate_shift);
    for s in &m.sections {
        println!(
            "  {}: lanes {}/{}/{}, free flow {:.1} mph, metering effect {:.2}",
            s.section.as_str(),
            s.lanes_up,
            s.lanes_ramp,
            s.lanes_down,
            s.free_flow_speed,
            s.metering_effect
        );
    }
    Ok(())
}
