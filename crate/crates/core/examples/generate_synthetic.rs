//! Writes the synthetic graph as train/valid/test TSV files.
//!
//! cargo run --example generate_synthetic -- <out_dir> [seed]

use std::path::PathBuf;

use metasd::graph::DataStats;
use metasd::synth::{generate, SynthConfig};

fn main() -> metasd::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let ds = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    ds.write_dir(&out)?;
    let s = DataStats::compute(&ds, 100);
    println!(
        "{}: {} entities, {} relations, {}/{}/{} triples, {} relations under 100 train triples",
        out.display(),
        s.entities,
        s.relations,
        s.train,
        s.valid,
        s.test,
        s.long_tail_relations
    );
    Ok(())
}
