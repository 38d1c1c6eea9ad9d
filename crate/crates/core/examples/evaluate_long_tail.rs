//! Trains a small model on the synthetic graph, then reports filtered
//! metrics overall and on its rarest relations.
//!
//! cargo run --release --example evaluate_long_tail -- [epochs] [threshold]

use metasd::config::apply_preset;
use metasd::eval::long_tail_report;
use metasd::graph::DataStats;
use metasd::meta::{train, PreparedData, TrainConfig};
use metasd::synth::{generate, SynthConfig};

fn main() -> metasd::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(20, |s| s.parse().expect("epochs"));
    let threshold: usize = args.next().map_or(100, |s| s.parse().expect("threshold"));

    let ds = generate(&SynthConfig::default())?;
    let stats = DataStats::compute(&ds, threshold);
    println!(
        "{} relations have fewer than {threshold} training triples",
        stats.long_tail_relations
    );

    let mut cfg = TrainConfig::default();
    apply_preset(&mut cfg, "desk-synthetic")?;
    cfg.epochs = epochs;
    cfg.eval_every = 0;
    let data = PreparedData::new(&ds, &cfg)?;
    let out = train(&data, &cfg)?;
    let rep = long_tail_report(
        &out.teacher,
        &out.mask,
        "test",
        &data.test,
        &data.filter,
        &data.train_original,
        threshold,
    )?;
    for r in [&rep.teacher, &rep.student] {
        println!("{r}");
    }
    Ok(())
}
