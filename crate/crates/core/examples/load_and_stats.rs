//! Loads a dataset directory and prints its statistics.
//!
//! cargo run --example load_and_stats -- <dataset_dir> [long_tail_threshold]

use std::path::PathBuf;

use metasd::graph::{augment_reciprocal, relation_counts, DataStats, Dataset};

fn main() -> metasd::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: load_and_stats <dataset_dir> [threshold]"));
    let threshold: usize = args.next().map_or(1000, |s| s.parse().expect("threshold"));

    let ds = Dataset::load_dir(&dir, false)?;
    let stats = DataStats::compute(&ds, threshold);
    println!("{}", serde_json::to_string_pretty(&stats)?);

    let counts = relation_counts(&ds.train, ds.relation_count());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&r| std::cmp::Reverse(counts[r]));
    println!("most frequent relations:");
    for &r in order.iter().take(5) {
        println!("  {:>6}  {}", counts[r], ds.vocab.relation_name(r).unwrap_or("?"));
    }
    let aug = augment_reciprocal(&ds.train, ds.relation_count());
    println!(
        "reciprocal training stream: {} triples over {} relation rows",
        aug.len(),
        2 * ds.relation_count()
    );
    println!("digest {}", ds.digest());
    Ok(())
}
