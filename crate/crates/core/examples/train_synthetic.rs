//! Trains on the bundled synthetic graph and compares the full method with
//! plain mutual distillation under a frozen random mask.
//!
//! cargo run --release --example train_synthetic -- [epochs] [seed]

use std::time::Instant;

use metasd::config::apply_preset;
use metasd::meta::{train, PreparedData, TrainConfig};
use metasd::synth::{generate, SynthConfig};

fn main() -> metasd::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(100, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let ds = generate(&SynthConfig::default())?;
    let mut full = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    apply_preset(&mut full, "desk-synthetic")?;
    full.epochs = epochs;
    let mut plain = full.clone();
    apply_preset(&mut plain, "wo-prune-meta")?;
    for (name, cfg) in [("full", full), ("plain", plain)] {
        let data = PreparedData::new(&ds, &cfg)?;
        let t0 = Instant::now();
        let out = train(&data, &cfg)?;
        for r in out.metrics.iter().filter(|r| r.valid_student.is_some()) {
            println!(
                "{name} epoch {:>3}  ce S {:.4} T {:.4}  valid MRR S {:.4} T {:.4}  flips {}",
                r.epoch,
                r.student_loss["ce"],
                r.teacher_loss["ce"],
                r.valid_student.as_ref().unwrap().mrr,
                r.valid_teacher.as_ref().unwrap().mrr,
                r.mask_flips
            );
        }
        println!("{name}: {:.1}s", t0.elapsed().as_secs_f64());
    }
    Ok(())
}
