//! Saves a checkpoint mid-run, resumes from it and checks that the result
//! matches an uninterrupted run bit for bit.

use metasd::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use metasd::config::apply_preset;
use metasd::meta::{PreparedData, TrainConfig, Trainer};
use metasd::synth::{generate, SynthConfig};

fn main() -> metasd::Result<()> {
    let ds = generate(&SynthConfig::default())?;
    let mut cfg = TrainConfig::default();
    apply_preset(&mut cfg, "toy-smoke")?;
    cfg.epochs = 4;
    let data = PreparedData::new(&ds, &cfg)?;

    let mut straight = Trainer::new(cfg.clone(), &data)?;
    straight.run(|_, _| Ok(()))?;

    let path = std::env::temp_dir().join("metasd_resume_example.msdk");
    let mut first = Trainer::new(cfg.clone(), &data)?;
    for _ in 0..2 {
        first.run_epoch()?;
    }
    save_checkpoint(
        &path,
        &Checkpoint {
            config: cfg.clone(),
            state: first.state().clone(),
        },
    )?;
    let ck = load_checkpoint(&path)?;
    println!("checkpoint at epoch {}, step {}", ck.state.epoch, ck.state.global_step);
    let mut resumed = Trainer::resume(ck.config, &data, ck.state)?;
    resumed.run(|_, _| Ok(()))?;

    let same = straight.state().teacher.to_flat() == resumed.state().teacher.to_flat()
        && straight.state().mask == resumed.state().mask;
    println!("resumed run identical to straight run: {same}");
    assert!(same);
    Ok(())
}
