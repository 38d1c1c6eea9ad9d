//! One full training step by hand: lookahead student, hypergradient from
//! a quiz batch, meta update of the teacher, then the actual update.

use metasd::graph::Triple;
use metasd::meta::{actual_train_step, hypergradient, meta_train_step, virtual_train_step, TrainConfig};
use metasd::model::{init_params, Backbone};
use metasd::optim::AdagradState;
use metasd::prune::{compute_mask, MaskScope};

fn main() -> metasd::Result<()> {
    let cfg = TrainConfig {
        dim: 6,
        init_scale: 0.3,
        gamma: 0.5,
        ..TrainConfig::default()
    };
    let mut teacher = init_params(Backbone::ComplEx, cfg.dim, 12, 3, 5, cfg.init_scale);
    let mask = compute_mask(&teacher, cfg.gamma, MaskScope::Global)?;
    let mut opt = AdagradState::new(&teacher, cfg.adagrad_epsilon);
    let batch = [Triple::new(0, 1, 2), Triple::new(4, 0, 5), Triple::new(7, 5, 3)];
    let quiz = [Triple::new(1, 1, 9), Triple::new(6, 2, 2)];

    let student = teacher.masked(&mask);
    let virt = virtual_train_step(&student, &teacher, &mask, &batch, &cfg)?;
    println!(
        "virtual student loss {:.5}, lookahead moved {} rows",
        virt.loss.total,
        virt.grad.row_count()
    );

    let meta = hypergradient(&student, &teacher, &mask, &batch, &quiz, &virt, &cfg)?;
    println!(
        "quiz CE {:.5}, |v| {:.3e}, |hypergradient| {:.3e}",
        meta.quiz_ce,
        meta.v_norm,
        meta.grad.norm()
    );

    let before = teacher.to_flat();
    meta_train_step(&mut teacher, &meta, &mut opt, &cfg)?;
    let moved = before.iter().zip(teacher.to_flat()).filter(|(a, b)| *a != b).count();
    println!("meta step changed {moved} teacher weights");

    let (s, t) = actual_train_step(&mut teacher, None, &mask, &batch, &mut opt, &cfg)?;
    println!("actual step: student loss {:.5}, teacher loss {:.5}", s.total, t.total);
    Ok(())
}
