//! Student and teacher objectives on one batch, with their components.

use metasd::graph::Triple;
use metasd::loss::{student_loss, teacher_loss, LossConfig};
use metasd::model::{init_params, Backbone};
use metasd::prune::{compute_mask, MaskScope};

fn main() -> metasd::Result<()> {
    let teacher = init_params(Backbone::ComplEx, 8, 20, 4, 3, 0.3);
    let mask = compute_mask(&teacher, 0.5, MaskScope::Global)?;
    let student = teacher.masked(&mask);
    let batch = [Triple::new(0, 1, 2), Triple::new(3, 0, 4), Triple::new(5, 6, 7)];

    for (alpha, t) in [(0.5, 1.0), (0.5, 2.0), (1.0, 1.0)] {
        let cfg = LossConfig {
            alpha,
            beta: alpha,
            temperature: t,
            n3_weight: 0.01,
            ..LossConfig::default()
        };
        let s = student_loss(&batch, &student, &teacher, Some(&mask), &cfg)?;
        let (tv, tg) = teacher_loss(&batch, &student, &teacher, &cfg)?;
        println!("alpha {alpha} T {t}");
        println!(
            "  student {:?}  |grad| {:.4}",
            s.value.components,
            s.student_grad.norm()
        );
        println!("  teacher {:?}  |grad| {:.4}", tv.components, tg.norm());
    }
    Ok(())
}
