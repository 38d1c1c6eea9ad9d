//! Scores one query with each backbone and checks the batched scorer
//! against the single-query one.

use metasd::graph::Triple;
use metasd::model::{init_params, score_all_tails, score_tails_batch, score_triple, Backbone};

fn main() -> metasd::Result<()> {
    let (e, r, dim) = (6, 2, 4);
    for backbone in [Backbone::ComplEx, Backbone::Cp, Backbone::Rescal] {
        let p = init_params(backbone, dim, e, r, 7, 0.5);
        let tails = score_all_tails(&p, None, 1, 0)?;
        let inverse = score_all_tails(&p, None, 1, r)?;
        let single = score_triple(&p, None, Triple::new(1, 0, 3))?;
        let batch = score_tails_batch(&p, None, &[(0, 1), (1, 0), (5, 3)])?;
        assert_eq!(batch.row(1).to_vec(), tails);
        println!(
            "{backbone:?}: {} params, tails(1, r0) = {:.4?}, inverse row = {:.4?}, s(1, r0, 3) = {single:.4}",
            p.param_count(),
            tails,
            inverse
        );
    }
    Ok(())
}
