//! Magnitude masks at several pruning ratios, global and per tensor, and
//! a sparse export round trip.

use metasd::model::{init_params, Backbone};
use metasd::prune::{compute_mask, export_sparse, load_sparse, sparsity_stats, MaskScope};

fn main() -> metasd::Result<()> {
    let p = init_params(Backbone::ComplEx, 8, 50, 5, 1, 1.0);
    let names = p.tensor_names();
    for gamma in [0.0, 0.3, 0.9] {
        for scope in [MaskScope::Global, MaskScope::PerTensor] {
            let m = compute_mask(&p, gamma, scope)?;
            let s = sparsity_stats(&m, &names);
            let per: Vec<String> = s
                .per_tensor
                .iter()
                .map(|t| format!("{} {:.3}", t.name, t.sparsity))
                .collect();
            println!(
                "gamma {gamma} {scope:?}: kept {}/{} ({})",
                m.kept(),
                p.param_count(),
                per.join(", ")
            );
        }
    }

    let mask = compute_mask(&p, 0.9, MaskScope::Global)?;
    let dir = std::env::temp_dir().join("metasd_prune_mask_example");
    std::fs::create_dir_all(&dir).map_err(|e| metasd::Error::io(&dir, e))?;
    let path = dir.join("student.msds");
    let nnz = export_sparse(&p, &mask, [0; 32], &path)?;
    let back = load_sparse(&path)?;
    let expect = p.masked(&mask).rounded_to_f32();
    assert_eq!(back.params.to_flat(), expect.to_flat());
    println!("exported {nnz} values to {} and read them back", path.display());
    Ok(())
}
