//! Small synthetic knowledge graphs with planted relational structure.
//!
//! A hidden ComplEx model of small latent dimension scores every triple;
//! each relation keeps, for every head, its top `multiplicity` tails under
//! that model. Relation frequencies follow a Zipf law, so the tail of the
//! distribution gives long-tail relations, and a small fraction of
//! uniformly random triples is mixed in as noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, DedupReport, Triple, Vocab};
use crate::model::{init_params, score_all_tails, Backbone};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    /// Complex dimension of the hidden scoring model.
    pub latent_dim: usize,
    /// Target number of distinct triples before splitting.
    pub triples: usize,
    pub zipf_exponent: f64,
    /// Each relation keeps between 1 and this many tails per head.
    pub max_multiplicity: usize,
    /// Fraction of triples replaced by uniformly random ones.
    pub noise: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 150,
            relations: 40,
            latent_dim: 4,
            triples: 5556,
            zipf_exponent: 0.8,
            max_multiplicity: 3,
            noise: 0.02,
            valid_fraction: 0.05,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.entities < 2 || self.relations == 0 || self.latent_dim == 0 {
            return bad("need at least 2 entities, 1 relation and latent_dim >= 1");
        }
        if self.max_multiplicity == 0 || self.max_multiplicity >= self.entities {
            return bad("max_multiplicity must lie in [1, entities)");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1)");
        }
        if !(self.valid_fraction >= 0.0 && self.test_fraction >= 0.0 && self.valid_fraction + self.test_fraction < 1.0)
        {
            return bad("valid_fraction + test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Splits `total` proportionally to `weights`, capping each share at its
/// capacity and handing the overflow to the uncapped relations.
fn zipf_quotas(weights: &[f64], caps: &[usize], total: usize) -> Vec<usize> {
    let mut quota = vec![0usize; weights.len()];
    let mut fixed = vec![false; weights.len()];
    let mut remaining = total;
    loop {
        let wsum: f64 = (0..weights.len()).filter(|&r| !fixed[r]).map(|r| weights[r]).sum();
        let mut capped = false;
        for r in 0..weights.len() {
            if !fixed[r] && remaining as f64 * weights[r] / wsum >= caps[r] as f64 {
                quota[r] = caps[r];
                fixed[r] = true;
                remaining = remaining.saturating_sub(caps[r]);
                capped = true;
            }
        }
        if !capped || fixed.iter().all(|&f| f) {
            break;
        }
    }
    let wsum: f64 = (0..weights.len()).filter(|&r| !fixed[r]).map(|r| weights[r]).sum();
    for r in 0..weights.len() {
        if !fixed[r] {
            quota[r] = ((remaining as f64 * weights[r] / wsum).round() as usize).clamp(1, caps[r]);
        }
    }
    quota
}

/// Generates a dataset; entities are named `e<id>`, relations `r<id>`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = init_params(
        Backbone::ComplEx,
        cfg.latent_dim,
        cfg.entities,
        cfg.relations,
        rng.random(),
        1.0,
    );
    let multiplicity: Vec<usize> = (0..cfg.relations)
        .map(|_| rng.random_range(1..=cfg.max_multiplicity))
        .collect();

    let weights: Vec<f64> = (0..cfg.relations)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let clean = ((1.0 - cfg.noise) * cfg.triples as f64).round() as usize;
    let caps: Vec<usize> = multiplicity.iter().map(|m| cfg.entities * m).collect();
    let quotas = zipf_quotas(&weights, &caps, clean);

    let mut all = Vec::with_capacity(cfg.triples);
    for r in 0..cfg.relations {
        let mut pool = Vec::with_capacity(caps[r]);
        for h in 0..cfg.entities {
            let scores = score_all_tails(&hidden, None, h, r)?;
            let mut order: Vec<usize> = (0..cfg.entities).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            pool.extend(order[..multiplicity[r]].iter().map(|&t| Triple::new(h, r, t)));
        }
        pool.shuffle(&mut rng);
        pool.truncate(quotas[r]);
        all.extend(pool);
    }
    let mut seen: std::collections::HashSet<Triple> = all.iter().copied().collect();
    let target = all.len() + cfg.triples.saturating_sub(clean);
    let mut attempts = 0;
    while all.len() < target && attempts < 100 * cfg.triples {
        attempts += 1;
        let t = Triple::new(
            rng.random_range(0..cfg.entities),
            rng.random_range(0..cfg.relations),
            rng.random_range(0..cfg.entities),
        );
        if seen.insert(t) {
            all.push(t);
        }
    }

    all.shuffle(&mut rng);
    let n = all.len();
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let test = all.split_off(n - n_test);
    let valid = all.split_off(n - n_test - n_valid);
    let train = all;
    Ok(Dataset {
        vocab: Vocab::synthetic(cfg.entities, cfg.relations),
        dedup: DedupReport {
            raw: [train.len(), valid.len(), test.len()],
            kept: [train.len(), valid.len(), test.len()],
        },
        train,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::relation_counts;

    #[test]
    fn default_shape() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let total = ds.train.len() + ds.valid.len() + ds.test.len();
        assert!((5000..=5600).contains(&total), "{total}");
        assert!((4500..=5100).contains(&ds.train.len()), "{}", ds.train.len());
        assert_eq!(ds.entity_count(), 150);
        assert_eq!(ds.relation_count(), 40);
        let counts = relation_counts(&ds.train, 40);
        assert!(counts.iter().all(|&c| c > 0));
        assert!(counts[0] > 4 * counts[39], "{counts:?}");
    }

    #[test]
    fn distinct_and_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        let mut all: Vec<Triple> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn rejects_bad_multiplicity() {
        let cfg = SynthConfig {
            entities: 10,
            max_multiplicity: 10,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
