//! Filtered link-prediction evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{long_tail_relations, original_relation, FilterIndex, Triple};
use crate::model::{score_tails_batch, ParamStore};
use crate::prune::PruneMask;

pub const HITS_AT: [u32; 3] = [1, 3, 10];
const CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelView {
    Teacher,
    Student,
}

impl fmt::Display for ModelView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelView::Teacher => "teacher",
            ModelView::Student => "student",
        })
    }
}

/// Restriction of an evaluation to triples whose original relation is in
/// `relations`; `tail_only` drops the reciprocal (head-prediction) queries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Subset {
    pub relations: BTreeSet<usize>,
    pub tail_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub view: ModelView,
    pub mrr: f64,
    pub hits: BTreeMap<u32, f64>,
    pub query_count: usize,
    pub effective_params: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subsets: BTreeMap<String, EvalReport>,
}

impl EvalReport {
    pub fn hits_at(&self, k: u32) -> f64 {
        self.hits.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<7} queries={:<6} params={:<9} MRR={:.4} H@1={:.4} H@3={:.4} H@10={:.4}",
            self.split,
            self.view,
            self.query_count,
            self.effective_params,
            self.mrr,
            self.hits_at(1),
            self.hits_at(3),
            self.hits_at(10)
        )?;
        for (name, sub) in &self.subsets {
            write!(f, "\n  [{name}] {sub}")?;
        }
        Ok(())
    }
}

/// Filtered rank of `target` under the mean tie convention. Entries of
/// `known_true` other than the target do not compete.
pub fn filtered_rank(scores: &[f64], target: usize, known_true: &[usize]) -> Result<f64> {
    let Some(&s) = scores.get(target) else {
        return Err(Error::Index(format!(
            "target {target} out of range for {} candidates",
            scores.len()
        )));
    };
    if s.is_nan() {
        return Err(Error::Numeric(format!("score of target {target} is NaN")));
    }
    let (mut greater, mut equal) = (0usize, 0usize);
    for (e, &x) in scores.iter().enumerate() {
        if x > s {
            greater += 1;
        } else if x == s && e != target {
            equal += 1;
        }
    }
    // known_true is sorted; walk it to take out competing entries.
    for &e in known_true {
        if e == target || e >= scores.len() {
            continue;
        }
        let x = scores[e];
        if x > s {
            greater -= 1;
        } else if x == s {
            equal -= 1;
        }
    }
    Ok(1.0 + greater as f64 + equal as f64 / 2.0)
}

/// Filtered ranks of every query, in input order. Each triple is a tail
/// query `(head, rel, ?)`; reciprocal triples pose head prediction.
pub fn filtered_ranks(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    triples: &[Triple],
    filter: &FilterIndex,
) -> Result<Vec<f64>> {
    params.check_batch(triples)?;
    let chunks: Vec<Result<Vec<f64>>> = triples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let queries: Vec<(usize, usize)> = chunk.iter().map(|t| (t.head, t.rel)).collect();
            let scores = score_tails_batch(params, mask, &queries)?;
            chunk
                .iter()
                .zip(scores.rows())
                .map(|(t, row)| {
                    let row = row.as_slice().expect("standard layout");
                    filtered_rank(row, t.tail, filter.answers(t.head, t.rel))
                })
                .collect()
        })
        .collect();
    let mut ranks = Vec::with_capacity(triples.len());
    for c in chunks {
        ranks.extend(c?);
    }
    Ok(ranks)
}

/// MRR and Hits@{1,3,10} of a rank list; errors on an empty list.
pub fn metrics_from_ranks(ranks: &[f64]) -> Result<(f64, BTreeMap<u32, f64>)> {
    if ranks.is_empty() {
        return Err(Error::Empty("no queries to evaluate".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
    let hits = HITS_AT
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n))
        .collect();
    Ok((mrr, hits))
}

fn in_subset(t: &Triple, sub: &Subset, relation_count: usize) -> bool {
    if sub.tail_only && t.rel >= relation_count {
        return false;
    }
    sub.relations.contains(&original_relation(t.rel, relation_count))
}

/// Filtered evaluation over reciprocal-augmented `triples`. Subset reports
/// reuse the per-query ranks of the full evaluation.
pub fn evaluate(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    split: &str,
    triples: &[Triple],
    filter: &FilterIndex,
    subsets: &BTreeMap<String, Subset>,
) -> Result<EvalReport> {
    if triples.is_empty() {
        return Err(Error::Empty(format!("split '{split}' has no triples")));
    }
    let (view, effective_params) = match mask {
        Some(m) => (ModelView::Student, m.kept()),
        None => (ModelView::Teacher, params.param_count()),
    };
    let ranks = filtered_ranks(params, mask, triples, filter)?;
    let (mrr, hits) = metrics_from_ranks(&ranks)?;
    let rc = params.relation_count();
    let mut subs = BTreeMap::new();
    for (name, sub) in subsets {
        let picked: Vec<f64> = triples
            .iter()
            .zip(&ranks)
            .filter(|(t, _)| in_subset(t, sub, rc))
            .map(|(_, &r)| r)
            .collect();
        if picked.is_empty() {
            return Err(Error::Empty(format!("subset '{name}' of split '{split}' is empty")));
        }
        let (mrr, hits) = metrics_from_ranks(&picked)?;
        subs.insert(
            name.clone(),
            EvalReport {
                split: format!("{split}/{name}"),
                view,
                mrr,
                hits,
                query_count: picked.len(),
                effective_params,
                subsets: BTreeMap::new(),
            },
        );
    }
    Ok(EvalReport {
        split: split.to_string(),
        view,
        mrr,
        hits,
        query_count: ranks.len(),
        effective_params,
        subsets: subs,
    })
}

/// Long-tail evaluation for both model views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailReport {
    pub threshold: usize,
    pub relations: Vec<usize>,
    /// Reports over the whole split; subset `long_tail` covers both query
    /// directions, `long_tail_tail_only` the original direction only.
    pub teacher: EvalReport,
    pub student: EvalReport,
}

impl LongTailReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Evaluates `triples` (augmented) restricted to relations with fewer than
/// `threshold` triples in `train_original`.
pub fn long_tail_report(
    params: &ParamStore,
    mask: &PruneMask,
    split: &str,
    triples: &[Triple],
    filter: &FilterIndex,
    train_original: &[Triple],
    threshold: usize,
) -> Result<LongTailReport> {
    let relations = long_tail_relations(train_original, params.relation_count(), threshold);
    if relations.is_empty() {
        return Err(Error::Empty(format!(
            "no relation has fewer than {threshold} training triples"
        )));
    }
    let mut subsets = BTreeMap::new();
    subsets.insert(
        "long_tail".to_string(),
        Subset {
            relations: relations.clone(),
            tail_only: false,
        },
    );
    subsets.insert(
        "long_tail_tail_only".to_string(),
        Subset {
            relations: relations.clone(),
            tail_only: true,
        },
    );
    Ok(LongTailReport {
        threshold,
        relations: relations.into_iter().collect(),
        teacher: evaluate(params, None, split, triples, filter, &subsets)?,
        student: evaluate(params, Some(mask), split, triples, filter, &subsets)?,
    })
}
