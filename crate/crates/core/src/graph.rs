//! Triple ingestion, vocabularies, reciprocal augmentation, filter indexes,
//! quiz sampling, long-tail selection and deterministic batching.
//!
//! Everything here is built once, single-threaded, and is read-only
//! afterwards.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset file names, in vocabulary-assignment order.
pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, rel: usize, tail: usize) -> Self {
        Triple { head, rel, tail }
    }
}

/// Bijective name/id maps for entities and (original) relations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    entities: Vec<String>,
    relations: Vec<String>,
    #[serde(skip)]
    entity_ids: HashMap<String, usize>,
    #[serde(skip)]
    relation_ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary whose names are `e0..eN` / `r0..rM`.
    pub fn synthetic(entity_count: usize, relation_count: usize) -> Self {
        let mut v = Vocab::new();
        for e in 0..entity_count {
            v.intern_entity(&format!("e{e}"));
        }
        for r in 0..relation_count {
            v.intern_relation(&format!("r{r}"));
        }
        v
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Number of original relations (reciprocals not included).
    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        self.entities.get(id).map(String::as_str)
    }

    pub fn relation_name(&self, id: usize) -> Option<&str> {
        self.relations.get(id).map(String::as_str)
    }

    pub fn intern_entity(&mut self, name: &str) -> usize {
        intern(&mut self.entities, &mut self.entity_ids, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        intern(&mut self.relations, &mut self.relation_ids, name)
    }

    fn lookup(&mut self, kind: &'static str, name: &str, mode: VocabMode) -> Result<usize> {
        let (names, ids) = match kind {
            "entity" => (&mut self.entities, &mut self.entity_ids),
            _ => (&mut self.relations, &mut self.relation_ids),
        };
        match (ids.get(name), mode) {
            (Some(&id), _) => Ok(id),
            (None, VocabMode::Extend) => Ok(intern(names, ids, name)),
            (None, VocabMode::Strict) => Err(Error::Vocab {
                kind,
                name: name.to_string(),
            }),
        }
    }

    /// Restores the reverse maps after deserialization.
    pub fn rebuild_index(&mut self) {
        self.entity_ids = self.entities.iter().cloned().zip(0..).collect();
        self.relation_ids = self.relations.iter().cloned().zip(0..).collect();
    }
}

fn intern(names: &mut Vec<String>, ids: &mut HashMap<String, usize>, name: &str) -> usize {
    if let Some(&id) = ids.get(name) {
        return id;
    }
    let id = names.len();
    names.push(name.to_string());
    ids.insert(name.to_string(), id);
    id
}

/// Whether unseen names extend the vocabulary or are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    Extend,
    Strict,
}

/// Reads a tab-separated `head\trelation\ttail` file.
pub fn load_triples(path: &Path, vocab: &mut Vocab, mode: VocabMode) -> Result<Vec<Triple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(BufReader::new(file), &path.display().to_string(), vocab, mode)
}

/// Parses triples from any line-oriented reader. Blank lines are skipped;
/// every other line must hold exactly three tab-separated fields.
pub fn parse_triples<R: BufRead>(reader: R, source: &str, vocab: &mut Vocab, mode: VocabMode) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = vocab.lookup("entity", fields[0], mode)?;
        let rel = vocab.lookup("relation", fields[1], mode)?;
        let tail = vocab.lookup("entity", fields[2], mode)?;
        out.push(Triple::new(head, rel, tail));
    }
    Ok(out)
}

/// Removes repeated triples, keeping first occurrences in order.
/// Returns the number of dropped duplicates.
pub fn dedup_triples(triples: &mut Vec<Triple>) -> usize {
    let before = triples.len();
    let mut seen = HashSet::with_capacity(before);
    triples.retain(|t| seen.insert(*t));
    before - triples.len()
}

/// Appends `(t, r + relation_count, h)` for every `(h, r, t)`, keeping the
/// originals first.
pub fn augment_reciprocal(triples: &[Triple], relation_count: usize) -> Vec<Triple> {
    let mut out = Vec::with_capacity(triples.len() * 2);
    out.extend_from_slice(triples);
    out.extend(
        triples
            .iter()
            .map(|t| Triple::new(t.tail, t.rel + relation_count, t.head)),
    );
    out
}

/// Maps an augmented relation id back to its original relation.
pub fn original_relation(rel: usize, relation_count: usize) -> usize {
    if rel >= relation_count {
        rel - relation_count
    } else {
        rel
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitData {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub quiz: Vec<Triple>,
}

impl SplitData {
    /// Reciprocal-augments every split.
    pub fn augmented(&self, relation_count: usize) -> SplitData {
        SplitData {
            train: augment_reciprocal(&self.train, relation_count),
            valid: augment_reciprocal(&self.valid, relation_count),
            test: augment_reciprocal(&self.test, relation_count),
            quiz: augment_reciprocal(&self.quiz, relation_count),
        }
    }
}

/// Known-true tails per `(head, relation)` query over train, valid and test.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    answers: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    /// Known answers for a query, sorted ascending. Empty when unseen.
    pub fn answers(&self, head: usize, rel: usize) -> &[usize] {
        self.answers.get(&(head, rel)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn query_count(&self) -> usize {
        self.answers.len()
    }
}

/// Builds the filter index from reciprocal-augmented splits. The quiz split
/// is a subset of the original train sample space and is folded in as well.
pub fn build_filter_index(splits: &SplitData) -> FilterIndex {
    let mut sets: HashMap<(usize, usize), BTreeSet<usize>> = HashMap::new();
    for t in splits
        .train
        .iter()
        .chain(&splits.valid)
        .chain(&splits.test)
        .chain(&splits.quiz)
    {
        sets.entry((t.head, t.rel)).or_default().insert(t.tail);
    }
    FilterIndex {
        answers: sets.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
    }
}

/// A fixed quiz sample together with the remaining training stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizSplit {
    pub train: Vec<Triple>,
    pub quiz: Vec<Triple>,
}

/// Draws `size` distinct training triples uniformly without replacement.
/// With `overlap == false` those triples leave the training stream.
pub fn sample_quiz(train: &[Triple], size: usize, seed: u64, overlap: bool) -> Result<QuizSplit> {
    if size > train.len() {
        return Err(Error::Config(format!(
            "quiz_size {size} exceeds the {} training triples",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, train.len(), size).into_vec();
    picked.sort_unstable();
    let quiz = picked.iter().map(|&i| train[i]).collect();
    let train = if overlap {
        train.to_vec()
    } else {
        let mut drop = picked.into_iter().peekable();
        train
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                if drop.peek() == Some(i) {
                    drop.next();
                    false
                } else {
                    true
                }
            })
            .map(|(_, t)| *t)
            .collect()
    };
    Ok(QuizSplit { train, quiz })
}

/// Per-relation counts over original (non-reciprocal) triples.
pub fn relation_counts(train: &[Triple], relation_count: usize) -> Vec<usize> {
    let mut counts = vec![0usize; relation_count];
    for t in train {
        if t.rel < relation_count {
            counts[t.rel] += 1;
        }
    }
    counts
}

/// Relations with fewer than `threshold` training triples. `train` must hold
/// original triples only.
pub fn long_tail_relations(train: &[Triple], relation_count: usize, threshold: usize) -> BTreeSet<usize> {
    relation_counts(train, relation_count)
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c < threshold)
        .map(|(r, _)| r)
        .collect()
}

/// Shuffles `triples` with a permutation fixed by `(seed, epoch)` and chunks
/// it into batches; the last batch may be short.
pub fn batches(triples: &[Triple], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<Triple>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order = triples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[Triple]>::to_vec).collect()
}

/// Duplicate counts observed while loading a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub raw: [usize; 3],
    pub kept: [usize; 3],
}

/// A loaded dataset: vocabulary plus original-id splits (no quiz yet).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub dedup: DedupReport,
}

impl Dataset {
    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`. Ids are
    /// assigned by first appearance over train, then valid, then test.
    /// With `strict`, names absent from train are rejected in valid/test.
    pub fn load_dir(dir: &Path, strict: bool) -> Result<Self> {
        let paths: Vec<PathBuf> = SPLIT_FILES.iter().map(|f| dir.join(f)).collect();
        let missing: Vec<String> = paths
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let mut vocab = Vocab::new();
        let mut splits: Vec<Vec<Triple>> = Vec::with_capacity(3);
        let mut dedup = DedupReport::default();
        for (i, path) in paths.iter().enumerate() {
            let mode = if i > 0 && strict {
                VocabMode::Strict
            } else {
                VocabMode::Extend
            };
            let mut triples = load_triples(path, &mut vocab, mode)?;
            dedup.raw[i] = triples.len();
            let dropped = dedup_triples(&mut triples);
            if dropped > 0 {
                log::warn!(
                    "{}: dropped {dropped} duplicate triples ({} -> {})",
                    path.display(),
                    dedup.raw[i],
                    triples.len()
                );
            }
            dedup.kept[i] = triples.len();
            splits.push(triples);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Dataset {
            vocab,
            train,
            valid,
            test,
            dedup,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.vocab.entity_count()
    }

    pub fn relation_count(&self) -> usize {
        self.vocab.relation_count()
    }

    pub fn splits(&self) -> SplitData {
        SplitData {
            train: self.train.clone(),
            valid: self.valid.clone(),
            test: self.test.clone(),
            quiz: Vec::new(),
        }
    }

    /// Content digest of the three split files (hex sha256 over the triples
    /// rendered back to names).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for split in [&self.train, &self.valid, &self.test] {
            for t in split {
                let line = format!(
                    "{}\t{}\t{}\n",
                    self.vocab.entity_name(t.head).unwrap_or(""),
                    self.vocab.relation_name(t.rel).unwrap_or(""),
                    self.vocab.entity_name(t.tail).unwrap_or("")
                );
                h.update(line.as_bytes());
            }
            h.update(b"--\n");
        }
        hex::encode(h.finalize())
    }

    /// Writes the dataset as three tab-separated files under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in SPLIT_FILES.iter().zip([&self.train, &self.valid, &self.test]) {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            for t in split {
                writeln!(
                    w,
                    "{}\t{}\t{}",
                    self.vocab.entity_name(t.head).unwrap_or(""),
                    self.vocab.relation_name(t.rel).unwrap_or(""),
                    self.vocab.entity_name(t.tail).unwrap_or("")
                )
                .map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Summary statistics printed by `data-stats`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub duplicates_dropped: usize,
    pub long_tail_threshold: usize,
    pub long_tail_relations: usize,
    /// Fraction of original train triples covered by long-tail relations.
    pub long_tail_train_fraction: f64,
    /// `(lower bound, upper bound exclusive, relation count)` buckets of
    /// per-relation train frequency.
    pub histogram: Vec<(usize, usize, usize)>,
}

impl DataStats {
    pub fn compute(ds: &Dataset, threshold: usize) -> Self {
        let counts = relation_counts(&ds.train, ds.relation_count());
        let tail = long_tail_relations(&ds.train, ds.relation_count(), threshold);
        let covered: usize = tail.iter().map(|&r| counts[r]).sum();
        let edges = [0usize, 10, 100, 1000, 10_000, usize::MAX];
        let histogram = edges
            .windows(2)
            .map(|w| (w[0], w[1], counts.iter().filter(|&&c| c >= w[0] && c < w[1]).count()))
            .collect();
        DataStats {
            entities: ds.entity_count(),
            relations: ds.relation_count(),
            train: ds.train.len(),
            valid: ds.valid.len(),
            test: ds.test.len(),
            duplicates_dropped: (0..3).map(|i| ds.dedup.raw[i] - ds.dedup.kept[i]).sum(),
            long_tail_threshold: threshold,
            long_tail_relations: tail.len(),
            long_tail_train_fraction: if ds.train.is_empty() {
                0.0
            } else {
                covered as f64 / ds.train.len() as f64
            },
            histogram,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn parse(text: &str, vocab: &mut Vocab) -> Result<Vec<Triple>> {
        parse_triples(Cursor::new(text), "mem", vocab, VocabMode::Extend)
    }

    #[test]
    fn parses_and_assigns_ids_in_first_appearance_order() {
        let mut v = Vocab::new();
        let t = parse("a\tr\tb\nb\ts\tc\n", &mut v).unwrap();
        assert_eq!(t, vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2)]);
        assert_eq!(v.entity_count(), 3);
        assert_eq!(v.relation_count(), 2);
        for id in 0..3 {
            let name = v.entity_name(id).unwrap().to_string();
            assert_eq!(v.entity_id(&name), Some(id));
        }
    }

    #[test]
    fn empty_input_leaves_vocab_alone() {
        let mut v = Vocab::synthetic(2, 1);
        let before = v.clone();
        assert!(parse("", &mut v).unwrap().is_empty());
        assert_eq!(v, before);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut v = Vocab::new();
        let err = parse("a\tr\tb\na r b\n", &mut v).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse("a\tr\tb\tc\n", &mut v).unwrap_err();
        assert_eq!(err.code(), "E_PARSE");
    }

    #[test]
    fn strict_mode_rejects_unseen_entities() {
        let mut v = Vocab::new();
        parse("a\tr\tb\n", &mut v).unwrap();
        let err = parse_triples(Cursor::new("a\tr\tz\n"), "mem", &mut v, VocabMode::Strict).unwrap_err();
        assert!(matches!(err, Error::Vocab { kind: "entity", .. }));
    }

    #[test]
    fn reciprocal_augmentation() {
        assert_eq!(
            augment_reciprocal(&[Triple::new(0, 0, 1)], 1),
            vec![Triple::new(0, 0, 1), Triple::new(1, 1, 0)]
        );
        assert!(augment_reciprocal(&[], 3).is_empty());
    }

    #[test]
    fn filter_index_sets() {
        let splits = SplitData {
            train: vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)],
            ..Default::default()
        };
        assert_eq!(build_filter_index(&splits).answers(0, 0), &[1, 2]);

        let splits = SplitData {
            train: vec![Triple::new(0, 0, 1)],
            test: vec![Triple::new(0, 0, 1)],
            ..Default::default()
        };
        assert_eq!(build_filter_index(&splits).answers(0, 0), &[1]);
    }

    #[test]
    fn quiz_sampling() {
        let train: Vec<Triple> = (0..50).map(|i| Triple::new(i, 0, i + 1)).collect();
        let empty = sample_quiz(&train, 0, 3, false).unwrap();
        assert!(empty.quiz.is_empty());
        assert_eq!(empty.train, train);

        let a = sample_quiz(&train, 10, 7, false).unwrap();
        let b = sample_quiz(&train, 10, 7, false).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(a.quiz.len(), 10);
        assert_eq!(a.train.len(), 40);
        assert!(a.quiz.iter().all(|q| !a.train.contains(q)));

        let c = sample_quiz(&train, 10, 7, true).unwrap();
        assert_eq!(c.train.len(), 50);
        assert_eq!(c.quiz, a.quiz);

        assert!(matches!(sample_quiz(&train, 51, 1, false), Err(Error::Config(_))));
    }

    #[test]
    fn long_tail_selection() {
        let train = vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(2, 1, 0)];
        assert!(long_tail_relations(&train, 3, 0).is_empty());
        assert_eq!(
            long_tail_relations(&train, 3, 2).into_iter().collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    #[test]
    fn batch_chunking() {
        let t: Vec<Triple> = (0..10).map(|i| Triple::new(i, 0, 0)).collect();
        let b = batches(&t, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(&t, 4, 1, 0));
        assert_ne!(b, batches(&t, 4, 1, 1));
    }

    #[test]
    fn dataset_dir_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        match Dataset::load_dir(dir.path(), false) {
            Err(Error::MissingFiles(m)) => assert_eq!(m.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_dedups_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.txt"), "a\tr\tb\na\tr\tb\nb\ts\tc\n").unwrap();
        std::fs::write(dir.path().join("valid.txt"), "c\tr\td\n").unwrap();
        std::fs::write(dir.path().join("test.txt"), "").unwrap();
        let ds = Dataset::load_dir(dir.path(), false).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.dedup.raw, [3, 1, 0]);
        assert_eq!(ds.entity_count(), 4);
        assert!(Dataset::load_dir(dir.path(), true).is_err());

        let out = tempfile::tempdir().unwrap();
        ds.write_dir(out.path()).unwrap();
        let back = Dataset::load_dir(out.path(), false).unwrap();
        assert_eq!(back.digest(), ds.digest());
    }

    fn arb_triples() -> impl Strategy<Value = Vec<Triple>> {
        prop::collection::vec((0usize..8, 0usize..3, 0usize..8), 0..50)
            .prop_map(|v| v.into_iter().map(|(h, r, t)| Triple::new(h, r, t)).collect())
    }

    proptest! {
        #[test]
        fn reciprocal_closure(triples in arb_triples()) {
            let aug = augment_reciprocal(&triples, 3);
            prop_assert_eq!(aug.len(), 2 * triples.len());
            for t in &aug {
                if t.rel >= 3 {
                    prop_assert!(triples.contains(&Triple::new(t.tail, t.rel - 3, t.head)));
                }
            }
        }

        #[test]
        fn filter_index_matches_brute_force(
            train in arb_triples(), valid in arb_triples(), test in arb_triples()
        ) {
            let splits = SplitData { train, valid, test, quiz: vec![] }.augmented(3);
            let index = build_filter_index(&splits);
            let all: Vec<Triple> =
                splits.train.iter().chain(&splits.valid).chain(&splits.test).copied().collect();
            for x in &all {
                let mut brute: Vec<usize> = all
                    .iter()
                    .filter(|y| y.head == x.head && y.rel == x.rel)
                    .map(|y| y.tail)
                    .collect();
                brute.sort_unstable();
                brute.dedup();
                prop_assert_eq!(index.answers(x.head, x.rel), brute.as_slice());
            }
        }

        #[test]
        fn long_tail_partitions_relations(train in arb_triples(), threshold in 0usize..20) {
            let tail = long_tail_relations(&train, 3, threshold);
            let head: BTreeSet<usize> = (0..3).filter(|r| !tail.contains(r)).collect();
            prop_assert_eq!(tail.len() + head.len(), 3);
            let counts = relation_counts(&train, 3);
            for r in head { prop_assert!(counts[r] >= threshold); }
        }

        #[test]
        fn batches_are_a_permutation(train in arb_triples(), bs in 1usize..7, seed in 0u64..4) {
            let mut flat: Vec<Triple> = batches(&train, bs, seed, 2).concat();
            let mut orig = train.clone();
            flat.sort();
            orig.sort();
            prop_assert_eq!(flat, orig);
        }
    }
}
