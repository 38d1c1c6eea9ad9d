//! Global magnitude pruning. The mask is an overlay over the parameter store:
//! weights are never destroyed, so the student subnetwork can change every
//! time the mask is recomputed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, ParamStore};

pub const SPARSE_MAGIC: &[u8; 4] = b"MSDS";
pub const SPARSE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    /// One pool across every tensor.
    #[default]
    Global,
    /// The pruning fraction is applied inside each tensor independently.
    PerTensor,
}

/// How the student mask evolves during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Magnitude mask recomputed per the refresh policy.
    #[default]
    Dynamic,
    /// Magnitude mask computed once at the start and kept.
    Frozen,
    /// Uniformly random mask at the same sparsity, computed once and kept.
    RandomFrozen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMode {
    #[default]
    Epoch,
    Step,
}

/// Binary keep/prune bits congruent with a [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    bits: Vec<Vec<bool>>,
    pub gamma: f64,
    pub scope: MaskScope,
    /// Global step at which the mask was last recomputed.
    pub refreshed_at: u64,
}

impl PruneMask {
    pub fn all_ones(params: &ParamStore) -> Self {
        PruneMask {
            bits: params.tensors().iter().map(|t| vec![true; t.len()]).collect(),
            gamma: 0.0,
            scope: MaskScope::Global,
            refreshed_at: 0,
        }
    }

    pub fn from_bits(bits: Vec<Vec<bool>>, gamma: f64, scope: MaskScope) -> Self {
        PruneMask {
            bits,
            gamma,
            scope,
            refreshed_at: 0,
        }
    }

    /// Per-tensor bits, row-major, `true` = kept.
    pub fn bits(&self) -> &[Vec<bool>] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [Vec<bool>] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.kept()
    }

    /// Number of positions whose bit differs from `other`.
    pub fn flips(&self, other: &PruneMask) -> usize {
        self.bits
            .iter()
            .flatten()
            .zip(other.bits.iter().flatten())
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn check_congruent(&self, params: &ParamStore) -> Result<()> {
        let ok = self.bits.len() == params.tensors().len()
            && self.bits.iter().zip(params.tensors()).all(|(b, t)| b.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("mask does not match parameter layout".into()))
        }
    }
}

/// `floor(gamma * n)`, tolerant of binary representation error in `gamma`
/// (e.g. `0.57 * 100` evaluates to 56.999...).
pub fn prune_count(gamma: f64, n: usize) -> usize {
    let exact = gamma * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() <= 1e-9 * exact.abs().max(1.0) {
        rounded as usize
    } else {
        exact.floor() as usize
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("pruning rate {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// Marks the `k` smallest of `(magnitude, index)` pairs as pruned. Ties in
/// magnitude go to the lower flat index first.
fn prune_smallest(weights: impl Iterator<Item = f64>, k: usize, bits: &mut [bool]) {
    if k == 0 {
        return;
    }
    let mut order: Vec<(f64, usize)> = weights.map(f64::abs).zip(0..).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    for &(_, i) in &order[..k] {
        bits[i] = false;
    }
}

/// Magnitude mask: the `floor(gamma * P)` smallest-magnitude weights are
/// pruned (per tensor under [`MaskScope::PerTensor`]).
pub fn compute_mask(params: &ParamStore, gamma: f64, scope: MaskScope) -> Result<PruneMask> {
    check_gamma(gamma)?;
    let mut mask = PruneMask::all_ones(params);
    mask.gamma = gamma;
    mask.scope = scope;
    match scope {
        MaskScope::Global => {
            let mut flat = vec![true; params.param_count()];
            let k = prune_count(gamma, flat.len());
            prune_smallest(params.tensors().iter().flat_map(|t| t.iter().copied()), k, &mut flat);
            let mut off = 0;
            for bits in &mut mask.bits {
                let n = bits.len();
                bits.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        MaskScope::PerTensor => {
            for (bits, t) in mask.bits.iter_mut().zip(params.tensors()) {
                let k = prune_count(gamma, t.len());
                prune_smallest(t.iter().copied(), k, bits);
            }
        }
    }
    Ok(mask)
}

/// Mask with the same cardinality as [`compute_mask`] but uniformly random
/// pruned positions.
pub fn random_mask(params: &ParamStore, gamma: f64, scope: MaskScope, seed: u64) -> Result<PruneMask> {
    check_gamma(gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = PruneMask::all_ones(params);
    mask.gamma = gamma;
    mask.scope = scope;
    match scope {
        MaskScope::Global => {
            let p = params.param_count();
            let mut flat = vec![true; p];
            for i in rand::seq::index::sample(&mut rng, p, prune_count(gamma, p)) {
                flat[i] = false;
            }
            let mut off = 0;
            for bits in &mut mask.bits {
                let n = bits.len();
                bits.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        MaskScope::PerTensor => {
            for bits in &mut mask.bits {
                let n = bits.len();
                for i in rand::seq::index::sample(&mut rng, n, prune_count(gamma, n)) {
                    bits[i] = false;
                }
            }
        }
    }
    Ok(mask)
}

/// Whether the mask must be recomputed before the given step.
/// `step` counts steps within `epoch`, both from zero.
pub fn refresh_policy(step: usize, epoch: usize, mode: MaskMode, refresh: RefreshMode) -> bool {
    match mode {
        MaskMode::Dynamic => match refresh {
            RefreshMode::Step => true,
            RefreshMode::Epoch => step == 0,
        },
        MaskMode::Frozen | MaskMode::RandomFrozen => step == 0 && epoch == 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub total: usize,
    pub pruned: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub total: usize,
    pub pruned: usize,
    /// Surviving weights: the student's effective parameter count.
    pub effective_params: usize,
    pub sparsity: f64,
    pub per_tensor: Vec<TensorSparsity>,
}

pub fn sparsity_stats(mask: &PruneMask, names: &[&str]) -> SparsityStats {
    let per_tensor: Vec<TensorSparsity> = mask
        .bits
        .iter()
        .enumerate()
        .map(|(i, bits)| {
            let pruned = bits.iter().filter(|&&b| !b).count();
            TensorSparsity {
                name: names.get(i).map_or_else(|| format!("tensor{i}"), |n| n.to_string()),
                total: bits.len(),
                pruned,
                sparsity: ratio(pruned, bits.len()),
            }
        })
        .collect();
    let total = mask.len();
    let pruned = mask.pruned();
    SparsityStats {
        total,
        pruned,
        effective_params: total - pruned,
        sparsity: ratio(pruned, total),
        per_tensor,
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// A student reloaded from a sparse export; pruned entries are zero.
#[derive(Clone, Debug)]
pub struct SparseModel {
    pub params: ParamStore,
    pub config_digest: [u8; 32],
    pub nnz: usize,
}

/// Writes the surviving weights of `params` under `mask` as `f32` values.
///
/// Layout (little-endian): `"MSDS"`, version `u16`, config digest
/// `[u8; 32]`, backbone tag `u8`, dim `u32`, entity count `u64`, relation
/// count `u64`, tensor count `u32`, then per tensor: name length `u16`,
/// name bytes, element count `u64`, nnz `u64`, `nnz` ascending `u64` flat
/// indices, `nnz` `f32` values.
pub fn export_sparse(params: &ParamStore, mask: &PruneMask, config_digest: [u8; 32], path: &Path) -> Result<usize> {
    mask.check_congruent(params)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(SPARSE_MAGIC);
    bytes.extend_from_slice(&SPARSE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&config_digest);
    bytes.push(params.backbone().tag());
    bytes.extend_from_slice(&(params.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(params.entity_count() as u64).to_le_bytes());
    bytes.extend_from_slice(&(params.relation_count() as u64).to_le_bytes());
    bytes.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    let mut nnz_total = 0;
    for ((spec, t), bits) in params.layout().iter().zip(params.tensors()).zip(mask.bits()) {
        let name = spec.name.as_bytes();
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.extend_from_slice(&(t.len() as u64).to_le_bytes());
        let kept: Vec<usize> = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        nnz_total += kept.len();
        bytes.extend_from_slice(&(kept.len() as u64).to_le_bytes());
        for &i in &kept {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
        let data = t.as_slice().expect("standard layout");
        for &i in &kept {
            bytes.extend_from_slice(&(data[i] as f32).to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        bytes.clear();
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(nnz_total)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::SparseFormat("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_sparse(path: &Path) -> Result<SparseModel> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != SPARSE_MAGIC {
        return Err(Error::SparseFormat("bad magic".into()));
    }
    let version = c.u16()?;
    if version != SPARSE_VERSION {
        return Err(Error::SparseFormat(format!("unsupported version {version}")));
    }
    let config_digest: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let backbone =
        Backbone::from_tag(c.take(1)?[0]).ok_or_else(|| Error::SparseFormat("unknown backbone tag".into()))?;
    let dim = c.u32()? as usize;
    let entity_count = c.u64()? as usize;
    let relation_count = c.u64()? as usize;
    let count = c.u32()? as usize;
    let layout = backbone.layout(dim, entity_count, relation_count);
    if count != layout.len() {
        return Err(Error::SparseFormat("tensor count does not match backbone".into()));
    }
    let mut tensors = Vec::with_capacity(count);
    let mut nnz_total = 0;
    for spec in &layout {
        let name_len = c.u16()? as usize;
        let name = c.take(name_len)?;
        if name != spec.name.as_bytes() {
            return Err(Error::SparseFormat(format!("expected tensor '{}'", spec.name)));
        }
        let n = c.u64()? as usize;
        if n != spec.rows * spec.cols {
            return Err(Error::SparseFormat(format!("bad element count for '{}'", spec.name)));
        }
        let nnz = c.u64()? as usize;
        let mut idx = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let i = c.u64()? as usize;
            if i >= n || idx.last().is_some_and(|&prev| prev >= i) {
                return Err(Error::SparseFormat("indices not ascending or out of range".into()));
            }
            idx.push(i);
        }
        let mut data = vec![0.0f64; n];
        for &i in &idx {
            data[i] = f32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as f64;
        }
        nnz_total += nnz;
        tensors.push(Array2::from_shape_vec((spec.rows, spec.cols), data).expect("shape"));
    }
    if c.pos != buf.len() {
        return Err(Error::SparseFormat("trailing bytes".into()));
    }
    Ok(SparseModel {
        params: ParamStore::from_tensors(backbone, dim, entity_count, relation_count, tensors)?,
        config_digest,
        nnz: nnz_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn store_from(weights: &[f64]) -> ParamStore {
        // CP with dim 1, 1 entity and 1 relation: [head, tail, rel, rel_inv] = 4 weights
        let mut p = ParamStore::zeros(Backbone::Cp, 1, 1, 1);
        p.set_flat(weights).unwrap();
        p
    }

    #[test]
    fn gamma_zero_keeps_everything() {
        let p = init_params(Backbone::ComplEx, 3, 4, 2, 1, 1.0);
        let m = compute_mask(&p, 0.0, MaskScope::Global).unwrap();
        assert_eq!(m.pruned(), 0);
        assert_eq!(sparsity_stats(&m, &[]).sparsity, 0.0);
    }

    #[test]
    fn hand_sorted_example() {
        // RESCAL, dim 1, one entity, two relations: 1 + 4 weights
        let mut p = ParamStore::zeros(Backbone::Rescal, 1, 1, 2);
        p.set_flat(&[0.5, -0.1, 0.3, -0.7, 0.2]).unwrap();
        let m = compute_mask(&p, 0.4, MaskScope::Global).unwrap();
        let flat: Vec<bool> = m.bits().concat();
        assert_eq!(flat, vec![true, false, true, true, false]);
    }

    #[test]
    fn ties_break_by_flat_index() {
        let p = store_from(&[0.2, -0.2, 0.2, 0.9]);
        let m = compute_mask(&p, 0.5, MaskScope::Global).unwrap();
        assert_eq!(m.bits().concat(), vec![false, false, true, true]);
    }

    #[test]
    fn rejects_bad_gamma() {
        let p = store_from(&[1.0, 2.0, 3.0, 4.0]);
        assert!(compute_mask(&p, 1.0, MaskScope::Global).is_err());
        assert!(compute_mask(&p, -0.1, MaskScope::Global).is_err());
    }

    #[test]
    fn refresh_modes() {
        assert!(refresh_policy(0, 3, MaskMode::Dynamic, RefreshMode::Epoch));
        assert!(!refresh_policy(5, 3, MaskMode::Dynamic, RefreshMode::Epoch));
        assert!(refresh_policy(5, 3, MaskMode::Dynamic, RefreshMode::Step));
        assert!(refresh_policy(0, 0, MaskMode::Frozen, RefreshMode::Step));
        assert!(!refresh_policy(0, 1, MaskMode::RandomFrozen, RefreshMode::Epoch));
    }

    #[test]
    fn per_tensor_sparsity_within_one() {
        let p = init_params(Backbone::Cp, 5, 7, 3, 8, 1.0);
        let m = compute_mask(&p, 0.9, MaskScope::PerTensor).unwrap();
        let stats = sparsity_stats(&m, &p.tensor_names());
        for t in &stats.per_tensor {
            assert!((t.pruned as f64 - 0.9 * t.total as f64).abs() <= 1.0, "{t:?}");
        }
        assert_eq!(stats.per_tensor[0].name, "entity_head");
    }

    #[test]
    fn random_mask_cardinality() {
        let p = init_params(Backbone::ComplEx, 4, 9, 2, 8, 1.0);
        let m = random_mask(&p, 0.9, MaskScope::Global, 3).unwrap();
        assert_eq!(m.pruned(), prune_count(0.9, p.param_count()));
        assert_eq!(m, random_mask(&p, 0.9, MaskScope::Global, 3).unwrap());
    }

    #[test]
    fn prune_count_is_floor() {
        assert_eq!(prune_count(0.57, 100), 57);
        assert_eq!(prune_count(0.9, 60_000_000), 54_000_000);
        assert_eq!(prune_count(0.3, 7), 2);
        assert_eq!(prune_count(0.0, 7), 0);
    }

    #[test]
    fn export_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.msds");
        let p = init_params(Backbone::Rescal, 3, 5, 2, 4, 1.0);
        let m = compute_mask(&p, 0.9, MaskScope::Global).unwrap();
        let nnz = export_sparse(&p, &m, [7; 32], &path).unwrap();
        assert_eq!(nnz, m.kept());
        let back = load_sparse(&path).unwrap();
        assert_eq!(back.config_digest, [7; 32]);
        assert_eq!(back.params, p.masked(&m).rounded_to_f32());

        // all-zero mask region
        let mut none = PruneMask::all_ones(&p);
        none.bits_mut()[1].iter_mut().for_each(|b| *b = false);
        export_sparse(&p, &none, [0; 32], &path).unwrap();
        let back = load_sparse(&path).unwrap();
        assert!(back.params.tensor(1).iter().all(|&w| w == 0.0));
        assert_eq!(back.nnz, p.tensor(0).len());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_sparse(&path), Err(Error::SparseFormat(_))));
    }

    proptest! {
        #[test]
        fn mask_invariants(seed in 0u64..1000, gi in 0usize..3) {
            let gamma = [0.0, 0.3, 0.9][gi];
            let p = init_params(Backbone::ComplEx, 3, 6, 2, seed, 1.0);
            let m = compute_mask(&p, gamma, MaskScope::Global).unwrap();
            prop_assert_eq!(m.pruned(), prune_count(gamma, p.param_count()));
            let w = p.to_flat();
            let bits = m.bits().concat();
            let kept_min = w.iter().zip(&bits).filter(|(_, &b)| b).map(|(x, _)| x.abs()).fold(f64::INFINITY, f64::min);
            let pruned_max = w.iter().zip(&bits).filter(|(_, &b)| !b).map(|(x, _)| x.abs()).fold(0.0, f64::max);
            prop_assert!(kept_min >= pruned_max);
            prop_assert_eq!(compute_mask(&p, gamma, MaskScope::Global).unwrap(), m);
        }
    }
}
