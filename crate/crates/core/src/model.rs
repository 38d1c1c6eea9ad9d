//! Bilinear backbones (ComplEx, CP, RESCAL): parameter storage, full-candidate
//! scoring for tail and relation prediction, and analytic backward passes.
//!
//! Every backbone is expressed as `score(h, r, t) = query(h, r) · cand(t)`
//! for tail prediction and `score(h, r, t) = pair(h, t) · rel(r)` for
//! relation prediction, so a batch of queries becomes one matrix product
//! against the candidate table.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::prune::PruneMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[serde(rename = "complex")]
    ComplEx,
    Cp,
    Rescal,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::ComplEx, Backbone::Cp, Backbone::Rescal];

    pub fn tag(self) -> u8 {
        match self {
            Backbone::ComplEx => 0,
            Backbone::Cp => 1,
            Backbone::Rescal => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.tag() == tag)
    }

    /// Tensor layout for this backbone. Relation rows cover `2 * relation_count`
    /// ids; rows at or above `relation_count` are reciprocal relations.
    pub fn layout(self, dim: usize, entity_count: usize, relation_count: usize) -> Vec<TensorSpec> {
        let rels = 2 * relation_count;
        match self {
            Backbone::ComplEx => vec![
                TensorSpec::new("entity", entity_count, 2 * dim),
                TensorSpec::new("relation", rels, 2 * dim),
            ],
            Backbone::Cp => vec![
                TensorSpec::new("entity_head", entity_count, dim),
                TensorSpec::new("entity_tail", entity_count, dim),
                TensorSpec::new("relation", rels, dim),
            ],
            Backbone::Rescal => vec![
                TensorSpec::new("entity", entity_count, dim),
                TensorSpec::new("relation", rels, dim * dim),
            ],
        }
    }

    pub fn param_count(self, dim: usize, entity_count: usize, relation_count: usize) -> usize {
        self.layout(dim, entity_count, relation_count)
            .iter()
            .map(|s| s.rows * s.cols)
            .sum()
    }

    fn head_tensor(self) -> usize {
        0
    }

    fn tail_tensor(self) -> usize {
        match self {
            Backbone::Cp => 1,
            _ => 0,
        }
    }

    fn relation_tensor(self) -> usize {
        match self {
            Backbone::Cp => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::ComplEx => "complex",
            Backbone::Cp => "cp",
            Backbone::Rescal => "rescal",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "complex" => Ok(Backbone::ComplEx),
            "cp" => Ok(Backbone::Cp),
            "rescal" => Ok(Backbone::Rescal),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    const fn new(name: &'static str, rows: usize, cols: usize) -> Self {
        TensorSpec { name, rows, cols }
    }
}

/// Embedding tables of one backbone model, stored in 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    backbone: Backbone,
    dim: usize,
    entity_count: usize,
    relation_count: usize,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn zeros(backbone: Backbone, dim: usize, entity_count: usize, relation_count: usize) -> Self {
        let tensors = backbone
            .layout(dim, entity_count, relation_count)
            .iter()
            .map(|s| Array2::zeros((s.rows, s.cols)))
            .collect();
        ParamStore {
            backbone,
            dim,
            entity_count,
            relation_count,
            tensors,
        }
    }

    /// Wraps existing tensors after checking them against the layout.
    pub fn from_tensors(
        backbone: Backbone,
        dim: usize,
        entity_count: usize,
        relation_count: usize,
        tensors: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let layout = backbone.layout(dim, entity_count, relation_count);
        if layout.len() != tensors.len() || layout.iter().zip(&tensors).any(|(s, t)| t.dim() != (s.rows, s.cols)) {
            return Err(Error::Shape(format!(
                "tensors do not match the {backbone} layout for dim={dim}, E={entity_count}, R={relation_count}"
            )));
        }
        Ok(ParamStore {
            backbone,
            dim,
            entity_count,
            relation_count,
            tensors: tensors
                .into_iter()
                .map(|t| t.as_standard_layout().into_owned())
                .collect(),
        })
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    /// Original relation count; the relation table has twice as many rows.
    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        self.backbone.layout(self.dim, self.entity_count, self.relation_count)
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn tensor_names(&self) -> Vec<&'static str> {
        self.layout().iter().map(|s| s.name).collect()
    }

    /// Total number of scalar parameters `P`.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    /// Flat view in tensor order, row-major within each tensor.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mutable access to one scalar by flat index.
    pub fn flat_mut(&mut self, mut idx: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if idx < t.len() {
                return &mut t.as_slice_mut().expect("standard layout")[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Copy with pruned entries zeroed: the student's effective weights.
    pub fn masked(&self, mask: &PruneMask) -> ParamStore {
        let mut out = self.clone();
        out.apply_mask(mask);
        out
    }

    pub fn apply_mask(&mut self, mask: &PruneMask) {
        for (t, bits) in self.tensors.iter_mut().zip(mask.bits()) {
            for (w, &keep) in t.iter_mut().zip(bits) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|w| w.is_finite()))
    }

    /// Copy with every value rounded through `f32`.
    pub fn rounded_to_f32(&self) -> ParamStore {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.mapv_inplace(|w| w as f32 as f64);
        }
        out
    }

    pub fn check_triple(&self, t: &Triple) -> Result<()> {
        if t.head >= self.entity_count || t.tail >= self.entity_count {
            return Err(Error::Index(format!(
                "entity id in {t:?} exceeds entity count {}",
                self.entity_count
            )));
        }
        if t.rel >= 2 * self.relation_count {
            return Err(Error::Index(format!(
                "relation id {} exceeds {} (with reciprocals)",
                t.rel,
                2 * self.relation_count
            )));
        }
        Ok(())
    }

    pub fn check_batch(&self, batch: &[Triple]) -> Result<()> {
        batch.iter().try_for_each(|t| self.check_triple(t))
    }

    fn row(&self, tensor: usize, row: usize) -> &[f64] {
        let t = &self.tensors[tensor];
        let c = t.ncols();
        &t.as_slice().expect("standard layout")[row * c..(row + 1) * c]
    }

    fn query_len(&self) -> usize {
        match self.backbone {
            Backbone::ComplEx => 2 * self.dim,
            Backbone::Cp | Backbone::Rescal => self.dim,
        }
    }

    fn pair_len(&self) -> usize {
        match self.backbone {
            Backbone::ComplEx => 2 * self.dim,
            Backbone::Cp => self.dim,
            Backbone::Rescal => self.dim * self.dim,
        }
    }

    fn query_into(&self, head: usize, rel: usize, out: &mut [f64]) {
        let d = self.dim;
        let h = self.row(self.backbone.head_tensor(), head);
        let r = self.row(self.backbone.relation_tensor(), rel);
        match self.backbone {
            Backbone::ComplEx => {
                let (hr, hi) = h.split_at(d);
                let (rr, ri) = r.split_at(d);
                let (qr, qi) = out.split_at_mut(d);
                for k in 0..d {
                    qr[k] = hr[k] * rr[k] - hi[k] * ri[k];
                    qi[k] = hr[k] * ri[k] + hi[k] * rr[k];
                }
            }
            Backbone::Cp => {
                for k in 0..d {
                    out[k] = h[k] * r[k];
                }
            }
            Backbone::Rescal => {
                out.fill(0.0);
                for i in 0..d {
                    let hi = h[i];
                    let wrow = &r[i * d..(i + 1) * d];
                    for j in 0..d {
                        out[j] += hi * wrow[j];
                    }
                }
            }
        }
    }

    fn query_backward(&self, head: usize, rel: usize, gq: &[f64], buf: &mut GradBuffer) {
        let d = self.dim;
        let (ht, rt) = (self.backbone.head_tensor(), self.backbone.relation_tensor());
        let h = self.row(ht, head);
        let r = self.row(rt, rel);
        let mut dh = vec![0.0; h.len()];
        let mut dr = vec![0.0; r.len()];
        match self.backbone {
            Backbone::ComplEx => {
                let (hr, hi) = h.split_at(d);
                let (rr, ri) = r.split_at(d);
                let (gr, gi) = gq.split_at(d);
                for k in 0..d {
                    dh[k] = gr[k] * rr[k] + gi[k] * ri[k];
                    dh[d + k] = -gr[k] * ri[k] + gi[k] * rr[k];
                    dr[k] = gr[k] * hr[k] + gi[k] * hi[k];
                    dr[d + k] = -gr[k] * hi[k] + gi[k] * hr[k];
                }
            }
            Backbone::Cp => {
                for k in 0..d {
                    dh[k] = gq[k] * r[k];
                    dr[k] = gq[k] * h[k];
                }
            }
            Backbone::Rescal => {
                for i in 0..d {
                    let wrow = &r[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += wrow[j] * gq[j];
                        dr[i * d + j] = h[i] * gq[j];
                    }
                    dh[i] = acc;
                }
            }
        }
        add_into(buf.row_mut(ht, head), &dh);
        add_into(buf.row_mut(rt, rel), &dr);
    }

    fn pair_into(&self, head: usize, tail: usize, out: &mut [f64]) {
        let d = self.dim;
        let h = self.row(self.backbone.head_tensor(), head);
        let t = self.row(self.backbone.tail_tensor(), tail);
        match self.backbone {
            Backbone::ComplEx => {
                let (hr, hi) = h.split_at(d);
                let (tr, ti) = t.split_at(d);
                let (pr, pi) = out.split_at_mut(d);
                for k in 0..d {
                    pr[k] = hr[k] * tr[k] + hi[k] * ti[k];
                    pi[k] = hr[k] * ti[k] - hi[k] * tr[k];
                }
            }
            Backbone::Cp => {
                for k in 0..d {
                    out[k] = h[k] * t[k];
                }
            }
            Backbone::Rescal => {
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = h[i] * t[j];
                    }
                }
            }
        }
    }

    fn pair_backward(&self, head: usize, tail: usize, gp: &[f64], buf: &mut GradBuffer) {
        let d = self.dim;
        let (ht, tt) = (self.backbone.head_tensor(), self.backbone.tail_tensor());
        let h = self.row(ht, head);
        let t = self.row(tt, tail);
        let mut dh = vec![0.0; h.len()];
        let mut dt = vec![0.0; t.len()];
        match self.backbone {
            Backbone::ComplEx => {
                let (hr, hi) = h.split_at(d);
                let (tr, ti) = t.split_at(d);
                let (gr, gi) = gp.split_at(d);
                for k in 0..d {
                    dh[k] = gr[k] * tr[k] + gi[k] * ti[k];
                    dh[d + k] = gr[k] * ti[k] - gi[k] * tr[k];
                    dt[k] = gr[k] * hr[k] - gi[k] * hi[k];
                    dt[d + k] = gr[k] * hi[k] + gi[k] * hr[k];
                }
            }
            Backbone::Cp => {
                for k in 0..d {
                    dh[k] = gp[k] * t[k];
                    dt[k] = gp[k] * h[k];
                }
            }
            Backbone::Rescal => {
                for i in 0..d {
                    for j in 0..d {
                        let g = gp[i * d + j];
                        dh[i] += g * t[j];
                        dt[j] += g * h[i];
                    }
                }
            }
        }
        add_into(buf.row_mut(ht, head), &dh);
        add_into(buf.row_mut(tt, tail), &dt);
    }

    /// Tail-prediction queries (`B x L`) and logits (`B x E`) for a batch.
    pub(crate) fn tail_forward(&self, batch: &[Triple]) -> Forward {
        let mut q = Array2::zeros((batch.len(), self.query_len()));
        for (t, mut row) in batch.iter().zip(q.axis_iter_mut(Axis(0))) {
            self.query_into(t.head, t.rel, row.as_slice_mut().expect("contiguous"));
        }
        let logits = matmul(q.view(), self.tensors[self.backbone.tail_tensor()].t());
        Forward { inputs: q, logits }
    }

    /// Accumulates `d(sum(dlogits * logits))/dθ` for a tail forward pass.
    pub(crate) fn tail_backward(
        &self,
        batch: &[Triple],
        fwd: &Forward,
        dlogits: ArrayView2<'_, f64>,
        buf: &mut GradBuffer,
    ) {
        let cand = self.backbone.tail_tensor();
        buf.add_dense_rows(cand, &matmul(dlogits.t(), fwd.inputs.view()), &dlogits);
        let dq = matmul(dlogits, self.tensors[cand].view());
        for (t, row) in batch.iter().zip(dq.axis_iter(Axis(0))) {
            let g = row.as_slice().expect("contiguous");
            if g.iter().any(|&x| x != 0.0) {
                self.query_backward(t.head, t.rel, g, buf);
            }
        }
    }

    /// Relation-prediction pair features (`B x Lr`) and logits (`B x 2R`).
    pub(crate) fn rel_forward(&self, batch: &[Triple]) -> Forward {
        let mut p = Array2::zeros((batch.len(), self.pair_len()));
        for (t, mut row) in batch.iter().zip(p.axis_iter_mut(Axis(0))) {
            self.pair_into(t.head, t.tail, row.as_slice_mut().expect("contiguous"));
        }
        let logits = matmul(p.view(), self.tensors[self.backbone.relation_tensor()].t());
        Forward { inputs: p, logits }
    }

    pub(crate) fn rel_backward(
        &self,
        batch: &[Triple],
        fwd: &Forward,
        dlogits: ArrayView2<'_, f64>,
        buf: &mut GradBuffer,
    ) {
        let cand = self.backbone.relation_tensor();
        buf.add_dense_rows(cand, &matmul(dlogits.t(), fwd.inputs.view()), &dlogits);
        let dp = matmul(dlogits, self.tensors[cand].view());
        for (t, row) in batch.iter().zip(dp.axis_iter(Axis(0))) {
            let g = row.as_slice().expect("contiguous");
            if g.iter().any(|&x| x != 0.0) {
                self.pair_backward(t.head, t.tail, g, buf);
            }
        }
    }

    /// Rows read when scoring `t`: (tensor, row) for head, relation and tail.
    pub(crate) fn triple_rows(&self, t: &Triple) -> [(usize, usize); 3] {
        [
            (self.backbone.head_tensor(), t.head),
            (self.backbone.relation_tensor(), t.rel),
            (self.backbone.tail_tensor(), t.tail),
        ]
    }

    pub(crate) fn row_slice(&self, tensor: usize, row: usize) -> &[f64] {
        self.row(tensor, row)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Cached forward pass: per-query input features and candidate logits.
#[derive(Clone, Debug)]
pub(crate) struct Forward {
    pub inputs: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Dense gradient accumulator that remembers which rows were written.
pub(crate) struct GradBuffer {
    grads: Vec<Array2<f64>>,
    touched: Vec<Vec<bool>>,
}

impl GradBuffer {
    pub fn new(params: &ParamStore) -> Self {
        GradBuffer {
            grads: params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
            touched: params.tensors.iter().map(|t| vec![false; t.nrows()]).collect(),
        }
    }

    pub fn row_mut(&mut self, tensor: usize, row: usize) -> &mut [f64] {
        self.touched[tensor][row] = true;
        let g = &mut self.grads[tensor];
        let c = g.ncols();
        &mut g.as_slice_mut().expect("standard layout")[row * c..(row + 1) * c]
    }

    /// Adds a dense candidate-table gradient; a row counts as touched when
    /// any query assigned it a nonzero cotangent.
    fn add_dense_rows(&mut self, tensor: usize, grad: &Array2<f64>, dlogits: &ArrayView2<'_, f64>) {
        self.grads[tensor] += grad;
        for (e, col) in dlogits.axis_iter(Axis(1)).enumerate() {
            if col.iter().any(|&x| x != 0.0) {
                self.touched[tensor][e] = true;
            }
        }
    }

    pub fn into_sparse(self, mask: Option<&PruneMask>) -> SparseGrad {
        let shapes = self.grads.iter().map(Array2::dim).collect();
        let rows = self
            .grads
            .into_iter()
            .zip(self.touched)
            .enumerate()
            .map(|(ti, (g, touched))| {
                let c = g.ncols();
                let data = g.as_slice().expect("standard layout");
                touched
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t)
                    .map(|(r, _)| {
                        let mut row = data[r * c..(r + 1) * c].to_vec();
                        if let Some(m) = mask {
                            let bits = &m.bits()[ti][r * c..(r + 1) * c];
                            for (g, &keep) in row.iter_mut().zip(bits) {
                                if !keep {
                                    *g = 0.0;
                                }
                            }
                        }
                        (r, row)
                    })
                    .collect()
            })
            .collect();
        SparseGrad { shapes, rows }
    }
}

/// Row-sparse gradient congruent with a [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad {
    shapes: Vec<(usize, usize)>,
    rows: Vec<BTreeMap<usize, Vec<f64>>>,
}

impl SparseGrad {
    pub fn empty_like(params: &ParamStore) -> Self {
        SparseGrad {
            shapes: params.tensors.iter().map(Array2::dim).collect(),
            rows: vec![BTreeMap::new(); params.tensors.len()],
        }
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// `(tensor, row, gradient)` in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(t, m)| m.iter().map(move |(&r, g)| (t, r, g.as_slice())))
    }

    pub fn tensor_rows(&self, tensor: usize) -> &BTreeMap<usize, Vec<f64>> {
        &self.rows[tensor]
    }

    pub fn row_count(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|(_, _, g)| g.iter().all(|&x| x == 0.0))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, _, g)| g.iter().all(|x| x.is_finite()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().flat_map(|(_, _, g)| g).map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.rows {
            for g in m.values_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &SparseGrad, s: f64) -> Result<()> {
        if self.shapes != other.shapes {
            return Err(Error::Shape("sparse gradients with different layouts".into()));
        }
        for (dst, src) in self.rows.iter_mut().zip(&other.rows) {
            for (&r, g) in src {
                let row = dst.entry(r).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in row.iter_mut().zip(g) {
                    *a += s * b;
                }
            }
        }
        Ok(())
    }

    /// `params += s * self`.
    pub fn add_to(&self, params: &mut ParamStore, s: f64) -> Result<()> {
        self.check_congruent(params)?;
        for (t, r, g) in self.iter() {
            let tensor = &mut params.tensors[t];
            let c = tensor.ncols();
            let row = &mut tensor.as_slice_mut().expect("standard layout")[r * c..(r + 1) * c];
            for (w, x) in row.iter_mut().zip(g) {
                *w += s * x;
            }
        }
        Ok(())
    }

    pub fn check_congruent(&self, params: &ParamStore) -> Result<()> {
        let shapes: Vec<_> = params.tensors.iter().map(Array2::dim).collect();
        if shapes != self.shapes {
            return Err(Error::Shape("gradient does not match parameter layout".into()));
        }
        Ok(())
    }

    /// Dense flat vector in [`ParamStore::to_flat`] order.
    pub fn to_dense(&self) -> Vec<f64> {
        let offsets: Vec<usize> = self
            .shapes
            .iter()
            .scan(0, |acc, (r, c)| {
                let o = *acc;
                *acc += r * c;
                Some(o)
            })
            .collect();
        let total: usize = self.shapes.iter().map(|(r, c)| r * c).sum();
        let mut out = vec![0.0; total];
        for (t, r, g) in self.iter() {
            let start = offsets[t] + r * self.shapes[t].1;
            out[start..start + g.len()].copy_from_slice(g);
        }
        out
    }

    /// Clips to a maximum global L2 norm; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Uniform `[-init_scale, init_scale]` initialization, deterministic in `seed`.
pub fn init_params(
    backbone: Backbone,
    dim: usize,
    entity_count: usize,
    relation_count: usize,
    seed: u64,
    init_scale: f64,
) -> ParamStore {
    assert!(dim >= 1, "dim must be at least 1");
    let mut store = ParamStore::zeros(backbone, dim, entity_count, relation_count);
    if init_scale == 0.0 {
        return store;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut store.tensors {
        t.mapv_inplace(|_| rng.random_range(-init_scale..=init_scale));
    }
    store
}

/// Matrix product in row-major layout; `dot` may hand back a column-major
/// result for degenerate shapes.
fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let c = a.dot(&b);
    if c.is_standard_layout() {
        c
    } else {
        c.as_standard_layout().into_owned()
    }
}

fn view<'a>(params: &'a ParamStore, mask: Option<&PruneMask>) -> Result<Cow<'a, ParamStore>> {
    match mask {
        None => Ok(Cow::Borrowed(params)),
        Some(m) => {
            m.check_congruent(params)?;
            Ok(Cow::Owned(params.masked(m)))
        }
    }
}

/// Score of one triple, through the mask when one is given.
pub fn score_triple(params: &ParamStore, mask: Option<&PruneMask>, triple: Triple) -> Result<f64> {
    params.check_triple(&triple)?;
    let p = view(params, mask)?;
    let mut q = vec![0.0; p.query_len()];
    p.query_into(triple.head, triple.rel, &mut q);
    let cand = p.row(p.backbone.tail_tensor(), triple.tail);
    Ok(q.iter().zip(cand).map(|(a, b)| a * b).sum())
}

/// Scores of `(head, rel, e)` for every entity `e`.
pub fn score_all_tails(params: &ParamStore, mask: Option<&PruneMask>, head: usize, rel: usize) -> Result<Vec<f64>> {
    params.check_triple(&Triple::new(head, rel, head))?;
    let p = view(params, mask)?;
    Ok(p.tail_forward(&[Triple::new(head, rel, 0)])
        .logits
        .into_raw_vec_and_offset()
        .0)
}

/// Tail scores for a batch of `(head, rel)` queries, one row per query.
/// Row `i` is bitwise equal to `score_all_tails` on query `i`.
pub fn score_tails_batch(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    queries: &[(usize, usize)],
) -> Result<Array2<f64>> {
    let batch: Vec<Triple> = queries.iter().map(|&(h, r)| Triple::new(h, r, h)).collect();
    params.check_batch(&batch)?;
    let p = view(params, mask)?;
    Ok(p.tail_forward(&batch).logits)
}

/// Scores of `(head, r, tail)` for every relation row `r` (reciprocals included).
pub fn score_all_relations(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    head: usize,
    tail: usize,
) -> Result<Vec<f64>> {
    params.check_triple(&Triple::new(head, 0, tail))?;
    let p = view(params, mask)?;
    Ok(p.rel_forward(&[Triple::new(head, 0, tail)])
        .logits
        .into_raw_vec_and_offset()
        .0)
}

/// Gradient of `dlogits · score_all_tails(head, rel)` with respect to the
/// parameters; masked positions are exactly zero.
pub fn backward_tails(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    head: usize,
    rel: usize,
    dlogits: &[f64],
) -> Result<SparseGrad> {
    if dlogits.len() != params.entity_count {
        return Err(Error::Shape(format!(
            "dlogits has {} entries for {} entities",
            dlogits.len(),
            params.entity_count
        )));
    }
    let batch = [Triple::new(head, rel, 0)];
    params.check_batch(&batch)?;
    let p = view(params, mask)?;
    let fwd = p.tail_forward(&batch);
    let d = ArrayView2::from_shape((1, dlogits.len()), dlogits).expect("shape");
    let mut buf = GradBuffer::new(&p);
    p.tail_backward(&batch, &fwd, d, &mut buf);
    Ok(buf.into_sparse(mask))
}

/// Relation-prediction counterpart of [`backward_tails`].
pub fn backward_relations(
    params: &ParamStore,
    mask: Option<&PruneMask>,
    head: usize,
    tail: usize,
    dlogits: &[f64],
) -> Result<SparseGrad> {
    if dlogits.len() != 2 * params.relation_count {
        return Err(Error::Shape(format!(
            "dlogits has {} entries for {} relation rows",
            dlogits.len(),
            2 * params.relation_count
        )));
    }
    let batch = [Triple::new(head, 0, tail)];
    params.check_batch(&batch)?;
    let p = view(params, mask)?;
    let fwd = p.rel_forward(&batch);
    let d = ArrayView2::from_shape((1, dlogits.len()), dlogits).expect("shape");
    let mut buf = GradBuffer::new(&p);
    p.rel_backward(&batch, &fwd, d, &mut buf);
    Ok(buf.into_sparse(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prune::{compute_mask, MaskScope};

    fn rand_store(backbone: Backbone, dim: usize, e: usize, r: usize, seed: u64) -> ParamStore {
        init_params(backbone, dim, e, r, seed, 0.8)
    }

    /// Hand-expanded real arithmetic for Re(<h, r, conj(t)>).
    fn complex_expanded(h: &[f64], r: &[f64], t: &[f64], d: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let (a, b) = (h[k], h[d + k]);
            let (c, e) = (r[k], r[d + k]);
            let (x, y) = (t[k], t[d + k]);
            // (a+bi)(c+ei) = (ac - be) + (ae + bc)i ; times (x - yi), real part:
            s += (a * c - b * e) * x + (a * e + b * c) * y;
        }
        s
    }

    #[test]
    fn zero_params_score_zero() {
        for b in Backbone::ALL {
            let p = ParamStore::zeros(b, 3, 4, 2);
            for rel in 0..4 {
                assert_eq!(score_triple(&p, None, Triple::new(1, rel, 2)).unwrap(), 0.0);
            }
            assert!(score_all_relations(&p, None, 0, 1).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn complex_identity_case() {
        let mut p = ParamStore::zeros(Backbone::ComplEx, 1, 1, 1);
        p.tensor_mut(0)[[0, 0]] = 1.0;
        p.tensor_mut(1)[[0, 0]] = 1.0;
        assert_eq!(score_triple(&p, None, Triple::new(0, 0, 0)).unwrap(), 1.0);
        assert_eq!(score_all_tails(&p, None, 0, 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn complex_matches_expansion() {
        for seed in 0..10 {
            let p = rand_store(Backbone::ComplEx, 4, 5, 2, seed);
            for (h, r, t) in [(0, 0, 1), (3, 2, 3), (4, 3, 0)] {
                let hv = p.tensor(0).row(h).to_vec();
                let rv = p.tensor(1).row(r).to_vec();
                let tv = p.tensor(0).row(t).to_vec();
                let want = complex_expanded(&hv, &rv, &tv, 4);
                let got = score_triple(&p, None, Triple::new(h, r, t)).unwrap();
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn cp_and_rescal_match_definitions() {
        let p = rand_store(Backbone::Cp, 3, 4, 2, 5);
        let (h, r, t) = (p.tensor(0).row(1), p.tensor(2).row(3), p.tensor(1).row(2));
        let want: f64 = (0..3).map(|k| h[k] * r[k] * t[k]).sum();
        let got = score_triple(&p, None, Triple::new(1, 3, 2)).unwrap();
        assert!((got - want).abs() < 1e-12);

        let p = rand_store(Backbone::Rescal, 3, 4, 2, 6);
        let (h, w, t) = (p.tensor(0).row(0), p.tensor(1).row(2), p.tensor(0).row(3));
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                want += h[i] * w[i * 3 + j] * t[j];
            }
        }
        let got = score_triple(&p, None, Triple::new(0, 2, 3)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn full_candidate_scores_match_loops() {
        for b in Backbone::ALL {
            let p = rand_store(b, 3, 6, 3, 11);
            let mask = compute_mask(&p, 0.5, MaskScope::Global).unwrap();
            for m in [None, Some(&mask)] {
                let tails = score_all_tails(&p, m, 2, 4).unwrap();
                for (e, s) in tails.iter().enumerate() {
                    let want = score_triple(&p, m, Triple::new(2, 4, e)).unwrap();
                    assert!((s - want).abs() < 1e-12);
                }
                let rels = score_all_relations(&p, m, 1, 5).unwrap();
                assert_eq!(rels.len(), 6);
                for (r, s) in rels.iter().enumerate() {
                    let want = score_triple(&p, m, Triple::new(1, r, 5)).unwrap();
                    assert!((s - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_single_entity() {
        let p = rand_store(Backbone::ComplEx, 2, 1, 1, 3);
        let v = score_all_tails(&p, None, 0, 1).unwrap();
        assert_eq!(v.len(), 1);
        let want = score_triple(&p, None, Triple::new(0, 1, 0)).unwrap();
        assert!((v[0] - want).abs() < 1e-12);
    }

    #[test]
    fn masking_a_participating_weight_changes_scores() {
        let p = rand_store(Backbone::ComplEx, 2, 3, 1, 9);
        let mut mask = PruneMask::all_ones(&p);
        // zero the first real coordinate of entity 0 (the head)
        mask.bits_mut()[0][0] = false;
        let a = score_all_tails(&p, None, 0, 0).unwrap();
        let b = score_all_tails(&p, Some(&mask), 0, 0).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
        let zeroed = p.masked(&mask);
        let c = score_all_tails(&zeroed, None, 0, 0).unwrap();
        for (x, y) in b.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_ids() {
        let p = rand_store(Backbone::Cp, 2, 3, 1, 1);
        assert!(matches!(
            score_triple(&p, None, Triple::new(3, 0, 0)),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            score_triple(&p, None, Triple::new(0, 2, 0)),
            Err(Error::Index(_))
        ));
        assert!(matches!(backward_tails(&p, None, 0, 0, &[1.0]), Err(Error::Shape(_))));
    }

    /// Central differences of `dlogits · logits(θ)` over every parameter.
    fn fd_check(p: &ParamStore, mask: Option<&PruneMask>, tails: bool, a: usize, b: usize, d: &[f64]) {
        let g = if tails {
            backward_tails(p, mask, a, b, d).unwrap()
        } else {
            backward_relations(p, mask, a, b, d).unwrap()
        }
        .to_dense();
        let f = |q: &ParamStore| -> f64 {
            let s = if tails {
                score_all_tails(q, mask, a, b).unwrap()
            } else {
                score_all_relations(q, mask, a, b).unwrap()
            };
            s.iter().zip(d).map(|(x, y)| x * y).sum()
        };
        let h = 1e-5;
        let masked_flat: Option<Vec<bool>> = mask.map(|m| m.bits().concat());
        for i in 0..p.param_count() {
            if let Some(bits) = &masked_flat {
                if !bits[i] {
                    assert_eq!(g[i], 0.0, "masked entry {i} has gradient");
                    continue;
                }
            }
            let mut plus = p.clone();
            *plus.flat_mut(i) += h;
            let mut minus = p.clone();
            *minus.flat_mut(i) -= h;
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-4);
            assert!(err < 1e-6, "param {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for b in Backbone::ALL {
            let p = rand_store(b, 4, 5, 2, 21);
            let d: Vec<f64> = (0..5).map(|i| (i as f64 * 0.7).sin()).collect();
            fd_check(&p, None, true, 1, 3, &d);
            let mask = compute_mask(&p, 0.4, MaskScope::Global).unwrap();
            fd_check(&p, Some(&mask), true, 4, 0, &d);
            let dr: Vec<f64> = (0..4).map(|i| (i as f64 * 1.3).cos()).collect();
            fd_check(&p, None, false, 2, 2, &dr);
            fd_check(&p, Some(&mask), false, 0, 1, &dr);
        }
    }

    #[test]
    fn zero_cotangent_gives_empty_gradient() {
        let p = rand_store(Backbone::ComplEx, 3, 4, 2, 2);
        let g = backward_tails(&p, None, 0, 1, &[0.0; 4]).unwrap();
        assert_eq!(g.row_count(), 0);
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let p = rand_store(Backbone::Rescal, 3, 4, 2, 4);
        let d1 = [0.3, -1.0, 0.2, 0.5];
        let d2 = [1.0, 0.1, -0.4, 0.0];
        let sum: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| 2.0 * a - b).collect();
        let mut g = backward_tails(&p, None, 1, 2, &d1).unwrap();
        g.scale(2.0);
        g.add_scaled(&backward_tails(&p, None, 1, 2, &d2).unwrap(), -1.0)
            .unwrap();
        let direct = backward_tails(&p, None, 1, 2, &sum).unwrap();
        for (a, b) in g.to_dense().iter().zip(direct.to_dense()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(Backbone::Cp, 4, 7, 3, 42, 1e-3);
        assert_eq!(a, init_params(Backbone::Cp, 4, 7, 3, 42, 1e-3));
        assert_ne!(a, init_params(Backbone::Cp, 4, 7, 3, 43, 1e-3));
        assert!(a.to_flat().iter().all(|w| w.abs() <= 1e-3));
        let z = init_params(Backbone::ComplEx, 4, 7, 3, 42, 0.0);
        assert!(z.to_flat().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn parameter_counts() {
        let (e, r, d) = (7, 3, 4);
        assert_eq!(Backbone::ComplEx.param_count(d, e, r), (e + 2 * r) * 2 * d);
        assert_eq!(Backbone::Cp.param_count(d, e, r), 2 * e * d + 2 * r * d);
        assert_eq!(Backbone::Rescal.param_count(d, e, r), e * d + 2 * r * d * d);
        let full = Backbone::ComplEx.param_count(2000, 14_541, 237);
        assert_eq!(full, (14_541 + 474) * 4000);
        assert!((full as f64 / 1e6 - 60.0).abs() < 0.1);
    }
}
