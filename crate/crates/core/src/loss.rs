//! Losses over full-candidate softmax predictions and their gradients.
//!
//! The student objective mixes tail cross-entropy with a distillation term
//! `KL(S || T)`; the teacher objective mixes its own cross-entropy with the
//! same divergence differentiated through the teacher logits only.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::model::{Forward, GradBuffer, ParamStore, SparseGrad};
use crate::prune::PruneMask;

/// Which way the distillation divergence is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(student || teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher || student)`.
    TeacherStudent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Student balance between cross-entropy and distillation.
    pub alpha: f64,
    /// Teacher balance between cross-entropy and distillation.
    pub beta: f64,
    pub temperature: f64,
    /// Weight of the relation-prediction auxiliary cross-entropy.
    pub rp_weight: f64,
    /// Weight of the N3 regularizer.
    pub n3_weight: f64,
    pub kd_direction: KdDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
            rp_weight: 0.05,
            n3_weight: 0.0,
            kd_direction: KdDirection::StudentTeacher,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature={} must be positive",
                self.temperature
            )));
        }
        for (name, v) in [("rp_weight", self.rp_weight), ("n3_weight", self.n3_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name}={v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Total loss plus its unweighted components (`ce`, `kd`, `rp`, `n3`).
/// Disabled terms are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or infinity")))
    }
}

/// Log-softmax of `xs / temperature` written into `out`.
fn log_softmax_into(xs: &[f64], temperature: f64, out: &mut [f64]) {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) / temperature;
    let lse = max + xs.iter().map(|&x| (x / temperature - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = x / temperature - lse;
    }
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index(format!("target {target} for {} logits", logits.len())));
    }
    check_finite(logits, "logits")?;
    let mut d = vec![0.0; logits.len()];
    let loss = ce_row(logits, target, 1.0, &mut d);
    Ok((loss, d))
}

fn ce_row(logits: &[f64], target: usize, scale: f64, d: &mut [f64]) -> f64 {
    log_softmax_into(logits, 1.0, d);
    let loss = -d[target];
    for x in d.iter_mut() {
        *x = scale * x.exp();
    }
    d[target] -= scale;
    loss
}

/// `KL(p || q)` with `p = softmax(student / τ)`, `q = softmax(teacher / τ)`,
/// plus gradients with respect to both logit vectors.
pub fn kl_div(student: &[f64], teacher: &[f64], temperature: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    kd_divergence(student, teacher, temperature, KdDirection::StudentTeacher)
}

/// Distillation divergence in either direction.
pub fn kd_divergence(
    student: &[f64],
    teacher: &[f64],
    temperature: f64,
    direction: KdDirection,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!(
            "student has {} logits, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    check_finite(student, "student logits")?;
    check_finite(teacher, "teacher logits")?;
    let n = student.len();
    let (mut ds, mut dt) = (vec![0.0; n], vec![0.0; n]);
    let mut scratch = vec![0.0; 2 * n];
    let loss = kd_row(
        student,
        teacher,
        temperature,
        direction,
        1.0,
        &mut ds,
        &mut dt,
        &mut scratch,
    );
    Ok((loss, ds, dt))
}

/// One row of the divergence. Gradients are scaled by `scale` and written
/// (not accumulated) into `ds`/`dt`.
#[allow(clippy::too_many_arguments)]
fn kd_row(
    student: &[f64],
    teacher: &[f64],
    tau: f64,
    direction: KdDirection,
    scale: f64,
    ds: &mut [f64],
    dt: &mut [f64],
    scratch: &mut [f64],
) -> f64 {
    let n = student.len();
    let (ls, lt) = scratch.split_at_mut(n);
    log_softmax_into(student, tau, ls);
    log_softmax_into(teacher, tau, lt);
    // (from, to) = the distribution under the expectation and the other one.
    let (lf, lo, df, dother) = match direction {
        KdDirection::StudentTeacher => (&*ls, &*lt, ds, dt),
        KdDirection::TeacherStudent => (&*lt, &*ls, dt, ds),
    };
    let kl: f64 = lf.iter().zip(lo.iter()).map(|(&a, &b)| a.exp() * (a - b)).sum();
    for i in 0..n {
        let pf = lf[i].exp();
        let po = lo[i].exp();
        df[i] = scale * pf * ((lf[i] - lo[i]) - kl) / tau;
        dother[i] = scale * (po - pf) / tau;
    }
    kl
}

/// Sum of row cross-entropies; writes `scale * dCE/dlogits` into a new matrix.
fn ce_rows(logits: &Array2<f64>, target: impl Fn(usize) -> usize, scale: f64) -> Result<(f64, Array2<f64>)> {
    check_finite(logits.as_slice().expect("standard layout"), "logits")?;
    let mut d = Array2::zeros(logits.dim());
    let mut sum = 0.0;
    for (i, (row, mut drow)) in logits.axis_iter(Axis(0)).zip(d.axis_iter_mut(Axis(0))).enumerate() {
        sum += ce_row(
            row.as_slice().expect("contiguous"),
            target(i),
            scale,
            drow.as_slice_mut().expect("contiguous"),
        );
    }
    Ok((sum, d))
}

/// Sum of row divergences with scaled gradients for both sides.
fn kd_rows(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    tau: f64,
    direction: KdDirection,
    scale: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_finite(student.as_slice().expect("standard layout"), "student logits")?;
    check_finite(teacher.as_slice().expect("standard layout"), "teacher logits")?;
    let mut ds = Array2::zeros(student.dim());
    let mut dt = Array2::zeros(student.dim());
    let mut scratch = vec![0.0; 2 * student.ncols()];
    let mut sum = 0.0;
    for (((s, t), mut a), mut b) in student
        .axis_iter(Axis(0))
        .zip(teacher.axis_iter(Axis(0)))
        .zip(ds.axis_iter_mut(Axis(0)))
        .zip(dt.axis_iter_mut(Axis(0)))
    {
        sum += kd_row(
            s.as_slice().expect("contiguous"),
            t.as_slice().expect("contiguous"),
            tau,
            direction,
            scale,
            a.as_slice_mut().expect("contiguous"),
            b.as_slice_mut().expect("contiguous"),
            &mut scratch,
        );
    }
    Ok((sum, ds, dt))
}

/// `Σ |w|³` of one row and its gradient `3 |w|² sign(w)`.
pub fn n3_row(row: &[f64]) -> (f64, Vec<f64>) {
    let value = row.iter().map(|w| w.abs().powi(3)).sum();
    let grad = row.iter().map(|&w| 3.0 * w * w.abs()).collect();
    (value, grad)
}

/// Batch-mean N3 penalty over the head, relation and tail rows each triple
/// reads.
pub fn n3_reg(params: &ParamStore, batch: &[Triple]) -> Result<(f64, SparseGrad)> {
    params.check_batch(batch)?;
    let mut buf = GradBuffer::new(params);
    let value = n3_accumulate(params, batch, 1.0, &mut buf);
    Ok((value, buf.into_sparse(None)))
}

fn n3_accumulate(params: &ParamStore, batch: &[Triple], weight: f64, buf: &mut GradBuffer) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    for t in batch {
        for (tensor, row) in params.triple_rows(t) {
            let (v, g) = n3_row(params.row_slice(tensor, row));
            value += v;
            for (dst, x) in buf.row_mut(tensor, row).iter_mut().zip(g) {
                *dst += weight * inv * x;
            }
        }
    }
    value * inv
}

/// Student objective with gradients for the student weights (masked) and
/// the partial gradient for the teacher weights through the distillation
/// term.
#[derive(Clone, Debug)]
pub struct StudentLoss {
    pub value: LossValue,
    pub student_grad: SparseGrad,
    pub teacher_grad: SparseGrad,
}

fn nonempty(batch: &[Triple]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Empty("loss on an empty batch".into()))
    } else {
        Ok(())
    }
}

/// Student loss `α CE(S) + (1-α) KL(S || T) + rp·CE_rel(S) + n3·N3(S)`,
/// averaged over the batch.
///
/// `student` holds the student's effective weights (for a shared store,
/// `params.masked(mask)`); `mask` zeroes gradient entries of pruned weights.
pub fn student_loss(
    batch: &[Triple],
    student: &ParamStore,
    teacher: &ParamStore,
    mask: Option<&PruneMask>,
    cfg: &LossConfig,
) -> Result<StudentLoss> {
    nonempty(batch)?;
    student.check_batch(batch)?;
    let teacher_fwd = (cfg.alpha < 1.0).then(|| teacher.tail_forward(batch));
    student_loss_cached(batch, student, teacher, teacher_fwd.as_ref(), mask, cfg, true)
}

/// [`student_loss`] with an optional precomputed teacher forward pass.
pub(crate) fn student_loss_cached(
    batch: &[Triple],
    student: &ParamStore,
    teacher: &ParamStore,
    teacher_fwd: Option<&Forward>,
    mask: Option<&PruneMask>,
    cfg: &LossConfig,
    want_teacher_grad: bool,
) -> Result<StudentLoss> {
    let inv = 1.0 / batch.len() as f64;
    let mut components = BTreeMap::new();
    let mut sbuf = GradBuffer::new(student);
    let mut tbuf = GradBuffer::new(teacher);

    let sf = student.tail_forward(batch);
    let (ce_sum, mut dlog) = ce_rows(&sf.logits, |i| batch[i].tail, inv)?;
    let ce = ce_sum * inv;
    components.insert("ce".to_string(), ce);
    dlog *= cfg.alpha;
    let mut total = cfg.alpha * ce;

    if cfg.alpha < 1.0 {
        let owned;
        let tf = match teacher_fwd {
            Some(f) => f,
            None => {
                owned = teacher.tail_forward(batch);
                &owned
            }
        };
        let w = 1.0 - cfg.alpha;
        let (kd_sum, ds, mut dt) = kd_rows(&sf.logits, &tf.logits, cfg.temperature, cfg.kd_direction, inv)?;
        let kd = kd_sum * inv;
        components.insert("kd".to_string(), kd);
        total += w * kd;
        dlog.scaled_add(w, &ds);
        if want_teacher_grad {
            dt *= w;
            teacher.tail_backward(batch, tf, dt.view(), &mut tbuf);
        }
    }
    student.tail_backward(batch, &sf, dlog.view(), &mut sbuf);

    if cfg.rp_weight > 0.0 {
        let rf = student.rel_forward(batch);
        let (rp_sum, mut drp) = ce_rows(&rf.logits, |i| batch[i].rel, inv)?;
        let rp = rp_sum * inv;
        components.insert("rp".to_string(), rp);
        total += cfg.rp_weight * rp;
        drp *= cfg.rp_weight;
        student.rel_backward(batch, &rf, drp.view(), &mut sbuf);
    }
    if cfg.n3_weight > 0.0 {
        let n3 = n3_accumulate(student, batch, cfg.n3_weight, &mut sbuf);
        components.insert("n3".to_string(), n3);
        total += cfg.n3_weight * n3;
    }

    let value = LossValue { total, components };
    if !value.is_finite() {
        return Err(Error::Numeric("student loss is not finite".into()));
    }
    Ok(StudentLoss {
        value,
        student_grad: sbuf.into_sparse(mask),
        teacher_grad: tbuf.into_sparse(None),
    })
}

/// Teacher loss `β CE(T) + (1-β) KL(S || T) + rp·CE_rel(T) + n3·N3(T)`,
/// averaged over the batch; student outputs are constants.
pub fn teacher_loss(
    batch: &[Triple],
    student: &ParamStore,
    teacher: &ParamStore,
    cfg: &LossConfig,
) -> Result<(LossValue, SparseGrad)> {
    nonempty(batch)?;
    teacher.check_batch(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let mut components = BTreeMap::new();
    let mut buf = GradBuffer::new(teacher);

    let tf = teacher.tail_forward(batch);
    let (ce_sum, mut dlog) = ce_rows(&tf.logits, |i| batch[i].tail, inv)?;
    let ce = ce_sum * inv;
    components.insert("ce".to_string(), ce);
    dlog *= cfg.beta;
    let mut total = cfg.beta * ce;

    if cfg.beta < 1.0 {
        let sf = student.tail_forward(batch);
        let w = 1.0 - cfg.beta;
        let (kd_sum, _, dt) = kd_rows(&sf.logits, &tf.logits, cfg.temperature, cfg.kd_direction, inv)?;
        let kd = kd_sum * inv;
        components.insert("kd".to_string(), kd);
        total += w * kd;
        dlog.scaled_add(w, &dt);
    }
    teacher.tail_backward(batch, &tf, dlog.view(), &mut buf);

    if cfg.rp_weight > 0.0 {
        let rf = teacher.rel_forward(batch);
        let (rp_sum, mut drp) = ce_rows(&rf.logits, |i| batch[i].rel, inv)?;
        let rp = rp_sum * inv;
        components.insert("rp".to_string(), rp);
        total += cfg.rp_weight * rp;
        drp *= cfg.rp_weight;
        teacher.rel_backward(batch, &rf, drp.view(), &mut buf);
    }
    if cfg.n3_weight > 0.0 {
        let n3 = n3_accumulate(teacher, batch, cfg.n3_weight, &mut buf);
        components.insert("n3".to_string(), n3);
        total += cfg.n3_weight * n3;
    }

    let value = LossValue { total, components };
    if !value.is_finite() {
        return Err(Error::Numeric("teacher loss is not finite".into()));
    }
    Ok((value, buf.into_sparse(None)))
}

/// Mean tail cross-entropy of `params` on `batch` and its gradient.
pub fn batch_ce(batch: &[Triple], params: &ParamStore, mask: Option<&PruneMask>) -> Result<(f64, SparseGrad)> {
    nonempty(batch)?;
    params.check_batch(batch)?;
    let inv = 1.0 / batch.len() as f64;
    let fwd = params.tail_forward(batch);
    let (sum, d) = ce_rows(&fwd.logits, |i| batch[i].tail, inv)?;
    let mut buf = GradBuffer::new(params);
    params.tail_backward(batch, &fwd, d.view(), &mut buf);
    Ok((sum * inv, buf.into_sparse(mask)))
}

/// Cotangent of `(1-α) · mean KL` with respect to the teacher logits, for a
/// given student; zero matrix when `α = 1`.
pub(crate) fn kd_teacher_cotangent(
    batch: &[Triple],
    student: &ParamStore,
    teacher_logits: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<Array2<f64>> {
    if cfg.alpha >= 1.0 {
        return Ok(Array2::zeros(teacher_logits.dim()));
    }
    let inv = 1.0 / batch.len() as f64;
    let sf = student.tail_forward(batch);
    let (_, _, mut dt) = kd_rows(&sf.logits, teacher_logits, cfg.temperature, cfg.kd_direction, inv)?;
    dt *= 1.0 - cfg.alpha;
    Ok(dt)
}
