//! The training loop: a virtual student lookahead, a teacher meta step
//! through that lookahead scored on quiz triples, then the committed
//! student and teacher updates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graph::{
    augment_reciprocal, batches, build_filter_index, sample_quiz, Dataset, FilterIndex, SplitData, Triple,
};
use crate::loss::{batch_ce, kd_teacher_cotangent, student_loss, teacher_loss, KdDirection, LossConfig, LossValue};
use crate::model::{init_params, Backbone, GradBuffer, ParamStore, SparseGrad};
use crate::optim::{AdagradState, OptimizerKind, UpdatePath};
use crate::prune::{compute_mask, random_mask, refresh_policy, MaskMode, MaskScope, PruneMask, RefreshMode};

const QUIZ_SEED_SALT: u64 = 0x7175_697a;
const QUIZ_BATCH_SALT: u64 = 0x7162_6174;
const MASK_SEED_SALT: u64 = 0x6d61_736b;

/// Where the student weights live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentStorage {
    /// The student is the masked view of the one parameter store.
    #[default]
    Shared,
    /// The student has its own store, reset to `teacher ⊙ mask` whenever
    /// the mask is recomputed.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub dim: usize,
    pub init_scale: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub kd_direction: KdDirection,
    pub rp_weight: f64,
    pub n3_weight: f64,
    pub gamma: f64,
    pub mask_mode: MaskMode,
    pub mask_scope: MaskScope,
    pub refresh: RefreshMode,
    /// Learning rate of the virtual and actual steps.
    pub lambda: f64,
    /// Learning rate of the teacher meta step.
    pub mu: f64,
    pub optimizer: OptimizerKind,
    pub adagrad_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub quiz_size: usize,
    /// Defaults to `batch_size`.
    pub quiz_batch_size: Option<usize>,
    /// Keep quiz triples in the training stream.
    pub quiz_overlap: bool,
    pub hvp_epsilon_scale: f64,
    pub meta_enabled: bool,
    pub student_storage: StudentStorage,
    pub seed: u64,
    /// Gradient norm cap for the actual steps; off when absent.
    pub clip_norm: Option<f64>,
    /// Validation every this many epochs (the last epoch always); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainConfig {
            backbone: Backbone::ComplEx,
            dim: 2000,
            init_scale: 1e-3,
            alpha: loss.alpha,
            beta: loss.beta,
            temperature: loss.temperature,
            kd_direction: loss.kd_direction,
            rp_weight: loss.rp_weight,
            n3_weight: loss.n3_weight,
            gamma: 0.9,
            mask_mode: MaskMode::Dynamic,
            mask_scope: MaskScope::Global,
            refresh: RefreshMode::Epoch,
            lambda: 0.1,
            mu: 1e-4,
            optimizer: OptimizerKind::Adagrad,
            adagrad_epsilon: 1e-10,
            epochs: 100,
            batch_size: 1000,
            quiz_size: 1000,
            quiz_batch_size: None,
            quiz_overlap: false,
            hvp_epsilon_scale: 0.01,
            meta_enabled: true,
            student_storage: StudentStorage::Shared,
            seed: 0,
            clip_norm: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
            rp_weight: self.rp_weight,
            n3_weight: self.n3_weight,
            kd_direction: self.kd_direction,
        }
    }

    pub fn quiz_batch(&self) -> usize {
        self.quiz_batch_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma={} outside [0, 1)", self.gamma));
        }
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name}={v} must be positive"));
            }
        }
        for (name, v) in [
            ("init_scale", self.init_scale),
            ("adagrad_epsilon", self.adagrad_epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name}={v} must be non-negative"));
            }
        }
        if !(self.hvp_epsilon_scale > 0.0 && self.hvp_epsilon_scale.is_finite()) {
            return bad(format!("hvp_epsilon_scale={} must be positive", self.hvp_epsilon_scale));
        }
        if self.batch_size == 0 || self.quiz_batch() == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.meta_enabled && self.quiz_size == 0 {
            return bad("quiz_size must be positive when meta_enabled".into());
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm={c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Reciprocal-augmented splits, the fixed quiz sample and the filter index.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub entity_count: usize,
    pub relation_count: usize,
    /// Original (non-reciprocal) training triples, quiz included.
    pub train_original: Vec<Triple>,
    /// Augmented training stream, quiz removed unless overlap is on.
    pub train: Vec<Triple>,
    pub quiz: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub filter: FilterIndex,
}

impl PreparedData {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let rc = ds.relation_count();
        if ds.train.is_empty() {
            return Err(Error::Empty("training split has no triples".into()));
        }
        let quiz_size = if cfg.meta_enabled { cfg.quiz_size } else { 0 };
        let split = sample_quiz(&ds.train, quiz_size, cfg.seed ^ QUIZ_SEED_SALT, cfg.quiz_overlap)?;
        if split.train.is_empty() {
            return Err(Error::Config("the quiz sample leaves no training triples".into()));
        }
        let aug = SplitData {
            train: ds.train.clone(),
            valid: ds.valid.clone(),
            test: ds.test.clone(),
            quiz: vec![],
        }
        .augmented(rc);
        Ok(PreparedData {
            entity_count: ds.entity_count(),
            relation_count: rc,
            train_original: ds.train.clone(),
            train: augment_reciprocal(&split.train, rc),
            quiz: augment_reciprocal(&split.quiz, rc),
            filter: build_filter_index(&aug),
            valid: aug.valid,
            test: aug.test,
        })
    }
}

/// Lookahead student `θ'_S = θ_S − λ ∇_S L_S`; the real weights are untouched.
#[derive(Clone, Debug)]
pub struct VirtualStudent {
    /// Masked student gradient; its rows are the ones the lookahead moved.
    pub grad: SparseGrad,
    pub weights: ParamStore,
    pub loss: LossValue,
}

/// `student` holds the effective student weights (already masked).
pub fn virtual_train_step(
    student: &ParamStore,
    teacher: &ParamStore,
    mask: &PruneMask,
    batch: &[Triple],
    cfg: &TrainConfig,
) -> Result<VirtualStudent> {
    let sl = student_loss(batch, student, teacher, Some(mask), &cfg.loss_config())?;
    let mut weights = student.clone();
    sl.student_grad.add_to(&mut weights, -cfg.lambda)?;
    Ok(VirtualStudent {
        grad: sl.student_grad,
        weights,
        loss: sl.value,
    })
}

#[derive(Clone, Debug)]
pub struct MetaGrad {
    /// Gradient of the quiz loss with respect to the teacher weights.
    pub grad: SparseGrad,
    pub quiz_ce: f64,
    pub v_norm: f64,
    /// True when `‖v‖ = 0` and no finite difference was taken.
    pub skipped: bool,
}

/// Teacher hypergradient of the quiz cross-entropy of the virtual student,
/// `−λ · ∂²L_S/∂θ_T∂θ_S · v` with `v = ∇ CE(quiz; θ'_S)`. The mixed product
/// is a central difference of the teacher-partial gradient of `L_S` taken
/// at `θ_S ± ε v`, `ε = hvp_epsilon_scale / ‖v‖`. The student weights are
/// treated as independent of the teacher weights.
pub fn hypergradient(
    student: &ParamStore,
    teacher: &ParamStore,
    mask: &PruneMask,
    batch: &[Triple],
    quiz_batch: &[Triple],
    virt: &VirtualStudent,
    cfg: &TrainConfig,
) -> Result<MetaGrad> {
    let (quiz_ce, v) = batch_ce(quiz_batch, &virt.weights, Some(mask))?;
    let v_norm = v.norm();
    let zero = SparseGrad::empty_like(teacher);
    let loss = cfg.loss_config();
    if loss.alpha >= 1.0 || cfg.lambda == 0.0 {
        return Ok(MetaGrad {
            grad: zero,
            quiz_ce,
            v_norm,
            skipped: false,
        });
    }
    if v_norm == 0.0 {
        return Ok(MetaGrad {
            grad: zero,
            quiz_ce,
            v_norm,
            skipped: true,
        });
    }
    if !v_norm.is_finite() {
        return Err(Error::Numeric("quiz gradient is not finite".into()));
    }
    let eps = cfg.hvp_epsilon_scale / v_norm;
    let mut plus = student.clone();
    v.add_to(&mut plus, eps)?;
    let mut minus = student.clone();
    v.add_to(&mut minus, -eps)?;

    let tf = teacher.tail_forward(batch);
    let cp = kd_teacher_cotangent(batch, &plus, &tf.logits, &loss)?;
    let cm = kd_teacher_cotangent(batch, &minus, &tf.logits, &loss)?;
    // backward is linear in the cotangent at a fixed teacher
    let diff = (cp - cm) * (1.0 / (2.0 * eps));
    let mut buf = GradBuffer::new(teacher);
    teacher.tail_backward(batch, &tf, diff.view(), &mut buf);
    let mut grad = buf.into_sparse(None);
    grad.scale(-cfg.lambda);
    if !grad.all_finite() {
        return Err(Error::Numeric("Hessian-vector product is not finite".into()));
    }
    Ok(MetaGrad {
        grad,
        quiz_ce,
        v_norm,
        skipped: false,
    })
}

/// Applies the hypergradient to the teacher with learning rate `μ`.
pub fn meta_train_step(
    teacher: &mut ParamStore,
    meta: &MetaGrad,
    opt: &mut AdagradState,
    cfg: &TrainConfig,
) -> Result<()> {
    if meta.grad.is_zero() || cfg.mu == 0.0 {
        return Ok(());
    }
    opt.update(UpdatePath::Teacher, cfg.optimizer, &meta.grad, cfg.mu, teacher, None)
}

/// Committed mutual update: student step on `L_S` through the mask, then a
/// full teacher step on `L_T`. With `student == None` the student is the
/// masked view of `teacher`.
pub fn actual_train_step(
    teacher: &mut ParamStore,
    student: Option<&mut ParamStore>,
    mask: &PruneMask,
    batch: &[Triple],
    opt: &mut AdagradState,
    cfg: &TrainConfig,
) -> Result<(LossValue, LossValue)> {
    let loss = cfg.loss_config();
    let clip = |g: &mut SparseGrad| {
        if let Some(c) = cfg.clip_norm {
            g.clip_norm(c);
        }
    };
    match student {
        None => {
            let view = teacher.masked(mask);
            let mut sl = student_loss(batch, &view, teacher, Some(mask), &loss)?;
            clip(&mut sl.student_grad);
            opt.update(
                UpdatePath::Student,
                cfg.optimizer,
                &sl.student_grad,
                cfg.lambda,
                teacher,
                Some(mask),
            )?;
            let view = teacher.masked(mask);
            let (tv, mut tg) = teacher_loss(batch, &view, teacher, &loss)?;
            clip(&mut tg);
            opt.update(UpdatePath::Teacher, cfg.optimizer, &tg, cfg.lambda, teacher, None)?;
            Ok((sl.value, tv))
        }
        Some(s) => {
            let mut sl = student_loss(batch, s, teacher, Some(mask), &loss)?;
            clip(&mut sl.student_grad);
            opt.update(
                UpdatePath::Student,
                cfg.optimizer,
                &sl.student_grad,
                cfg.lambda,
                s,
                Some(mask),
            )?;
            let (tv, mut tg) = teacher_loss(batch, s, teacher, &loss)?;
            clip(&mut tg);
            opt.update(UpdatePath::Teacher, cfg.optimizer, &tg, cfg.lambda, teacher, None)?;
            Ok((sl.value, tv))
        }
    }
}

/// Compact validation metrics for one model view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        EvalSummary {
            mrr: r.mrr,
            hits1: r.hits_at(1),
            hits3: r.hits_at(3),
            hits10: r.hits_at(10),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Epoch means of the student loss components plus `total`.
    pub student_loss: BTreeMap<String, f64>,
    pub teacher_loss: BTreeMap<String, f64>,
    pub quiz_ce: Option<f64>,
    pub meta_skipped: usize,
    pub valid_teacher: Option<EvalSummary>,
    pub valid_student: Option<EvalSummary>,
    pub sparsity: f64,
    pub effective_params: usize,
    pub mask_flips: usize,
}

/// Everything needed to continue training from an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub teacher: ParamStore,
    /// Present under separate student storage.
    pub student: Option<ParamStore>,
    pub mask: PruneMask,
    pub optimizer: AdagradState,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub quiz_rng: ChaCha8Rng,
    pub metrics: Vec<EpochRecord>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, entity_count: usize, relation_count: usize) -> Result<Self> {
        cfg.validate()?;
        let teacher = init_params(
            cfg.backbone,
            cfg.dim,
            entity_count,
            relation_count,
            cfg.seed,
            cfg.init_scale,
        );
        let mask = initial_mask(&teacher, cfg)?;
        let student = match cfg.student_storage {
            StudentStorage::Shared => None,
            StudentStorage::Separate => Some(teacher.masked(&mask)),
        };
        let optimizer = AdagradState::new(&teacher, cfg.adagrad_epsilon);
        Ok(TrainState {
            teacher,
            student,
            mask,
            optimizer,
            epoch: 0,
            global_step: 0,
            quiz_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ QUIZ_BATCH_SALT),
            metrics: vec![],
        })
    }

    /// The student's effective weights.
    pub fn student_params(&self) -> ParamStore {
        match &self.student {
            Some(s) => s.masked(&self.mask),
            None => self.teacher.masked(&self.mask),
        }
    }
}

fn initial_mask(teacher: &ParamStore, cfg: &TrainConfig) -> Result<PruneMask> {
    match cfg.mask_mode {
        MaskMode::Dynamic | MaskMode::Frozen => compute_mask(teacher, cfg.gamma, cfg.mask_scope),
        MaskMode::RandomFrozen => random_mask(teacher, cfg.gamma, cfg.mask_scope, cfg.seed ^ MASK_SEED_SALT),
    }
}

fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(what) => Error::Divergence { epoch, step, what },
        other => other,
    }
}

#[derive(Default)]
struct Means {
    sums: BTreeMap<String, f64>,
    n: usize,
}

impl Means {
    fn add(&mut self, v: &LossValue) {
        *self.sums.entry("total".into()).or_default() += v.total;
        for (k, x) in &v.components {
            *self.sums.entry(k.clone()).or_default() += x;
        }
        self.n += 1;
    }

    fn finish(self) -> BTreeMap<String, f64> {
        let n = self.n.max(1) as f64;
        self.sums.into_iter().map(|(k, v)| (k, v / n)).collect()
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a PreparedData,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a PreparedData) -> Result<Self> {
        let state = TrainState::init(&cfg, data.entity_count, data.relation_count)?;
        Self::resume(cfg, data, state)
    }

    pub fn resume(cfg: TrainConfig, data: &'a PreparedData, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.teacher.entity_count() != data.entity_count || state.teacher.relation_count() != data.relation_count {
            return Err(Error::Shape(format!(
                "state has {} entities / {} relations, data has {} / {}",
                state.teacher.entity_count(),
                state.teacher.relation_count(),
                data.entity_count,
                data.relation_count
            )));
        }
        if state.teacher.backbone() != cfg.backbone || state.teacher.dim() != cfg.dim {
            return Err(Error::Shape("state backbone or dim differs from the config".into()));
        }
        if state.student.is_some() != (cfg.student_storage == StudentStorage::Separate) {
            return Err(Error::Shape("state student storage differs from the config".into()));
        }
        if cfg.meta_enabled && data.quiz.is_empty() {
            return Err(Error::Config("meta step needs a non-empty quiz set".into()));
        }
        state.mask.check_congruent(&state.teacher)?;
        Ok(Trainer { cfg, data, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    fn refresh_mask(&mut self) -> Result<usize> {
        let st = &mut self.state;
        let fresh = match self.cfg.mask_mode {
            MaskMode::RandomFrozen => random_mask(
                &st.teacher,
                self.cfg.gamma,
                self.cfg.mask_scope,
                self.cfg.seed ^ MASK_SEED_SALT,
            )?,
            _ => compute_mask(&st.teacher, self.cfg.gamma, self.cfg.mask_scope)?,
        };
        let flips = fresh.flips(&st.mask);
        st.mask = fresh;
        st.mask.refreshed_at = st.global_step;
        if let Some(s) = &mut st.student {
            *s = st.teacher.masked(&st.mask);
        }
        Ok(flips)
    }

    fn quiz_batch(&mut self) -> Vec<Triple> {
        let quiz = &self.data.quiz;
        (0..self.cfg.quiz_batch())
            .map(|_| quiz[self.state.quiz_rng.random_range(0..quiz.len())])
            .collect()
    }

    /// Runs one epoch and appends its record to the metrics log.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let plan = batches(&self.data.train, self.cfg.batch_size, self.cfg.seed, epoch as u64);
        let (mut smeans, mut tmeans) = (Means::default(), Means::default());
        let (mut quiz_sum, mut quiz_n, mut skipped, mut flips) = (0.0, 0usize, 0usize, 0usize);

        for (step, batch) in plan.iter().enumerate() {
            let div = diverged(epoch + 1, step);
            if refresh_policy(step, epoch, self.cfg.mask_mode, self.cfg.refresh) {
                flips += self.refresh_mask()?;
            }
            if self.cfg.meta_enabled {
                let student = self.state.student_params();
                let virt = virtual_train_step(&student, &self.state.teacher, &self.state.mask, batch, &self.cfg)
                    .map_err(&div)?;
                let quiz = self.quiz_batch();
                let meta = hypergradient(
                    &student,
                    &self.state.teacher,
                    &self.state.mask,
                    batch,
                    &quiz,
                    &virt,
                    &self.cfg,
                )
                .map_err(&div)?;
                quiz_sum += meta.quiz_ce;
                quiz_n += 1;
                skipped += usize::from(meta.skipped);
                let st = &mut self.state;
                meta_train_step(&mut st.teacher, &meta, &mut st.optimizer, &self.cfg).map_err(&div)?;
            }
            let st = &mut self.state;
            let (sv, tv) = actual_train_step(
                &mut st.teacher,
                st.student.as_mut(),
                &st.mask,
                batch,
                &mut st.optimizer,
                &self.cfg,
            )
            .map_err(&div)?;
            if !sv.is_finite() || !tv.is_finite() {
                return Err(div(Error::Numeric("loss is not finite".into())));
            }
            smeans.add(&sv);
            tmeans.add(&tv);
            st.global_step += 1;
        }
        let st = &self.state;
        if !st.teacher.all_finite() || st.student.as_ref().is_some_and(|s| !s.all_finite()) {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                step: plan.len(),
                what: "parameters contain NaN or infinity".into(),
            });
        }

        let done = epoch + 1;
        let eval_now = self.cfg.eval_every > 0
            && !self.data.valid.is_empty()
            && (done.is_multiple_of(self.cfg.eval_every) || done == self.cfg.epochs);
        let (valid_teacher, valid_student) = if eval_now {
            let none = BTreeMap::new();
            let t = evaluate(&st.teacher, None, "valid", &self.data.valid, &self.data.filter, &none)?;
            let sp = st.student.as_ref().unwrap_or(&st.teacher);
            let s = evaluate(sp, Some(&st.mask), "valid", &self.data.valid, &self.data.filter, &none)?;
            (Some(EvalSummary::from(&t)), Some(EvalSummary::from(&s)))
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch: done,
            steps: plan.len(),
            student_loss: smeans.finish(),
            teacher_loss: tmeans.finish(),
            quiz_ce: (quiz_n > 0).then(|| quiz_sum / quiz_n as f64),
            meta_skipped: skipped,
            valid_teacher,
            valid_student,
            sparsity: st.mask.pruned() as f64 / st.mask.len().max(1) as f64,
            effective_params: st.mask.kept(),
            mask_flips: flips,
        };
        self.state.epoch = done;
        self.state.metrics.push(record.clone());
        Ok(record)
    }

    /// Trains to `cfg.epochs`, calling `on_epoch` after each epoch.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&EpochRecord, &TrainState) -> Result<()>,
    {
        while !self.is_done() {
            let rec = self.run_epoch()?;
            on_epoch(&rec, &self.state)?;
        }
        Ok(())
    }
}

/// Final weights, mask and metrics log of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub teacher: ParamStore,
    pub student: ParamStore,
    pub mask: PruneMask,
    pub metrics: Vec<EpochRecord>,
}

pub fn train(data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    t.run(|_, _| Ok(()))?;
    let st = t.into_state();
    Ok(TrainOutcome {
        student: st.student_params(),
        teacher: st.teacher,
        mask: st.mask,
        metrics: st.metrics,
    })
}
