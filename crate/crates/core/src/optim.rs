//! Row-sparse Adagrad with separate accumulators for the student and the
//! teacher update streams, and plain SGD.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, SparseGrad};
use crate::prune::PruneMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adagrad,
    Sgd,
}

/// Which accumulator set an update belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdatePath {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub student: Vec<Array2<f64>>,
    pub teacher: Vec<Array2<f64>>,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(params: &ParamStore, epsilon: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        AdagradState {
            student: zeros.clone(),
            teacher: zeros,
            epsilon,
        }
    }

    pub fn accumulators(&self, path: UpdatePath) -> &[Array2<f64>] {
        match path {
            UpdatePath::Student => &self.student,
            UpdatePath::Teacher => &self.teacher,
        }
    }

    /// Applies one update to the entries touched by `grads`. Masked entries
    /// (when a mask is given) keep both their weight and accumulator.
    ///
    /// Adagrad: `G += g²; w -= lr · g / (√G + ε)`. SGD: `w -= lr · g`.
    pub fn update(
        &mut self,
        path: UpdatePath,
        kind: OptimizerKind,
        grads: &SparseGrad,
        lr: f64,
        params: &mut ParamStore,
        mask: Option<&PruneMask>,
    ) -> Result<()> {
        grads.check_congruent(params)?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("{path:?} gradient contains NaN or infinity")));
        }
        let eps = self.epsilon;
        let accs = match path {
            UpdatePath::Student => &mut self.student,
            UpdatePath::Teacher => &mut self.teacher,
        };
        for (t, r, g) in grads.iter() {
            let cols = params.tensor(t).ncols();
            let range = r * cols..(r + 1) * cols;
            let bits = mask.map(|m| &m.bits()[t][range.clone()]);
            let w = &mut params.tensor_mut(t).as_slice_mut().expect("standard layout")[range.clone()];
            let acc = &mut accs[t].as_slice_mut().expect("standard layout")[range];
            for k in 0..cols {
                if bits.is_some_and(|b| !b[k]) {
                    continue;
                }
                let gk = g[k];
                match kind {
                    OptimizerKind::Adagrad => {
                        acc[k] += gk * gk;
                        w[k] -= lr * gk / (acc[k].sqrt() + eps);
                    }
                    OptimizerKind::Sgd => w[k] -= lr * gk,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{backward_tails, init_params, Backbone};
    use crate::prune::{compute_mask, MaskScope};

    fn single_grad(g: f64) -> (ParamStore, SparseGrad) {
        // CP dim 1, one entity, one relation; gradient on the head table.
        let mut p = ParamStore::zeros(Backbone::Cp, 1, 1, 1);
        p.set_flat(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        let sg = backward_tails(&p, None, 0, 0, &[g]).unwrap();
        (p, sg)
    }

    #[test]
    fn adagrad_first_step() {
        let (mut p, sg) = single_grad(2.0);
        // head grad = dlogit * r * t = 2
        assert_eq!(sg.tensor_rows(0)[&0], vec![2.0]);
        let mut st = AdagradState::new(&p, 0.0);
        st.update(UpdatePath::Student, OptimizerKind::Adagrad, &sg, 0.1, &mut p, None)
            .unwrap();
        assert!((p.tensor(0)[[0, 0]] - 0.9).abs() < 1e-15);
        assert_eq!(st.student[0][[0, 0]], 4.0);
        assert_eq!(st.teacher[0][[0, 0]], 0.0);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (mut p, mut sg) = single_grad(2.0);
        sg.scale(0.0);
        let before = p.clone();
        let mut st = AdagradState::new(&p, 1e-10);
        st.update(UpdatePath::Teacher, OptimizerKind::Adagrad, &sg, 0.1, &mut p, None)
            .unwrap();
        assert_eq!(p, before);
        assert!(st.teacher.iter().all(|a| a.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn sgd_is_plain_step() {
        let (mut p, sg) = single_grad(2.0);
        let mut st = AdagradState::new(&p, 1e-10);
        st.update(UpdatePath::Student, OptimizerKind::Sgd, &sg, 0.1, &mut p, None)
            .unwrap();
        assert_eq!(p.tensor(0)[[0, 0]], 1.0 - 0.1 * 2.0);
    }

    #[test]
    fn masked_entries_untouched() {
        let mut p = init_params(Backbone::ComplEx, 3, 4, 1, 5, 1.0);
        let m = compute_mask(&p, 0.5, MaskScope::Global).unwrap();
        let d = vec![1.0, -0.5, 0.25, 2.0];
        let g = backward_tails(&p, None, 1, 0, &d).unwrap();
        let before = p.to_flat();
        let mut st = AdagradState::new(&p, 1e-10);
        st.update(UpdatePath::Student, OptimizerKind::Adagrad, &g, 0.1, &mut p, Some(&m))
            .unwrap();
        let after = p.to_flat();
        let acc: Vec<f64> = st.student.iter().flat_map(|a| a.iter().copied()).collect();
        for (i, keep) in m.bits().concat().into_iter().enumerate() {
            if !keep {
                assert_eq!(before[i], after[i]);
                assert_eq!(acc[i], 0.0);
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut p, mut sg) = single_grad(2.0);
        sg.scale(f64::NAN);
        let before = p.clone();
        let mut st = AdagradState::new(&p, 1e-10);
        let err = st
            .update(UpdatePath::Student, OptimizerKind::Adagrad, &sg, 0.1, &mut p, None)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, before);
    }
}
