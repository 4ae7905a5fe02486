//! First-order optimizers with state keyed by stable parameter names.
//!
//! Keys embed expert ids (`l0.e3.w1`), so adding or removing experts never
//! shifts another expert's moments. The router matrices are shared across
//! experts; their moments are edited column-wise by [`Optimizer::on_adapt`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptReport;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config(format!("adam betas must lie in [0, 1), got ({beta1}, {beta2})")));
            }
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("adam eps must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Matrix<T>,
    v: Matrix<T>,
    t: u64,
}

impl<T: Scalar> Moments<T> {
    fn zeros(shape: (usize, usize)) -> Self {
        Self {
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        kind.validate()?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            state: BTreeMap::new(),
        })
    }

    /// Applies one update to every `(key, param)` pair from its accumulated
    /// gradient. Missing state starts at zero.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Param<T>)>,
    {
        let lr = T::lit(self.lr);
        for (key, p) in params {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    left: p.value.shape(),
                    right: p.grad.shape(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let g = p.grad.clone();
                    p.value.axpy(-lr, &g)?;
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let st = self.state.entry(key).or_insert_with(|| Moments::zeros(p.value.shape()));
                    if st.m.shape() != p.value.shape() {
                        return Err(Error::Inconsistent(format!(
                            "optimizer state for {} has shape {:?}, parameter has {:?}",
                            p.name,
                            st.m.shape(),
                            p.value.shape()
                        )));
                    }
                    st.t += 1;
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::one() - b1.powi(st.t.min(i32::MAX as u64) as i32);
                    let c2 = T::one() - b2.powi(st.t.min(i32::MAX as u64) as i32);
                    let grads = p.grad.as_slice();
                    let m = st.m.as_mut_slice();
                    let v = st.v.as_mut_slice();
                    for (j, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                        let g = grads[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * g;
                        v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops every state entry whose key starts with `prefix`.
    pub fn forget(&mut self, prefix: &str) {
        self.state.retain(|k, _| !k.starts_with(prefix));
    }

    /// Keeps the listed columns of a shared matrix's moments and appends
    /// `added` zero columns.
    pub fn remap_columns(&mut self, key: &str, keep: &[usize], added: usize) -> Result<()> {
        if let Some(st) = self.state.get_mut(key) {
            let mut m = st.m.select_cols(keep);
            let mut v = st.v.select_cols(keep);
            for _ in 0..added {
                let zero = vec![T::zero(); m.rows()];
                m = m.push_col(&zero)?;
                v = v.push_col(&zero)?;
            }
            st.m = m;
            st.v = v;
        }
        Ok(())
    }

    /// Mirrors an adaptation of layer `layer` onto the optimizer state:
    /// removed experts lose their moments, an added expert starts at zero.
    pub fn on_adapt(&mut self, layer: usize, report: &AdaptReport) -> Result<()> {
        for id in &report.removed_ids {
            self.forget(&format!("l{layer}.e{id}."));
        }
        let keep: Vec<usize> = (0..report.previous_k).filter(|e| !report.removed_experts.contains(e)).collect();
        let added = usize::from(report.added);
        for key in [format!("l{layer}.router.w_g"), format!("l{layer}.router.g")] {
            self.remap_columns(&key, &keep, added)?;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// First and second moments stored under `key`.
    pub fn moments(&self, key: &str) -> Option<(&Matrix<T>, &Matrix<T>)> {
        self.state.get(key).map(|s| (&s.m, &s.v))
    }
}
