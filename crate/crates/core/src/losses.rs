//! Auxiliary router losses.
//!
//! The built-in term regularizes the expert representation matrix:
//!
//! ```text
//! L_aux = ‖W_gᵀW_g − I_K‖_F + (1/K) Σ_e ‖w_e‖₂
//!          (diversity)         (simplicity)
//! ```
//!
//! The gram residual is measured with the Frobenius norm. Additional
//! balance/efficiency penalties plug in through [`AuxLossPlugin`]; the two
//! provided plugins are conventional substitutes, not part of the gating
//! method itself.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_tn, Matrix, Param};
use crate::router::{GatingDecision, Mask, RouterParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuxLossReport {
    pub diversity: f64,
    pub simplicity: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl AuxLossReport {
    pub fn add_extra(&mut self, name: &str, value: f64) {
        *self.extra.entry(name.to_string()).or_default() += value;
        self.total += value;
    }

    /// Sums component-wise; used to aggregate over layers.
    pub fn accumulate(&mut self, other: &AuxLossReport) {
        self.diversity += other.diversity;
        self.simplicity += other.simplicity;
        self.total += other.total;
        for (k, v) in &other.extra {
            *self.extra.entry(k.clone()).or_default() += v;
        }
    }
}

/// Value and gradient of the diversity + simplicity loss at `w` (`d×K`).
///
/// At points where a norm vanishes (orthonormal columns for the diversity
/// term, a zero column for the simplicity term) the zero subgradient is used.
pub fn diversity_simplicity<T: Scalar>(w: &Matrix<T>) -> Result<(AuxLossReport, Matrix<T>)> {
    let experts = w.cols();
    if experts == 0 {
        return Err(Error::Config("diversity loss needs K >= 1".into()));
    }
    let mut residual = matmul_tn(w, w)?;
    for e in 0..experts {
        residual[(e, e)] -= T::one();
    }
    let diversity = residual.frobenius_norm();
    // ∂‖R‖_F/∂W = 2·W·R / ‖R‖_F  (R symmetric)
    let mut grad = if diversity > T::zero() {
        matmul(w, &residual)?.scale(T::lit(2.0) / diversity)
    } else {
        Matrix::zeros(w.rows(), experts)
    };

    let k = T::from_usize_lossy(experts);
    let norms = w.col_norms();
    let simplicity = norms.iter().copied().sum::<T>() / k;
    for (e, &n) in norms.iter().enumerate() {
        if n > T::zero() {
            for r in 0..w.rows() {
                grad[(r, e)] += w[(r, e)] / (k * n);
            }
        }
    }

    let report = AuxLossReport {
        diversity: diversity.as_f64(),
        simplicity: simplicity.as_f64(),
        total: (diversity + simplicity).as_f64(),
        extra: BTreeMap::new(),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("diversity/simplicity loss".into()));
    }
    Ok((report, grad))
}

/// Evaluates the loss on `w_g` and accumulates its gradient.
pub fn diversity_simplicity_loss<T: Scalar>(w_g: &mut Param<T>) -> Result<AuxLossReport> {
    diversity_simplicity_loss_weighted(w_g, T::one())
}

/// As [`diversity_simplicity_loss`], accumulating `weight · ∇L`. The report
/// holds the unweighted values.
pub fn diversity_simplicity_loss_weighted<T: Scalar>(w_g: &mut Param<T>, weight: T) -> Result<AuxLossReport> {
    let (report, grad) = diversity_simplicity(&w_g.value)?;
    w_g.grad.axpy(weight, &grad)?;
    Ok(report)
}

/// `K · Σ_e f_e · P_e`: `f_e` is the fraction of tokens activating `e`,
/// `P_e` the mean of column `e` of `softscores`.
pub fn gshard_style_balance_loss<T: Scalar>(mask: &Mask, softscores: &Matrix<T>) -> Result<T> {
    let (frac, _) = balance_terms(mask, softscores)?;
    let n = T::from_usize_lossy(mask.tokens());
    let k = T::from_usize_lossy(mask.experts());
    let mut total = T::zero();
    for (e, f) in frac.iter().enumerate() {
        let p: T = (0..mask.tokens()).map(|i| softscores[(i, e)]).sum::<T>() / n;
        total += *f * p;
    }
    Ok(k * total)
}

fn balance_terms<T: Scalar>(mask: &Mask, softscores: &Matrix<T>) -> Result<(Vec<T>, T)> {
    if mask.tokens() == 0 {
        return Err(Error::Empty("balance loss over an empty batch"));
    }
    if softscores.shape() != (mask.tokens(), mask.experts()) {
        return Err(Error::Dimension {
            op: "gshard_style_balance_loss",
            left: (mask.tokens(), mask.experts()),
            right: softscores.shape(),
        });
    }
    if !softscores.is_finite() {
        return Err(Error::NonFinite("balance loss scores".into()));
    }
    let n = T::from_usize_lossy(mask.tokens());
    let frac = mask.col_counts().into_iter().map(|c| T::lit(c as f64) / n).collect();
    Ok((frac, n))
}

/// One auxiliary term produced by a plugin.
#[derive(Debug, Clone)]
pub struct AuxTerm<T> {
    pub value: T,
    /// Gradient arriving at `σ(s)`.
    pub d_sig_s: Option<Matrix<T>>,
    /// Gradient arriving at the activation mask (goes through the
    /// straight-through path).
    pub d_mask: Option<Matrix<T>>,
}

/// A named extra router loss.
pub trait AuxLossPlugin<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn evaluate(
        &self,
        decision: &GatingDecision<T>,
        sig_s: &Matrix<T>,
        router: &RouterParams<T>,
    ) -> Result<AuxTerm<T>>;
}

/// Switch/GShard-style balance penalty on row-normalized `σ(s)`, with the
/// activation fractions treated as constants. Not part of the top-any method;
/// offered as a conventional substitute.
#[derive(Debug, Clone, Copy)]
pub struct GShardBalance {
    pub weight: f64,
}

impl<T: Scalar> AuxLossPlugin<T> for GShardBalance {
    fn name(&self) -> &str {
        "gshard_balance"
    }

    fn evaluate(&self, decision: &GatingDecision<T>, sig_s: &Matrix<T>, _router: &RouterParams<T>) -> Result<AuxTerm<T>> {
        let (n_tok, experts) = sig_s.shape();
        let mut q = sig_s.clone();
        let mut z = vec![T::zero(); n_tok];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = sig_s.row(i).iter().copied().sum();
            for v in q.row_mut(i) {
                *v /= *zi;
            }
        }
        let value = gshard_style_balance_loss(&decision.mask, &q)?;
        let (frac, n) = balance_terms(&decision.mask, &q)?;
        let w = T::lit(self.weight);
        let k = T::from_usize_lossy(experts);
        let mut d_sig = Matrix::zeros(n_tok, experts);
        for i in 0..n_tok {
            let dq: Vec<T> = frac.iter().map(|&f| w * k * f / n).collect();
            let inner: T = dq.iter().zip(q.row(i)).map(|(&a, &b)| a * b).sum();
            for e in 0..experts {
                d_sig[(i, e)] = (dq[e] - inner) / z[i];
            }
        }
        Ok(AuxTerm {
            value: w * value,
            d_sig_s: Some(d_sig),
            d_mask: None,
        })
    }
}

/// `weight · mean(k)`, pushing thresholds up through the straight-through
/// path. A conventional efficiency substitute, not part of the gating method.
#[derive(Debug, Clone, Copy)]
pub struct MeanKEfficiency {
    pub weight: f64,
}

impl<T: Scalar> AuxLossPlugin<T> for MeanKEfficiency {
    fn name(&self) -> &str {
        "mean_k_efficiency"
    }

    fn evaluate(&self, decision: &GatingDecision<T>, _sig_s: &Matrix<T>, _router: &RouterParams<T>) -> Result<AuxTerm<T>> {
        let n = decision.tokens();
        if n == 0 {
            return Err(Error::Empty("efficiency loss over an empty batch"));
        }
        let w = T::lit(self.weight);
        let mut d_mask = Matrix::zeros(n, decision.experts());
        d_mask.fill(w / T::from_usize_lossy(n));
        Ok(AuxTerm {
            value: w * T::lit(decision.mean_k()),
            d_sig_s: None,
            d_mask: Some(d_mask),
        })
    }
}

/// Plugin selection as it appears in run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PluginSpec {
    GshardBalance { weight: f64 },
    MeanKEfficiency { weight: f64 },
}

impl PluginSpec {
    pub fn build<T: Scalar>(&self) -> Box<dyn AuxLossPlugin<T>> {
        match *self {
            PluginSpec::GshardBalance { weight } => Box::new(GShardBalance { weight }),
            PluginSpec::MeanKEfficiency { weight } => Box::new(MeanKEfficiency { weight }),
        }
    }
}
