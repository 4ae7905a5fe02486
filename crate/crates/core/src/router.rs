//! Gating networks.
//!
//! The top-any gate scores every expert independently: the cosine between a
//! token and the expert's representation column is squashed with a sigmoid
//! and compared against the squashed per-expert threshold. An expert fires
//! iff `σ(s) > σ(G)` strictly, so a token may fire any number of experts,
//! including none. The hard comparison has no derivative; its backward pass
//! copies the upstream gradient straight onto `σ(s) − σ(G)`.
//!
//! The fixed top-k softmax gate lives here too, as the comparison baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{cosine_scores, dot, norm, sigmoid_grad, sigmoid_scalar, softmax, Matrix, Param};
use crate::scalar::Scalar;

/// Expert representation matrix (`d×K`, one column per expert) and
/// per-expert thresholds (`1×K`).
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<T> {
    pub w_g: Param<T>,
    pub g: Param<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(w_g: Matrix<T>, thresholds: &[T]) -> Result<Self> {
        let params = Self {
            w_g: Param::new("router.w_g", w_g),
            g: Param::new("router.g", Matrix::row_vector(thresholds)),
        };
        params.validate()?;
        Ok(params)
    }

    /// Unit-norm Gaussian columns and zero thresholds.
    pub fn random<R: Rng + ?Sized>(d: usize, experts: usize, rng: &mut R) -> Result<Self> {
        let mut w = Matrix::random_normal(d, experts, 1.0, rng);
        for (e, n) in w.col_norms().into_iter().enumerate() {
            let col: Vec<T> = w.col(e).into_iter().map(|v| v / n).collect();
            w.set_col(e, &col);
        }
        Self::new(w, &vec![T::zero(); experts])
    }

    #[inline]
    pub fn num_experts(&self) -> usize {
        self.w_g.value.cols()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.w_g.value.rows()
    }

    pub fn thresholds(&self) -> &[T] {
        self.g.value.as_slice()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_experts();
        if k == 0 {
            return Err(Error::Config("router needs at least one expert".into()));
        }
        if self.g.value.shape() != (1, k) {
            return Err(Error::Dimension {
                op: "router thresholds",
                left: self.w_g.value.shape(),
                right: self.g.value.shape(),
            });
        }
        if let Some(e) = self.w_g.value.col_norms().iter().position(|n| !(*n > T::zero())) {
            return Err(Error::Degenerate(format!("router column {e} has zero norm")));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.w_g.zero_grad();
        self.g.zero_grad();
    }

    pub fn num_params(&self) -> usize {
        self.w_g.numel() + self.g.numel()
    }

    pub(crate) fn retain_experts(&mut self, keep: &[usize]) {
        let w = self.w_g.value.select_cols(keep);
        let g = self.g.value.select_cols(keep);
        self.w_g.set_value(w);
        self.g.set_value(g);
    }

    pub(crate) fn push_expert(&mut self, column: &[T], threshold: T) -> Result<()> {
        let w = self.w_g.value.push_col(column)?;
        let g = self.g.value.push_col(&[threshold])?;
        self.w_g.set_value(w);
        self.g.set_value(g);
        Ok(())
    }
}

/// Row-major `N×K` activation indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    tokens: usize,
    experts: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(tokens: usize, experts: usize) -> Self {
        Self {
            tokens,
            experts,
            bits: vec![false; tokens * experts],
        }
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    #[inline]
    pub fn experts(&self) -> usize {
        self.experts
    }

    #[inline]
    pub fn get(&self, i: usize, e: usize) -> bool {
        self.bits[i * self.experts + e]
    }

    #[inline]
    pub fn set(&mut self, i: usize, e: usize, on: bool) {
        self.bits[i * self.experts + e] = on;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.experts..(i + 1) * self.experts]
    }

    /// Experts active for token `i`, ascending.
    pub fn active(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(e, _)| e)
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Number of tokens activating each expert.
    pub fn col_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.experts];
        for i in 0..self.tokens {
            for e in self.active(i) {
                counts[e] += 1;
            }
        }
        counts
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Matrix::from_vec(self.tokens, self.experts, data).expect("mask shape")
    }
}

/// Outcome of the top-any gate on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingDecision<T> {
    pub mask: Mask,
    /// Active experts per token.
    pub k: Vec<usize>,
    /// Raw cosine scores, `N×K`.
    pub s: Matrix<T>,
    /// `σ(s)`, `N×K`.
    pub sig_s: Matrix<T>,
    /// `σ(G)`, length `K`.
    pub sig_g: Vec<T>,
    /// Rows where the evaluation-time top-1 fallback fired.
    pub fallback: Vec<bool>,
}

impl<T: Scalar> GatingDecision<T> {
    pub fn tokens(&self) -> usize {
        self.k.len()
    }

    pub fn experts(&self) -> usize {
        self.sig_g.len()
    }

    pub fn mean_k(&self) -> f64 {
        if self.k.is_empty() {
            return 0.0;
        }
        self.k.iter().sum::<usize>() as f64 / self.k.len() as f64
    }

    /// Checks the structural invariants: `k` equals mask row sums and, off the
    /// fallback rows, the mask is exactly `σ(s) > σ(G)`.
    pub fn check(&self) -> Result<()> {
        for i in 0..self.tokens() {
            if self.k[i] != self.mask.row_count(i) {
                return Err(Error::Inconsistent(format!("token {i}: k disagrees with mask")));
            }
            if self.fallback[i] {
                continue;
            }
            for e in 0..self.experts() {
                if self.mask.get(i, e) != (self.sig_s[(i, e)] > self.sig_g[e]) {
                    return Err(Error::Inconsistent(format!(
                        "token {i}, expert {e}: mask disagrees with threshold"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_tokens<T: Scalar>(tokens: &Matrix<T>, params: &RouterParams<T>) -> Result<()> {
    if tokens.cols() != params.dim() {
        return Err(Error::Dimension {
            op: "route",
            left: tokens.shape(),
            right: params.w_g.value.shape(),
        });
    }
    Ok(())
}

/// Top-any gating used during training: `k = 0` is allowed.
pub fn route_top_any<T: Scalar>(tokens: &Matrix<T>, params: &RouterParams<T>) -> Result<GatingDecision<T>> {
    check_tokens(tokens, params)?;
    let n = tokens.rows();
    let experts = params.num_experts();
    let sig_g: Vec<T> = params.thresholds().iter().map(|&g| sigmoid_scalar(g)).collect();
    let mut s = Matrix::zeros(n, experts);
    let mut sig_s = Matrix::zeros(n, experts);
    let mut mask = Mask::new(n, experts);
    let mut k = vec![0usize; n];
    for i in 0..n {
        let scores = cosine_scores(tokens.row(i), &params.w_g.value)
            .map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("token row {i}: {m}")),
                other => other,
            })?;
        for (e, &se) in scores.iter().enumerate() {
            let q = sigmoid_scalar(se);
            s[(i, e)] = se;
            sig_s[(i, e)] = q;
            if q > sig_g[e] {
                mask.set(i, e, true);
                k[i] += 1;
            }
        }
    }
    Ok(GatingDecision {
        mask,
        k,
        s,
        sig_s,
        sig_g,
        fallback: vec![false; n],
    })
}

/// Top-any gating with the evaluation-time fallback: a token that fires no
/// expert is sent to its highest-scoring expert (lowest index on ties).
pub fn route_eval<T: Scalar>(tokens: &Matrix<T>, params: &RouterParams<T>) -> Result<GatingDecision<T>> {
    let mut decision = route_top_any(tokens, params)?;
    apply_top1_fallback(&mut decision);
    Ok(decision)
}

/// Rewrites every `k = 0` row of a top-any decision as one-hot at
/// `argmax σ(s)`, lowest index first among ties.
pub fn apply_top1_fallback<T: Scalar>(decision: &mut GatingDecision<T>) {
    for i in 0..decision.tokens() {
        if decision.k[i] > 0 {
            continue;
        }
        let row = decision.sig_s.row(i);
        let mut best = 0;
        for (e, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = e;
            }
        }
        decision.mask.set(i, best, true);
        decision.k[i] = 1;
        decision.fallback[i] = true;
    }
}

/// Straight-through backward of the top-any gate.
///
/// `d_mask` is `∂L/∂mask`; it is copied onto `σ(s) − σ(G)` and then chained
/// through the sigmoids and the cosine. `d_sig_s`, when present, is an extra
/// gradient arriving directly at `σ(s)` (score-weighted combine, auxiliary
/// plugins). Gradients accumulate into `params`; the returned matrix is the
/// gradient wrt `tokens`, zero when `detach_input` is set.
pub fn gate_backward<T: Scalar>(
    decision: &GatingDecision<T>,
    d_mask: &Matrix<T>,
    d_sig_s: Option<&Matrix<T>>,
    tokens: &Matrix<T>,
    params: &mut RouterParams<T>,
    detach_input: bool,
) -> Result<Matrix<T>> {
    let shape = (decision.tokens(), decision.experts());
    for (what, m) in [("upstream", Some(d_mask)), ("score upstream", d_sig_s)] {
        if let Some(m) = m {
            if m.shape() != shape {
                return Err(Error::Dimension {
                    op: if what == "upstream" { "gate_backward upstream" } else { "gate_backward score upstream" },
                    left: shape,
                    right: m.shape(),
                });
            }
        }
    }
    if tokens.rows() != shape.0 || params.num_experts() != shape.1 {
        return Err(Error::Dimension {
            op: "gate_backward",
            left: shape,
            right: (tokens.rows(), params.num_experts()),
        });
    }
    check_tokens(tokens, params)?;

    let (n, experts) = shape;
    let d = params.dim();
    let w = &params.w_g.value;
    let col_norms = w.col_norms();
    let sig_g_prime: Vec<T> = params.thresholds().iter().map(|&g| sigmoid_grad(g)).collect();

    let mut grad_w = Matrix::zeros(d, experts);
    let mut grad_g = vec![T::zero(); experts];
    let mut grad_x = Matrix::zeros(n, d);
    let mut w_col = vec![T::zero(); d];

    for i in 0..n {
        let x = tokens.row(i);
        let x_norm = norm(x);
        for e in 0..experts {
            let up = d_mask[(i, e)];
            // ∂L/∂σ(s): straight-through copy plus any direct score gradient
            let d_sig = up + d_sig_s.map_or(T::zero(), |m| m[(i, e)]);
            grad_g[e] -= up * sig_g_prime[e];
            if d_sig == T::zero() {
                continue;
            }
            let s = decision.s[(i, e)];
            let ds = d_sig * sigmoid_grad(s);
            let wn = col_norms[e];
            for (r, wc) in w_col.iter_mut().enumerate() {
                *wc = w[(r, e)];
            }
            // ∂s/∂w_e = x/(|x||w_e|) − s·w_e/|w_e|²
            let a = ds / (x_norm * wn);
            let b = ds * s / (wn * wn);
            for r in 0..d {
                grad_w[(r, e)] += a * x[r] - b * w_col[r];
            }
            if !detach_input {
                // ∂s/∂x = w_e/(|x||w_e|) − s·x/|x|²
                let c = ds * s / (x_norm * x_norm);
                let gx = grad_x.row_mut(i);
                for r in 0..d {
                    gx[r] += a * w_col[r] - c * x[r];
                }
            }
        }
    }

    params.w_g.grad.axpy(T::one(), &grad_w)?;
    for (acc, g) in params.g.grad.as_mut_slice().iter_mut().zip(grad_g) {
        *acc += g;
    }
    Ok(grad_x)
}

/// Straight-through backward with only a mask upstream.
pub fn route_top_any_backward<T: Scalar>(
    decision: &GatingDecision<T>,
    upstream: &Matrix<T>,
    tokens: &Matrix<T>,
    params: &mut RouterParams<T>,
    detach_input: bool,
) -> Result<Matrix<T>> {
    gate_backward(decision, upstream, None, tokens, params, detach_input)
}

/// Outcome of the fixed top-k softmax gate.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKDecision<T> {
    pub mask: Mask,
    pub k: Vec<usize>,
    /// `xᵀW_g`, `N×K`.
    pub logits: Matrix<T>,
    /// Softmax of the logits over all experts.
    pub probs: Matrix<T>,
    /// Selected probabilities renormalized to sum to one; zero elsewhere.
    pub weights: Matrix<T>,
}

impl<T: Scalar> TopKDecision<T> {
    pub fn mean_k(&self) -> f64 {
        if self.k.is_empty() {
            return 0.0;
        }
        self.k.iter().sum::<usize>() as f64 / self.k.len() as f64
    }
}

/// Linear-router softmax gate keeping the `k` largest scores per token
/// (lowest index first among ties).
pub fn route_top_k_baseline<T: Scalar>(tokens: &Matrix<T>, w_g: &Param<T>, k: usize) -> Result<TopKDecision<T>> {
    let experts = w_g.value.cols();
    if k == 0 || k > experts {
        return Err(Error::Config(format!(
            "top-k gate needs 1 <= k <= K, got k={k} with K={experts}"
        )));
    }
    if tokens.cols() != w_g.value.rows() {
        return Err(Error::Dimension {
            op: "route_top_k_baseline",
            left: tokens.shape(),
            right: w_g.value.shape(),
        });
    }
    let n = tokens.rows();
    let logits = crate::numerics::matmul(tokens, &w_g.value)?;
    let mut probs = Matrix::zeros(n, experts);
    let mut weights = Matrix::zeros(n, experts);
    let mut mask = Mask::new(n, experts);
    let mut order: Vec<usize> = (0..experts).collect();
    for i in 0..n {
        let p = softmax(logits.row(i));
        probs.row_mut(i).copy_from_slice(&p);
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let total: T = order[..k].iter().map(|&e| p[e]).sum();
        for &e in &order[..k] {
            mask.set(i, e, true);
            weights[(i, e)] = p[e] / total;
        }
        order.sort_unstable();
    }
    Ok(TopKDecision {
        mask,
        k: vec![k; n],
        logits,
        probs,
        weights,
    })
}

/// Backward of the top-k gate given `∂L/∂weights`. Accumulates into `w_g`
/// and returns the gradient wrt `tokens` (zero when detached).
pub fn top_k_backward<T: Scalar>(
    decision: &TopKDecision<T>,
    d_weights: &Matrix<T>,
    tokens: &Matrix<T>,
    w_g: &mut Param<T>,
    detach_input: bool,
) -> Result<Matrix<T>> {
    if d_weights.shape() != decision.weights.shape() || tokens.rows() != d_weights.rows() {
        return Err(Error::Dimension {
            op: "top_k_backward",
            left: decision.weights.shape(),
            right: d_weights.shape(),
        });
    }
    let (n, experts) = d_weights.shape();
    let d = w_g.value.rows();
    let mut grad_w = Matrix::zeros(d, experts);
    let mut grad_x = Matrix::zeros(n, d);
    let mut d_p = vec![T::zero(); experts];
    let mut d_logit = vec![T::zero(); experts];
    for i in 0..n {
        let p = decision.probs.row(i);
        let wts = decision.weights.row(i);
        let total: T = decision.mask.active(i).map(|e| p[e]).sum();
        // weights_e = p_e / Σ_sel p
        let mean_up: T = decision.mask.active(i).map(|e| d_weights[(i, e)] * wts[e]).sum();
        for e in 0..experts {
            d_p[e] = if decision.mask.get(i, e) {
                (d_weights[(i, e)] - mean_up) / total
            } else {
                T::zero()
            };
        }
        let inner = dot(&d_p, p);
        for e in 0..experts {
            d_logit[e] = p[e] * (d_p[e] - inner);
        }
        let x = tokens.row(i);
        for r in 0..d {
            for e in 0..experts {
                grad_w[(r, e)] += x[r] * d_logit[e];
            }
        }
        if !detach_input {
            for (r, g) in grad_x.row_mut(i).iter_mut().enumerate() {
                *g = dot(w_g.value.row(r), &d_logit);
            }
        }
    }
    w_g.grad.axpy(T::one(), &grad_w)?;
    Ok(grad_x)
}
