//! Mixture-of-experts layer: expert MLPs, dispatch and combine, the full
//! backward pass, activated-parameter accounting, and the layer checkpoint.
//!
//! Top-any combine is the unweighted mean of the active experts,
//! `y = (1/k) Σ_{e active} E_e(x)`, and the zero vector when `k = 0`.
//! Only active (token, expert) pairs are evaluated, in training and in
//! backward alike, so no gradient reaches an inactive pair.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::RoutingRecord;
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, Matrix, Param};
use crate::router::{
    gate_backward, route_eval, route_top_any, route_top_k_baseline, top_k_backward, GatingDecision, Mask,
    RouterParams, TopKDecision,
};
use crate::scalar::Scalar;

pub const LAYER_SCHEMA: &str = "dynmoe.layer/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU
    #[default]
    Gelu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Gelu => {
                let u = gelu_inner(z);
                T::lit(0.5) * z * (T::one() + u.tanh())
            }
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Gelu => {
                let t = gelu_inner(z).tanh();
                let c = T::lit(GELU_C);
                let du = c * (T::one() + T::lit(3.0 * GELU_A) * z * z);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * z * (T::one() - t * t) * du
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_inner<T: Scalar>(z: T) -> T {
    T::lit(GELU_C) * (z + T::lit(GELU_A) * z * z * z)
}

/// Two-layer perceptron `x ↦ act(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMlp<T> {
    /// Stable identity; survives index compaction.
    pub id: u64,
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
    pub activation: Activation,
}

struct ExpertCache<T> {
    pre: Matrix<T>,
    hid: Matrix<T>,
    out: Matrix<T>,
}

impl<T: Scalar> ExpertMlp<T> {
    /// Gaussian weights scaled by fan-in, zero biases.
    pub fn random<R: Rng + ?Sized>(id: u64, d: usize, h: usize, activation: Activation, rng: &mut R) -> Self {
        let w1 = Matrix::random_normal(d, h, (1.0 / d as f64).sqrt(), rng);
        let w2 = Matrix::random_normal(h, d, (1.0 / h as f64).sqrt(), rng);
        Self::from_parts(id, w1, Matrix::zeros(1, h), w2, Matrix::zeros(1, d), activation)
    }

    pub fn from_parts(
        id: u64,
        w1: Matrix<T>,
        b1: Matrix<T>,
        w2: Matrix<T>,
        b2: Matrix<T>,
        activation: Activation,
    ) -> Self {
        Self {
            id,
            w1: Param::new(format!("expert{id}.w1"), w1),
            b1: Param::new(format!("expert{id}.b1"), b1),
            w2: Param::new(format!("expert{id}.w2"), w2),
            b2: Param::new(format!("expert{id}.b2"), b2),
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn validate(&self, d: usize, h: usize) -> Result<()> {
        let want = [(d, h), (1, h), (h, d), (1, d)];
        for (p, w) in self.params().iter().zip(want) {
            if p.value.shape() != w {
                return Err(Error::Dimension {
                    op: "expert shape",
                    left: w,
                    right: p.value.shape(),
                });
            }
        }
        if h == 0 {
            return Err(Error::Config("expert hidden width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> [&Param<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_cached(x)?.out)
    }

    fn forward_cached(&self, x: &Matrix<T>) -> Result<ExpertCache<T>> {
        let mut pre = matmul(x, &self.w1.value)?;
        let b1 = self.b1.value.as_slice();
        for i in 0..pre.rows() {
            for (v, &b) in pre.row_mut(i).iter_mut().zip(b1) {
                *v += b;
            }
        }
        let act = self.activation;
        let hid = pre.map(|z| act.apply(z));
        let mut out = matmul(&hid, &self.w2.value)?;
        let b2 = self.b2.value.as_slice();
        for i in 0..out.rows() {
            for (v, &b) in out.row_mut(i).iter_mut().zip(b2) {
                *v += b;
            }
        }
        Ok(ExpertCache { pre, hid, out })
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    fn backward(&mut self, x: &Matrix<T>, cache: &ExpertCache<T>, d_out: &Matrix<T>) -> Result<Matrix<T>> {
        self.w2.grad.axpy(T::one(), &matmul_tn(&cache.hid, d_out)?)?;
        add_col_sums(&mut self.b2, d_out);
        let mut d_pre = matmul_nt(d_out, &self.w2.value)?;
        let act = self.activation;
        for (g, &z) in d_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g *= act.derivative(z);
        }
        self.w1.grad.axpy(T::one(), &matmul_tn(x, &d_pre)?)?;
        add_col_sums(&mut self.b1, &d_pre);
        matmul_nt(&d_pre, &self.w1.value)
    }
}

fn add_col_sums<T: Scalar>(acc: &mut Param<T>, m: &Matrix<T>) {
    let a = acc.grad.as_mut_slice();
    for i in 0..m.rows() {
        for (v, &g) in a.iter_mut().zip(m.row(i)) {
            *v += g;
        }
    }
}

/// Which gate a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Top-any; tokens may activate nothing.
    Train,
    /// Top-any with the top-1 fallback; every token activates something.
    Eval,
}

/// How the outputs of active experts are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Unweighted mean.
    #[default]
    Mean,
    /// Convex combination weighted by `σ(s)`; ablation only.
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<T> {
    pub d: usize,
    pub h: usize,
    pub router: RouterParams<T>,
    pub experts: Vec<ExpertMlp<T>>,
    pub record: RoutingRecord<T>,
    pub activation: Activation,
    next_id: u64,
}

impl<T: Scalar> MoeLayer<T> {
    pub fn random<R: Rng + ?Sized>(d: usize, h: usize, experts: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if d == 0 || h == 0 || experts == 0 {
            return Err(Error::Config(format!(
                "layer needs positive dimensions, got d={d}, h={h}, K={experts}"
            )));
        }
        let router = RouterParams::random(d, experts, rng)?;
        let experts: Vec<_> = (0..experts as u64)
            .map(|id| ExpertMlp::random(id, d, h, activation, rng))
            .collect();
        let layer = Self {
            d,
            h,
            router,
            record: RoutingRecord::new(d, experts.len()),
            next_id: experts.len() as u64,
            experts,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn from_parts(router: RouterParams<T>, experts: Vec<ExpertMlp<T>>) -> Result<Self> {
        let d = router.dim();
        let h = experts.first().map(|e| e.hidden()).ok_or_else(|| Error::Config("layer needs an expert".into()))?;
        let activation = experts[0].activation;
        let next_id = experts.iter().map(|e| e.id + 1).max().unwrap_or(0);
        let layer = Self {
            d,
            h,
            record: RoutingRecord::new(d, experts.len()),
            router,
            experts,
            activation,
            next_id,
        };
        layer.validate()?;
        Ok(layer)
    }

    #[inline]
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub(crate) fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        let k = self.router.num_experts();
        if self.router.dim() != self.d {
            return Err(Error::Inconsistent(format!(
                "router dimension {} differs from layer dimension {}",
                self.router.dim(),
                self.d
            )));
        }
        if self.experts.len() != k || self.record.r_e.len() != k {
            return Err(Error::Inconsistent(format!(
                "expert count mismatch: router {k}, experts {}, record {}",
                self.experts.len(),
                self.record.r_e.len()
            )));
        }
        for e in &self.experts {
            e.validate(self.d, self.h)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.router.zero_grad();
        for e in &mut self.experts {
            e.zero_grad();
        }
    }

    pub fn expert_params(&self) -> usize {
        2 * self.d * self.h + self.h + self.d
    }

    pub fn to_checkpoint(&self) -> LayerCheckpoint<T> {
        LayerCheckpoint {
            schema: LAYER_SCHEMA.to_string(),
            d: self.d,
            h: self.h,
            experts: self.num_experts(),
            w_g: self.router.w_g.value.clone(),
            thresholds: self.router.thresholds().to_vec(),
            expert_weights: self
                .experts
                .iter()
                .map(|e| ExpertCheckpoint {
                    id: e.id,
                    activation: e.activation,
                    w1: e.w1.value.clone(),
                    b1: e.b1.value.clone(),
                    w2: e.w2.value.clone(),
                    b2: e.b2.value.clone(),
                })
                .collect(),
            next_id: self.next_id,
        }
    }

    pub fn from_checkpoint(ck: LayerCheckpoint<T>) -> Result<Self> {
        if ck.schema != LAYER_SCHEMA {
            return Err(Error::Schema {
                found: ck.schema,
                expected: LAYER_SCHEMA,
            });
        }
        if ck.expert_weights.len() != ck.experts || ck.thresholds.len() != ck.experts {
            return Err(Error::Inconsistent("checkpoint expert count disagrees with its tensors".into()));
        }
        let router = RouterParams::new(ck.w_g, &ck.thresholds)?;
        let experts = ck
            .expert_weights
            .into_iter()
            .map(|e| ExpertMlp::from_parts(e.id, e.w1, e.b1, e.w2, e.b2, e.activation))
            .collect();
        let mut layer = Self::from_parts(router, experts)?;
        if layer.d != ck.d || layer.h != ck.h {
            return Err(Error::Inconsistent("checkpoint dimensions disagree with its tensors".into()));
        }
        layer.next_id = layer.next_id.max(ck.next_id);
        Ok(layer)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ck: LayerCheckpoint<T> = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_checkpoint(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExpertCheckpoint<T> {
    pub id: u64,
    pub activation: Activation,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

/// Versioned on-disk form of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerCheckpoint<T> {
    pub schema: String,
    pub d: usize,
    pub h: usize,
    pub experts: usize,
    pub w_g: Matrix<T>,
    pub thresholds: Vec<T>,
    pub expert_weights: Vec<ExpertCheckpoint<T>>,
    pub next_id: u64,
}

fn check_tokens<T: Scalar>(layer: &MoeLayer<T>, tokens: &Matrix<T>) -> Result<()> {
    if tokens.cols() != layer.d {
        return Err(Error::Dimension {
            op: "moe_forward",
            left: tokens.shape(),
            right: (layer.d, layer.num_experts()),
        });
    }
    layer.validate()
}

/// Combine weights per (token, expert); zero off the mask.
fn combine_weights<T: Scalar>(decision: &GatingDecision<T>, combine: Combine) -> Matrix<T> {
    let (n, experts) = (decision.tokens(), decision.experts());
    let mut w = Matrix::zeros(n, experts);
    for i in 0..n {
        match combine {
            Combine::Mean => {
                if decision.k[i] == 0 {
                    continue;
                }
                let inv = T::one() / T::from_usize_lossy(decision.k[i]);
                for e in decision.mask.active(i) {
                    w[(i, e)] = inv;
                }
            }
            Combine::Weighted => {
                let total: T = decision.mask.active(i).map(|e| decision.sig_s[(i, e)]).sum();
                for e in decision.mask.active(i) {
                    w[(i, e)] = decision.sig_s[(i, e)] / total;
                }
            }
        }
    }
    w
}

fn gather_rows<T: Scalar>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn tokens_per_expert(mask: &Mask) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); mask.experts()];
    for i in 0..mask.tokens() {
        for e in mask.active(i) {
            lists[e].push(i);
        }
    }
    lists
}

/// Runs each expert on its assigned tokens and mixes with `weights`.
fn dispatch_combine<T: Scalar>(layer: &MoeLayer<T>, tokens: &Matrix<T>, mask: &Mask, weights: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(tokens.rows(), layer.d);
    for (e, rows) in tokens_per_expert(mask).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let y = layer.experts[e].forward(&gather_rows(tokens, &rows))?;
        for (r, &i) in rows.iter().enumerate() {
            let c = weights[(i, e)];
            for (o, &v) in out.row_mut(i).iter_mut().zip(y.row(r)) {
                *o += c * v;
            }
        }
    }
    Ok(out)
}

/// Backward through dispatch/combine. Returns `∂L/∂weights` on active pairs
/// and the token gradient flowing through the experts.
fn dispatch_combine_backward<T: Scalar>(
    layer: &mut MoeLayer<T>,
    tokens: &Matrix<T>,
    mask: &Mask,
    weights: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut d_weights = Matrix::zeros(mask.tokens(), mask.experts());
    let mut d_tokens = Matrix::zeros(tokens.rows(), layer.d);
    for (e, rows) in tokens_per_expert(mask).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let x = gather_rows(tokens, &rows);
        let expert = &mut layer.experts[e];
        let cache = expert.forward_cached(&x)?;
        let mut d_out = Matrix::zeros(rows.len(), layer.d);
        for (r, &i) in rows.iter().enumerate() {
            d_weights[(i, e)] = dot(upstream.row(i), cache.out.row(r));
            let c = weights[(i, e)];
            for (g, &u) in d_out.row_mut(r).iter_mut().zip(upstream.row(i)) {
                *g = c * u;
            }
        }
        let dx = expert.backward(&x, &cache, &d_out)?;
        for (r, &i) in rows.iter().enumerate() {
            for (a, &v) in d_tokens.row_mut(i).iter_mut().zip(dx.row(r)) {
                *a += v;
            }
        }
    }
    Ok((d_weights, d_tokens))
}

/// Top-any forward with the chosen combine rule.
pub fn forward_top_any<T: Scalar>(
    layer: &MoeLayer<T>,
    tokens: &Matrix<T>,
    mode: Mode,
    combine: Combine,
) -> Result<(Matrix<T>, GatingDecision<T>)> {
    check_tokens(layer, tokens)?;
    let decision = match mode {
        Mode::Train => route_top_any(tokens, &layer.router)?,
        Mode::Eval => route_eval(tokens, &layer.router)?,
    };
    let weights = combine_weights(&decision, combine);
    let out = dispatch_combine(layer, tokens, &decision.mask, &weights)?;
    Ok((out, decision))
}

/// Unweighted-mean top-any forward.
pub fn moe_forward<T: Scalar>(layer: &MoeLayer<T>, tokens: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, GatingDecision<T>)> {
    forward_top_any(layer, tokens, mode, Combine::Mean)
}

/// Score-weighted top-any forward, for the combine ablation.
pub fn moe_forward_weighted<T: Scalar>(layer: &MoeLayer<T>, tokens: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, GatingDecision<T>)> {
    forward_top_any(layer, tokens, mode, Combine::Weighted)
}

/// Extra router gradients from auxiliary plugins.
#[derive(Debug, Default)]
pub struct RouterExtra<'a, T> {
    pub d_mask: Option<&'a Matrix<T>>,
    pub d_sig_s: Option<&'a Matrix<T>>,
}

/// Backward of [`forward_top_any`]; accumulates every parameter gradient and
/// returns `∂L/∂tokens`.
///
/// The mean combine is differentiated as a function of a real-valued mask
/// over the active pairs, `y = Σ m_e E_e / Σ m_e`, giving
/// `∂L/∂m_e = ⟨∂L/∂y, E_e − y⟩ / k`; that is then fed through the
/// straight-through gate.
pub fn moe_backward<T: Scalar>(
    layer: &mut MoeLayer<T>,
    decision: &GatingDecision<T>,
    tokens: &Matrix<T>,
    upstream: &Matrix<T>,
    combine: Combine,
    detach_router_input: bool,
) -> Result<Matrix<T>> {
    moe_backward_with(layer, decision, tokens, upstream, combine, detach_router_input, RouterExtra::default())
}

pub fn moe_backward_with<T: Scalar>(
    layer: &mut MoeLayer<T>,
    decision: &GatingDecision<T>,
    tokens: &Matrix<T>,
    upstream: &Matrix<T>,
    combine: Combine,
    detach_router_input: bool,
    extra: RouterExtra<'_, T>,
) -> Result<Matrix<T>> {
    let (n, experts) = (decision.tokens(), decision.experts());
    if experts != layer.num_experts() || tokens.rows() != n || upstream.shape() != (n, layer.d) {
        return Err(Error::Dimension {
            op: "moe_backward",
            left: (n, experts),
            right: (upstream.rows(), layer.num_experts()),
        });
    }
    check_tokens(layer, tokens)?;
    let weights = combine_weights(decision, combine);
    let (d_weights, mut d_tokens) = dispatch_combine_backward(layer, tokens, &decision.mask, &weights, upstream)?;

    let mut d_mask = Matrix::zeros(n, experts);
    let mut d_sig = match combine {
        Combine::Mean => None,
        Combine::Weighted => Some(Matrix::zeros(n, experts)),
    };
    for i in 0..n {
        if decision.k[i] == 0 {
            continue;
        }
        // Σ_e w_e a_e == ⟨∂L/∂y, y⟩
        let gy: T = decision.mask.active(i).map(|e| weights[(i, e)] * d_weights[(i, e)]).sum();
        match combine {
            Combine::Mean => {
                let k = T::from_usize_lossy(decision.k[i]);
                for e in decision.mask.active(i) {
                    d_mask[(i, e)] = (d_weights[(i, e)] - gy) / k;
                }
            }
            Combine::Weighted => {
                let total: T = decision.mask.active(i).map(|e| decision.sig_s[(i, e)]).sum();
                let ds = d_sig.as_mut().expect("weighted combine");
                for e in decision.mask.active(i) {
                    let r = (d_weights[(i, e)] - gy) / total;
                    ds[(i, e)] = r;
                    d_mask[(i, e)] = decision.sig_s[(i, e)] * r;
                }
            }
        }
    }
    if let Some(m) = extra.d_mask {
        d_mask.axpy(T::one(), m)?;
    }
    if let Some(s) = extra.d_sig_s {
        match d_sig.as_mut() {
            Some(ds) => ds.axpy(T::one(), s)?,
            None => d_sig = Some(s.clone()),
        }
    }
    let d_router = gate_backward(decision, &d_mask, d_sig.as_ref(), tokens, &mut layer.router, detach_router_input)?;
    d_tokens.axpy(T::one(), &d_router)?;
    Ok(d_tokens)
}

/// Fixed top-k forward: linear softmax router, renormalized weights.
pub fn topk_forward<T: Scalar>(layer: &MoeLayer<T>, tokens: &Matrix<T>, k: usize) -> Result<(Matrix<T>, TopKDecision<T>)> {
    check_tokens(layer, tokens)?;
    let decision = route_top_k_baseline(tokens, &layer.router.w_g, k)?;
    let out = dispatch_combine(layer, tokens, &decision.mask, &decision.weights)?;
    Ok((out, decision))
}

pub fn topk_backward<T: Scalar>(
    layer: &mut MoeLayer<T>,
    decision: &TopKDecision<T>,
    tokens: &Matrix<T>,
    upstream: &Matrix<T>,
    detach_router_input: bool,
) -> Result<Matrix<T>> {
    if decision.weights.cols() != layer.num_experts() || upstream.shape() != (tokens.rows(), layer.d) {
        return Err(Error::Dimension {
            op: "topk_backward",
            left: decision.weights.shape(),
            right: upstream.shape(),
        });
    }
    let (d_weights, mut d_tokens) = dispatch_combine_backward(layer, tokens, &decision.mask, &decision.weights, upstream)?;
    let d_router = top_k_backward(decision, &d_weights, tokens, &mut layer.router.w_g, detach_router_input)?;
    d_tokens.axpy(T::one(), &d_router)?;
    Ok(d_tokens)
}

/// Mean over tokens of `router params + k_i × params per expert`.
pub fn count_activated_params<T: Scalar>(layer: &MoeLayer<T>, k: &[usize]) -> f64 {
    if k.is_empty() {
        return layer.router.num_params() as f64;
    }
    let mean_k = k.iter().sum::<usize>() as f64 / k.len() as f64;
    layer.router.num_params() as f64 + mean_k * layer.expert_params() as f64
}
