//! Planted-skill tasks, the residual MoE classifier, and the training loop.
//!
//! A task plants `n_skills` orthonormal directions `μ_s`. A token of skill
//! `s` is `μ_s + r·n` where `n` is a unit vector orthogonal to every skill
//! direction, and its label is `1[⟨u_s, x⟩ > 0]` for a per-skill unit rule
//! `u_s`, also orthogonal to the skills. Hence for `r < 1/√2`:
//!
//! ```text
//! in-skill cosine    ≥ (1 − r²) / (1 + r²)
//! cross-skill cosine ≤ r² / (1 + r²)
//! ```
//!
//! The model is `h₀ = x`, `h_{l+1} = h_l + moe_l(h_l)`, followed by a linear
//! softmax head trained with cross-entropy.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{adapt, AdaptConfig};
use crate::error::{Error, Result};
use crate::losses::{diversity_simplicity_loss_weighted, AuxLossPlugin, AuxLossReport, PluginSpec};
use crate::moe::{
    count_activated_params, forward_top_any, moe_backward_with, topk_backward, topk_forward, Activation, Combine,
    LayerCheckpoint, Mode, MoeLayer, RouterExtra,
};
use crate::numerics::{dot, matmul, matmul_nt, matmul_tn, Matrix, Param};
use crate::optim::{Optimizer, OptimizerKind};
use crate::router::{GatingDecision, Mask, TopKDecision};
use crate::scalar::Scalar;
use crate::telemetry::{
    activation_frequency, expert_similarity_matrix, gate_threshold_dump, mean_k, names, ratio_to_f64, topk_frequency,
    write_jsonl, AdaptEvent, Frequency, KPoint, KTrajectory, MetricsLog, SimilaritySnapshot, TRAJECTORY_SCHEMA,
};

pub const CHECKPOINT_SCHEMA: &str = "dynmoe.checkpoint/1";
pub const RESULT_SCHEMA: &str = "dynmoe.result/1";
pub const SWEEP_SCHEMA: &str = "dynmoe.sweep/1";

/// Labels are binary.
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_skills: usize,
    pub d: usize,
    pub n_samples: usize,
    /// Norm `r` of the off-skill component of every token.
    pub noise: f64,
    pub seed: u64,
    /// Fraction of samples held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_skills: 4,
            d: 16,
            n_samples: 8000,
            noise: 0.5,
            seed: 0,
            eval_fraction: 0.2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_skills == 0 || self.d == 0 {
            return Err(Error::Config("task needs n_skills >= 1 and d >= 1".into()));
        }
        if self.n_skills > self.d {
            return Err(Error::Config(format!(
                "cannot plant {} orthogonal skill directions in dimension {}",
                self.n_skills, self.d
            )));
        }
        if !(0.0..std::f64::consts::FRAC_1_SQRT_2).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1/sqrt(2)), got {}", self.noise)));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!("eval_fraction must lie in (0, 1), got {}", self.eval_fraction)));
        }
        let held = self.held_out();
        if held == 0 || held >= self.n_samples {
            return Err(Error::Config(format!(
                "{} samples cannot be split with eval_fraction {}",
                self.n_samples, self.eval_fraction
            )));
        }
        Ok(())
    }

    fn held_out(&self) -> usize {
        (self.n_samples as f64 * self.eval_fraction).round() as usize
    }

    /// Lower bound on the cosine between two tokens of one skill.
    pub fn in_skill_margin(&self) -> f64 {
        let r2 = self.noise * self.noise;
        (1.0 - r2) / (1.0 + r2)
    }

    /// Upper bound on the cosine between tokens of different skills.
    pub fn cross_skill_bound(&self) -> f64 {
        let r2 = self.noise * self.noise;
        r2 / (1.0 + r2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask<T> {
    pub config: TaskConfig,
    /// `n_skills × d`, orthonormal rows.
    pub skill_dirs: Matrix<T>,
    /// `n_skills × d`; empty rows when no off-skill dimension exists.
    pub rules: Matrix<T>,
    pub tokens: Matrix<T>,
    pub skills: Vec<usize>,
    pub labels: Vec<usize>,
    /// Samples `[0, n_train)` train; the rest evaluate.
    pub n_train: usize,
}

/// Labelled rows of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub tokens: Matrix<T>,
    pub labels: Vec<usize>,
}

fn unit(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n < 1e-8 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Orthonormal basis of `R^d` from Gaussian draws, Gram-Schmidt applied twice.
fn random_basis<R: Rng>(d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        if unit(&mut v) {
            basis.push(v);
        }
    }
    basis
}

/// Random unit vector in the span of `basis`.
fn random_in_span<R: Rng>(basis: &[Vec<f64>], d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; d];
        for b in basis {
            let c: f64 = rng.sample(StandardNormal);
            v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        if unit(&mut v) {
            return v;
        }
    }
}

/// Task with default noise and split.
pub fn gen_task(n_skills: usize, d: usize, n_samples: usize, seed: u64) -> Result<SyntheticTask<f64>> {
    gen_task_with(&TaskConfig {
        n_skills,
        d,
        n_samples,
        seed,
        ..TaskConfig::default()
    })
}

pub fn gen_task_with<T: Scalar>(cfg: &TaskConfig) -> Result<SyntheticTask<T>> {
    cfg.validate()?;
    let (s, d, n) = (cfg.n_skills, cfg.d, cfg.n_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = random_basis(d, &mut rng);
    let (skill_basis, complement) = basis.split_at(s);
    let rules: Vec<Vec<f64>> = (0..s)
        .map(|_| {
            if complement.is_empty() {
                vec![0.0; d]
            } else {
                random_in_span(complement, d, &mut rng)
            }
        })
        .collect();

    let mut tokens = Matrix::zeros(n, d);
    let mut skills = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let sk = rng.random_range(0..s);
        let mut x = skill_basis[sk].clone();
        if !complement.is_empty() && cfg.noise > 0.0 {
            let noise = random_in_span(complement, d, &mut rng);
            x.iter_mut().zip(&noise).for_each(|(a, b)| *a += cfg.noise * b);
        }
        let label = if complement.is_empty() {
            sk % 2
        } else {
            usize::from(dot(&rules[sk], &x) > 0.0)
        };
        for (t, v) in tokens.row_mut(i).iter_mut().zip(&x) {
            *t = T::lit(*v);
        }
        skills.push(sk);
        labels.push(label);
    }
    let to_t = |rows: &[Vec<f64>]| -> Matrix<T> {
        let mut m = Matrix::zeros(rows.len(), d);
        for (i, r) in rows.iter().enumerate() {
            for (t, v) in m.row_mut(i).iter_mut().zip(r) {
                *t = T::lit(*v);
            }
        }
        m
    };
    Ok(SyntheticTask {
        config: cfg.clone(),
        skill_dirs: to_t(skill_basis),
        rules: to_t(&rules),
        tokens,
        skills,
        labels,
        n_train: n - cfg.held_out(),
    })
}

impl<T: Scalar> SyntheticTask<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        let d = self.tokens.cols();
        let mut tokens = Matrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            tokens.row_mut(r).copy_from_slice(self.tokens.row(i));
        }
        Batch {
            tokens,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn train_batch(&self) -> Batch<T> {
        self.batch(&(0..self.n_train).collect::<Vec<_>>())
    }

    pub fn eval_batch(&self) -> Batch<T> {
        self.batch(&(self.n_train..self.len()).collect::<Vec<_>>())
    }

    /// The planted rule applied to a token of a known skill.
    pub fn label_of(&self, token: &[T], skill: usize) -> usize {
        if self.config.n_skills == self.config.d {
            return skill % 2;
        }
        let v: T = self.rules.row(skill).iter().zip(token).map(|(&a, &b)| a * b).sum();
        usize::from(v > T::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// Top-any gating with trainable thresholds and adaptive expert counts.
    #[default]
    Dynmoe,
    /// Fixed softmax top-k gating.
    Topk,
}

impl std::str::FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynmoe" => Ok(Self::Dynmoe),
            "topk" => Ok(Self::Topk),
            other => Err(Error::Config(format!("unknown router {other:?} (expected dynmoe or topk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub initial_experts: usize,
    pub router: RouterKind,
    /// Experts per token for the top-k router.
    pub top_k: usize,
    pub combine: Combine,
    pub activation: Activation,
    /// Stop router gradients from reaching the layer input.
    pub detach_router_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            layers: 1,
            initial_experts: 2,
            router: RouterKind::Dynmoe,
            top_k: 2,
            combine: Combine::Mean,
            activation: Activation::Gelu,
            detach_router_input: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.initial_experts == 0 {
            return Err(Error::Config("hidden and initial_experts must be positive".into()));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be 1 or 2, got {}", self.layers)));
        }
        if self.router == RouterKind::Topk && !(1..=self.initial_experts).contains(&self.top_k) {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= k <= K, got k={} with K={}",
                self.top_k, self.initial_experts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the diversity + simplicity term.
    pub aux_loss_weight: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub plugins: Vec<PluginSpec>,
    pub adapt: AdaptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::default(),
            aux_loss_weight: 1.0,
            seed: 0,
            eval_every: 100,
            plugins: Vec::new(),
            adapt: AdaptConfig {
                max_experts: 8,
                ..AdaptConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::Config(format!("aux_loss_weight must be finite and >= 0, got {}", self.aux_loss_weight)));
        }
        self.optimizer.validate()?;
        self.adapt.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub experts: Vec<usize>,
    pub top_k: Vec<usize>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let min_experts = self.experts.iter().copied().min().unwrap_or(0);
        let max_k = self.top_k.iter().copied().max().unwrap_or(0);
        if min_experts == 0 || self.top_k.contains(&0) || max_k > min_experts {
            return Err(Error::Config(format!(
                "sweep grid needs 1 <= k <= K for every pair, got K in {:?}, k in {:?}",
                self.experts, self.top_k
            )));
        }
        Ok(())
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experts: vec![2, 4, 8],
            top_k: vec![1, 2],
        }
    }
}

/// Everything one run needs; the TOML document the CLI consumes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if self.train.adapt.enabled
            && self.model.router == RouterKind::Dynmoe
            && !(self.train.adapt.min_experts..=self.train.adapt.max_experts).contains(&self.model.initial_experts)
        {
            return Err(Error::Config(format!(
                "initial_experts {} outside [min_experts, max_experts] = [{}, {}]",
                self.model.initial_experts, self.train.adapt.min_experts, self.train.adapt.max_experts
            )));
        }
        Ok(())
    }

    fn adaptive(&self) -> bool {
        self.model.router == RouterKind::Dynmoe && self.train.adapt.enabled
    }
}

/// Routing outcome of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDecision<T> {
    TopAny(GatingDecision<T>),
    TopK(TopKDecision<T>),
}

impl<T: Scalar> LayerDecision<T> {
    pub fn mask(&self) -> &Mask {
        match self {
            LayerDecision::TopAny(d) => &d.mask,
            LayerDecision::TopK(d) => &d.mask,
        }
    }

    pub fn k(&self) -> &[usize] {
        match self {
            LayerDecision::TopAny(d) => &d.k,
            LayerDecision::TopK(d) => &d.k,
        }
    }

    pub fn mean_k(&self) -> f64 {
        match self {
            LayerDecision::TopAny(d) => d.mean_k(),
            LayerDecision::TopK(d) => d.mean_k(),
        }
    }
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Input of each MoE layer.
    pub inputs: Vec<Matrix<T>>,
    pub decisions: Vec<LayerDecision<T>>,
    pub hidden: Matrix<T>,
    pub logits: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layers: Vec<MoeLayer<T>>,
    /// `d × classes`.
    pub head_w: Param<T>,
    pub head_b: Param<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelCheckpoint<T> {
    pub schema: String,
    pub model: ModelConfig,
    pub layers: Vec<LayerCheckpoint<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, classes: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|_| MoeLayer::random(d, cfg.hidden, cfg.initial_experts, cfg.activation, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = Matrix::random_normal(d, classes, 1.0 / (d as f64).sqrt(), rng);
        Ok(Self {
            config: cfg.clone(),
            layers,
            head_w: Param::new("head.w", head_w),
            head_b: Param::new("head.b", Matrix::zeros(1, classes)),
        })
    }

    pub fn dim(&self) -> usize {
        self.head_w.value.rows()
    }

    pub fn experts(&self) -> Vec<usize> {
        self.layers.iter().map(MoeLayer::num_experts).collect()
    }

    pub fn forward(&self, x: &Matrix<T>, mode: Mode) -> Result<Forward<T>> {
        let mut h = x.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut decisions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, dec) = match self.config.router {
                RouterKind::Dynmoe => {
                    let (o, d) = forward_top_any(layer, &h, mode, self.config.combine)?;
                    (o, LayerDecision::TopAny(d))
                }
                RouterKind::Topk => {
                    let (o, d) = topk_forward(layer, &h, self.config.top_k)?;
                    (o, LayerDecision::TopK(d))
                }
            };
            let next = h.add(&out)?;
            inputs.push(std::mem::replace(&mut h, next));
            decisions.push(dec);
        }
        let mut logits = matmul(&h, &self.head_w.value)?;
        for i in 0..logits.rows() {
            for (v, &b) in logits.row_mut(i).iter_mut().zip(self.head_b.value.as_slice()) {
                *v += b;
            }
        }
        Ok(Forward {
            inputs,
            decisions,
            hidden: h,
            logits,
        })
    }

    /// Argmax class per row; ties go to the lower class.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x, Mode::Eval)?.logits))
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.zero_grad();
        }
        self.head_w.zero_grad();
        self.head_b.zero_grad();
    }

    /// Every trainable tensor under its stable optimizer key.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let MoeLayer { router, experts, .. } = layer;
            out.push((format!("l{l}.router.w_g"), &mut router.w_g));
            out.push((format!("l{l}.router.g"), &mut router.g));
            for e in experts.iter_mut() {
                let id = e.id;
                for (name, p) in ["w1", "b1", "w2", "b2"].into_iter().zip(e.params_mut()) {
                    out.push((format!("l{l}.e{id}.{name}"), p));
                }
            }
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint<T> {
        ModelCheckpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            model: self.config.clone(),
            layers: self.layers.iter().map(MoeLayer::to_checkpoint).collect(),
            head_w: self.head_w.value.clone(),
            head_b: self.head_b.value.clone(),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint<T>) -> Result<Self> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Schema {
                found: ck.schema,
                expected: CHECKPOINT_SCHEMA,
            });
        }
        let layers = ck.layers.into_iter().map(MoeLayer::from_checkpoint).collect::<Result<Vec<_>>>()?;
        let d = ck.head_w.rows();
        if layers.iter().any(|l| l.d != d) || ck.head_b.shape() != (1, ck.head_w.cols()) {
            return Err(Error::Inconsistent("checkpoint head disagrees with its layers".into()));
        }
        Ok(Self {
            config: ck.model,
            layers,
            head_w: Param::new("head.w", ck.head_w),
            head_b: Param::new("head.b", ck.head_b),
        })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.to_checkpoint())?)
    }

    /// Writes the checkpoint and returns its SHA-256 in hex.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.checkpoint_bytes()?;
        fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: ModelCheckpoint<T> = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(ck)
    }

    /// Mean activated parameters per token, summed over layers.
    pub fn activated_params(&self, decisions: &[LayerDecision<T>]) -> f64 {
        self.layers
            .iter()
            .zip(decisions)
            .map(|(l, d)| count_activated_params(l, d.k()))
            .sum()
    }
}

pub fn argmax_rows<T: Scalar>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (n, c) = logits.shape();
    if n == 0 || labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
    }
    let nn = T::from_usize_lossy(n);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(n, c);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[labels[i]];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let y = if j == labels[i] { T::one() } else { T::zero() };
            *g = (p - y) / nn;
        }
    }
    Ok((loss / nn, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub task_loss: f64,
    /// Unweighted diversity/simplicity summed over layers; plugin values
    /// (already weighted) under `extra`.
    pub aux: AuxLossReport,
    pub total_loss: f64,
    /// Training-time mean k averaged over layers.
    pub mean_k: f64,
    /// Experts per layer.
    pub experts: Vec<usize>,
    pub recorded: bool,
}

/// Plugin gradients at the mask and at `σ(s)` for one layer.
type PluginGrads<T> = (Option<Matrix<T>>, Option<Matrix<T>>);

/// Model, optimizer state and step counter of one run.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
    plugins: Vec<Box<dyn AuxLossPlugin<T>>>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, config.learning_rate)?,
            plugins: config.plugins.iter().map(PluginSpec::build).collect(),
            config: config.clone(),
            model,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One forward/backward/update on `batch`. Layers currently recording
    /// accumulate their routing record.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepStats> {
        self.step += 1;
        let step = self.step;
        let model = &mut self.model;
        model.zero_grad();
        let fwd = model.forward(&batch.tokens, Mode::Train)?;
        let mut recorded = false;
        for (layer, (dec, input)) in model.layers.iter_mut().zip(fwd.decisions.iter().zip(&fwd.inputs)) {
            if let LayerDecision::TopAny(d) = dec {
                if layer.record.recording {
                    layer.record.record(d, input)?;
                    recorded = true;
                }
            }
        }
        let (task_loss, d_logits) = cross_entropy(&fwd.logits, &batch.labels)?;
        let task_loss = task_loss.as_f64();
        if !task_loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                what: format!("task loss is {task_loss}"),
            });
        }

        let grad_w = matmul_tn(&fwd.hidden, &d_logits)?;
        model.head_w.grad.axpy(T::one(), &grad_w)?;
        for i in 0..d_logits.rows() {
            for (b, &g) in model.head_b.grad.as_mut_slice().iter_mut().zip(d_logits.row(i)) {
                *b += g;
            }
        }
        let mut dh = matmul_nt(&d_logits, &model.head_w.value)?;

        let aux_w = T::lit(self.config.aux_loss_weight);
        let mut aux = AuxLossReport::default();
        let mut extras: Vec<PluginGrads<T>> = Vec::with_capacity(model.layers.len());
        for (layer, dec) in model.layers.iter_mut().zip(&fwd.decisions) {
            let LayerDecision::TopAny(d) = dec else {
                extras.push((None, None));
                continue;
            };
            let r = diversity_simplicity_loss_weighted(&mut layer.router.w_g, aux_w)?;
            aux.accumulate(&r);
            let (mut dm, mut ds): (Option<Matrix<T>>, Option<Matrix<T>>) = (None, None);
            for p in &self.plugins {
                let term = p.evaluate(d, &d.sig_s, &layer.router)?;
                aux.add_extra(p.name(), term.value.as_f64());
                for (acc, g) in [(&mut dm, term.d_mask), (&mut ds, term.d_sig_s)] {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.axpy(T::one(), &g)?,
                            None => *acc = Some(g),
                        }
                    }
                }
            }
            extras.push((dm, ds));
        }
        let plugin_total: f64 = aux.extra.values().sum();
        let total_loss = task_loss + self.config.aux_loss_weight * (aux.diversity + aux.simplicity) + plugin_total;
        if !total_loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                what: format!("total loss is {total_loss}"),
            });
        }

        let detach = model.config.detach_router_input;
        let combine = model.config.combine;
        for l in (0..model.layers.len()).rev() {
            let layer = &mut model.layers[l];
            let input = &fwd.inputs[l];
            let d_in = match &fwd.decisions[l] {
                LayerDecision::TopAny(d) => {
                    let extra = RouterExtra {
                        d_mask: extras[l].0.as_ref(),
                        d_sig_s: extras[l].1.as_ref(),
                    };
                    moe_backward_with(layer, d, input, &dh, combine, detach, extra)?
                }
                LayerDecision::TopK(d) => topk_backward(layer, d, input, &dh, detach)?,
            };
            dh.axpy(T::one(), &d_in)?;
        }

        let params = model.params_mut();
        if let Some((key, _)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::Diverged {
                step: step as usize,
                what: format!("gradient of {key} is not finite"),
            });
        }
        self.optimizer.step(params)?;

        let mean_k = if fwd.decisions.is_empty() {
            0.0
        } else {
            fwd.decisions.iter().map(LayerDecision::mean_k).sum::<f64>() / fwd.decisions.len() as f64
        };
        Ok(StepStats {
            step,
            task_loss,
            aux,
            total_loss,
            mean_k,
            experts: model.experts(),
            recorded,
        })
    }
}

/// Routing statistics of one layer over an eval pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEval {
    pub experts: usize,
    /// Active experts per eval token (after the top-1 fallback).
    pub k: Vec<usize>,
    pub activation_frequency: Vec<Frequency>,
    pub topk_frequency: Vec<Frequency>,
    pub mean_k: Frequency,
    pub activated_params: f64,
    /// Tokens rescued by the top-1 fallback, as a fraction.
    pub fallback_fraction: f64,
    pub thresholds: Vec<f64>,
    pub similarity: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub step: u64,
    pub accuracy: f64,
    pub layers: Vec<LayerEval>,
}

impl EvalSummary {
    /// Mean k averaged over layers.
    pub fn mean_k(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| ratio_to_f64(&l.mean_k)).sum::<f64>() / self.layers.len() as f64
    }

    pub fn activated_params(&self) -> f64 {
        self.layers.iter().map(|l| l.activated_params).sum()
    }

    /// Appends this pass to `log`.
    pub fn log_into(&self, log: &mut MetricsLog) -> Result<()> {
        let s = self.step;
        log.scalar(s, None, names::ACCURACY, self.accuracy)?;
        for (l, e) in self.layers.iter().enumerate() {
            let l = Some(l);
            log.scalar(s, l, names::EXPERTS, e.experts as f64)?;
            log.scalar(s, l, names::MEAN_K, ratio_to_f64(&e.mean_k))?;
            log.vector(s, l, names::ACTIVATION_FREQUENCY, e.activation_frequency.iter().map(ratio_to_f64).collect())?;
            log.vector(s, l, names::TOPK_FREQUENCY, e.topk_frequency.iter().map(ratio_to_f64).collect())?;
            log.vector(s, l, names::THRESHOLDS, e.thresholds.clone())?;
            log.scalar(s, l, names::ACTIVATED_PARAMS, e.activated_params)?;
            log.scalar(s, l, names::FALLBACK_FRACTION, e.fallback_fraction)?;
            let n = e.similarity.rows();
            let mut off = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off = off.max(e.similarity[(i, j)].abs());
                    }
                }
            }
            log.scalar(s, l, names::MAX_OFF_DIAGONAL, off)?;
        }
        Ok(())
    }
}

/// Evaluation pass: top-any with the top-1 fallback (or the fixed top-k
/// router), accuracy and routing statistics.
pub fn evaluate<T: Scalar>(model: &Model<T>, batch: &Batch<T>, step: u64) -> Result<EvalSummary> {
    let fwd = model.forward(&batch.tokens, Mode::Eval)?;
    let pred = argmax_rows(&fwd.logits);
    let correct = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::Empty("evaluation batch"));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (layer, dec) in model.layers.iter().zip(&fwd.decisions) {
        let mask = dec.mask();
        let fallback = match dec {
            LayerDecision::TopAny(d) => d.fallback.iter().filter(|&&f| f).count(),
            LayerDecision::TopK(_) => 0,
        };
        layers.push(LayerEval {
            experts: layer.num_experts(),
            k: dec.k().to_vec(),
            activation_frequency: activation_frequency(&[mask])?,
            topk_frequency: topk_frequency(dec.k(), layer.num_experts())?,
            mean_k: mean_k(&[mask])?,
            activated_params: count_activated_params(layer, dec.k()),
            fallback_fraction: fallback as f64 / n as f64,
            thresholds: gate_threshold_dump(&layer.router),
            similarity: expert_similarity_matrix(&layer.router)?,
        });
    }
    Ok(EvalSummary {
        step,
        accuracy: correct as f64 / n as f64,
        layers,
    })
}

/// Outcome of [`train_loop`].
#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub final_accuracy: f64,
    /// Initial expert counts at step 0 and every change after.
    pub k_trajectory: Vec<KPoint>,
    pub metrics: MetricsLog,
    pub adapt_events: Vec<AdaptEvent>,
    pub evals: Vec<EvalSummary>,
    pub similarity: Vec<SimilaritySnapshot>,
    pub model: Model<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub router: RouterKind,
    pub final_accuracy: f64,
    pub final_experts: Vec<usize>,
    pub final_mean_k: f64,
    pub activated_params: f64,
    pub adapt_calls: usize,
    pub checkpoint_sha256: String,
}

impl<T: Scalar> RunResult<T> {
    pub fn final_experts(&self) -> Vec<usize> {
        self.model.experts()
    }

    pub fn final_eval(&self) -> &EvalSummary {
        self.evals.last().expect("train_loop always evaluates at the last step")
    }

    /// Writes the run directory: `metrics.csv`, `adapt.jsonl`,
    /// `config.snapshot`, `checkpoint.final`, `similarity.jsonl`,
    /// `k_trajectory.json`, `result.json`. Returns the summary.
    pub fn write_dir(&self, dir: &Path, cfg: &RunConfig) -> Result<RunSummary> {
        fs::create_dir_all(dir)?;
        self.metrics.write_csv(&dir.join("metrics.csv"))?;
        write_jsonl(&dir.join("adapt.jsonl"), &self.adapt_events)?;
        write_jsonl(&dir.join("similarity.jsonl"), &self.similarity)?;
        fs::write(dir.join("config.snapshot"), cfg.to_toml_string()?)?;
        let traj = KTrajectory {
            schema: TRAJECTORY_SCHEMA.to_string(),
            points: self.k_trajectory.clone(),
        };
        fs::write(dir.join("k_trajectory.json"), serde_json::to_vec_pretty(&traj)?)?;
        let hash = self.model.save(&dir.join("checkpoint.final"))?;
        let fin = self.final_eval();
        let summary = RunSummary {
            schema: RESULT_SCHEMA.to_string(),
            router: self.model.config.router,
            final_accuracy: self.final_accuracy,
            final_experts: self.final_experts(),
            final_mean_k: fin.mean_k(),
            activated_params: fin.activated_params(),
            adapt_calls: self.adapt_events.len(),
            checkpoint_sha256: hash,
        };
        fs::write(dir.join("result.json"), serde_json::to_vec_pretty(&summary)?)?;
        Ok(summary)
    }
}

/// Epoch-shuffled minibatches over the training split.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains a fresh model on `task`. With adaptation on, each interval of
/// `check_interval` steps records routing over its window and calls
/// [`adapt`] on every layer right after the window's last step.
pub fn train_loop<T: Scalar>(task: &SyntheticTask<T>, cfg: &RunConfig) -> Result<RunResult<T>> {
    cfg.validate()?;
    if task.config.d != task.tokens.cols() {
        return Err(Error::Inconsistent("task dimension disagrees with its tokens".into()));
    }
    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let model = Model::new(task.config.d, CLASSES, &cfg.model, &mut rng)?;
    let mut trainer = Trainer::new(model, tc)?;
    let eval = task.eval_batch();
    let mut sampler = Sampler::new(task.n_train);
    let adaptive = cfg.adaptive();
    let interval = tc.adapt.check_interval;
    let (start, end) = tc.adapt.window_offsets();

    let mut metrics = MetricsLog::new();
    let mut k_trajectory: Vec<KPoint> = trainer
        .model
        .experts()
        .into_iter()
        .enumerate()
        .map(|(layer, experts)| KPoint { step: 0, layer, experts })
        .collect();
    let mut adapt_events = Vec::new();
    let mut evals = Vec::new();
    let mut similarity = Vec::new();

    for step in 1..=tc.steps as u64 {
        let pos = (step as usize - 1) % interval;
        if adaptive && pos == start {
            trainer.model.layers.iter_mut().for_each(|l| l.record.start());
        }
        let batch = task.batch(&sampler.next(tc.batch_size, &mut rng));
        let stats = trainer.train_step(&batch)?;
        metrics.scalar(step, None, names::TRAIN_LOSS, stats.task_loss)?;
        metrics.scalar(step, None, names::TRAIN_AUX, stats.aux.total)?;
        metrics.scalar(step, None, names::TRAIN_MEAN_K, stats.mean_k)?;

        if adaptive && pos + 1 == end {
            let Trainer { model, optimizer, .. } = &mut trainer;
            for (l, layer) in model.layers.iter_mut().enumerate() {
                layer.record.stop();
                let report = adapt(layer, &tc.adapt, &mut rng)?;
                optimizer.on_adapt(l, &report)?;
                metrics.scalar(step, Some(l), "adapt.experts", report.new_k_total as f64)?;
                if report.changed() {
                    info!(
                        "step {step} layer {l}: K {} -> {} (removed {:?}, added {:?})",
                        report.previous_k, report.new_k_total, report.removed_ids, report.added_id
                    );
                    k_trajectory.push(KPoint {
                        step,
                        layer: l,
                        experts: report.new_k_total,
                    });
                }
                adapt_events.push(AdaptEvent::new(step, l, report));
            }
        }

        if step % tc.eval_every as u64 == 0 || step == tc.steps as u64 {
            let summary = evaluate(&trainer.model, &eval, step)?;
            debug!(
                "step {step}: loss {:.4} acc {:.4} mean k {:.3} K {:?}",
                stats.task_loss,
                summary.accuracy,
                summary.mean_k(),
                trainer.model.experts()
            );
            summary.log_into(&mut metrics)?;
            for (l, e) in summary.layers.iter().enumerate() {
                similarity.push(SimilaritySnapshot::new(step, l, &e.similarity));
            }
            evals.push(summary);
        }
    }
    let final_accuracy = evals.last().map(|e: &EvalSummary| e.accuracy).unwrap_or(0.0);
    Ok(RunResult {
        final_accuracy,
        k_trajectory,
        metrics,
        adapt_events,
        evals,
        similarity,
        model: trainer.model,
    })
}

/// The same harness with `K` experts behind a fixed top-`k` router and no
/// adaptation or auxiliary loss.
pub fn run_baseline<T: Scalar>(task: &SyntheticTask<T>, cfg: &RunConfig, experts: usize, k: usize) -> Result<RunResult<T>> {
    train_loop(task, &baseline_config(cfg, experts, k)?)
}

pub fn baseline_config(cfg: &RunConfig, experts: usize, k: usize) -> Result<RunConfig> {
    if k == 0 || k > experts {
        return Err(Error::Config(format!("baseline needs 1 <= k <= K, got k={k}, K={experts}")));
    }
    let mut c = cfg.clone();
    c.model.router = RouterKind::Topk;
    c.model.initial_experts = experts;
    c.model.top_k = k;
    c.train.adapt.enabled = false;
    c.train.plugins.clear();
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub router: RouterKind,
    /// Final experts per layer.
    pub experts: Vec<usize>,
    /// Fixed k, or `None` for the top-any router.
    pub top_k: Option<usize>,
    pub accuracy: f64,
    pub mean_k: f64,
    pub activated_params: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn best_baseline(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.router == RouterKind::Topk)
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema,router,experts,top_k,accuracy,mean_k,activated_params\n");
        for r in &self.rows {
            let experts: Vec<String> = r.experts.iter().map(|e| e.to_string()).collect();
            let router = match r.router {
                RouterKind::Dynmoe => "dynmoe",
                RouterKind::Topk => "topk",
            };
            out.push_str(&format!(
                "{SWEEP_SCHEMA},{router},{},{},{:?},{:?},{:?}\n",
                experts.join("/"),
                r.top_k.map(|k| k.to_string()).unwrap_or_else(|| "any".into()),
                r.accuracy,
                r.mean_k,
                r.activated_params
            ));
        }
        out
    }
}

fn sweep_row<T: Scalar>(res: &RunResult<T>, top_k: Option<usize>) -> SweepRow {
    let fin = res.final_eval();
    SweepRow {
        router: res.model.config.router,
        experts: res.final_experts(),
        top_k,
        accuracy: res.final_accuracy,
        mean_k: fin.mean_k(),
        activated_params: fin.activated_params(),
    }
}

/// Fixed `(K, k)` baselines over the configured grid followed by one adaptive run. `visit` sees each finished run.
pub fn sweep<T: Scalar>(
    task: &SyntheticTask<T>,
    cfg: &RunConfig,
    mut visit: impl FnMut(&str, &RunConfig, &RunResult<T>) -> Result<()>,
) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for &k_experts in &cfg.sweep.experts {
        for &k in &cfg.sweep.top_k {
            let c = baseline_config(cfg, k_experts, k)?;
            let res = train_loop(task, &c)?;
            visit(&format!("topk-K{k_experts}-k{k}"), &c, &res)?;
            rows.push(sweep_row(&res, Some(k)));
        }
    }
    let mut c = cfg.clone();
    c.model.router = RouterKind::Dynmoe;
    let res = train_loop(task, &c)?;
    visit("dynmoe", &c, &res)?;
    rows.push(sweep_row(&res, None));
    Ok(SweepTable {
        schema: SWEEP_SCHEMA.to_string(),
        rows,
    })
}
