//! Routing records and the add/remove expert process.
//!
//! While recording, each layer counts how many tokens activated every expert
//! (`r_e`) and sums the embeddings of tokens that activated nothing (`r_s`).
//! When the window closes, [`adapt`] removes every expert nobody activated
//! and, if some tokens went unrouted, appends one expert whose representation
//! is `r_s / ‖r_s‖` with threshold zero. Any token with positive cosine to
//! that direction fires the new expert, since `σ(s) > σ(0)` iff `s > 0`.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{ExpertMlp, MoeLayer};
use crate::numerics::{norm, Matrix};
use crate::router::GatingDecision;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord<T> {
    /// Activation count per expert.
    pub r_e: Vec<u64>,
    /// Sum of embeddings of tokens that activated no expert.
    pub r_s: Vec<T>,
    pub recording: bool,
    /// `record` calls made while not recording.
    pub ignored: u64,
}

impl<T: Scalar> RoutingRecord<T> {
    pub fn new(d: usize, experts: usize) -> Self {
        Self {
            r_e: vec![0; experts],
            r_s: vec![T::zero(); d],
            recording: false,
            ignored: 0,
        }
    }

    /// Clears both accumulators and starts recording.
    pub fn start(&mut self) {
        self.reset();
        self.recording = true;
    }

    pub fn stop(&mut self) {
        self.recording = false;
    }

    pub fn reset(&mut self) {
        self.r_e.iter_mut().for_each(|c| *c = 0);
        self.r_s.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn record(&mut self, decision: &GatingDecision<T>, tokens: &Matrix<T>) -> Result<()> {
        if !self.recording {
            self.ignored += 1;
            warn!("routing record update ignored: not recording");
            return Ok(());
        }
        if decision.experts() != self.r_e.len() || tokens.rows() != decision.tokens() || tokens.cols() != self.r_s.len() {
            return Err(Error::Dimension {
                op: "record",
                left: (decision.tokens(), decision.experts()),
                right: (tokens.rows(), self.r_e.len()),
            });
        }
        for (c, n) in self.r_e.iter_mut().zip(decision.mask.col_counts()) {
            *c += n;
        }
        for i in 0..tokens.rows() {
            if decision.k[i] == 0 {
                for (acc, &v) in self.r_s.iter_mut().zip(tokens.row(i)) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn resize(&mut self, experts: usize) {
        self.r_e = vec![0; experts];
        self.reset();
        self.recording = false;
    }
}

/// How the MLP of a newly added expert is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Fresh random weights; only the router column comes from `r_s`.
    #[default]
    PaperRs,
    /// Mean of the existing experts.
    Average,
    /// Mean weighted by activation counts.
    WAverage,
    /// Copy of the most activated expert.
    MostActivated,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_rs" => Ok(Self::PaperRs),
            "average" => Ok(Self::Average),
            "w_average" => Ok(Self::WAverage),
            "most_activated" => Ok(Self::MostActivated),
            other => Err(Error::Config(format!(
                "unknown init strategy {other:?} (expected paper_rs, average, w_average, most_activated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub enabled: bool,
    pub max_experts: usize,
    pub min_experts: usize,
    /// Steps between adaptation checks.
    pub check_interval: usize,
    /// Fractions of each interval during which routing is recorded.
    pub record_window: (f64, f64),
    pub init_strategy: InitStrategy,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_experts: 16,
            min_experts: 1,
            check_interval: 100,
            record_window: (1.0 / 3.0, 2.0 / 3.0),
            init_strategy: InitStrategy::PaperRs,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_experts < 1 || self.min_experts > self.max_experts {
            return Err(Error::Config(format!(
                "need 1 <= min_experts <= max_experts, got {} and {}",
                self.min_experts, self.max_experts
            )));
        }
        if self.check_interval == 0 {
            return Err(Error::Config("check_interval must be positive".into()));
        }
        let (a, b) = self.record_window;
        if !(0.0..1.0).contains(&a) || !(b > a && b <= 1.0) {
            return Err(Error::Config(format!(
                "record_window must satisfy 0 <= start < end <= 1, got ({a}, {b})"
            )));
        }
        Ok(())
    }

    /// Zero-based offsets within an interval: recording covers
    /// `[start, end)`, and adaptation runs after the step at `end − 1`.
    pub fn window_offsets(&self) -> (usize, usize) {
        let n = self.check_interval as f64;
        let start = (self.record_window.0 * n).floor() as usize;
        let end = ((self.record_window.1 * n).ceil() as usize).clamp(start + 1, self.check_interval);
        (start.min(self.check_interval - 1), end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub previous_k: usize,
    /// Indices (before compaction) of removed experts.
    pub removed_experts: Vec<usize>,
    pub removed_ids: Vec<u64>,
    pub added: bool,
    pub added_id: Option<u64>,
    pub new_k_total: usize,
    /// Zero-count experts retained to honor `min_experts`.
    pub clamped: Vec<usize>,
    /// `w_average` had no activations to weight by and averaged uniformly.
    pub init_fallback: bool,
}

impl AdaptReport {
    pub fn changed(&self) -> bool {
        self.added || !self.removed_experts.is_empty()
    }
}

/// Builds the MLP for a new expert.
pub fn init_new_expert<T: Scalar, R: Rng + ?Sized>(
    strategy: InitStrategy,
    experts: &[ExpertMlp<T>],
    r_e: &[u64],
    id: u64,
    rng: &mut R,
) -> Result<(ExpertMlp<T>, bool)> {
    let first = experts.first().ok_or(Error::Empty("new-expert initialization needs an existing expert"))?;
    if r_e.len() != experts.len() {
        return Err(Error::Dimension {
            op: "init_new_expert",
            left: (experts.len(), 1),
            right: (r_e.len(), 1),
        });
    }
    let (d, h, act) = (first.dim(), first.hidden(), first.activation);
    let weighted = |weights: &[T]| {
        let mut parts: Vec<Matrix<T>> = first.params().iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        for (e, &w) in experts.iter().zip(weights) {
            for (acc, p) in parts.iter_mut().zip(e.params()) {
                acc.axpy(w, &p.value).expect("experts share shapes");
            }
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("four tensors");
        ExpertMlp::from_parts(id, next(), next(), next(), next(), act)
    };
    let uniform = || vec![T::one() / T::from_usize_lossy(experts.len()); experts.len()];
    Ok(match strategy {
        InitStrategy::PaperRs => (ExpertMlp::random(id, d, h, act, rng), false),
        InitStrategy::Average => (weighted(&uniform()), false),
        InitStrategy::WAverage => {
            let total: u64 = r_e.iter().sum();
            if total == 0 {
                debug!("w_average with no activations; averaging uniformly");
                (weighted(&uniform()), true)
            } else {
                let w: Vec<T> = r_e.iter().map(|&c| T::lit(c as f64 / total as f64)).collect();
                (weighted(&w), false)
            }
        }
        InitStrategy::MostActivated => {
            let mut best = 0;
            for (e, &c) in r_e.iter().enumerate() {
                if c > r_e[best] {
                    best = e;
                }
            }
            let src = &experts[best];
            let copy = ExpertMlp::from_parts(
                id,
                src.w1.value.clone(),
                src.b1.value.clone(),
                src.w2.value.clone(),
                src.b2.value.clone(),
                act,
            );
            (copy, false)
        }
    })
}

/// Applies one adaptation step from the layer's routing record: remove
/// never-activated experts, then add at most one expert for unrouted tokens.
/// The record is reset afterwards.
pub fn adapt<T: Scalar, R: Rng + ?Sized>(layer: &mut MoeLayer<T>, cfg: &AdaptConfig, rng: &mut R) -> Result<AdaptReport> {
    cfg.validate()?;
    layer.validate()?;
    let previous_k = layer.num_experts();
    let r_e = layer.record.r_e.clone();
    let r_s = layer.record.r_s.clone();

    let mut candidates: Vec<usize> = (0..previous_k).filter(|&e| r_e[e] == 0).collect();
    let mut clamped = Vec::new();
    let floor = cfg.min_experts.min(previous_k);
    if previous_k - candidates.len() < floor {
        let keep = floor - (previous_k - candidates.len());
        clamped = candidates.drain(..keep).collect();
    }
    let removed_ids: Vec<u64> = candidates.iter().map(|&e| layer.experts[e].id).collect();
    if !candidates.is_empty() {
        let keep: Vec<usize> = (0..previous_k).filter(|e| !candidates.contains(e)).collect();
        layer.router.retain_experts(&keep);
        let mut old = std::mem::take(&mut layer.experts).into_iter().map(Some).collect::<Vec<_>>();
        layer.experts = keep.iter().map(|&e| old[e].take().expect("kept once")).collect();
    }
    let surviving_counts: Vec<u64> = (0..previous_k).filter(|e| !candidates.contains(e)).map(|e| r_e[e]).collect();

    let mut added_id = None;
    let mut init_fallback = false;
    let rs_norm = norm(&r_s);
    if rs_norm > T::zero() && layer.num_experts() < cfg.max_experts {
        let column: Vec<T> = r_s.iter().map(|&v| v / rs_norm).collect();
        let id = layer.allocate_id();
        let (expert, fell_back) = init_new_expert(cfg.init_strategy, &layer.experts, &surviving_counts, id, rng)?;
        init_fallback = fell_back;
        layer.router.push_expert(&column, T::zero())?;
        layer.experts.push(expert);
        added_id = Some(id);
    }

    layer.record.resize(layer.num_experts());
    layer.validate()?;
    let report = AdaptReport {
        previous_k,
        removed_experts: candidates,
        removed_ids,
        added: added_id.is_some(),
        added_id,
        new_k_total: layer.num_experts(),
        clamped,
        init_fallback,
    };
    if report.changed() {
        debug!("adapt: K {} -> {} (removed {:?}, added {})", previous_k, report.new_k_total, report.removed_experts, report.added);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{moe_forward, Activation, Mode};
    use crate::router::{route_top_any, RouterParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layer(seed: u64, d: usize, k: usize) -> MoeLayer<f64> {
        MoeLayer::random(d, 3, k, Activation::Gelu, &mut rng(seed)).unwrap()
    }

    fn cfg(max: usize) -> AdaptConfig {
        AdaptConfig {
            max_experts: max,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn record_single_expert_batch() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = RouterParams::new(w, &[0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -0.5], [2.0, -0.1], [0.3, -1.0]]).unwrap();
        let d = route_top_any(&x, &p).unwrap();
        let mut rec = RoutingRecord::new(2, 2);
        rec.start();
        rec.record(&d, &x).unwrap();
        assert_eq!(rec.r_e, vec![3, 0]);
        assert_eq!(rec.r_s, vec![0.0, 0.0]);
    }

    #[test]
    fn record_unrouted_batch() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = RouterParams::new(w, &[0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[-1.0, -0.5], [-2.0, -0.1]]).unwrap();
        let d = route_top_any(&x, &p).unwrap();
        let mut rec = RoutingRecord::new(2, 2);
        rec.start();
        rec.record(&d, &x).unwrap();
        assert_eq!(rec.r_e, vec![0, 0]);
        assert_eq!(rec.r_s, vec![-3.0, -0.6]);
    }

    #[test]
    fn record_matches_per_token_oracle() {
        let l = layer(1, 5, 4);
        let x = Matrix::random_normal(40, 5, 1.0, &mut rng(2));
        let d = route_top_any(&x, &l.router).unwrap();
        let mut rec = RoutingRecord::new(5, 4);
        rec.start();
        rec.record(&d, &x).unwrap();
        let mut counts = vec![0u64; 4];
        let mut sum = vec![0.0; 5];
        for i in 0..40 {
            let mut any = false;
            for e in 0..4 {
                if d.sig_s[(i, e)] > d.sig_g[e] {
                    counts[e] += 1;
                    any = true;
                }
            }
            if !any {
                for c in 0..5 {
                    sum[c] += x[(i, c)];
                }
            }
        }
        assert_eq!(rec.r_e, counts);
        assert_eq!(rec.r_s, sum);
    }

    #[test]
    fn record_when_idle_is_counted_noop() {
        let l = layer(3, 3, 2);
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng(4));
        let d = route_top_any(&x, &l.router).unwrap();
        let mut rec = RoutingRecord::new(3, 2);
        rec.record(&d, &x).unwrap();
        assert_eq!(rec.ignored, 1);
        assert_eq!(rec.r_e, vec![0, 0]);
    }

    #[test]
    fn removes_zero_count_expert() {
        let mut l = layer(5, 4, 3);
        let probe = Matrix::random_normal(9, 4, 1.0, &mut rng(6));
        // make expert 1 unreachable so the probe output cannot depend on it
        l.router.g.value[(0, 1)] = 100.0;
        let (before, _) = moe_forward(&l, &probe, Mode::Train).unwrap();
        l.record.start();
        l.record.r_e = vec![5, 0, 3];
        let id1 = l.experts[1].id;
        let report = adapt(&mut l, &cfg(8), &mut rng(7)).unwrap();
        assert_eq!(report.removed_experts, vec![1]);
        assert_eq!(report.removed_ids, vec![id1]);
        assert!(!report.added);
        assert_eq!(report.new_k_total, 2);
        assert_eq!(l.num_experts(), 2);
        assert_eq!(l.record.r_e, vec![0, 0]);
        let (after, _) = moe_forward(&l, &probe, Mode::Train).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);
    }

    #[test]
    fn adds_expert_from_unrouted_sum() {
        let mut l = layer(8, 4, 3);
        l.record.start();
        l.record.r_e = vec![1, 2, 3];
        l.record.r_s = vec![3.0, 0.0, 4.0, 0.0];
        let report = adapt(&mut l, &cfg(8), &mut rng(9)).unwrap();
        assert!(report.added);
        assert_eq!(l.num_experts(), 4);
        assert_eq!(l.router.w_g.value.col(3), vec![0.6, 0.0, 0.8, 0.0]);
        assert_eq!(l.router.thresholds()[3], 0.0);
        l.validate().unwrap();
    }

    #[test]
    fn respects_max_experts() {
        let mut l = layer(10, 4, 3);
        l.record.r_e = vec![1, 2, 3];
        l.record.r_s = vec![1.0, 0.0, 0.0, 0.0];
        let report = adapt(&mut l, &cfg(3), &mut rng(11)).unwrap();
        assert!(!report.added);
        assert_eq!(report.new_k_total, 3);
    }

    #[test]
    fn nothing_to_do() {
        let mut l = layer(12, 4, 3);
        let before = l.clone();
        l.record.r_e = vec![1, 2, 3];
        let report = adapt(&mut l, &cfg(8), &mut rng(13)).unwrap();
        assert!(!report.changed());
        assert_eq!(l.router, before.router);
        assert_eq!(l.experts, before.experts);
    }

    #[test]
    fn removal_before_addition_frees_capacity() {
        let mut l = layer(14, 4, 3);
        l.record.r_e = vec![0, 2, 3];
        l.record.r_s = vec![0.0, 1.0, 0.0, 0.0];
        let report = adapt(&mut l, &cfg(3), &mut rng(15)).unwrap();
        assert_eq!(report.removed_experts, vec![0]);
        assert!(report.added);
        assert_eq!(report.new_k_total, 3);
    }

    #[test]
    fn clamps_at_min_experts() {
        let mut l = layer(16, 4, 3);
        l.record.r_e = vec![0, 0, 0];
        let c = AdaptConfig {
            min_experts: 2,
            ..cfg(8)
        };
        let ids: Vec<u64> = l.experts.iter().map(|e| e.id).collect();
        let report = adapt(&mut l, &c, &mut rng(17)).unwrap();
        assert_eq!(report.clamped, vec![0, 1]);
        assert_eq!(report.removed_experts, vec![2]);
        assert_eq!(report.new_k_total, 2);
        assert_eq!(l.experts.iter().map(|e| e.id).collect::<Vec<_>>(), ids[..2].to_vec());
    }

    #[test]
    fn report_count_identity() {
        let mut l = layer(18, 4, 4);
        l.record.r_e = vec![0, 3, 0, 1];
        l.record.r_s = vec![1.0, 1.0, 0.0, 0.0];
        let r = adapt(&mut l, &cfg(8), &mut rng(19)).unwrap();
        assert_eq!(r.new_k_total, r.previous_k - r.removed_experts.len() + usize::from(r.added));
    }

    #[test]
    fn new_expert_captures_unrouted_cluster() {
        // cluster around a direction negative to every column, thresholds 0
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let router = RouterParams::new(w, &[0.0, 0.0]).unwrap();
        let experts = (0..2).map(|id| ExpertMlp::random(id, 3, 2, Activation::Gelu, &mut rng(20 + id))).collect();
        let mut l = MoeLayer::from_parts(router, experts).unwrap();
        let cluster = Matrix::from_rows(&[[-1.0, -1.0, 0.2], [-0.8, -1.2, -0.1], [-1.1, -0.9, 0.4]]).unwrap();
        let d = route_top_any(&cluster, &l.router).unwrap();
        assert!(d.k.iter().all(|&k| k == 0));
        l.record.start();
        l.record.record(&d, &cluster).unwrap();
        let r = adapt(&mut l, &cfg(8), &mut rng(22)).unwrap();
        assert!(r.added);
        let new = l.num_experts() - 1;
        let d = route_top_any(&cluster, &l.router).unwrap();
        assert!((0..3).all(|i| d.mask.get(i, new)));
    }

    fn experts3() -> Vec<ExpertMlp<f64>> {
        (0..3).map(|id| ExpertMlp::random(id, 3, 2, Activation::Gelu, &mut rng(30 + id))).collect()
    }

    #[test]
    fn average_of_opposites_is_zero() {
        let a = ExpertMlp::random(0, 3, 2, Activation::Gelu, &mut rng(40));
        let neg = |m: &Matrix<f64>| m.scale(-1.0);
        let b = ExpertMlp::from_parts(1, neg(&a.w1.value), neg(&a.b1.value), neg(&a.w2.value), neg(&a.b2.value), Activation::Gelu);
        let (e, _) = init_new_expert(InitStrategy::Average, &[a, b], &[1, 1], 9, &mut rng(41)).unwrap();
        for p in e.params() {
            assert!(p.value.as_slice().iter().all(|&v| v == 0.0));
        }
        assert_eq!(e.id, 9);
    }

    #[test]
    fn w_average_degenerate_weights_copy() {
        let ex = experts3();
        let (e, fb) = init_new_expert(InitStrategy::WAverage, &ex[..2], &[0, 7], 5, &mut rng(42)).unwrap();
        assert!(!fb);
        for (p, q) in e.params().iter().zip(ex[1].params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn w_average_matches_direct_loop() {
        let ex = experts3();
        let (e, _) = init_new_expert(InitStrategy::WAverage, &ex, &[1, 2, 3], 5, &mut rng(43)).unwrap();
        for which in 0..4 {
            let got = &e.params()[which].value;
            for idx in 0..got.as_slice().len() {
                let expect = (1.0 * ex[0].params()[which].value.as_slice()[idx]
                    + 2.0 * ex[1].params()[which].value.as_slice()[idx]
                    + 3.0 * ex[2].params()[which].value.as_slice()[idx])
                    / 6.0;
                assert!((got.as_slice()[idx] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn w_average_all_zero_falls_back() {
        let ex = experts3();
        let (a, fb) = init_new_expert(InitStrategy::WAverage, &ex, &[0, 0, 0], 5, &mut rng(44)).unwrap();
        let (b, _) = init_new_expert(InitStrategy::Average, &ex, &[0, 0, 0], 5, &mut rng(44)).unwrap();
        assert!(fb);
        assert_eq!(a, b);
    }

    #[test]
    fn most_activated_copies() {
        let ex = experts3();
        let (e, _) = init_new_expert(InitStrategy::MostActivated, &ex, &[4, 9, 2], 5, &mut rng(45)).unwrap();
        assert_eq!(e.w1.value, ex[1].w1.value);
        assert_eq!(e.b2.value, ex[1].b2.value);
    }

    #[test]
    fn empty_expert_list_is_error() {
        assert!(init_new_expert::<f64, _>(InitStrategy::Average, &[], &[], 0, &mut rng(46)).is_err());
    }

    #[test]
    fn window_offsets() {
        let c = AdaptConfig::default();
        assert_eq!(c.window_offsets(), (33, 67));
        let full = AdaptConfig {
            record_window: (0.0, 1.0),
            check_interval: 10,
            ..c.clone()
        };
        assert_eq!(full.window_offsets(), (0, 10));
        let bad = AdaptConfig {
            record_window: (0.5, 0.5),
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("w_average".parse::<InitStrategy>().unwrap(), InitStrategy::WAverage);
        assert!("median".parse::<InitStrategy>().is_err());
    }
}
