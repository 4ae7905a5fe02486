//! Routing statistics and their on-disk forms.
//!
//! Frequencies are computed as exact rationals over integer counts, so
//! `Σ_e activation_frequency_e == mean k` and `Σ_j topk_frequency_j == 1`
//! hold without rounding. They are converted to `f64` only for emission.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptReport;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::router::{Mask, RouterParams};
use crate::scalar::Scalar;

pub const METRICS_SCHEMA: &str = "dynmoe.metrics/1";
pub const ADAPT_SCHEMA: &str = "dynmoe.adapt/1";
pub const SIMILARITY_SCHEMA: &str = "dynmoe.similarity/1";
pub const TRAJECTORY_SCHEMA: &str = "dynmoe.k_trajectory/1";

const CSV_HEADER: &str = "schema,step,layer,metric,index,value";

/// Exact frequency.
pub type Frequency = Ratio<u64>;

pub fn ratio_to_f64(r: &Frequency) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn total_tokens(masks: &[&Mask]) -> Result<u64> {
    let n: usize = masks.iter().map(|m| m.tokens()).sum();
    if n == 0 {
        return Err(Error::Empty("telemetry over a pass with no tokens"));
    }
    Ok(n as u64)
}

/// Per-expert activations divided by the number of tokens in the pass.
pub fn activation_frequency(masks: &[&Mask]) -> Result<Vec<Frequency>> {
    let n = total_tokens(masks)?;
    let experts = masks[0].experts();
    let mut counts = vec![0u64; experts];
    for m in masks {
        if m.experts() != experts {
            return Err(Error::Dimension {
                op: "activation_frequency",
                left: (m.tokens(), m.experts()),
                right: (0, experts),
            });
        }
        for (c, x) in counts.iter_mut().zip(m.col_counts()) {
            *c += x;
        }
    }
    Ok(counts.into_iter().map(|c| Ratio::new(c, n)).collect())
}

/// Mean number of activated experts per token, exact.
pub fn mean_k(masks: &[&Mask]) -> Result<Frequency> {
    let n = total_tokens(masks)?;
    let total: u64 = masks
        .iter()
        .map(|m| (0..m.tokens()).map(|i| m.row_count(i) as u64).sum::<u64>())
        .sum();
    Ok(Ratio::new(total, n))
}

/// Entry `j` is the fraction of tokens activating exactly `j` experts;
/// length `experts + 1`.
pub fn topk_frequency(k: &[usize], experts: usize) -> Result<Vec<Frequency>> {
    if k.is_empty() {
        return Err(Error::Empty("top-k frequency over a pass with no tokens"));
    }
    let mut hist = vec![0u64; experts + 1];
    for &j in k {
        if j > experts {
            return Err(Error::Inconsistent(format!("token activates {j} of {experts} experts")));
        }
        hist[j] += 1;
    }
    let n = k.len() as u64;
    Ok(hist.into_iter().map(|c| Ratio::new(c, n)).collect())
}

/// Pairwise cosine similarity of the expert representations; the diagonal
/// is set to exactly one.
pub fn expert_similarity_matrix<T: Scalar>(router: &RouterParams<T>) -> Result<Matrix<f64>> {
    let w = &router.w_g.value;
    let experts = w.cols();
    let cols: Vec<Vec<f64>> = (0..experts).map(|e| w.col(e).into_iter().map(Scalar::as_f64).collect()).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    if let Some(e) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::Degenerate(format!("expert {e} has a zero representation")));
    }
    let mut sim = Matrix::identity(experts);
    for i in 0..experts {
        for j in i + 1..experts {
            let c = (dot(&cols[i], &cols[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            sim[(i, j)] = c;
            sim[(j, i)] = c;
        }
    }
    Ok(sim)
}

pub fn gate_threshold_dump<T: Scalar>(router: &RouterParams<T>) -> Vec<f64> {
    router.thresholds().iter().map(|g| g.as_f64()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// `None` for model-wide metrics.
    pub layer: Option<usize>,
    pub metric: String,
    pub payload: Payload,
}

/// Append-only metric rows; steps never decrease per `(layer, metric)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u64, layer: Option<usize>, metric: &str, payload: Payload) -> Result<()> {
        if let Some(prev) = self.rows.iter().rev().find(|r| r.layer == layer && r.metric == metric) {
            if prev.step > step {
                return Err(Error::Inconsistent(format!(
                    "metric {metric} (layer {layer:?}) goes back from step {} to {step}",
                    prev.step
                )));
            }
        }
        self.rows.push(MetricRow {
            step,
            layer,
            metric: metric.to_string(),
            payload,
        });
        Ok(())
    }

    pub fn scalar(&mut self, step: u64, layer: Option<usize>, metric: &str, v: f64) -> Result<()> {
        self.push(step, layer, metric, Payload::Scalar(v))
    }

    pub fn vector(&mut self, step: u64, layer: Option<usize>, metric: &str, v: Vec<f64>) -> Result<()> {
        self.push(step, layer, metric, Payload::Vector(v))
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows of one metric, in order.
    pub fn series<'a>(&'a self, layer: Option<usize>, metric: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.layer == layer && r.metric == metric)
    }

    /// Long-format CSV: one line per scalar or vector entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let layer = r.layer.map(|l| l.to_string()).unwrap_or_default();
            match &r.payload {
                Payload::Scalar(v) => {
                    let _ = writeln!(out, "{METRICS_SCHEMA},{},{layer},{},,{v:?}", r.step, r.metric);
                }
                Payload::Vector(vs) => {
                    for (i, v) in vs.iter().enumerate() {
                        let _ = writeln!(out, "{METRICS_SCHEMA},{},{layer},{},{i},{v:?}", r.step, r.metric);
                    }
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses [`MetricsLog::to_csv`] output. Vector rows are regrouped by
    /// consecutive `(step, layer, metric)`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            Some((_, h)) => return Err(Error::Config(format!("line 1: unexpected metrics header {h:?}"))),
            None => return Err(Error::Empty("metrics file is empty")),
        }
        let mut log = MetricsLog::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("line {}: {what}", no + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            if f[0] != METRICS_SCHEMA {
                return Err(Error::Schema {
                    found: f[0].to_string(),
                    expected: METRICS_SCHEMA,
                });
            }
            let step: u64 = f[1].parse().map_err(|_| bad("bad step"))?;
            let layer = if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad("bad layer"))?)
            };
            let value: f64 = f[5].parse().map_err(|_| bad("bad value"))?;
            if f[4].is_empty() {
                log.scalar(step, layer, f[3], value)?;
                continue;
            }
            let index: usize = f[4].parse().map_err(|_| bad("bad index"))?;
            let extend = matches!(
                log.rows.last(),
                Some(MetricRow { step: s, layer: l, metric: m, payload: Payload::Vector(v) })
                    if *s == step && *l == layer && m == f[3] && v.len() == index
            );
            if extend {
                if let Some(MetricRow { payload: Payload::Vector(v), .. }) = log.rows.last_mut() {
                    v.push(value);
                }
            } else if index == 0 {
                log.vector(step, layer, f[3], vec![value])?;
            } else {
                return Err(bad("vector entry out of sequence"));
            }
        }
        Ok(log)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// One adaptation call, as written to `adapt.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEvent {
    pub schema: String,
    pub step: u64,
    pub layer: usize,
    pub report: AdaptReport,
}

impl AdaptEvent {
    pub fn new(step: u64, layer: usize, report: AdaptReport) -> Self {
        Self {
            schema: ADAPT_SCHEMA.to_string(),
            step,
            layer,
            report,
        }
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Expert count of one layer after a change, for the K-trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KPoint {
    pub step: u64,
    pub layer: usize,
    pub experts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTrajectory {
    pub schema: String,
    pub points: Vec<KPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySnapshot {
    pub schema: String,
    pub step: u64,
    pub layer: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl SimilaritySnapshot {
    pub fn new(step: u64, layer: usize, m: &Matrix<f64>) -> Self {
        Self {
            schema: SIMILARITY_SCHEMA.to_string(),
            step,
            layer,
            matrix: (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
        }
    }
}

/// Metric names emitted by every eval pass.
pub mod names {
    pub const ACCURACY: &str = "eval.accuracy";
    pub const MEAN_K: &str = "eval.mean_k";
    pub const EXPERTS: &str = "eval.experts";
    pub const ACTIVATION_FREQUENCY: &str = "eval.activation_frequency";
    pub const TOPK_FREQUENCY: &str = "eval.topk_frequency";
    pub const THRESHOLDS: &str = "eval.thresholds";
    pub const ACTIVATED_PARAMS: &str = "eval.activated_params";
    pub const FALLBACK_FRACTION: &str = "eval.fallback_fraction";
    pub const MAX_OFF_DIAGONAL: &str = "eval.max_similarity";
    pub const TRAIN_LOSS: &str = "train.task_loss";
    pub const TRAIN_AUX: &str = "train.aux_total";
    pub const TRAIN_MEAN_K: &str = "train.mean_k";
}

/// Plot-ready tables derived from one run directory. Returns the written
/// files.
pub fn report_run(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let log = MetricsLog::read_csv(&run_dir.join("metrics.csv"))?;
    if log.is_empty() {
        return Err(Error::Empty("no metrics found"));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let layers: Vec<usize> = {
        let mut ls: Vec<usize> = log.rows().iter().filter_map(|r| r.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    };

    let mut scalar_table = |file: &str, metric: &str| -> Result<()> {
        let mut out = format!("schema,step,layer,{}\n", metric.trim_start_matches("eval."));
        for &l in &layers {
            for r in log.series(Some(l), metric) {
                if let Payload::Scalar(v) = r.payload {
                    let _ = writeln!(out, "{METRICS_SCHEMA},{},{l},{v:?}", r.step);
                }
            }
        }
        let p = out_dir.join(file);
        fs::write(&p, out)?;
        written.push(p);
        Ok(())
    };
    scalar_table("avg_topk_per_layer.csv", names::MEAN_K)?;

    let mut vector_table = |file: &str, metric: &str, col: &str| -> Result<()> {
        let mut out = format!("schema,step,layer,{col},value\n");
        for &l in &layers {
            for r in log.series(Some(l), metric) {
                if let Payload::Vector(vs) = &r.payload {
                    for (i, v) in vs.iter().enumerate() {
                        let _ = writeln!(out, "{METRICS_SCHEMA},{},{l},{i},{v:?}", r.step);
                    }
                }
            }
        }
        let p = out_dir.join(file);
        fs::write(&p, out)?;
        written.push(p);
        Ok(())
    };
    vector_table("activation_frequency_per_layer.csv", names::ACTIVATION_FREQUENCY, "expert")?;
    vector_table("topk_frequency_per_layer.csv", names::TOPK_FREQUENCY, "k")?;
    vector_table("thresholds.csv", names::THRESHOLDS, "expert")?;

    let sim_src = run_dir.join("similarity.jsonl");
    if sim_src.exists() {
        let snaps: Vec<SimilaritySnapshot> = read_jsonl(&sim_src)?;
        let mut last: Vec<&SimilaritySnapshot> = Vec::new();
        for s in &snaps {
            match last.iter_mut().find(|x| x.layer == s.layer) {
                Some(x) => *x = s,
                None => last.push(s),
            }
        }
        let p = out_dir.join("similarity_final.json");
        fs::write(&p, serde_json::to_vec_pretty(&last)?)?;
        written.push(p);
    }

    let traj_src = run_dir.join("k_trajectory.json");
    if traj_src.exists() {
        let traj: KTrajectory = serde_json::from_slice(&fs::read(&traj_src)?)?;
        let mut out = String::from("schema,step,layer,experts\n");
        for p in &traj.points {
            let _ = writeln!(out, "{TRAJECTORY_SCHEMA},{},{},{}", p.step, p.layer, p.experts);
        }
        let p = out_dir.join("k_trajectory.csv");
        fs::write(&p, out)?;
        written.push(p);
    }
    Ok(written)
}

/// Directories below `root` (inclusive) holding a `metrics.csv`, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("metrics.csv").is_file() {
            found.push(dir.clone());
        }
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                stack.push(entry.path());
            }
        }
    }
    found.sort();
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::route_top_any;
    use num_traits::{One, Zero};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&[bool]]) -> Mask {
        let mut m = Mask::new(rows.len(), rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            for (e, &b) in r.iter().enumerate() {
                m.set(i, e, b);
            }
        }
        m
    }

    #[test]
    fn only_expert_zero() {
        let m = mask_from(&[&[true, false, false], &[true, false, false]]);
        let f = activation_frequency(&[&m]).unwrap();
        assert_eq!(f, vec![Ratio::one(), Ratio::zero(), Ratio::zero()]);
    }

    #[test]
    fn all_experts_all_ones() {
        let m = mask_from(&[&[true, true], &[true, true], &[true, true]]);
        let f = activation_frequency(&[&m]).unwrap();
        assert!(f.iter().all(|x| x.is_one()));
    }

    #[test]
    fn empty_pass_errors() {
        let m = Mask::new(0, 3);
        assert!(activation_frequency(&[&m]).is_err());
        assert!(topk_frequency(&[], 3).is_err());
        assert!(mean_k(&[]).is_err());
    }

    #[test]
    fn topk_all_one() {
        let f = topk_frequency(&[1, 1, 1, 1], 3).unwrap();
        assert_eq!(f, vec![Ratio::zero(), Ratio::one(), Ratio::zero(), Ratio::zero()]);
    }

    #[test]
    fn rounded_histogram_still_sums_to_one() {
        // 79 / 16 / 4 / 1 per hundred tokens
        let mut k = vec![1usize; 79];
        k.extend(vec![2; 16]);
        k.extend(vec![3; 4]);
        k.extend(vec![4; 1]);
        let f = topk_frequency(&k, 4).unwrap();
        assert_eq!(f.iter().copied().sum::<Frequency>(), Ratio::one());
        let shown: Vec<f64> = f.iter().map(ratio_to_f64).collect();
        assert_eq!(shown, vec![0.0, 0.79, 0.16, 0.04, 0.01]);
    }

    fn random_decision_mask(seed: u64, n: usize, d: usize, k: usize) -> Mask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::<f64>::random_normal(n, d, 1.0, &mut rng);
        let w = Matrix::random_normal(d, k, 1.0, &mut rng);
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = RouterParams::new(w, &g).unwrap();
        route_top_any(&x, &r).unwrap().mask
    }

    proptest! {
        #[test]
        fn frequency_identities(seed in 0u64..10_000, n in 1usize..60, k in 1usize..7) {
            let m = random_decision_mask(seed, n, 5, k);
            let ks: Vec<usize> = (0..n).map(|i| m.row_count(i)).collect();
            // per-token loop
            let mut total = 0u64;
            for i in 0..n {
                for e in 0..k {
                    total += u64::from(m.get(i, e));
                }
            }
            let act = activation_frequency(&[&m]).unwrap();
            prop_assert_eq!(act.iter().copied().sum::<Frequency>(), Ratio::new(total, n as u64));
            prop_assert_eq!(mean_k(&[&m]).unwrap(), Ratio::new(total, n as u64));
            let tf = topk_frequency(&ks, k).unwrap();
            prop_assert_eq!(tf.iter().copied().sum::<Frequency>(), Ratio::one());
            // direct histogram
            for (j, f) in tf.iter().enumerate() {
                let c = ks.iter().filter(|&&x| x == j).count() as u64;
                prop_assert_eq!(*f, Ratio::new(c, n as u64));
            }
        }
    }

    #[test]
    fn similarity_of_orthonormal_is_identity() {
        let r = RouterParams::new(Matrix::<f64>::identity(4), &[0.0; 4]).unwrap();
        assert_eq!(expert_similarity_matrix(&r).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn duplicated_column_is_one_off_diagonal() {
        let w = Matrix::from_rows(&[[1.0, 2.0, 0.0], [2.0, 4.0, 1.0], [0.5, 1.0, 0.0]]).unwrap();
        let r = RouterParams::new(w, &[0.0; 3]).unwrap();
        let s = expert_similarity_matrix(&r).unwrap();
        assert!((s[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((s[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_symmetric_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = RouterParams::<f64>::new(Matrix::random_normal(6, 5, 1.0, &mut rng), &[0.1; 5]).unwrap();
        let s = expert_similarity_matrix(&r).unwrap();
        for i in 0..5 {
            assert_eq!(s[(i, i)], 1.0);
            for j in 0..5 {
                assert!((s[(i, j)] - s[(j, i)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn thresholds_dumped_raw() {
        let r = RouterParams::new(Matrix::<f64>::identity(3), &[0.5, -1.0, 0.0]).unwrap();
        assert_eq!(gate_threshold_dump(&r), vec![0.5, -1.0, 0.0]);
    }

    #[test]
    fn log_rejects_going_back() {
        let mut log = MetricsLog::new();
        log.scalar(5, Some(0), "a", 1.0).unwrap();
        log.scalar(5, Some(1), "a", 1.0).unwrap();
        log.scalar(3, Some(1), "b", 1.0).unwrap();
        assert!(log.scalar(4, Some(0), "a", 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::new();
        log.scalar(1, None, names::TRAIN_LOSS, 0.1 + 0.2).unwrap();
        log.vector(1, Some(0), names::ACTIVATION_FREQUENCY, vec![0.25, 1.0 / 3.0]).unwrap();
        log.vector(1, Some(0), names::THRESHOLDS, vec![-0.0, 1e-300]).unwrap();
        log.vector(2, Some(0), names::ACTIVATION_FREQUENCY, vec![0.5]).unwrap();
        let back = MetricsLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn csv_rejects_wrong_schema() {
        let text = format!("{CSV_HEADER}\ndynmoe.metrics/0,1,,x,,1.0\n");
        assert!(matches!(MetricsLog::from_csv(&text), Err(Error::Schema { .. })));
    }

    #[test]
    fn report_on_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        MetricsLog::new().write_csv(&dir.path().join("metrics.csv")).unwrap();
        let err = report_run(dir.path(), &dir.path().join("report")).unwrap_err();
        assert!(err.to_string().contains("no metrics found"));
    }
}
