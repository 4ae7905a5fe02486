//! Acceptance suite: each check prints one PASS/FAIL line; the process
//! exits nonzero if any check fails.

use std::ops::{Add, Div, Mul, Sub};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynmoe::adaptive::{adapt, AdaptConfig};
use dynmoe::harness::{gen_task_with, sweep, train_loop, RouterKind, RunConfig, RunResult, SweepTable};
use dynmoe::losses::diversity_simplicity;
use dynmoe::moe::{moe_backward, moe_forward, Activation, Combine, Mode, MoeLayer};
use dynmoe::numerics::{finite_diff_grad, max_rel_err, Matrix};
use dynmoe::router::{route_eval, route_top_any, RouterParams};
use dynmoe::telemetry::Frequency;

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sigma(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_router(r: &mut ChaCha8Rng, d: usize, k: usize, g_lo: f64, g_hi: f64) -> RouterParams<f64> {
    let w = Matrix::random_normal(d, k, 1.0, r);
    let g: Vec<f64> = (0..k).map(|_| r.random_range(g_lo..g_hi)).collect();
    RouterParams::new(w, &g).unwrap()
}

fn gating_oracle() -> Check {
    let t = Instant::now();
    let mut r = rng(101);
    let mut entries = 0usize;
    for inst in 0..1000 {
        let d = r.random_range(1..=8);
        let k = r.random_range(1..=6);
        let n = r.random_range(1..=16);
        let x = Matrix::random_normal(n, d, 1.0, &mut r);
        let router = random_router(&mut r, d, k, -1.5, 1.5);
        let dec = route_top_any(&x, &router).map_err(|e| format!("instance {inst}: {e}"))?;
        let w = &router.w_g.value;
        for i in 0..n {
            let mut count = 0;
            for e in 0..k {
                let (mut xw, mut xx, mut ww) = (0.0, 0.0, 0.0);
                for j in 0..d {
                    xw += x[(i, j)] * w[(j, e)];
                    xx += x[(i, j)] * x[(i, j)];
                    ww += w[(j, e)] * w[(j, e)];
                }
                let s = xw / (xx.sqrt() * ww.sqrt());
                let on = sigma(s) > sigma(router.thresholds()[e]);
                count += usize::from(on);
                ensure(dec.mask.get(i, e) == on, || format!("instance {inst}: mask differs at ({i}, {e})"))?;
                entries += 1;
            }
            ensure(dec.k[i] == count, || format!("instance {inst}: k differs at token {i}"))?;
        }
    }
    let el = t.elapsed();
    ensure(el < Duration::from_secs(5), || format!("took {el:?}"))?;
    Ok(format!("1000 instances, {entries} entries identical, {el:.2?}"))
}

/// Forward-mode dual number: value and derivative along one direction.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Dual { v: r, d: self.d / (2.0 * r) }
    }
    fn sigmoid(self) -> Self {
        let s = sigma(self.v);
        Dual {
            v: s,
            d: self.d * s * (1.0 - s),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

/// `Σ_i ⟨u_i, y_i⟩` where the mask entering the mean combine is replaced by
/// `m + (σ(s) − σ(G)) − stop(σ(s) − σ(G))` on the active pairs; `dir`
/// selects the router entry whose derivative is carried.
fn surrogate(layer: &MoeLayer<f64>, x: &Matrix<f64>, u: &Matrix<f64>, experts_out: &[Matrix<f64>], dir: (bool, usize)) -> f64 {
    let (d, k) = (layer.d, layer.num_experts());
    let w = &layer.router.w_g.value;
    let wd = |r: usize, e: usize| Dual {
        v: w[(r, e)],
        d: if !dir.0 && dir.1 == r * k + e { 1.0 } else { 0.0 },
    };
    let gd = |e: usize| Dual {
        v: layer.router.thresholds()[e],
        d: if dir.0 && dir.1 == e { 1.0 } else { 0.0 },
    };
    let mut total = Dual::c(0.0);
    for i in 0..x.rows() {
        let mut xx = Dual::c(0.0);
        for j in 0..d {
            xx = xx + Dual::c(x[(i, j)] * x[(i, j)]);
        }
        let mut num = vec![Dual::c(0.0); d];
        let mut den = Dual::c(0.0);
        for e in 0..k {
            let (mut xw, mut ww) = (Dual::c(0.0), Dual::c(0.0));
            for j in 0..d {
                xw = xw + Dual::c(x[(i, j)]) * wd(j, e);
                ww = ww + wd(j, e) * wd(j, e);
            }
            let gap = (xw / (xx.sqrt() * ww.sqrt())).sigmoid() - gd(e).sigmoid();
            if gap.v <= 0.0 {
                continue;
            }
            let m = Dual { v: 1.0, d: gap.d };
            for j in 0..d {
                num[j] = num[j] + m * Dual::c(experts_out[e][(i, j)]);
            }
            den = den + m;
        }
        if den.v == 0.0 {
            continue;
        }
        for j in 0..d {
            total = total + Dual::c(u[(i, j)]) * (num[j] / den);
        }
    }
    total.d
}

fn normwise_rel(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let scale = b.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale.max(f64::MIN_POSITIVE)
}

fn ste_correctness() -> Check {
    let t = Instant::now();
    let mut r = rng(202);
    let (mut worst_router, mut worst_expert) = (0.0f64, 0.0f64);
    for inst in 0..100 {
        let d = r.random_range(2..=6);
        let k = r.random_range(1..=5);
        let n = r.random_range(2..=8);
        let h = r.random_range(2..=5);
        let mut layer = MoeLayer::<f64>::random(d, h, k, Activation::Gelu, &mut r).unwrap();
        for e in 0..k {
            layer.router.g.value[(0, e)] = r.random_range(-0.4..0.4);
        }
        let x = Matrix::random_normal(n, d, 1.0, &mut r);
        let u = Matrix::random_normal(n, d, 1.0, &mut r);
        let (_, dec) = moe_forward(&layer, &x, Mode::Train).unwrap();
        layer.zero_grad();
        moe_backward(&mut layer, &dec, &x, &u, Combine::Mean, false).unwrap();

        let outs: Vec<Matrix<f64>> = layer.experts.iter().map(|e| e.forward(&x).unwrap()).collect();
        let mut ref_w = Matrix::zeros(d, k);
        for rr in 0..d {
            for e in 0..k {
                ref_w[(rr, e)] = surrogate(&layer, &x, &u, &outs, (false, rr * k + e));
            }
        }
        let mut ref_g = Matrix::zeros(1, k);
        for e in 0..k {
            ref_g[(0, e)] = surrogate(&layer, &x, &u, &outs, (true, e));
        }
        let any = ref_w.as_slice().iter().chain(ref_g.as_slice()).any(|v| *v != 0.0);
        if any {
            worst_router = worst_router
                .max(normwise_rel(&layer.router.w_g.grad, &ref_w))
                .max(normwise_rel(&layer.router.g.grad, &ref_g));
        } else {
            ensure(layer.router.w_g.grad.max_abs_diff(&ref_w) == 0.0, || format!("instance {inst}: spurious router gradient"))?;
        }

        for ex in 0..k {
            for p in 0..4 {
                let analytic = layer.experts[ex].params()[p].grad.clone();
                let base = layer.experts[ex].params()[p].value.clone();
                let mut probe = layer.clone();
                let fd = finite_diff_grad(
                    |m: &Matrix<f64>| {
                        probe.experts[ex].params_mut()[p].value = m.clone();
                        let (y, dd) = moe_forward(&probe, &x, Mode::Train).unwrap();
                        assert_eq!(dd.mask, dec.mask, "mask moved under an expert perturbation");
                        y.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum()
                    },
                    &base,
                    1e-6,
                )
                .unwrap();
                worst_expert = worst_expert.max(max_rel_err(&analytic, &fd, 1e-6));
            }
        }
    }
    let el = t.elapsed();
    ensure(worst_router <= 1e-10, || format!("router rel err {worst_router:e}"))?;
    ensure(worst_expert <= 1e-4, || format!("expert rel err {worst_expert:e}"))?;
    ensure(el < Duration::from_secs(30), || format!("took {el:?}"))?;
    Ok(format!(
        "router rel err {worst_router:.1e}, expert rel err {worst_expert:.1e}, {el:.2?}"
    ))
}

fn aux_loss_gradient() -> Check {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = r.random_range(1..=8);
        let k = r.random_range(1..=6);
        let w = Matrix::random_normal(d, k, 1.0, &mut r);
        let (_, g) = diversity_simplicity(&w).unwrap();
        let fd = finite_diff_grad(|m: &Matrix<f64>| diversity_simplicity(m).unwrap().0.total, &w, 1e-6).unwrap();
        worst = worst.max(max_rel_err(&g, &fd, 1e-6));
    }
    let mut worst_div = 0.0f64;
    for _ in 0..20 {
        let k = r.random_range(1..=6);
        let d = r.random_range(k..=8);
        // Gram-Schmidt on Gaussian columns
        let a = Matrix::<f64>::random_normal(d, k, 1.0, &mut r);
        let mut q = Matrix::zeros(d, k);
        for e in 0..k {
            let mut v = a.col(e);
            for _ in 0..2 {
                for p in 0..e {
                    let c: f64 = (0..d).map(|j| v[j] * q[(j, p)]).sum();
                    (0..d).for_each(|j| v[j] -= c * q[(j, p)]);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.set_col(e, &v.iter().map(|x| x / n).collect::<Vec<_>>());
        }
        worst_div = worst_div.max(diversity_simplicity(&q).unwrap().0.diversity);
    }
    ensure(worst <= 1e-5, || format!("gradient rel err {worst:e}"))?;
    ensure(worst_div <= 1e-12, || format!("diversity at orthonormal columns {worst_div:e}"))?;
    Ok(format!("20 shapes, rel err {worst:.1e}; orthonormal diversity {worst_div:.1e}"))
}

fn scale_invariance() -> Check {
    let mut r = rng(404);
    for inst in 0..100 {
        let d = r.random_range(1..=8);
        let k = r.random_range(1..=6);
        let n = r.random_range(1..=20);
        let x = Matrix::random_normal(n, d, 1.0, &mut r);
        let router = random_router(&mut r, d, k, -1.5, 1.5);
        let base = route_top_any(&x, &router).unwrap();
        for c in [1e-3, 1.0, 1e3] {
            let m = route_top_any(&x.scale(c), &router).unwrap();
            ensure(m.mask == base.mask, || format!("instance {inst}: mask changed under scale {c}"))?;
        }
    }
    Ok("100 instances, c in {1e-3, 1, 1e3}, masks identical".into())
}

fn adaptive_scenarios() -> Check {
    // add: experts along e0 and e1, a cluster around e4 leaning away from both
    let d = 8;
    let mut w = Matrix::zeros(d, 2);
    w[(0, 0)] = 1.0;
    w[(1, 1)] = 1.0;
    let mut layer = MoeLayer::<f64>::random(d, 4, 2, Activation::Gelu, &mut rng(1)).unwrap();
    layer.router = RouterParams::new(w, &[0.0, 0.0]).unwrap();
    let mut r = rng(505);
    let mut rows = Vec::new();
    for _ in 0..30 {
        let mut v = vec![0.0; d];
        v[0] = 1.0 + r.random_range(0.0..0.5);
        v[1] = 1.0 + r.random_range(0.0..0.5);
        v[5] = r.random_range(-0.3..0.3);
        rows.push(v);
    }
    let mut cluster = Vec::new();
    for _ in 0..20 {
        let mut v = vec![0.0; d];
        v[0] = -0.3 - r.random_range(0.0..0.1);
        v[1] = -0.3 - r.random_range(0.0..0.1);
        v[4] = 1.0;
        v[6] = r.random_range(-0.2..0.2);
        v[7] = r.random_range(-0.2..0.2);
        cluster.push(v);
    }
    rows.extend(cluster.iter().cloned());
    let x = Matrix::from_rows(&rows).unwrap();
    let cl = Matrix::from_rows(&cluster).unwrap();
    let before = route_top_any(&cl, &layer.router).unwrap();
    ensure(before.k.iter().all(|&k| k == 0), || "cluster already activates an expert".into())?;
    layer.record.start();
    let (_, dec) = moe_forward(&layer, &x, Mode::Train).unwrap();
    layer.record.record(&dec, &x).unwrap();
    layer.record.stop();
    let stored = layer.record.r_s.clone();
    let cfg = AdaptConfig {
        max_experts: 8,
        ..AdaptConfig::default()
    };
    let rep = adapt(&mut layer, &cfg, &mut rng(2)).unwrap();
    ensure(rep.added && rep.removed_experts.is_empty() && layer.num_experts() == 3, || format!("unexpected report {rep:?}"))?;
    let col = layer.router.w_g.value.col(2);
    let dotp: f64 = col.iter().zip(&stored).map(|(a, b)| a * b).sum();
    let cos = dotp / (col.iter().map(|v| v * v).sum::<f64>().sqrt() * stored.iter().map(|v| v * v).sum::<f64>().sqrt());
    ensure((cos - 1.0).abs() <= 1e-12, || format!("new column cosine to stored sum {cos}"))?;
    ensure(layer.router.thresholds()[2] == 0.0, || "new threshold is not zero".into())?;
    let after = route_top_any(&cl, &layer.router).unwrap();
    ensure((0..cl.rows()).all(|i| after.mask.get(i, 2)), || "a cluster token misses the new expert".into())?;

    // remove: expert 2 can never fire, experts 0 and 1 always fire
    let mut layer = MoeLayer::<f64>::random(d, 4, 3, Activation::Gelu, &mut rng(3)).unwrap();
    for (e, g) in [(0, -10.0), (1, -10.0), (2, 10.0)] {
        layer.router.g.value[(0, e)] = g;
    }
    let batch = Matrix::random_normal(40, d, 1.0, &mut rng(4));
    let probe = Matrix::random_normal(25, d, 1.0, &mut rng(5));
    let (y_before, _) = moe_forward(&layer, &probe, Mode::Train).unwrap();
    layer.record.start();
    let (_, dec) = moe_forward(&layer, &batch, Mode::Train).unwrap();
    layer.record.record(&dec, &batch).unwrap();
    layer.record.stop();
    let rep = adapt(&mut layer, &cfg, &mut rng(6)).unwrap();
    ensure(rep.removed_experts == vec![2] && !rep.added, || format!("unexpected report {rep:?}"))?;
    let (y_after, _) = moe_forward(&layer, &probe, Mode::Train).unwrap();
    let diff = y_after.max_abs_diff(&y_before);
    ensure(diff <= 1e-12, || format!("probe outputs moved by {diff:e}"))?;
    Ok(format!("add: cosine-1 = {:.1e}, 20/20 cluster tokens routed; remove: probe drift {diff:.1e}", (cos - 1.0).abs()))
}

fn eval_totality() -> Check {
    let mut r = rng(606);
    let router = random_router(&mut r, 8, 5, 0.0, 2.0);
    let x = Matrix::random_normal(10_000, 8, 1.0, &mut r);
    let train = route_top_any(&x, &router).unwrap();
    let eval = route_eval(&x, &router).unwrap();
    let mut rescued = 0;
    for i in 0..x.rows() {
        ensure(eval.k[i] >= 1, || format!("token {i} has k = 0 at evaluation"))?;
        if train.k[i] >= 1 {
            ensure(train.mask.row(i) == eval.mask.row(i), || format!("token {i} changed although routed"))?;
        } else {
            rescued += 1;
        }
    }
    ensure(rescued > 0, || "no token exercised the fallback".into())?;
    Ok(format!("10000 tokens, {rescued} rescued by fallback, routed tokens unchanged"))
}

struct SeedRuns {
    seed: u64,
    table: SweepTable,
    runs: Vec<(String, RunResult<f64>, Duration)>,
}

fn seed_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task.seed = seed;
    cfg.train.seed = seed;
    cfg
}

fn run_sweeps() -> Vec<SeedRuns> {
    (0..5)
        .map(|seed| {
            let cfg = seed_config(seed);
            let task = gen_task_with::<f64>(&cfg.task).unwrap();
            let mut runs = Vec::new();
            let mut last = Instant::now();
            let table = sweep(&task, &cfg, |name, _, res| {
                runs.push((name.to_string(), res.clone(), last.elapsed()));
                last = Instant::now();
                Ok(())
            })
            .unwrap();
            SeedRuns { seed, table, runs }
        })
        .collect()
}

fn discovery(sweeps: &[SeedRuns]) -> Check {
    let cfg = RunConfig::default();
    let ok = cfg.task.n_skills == 4
        && cfg.task.d == 16
        && cfg.task.n_samples == 8000
        && cfg.model.initial_experts == 2
        && cfg.train.adapt.max_experts == 8
        && cfg.train.steps == 3000;
    ensure(ok, || "default configuration drifted from the discovery setting".into())?;
    let mut lines = Vec::new();
    let mut in_band = 0;
    let mut acc_fail = Vec::new();
    for s in sweeps {
        let dyn_row = s.table.rows.iter().find(|r| r.router == RouterKind::Dynmoe).unwrap();
        let best = s.table.best_baseline().unwrap();
        let k = dyn_row.experts[0];
        if (3..=6).contains(&k) {
            in_band += 1;
        }
        if dyn_row.accuracy < best.accuracy - 0.02 {
            acc_fail.push(s.seed);
        }
        let slowest = s.runs.iter().map(|r| r.2).max().unwrap();
        ensure(slowest < Duration::from_secs(300), || format!("seed {}: a run took {slowest:?}", s.seed))?;
        lines.push(format!(
            "seed {}: acc {:.4} vs best K={} k={} {:.4}, final K {k}",
            s.seed, dyn_row.accuracy, best.experts[0], best.top_k.unwrap_or(0), best.accuracy
        ));
    }
    let detail = lines.join("; ");
    ensure(acc_fail.is_empty(), || format!("accuracy below best baseline - 2 points for seeds {acc_fail:?}; {detail}"))?;
    ensure(in_band >= 4, || format!("final K in [3, 6] for only {in_band}/5 seeds; {detail}"))?;
    Ok(format!("K in band {in_band}/5; {detail}"))
}

fn telemetry_identities(sweeps: &[SeedRuns]) -> Check {
    let mut passes = 0;
    for s in sweeps {
        for (name, res, _) in &s.runs {
            for ev in &res.evals {
                for (l, le) in ev.layers.iter().enumerate() {
                    let n = le.k.len() as u64;
                    let total: u64 = le.k.iter().map(|&k| k as u64).sum();
                    let mean = Ratio::new(total, n);
                    let act: Frequency = le.activation_frequency.iter().copied().sum();
                    let topk: Frequency = le.topk_frequency.iter().copied().sum();
                    let where_ = || format!("seed {} {name} step {} layer {l}", s.seed, ev.step);
                    ensure(act == mean, || format!("{}: sum of activation frequency {act} != mean k {mean}", where_()))?;
                    ensure(le.mean_k == mean, || format!("{}: reported mean k {} != {mean}", where_(), le.mean_k))?;
                    ensure(topk == Ratio::new(1, 1), || format!("{}: top-k frequency sums to {topk}", where_()))?;
                    passes += 1;
                }
            }
        }
    }
    Ok(format!("{passes} eval passes, identities exact"))
}

fn activated_params(sweeps: &[SeedRuns]) -> Check {
    let mut compared = 0;
    for s in sweeps {
        let dyn_row = s.table.rows.iter().find(|r| r.router == RouterKind::Dynmoe).unwrap();
        for b in s.table.rows.iter().filter(|r| r.router == RouterKind::Topk) {
            if dyn_row.mean_k < b.mean_k {
                compared += 1;
                ensure(dyn_row.activated_params < b.activated_params, || {
                    format!(
                        "seed {}: mean k {:.3} < {:.3} but activated params {:.1} >= {:.1} (K={})",
                        s.seed, dyn_row.mean_k, b.mean_k, dyn_row.activated_params, b.activated_params, b.experts[0]
                    )
                })?;
            }
        }
    }
    ensure(compared > 0, || "no run had a smaller mean k than a baseline".into())?;
    Ok(format!("{compared} comparisons with smaller mean k, all with fewer activated params"))
}

fn determinism() -> Check {
    let mut cfg = seed_config(11);
    cfg.train.steps = 600;
    let task = gen_task_with::<f64>(&cfg.task).unwrap();
    let a = train_loop(&task, &cfg).unwrap();
    let b = train_loop(&task, &cfg).unwrap();
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    let sa = a.write_dir(da.path(), &cfg).unwrap();
    let sb = b.write_dir(db.path(), &cfg).unwrap();
    ensure(a.metrics == b.metrics, || "metrics logs differ".into())?;
    for f in ["metrics.csv", "adapt.jsonl", "k_trajectory.json", "checkpoint.final"] {
        let same = std::fs::read(da.path().join(f)).unwrap() == std::fs::read(db.path().join(f)).unwrap();
        ensure(same, || format!("{f} differs"))?;
    }
    ensure(sa.checkpoint_sha256 == sb.checkpoint_sha256, || "checkpoint hashes differ".into())?;
    Ok(format!("metrics and checkpoint {} identical", &sa.checkpoint_sha256[..16]))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, res: Check| {
        match res {
            Ok(msg) => println!("PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    };
    report("gating oracle equivalence", gating_oracle());
    report("straight-through correctness", ste_correctness());
    report("auxiliary loss gradient", aux_loss_gradient());
    report("scale invariance", scale_invariance());
    report("adaptive add and remove", adaptive_scenarios());
    report("eval totality", eval_totality());
    let t = Instant::now();
    let sweeps = run_sweeps();
    println!("      (sweeps over 5 seeds took {:.1?})", t.elapsed());
    report("end-to-end discovery", discovery(&sweeps));
    report("telemetry identities", telemetry_identities(&sweeps));
    report("activated-parameter direction", activated_params(&sweeps));
    report("determinism", determinism());
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
