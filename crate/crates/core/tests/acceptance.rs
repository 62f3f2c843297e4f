//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use habitat::bayesopt::{bo_run, expected_improvement, gp_fit, gp_posterior, BoSettings, Evaluation, HyperParams};
use habitat::clustering::{label_distance, stability_distance, ClusterModel};
use habitat::cohort::{generate_synthetic, Cohort, SurvivalRecord, SynthSpec};
use habitat::fae::{build_variant, FaeConfig, FaeModel, LossKind, VariantKind};
use habitat::pipeline::{apply_bundle, compare_variants, run_experiment, PipelineConfig};
use habitat::survival::{chi_square_sf_1df, km_fit, logrank_test, significance_loss};
use habitat::Matrix;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_correctness() -> Outcome {
    // Fourth-order central stencil: truncation and rounding both stay far
    // below the tolerance even for gradient entries near 1e-7.
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let data: Vec<f64> = (0..8 * 3).map(|_| r.random_range(-2.0..2.0)).collect();
        let batch = Matrix::from_vec(8, 3, data).unwrap();
        for kind in VariantKind::ALL {
            if kind == VariantKind::Baseline {
                let t = build_variant(kind, &FaeConfig::new(3)).unwrap();
                ensure(t.network().is_none(), || "baseline has parameters".into())?;
                continue;
            }
            let config = FaeConfig {
                seed,
                ..FaeConfig::new(3)
            };
            let model = FaeModel::init(kind, &config).unwrap();
            for loss in [LossKind::Pairwise, LossKind::Global] {
                if !model.supports(loss) {
                    continue;
                }
                let (_, analytic) = model.gradient(&batch, loss).unwrap();
                let mut probe = model.clone();
                for k in 0..probe.n_params() {
                    let orig = probe.params()[k];
                    let mut at = |d: f64| {
                        probe.params_mut()[k] = orig + d;
                        probe.loss(&batch, loss).unwrap()
                    };
                    let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                    probe.params_mut()[k] = orig;
                    let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
                checks += 1;
            }
        }
    }
    let detail = format!("{checks} (seed, variant, loss) checks, max relative error {worst:.2e}");
    ensure(worst < 1e-4, || detail.clone())?;
    Ok(detail)
}

fn brute_force_distance(a: &[usize], b: &[usize], eta: usize) -> f64 {
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    let best = permutations(eta)
        .iter()
        .map(|perm| a.iter().zip(b).filter(|(x, y)| **x != perm[**y]).count())
        .min()
        .unwrap();
    best as f64 / a.len() as f64
}

fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate() {
        if (x - c).abs() < (x - centroids[best]).abs() {
            best = j;
        }
    }
    best
}

fn stability_oracle() -> Outcome {
    let mut r = rng(2);
    for case in 0..500 {
        let eta = r.random_range(1..=6usize);
        let n = r.random_range(1..=12usize);
        let a: Vec<usize> = (0..n).map(|_| r.random_range(0..eta)).collect();
        let b: Vec<usize> = (0..n).map(|_| r.random_range(0..eta)).collect();
        let got = label_distance(&a, &b, eta).map_err(|e| e.to_string())?;
        let want = brute_force_distance(&a, &b, eta);
        ensure(got == want, || format!("label pair {case}: {got} vs {want} for {a:?} {b:?}"))?;
    }
    // Through fitted models: nearest-centroid predictions on validation points.
    for case in 0..200 {
        let eta = r.random_range(1..=6usize);
        let n = r.random_range(1..=12usize);
        let c1: Vec<f64> = (0..eta).map(|_| r.random_range(-10.0..10.0)).collect();
        let c2: Vec<f64> = (0..eta).map(|_| r.random_range(-10.0..10.0)).collect();
        let xs: Vec<f64> = (0..n).map(|_| r.random_range(-12.0..12.0)).collect();
        let model = |c: &[f64]| ClusterModel {
            centroids: Matrix::from_vec(eta, 1, c.to_vec()).unwrap(),
            eta,
            inertia: 0.0,
        };
        let val = Matrix::from_vec(n, 1, xs.clone()).unwrap();
        let got = stability_distance(&model(&c1), &model(&c2), &val).map_err(|e| e.to_string())?;
        let a: Vec<usize> = xs.iter().map(|&x| nearest(&c1, x)).collect();
        let b: Vec<usize> = xs.iter().map(|&x| nearest(&c2, x)).collect();
        let want = brute_force_distance(&a, &b, eta);
        ensure(got == want, || format!("model pair {case}: {got} vs {want}"))?;
    }
    Ok("500 label pairs and 200 model pairs equal the permutation brute force".into())
}

fn significance_fidelity() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let tau: f64 = r.random_range(0.001..0.5);
        let p: f64 = r.random_range(1e-8..1.0);
        let expected = if p <= tau {
            (tau.ln() - p.ln()) / (1.0 - tau)
        } else {
            p.ln() / tau.ln() - 1.0
        };
        let got = significance_loss(p, tau).map_err(|e| e.to_string())?;
        worst = worst.max((got.raw - expected).abs());
        ensure(got.oriented == -got.raw, || "oriented is not the negated raw loss".into())?;
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:.2e}"))?;
    let mut jump = 0.0f64;
    for tau in [0.01, 0.05, 0.1, 0.3] {
        let at = significance_loss(tau, tau).unwrap().raw;
        let above = significance_loss(tau * (1.0 + 1e-12), tau).unwrap().raw;
        let below = significance_loss(tau * (1.0 - 1e-12), tau).unwrap().raw;
        jump = jump.max((at - above).abs()).max((at - below).abs());
    }
    ensure(jump < 1e-9, || format!("discontinuity {jump:.2e} at p = tau"))?;
    Ok(format!("max deviation {worst:.2e} over 100 pairs, jump at tau {jump:.2e}"))
}

fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn gp_ei_oracles() -> Outcome {
    let mut r = rng(4);
    let (mut worst_mu, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let j = r.random_range(1..=20usize);
        let xs: Vec<f64> = (0..2 * j).map(|_| r.random_range(0.0..1.0)).collect();
        let ys: Vec<f64> = (0..j).map(|_| r.random_range(-1.0..1.0)).collect();
        let inputs = Matrix::from_vec(j, 2, xs).unwrap();
        let model = gp_fit(&inputs, &ys).map_err(|e| e.to_string())?;
        let l = model.lengthscale();
        let k = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            (-d / (2.0 * l * l)).exp()
        };
        let (mean, scale) = model.prior();
        let y: Vec<f64> = ys.iter().map(|v| (v - mean) / scale).collect();
        let diag = model.noise_var() + model.jitter();
        let gram: Vec<Vec<f64>> = (0..j)
            .map(|a| (0..j).map(|b| k(inputs.row(a), inputs.row(b)) + if a == b { diag } else { 0.0 }).collect())
            .collect();
        let alpha = dense_solve(gram.clone(), y);
        for _ in 0..5 {
            let x = [r.random_range(-0.2..1.2), r.random_range(-0.2..1.2)];
            let ks: Vec<f64> = (0..j).map(|a| k(inputs.row(a), &x)).collect();
            let mu = mean + scale * ks.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
            let w = dense_solve(gram.clone(), ks.clone());
            let var = scale * scale * (1.0 - ks.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
            let (gmu, gsd) = gp_posterior(&model, &x);
            worst_mu = worst_mu.max((gmu - mu).abs());
            worst_var = worst_var.max((gsd * gsd - var).abs());
        }
    }
    ensure(worst_mu < 1e-8 && worst_var < 1e-8, || {
        format!("mean deviation {worst_mu:.2e}, variance deviation {worst_var:.2e}")
    })?;
    let ei0 = expected_improvement(1.0, 1.0, 1.0);
    let ei1 = expected_improvement(0.0, 1.0, 1.0);
    ensure((ei0 - 0.39894).abs() < 1e-3 && (ei1 - 1.0833).abs() < 1e-3, || {
        format!("EI spot values {ei0} and {ei1}")
    })?;
    Ok(format!(
        "mean dev {worst_mu:.2e}, variance dev {worst_var:.2e}; EI {ei0:.5}, {ei1:.4}"
    ))
}

fn bo_convergence() -> Outcome {
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let settings = BoSettings {
            max_steps: 15,
            seed,
            ..BoSettings::default()
        };
        let trace = bo_run(
            |t: &HyperParams| {
                let loss = (t.gamma - 0.3).powi(2) + 0.1 * (t.eta as f64 - 5.0).powi(2);
                Ok(Evaluation {
                    stability_loss: loss,
                    significance_loss: loss,
                    loss,
                })
            },
            &settings,
        )
        .map_err(|e| e.to_string())?;
        let monotone = trace.steps.windows(2).all(|w| w[1].best <= w[0].best);
        ensure(monotone, || format!("seed {seed}: best-so-far increased"))?;
        ensure(trace.iterations <= 15, || format!("seed {seed}: {} iterations", trace.iterations))?;
        let b = trace.best_theta;
        if (b.gamma - 0.3).abs() < 0.05 && b.eta == 5 {
            hits += 1;
        } else {
            notes.push(format!("seed {seed} ended at {b}"));
        }
    }
    let detail = format!("{hits}/10 seeds within target {}", notes.join("; "));
    ensure(hits == 10, || detail.clone())?;
    Ok(detail)
}

fn recs(items: &[(f64, bool)]) -> Vec<SurvivalRecord> {
    items
        .iter()
        .enumerate()
        .map(|(i, &(t, e))| SurvivalRecord::new(format!("P{i}"), t, e).unwrap())
        .collect()
}

fn survival_statistics() -> Outcome {
    let all = km_fit(&recs(&[(1.0, true), (2.0, true), (3.0, true)])).unwrap();
    let s1 = 1.0 * (1.0 - 1.0 / 3.0);
    let s2 = s1 * (1.0 - 1.0 / 2.0);
    let s3 = s2 * (1.0 - 1.0 / 1.0);
    ensure(all.survival_probs == vec![s1, s2, s3], || format!("{:?}", all.survival_probs))?;
    ensure(
        all.survival_probs.iter().zip([2.0 / 3.0, 1.0 / 3.0, 0.0]).all(|(a, b)| (a - b).abs() <= f64::EPSILON),
        || "not within one epsilon of [2/3, 1/3, 0]".into(),
    )?;
    let cens = km_fit(&recs(&[(1.0, true), (2.0, false), (3.0, true)])).unwrap();
    ensure(cens.event_times == vec![1.0, 3.0] && cens.survival_probs == vec![s1, 0.0], || {
        format!("{:?} {:?}", cens.event_times, cens.survival_probs)
    })?;
    let g = recs(&[(1.0, true), (2.0, false), (4.0, true), (7.0, true)]);
    let same = logrank_test(&g, &g).map_err(|e| e.to_string())?;
    ensure(same.p_value == 1.0, || format!("identical groups p = {}", same.p_value))?;
    let p = chi_square_sf_1df(3.841);
    ensure((p - 0.05).abs() < 1e-3, || format!("sf(3.841) = {p}"))?;
    Ok(format!("KM exact; identical-group p = {}; sf(3.841) = {p:.5}", same.p_value))
}

fn planted(n: usize, seed: u64) -> Cohort {
    generate_synthetic(&SynthSpec::planted(n, 4, (24, 24), seed)).unwrap().0
}

fn variant_table() -> Outcome {
    let etas = [3usize, 4, 5, 6];
    let mut score: HashMap<(VariantKind, usize), Vec<f64>> = HashMap::new();
    let mut ch: HashMap<(VariantKind, usize), Vec<f64>> = HashMap::new();
    for seed in 0..5u64 {
        let cohort = planted(60, seed);
        let config = PipelineConfig {
            seed,
            variant_etas: etas.to_vec(),
            ..PipelineConfig::default()
        };
        for row in compare_variants(&cohort, 0.95, &config).map_err(|e| e.to_string())? {
            if let Some(e) = &row.error {
                return Err(format!("{} at eta {}: {e}", row.variant, row.eta));
            }
            score.entry((row.variant, row.eta)).or_default().push(row.stability_score.unwrap());
            ch.entry((row.variant, row.eta)).or_default().push(row.calinski_harabasz.unwrap());
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mut lines = Vec::new();
    let mut ok = true;
    for eta in etas {
        let (fs, bs) = (mean(&score[&(VariantKind::Fae, eta)]), mean(&score[&(VariantKind::Baseline, eta)]));
        let (fc, bc) = (mean(&ch[&(VariantKind::Fae, eta)]), mean(&ch[&(VariantKind::Baseline, eta)]));
        ok &= fs >= bs && fc >= bc;
        lines.push(format!("eta {eta}: score fae {fs:.3} vs baseline {bs:.3}, CH fae {fc:.0} vs baseline {bc:.0}"));
    }
    for kind in [VariantKind::StandardAe, VariantKind::EnsembleAe] {
        let s: Vec<String> = etas.iter().map(|&e| format!("{:.3}", mean(&score[&(kind, e)]))).collect();
        lines.push(format!("{kind} scores {}", s.join("/")));
    }
    let detail = lines.join("; ");
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn end_to_end_split() -> Outcome {
    let (mut train_hits, mut test_hits) = (0, 0);
    let mut ps = Vec::new();
    for seed in 0..10u64 {
        let train = planted(60, seed);
        let holdout = planted(40, seed + 1000);
        let mut config = PipelineConfig {
            seed,
            compare_variants: false,
            ..PipelineConfig::default()
        };
        config.fae.epochs = 30;
        config.bo.n_initial = 5;
        config.bo.max_steps = 5;
        let exp = run_experiment(&train, &config, |_, _, _| {}).map_err(|e| format!("seed {seed}: {e}"))?;
        let p_train = exp.final_fit.grouping.logrank.p_value;
        let app = apply_bundle(&exp.final_fit.bundle, &holdout).map_err(|e| e.to_string())?;
        let p_test = app.logrank.map_or(1.0, |l| l.p_value);
        train_hits += usize::from(p_train < 0.05);
        test_hits += usize::from(p_test < 0.05);
        ps.push(format!("{p_train:.1e}/{p_test:.1e}"));
    }
    let detail = format!("train {train_hits}/10, holdout {test_hits}/10 with p < 0.05 (train/holdout p: {})", ps.join(" "));
    ensure(train_hits >= 8 && test_hits >= 7, || detail.clone())?;
    Ok(detail)
}

fn joint_loss_algebra() -> Outcome {
    let cohort = generate_synthetic(&SynthSpec::planted(16, 4, (16, 16), 9)).unwrap().0;
    let mut steps = 0;
    for alpha in [0.0, 0.25, 0.5, 1.0] {
        let mut config = PipelineConfig {
            alpha,
            k_trials: 3,
            compare_variants: false,
            seed: 5,
            ..PipelineConfig::default()
        };
        config.fae.epochs = 5;
        config.bo.n_initial = 4;
        config.bo.max_steps = 2;
        let exp = run_experiment(&cohort, &config, |_, _, _| {}).map_err(|e| e.to_string())?;
        for (rec, step) in exp.evaluations.iter().zip(&exp.trace.steps) {
            let Some(b) = rec.breakdown else { continue };
            let expected = alpha * b.stability_loss + (1.0 - alpha) * b.significance_oriented;
            ensure((b.loss - expected).abs() <= 1e-12, || format!("alpha {alpha}: {} vs {expected}", b.loss))?;
            ensure(step.loss == b.loss, || "trace and record disagree".into())?;
            if alpha == 0.0 {
                ensure(b.loss == b.significance_oriented, || "alpha 0 does not track L_p".into())?;
            }
            if alpha == 1.0 {
                ensure(b.loss == b.stability_loss, || "alpha 1 does not track L_s".into())?;
            }
            steps += 1;
        }
    }
    ensure(steps > 0, || "no successful steps".into())?;
    Ok(format!("{steps} recorded steps over four alpha values"))
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
    }
    out
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_habitat");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cohort = dir.path().join("cohort");
    let status = Command::new(bin)
        .args(["synth", "--patients", "10", "--regions", "3", "--seed", "3", "--out"])
        .arg(&cohort)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || "synth failed".into())?;
    let mut runs = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(format!("run{threads}"));
        let o = Command::new(bin)
            .args(["--threads", threads, "run", "--seed", "11", "--max-steps", "3", "--k-trials", "2", "--quiet", "--cohort"])
            .arg(&cohort)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        runs.push(out);
    }
    let trace: Vec<Vec<u8>> = runs.iter().map(|r| fs::read(r.join("trace.csv")).unwrap()).collect();
    ensure(trace[0] == trace[1], || "trace.csv differs".into())?;
    let bundles: Vec<_> = runs.iter().map(|r| tree_bytes(&r.join("bundle"))).collect();
    ensure(!bundles[0].is_empty() && bundles[0] == bundles[1], || "bundle files differ".into())?;
    Ok(format!(
        "trace.csv ({} bytes) and {} bundle files identical across --threads 1 and 2",
        trace[0].len(),
        bundles[0].len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("stability distance oracle", stability_oracle),
        ("significance loss fidelity", significance_fidelity),
        ("GP and EI oracles", gp_ei_oracles),
        ("BO convergence", bo_convergence),
        ("survival statistics", survival_statistics),
        ("variant comparison direction", variant_table),
        ("train and holdout separation", end_to_end_split),
        ("joint loss algebra", joint_loss_algebra),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| *x == id || name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
