//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 when every criterion could be evaluated, whatever the verdicts.
//! Set `IRM_ACCEPTANCE_STRICT=1` to exit non-zero on any FAIL.
//! `IRM_ACCEPTANCE_ONLY=name,name` restricts the run to the named criteria.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use irm_cli::config::{CmnistRunConfig, SyntheticConfig};
use irm_cli::synthetic::{summarize, synthetic_rows};
use irm_core::cmnist::{self, max_calibration_gap, Method, Mnist};
use irm_core::invariance::{irm_penalty, irm_penalty_minibatch, landscape_sweep, LinearRepresentation, Loss, Variant};
use irm_core::learners::mlp::{full_batch_objective, EnvData, Mlp};

use irm_core::learners::{fit_erm_linear, fit_irm_linear, fit_robust_linear, irm_linear_objective, TrainConfig};
use irm_core::numkit::{gaussian_matrix, Rng};
use irm_core::sem::{example1_moments, example1_population_coeffs, sample_example1, Dataset, Example1Spec, Moments, Regressors};
use irm_core::theory::{run_suite, SuiteConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<Outcome, String>,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn example1_envs(sigmas: &[f64], n: usize, seed: u64) -> Vec<Dataset> {
    let mut rng = Rng::stream(seed, "example1");
    sigmas.iter().map(|&s| sample_example1(&Example1Spec::new(s, n).unwrap(), &mut rng)).collect()
}

fn example1_analytics() -> Result<Outcome, String> {
    let env = &example1_envs(&[1.0], 100_000, 0)[0];
    let cases = [
        (Regressors::X1Only, vec![0usize], [1.0, 0.0]),
        (Regressors::X2Only, vec![1], [0.0, 2.0 / 3.0]),
        (Regressors::Both, vec![0, 1], [0.5, 0.5]),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (which, cols, expected) in cases {
        let sub = Dataset::new(env.x.select_columns(&cols), env.y.clone(), "e").map_err(|e| e.to_string())?;
        let fit = sub.moments().regression(0.0).map_err(|e| e.to_string())?;
        let mut full = [0.0; 2];
        for (c, f) in cols.iter().zip(&fit) {
            full[*c] = *f;
        }
        let population = example1_population_coeffs(1.0, which);
        pass &= full.iter().zip(&expected).all(|(a, b)| close(*a, *b, 0.02));
        pass &= population.iter().zip(&expected).all(|(a, b)| close(*a, *b, 1e-12));
        parts.push(format!("{which:?} ({:.3}, {:.3})", full[0], full[1]));
    }
    Ok(outcome(pass, parts.join(", ")))
}

fn landscape() -> Result<Outcome, String> {
    let err = |e: irm_core::invariance::InvarianceError| e.to_string();
    let grid: Vec<f64> = (0..=800).map(|i| -4.0 + 0.01 * i as f64).collect();
    let mut lin_err: f64 = 0.0;
    for sigma_sq in [1.0, 2.0] {
        for r in landscape_sweep(sigma_sq, &grid, Variant::DLin, 1.0).map_err(err)? {
            lin_err = lin_err.max((r.penalty - r.c * r.c * sigma_sq * sigma_sq).abs());
        }
    }
    let at = |v: Variant| landscape_sweep(1.0, &[0.0, 1e-3, 1.0], v, 1.0).map_err(err);
    let dist = at(Variant::DDist)?;
    let ridged = at(Variant::DDistRidged)?;
    let jump = dist[1].penalty / dist[2].penalty;
    let ridged_jump = (ridged[1].penalty - ridged[0].penalty).abs() / ridged[2].penalty;
    let pass = lin_err <= 1e-12 && dist[0].penalty == 0.0 && jump >= 1e3 && ridged_jump >= 10.0;
    Ok(outcome(
        pass,
        format!("max |d_lin - c²σ⁴| {lin_err:e}; d_dist(0) {}; d_dist(1e-3)/d_dist(1) {jump:.3e}; ridged jump ratio {ridged_jump:.1}", dist[0].penalty),
    ))
}

fn irm_recovery() -> Result<Outcome, String> {
    let envs = example1_envs(&[10.0, 20.0], 10_000, 0);
    let irm = fit_irm_linear(&envs, &TrainConfig::linear(1e4)).map_err(|e| e.to_string())?;
    let erm = fit_erm_linear(&envs, 0.0).map_err(|e| e.to_string())?;
    let robust = fit_robust_linear(&envs, &[0.0, 0.0], 20_000, 1.0).map_err(|e| e.to_string())?;
    let probe = example1_moments(0.1);
    let (ri, re, rr) = (probe.risk(&irm.v), probe.risk(&erm.v), probe.risk(&robust.v));
    let recovered = close(irm.v[0], 1.0, 0.05) && irm.v[1].abs() <= 0.05;
    let pass = recovered && erm.v[1] >= 0.5 && ri < re && ri < rr;
    Ok(outcome(
        pass,
        format!(
            "irm v = ({:.3}, {:.3}); erm v₂ = {:.3}; risk at σ² = 0.1: irm {ri:.3}, erm {re:.3}, robust {rr:.3}",
            irm.v[0], irm.v[1], erm.v[1]
        ),
    ))
}

fn synthetic_grid() -> Result<Outcome, String> {
    let config = SyntheticConfig::default();
    let rows = synthetic_rows(&config, jobs());
    let summary = summarize(&rows);
    let get = |setup: &str, method: &str| summary.iter().find(|s| s.setup == setup && s.method == method).unwrap();
    let mut wins = 0;
    let mut conservative = true;
    let mut parts = Vec::new();
    for setup in &config.setups {
        let (erm, irm, icp) = (get(setup, "erm"), get(setup, "irm"), get(setup, "icp"));
        let ratio = irm.median_causal_error / erm.median_causal_error;
        if ratio <= 0.1 {
            wins += 1;
        }
        if setup.starts_with('P') && icp.median_noncausal_norm > irm.median_noncausal_norm {
            conservative = false;
        }
        parts.push(format!("{setup} {ratio:.2}"));
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(outcome(
        wins >= 6 && conservative && failed == 0,
        format!(
            "IRM/ERM causal error ratio ≤ 0.1 on {wins}/8 [{}]; ICP non-causal ≤ IRM on P setups: {conservative}; failed fits {failed}",
            parts.join(", ")
        ),
    ))
}

fn theory_suite() -> Result<Outcome, String> {
    let report = run_suite(&SuiteConfig::default()).map_err(|e| e.to_string())?;
    let parts: Vec<String> = report.checks.iter().map(|c| format!("{} {}", c.name, if c.pass { "ok" } else { "FAILED" })).collect();
    Ok(outcome(report.all_pass(), parts.join(", ")))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6) || (a - b).abs() < 1e-8
}

fn penalty_estimator() -> Result<Outcome, String> {
    let mut rng = Rng::new(21);
    let data = sample_example1(&Example1Spec::new(1.0, 2000).unwrap(), &mut rng);
    let model = LinearRepresentation::row(&[0.4, 0.7]).map_err(|e| e.to_string())?;
    let full = irm_penalty(&model, &data, Loss::Squared).map_err(|e| e.to_string())?.value;
    let products: Vec<f64> = (0..10_000)
        .map(|_| {
            let ia: Vec<usize> = (0..16).map(|_| rng.index(data.len())).collect();
            let ib: Vec<usize> = (0..16).map(|_| rng.index(data.len())).collect();
            irm_penalty_minibatch(&model, &data.subset(&ia), &data.subset(&ib), Loss::Squared).unwrap()
        })
        .collect();
    let n = products.len() as f64;
    let mean = products.iter().sum::<f64>() / n;
    let se = (products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let unbiased = (mean - full).abs() <= 3.0 * se;

    // linear objective on random moments
    let mut linear_ok = true;
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let d = 1 + (seed as usize) % 5;
        let moments: Vec<Moments> = (0..2)
            .map(|_| {
                let x = gaussian_matrix(20, d, 0.0, 1.0, &mut rng);
                let y: Vec<f64> = (0..20).map(|_| rng.standard_normal()).collect();
                Moments::from_samples(&x, &y)
            })
            .collect();
        let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let lambda = 10.0 * rng.uniform();
        let (_, grad, _, _) = irm_linear_objective(&v, &moments, lambda, 0.01);
        let h = 1e-6;
        for k in 0..d {
            let (mut a, mut b) = (v.clone(), v.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (irm_linear_objective(&a, &moments, lambda, 0.01).0 - irm_linear_objective(&b, &moments, lambda, 0.01).0) / (2.0 * h);
            linear_ok &= rel_close(grad[k], fd, 1e-4);
        }
    }

    // 8-unit network with the logistic loss and the second-order penalty term
    let mut mlp_ok = true;
    for seed in 0..5u64 {
        let mut rng = Rng::new(seed ^ 0x5eed);
        let mut model: Mlp<f64> = Mlp::new(&[4, 8, 8, 1], &mut rng);
        for b in model.biases.iter_mut().flatten() {
            *b = 0.1 * rng.standard_normal();
        }
        let envs: Vec<EnvData<f64>> = (0..2)
            .map(|_| {
                let x = gaussian_matrix(12, 4, 0.0, 1.0, &mut rng);
                let y: Vec<f64> = (0..12).map(|_| f64::from(u8::from(rng.bernoulli(0.5)))).collect();
                EnvData::from_dataset(&Dataset::new(x, y, "e").unwrap())
            })
            .collect();
        let eval = |m: &Mlp<f64>| full_batch_objective(m, &envs, 7.0, 1e-3, Loss::Logistic);
        let analytic: Vec<f64> = eval(&model).1.params().copied().collect();
        let base: Vec<f64> = model.params().copied().collect();
        let h = 1e-6;
        for k in 0..base.len() {
            let at = |delta: f64| {
                let mut m = model.clone();
                *m.params_mut().nth(k).unwrap() = base[k] + delta;
                eval(&m).0.loss
            };
            mlp_ok &= rel_close(analytic[k], (at(h) - at(-h)) / (2.0 * h), 1e-4);
        }
    }
    Ok(outcome(
        unbiased && linear_ok && mlp_ok,
        format!(
            "batch-pair mean {mean:.5} vs full {full:.5} (3 SE = {:.5}); linear gradients {}; MLP gradients {}",
            3.0 * se,
            if linear_ok { "ok" } else { "MISMATCH" },
            if mlp_ok { "ok" } else { "MISMATCH" }
        ),
    ))
}

fn mnist_location() -> Option<PathBuf> {
    std::env::var_os(irm_cli::MNIST_ENV)
        .map(PathBuf::from)
        .or_else(|| Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")))
        .filter(|d| d.join(cmnist::TRAIN_LABELS).is_file())
}

fn colored_mnist() -> Result<Outcome, String> {
    let Some(dir) = mnist_location() else {
        return Ok(outcome(false, format!("MNIST files not found; set {} or place them in data/mnist", irm_cli::MNIST_ENV)));
    };
    let mnist = Mnist::load(&dir, &Default::default()).map_err(|e| e.to_string())?;
    let config = CmnistRunConfig::default().core();
    let results = cmnist::run_experiment(&mnist, &config, jobs(), &|r| {
        eprintln!("  cmnist run {} {}: train {:.1} test {:.1}", r.run, r.method.name(), 100.0 * r.train_accuracy, 100.0 * r.test_accuracy)
    })
    .map_err(|e| e.to_string())?;
    let pct = |m: Method| {
        let s = results.summary_for(m);
        (100.0 * s.train_mean, 100.0 * s.test_mean)
    };
    let (erm_train, erm_test) = pct(Method::Erm);
    let (irm_train, irm_test) = pct(Method::Irm);
    let (_, oracle_test) = pct(Method::Oracle);
    let erm_gap = max_calibration_gap(&results.calibration["erm"], "train_0", "train_1", 200);
    let oracle_gap = max_calibration_gap(&results.calibration["oracle"], "train_0", "train_1", 200);
    let pass = (84.0..=91.0).contains(&erm_train)
        && erm_test < 30.0
        && (60.0..=73.0).contains(&irm_test)
        && irm_test > irm_train - 12.0
        && (70.0..=76.0).contains(&oracle_test)
        && erm_gap.is_some_and(|g| g > 0.05)
        && oracle_gap.is_some_and(|g| g <= 0.05);
    Ok(outcome(
        pass,
        format!(
            "ERM {erm_train:.1}/{erm_test:.1}, IRM {irm_train:.1}/{irm_test:.1}, oracle test {oracle_test:.1}; \
             calibration gap ERM {erm_gap:.3?}, oracle {oracle_gap:.3?}"
        ),
    ))
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "example1-analytics", budget: Duration::from_secs(5), run: example1_analytics },
        Criterion { name: "landscape", budget: Duration::from_secs(1), run: landscape },
        Criterion { name: "irm-recovery", budget: Duration::from_secs(120), run: irm_recovery },
        Criterion { name: "synthetic-grid", budget: Duration::from_secs(30 * 60), run: synthetic_grid },
        Criterion { name: "theory-suite", budget: Duration::from_secs(120), run: theory_suite },
        Criterion { name: "penalty-estimator", budget: Duration::from_secs(60), run: penalty_estimator },
        Criterion { name: "colored-mnist", budget: Duration::from_secs(45 * 60), run: colored_mnist },
    ];
    let only: Option<Vec<String>> =
        std::env::var("IRM_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let strict = std::env::var("IRM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut passed = 0;
    let mut ran = 0;
    let mut errored = false;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.iter().any(|n| n == c.name))) {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        ran += 1;
        match result {
            Ok(o) => {
                let in_time = elapsed <= c.budget;
                let pass = o.pass && in_time;
                passed += usize::from(pass);
                let timing = if in_time { String::new() } else { format!(" over budget {:?}", c.budget) };
                println!("{} {}: {} ({:.1}s{timing})", if pass { "PASS" } else { "FAIL" }, c.name, o.detail, elapsed.as_secs_f64());
            }
            Err(e) => {
                errored = true;
                println!("FAIL {}: evaluation error: {e} ({:.1}s)", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("{passed}/{ran} passed");
    if errored || (strict && passed < ran) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
