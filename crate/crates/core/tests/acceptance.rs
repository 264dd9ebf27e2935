//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use weaklab::error_expansion::{apply_l2star, distribution_pairing, pair_with_pi, principal_density_pi, principal_term_ct};
use weaklab::euler::{euler_exact_law_affine, gbm_euler_power_moment};
use weaklab::montecarlo::richardson_table;
use weaklab::study::{run_and_write, run_study, StudyConfig, StudyReport};
use weaklab::{make_constant_model, make_gbm_model, make_ou_model, Matrix, MultiIndex, TestFunction};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn config(dir: &Path, tag: &str, mut body: Value) -> StudyConfig {
    body["output"] = json!({
        "csv": dir.join(format!("{tag}.csv")),
        "json": dir.join(format!("{tag}.json")),
    });
    StudyConfig::from_json(&body.to_string()).expect("valid config")
}

fn study(dir: &Path, tag: &str, body: Value) -> StudyReport {
    run_study(&config(dir, tag, body)).expect("study runs")
}

fn gates_line(r: &StudyReport) -> String {
    r.summary
        .gates
        .iter()
        .map(|g| format!("{}={:.4e}{}", g.name, g.value, if g.pass { "" } else { "(fail)" }))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fit_slope(r: &StudyReport, name: &str) -> Option<f64> {
    r.summary.fits.iter().find(|f| f.name == name).and_then(|f| f.slope)
}

fn value(r: &StudyReport, name: &str) -> f64 {
    r.summary.values.iter().find(|(k, _)| k == name).map_or(f64::NAN, |(_, v)| *v)
}

fn c1_exact_scheme(dir: &Path) -> Outcome {
    let sigma = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.3, 0.4]]).unwrap();
    let b = vec![0.1f64, -0.2];
    let model = make_constant_model(b.clone(), sigma.clone()).unwrap();
    let x = [0.3f64, -0.7];
    let t = 0.8f64;
    let cov = sigma.matmul(&sigma.transpose()).scale(t);
    let mut law_err = 0.0f64;
    for n in [1, 3, 16, 128] {
        let law = euler_exact_law_affine(&model, &x, n, t).unwrap();
        for i in 0..2 {
            law_err = law_err.max((law.mean[i] - (x[i] + b[i] * t)).abs());
        }
        law_err = law_err.max(law.cov.max_abs_diff(&cov));
    }
    let g = |a: &MultiIndex, y: &[f64]| Some(2f64.powi(a.as_slice()[1] as i32) * (y[0] + 2.0 * y[1]).exp());
    let mut l2 = 0.0f64;
    let mut pi = 0.0f64;
    let zero = MultiIndex::zero(2);
    for z in [[0.0, 0.0], [1.0, -0.5], [-2.0, 1.5]] {
        l2 = l2.max(apply_l2star(&model, &g, &z).unwrap().abs());
        pi = pi.max(principal_density_pi(&model, 0.5, &x, &z, &zero, &zero, 1e-8).unwrap().value.abs());
    }
    let r = study(
        dir,
        "c1",
        json!({"study": "weak-rate", "model": {"kind": "constant", "b": b, "sigma": [[0.5, 0.0], [0.3, 0.4]]},
               "function": {"kind": "power", "k": 2}, "x": x, "t": t, "n_ladder": [2, 4, 8, 16],
               "samples": 1_000_000, "seed": 11}),
    );
    let pass = law_err < 1e-14 && l2 == 0.0 && pi == 0.0 && r.passed() && r.summary.status == "exact-scheme";
    outcome(pass, format!("law error {law_err:.1e}, max|L2*g| {l2:.1e}, max|pi| {pi:.1e}, MC {}", gates_line(&r)))
}

fn gbm_ladder_values(mu: f64, ns: &[usize]) -> Vec<(usize, f64)> {
    ns.iter().map(|&n| (n, gbm_euler_power_moment(mu, 0.2, 1.0, 1, n, 1.0).unwrap())).collect()
}

fn c2_first_order(dir: &Path) -> Outcome {
    let det = study(
        dir,
        "c2-det",
        json!({"study": "weak-rate", "model": {"kind": "gbm", "mu": 0.1, "sigma": 0.2},
               "function": {"kind": "identity"}, "x": [1.0], "n_ladder": [8, 16, 32, 64, 128],
               "estimator": "deterministic", "seed": 1, "tolerances": {"slope": 0.05}}),
    );
    // closed-form check of the deterministic route itself
    let closed = gbm_ladder_values(0.1, &[8, 128])
        .iter()
        .map(|&(n, v)| (v - (1.0 + 0.1 / n as f64).powi(n as i32)).abs())
        .fold(0.0, f64::max);
    let mc = study(
        dir,
        "c2-mc",
        json!({"study": "weak-rate", "model": {"kind": "gbm", "mu": 0.1, "sigma": 0.2},
               "function": {"kind": "identity"}, "x": [1.0], "n_ladder": [4, 8, 16, 32],
               "precision": {"ratio": 5.0, "max": 1_000_000}, "seed": 2}),
    );
    let pass = det.passed() && mc.passed() && closed < 1e-13;
    outcome(
        pass,
        format!(
            "deterministic slope {:.4} (closed-form gap {closed:.1e}), Monte Carlo slope {:.4} at N={}",
            fit_slope(&det, "plain").unwrap_or(f64::NAN),
            fit_slope(&mc, "plain").unwrap_or(f64::NAN),
            mc.rows.first().map_or(0, |r| r.samples)
        ),
    )
}

fn c3_romberg(dir: &Path) -> Outcome {
    let r = study(
        dir,
        "c3",
        json!({"study": "romberg", "model": {"kind": "gbm", "mu": 0.1, "sigma": 0.2},
               "function": {"kind": "identity"}, "x": [1.0], "n_ladder": [8, 16, 32, 64, 128],
               "estimator": "deterministic", "seed": 1}),
    );
    let slope = fit_slope(&r, "romberg").unwrap_or(f64::NAN);
    let rich = richardson_table(&gbm_ladder_values(0.1, &[40, 80, 160]), 3).unwrap();
    let residual = (rich - 0.1f64.exp()).abs();
    let pass = (slope + 2.0).abs() <= 0.1 && residual <= 1e-6;
    outcome(pass, format!("Romberg slope {slope:.4}, j=3 residual at n=40 {residual:.2e}"))
}

fn c4_principal_coefficient(dir: &Path) -> Outcome {
    let mu = 0.1f64;
    let gbm = make_gbm_model(mu, 0.2).unwrap();
    let ct = principal_term_ct(&gbm, &TestFunction::identity(), 1.0, &[1.0], 1e-8).unwrap();
    // n((1 + μ/n)^n − e^μ) → −e^μ μ²/2
    let expected = -(mu.exp()) * mu * mu / 2.0;
    let gbm_gap = (ct.value - expected).abs();
    let r = study(
        dir,
        "c4",
        json!({"study": "bias-limit", "model": {"kind": "ou", "theta": 1.0, "sigma": 0.5},
               "function": {"kind": "power", "k": 2}, "x": [1.0], "n_ladder": [4, 8, 16],
               "reference": "fine-euler", "n_ref": 256, "samples": 1_000_000, "seed": 4}),
    );
    let pass = gbm_gap <= 1e-6 && r.passed();
    outcome(
        pass,
        format!(
            "GBM C_1 {:.8e} vs {expected:.8e} (gap {gbm_gap:.1e}); OU y^2 C_1 {:.6} vs limit {:.6} ± {:.1e}",
            ct.value,
            value(&r, "principal_term"),
            value(&r, "extrapolated_limit"),
            value(&r, "extrapolated_limit_ci")
        ),
    )
}

fn c5_density(dir: &Path) -> Outcome {
    let r = study(
        dir,
        "c5",
        json!({"study": "density", "model": {"kind": "ou", "theta": 1.0, "sigma": 0.5},
               "grid": {"t": [0.25, 0.5, 1.0], "x": [-1.0, 0.0, 1.0], "y": [-1.0, 0.0, 1.0]},
               "n_ladder": [128, 256], "seed": 5}),
    );
    outcome(r.passed(), gates_line(&r))
}

fn c6_tail_bounds(dir: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for kernel in ["pi", "density"] {
        let r = study(
            dir,
            &format!("c6-{kernel}"),
            json!({"study": "tailbound", "model": {"kind": "ou", "theta": 1.0, "sigma": 0.5}, "kernel": kernel,
                   "grid": {"t": [0.25, 0.5, 1.0], "x": [-1.0, 0.0, 1.0], "y": [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]},
                   "seed": 6}),
        );
        pass &= r.passed();
        lines.push(format!("{kernel}: c1={:.3} c2={:.2} {}", value(&r, "c1"), value(&r, "c2"), gates_line(&r)));
    }
    outcome(pass, lines.join("; "))
}

fn c7_pairings() -> Outcome {
    let model = make_ou_model(1.0, 0.5).unwrap();
    let (t, x) = (1.0, [1.0]);
    let functionals = [
        ("delta", TestFunction::dirac(vec![0.5])),
        ("d-delta", TestFunction::dirac_deriv(vec![0.5], MultiIndex::from_slice(&[1])).unwrap()),
        ("y^2", TestFunction::power(2)),
        ("exp|y|", TestFunction::exp_abs()),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, s) in &functionals {
        let scaled: Vec<(usize, f64)> = [64usize, 128, 256]
            .iter()
            .map(|&n| {
                let (approx, exact) = distribution_pairing(&model, s, n, t, &x).unwrap();
                (n, n as f64 * (approx - exact))
            })
            .collect();
        let kernel = pair_with_pi(&model, s, t, &x, 1e-7).unwrap().value;
        let scale = kernel.abs().max(1.0);
        let cauchy = scaled.windows(2).all(|w| (w[1].1 - w[0].1).abs() <= 4.0 / w[0].0 as f64 * scale);
        let last = scaled[2].1;
        let matches = (last - kernel).abs() <= 4.0 / 256.0 * scale;
        let extrapolated = 2.0 * scaled[2].1 - scaled[1].1;
        pass &= cauchy && matches;
        parts.push(format!("{name}: n(pn-p)={last:.6} <S,pi>={kernel:.6} extrapolated gap {:.1e}", (extrapolated - kernel).abs()));
    }
    outcome(pass, parts.join("; "))
}

fn c8_pricing(dir: &Path) -> Outcome {
    let tanh = study(
        dir,
        "c8-tanh",
        json!({"study": "greeks", "model": {"kind": "bounded-vol", "a0": 0.0, "b0": 0.6, "c0": 0.5},
               "payoff": {"payoff": "call", "strike": 1.0}, "v": [1.0], "n_ladder": [4, 8, 16, 32],
               "n_ref": 512, "samples": 1_000_000, "seed": 8, "tolerances": {"slope": 0.2}}),
    );
    let bs = study(
        dir,
        "c8-bs",
        json!({"study": "greeks", "model": {"kind": "black-scholes", "sigma": 0.2},
               "payoff": {"payoff": "call", "strike": 1.0}, "v": [1.0], "n_ladder": [16],
               "samples": 1_000_000, "seed": 9}),
    );
    let pass = tanh.passed() && bs.passed();
    outcome(
        pass,
        format!(
            "tanh-vol {} (Monte Carlo Romberg fit: {}); Black-Scholes {}",
            gates_line(&tanh),
            tanh.summary
                .fits
                .iter()
                .find(|f| f.name == "price-romberg-monte-carlo")
                .map_or("none".into(), |f| f.slope.map_or_else(|| f.note.clone().unwrap_or_default(), |s| format!("{s:.3}"))),
            gates_line(&bs)
        ),
    )
}

fn c9_moments(dir: &Path) -> Outcome {
    let r = study(
        dir,
        "c9",
        json!({"study": "moments", "model": {"kind": "bounded-vol", "a0": 0.0, "b0": 0.6, "c0": 0.5},
               "grid": {"t": [0.25, 1.0], "x": [0.0, 2.0]}, "n_ladder": [2, 8, 32, 128], "q": 4,
               "samples": 200_000, "seed": 10}),
    );
    outcome(r.passed(), format!("c={:.4} {}", value(&r, "c"), gates_line(&r)))
}

fn c10_reproducibility(dir: &Path) -> Outcome {
    let bodies = [
        json!({"study": "weak-rate", "model": {"kind": "ou", "theta": 1.0, "sigma": 0.5},
               "function": {"kind": "power", "k": 2}, "x": [1.0], "n_ladder": [4, 8, 16, 32],
               "samples": 100_000, "seed": 12}),
        json!({"study": "romberg", "model": {"kind": "bounded-vol", "a0": 0.0, "b0": 0.6, "c0": 0.5},
               "function": {"kind": "identity"}, "x": [0.0], "n_ladder": [4, 8, 16], "reference": "fine-euler",
               "n_ref": 128, "samples": 50_000, "seed": 13}),
    ];
    let mut pass = true;
    for (i, body) in bodies.into_iter().enumerate() {
        let cfg = config(dir, &format!("c10-{i}"), body);
        let mut runs = Vec::new();
        for _ in 0..2 {
            run_and_write(&cfg).unwrap();
            runs.push((std::fs::read(&cfg.output.csv).unwrap(), std::fs::read(&cfg.output.json).unwrap()));
        }
        pass &= runs[0] == runs[1];
    }
    outcome(pass, "two studies rerun with identical bytes")
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let criteria: Vec<(u32, &str, Duration, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "exact-scheme null", Duration::from_secs(60), Box::new(|| c1_exact_scheme(d))),
        (2, "first-order weak rate", Duration::from_secs(300), Box::new(|| c2_first_order(d))),
        (3, "Romberg order", Duration::from_secs(300), Box::new(|| c3_romberg(d))),
        (4, "principal coefficient (OU part empirical without (B))", Duration::from_secs(300), Box::new(|| c4_principal_coefficient(d))),
        (5, "density expansion (OU, empirical without (B))", Duration::from_secs(900), Box::new(|| c5_density(d))),
        (6, "tail-bound certificates (OU, empirical without (B))", Duration::from_secs(600), Box::new(|| c6_tail_bounds(d))),
        (7, "distribution pairings (OU, empirical without (B))", Duration::from_secs(600), Box::new(c7_pairings)),
        (8, "pricing and Greeks rates", Duration::from_secs(1800), Box::new(|| c8_pricing(d))),
        (9, "moment bounds", Duration::from_secs(300), Box::new(|| c9_moments(d))),
        (10, "reproducibility", Duration::from_secs(600), Box::new(|| c10_reproducibility(d))),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, budget, run) in &criteria {
        if !filter.is_empty() && !filter.contains(id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed <= *budget;
        if !pass {
            failures += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
