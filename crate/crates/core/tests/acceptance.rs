//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built with `harness = false` so the lines are always printed.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::Rng;

use threshflex::evaluation::{monte_carlo_se, r_squared, relative_rmspe};
use threshflex::graph::{characteristic_path_length, clustering_coefficient, BinaryGraph};
use threshflex::models::{fit_oracle, predict_all, Method};
use threshflex::plasmode::*;
use threshflex::seed;
use threshflex::spline::{difference_penalty, ols, penalized_ls, SplineBasis};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn synthetic(p: usize) -> MatrixSource {
    MatrixSource::Synthetic {
        p,
        n_factors: 3,
        noise_scale: 0.5,
    }
}

// ---- 1 -------------------------------------------------------------------

fn brute_cc(adj: &[Vec<bool>]) -> f64 {
    let p = adj.len();
    let mut total = 0.0;
    for v in 0..p {
        let nb: Vec<usize> = (0..p).filter(|&u| adj[v][u]).collect();
        let d = nb.len();
        if d < 2 {
            continue;
        }
        let mut tri = 0;
        for a in 0..d {
            for b in a + 1..d {
                if adj[nb[a]][nb[b]] {
                    tri += 1;
                }
            }
        }
        total += tri as f64 / (d * (d - 1) / 2) as f64;
    }
    total / p as f64
}

fn brute_cpl(adj: &[Vec<bool>]) -> f64 {
    let p = adj.len();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; p]; p];
    for i in 0..p {
        d[i][i] = 0;
        for j in 0..p {
            if adj[i][j] {
                d[i][j] = 1;
            }
        }
    }
    for k in 0..p {
        for i in 0..p {
            for j in 0..p {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    let (mut sum, mut n) = (0usize, 0usize);
    for i in 0..p {
        for j in i + 1..p {
            if d[i][j] < inf {
                sum += d[i][j];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(101, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.random_range(3..=8);
        let density: f64 = rng.random();
        let mut adj = vec![vec![false; p]; p];
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if rng.random::<f64>() < density {
                    adj[i][j] = true;
                    adj[j][i] = true;
                    edges.push((i, j));
                }
            }
        }
        let g = BinaryGraph::from_edges(p, edges).map_err(|e| e.to_string())?;
        let cc = clustering_coefficient(&g).map_err(|e| e.to_string())?;
        worst = worst
            .max((cc - brute_cc(&adj)).abs())
            .max((characteristic_path_length(&g) - brute_cpl(&adj)).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-12 && elapsed < Duration::from_secs(10),
        format!("max |diff| = {worst:e} over 1000 graphs, {:.2?}", elapsed),
    )
}

// ---- 2 -------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = seed::rng(202, &[]);
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 0..100 {
        let sigma = synth_correlation(30, 3, 0.5, &mut rng).map_err(|e| e.to_string())?;
        let alpha = if i % 2 == 0 { 0.15 } else { 0.3 };
        let delta: f64 = rng.random();
        let spec = ContaminationSpec {
            alpha,
            ..Default::default()
        };
        let s = hardin_contaminate(&sigma, &spec, delta, &mut rng)
            .map_err(|e| e.to_string())?
            .matrix;
        for r in 0..30 {
            if s[(r, r)] != 1.0 {
                return Err(format!("diagonal entry {} at ({r}, {r})", s[(r, r)]));
            }
            for c in 0..30 {
                if r != c {
                    worst_excess = worst_excess.max((s[(r, c)] - sigma[(r, c)]).abs() - alpha);
                }
            }
        }
        let zero = ContaminationSpec {
            alpha: 0.0,
            ..Default::default()
        };
        let same = hardin_contaminate(&sigma, &zero, delta, &mut rng).map_err(|e| e.to_string())?;
        let bitwise = same
            .matrix
            .iter()
            .zip(sigma.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !bitwise {
            return Err("alpha = 0 changed the matrix".into());
        }
    }
    check(
        worst_excess <= 0.0,
        format!("max(|S - Σ| - α) = {worst_excess:e}; diag = 1; α = 0 bitwise"),
    )
}

// ---- 3 and 6 ---------------------------------------------------------------

fn shape_config(kind: OgmKind) -> ScenarioConfig {
    ScenarioConfig {
        id: format!("shape_{kind:?}"),
        n: 150,
        n_sim: 50,
        ogm: OgmSpec::new(kind),
        methods: vec![Method::Flex, Method::Oracle],
        source: synthetic(40),
        seed: 303,
        ..Default::default()
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criteria_3_and_6() -> (Outcome, Outcome) {
    let start = Instant::now();
    let mut shape = Vec::new();
    let mut calib = Vec::new();
    let mut ok3 = true;
    let mut ok6 = true;
    for kind in [OgmKind::Flat, OgmKind::EarlyPeak, OgmKind::Arc] {
        let cfg = shape_config(kind);
        let result = match run_scenario(&cfg) {
            Ok(r) => r,
            Err(e) => return (Err(e.to_string()), Err(e.to_string())),
        };
        let grid = cfg.grid().unwrap();
        let truth = cfg.ogm.true_weights(&grid).unwrap().unwrap();
        let flex = result.aggregate(Method::Flex).unwrap();
        let est = flex.mean_weight.as_ref().unwrap();
        let maxdev = est.iter().zip(&truth).map(|(e, t)| (e - t).abs()).fold(0.0, f64::max);
        if kind == OgmKind::Flat {
            // the truth is constant, so only the deviation is defined
            ok3 &= maxdev <= 0.4;
            shape.push(format!("flat max|ω̂-4| {maxdev:.4}"));
        } else {
            let r = pearson(est, &truth);
            ok3 &= r >= 0.95;
            shape.push(format!("{kind:?} corr {r:.4}"));
        }
        let oracle_slope = result.aggregate(Method::Oracle).unwrap().calibration_slope.unwrap().mean;
        let flex_slope = flex.calibration_slope.unwrap().mean;
        ok6 &= (0.97..=1.03).contains(&oracle_slope) && (0.9..=1.1).contains(&flex_slope);
        calib.push(format!("{kind:?} oracle {oracle_slope:.4} flex {flex_slope:.4}"));
    }
    let elapsed = start.elapsed();
    ok3 &= elapsed < Duration::from_secs(300);
    let c3 = format!("{}; {:.1?}", shape.join(", "), elapsed);
    let c6 = calib.join(", ");
    (check(ok3, c3), check(ok6, c6))
}

// ---- 4 -------------------------------------------------------------------

fn mean_t_opt(cfg: &ScenarioConfig) -> Result<f64, String> {
    let result = run_scenario(cfg).map_err(|e| e.to_string())?;
    Ok(result
        .aggregate(Method::Opt)
        .and_then(|a| a.selected_threshold)
        .ok_or("no OPT thresholds")?
        .mean)
}

fn criterion_4() -> Outcome {
    let clean = ScenarioConfig {
        id: "opt_clean".into(),
        n: 150,
        n_sim: 50,
        methods: vec![Method::Opt],
        source: synthetic(40),
        seed: 404,
        ..Default::default()
    };
    let noisy = ScenarioConfig {
        id: "opt_noisy".into(),
        ogm: OgmSpec::new(OgmKind::Universal).with_r2(0.3),
        contamination: ContaminationSpec {
            alpha: 0.3,
            ..Default::default()
        },
        ..clean.clone()
    };
    let a = mean_t_opt(&clean)?;
    let b = mean_t_opt(&noisy)?;
    check(
        (a - 0.25).abs() <= 0.03 && (b - 0.25).abs() <= 0.10,
        format!("mean t_opt {a:.4} (zero noise), {b:.4} (α = 0.3, R² = 0.3)"),
    )
}

// ---- 5 -------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let cfg = ScenarioConfig {
        id: "ordering".into(),
        n: 75,
        n_sim: 100,
        ogm: OgmSpec::new(OgmKind::Universal).with_r2(0.3),
        contamination: ContaminationSpec {
            alpha: 0.3,
            ..Default::default()
        },
        source: synthetic(40),
        seed: 505,
        ..Default::default()
    };
    let result = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let s = |m: Method| {
        result
            .aggregate(m)
            .and_then(|a| a.rmspe)
            .map(|s| (s.mean, s.mc_se.unwrap_or(0.0)))
            .ok_or(format!("no RMSPE for {}", m.as_str()))
    };
    let (oracle, avg, flex, opt, null) =
        (s(Method::Oracle)?, s(Method::Avg)?, s(Method::Flex)?, s(Method::Opt)?, s(Method::Null)?);
    let le = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 + 2.0 * a.1.max(b.1);
    let ok = le(oracle, avg)
        && le(avg, flex)
        && le(avg, opt)
        && [oracle, avg, flex, opt].iter().all(|m| null.0 > m.0);
    check(
        ok,
        format!(
            "RMSPE oracle {:.4} avg {:.4} flex {:.4} opt {:.4} null {:.4} (max SE {:.4})",
            oracle.0,
            avg.0,
            flex.0,
            opt.0,
            null.0,
            [oracle.1, avg.1, flex.1, opt.1, null.1].into_iter().fold(0.0, f64::max)
        ),
    )
}

// ---- 7 -------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for target in [0.6, 0.3] {
        let cfg = ScenarioConfig {
            n: 600,
            n_sim: 50,
            ogm: OgmSpec::new(OgmKind::Universal).with_r2(target),
            source: synthetic(30),
            seed: 707,
            ..Default::default()
        };
        let grid = cfg.grid().unwrap();
        let w = cfg.ogm.true_weights(&grid).unwrap().unwrap();
        let mut total = 0.0;
        for rep in 0..cfg.n_sim {
            let data = generate_replicate(&cfg, &[], rep).map_err(|e| e.to_string())?;
            let fit = fit_oracle(&data.clean, &w).map_err(|e| e.to_string())?;
            let pred = predict_all(&fit, &data.clean).map_err(|e| e.to_string())?;
            let y = data.clean.outcomes().map_err(|e| e.to_string())?;
            total += r_squared(y.as_slice(), &pred).map_err(|e| e.to_string())?;
        }
        let mean = total / cfg.n_sim as f64;
        ok &= (mean - target).abs() <= 0.05;
        parts.push(format!("target {target}: R² {mean:.4}"));
    }
    check(ok, parts.join(", "))
}

// ---- 8 -------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let basis = SplineBasis::new(25, 3).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..=10_000 {
        let t = i as f64 / 10_000.0;
        let sum: f64 = basis.evaluate(t).map_err(|e| e.to_string())?.iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }

    let mut rng = seed::rng(808, &[]);
    let n = 200;
    let points: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x = basis.design(&points).map_err(|e| e.to_string())?;
    let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let penalty = difference_penalty(basis.len(), 2).map_err(|e| e.to_string())?.matrix;
    let fit = penalized_ls(&x, &y, &penalty, 0.0).map_err(|e| e.to_string())?;
    let direct = x.clone().svd(true, true).solve(&y, 1e-14)?;
    let coef_err = (&fit.coefficients - &direct).amax() / direct.amax().max(1.0);
    let plain = ols(&x, &y).map_err(|e| e.to_string())?;
    let ols_err = (&plain.coefficients - &direct).amax() / direct.amax().max(1.0);
    check(
        worst <= 1e-10 && basis.len() == 28 && coef_err <= 1e-8 && ols_err <= 1e-8,
        format!(
            "max |Σ B - 1| = {worst:e}, {} functions, λ=0 vs SVD least squares {coef_err:e}",
            basis.len()
        ),
    )
}

// ---- 9 -------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("scenario.json");
    std::fs::write(
        &cfg,
        r#"{"id": "threads", "n": 40, "n_sim": 8,
            "ogm": {"kind": "arc", "r2_target": 0.6},
            "contamination": {"alpha": 0.3},
            "source": {"kind": "synthetic", "p": 20}}"#,
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for threads in ["1", "4", "8"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_threshflex"))
            .args(["--threads", threads, "--seed", "99", "simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        let files: Vec<Vec<u8>> = ["results.csv", "summary.csv", "weights.csv", "ledger.json"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap_or_default())
            .collect();
        outputs.push(files);
    }
    check(
        outputs[0] == outputs[1] && outputs[0] == outputs[2] && !outputs[0][0].is_empty(),
        "simulate output byte-identical at 1, 4, 8 threads".into(),
    )
}

// ---- 10 ------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut err = |got: f64, want: f64| worst = worst.max((got - want).abs());
    let r = relative_rmspe(&[5.0, 5.1]).map_err(|e| e.to_string())?;
    err(r[0].unwrap(), 1.0);
    err(r[1].unwrap(), 1.02);
    let r = relative_rmspe(&[5.027, 5.004, 5.135]).map_err(|e| e.to_string())?;
    err(r[0].unwrap(), 5.027 / 5.004);
    err(r[1].unwrap(), 1.0);
    err(r[2].unwrap(), 5.135 / 5.004);
    err(relative_rmspe(&[3.3]).map_err(|e| e.to_string())?[0].unwrap(), 1.0);
    err(monte_carlo_se(&[2.0; 7]).map_err(|e| e.to_string())?, 0.0);
    err(monte_carlo_se(&[1.0, 3.0]).map_err(|e| e.to_string())?, 1.0);
    // sd = sqrt(2.5), n = 5
    err(monte_carlo_se(&[1.0, 2.0, 3.0, 4.0, 5.0]).map_err(|e| e.to_string())?, 0.5f64.sqrt());
    check(worst <= 1e-12, format!("max |diff| = {worst:e}"))
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("PASS criterion {n:>2} ({name}): {d}"),
        Err(d) => println!("FAIL criterion {n:>2} ({name}): {d}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters should not trigger the full run
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let (c3, c6) = criteria_3_and_6();
    let results = [
        report(1, "graph feature oracles", &criterion_1()),
        report(2, "contamination bound", &criterion_2()),
        report(3, "FLEX shape recovery", &c3),
        report(4, "OPT threshold recovery", &criterion_4()),
        report(5, "method ordering", &criterion_5()),
        report(6, "calibration sanity", &c6),
        report(7, "σ² calibration round-trip", &criterion_7()),
        report(8, "spline correctness", &criterion_8()),
        report(9, "thread determinism", &criterion_9()),
        report(10, "relative RMSPE and MC SE", &criterion_10()),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
