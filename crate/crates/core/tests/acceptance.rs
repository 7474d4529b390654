//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion.
//!
//! Run a subset with `cargo test --release --test acceptance -- 3 5`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbm_core::bath::{BathContext, CorrelationTable, SpectralDensity};
use sbm_core::dynamics::{propagate, steady_state};
use sbm_core::expbath::{drude_modes, relative_difference, tcl2_exponential, tcl4_drude_matsubara};
use sbm_core::heom::{asymptotic_shift, fidelity, HeomConfig, HeomSolver};
use sbm_core::nonmarkov::{
    blp_scan, cell_generators, resonance_curve, trace_distance_trajectory, BlpConfig, EnsembleSpec, EnsembleStrategy,
    ScanTemplate, StatePairEnsemble,
};
use sbm_core::quad::QuadratureConfig;
use sbm_core::system::{
    bloch_from_density, density_from_bloch, BlochVector, DensityMatrix, DqdParams, SpinBosonParams,
};
use sbm_core::tcl::{
    free_generator_matrix, tcl2_generator, tcl4_generator, tcl4_integrand, total_generator, GeneratorMatrix,
    Tcl4Config, TimeTag,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Least-squares slope of `ln|y|` against `ln x`.
fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn weak_drude_params() -> (SpinBosonParams, f64, f64) {
    let p = SpinBosonParams::new(0.191, 0.183, 1.0, 0.315).unwrap();
    (p, 3.58e-3, 0.207)
}

fn benchmark_params(lambda: f64) -> SpinBosonParams {
    SpinBosonParams::new(1.6, 0.785, lambda, 1.0).unwrap()
}

fn quadrature_generators(
    p: &SpinBosonParams,
    sd: SpectralDensity,
) -> sbm_core::error::Result<(GeneratorMatrix, GeneratorMatrix, GeneratorMatrix, GeneratorMatrix)> {
    let ctx = BathContext::new(sd, p.beta, QuadratureConfig::default())?;
    let mut table = CorrelationTable::new(ctx);
    let cfg = Tcl4Config::default();
    let f2 = tcl2_generator(p, &mut table, &cfg, TimeTag::Asymptotic)?;
    let f4 = tcl4_generator(p, &mut table, &cfg, TimeTag::Asymptotic)?;
    let f0 = free_generator_matrix(p);
    let g2 = total_generator(p, &f0, &f2, None);
    let g4 = total_generator(p, &f0, &f2, Some(&f4));
    Ok((f2, f4, g2, g4))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let gamma = rng.gen_range(0.01..2.0);
        let lambda_c = rng.gen_range(0.1..10.0);
        let ctx = BathContext::new(
            SpectralDensity::Drude { gamma, lambda_c },
            1.0,
            QuadratureConfig::default(),
        )
        .unwrap();
        for k in 1..=200 {
            let t = 10.0 / lambda_c * k as f64 / 200.0;
            let exact = -0.5 * PI * gamma * lambda_c * lambda_c * (-t * lambda_c).exp();
            let got = ctx.eta(t).unwrap();
            worst = worst.max(((got - exact) / exact).abs());
        }
    }
    outcome(worst < 1e-8, format!("max relative error of eta {worst:.2e} (< 1e-8)"))
}

fn criterion_2() -> Outcome {
    let (p, gamma, lambda_c) = weak_drude_params();
    let ctx = BathContext::new(
        SpectralDensity::Drude { gamma, lambda_c },
        p.beta,
        QuadratureConfig::default(),
    )
    .unwrap();
    let (a1, a3, w) = (p.a1(), p.a3(), p.omega);
    let eta = |x: f64| ctx.eta(x).unwrap();
    let nu = |x: f64| ctx.nu(x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t: f64 = rng.gen_range(0.5..30.0);
        let mut s = [rng.gen_range(0.0..t), rng.gen_range(0.0..t), rng.gen_range(0.0..t)];
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let [t1, t2, t3] = s;
        let bracket3 = eta(t1 - t2) * eta(t - t3) * (((t - t2) * w).cos() - ((t - t1) * w).cos())
            + eta(t - t2) * eta(t1 - t3) * (((t - t2) * w).cos() - ((t - t1) * w).cos())
            + nu(t1 - t2) * nu(t - t3) * (((t - t3) * w).cos() - ((t - t2) * w).cos());
        let bracket1 = nu(t1 - t2) * nu(t - t3) * ((t - t2) * w).sin() * ((t1 - t3) * w).sin()
            + nu(t - t2) * nu(t1 - t3) * ((t1 - t2) * w).sin() * ((t - t3) * w).sin();
        let oracle = 16.0 * a1 * a1 * (a3 * a3 * bracket3 + a1 * a1 * bracket1);
        let got = tcl4_integrand(&p, &ctx, (3, 3), t, t1, t2, t3).unwrap();
        worst = worst.max(((got - oracle) / oracle).abs());
    }
    outcome(
        worst < 1e-10,
        format!("max relative deviation at 100 time tuples {worst:.2e} (< 1e-10)"),
    )
}

fn criterion_3() -> Outcome {
    let (p, gamma, lambda_c) = weak_drude_params();
    let (_, f4, _, _) = quadrature_generators(&p, SpectralDensity::Drude { gamma, lambda_c }).unwrap();
    let ladder = [16usize, 32, 64, 128, 256];
    let rows: Vec<[f64; 8]> = ladder
        .iter()
        .map(|&n| {
            relative_difference(
                &f4,
                &tcl4_drude_matsubara(&p, &drude_modes(gamma, lambda_c, p.beta, n).unwrap()).unwrap(),
            )
        })
        .collect();
    let at256 = rows[4].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let ns: Vec<f64> = ladder.iter().map(|n| *n as f64).collect();
    let worst_entry_slope = (0..8)
        .map(|k| fit_slope(&ns, &rows.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .fold(f64::NEG_INFINITY, f64::max);
    let max_rows: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect();
    let agg = fit_slope(&ns, &max_rows);
    outcome(
        at256 < 1e-3 && agg < -0.5 && worst_entry_slope < -0.5,
        format!("max E_rel at N=256 {at256:.2e} (< 1e-3); slope of max E_rel {agg:.3}, worst entry slope {worst_entry_slope:.3} (< -0.5)"),
    )
}

/// Independent symmetry residual: largest of `|F₀ₖ|` and `|a₃F₃ₖ − a₁F₁ₖ|` over the largest entry.
fn symmetry_defect(g: &GeneratorMatrix, p: &SpinBosonParams) -> f64 {
    let scale = g.m.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut d: f64 = 0.0;
    for k in 0..4 {
        d = d.max(g.m[(0, k)].abs());
        d = d.max((p.theta.cos() * g.m[(3, k)] - p.theta.sin() * g.m[(1, k)]).abs());
    }
    d / scale
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for k in 0..20 {
        let beta = rng.gen_range(0.5..3.0);
        let (p, sd) = if k % 2 == 0 {
            let p = SpinBosonParams::new(rng.gen_range(0.3..2.0), rng.gen_range(0.1..1.5), 1.0, beta).unwrap();
            (
                p,
                SpectralDensity::Drude {
                    gamma: rng.gen_range(0.01..0.5),
                    lambda_c: rng.gen_range(0.3..3.0),
                },
            )
        } else {
            let dqd = DqdParams {
                epsilon: rng.gen_range(0.3..1.5),
                t_c: rng.gen_range(0.1..0.8),
            };
            let p = SpinBosonParams::from_dqd(dqd, 1.0, beta).unwrap();
            let sd = SpectralDensity::DqdPhonon {
                gamma: rng.gen_range(0.05..0.5),
                omega_c: rng.gen_range(0.5..1.5),
                omega_max: rng.gen_range(0.5..1.5),
            };
            (p, sd)
        };
        match quadrature_generators(&p, sd) {
            Ok((f2, f4, _, _)) => worst = worst.max(symmetry_defect(&f2, &p)).max(symmetry_defect(&f4, &p)),
            Err(e) => {
                failures += 1;
                println!("  criterion 4: parameter set {k} failed: {e}");
            }
        }
    }
    outcome(
        worst < 1e-6 && failures == 0,
        format!("max relative symmetry defect {worst:.2e} over 40 generators (< 1e-6), {failures} failed computations"),
    )
}

struct BenchmarkRun {
    wins: usize,
    samples: usize,
    mean2: f64,
    mean4: f64,
}

fn heom_benchmark(g2: &GeneratorMatrix, g4: &GeneratorMatrix, hc: &HeomConfig, times: &[f64]) -> BenchmarkRun {
    let p = benchmark_params(0.02_f64.sqrt());
    let bath = hc.drude_bath(1.0, 1.0, 1.0).unwrap();
    let shifted = asymptotic_shift(&DensityMatrix::plus(), 60.0, &p, &bath, hc, times).unwrap();
    let v0 = bloch_from_density(&shifted.rho_tcl_init);
    let t2 = propagate(&v0, g2, times).unwrap();
    let t4 = propagate(&v0, g4, times).unwrap();
    let mut run = BenchmarkRun {
        wins: 0,
        samples: times.len(),
        mean2: 0.0,
        mean4: 0.0,
    };
    for k in 0..times.len() {
        let h = density_from_bloch(&shifted.trajectory.states[k]);
        let e2 = 1.0 - fidelity(&density_from_bloch(&t2.states[k]), &h).unwrap();
        let e4 = 1.0 - fidelity(&density_from_bloch(&t4.states[k]), &h).unwrap();
        if e4 < e2 {
            run.wins += 1;
        }
        run.mean2 += e2 / times.len() as f64;
        run.mean4 += e4 / times.len() as f64;
    }
    run
}

fn criterion_5() -> Outcome {
    let p = benchmark_params(0.02_f64.sqrt());
    let (_, _, g2, g4) = quadrature_generators(
        &p,
        SpectralDensity::Drude {
            gamma: 1.0,
            lambda_c: 1.0,
        },
    )
    .unwrap();
    let times: Vec<f64> = (1..=300).map(|k| 0.1 * k as f64).collect();
    let shallow = heom_benchmark(
        &g2,
        &g4,
        &HeomConfig {
            n_matsubara: 32,
            depth: 2,
            step: 0.05,
            ..Default::default()
        },
        &times,
    );
    let deep = heom_benchmark(
        &g2,
        &g4,
        &HeomConfig {
            n_matsubara: 64,
            depth: 4,
            step: 0.1,
            ..Default::default()
        },
        &times,
    );
    let fraction = shallow.wins as f64 / shallow.samples as f64;
    let pass = fraction >= 0.95 && deep.mean4 < shallow.mean4;
    outcome(
        pass,
        format!(
            "(32,2): TCL4 better at {}/{} samples, mean 1-F TCL2 {:.2e} TCL4 {:.2e}; (64,4): TCL4 better at {}/{}, mean 1-F TCL2 {:.2e} TCL4 {:.2e}",
            shallow.wins, shallow.samples, shallow.mean2, shallow.mean4, deep.wins, deep.samples, deep.mean2, deep.mean4
        ),
    )
}

fn criterion_6() -> Outcome {
    let hc = HeomConfig {
        n_matsubara: 4,
        depth: 5,
        ..Default::default()
    };
    let bath = hc.drude_bath(1.0, 1.0, 1.0).unwrap();
    let mut lambdas = Vec::new();
    let (mut d2, mut d4) = (Vec::new(), Vec::new());
    for l2 in [0.0025_f64, 0.005, 0.01, 0.02] {
        let p = benchmark_params(l2.sqrt());
        let f0 = free_generator_matrix(&p);
        let f2 = tcl2_exponential(&p, &bath);
        let f4 = tcl4_drude_matsubara(&p, &bath).unwrap();
        let s2 = steady_state(&total_generator(&p, &f0, &f2, None)).unwrap();
        let s4 = steady_state(&total_generator(&p, &f0, &f2, Some(&f4))).unwrap();
        let h = bloch_from_density(&HeomSolver::new(&p, &bath, &hc).unwrap().steady_state().unwrap());
        lambdas.push(l2.sqrt());
        d2.push((s2.0 - h.0).norm());
        d4.push((s4.0 - h.0).norm());
    }
    let s2 = fit_slope(&lambdas, &d2);
    let s4 = fit_slope(&lambdas, &d4);
    outcome(
        (s2 - 2.0).abs() <= 0.5 && (s4 - 4.0).abs() <= 0.7,
        format!("slope TCL2 {s2:.3} (2 +- 0.5), slope TCL4 {s4:.3} (4 +- 0.7)"),
    )
}

fn criterion_7() -> Outcome {
    let p = SpinBosonParams::from_dqd(DqdParams { epsilon: 1.0, t_c: 0.5 }, 1.0, 1.0).unwrap();
    let sd = SpectralDensity::DqdPhonon {
        gamma: 0.4,
        omega_c: 1.0,
        omega_max: 1.0,
    };
    let (_, _, g2, g4) = quadrature_generators(&p, sd).unwrap();
    let [x2, y2, _] = steady_state(&g2).unwrap().spatial();
    let [x4, y4, _] = steady_state(&g4).unwrap().spatial();
    let dv2 = (y4 - y2).abs();
    let dv1 = (x4 - x2).abs();
    outcome(
        dv2 < 1e-8 && dv1 > 1e-4,
        format!("|dv2| {dv2:.2e} (< 1e-8), |dv1| {dv1:.2e} (> 1e-4)"),
    )
}

fn criterion_8() -> Outcome {
    let template = ScanTemplate {
        omega: 1.6,
        theta: FRAC_PI_2,
        gamma: 0.01,
        lambda: 1.0,
    };
    let ensemble = StatePairEnsemble::new(
        &EnsembleSpec {
            strategy: EnsembleStrategy::Antipodal { n_u: 10, n_v: 10 },
            jitter: false,
        },
        0,
    )
    .unwrap();
    let grid: Vec<f64> = (0..6).map(|k| 0.2 + 7.8 * k as f64 / 5.0).collect();
    let (cfg, quad, tcl) = (BlpConfig::default(), QuadratureConfig::default(), Tcl4Config::default());
    let map = blp_scan(&template, &grid, &grid, &ensemble, &cfg, &quad, &tcl).unwrap();
    let valid: Vec<_> = map.cells.iter().filter(|c| c.valid).collect();
    let negative = valid.iter().filter(|c| c.diff < 0.0).count();
    let fraction = negative as f64 / valid.len().max(1) as f64;

    // Grid cells near the resonance curve, plus cells placed exactly on it.
    let mut markovian: Vec<(f64, f64, f64, f64)> = Vec::new();
    for c in &valid {
        let res = resonance_curve(template.omega, &[c.temperature])[0];
        if ((c.lambda_c - res) / res).abs() < 0.05 {
            markovian.push((c.lambda_c, c.temperature, c.n_tcl2, c.n_tcl4));
        }
    }
    let on_curve_t = [0.2, 1.76];
    let on_curve_l = resonance_curve(template.omega, &on_curve_t);
    for (l, t) in on_curve_l.iter().zip(on_curve_t) {
        let c = &blp_scan(&template, &[*l], &[t], &ensemble, &cfg, &quad, &tcl)
            .unwrap()
            .cells[0];
        markovian.push((c.lambda_c, c.temperature, c.n_tcl2, c.n_tcl4));
    }
    let markov_ok = markovian.iter().all(|m| m.2 < 1e-4 && m.3 < 1e-4);

    let (_, g2, g4) = cell_generators(&template, 4.0, 1.0, &quad, &tcl).unwrap();
    let times: Vec<f64> = (0..=4000).map(|k| 0.1 * k as f64).collect();
    let (a, b) = (BlochVector::new(1.0, 0.0, 0.0), BlochVector::new(-1.0, 0.0, 0.0));
    let rise = |g: &GeneratorMatrix| {
        trace_distance_trajectory(g, &a, &b, &times)
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (r2, r4) = (rise(&g2), rise(&g4));
    let monotone = r2 <= 1e-12 && r4 <= 1e-12;

    let cells: Vec<String> = markovian
        .iter()
        .map(|m| format!("({:.3},{:.2}): {:.1e}/{:.1e}", m.0, m.1, m.2, m.3))
        .collect();
    outcome(
        fraction > 0.6 && markov_ok && monotone,
        format!(
            "{negative}/{} valid cells with N4 - N2 < 0 ({:.0}% > 60%); near-curve cells N2/N4 < 1e-4: [{}]; Lambda=4,T=1 largest step increase TCL2 {r2:.1e} TCL4 {r4:.1e}",
            valid.len(),
            100.0 * fraction,
            cells.join(", ")
        ),
    )
}

fn run_cli(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sbm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let jitter = tmp.path().join("jitter.cfg");
    std::fs::write(
        &jitter,
        "seed = 7\n[scan]\nomega = 1.6\ntheta = 1.5707963267948966\ngamma = 0.01\nlambda_values = [1.0]\nt_values = [1.0]\n\
         [ensemble]\nstrategy = { kind = \"antipodal\", n_u = 4, n_v = 4 }\njitter = true\n\
         [trajectories]\ncells = [[1.0, 1.0]]\nt_end = 50.0\nn_points = 100\n",
    )
    .unwrap();
    let short_ladder = tmp.path().join("short_ladder.cfg");
    let ladder = std::fs::read_to_string(configs.join("fig4.cfg"))
        .unwrap()
        .replace("[16, 32, 64, 128, 256]", "[4, 8, 16]");
    std::fs::write(&short_ladder, ladder).unwrap();
    let cases: Vec<(&str, std::path::PathBuf)> = vec![
        ("correlation", configs.join("drude_correlation.cfg")),
        ("correlation", configs.join("dqd_correlation.cfg")),
        ("simulate", configs.join("fig2.cfg")),
        ("steady-state", configs.join("fig2_steady.cfg")),
        ("drude-verify", short_ladder),
        ("heom-benchmark", configs.join("heom_decoupled.cfg")),
        ("blp-scan", configs.join("markovian.cfg")),
        ("blp-scan", jitter),
    ];
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    for (k, (cmd, cfg)) in cases.iter().enumerate() {
        let cfg = cfg.to_str().unwrap();
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{k}_{rep}"));
            let threads = if rep == 0 { "1" } else { "2" };
            let o = run_cli(&[cmd, "--config", cfg, "--threads", threads], &dir);
            if !o.status.success() {
                failed.push(format!("{cmd} {}: {}", cfg, String::from_utf8_lossy(&o.stderr).trim()));
            }
            outputs.push(csv_bytes(&dir));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            mismatched.push(format!("{cmd} {cfg}"));
        }
    }
    outcome(
        mismatched.is_empty() && failed.is_empty(),
        format!(
            "{} command runs compared byte for byte; mismatches {:?}; failures {:?}",
            cases.len(),
            mismatched,
            failed
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failures = 0;
    for (n, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {n}: {} ({:.1} s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
