//! Command-line front end: strict TOML configs, one runner per subcommand.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad config or usage, 3 a
//! property check built into the command failed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bath::{BathContext, CorrelationTable, SpectralDensity};
use crate::dynamics::{propagate, steady_state, Trajectory};
use crate::error::Error;
use crate::expbath::{drude_modes, drude_modes_resummed, loglog_slope, relative_difference, tcl4_drude_matsubara};
use crate::heom::{asymptotic_shift, fidelity, HeomConfig};
use crate::nonmarkov::{
    blp_scan, cell_generators, resonance_curve, trace_distance_trajectory, BlpConfig, EnsembleSpec, ScanTemplate,
    StatePairEnsemble,
};
use crate::quad::QuadratureConfig;
use crate::system::{bloch_from_density, density_from_bloch, BlochVector, DqdParams, SpinBosonParams};
use crate::tcl::{
    free_generator_matrix, tcl2_generator, tcl4_generator, total_generator, GeneratorMatrix, Tcl4Config, TimeTag,
};

#[derive(Debug, Parser)]
#[command(
    name = "sbm",
    version,
    about = "Spin-boson TCL2/TCL4 generators, HEOM benchmarks and BLP scans"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Tabulate ν(t) and η(t) for a bath.
    Correlation,
    /// Propagate a Bloch vector under the TCL2 and TCL4 generators.
    Simulate,
    /// TCL2 and TCL4 steady states.
    SteadyState,
    /// Quadrature TCL4 against the Matsubara-series TCL4 over a ladder of N.
    DrudeVerify,
    /// Infidelity of TCL2/TCL4 against HEOM after the asymptotic shift.
    HeomBenchmark,
    /// BLP non-Markovianity maps over cutoff and temperature.
    BlpScan,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Model block: either `omega`/`theta` or the DQD pair `epsilon`/`t_c`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub omega: Option<f64>,
    pub theta: Option<f64>,
    pub epsilon: Option<f64>,
    pub t_c: Option<f64>,
    #[serde(default = "one")]
    pub lambda: f64,
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

impl ModelSection {
    pub fn params(&self) -> CliResult<SpinBosonParams> {
        match (self.omega, self.theta, self.epsilon, self.t_c) {
            (Some(omega), Some(theta), None, None) => {
                SpinBosonParams::new(omega, theta, self.lambda, self.beta).map_err(config_err)
            }
            (None, None, Some(epsilon), Some(t_c)) => {
                SpinBosonParams::from_dqd(DqdParams { epsilon, t_c }, self.lambda, self.beta).map_err(config_err)
            }
            _ => Err(CliError::Config(
                "[model] needs either omega and theta, or epsilon and t_c".into(),
            )),
        }
    }
}

fn drude_of(sd: &SpectralDensity) -> CliResult<(f64, f64)> {
    match sd {
        SpectralDensity::Drude { gamma, lambda_c } => Ok((*gamma, *lambda_c)),
        _ => Err(CliError::Config(
            "[bath] kind must be \"drude\" for this command".into(),
        )),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub bath: SpectralDensity,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    pub correlation: CorrelationSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSection {
    pub beta: f64,
    pub t_end: f64,
    pub n_points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub bath: SpectralDensity,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub tcl: Tcl4Config,
    pub simulate: SimulateSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Spatial Bloch components `(v₁, v₂, v₃)`.
    pub initial: [f64; 3],
    pub t_end: f64,
    pub n_points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyStateConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub bath: SpectralDensity,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub tcl: Tcl4Config,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrudeVerifyConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub bath: SpectralDensity,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub tcl: Tcl4Config,
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatsubaraVariant {
    Truncated,
    Resummed,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub ladder: Vec<usize>,
    #[serde(default = "default_max_slope")]
    pub max_slope: f64,
    #[serde(default = "default_variant")]
    pub variant: MatsubaraVariant,
}

fn default_max_slope() -> f64 {
    -0.5
}

fn default_variant() -> MatsubaraVariant {
    MatsubaraVariant::Truncated
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeomBenchmarkConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub bath: SpectralDensity,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub tcl: Tcl4Config,
    #[serde(default)]
    pub heom: HeomConfig,
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub tau: f64,
    pub t_end: f64,
    pub n_points: usize,
    /// Spatial Bloch components of the pure initial state; default `|+⟩`.
    #[serde(default = "plus")]
    pub initial: [f64; 3],
    #[serde(default = "default_fraction")]
    pub min_fraction: f64,
}

fn plus() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn default_fraction() -> f64 {
    0.95
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlpScanConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scan: ScanSection,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub blp: BlpConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub tcl: Tcl4Config,
    pub trajectories: Option<TrajectorySection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub omega: f64,
    pub theta: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    pub lambda_values: Vec<f64>,
    pub t_values: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    /// `[Λ, T]` cells.
    pub cells: Vec<[f64; 2]>,
    pub t_end: f64,
    pub n_points: usize,
    /// Spatial Bloch components of the two initial states.
    #[serde(default = "antipodal_x_pair")]
    pub pair: [[f64; 3]; 2],
}

fn antipodal_x_pair() -> [[f64; 3]; 2] {
    [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]
}

fn read_config<T: DeserializeOwned>(path: &Path, command: &str) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    match table.remove("command") {
        None => {}
        Some(toml::Value::String(c)) if c == command => {}
        Some(other) => {
            return Err(CliError::Config(format!(
                "{}: config is for command {other}, not \"{command}\"",
                path.display()
            )));
        }
    }
    T::deserialize(table).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

fn out_dir(cli: &Cli, cfg_out: &Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg_out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, body: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(body)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    write_file(dir, name, s.as_bytes())
}

fn write_trajectory(dir: &Path, name: &str, tr: &Trajectory) -> CliResult<()> {
    let mut buf = Vec::new();
    tr.write_csv(&mut buf)?;
    write_file(dir, name, &buf)
}

fn time_grid(t_end: f64, n: usize, include_zero: bool) -> CliResult<Vec<f64>> {
    if !(t_end > 0.0) || n == 0 {
        return Err(CliError::Config(format!(
            "time grid needs t_end > 0 and n_points >= 1 (got {t_end}, {n})"
        )));
    }
    Ok(if include_zero {
        (0..=n).map(|k| t_end * k as f64 / n as f64).collect()
    } else {
        (1..=n).map(|k| t_end * k as f64 / n as f64).collect()
    })
}

fn initial_bloch(v: [f64; 3]) -> CliResult<BlochVector> {
    let b = BlochVector::new(v[0], v[1], v[2]);
    if b.radius() > 1.0 + 1e-12 {
        return Err(CliError::Config(format!(
            "initial Bloch vector has radius {} > 1",
            b.radius()
        )));
    }
    Ok(b)
}

#[derive(Serialize)]
struct Generators {
    tcl2: GeneratorMatrix,
    tcl4: GeneratorMatrix,
    total_tcl2: GeneratorMatrix,
    total_tcl4: GeneratorMatrix,
}

fn tcl_generators(
    params: &SpinBosonParams,
    bath: &SpectralDensity,
    quad: &QuadratureConfig,
    tcl: &Tcl4Config,
) -> CliResult<(Generators, GeneratorMatrix, GeneratorMatrix)> {
    tcl.validate().map_err(config_err)?;
    let ctx = BathContext::new(bath.clone(), params.beta, *quad).map_err(config_err)?;
    let mut table = CorrelationTable::new(ctx);
    let f2 = tcl2_generator(params, &mut table, tcl, TimeTag::Asymptotic)?;
    let f4 = tcl4_generator(params, &mut table, tcl, TimeTag::Asymptotic)?;
    let f0 = free_generator_matrix(params);
    let g2 = total_generator(params, &f0, &f2, None);
    let g4 = total_generator(params, &f0, &f2, Some(&f4));
    Ok((
        Generators {
            tcl2: f2,
            tcl4: f4,
            total_tcl2: g2.clone(),
            total_tcl4: g4.clone(),
        },
        g2,
        g4,
    ))
}

fn cmd_correlation(cli: &Cli, path: &Path) -> CliResult<()> {
    let cfg: CorrelationConfig = read_config(path, "correlation")?;
    let c = &cfg.correlation;
    let ctx = BathContext::new(cfg.bath.clone(), c.beta, cfg.quadrature).map_err(config_err)?;
    let times = time_grid(c.t_end, c.n_points, false)?;
    let dir = out_dir(cli, &cfg.out)?;
    use rayon::prelude::*;
    let rows: Vec<(f64, f64)> = times
        .par_iter()
        .map(|&t| Ok((ctx.nu(t)?, ctx.eta(t)?)))
        .collect::<crate::error::Result<_>>()?;
    let mut buf = Vec::new();
    writeln!(buf, "t,nu,eta")?;
    for (t, (nu, eta)) in times.iter().zip(rows) {
        writeln!(buf, "{t:.10e},{nu:.15e},{eta:.15e}")?;
    }
    write_file(&dir, "correlation.csv", &buf)
}

fn cmd_simulate(cli: &Cli, path: &Path) -> CliResult<()> {
    let cfg: SimulateConfig = read_config(path, "simulate")?;
    let params = cfg.model.params()?;
    let v0 = initial_bloch(cfg.simulate.initial)?;
    let times = time_grid(cfg.simulate.t_end, cfg.simulate.n_points, true)?;
    let dir = out_dir(cli, &cfg.out)?;
    let (gens, g2, g4) = tcl_generators(&params, &cfg.bath, &cfg.quadrature, &cfg.tcl)?;
    let t2 = propagate(&v0, &g2, &times)?;
    let t4 = propagate(&v0, &g4, &times)?;
    write_trajectory(&dir, "trajectory_tcl2.csv", &t2)?;
    write_trajectory(&dir, "trajectory_tcl4.csv", &t4)?;
    write_json(&dir, "generators.json", &gens)?;
    if t2.any_unphysical() || t4.any_unphysical() {
        eprintln!("warning: trajectory leaves the Bloch ball (TCL truncations are not completely positive)");
    }
    Ok(())
}

fn cmd_steady_state(cli: &Cli, path: &Path) -> CliResult<()> {
    let cfg: SteadyStateConfig = read_config(path, "steady-state")?;
    let params = cfg.model.params()?;
    let dir = out_dir(cli, &cfg.out)?;
    let (gens, g2, g4) = tcl_generators(&params, &cfg.bath, &cfg.quadrature, &cfg.tcl)?;
    let mut buf = Vec::new();
    writeln!(buf, "order,v1,v2,v3")?;
    for (order, g) in [(2, &g2), (4, &g4)] {
        let [x, y, z] = steady_state(g)?.spatial();
        writeln!(buf, "{order},{x:.15e},{y:.15e},{z:.15e}")?;
    }
    write_file(&dir, "steady_state.csv", &buf)?;
    write_json(&dir, "generators.json", &gens)
}

#[derive(Serialize)]
struct VerifySummary {
    variant: MatsubaraVariant,
    ladder: Vec<usize>,
    slope_max_entry: f64,
    slopes: Vec<f64>,
    max_slope: f64,
    passed: bool,
}

fn cmd_drude_verify(cli: &Cli, path: &Path) -> CliResult<()> {
    let cfg: DrudeVerifyConfig = read_config(path, "drude-verify")?;
    let params = cfg.model.params()?;
    let (gamma, lambda_c) = drude_of(&cfg.bath)?;
    if cfg.verify.ladder.len() < 2 || cfg.verify.ladder.contains(&0) {
        return Err(CliError::Config(
            "[verify] ladder needs at least two positive entries".into(),
        ));
    }
    let dir = out_dir(cli, &cfg.out)?;
    let (gens, _, _) = tcl_generators(&params, &cfg.bath, &cfg.quadrature, &cfg.tcl)?;
    let reference = gens.tcl4;
    let mut rows = Vec::new();
    for &n in &cfg.verify.ladder {
        let bath = match cfg.verify.variant {
            MatsubaraVariant::Truncated => drude_modes(gamma, lambda_c, params.beta, n),
            MatsubaraVariant::Resummed => drude_modes_resummed(gamma, lambda_c, params.beta, n),
        }
        .map_err(config_err)?;
        let x = tcl4_drude_matsubara(&params, &bath)?;
        rows.push(relative_difference(&reference, &x));
    }
    let max_entry: Vec<f64> = rows
        .iter()
        .map(|e| e.iter().filter(|v| v.is_finite()).fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect();
    let ns: Vec<f64> = cfg.verify.ladder.iter().map(|n| *n as f64).collect();
    let slope = loglog_slope(&ns, &max_entry);
    let slopes: Vec<f64> = (0..8)
        .map(|k| loglog_slope(&ns, &rows.iter().map(|e| e[k]).collect::<Vec<_>>()))
        .collect();
    let mut buf = Vec::new();
    writeln!(buf, "n,e_10,e_11,e_12,e_13,e_20,e_21,e_22,e_23,e_max")?;
    for ((n, e), m) in cfg.verify.ladder.iter().zip(&rows).zip(&max_entry) {
        write!(buf, "{n}")?;
        for v in e {
            write!(buf, ",{v:.15e}")?;
        }
        writeln!(buf, ",{m:.15e}")?;
    }
    write_file(&dir, "drude_verify.csv", &buf)?;
    let passed = slope < cfg.verify.max_slope;
    write_json(
        &dir,
        "drude_verify.json",
        &VerifySummary {
            variant: cfg.verify.variant,
            ladder: cfg.verify.ladder.clone(),
            slope_max_entry: slope,
            slopes,
            max_slope: cfg.verify.max_slope,
            passed,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "E_rel log-log slope {slope} is not below {}",
            cfg.verify.max_slope
        )))
    }
}

#[derive(Serialize)]
struct BenchmarkSummary {
    n_matsubara: usize,
    depth: usize,
    tau: f64,
    samples: usize,
    fraction_tcl4_better: f64,
    mean_infidelity_tcl2: f64,
    mean_infidelity_tcl4: f64,
    min_fraction: f64,
    passed: bool,
    warnings: Vec<String>,
    rho_tcl_init: [f64; 3],
}

fn cmd_heom_benchmark(cli: &Cli, path: &Path) -> CliResult<()> {
    let cfg: HeomBenchmarkConfig = read_config(path, "heom-benchmark")?;
    let params = cfg.model.params()?;
    let (gamma, lambda_c) = drude_of(&cfg.bath)?;
    cfg.heom.validate().map_err(config_err)?;
    let b = &cfg.benchmark;
    let times = time_grid(b.t_end, b.n_points, false)?;
    let v_init = initial_bloch(b.initial)?;
    if (v_init.radius() - 1.0).abs() > 1e-9 {
        return Err(CliError::Config(
            "[benchmark] initial must be a pure state (unit Bloch vector)".into(),
        ));
    }
    let dir = out_dir(cli, &cfg.out)?;
    let bath = cfg.heom.drude_bath(gamma, lambda_c, params.beta).map_err(config_err)?;
    let (gens, g2, g4) = tcl_generators(&params, &cfg.bath, &cfg.quadrature, &cfg.tcl)?;
    let shifted = asymptotic_shift(&density_from_bloch(&v_init), b.tau, &params, &bath, &cfg.heom, &times)?;
    for w in &shifted.warnings {
        eprintln!("warning: {w}");
    }
    let v0 = bloch_from_density(&shifted.rho_tcl_init);
    let t2 = propagate(&v0, &g2, &times)?;
    let t4 = propagate(&v0, &g4, &times)?;
    let mut buf = Vec::new();
    writeln!(buf, "t,infidelity_tcl2,infidelity_tcl4")?;
    let (mut wins, mut s2, mut s4) = (0usize, 0.0, 0.0);
    for (k, t) in times.iter().enumerate() {
        let rho_h = density_from_bloch(&shifted.trajectory.states[k]);
        let e2 = 1.0 - fidelity(&density_from_bloch(&t2.states[k]), &rho_h)?;
        let e4 = 1.0 - fidelity(&density_from_bloch(&t4.states[k]), &rho_h)?;
        if e4 < e2 || (e2.abs() < 1e-12 && e4.abs() < 1e-12) {
            wins += 1;
        }
        s2 += e2;
        s4 += e4;
        writeln!(buf, "{t:.10e},{e2:.15e},{e4:.15e}")?;
    }
    write_file(&dir, "infidelity.csv", &buf)?;
    write_trajectory(&dir, "heom_trajectory.csv", &shifted.trajectory)?;
    write_trajectory(&dir, "trajectory_tcl2.csv", &t2)?;
    write_trajectory(&dir, "trajectory_tcl4.csv", &t4)?;
    write_json(&dir, "generators.json", &gens)?;
    let fraction = wins as f64 / times.len() as f64;
    let passed = fraction >= b.min_fraction;
    let n = times.len() as f64;
    write_json(
        &dir,
        "benchmark.json",
        &BenchmarkSummary {
            n_matsubara: cfg.heom.n_matsubara,
            depth: cfg.heom.depth,
            tau: b.tau,
            samples: times.len(),
            fraction_tcl4_better: fraction,
            mean_infidelity_tcl2: s2 / n,
            mean_infidelity_tcl4: s4 / n,
            min_fraction: b.min_fraction,
            passed,
            warnings: shifted.warnings.clone(),
            rho_tcl_init: v0.spatial(),
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "TCL4 beats TCL2 at {:.1}% of samples, below {:.1}%",
            100.0 * fraction,
            100.0 * b.min_fraction
        )))
    }
}

#[derive(Serialize)]
struct ScanMeta<'a> {
    template: ScanTemplate,
    ensemble: &'a EnsembleSpec,
    n_pairs: usize,
    seed: u64,
    blp: BlpConfig,
    quadrature: QuadratureConfig,
    tcl: Tcl4Config,
    invalid_cells: Vec<InvalidCell>,
}

#[derive(Serialize)]
struct InvalidCell {
    lambda_c: f64,
    temperature: f64,
    error: String,
}

fn cmd_blp_scan(cli: &Cli, path: &Path) -> CliResult<()> {
    let cfg: BlpScanConfig = read_config(path, "blp-scan")?;
    let s = &cfg.scan;
    let template = ScanTemplate {
        omega: s.omega,
        theta: s.theta,
        gamma: s.gamma,
        lambda: s.lambda,
    };
    SpinBosonParams::new(s.omega, s.theta, s.lambda, 1.0).map_err(config_err)?;
    if s.lambda_values.is_empty() || s.t_values.is_empty() {
        return Err(CliError::Config(
            "[scan] lambda_values and t_values must be non-empty".into(),
        ));
    }
    if s.lambda_values.iter().chain(&s.t_values).any(|x| !(*x > 0.0)) {
        return Err(CliError::Config(
            "[scan] lambda_values and t_values must be positive".into(),
        ));
    }
    cfg.blp.validate().map_err(config_err)?;
    cfg.tcl.validate().map_err(config_err)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ensemble = StatePairEnsemble::new(&cfg.ensemble, seed).map_err(config_err)?;
    let dir = out_dir(cli, &cfg.out)?;
    let result = blp_scan(
        &template,
        &s.lambda_values,
        &s.t_values,
        &ensemble,
        &cfg.blp,
        &cfg.quadrature,
        &cfg.tcl,
    )?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    write_file(&dir, "blp_map.csv", &buf)?;
    let mut buf = Vec::new();
    writeln!(buf, "temperature,lambda_resonance")?;
    for (t, l) in s.t_values.iter().zip(resonance_curve(s.omega, &s.t_values)) {
        writeln!(buf, "{t:.10e},{l:.15e}")?;
    }
    write_file(&dir, "resonance.csv", &buf)?;
    if let Some(tr) = &cfg.trajectories {
        let times = time_grid(tr.t_end, tr.n_points, true)?;
        let a = initial_bloch(tr.pair[0])?;
        let b = initial_bloch(tr.pair[1])?;
        for [lambda_c, temperature] in &tr.cells {
            let (_, g2, g4) = cell_generators(&template, *lambda_c, *temperature, &cfg.quadrature, &cfg.tcl)?;
            let d2 = trace_distance_trajectory(&g2, &a, &b, &times);
            let d4 = trace_distance_trajectory(&g4, &a, &b, &times);
            let mut buf = Vec::new();
            writeln!(buf, "t,d_tcl2,d_tcl4")?;
            for ((t, x), y) in times.iter().zip(&d2).zip(&d4) {
                writeln!(buf, "{t:.10e},{x:.15e},{y:.15e}")?;
            }
            write_file(&dir, &format!("trace_distance_L{lambda_c}_T{temperature}.csv"), &buf)?;
        }
    }
    let invalid_cells = result
        .cells
        .iter()
        .filter(|c| !c.valid)
        .map(|c| InvalidCell {
            lambda_c: c.lambda_c,
            temperature: c.temperature,
            error: c.error.clone().unwrap_or_default(),
        })
        .collect();
    write_json(
        &dir,
        "blp_meta.json",
        &ScanMeta {
            template,
            ensemble: &cfg.ensemble,
            n_pairs: ensemble.pairs.len(),
            seed,
            blp: cfg.blp,
            quadrature: cfg.quadrature,
            tcl: cfg.tcl,
            invalid_cells,
        },
    )
}

/// Run a parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    let path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        // A pool may already exist when run in-process more than once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Correlation => cmd_correlation(cli, &path),
        Command::Simulate => cmd_simulate(cli, &path),
        Command::SteadyState => cmd_steady_state(cli, &path),
        Command::DrudeVerify => cmd_drude_verify(cli, &path),
        Command::HeomBenchmark => cmd_heom_benchmark(cli, &path),
        Command::BlpScan => cmd_blp_scan(cli, &path),
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
