//! Trace-distance dynamics, the BLP non-Markovianity measure and scans of it
//! over cutoff and temperature.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{BathContext, CorrelationTable, SpectralDensity};
use crate::dynamics::steady_state;
use crate::error::{Error, Result};
use crate::quad::QuadratureConfig;
use crate::system::{BlochVector, SpinBosonParams};
use crate::tcl::{
    free_generator_matrix, tcl2_generator, tcl4_generator, total_generator, GeneratorMatrix, Tcl4Config, TimeTag,
};

/// Half the Euclidean distance between the spatial Bloch components.
pub fn trace_distance(a: &BlochVector, b: &BlochVector) -> f64 {
    0.5 * (a.0.fixed_rows::<3>(1) - b.0.fixed_rows::<3>(1)).norm()
}

/// Area-uniform map from the unit square to the Bloch sphere.
pub fn sample_sphere(u: f64, v: f64) -> BlochVector {
    let z = 2.0 * v - 1.0;
    let s = z.acos().sin();
    BlochVector::new((2.0 * PI * u).cos() * s, (2.0 * PI * u).sin() * s, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleStrategy {
    /// `n_u × n_v` states paired with their antipodes.
    Antipodal { n_u: usize, n_v: usize },
    /// All ordered pairs of an `n × n` grid of states, `n⁴` pairs.
    General { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub strategy: EnsembleStrategy,
    /// Jitter each `(u, v)` uniformly within its grid cell, seeded.
    #[serde(default)]
    pub jitter: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            strategy: EnsembleStrategy::Antipodal { n_u: 20, n_v: 20 },
            jitter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePairEnsemble {
    pub strategy: EnsembleStrategy,
    pub pairs: Vec<(BlochVector, BlochVector)>,
}

fn grid_points(n_u: usize, n_v: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<BlochVector> {
    let mut out = Vec::with_capacity(n_u * n_v);
    let mut rng = rng;
    for i in 0..n_u {
        for j in 0..n_v {
            let (du, dv) = match rng.as_deref_mut() {
                Some(r) => (r.gen::<f64>(), r.gen::<f64>()),
                None => (0.5, 0.5),
            };
            out.push(sample_sphere(
                (i as f64 + du) / n_u as f64,
                (j as f64 + dv) / n_v as f64,
            ));
        }
    }
    out
}

impl StatePairEnsemble {
    pub fn new(spec: &EnsembleSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = if spec.jitter { Some(&mut rng) } else { None };
        let pairs = match spec.strategy {
            EnsembleStrategy::Antipodal { n_u, n_v } => {
                if n_u == 0 || n_v == 0 {
                    return Err(Error::Config("antipodal ensemble needs n_u, n_v >= 1".into()));
                }
                grid_points(n_u, n_v, rng)
                    .into_iter()
                    .map(|a| {
                        let [x, y, z] = a.spatial();
                        (a, BlochVector::new(-x, -y, -z))
                    })
                    .collect()
            }
            EnsembleStrategy::General { n } => {
                if n == 0 {
                    return Err(Error::Config("general ensemble needs n >= 1".into()));
                }
                let pts = grid_points(n, n, rng);
                let mut pairs = Vec::with_capacity(pts.len() * pts.len());
                for a in &pts {
                    for b in &pts {
                        pairs.push((*a, *b));
                    }
                }
                pairs
            }
        };
        Ok(Self {
            strategy: spec.strategy,
            pairs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlpConfig {
    /// Equilibration threshold on the trace distance to the TCL2 steady state.
    pub eps_ss: f64,
    /// Grid points on `[0, t_max]`.
    pub steps: usize,
    /// Minimum grid points per free precession period.
    pub points_per_period: usize,
    /// Hard cap on `t_max`.
    pub t_cap: f64,
}

impl Default for BlpConfig {
    fn default() -> Self {
        Self {
            eps_ss: 1e-3,
            steps: 4000,
            points_per_period: 64,
            t_cap: 1e6,
        }
    }
}

impl BlpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_ss > 0.0) || self.steps == 0 || !(self.t_cap > 0.0) {
            return Err(Error::Config("blp needs eps_ss > 0, steps >= 1, t_cap > 0".into()));
        }
        Ok(())
    }

    /// Grid spacing on `[0, t_max]` for precession frequency `omega`.
    pub fn dt(&self, t_max: f64, omega: f64) -> f64 {
        let mut dt = t_max / self.steps as f64;
        if self.points_per_period > 0 && omega > 0.0 {
            dt = dt.min(2.0 * PI / (omega * self.points_per_period as f64));
        }
        dt
    }
}

fn block_propagator(g: &GeneratorMatrix, dt: f64) -> Matrix3<f64> {
    (g.m * dt).exp().fixed_view::<3, 3>(1, 1).into_owned()
}

fn spatial(v: &BlochVector) -> Vector3<f64> {
    v.0.fixed_rows::<3>(1).into_owned()
}

/// First time the state of `ensemble` farthest from the steady state of
/// `reference` comes within `eps_ss` of it.
pub fn equilibration_time(reference: &GeneratorMatrix, ensemble: &StatePairEnsemble, cfg: &BlpConfig) -> Result<f64> {
    let ss = steady_state(reference)?;
    let worst = ensemble
        .pairs
        .iter()
        .flat_map(|(a, b)| [a, b])
        .max_by(|a, b| trace_distance(a, &ss).total_cmp(&trace_distance(b, &ss)))
        .ok_or_else(|| Error::Config("empty state-pair ensemble".into()))?;
    let d0 = spatial(worst) - spatial(&ss);
    if 0.5 * d0.norm() < cfg.eps_ss {
        return Ok(0.0);
    }
    // March with a step well inside the fastest oscillation, then bisect the crossing.
    let h = 0.05 / (reference.m.norm() + 1e-300);
    let p = block_propagator(reference, h);
    let mut d = d0;
    let mut t = 0.0;
    loop {
        let next = p * d;
        if 0.5 * next.norm() < cfg.eps_ss {
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if 0.5 * (block_propagator(reference, mid) * d).norm() < cfg.eps_ss {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(t + hi);
        }
        d = next;
        t += h;
        if t > cfg.t_cap {
            return Err(Error::Saturation(format!(
                "no equilibration to within {} of the steady state before t = {}",
                cfg.eps_ss, cfg.t_cap
            )));
        }
    }
}

/// Sum of positive increments of `D` on a uniform grid, maximised over pairs.
pub fn blp_measure_on(gen: &GeneratorMatrix, ensemble: &StatePairEnsemble, t_max: f64, dt: f64) -> f64 {
    if t_max <= 0.0 {
        return 0.0;
    }
    let steps = (t_max / dt).ceil() as usize;
    let p = block_propagator(gen, t_max / steps as f64);
    ensemble
        .pairs
        .iter()
        .map(|(a, b)| {
            let mut d = spatial(a) - spatial(b);
            let mut prev = d.norm();
            let mut gain = 0.0;
            for _ in 0..steps {
                d = p * d;
                let cur = d.norm();
                if cur > prev {
                    gain += cur - prev;
                }
                prev = cur;
            }
            0.5 * gain
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlpOutcome {
    pub measure: f64,
    pub t_max: f64,
}

/// BLP measure of `gen`, with the time window set by `reference` (the TCL2
/// generator of the same model).
pub fn blp_measure(
    gen: &GeneratorMatrix,
    reference: &GeneratorMatrix,
    ensemble: &StatePairEnsemble,
    omega: f64,
    cfg: &BlpConfig,
) -> Result<BlpOutcome> {
    cfg.validate()?;
    let t_max = equilibration_time(reference, ensemble, cfg)?;
    let measure = blp_measure_on(gen, ensemble, t_max, cfg.dt(t_max, omega));
    Ok(BlpOutcome { measure, t_max })
}

/// `D(t)` between the evolutions of `a` and `b`.
pub fn trace_distance_trajectory(gen: &GeneratorMatrix, a: &BlochVector, b: &BlochVector, times: &[f64]) -> Vec<f64> {
    let d = spatial(a) - spatial(b);
    times
        .iter()
        .map(|t| 0.5 * (block_propagator(gen, *t) * d).norm())
        .collect()
}

/// Cutoff at which the system–bath resonance suppresses backflow,
/// `Λ(T) = Ω√((T sinh(Ω/T) + Ω)/(T sinh(Ω/T) − Ω))`.
pub fn resonance_curve(omega: f64, t_grid: &[f64]) -> Vec<f64> {
    t_grid
        .iter()
        .map(|&t| {
            let s = t * (omega / t).sinh();
            omega * ((s + omega) / (s - omega)).sqrt()
        })
        .collect()
}

/// Model shared by every scan cell; the cell fixes the Drude cutoff and the
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanTemplate {
    pub omega: f64,
    pub theta: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlpCell {
    pub lambda_c: f64,
    pub temperature: f64,
    pub n_tcl2: f64,
    pub n_tcl4: f64,
    pub diff: f64,
    pub t_max: f64,
    pub valid: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlpScanResult {
    pub lambda_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// Row-major over `(Λ, T)`.
    pub cells: Vec<BlpCell>,
}

impl BlpScanResult {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lambda_c,temperature,n_tcl2,n_tcl4,diff,t_max,valid")?;
        for c in &self.cells {
            writeln!(
                w,
                "{:.10e},{:.10e},{:.15e},{:.15e},{:.15e},{:.10e},{}",
                c.lambda_c, c.temperature, c.n_tcl2, c.n_tcl4, c.diff, c.t_max, c.valid as u8
            )?;
        }
        Ok(())
    }
}

/// Asymptotic TCL2 and TCL4 total generators for one Drude cell.
pub fn cell_generators(
    template: &ScanTemplate,
    lambda_c: f64,
    temperature: f64,
    quad: &QuadratureConfig,
    tcl: &Tcl4Config,
) -> Result<(SpinBosonParams, GeneratorMatrix, GeneratorMatrix)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let params = SpinBosonParams::new(template.omega, template.theta, template.lambda, 1.0 / temperature)?;
    let ctx = BathContext::new(
        SpectralDensity::Drude {
            gamma: template.gamma,
            lambda_c,
        },
        params.beta,
        *quad,
    )?;
    let mut table = CorrelationTable::new(ctx);
    let f2 = tcl2_generator(&params, &mut table, tcl, TimeTag::Asymptotic)?;
    let f4 = tcl4_generator(&params, &mut table, tcl, TimeTag::Asymptotic)?;
    let f0 = free_generator_matrix(&params);
    let g2 = total_generator(&params, &f0, &f2, None);
    let g4 = total_generator(&params, &f0, &f2, Some(&f4));
    Ok((params, g2, g4))
}

fn scan_cell(
    template: &ScanTemplate,
    lambda_c: f64,
    temperature: f64,
    ensemble: &StatePairEnsemble,
    cfg: &BlpConfig,
    quad: &QuadratureConfig,
    tcl: &Tcl4Config,
) -> Result<(f64, f64, f64)> {
    let (_, g2, g4) = cell_generators(template, lambda_c, temperature, quad, tcl)?;
    let o2 = blp_measure(&g2, &g2, ensemble, template.omega, cfg)?;
    let dt = cfg.dt(o2.t_max, template.omega);
    let n4 = blp_measure_on(&g4, ensemble, o2.t_max, dt);
    Ok((o2.measure, n4, o2.t_max))
}

/// BLP measures for TCL2 and TCL4 on every `(Λ, T)` cell. Failed cells are
/// recorded as invalid and the scan continues.
pub fn blp_scan(
    template: &ScanTemplate,
    lambda_grid: &[f64],
    t_grid: &[f64],
    ensemble: &StatePairEnsemble,
    cfg: &BlpConfig,
    quad: &QuadratureConfig,
    tcl: &Tcl4Config,
) -> Result<BlpScanResult> {
    cfg.validate()?;
    tcl.validate()?;
    let jobs: Vec<(f64, f64)> = lambda_grid
        .iter()
        .flat_map(|l| t_grid.iter().map(move |t| (*l, *t)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(
            |&(lambda_c, temperature)| match scan_cell(template, lambda_c, temperature, ensemble, cfg, quad, tcl) {
                Ok((n2, n4, t_max)) => BlpCell {
                    lambda_c,
                    temperature,
                    n_tcl2: n2,
                    n_tcl4: n4,
                    diff: n4 - n2,
                    t_max,
                    valid: true,
                    error: None,
                },
                Err(e) => BlpCell {
                    lambda_c,
                    temperature,
                    n_tcl2: f64::NAN,
                    n_tcl4: f64::NAN,
                    diff: f64::NAN,
                    t_max: f64::NAN,
                    valid: false,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();
    Ok(BlpScanResult {
        lambda_grid: lambda_grid.to_vec(),
        t_grid: t_grid.to_vec(),
        cells,
    })
}
