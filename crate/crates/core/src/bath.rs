//! Spectral densities and the bath correlation functions
//! `η(t) = −∫₀^∞ J(ω) sin(ωt) dω` and `ν(t) = ∫₀^∞ J(ω) coth(βω/2) cos(ωt) dω`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{fourier_half_line, integrate_adaptive, Decay, QuadratureConfig, Trig};

/// An odd spectral density `J(ω)`; only `ω ≥ 0` is stored, negative
/// frequencies use `J(−ω) = −J(ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralDensity {
    /// `γΛ²ω/(Λ²+ω²)`.
    Drude { gamma: f64, lambda_c: f64 },
    /// `γω[1 − sinc(ω/ω_c)] exp(−ω²/2ω_max²)`.
    DqdPhonon { gamma: f64, omega_c: f64, omega_max: f64 },
    /// Piecewise-linear table on ascending positive frequencies, joined
    /// linearly to `J(0) = 0` and zero beyond the last point. Lower accuracy
    /// than the analytic variants: correlations use trapezoid sums.
    Tabulated { grid: Vec<f64>, values: Vec<f64> },
}

impl SpectralDensity {
    pub fn validate(&self) -> Result<()> {
        match self {
            SpectralDensity::Drude { gamma, lambda_c } => {
                if !(*gamma >= 0.0) || !(*lambda_c > 0.0) {
                    return Err(Error::Config(format!(
                        "Drude needs gamma >= 0 and lambda_c > 0 (got {gamma}, {lambda_c})"
                    )));
                }
            }
            SpectralDensity::DqdPhonon {
                gamma,
                omega_c,
                omega_max,
            } => {
                if !(*gamma >= 0.0) || !(*omega_c > 0.0) || !(*omega_max > 0.0) {
                    return Err(Error::Config(format!(
                        "DQD phonon needs gamma >= 0, omega_c > 0, omega_max > 0 (got {gamma}, {omega_c}, {omega_max})"
                    )));
                }
            }
            SpectralDensity::Tabulated { grid, values } => {
                if grid.len() < 2 || grid.len() != values.len() {
                    return Err(Error::Config(
                        "tabulated spectral density needs >= 2 points and matching lengths".into(),
                    ));
                }
                if !(grid[0] > 0.0) || grid.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Config(
                        "tabulated grid must be strictly ascending positive frequencies".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        match self {
            SpectralDensity::Drude { gamma, .. } | SpectralDensity::DqdPhonon { gamma, .. } => *gamma,
            SpectralDensity::Tabulated { values, .. } => {
                if values.iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Characteristic frequency used to place quadrature breakpoints.
    pub fn scale(&self) -> f64 {
        match self {
            SpectralDensity::Drude { lambda_c, .. } => *lambda_c,
            SpectralDensity::DqdPhonon { omega_c, omega_max, .. } => omega_c.min(*omega_max),
            SpectralDensity::Tabulated { grid, .. } => grid[grid.len() - 1] / 8.0,
        }
    }

    fn decay(&self) -> Decay {
        match self {
            SpectralDensity::Drude { .. } => Decay::Algebraic,
            // exp(−x²/2) < 1e-18 beyond x ≈ 9.1
            SpectralDensity::DqdPhonon { omega_max, .. } => Decay::Compact(9.5 * omega_max),
            SpectralDensity::Tabulated { grid, .. } => Decay::Compact(grid[grid.len() - 1]),
        }
    }

    /// `J(ω)/ω` for `ω ≥ 0`, finite at the origin.
    fn j_over_omega(&self, w: f64) -> f64 {
        match self {
            SpectralDensity::Drude { gamma, lambda_c } => {
                let l2 = lambda_c * lambda_c;
                gamma * l2 / (l2 + w * w)
            }
            SpectralDensity::DqdPhonon {
                gamma,
                omega_c,
                omega_max,
            } => {
                let x = w / omega_c;
                let one_minus_sinc = if x.abs() < 1e-2 {
                    let x2 = x * x;
                    x2 / 6.0 - x2 * x2 / 120.0 + x2 * x2 * x2 / 5040.0
                } else {
                    1.0 - x.sin() / x
                };
                gamma * one_minus_sinc * (-w * w / (2.0 * omega_max * omega_max)).exp()
            }
            SpectralDensity::Tabulated { .. } => {
                if w == 0.0 {
                    let SpectralDensity::Tabulated { grid, values } = self else {
                        unreachable!()
                    };
                    values[0] / grid[0]
                } else {
                    self.j_nonneg(w) / w
                }
            }
        }
    }

    fn j_nonneg(&self, w: f64) -> f64 {
        match self {
            SpectralDensity::Tabulated { grid, values } => {
                let last = grid.len() - 1;
                if w > grid[last] {
                    return 0.0;
                }
                if w <= grid[0] {
                    return values[0] * w / grid[0];
                }
                let k = grid.partition_point(|g| *g < w).clamp(1, last);
                let (x0, x1) = (grid[k - 1], grid[k]);
                let s = (w - x0) / (x1 - x0);
                values[k - 1] * (1.0 - s) + values[k] * s
            }
            _ => w * self.j_over_omega(w),
        }
    }
}

/// `J(ω)` with the odd extension to negative frequencies.
pub fn eval_j(sd: &SpectralDensity, omega: f64) -> Result<f64> {
    sd.validate()?;
    Ok(omega.signum() * sd.j_nonneg(omega.abs()))
}

/// `x coth x`, analytic at zero.
fn x_coth_x(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 + x2 / 3.0 - x2 * x2 / 45.0
    } else {
        x / x.tanh()
    }
}

/// Immutable bath description shared by all correlation evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathContext {
    pub sd: SpectralDensity,
    pub beta: f64,
    pub quad: QuadratureConfig,
}

impl BathContext {
    pub fn new(sd: SpectralDensity, beta: f64, quad: QuadratureConfig) -> Result<Self> {
        sd.validate()?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and > 0, got {beta}")));
        }
        Ok(Self { sd, beta, quad })
    }

    /// `f(ω) = J(ω) coth(βω/2)`; even, with the `ω → 0` limit `2J'(0)/β`.
    pub fn eval_f(&self, omega: f64) -> f64 {
        let w = omega.abs();
        // J(ω)coth(βω/2) = (J/ω)·(2/β)·x coth x with x = βω/2
        self.sd.j_over_omega(w) * (2.0 / self.beta) * x_coth_x(0.5 * self.beta * w)
    }

    pub fn eta(&self, t: f64) -> Result<f64> {
        if t == 0.0 || self.sd.gamma() == 0.0 {
            return Ok(0.0);
        }
        let v = self.fourier(t.abs(), Trig::Sin, |w| self.sd.j_nonneg(w))?;
        Ok(-t.signum() * v)
    }

    pub fn nu(&self, t: f64) -> Result<f64> {
        if self.sd.gamma() == 0.0 {
            return Ok(0.0);
        }
        let t = t.abs();
        if t == 0.0 {
            return match self.sd.decay() {
                Decay::Compact(w) => integrate_adaptive(&|w| self.eval_f(w), &[0.0, w], &self.quad).map(|r| r.0),
                Decay::Algebraic => Err(Error::Quadrature(
                    "nu(0) diverges for an algebraically decaying spectral density".into(),
                )),
            };
        }
        self.fourier(t, Trig::Cos, |w| self.eval_f(w))
    }

    fn fourier<G: Fn(f64) -> f64>(&self, t: f64, trig: Trig, g: G) -> Result<f64> {
        if let SpectralDensity::Tabulated { grid, .. } = &self.sd {
            return Ok(trapezoid_fourier(&g, grid, t, trig));
        }
        fourier_half_line(&g, t, trig, self.sd.scale(), self.sd.decay(), &self.quad)
            .map_err(|e| Error::Quadrature(format!("{e} ({:?}, beta={})", self.sd, self.beta)))
    }
}

fn trapezoid_fourier<G: Fn(f64) -> f64>(g: &G, grid: &[f64], t: f64, trig: Trig) -> f64 {
    let h_max = (PI / (16.0 * t)).min(grid[0]);
    let mut knots = vec![0.0];
    knots.extend_from_slice(grid);
    let mut sum = 0.0;
    for w in knots.windows(2) {
        let n = ((w[1] - w[0]) / h_max).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / n as f64;
        for k in 0..=n {
            let x = w[0] + k as f64 * h;
            let wt = if k == 0 || k == n { 0.5 * h } else { h };
            let tr = if trig == Trig::Sin {
                (x * t).sin()
            } else {
                (x * t).cos()
            };
            sum += wt * g(x) * tr;
        }
    }
    sum
}

/// A bath two-point function `C(t) = ν(t) + iη(t)` for `t ≥ 0`.
pub trait Correlation: Sync {
    fn correlation(&self, t: f64) -> C64;

    /// Rough memory time, used to seed saturation grids.
    fn correlation_time(&self) -> f64;

    /// Make `correlation` valid on `[0, t_end]`.
    fn prepare(&mut self, _t_end: f64) -> Result<()> {
        Ok(())
    }
}

impl Correlation for BathContext {
    fn correlation(&self, t: f64) -> C64 {
        let nu = self.nu(t).unwrap_or(f64::NAN);
        let eta = self.eta(t).unwrap_or(f64::NAN);
        C64::new(nu, eta)
    }

    fn correlation_time(&self) -> f64 {
        1.0 / self.sd.scale() + self.beta / (2.0 * PI)
    }
}

/// Piecewise Chebyshev interpolant of `C(t)` built from a slow exact source.
///
/// Panels double in width from `t_min` up to a base width; beyond that the
/// widths adapt, each panel being accepted only if it reproduces the source at
/// two off-node probes. Arguments below `t_min` return the value at `t_min`.
#[derive(Debug, Clone)]
pub struct CorrelationTable {
    ctx: BathContext,
    t_min: f64,
    base_width: f64,
    max_width: f64,
    next_width: f64,
    reference: f64,
    starts: Vec<f64>,
    panels: Vec<Panel>,
    correlation_time: f64,
    /// Consecutive trailing panels below the table tolerance.
    quiet: usize,
}

#[derive(Debug, Clone)]
struct Panel {
    a: f64,
    b: f64,
    values: [C64; CHEB_NODES],
}

const CHEB_NODES: usize = 20;
const TABLE_TOL: f64 = 1e-12;

fn cheb_node(j: usize) -> f64 {
    (PI * j as f64 / (CHEB_NODES - 1) as f64).cos()
}

fn barycentric(values: &[C64; CHEB_NODES], xi: f64) -> C64 {
    let n = CHEB_NODES - 1;
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0;
    for (j, v) in values.iter().enumerate() {
        let d = xi - cheb_node(j);
        if d == 0.0 {
            return *v;
        }
        let mut w = if j % 2 == 0 { 1.0 } else { -1.0 };
        if j == 0 || j == n {
            w *= 0.5;
        }
        let c = w / d;
        num += v * c;
        den += c;
    }
    num / den
}

impl CorrelationTable {
    /// Empty table; panels are filled by [`Correlation::prepare`].
    pub fn new(ctx: BathContext) -> Self {
        let correlation_time = ctx.correlation_time();
        let base_width = 0.5f64.min(0.25 * correlation_time);
        Self {
            ctx,
            t_min: 1e-10,
            base_width,
            max_width: 2.0 * correlation_time,
            next_width: base_width,
            reference: 0.0,
            starts: Vec::new(),
            panels: Vec::new(),
            correlation_time,
            quiet: 0,
        }
    }

    pub fn from_context(ctx: &BathContext, t_end: f64) -> Result<Self> {
        let mut table = Self::new(ctx.clone());
        table.prepare(t_end)?;
        Ok(table)
    }

    /// True once the correlation has fallen below the table tolerance for two
    /// consecutive panels; it is zero beyond [`Self::t_end`] from then on.
    pub fn decayed(&self) -> bool {
        self.quiet >= 2
    }

    pub fn t_end(&self) -> f64 {
        self.panels.last().map_or(0.0, |p| p.b)
    }

    fn exact(&self, t: f64) -> Result<C64> {
        Ok(C64::new(self.ctx.nu(t)?, self.ctx.eta(t)?))
    }

    fn build_panel(&self, a: f64, b: f64) -> Result<Panel> {
        use rayon::prelude::*;
        let vals: Vec<C64> = (0..CHEB_NODES)
            .into_par_iter()
            .map(|j| self.exact(0.5 * (a + b) + 0.5 * (b - a) * cheb_node(j)))
            .collect::<Result<_>>()?;
        let mut values = [C64::new(0.0, 0.0); CHEB_NODES];
        values.copy_from_slice(&vals);
        Ok(Panel { a, b, values })
    }

    fn push(&mut self, p: Panel) {
        self.starts.push(p.a);
        self.panels.push(p);
    }

    fn extend_to(&mut self, t_end: f64) -> Result<()> {
        if self.panels.is_empty() {
            let mut a = self.t_min;
            while a < self.base_width {
                let b = (2.0 * a).min(self.base_width);
                let p = self.build_panel(a, b)?;
                self.push(p);
                a = b;
            }
            self.reference = self.exact(self.base_width)?.norm();
        }
        while self.t_end() < t_end && !self.decayed() {
            let a = self.t_end();
            let w = self.next_width;
            let p = self.build_panel(a, a + w)?;
            let mut err: f64 = 0.0;
            for xi in [-0.53, 0.61] {
                let t = a + 0.5 * w * (1.0 + xi);
                err = err.max((barycentric(&p.values, xi) - self.exact(t)?).norm());
            }
            if err > TABLE_TOL * self.reference && w > 1e-3 * self.base_width {
                self.next_width = 0.5 * w;
                continue;
            }
            let peak = p.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
            self.quiet = if peak < TABLE_TOL * self.reference {
                self.quiet + 1
            } else {
                0
            };
            self.push(p);
            self.next_width = (1.5 * w).min(self.max_width);
        }
        Ok(())
    }

    /// Interpolated `C(t)`; `None` beyond the tabulated range.
    pub fn get(&self, t: f64) -> Option<C64> {
        let t = t.max(self.t_min);
        if t > self.t_end() {
            return None;
        }
        let k = self.starts.partition_point(|a| *a <= t).saturating_sub(1);
        let p = &self.panels[k];
        let xi = ((2.0 * t - p.a - p.b) / (p.b - p.a)).clamp(-1.0, 1.0);
        Some(barycentric(&p.values, xi))
    }
}

impl Correlation for CorrelationTable {
    fn correlation(&self, t: f64) -> C64 {
        // Beyond the table the correlation is treated as fully decayed.
        self.get(t).unwrap_or(C64::new(0.0, 0.0))
    }

    fn correlation_time(&self) -> f64 {
        self.correlation_time
    }

    fn prepare(&mut self, t_end: f64) -> Result<()> {
        self.extend_to(t_end)
    }
}
