//! Second- and fourth-order TCL generators in the Bloch basis.
//!
//! Generators are stored without powers of λ; [`total_generator`] applies
//! them. Integrals run over Schrödinger-picture lags `s_k = t − t_k`, so the
//! time-dependent generator at `t` integrates the region
//! `0 ≤ s₁ ≤ s₂ ≤ s₃ ≤ t`, and the asymptotic one lets `t → ∞`.

pub mod kernel;

use nalgebra::Matrix4;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::Correlation;
use crate::error::{Error, Result};
use crate::quad::{gauss_legendre_unit, tanh_sinh_unit, UnitNode};
use crate::system::{free_generator, SpinBosonParams};
pub use kernel::{CMat4, FourthOrderKernel, SecondOrderKernel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeTag {
    Finite(f64),
    Asymptotic,
}

/// A real 4×4 generator acting on Bloch 4-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeneratorRepr", into = "GeneratorRepr")]
pub struct GeneratorMatrix {
    pub order: u8,
    pub t: TimeTag,
    pub m: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TimeRepr {
    Finite(f64),
    Tag(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorRepr {
    order: u8,
    t: TimeRepr,
    matrix: [[f64; 4]; 4],
}

impl From<GeneratorMatrix> for GeneratorRepr {
    fn from(g: GeneratorMatrix) -> Self {
        let mut matrix = [[0.0; 4]; 4];
        for (i, row) in matrix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = g.m[(i, j)];
            }
        }
        let t = match g.t {
            TimeTag::Finite(t) => TimeRepr::Finite(t),
            TimeTag::Asymptotic => TimeRepr::Tag("asymptotic".into()),
        };
        Self {
            order: g.order,
            t,
            matrix,
        }
    }
}

impl TryFrom<GeneratorRepr> for GeneratorMatrix {
    type Error = String;

    fn try_from(r: GeneratorRepr) -> std::result::Result<Self, String> {
        if ![0, 2, 4].contains(&r.order) {
            return Err(format!("generator order must be 0, 2 or 4, got {}", r.order));
        }
        let t = match r.t {
            TimeRepr::Finite(t) => TimeTag::Finite(t),
            TimeRepr::Tag(s) if s == "asymptotic" => TimeTag::Asymptotic,
            TimeRepr::Tag(s) => return Err(format!("unknown time tag {s:?}")),
        };
        Ok(Self {
            order: r.order,
            t,
            m: Matrix4::from_fn(|i, j| r.matrix[i][j]),
        })
    }
}

impl GeneratorMatrix {
    /// Largest violation of the trace-row and `a₃F₃ₖ = a₁F₁ₖ` constraints,
    /// relative to the largest entry.
    pub fn symmetry_residual(&self, params: &SpinBosonParams) -> f64 {
        let scale = self.m.amax().max(1e-300);
        let (a1, a3) = (params.a1(), params.a3());
        (0..4)
            .map(|k| {
                self.m[(0, k)]
                    .abs()
                    .max((a3 * self.m[(3, k)] - a1 * self.m[(1, k)]).abs())
            })
            .fold(0.0, f64::max)
            / scale
    }

    /// Rows 1 and 2, which determine the whole generator for `a₃ ≠ 0`.
    pub fn independent_entries(&self) -> [f64; 8] {
        let mut e = [0.0; 8];
        for k in 0..4 {
            e[k] = self.m[(1, k)];
            e[4 + k] = self.m[(2, k)];
        }
        e
    }
}

/// `F⁽⁰⁾ + λ²F⁽²⁾ + λ⁴F⁽⁴⁾`, the last term only when `f4` is given.
pub fn total_generator(
    params: &SpinBosonParams,
    f0: &GeneratorMatrix,
    f2: &GeneratorMatrix,
    f4: Option<&GeneratorMatrix>,
) -> GeneratorMatrix {
    let l2 = params.lambda * params.lambda;
    let mut m = f0.m + f2.m * l2;
    if let Some(f4) = f4 {
        m += f4.m * (l2 * l2);
    }
    GeneratorMatrix {
        order: if f4.is_some() { 4 } else { 2 },
        t: f2.t,
        m,
    }
}

pub fn free_generator_matrix(params: &SpinBosonParams) -> GeneratorMatrix {
    GeneratorMatrix {
        order: 0,
        t: TimeTag::Asymptotic,
        m: free_generator(params),
    }
}

/// Quadrature and saturation controls for the nested time integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tcl4Config {
    /// Tanh–sinh step for the inner `(x, y)` integrals.
    pub inner_step: f64,
    /// Gauss–Legendre order of each outer panel.
    pub gl_order: usize,
    /// End of the first outer segment, in bath correlation times.
    pub first: f64,
    /// Ratio of the geometric saturation grid.
    pub growth: f64,
    /// Relative change per grid step below which the limit is accepted.
    pub tol: f64,
    /// Give up beyond this many bath correlation times.
    pub t_max: f64,
}

impl Default for Tcl4Config {
    fn default() -> Self {
        Self {
            inner_step: 1.0 / 8.0,
            gl_order: 20,
            first: 0.5,
            growth: 1.5,
            tol: 1e-11,
            t_max: 2000.0,
        }
    }
}

impl Tcl4Config {
    pub fn validate(&self) -> Result<()> {
        let ok = self.inner_step > 0.0
            && self.inner_step <= 0.5
            && self.gl_order >= 2
            && self.first > 0.0
            && self.growth > 1.0
            && self.tol > 0.0
            && self.t_max > self.first;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid TCL quadrature settings: {self:?}")))
        }
    }
}

/// Outer integration over `s ∈ [0, t]` with saturation for the asymptotic
/// limit. `slice(s)` returns the integrand of the outer variable.
fn outer_integral<C, G>(params: &SpinBosonParams, corr: &mut C, cfg: &Tcl4Config, t: TimeTag, slice: G) -> Result<CMat4>
where
    C: Correlation,
    G: Fn(&C, f64) -> CMat4 + Sync,
{
    cfg.validate()?;
    let tau_c = corr.correlation_time();
    let mut period_cap = 4.0 * tau_c;
    if params.omega > 0.0 {
        period_cap = period_cap.min(2.0 * std::f64::consts::PI / params.omega);
    }
    let t_first = cfg.first * tau_c;
    let t_end = match t {
        TimeTag::Finite(t) if t < 0.0 => {
            return Err(Error::Domain(format!("generator time must be >= 0, got {t}")));
        }
        TimeTag::Finite(t) => t,
        TimeTag::Asymptotic => cfg.t_max * tau_c,
    };
    let ts = tanh_sinh_unit(cfg.inner_step);
    let gl = gauss_legendre_unit(cfg.gl_order);

    let integrate = |corr: &C, a: f64, b: f64, rule: &[UnitNode]| -> CMat4 {
        let parts: Vec<CMat4> = rule
            .par_iter()
            .map(|n| slice(corr, a + (b - a) * n.x) * C64::from(n.w * (b - a)))
            .collect();
        parts.iter().fold(CMat4::zeros(), |acc, m| acc + m)
    };

    let head = t_first.min(t_end);
    corr.prepare(head)?;
    let mut total = integrate(corr, 0.0, head, &ts);
    let mut a = head;
    let mut quiet = 0;
    while a < t_end {
        let b = (a * cfg.growth).min(t_end);
        corr.prepare(b)?;
        let pieces = ((b - a) / period_cap).ceil().max(1.0) as usize;
        let w = (b - a) / pieces as f64;
        let mut delta = CMat4::zeros();
        for k in 0..pieces {
            delta += integrate(corr, a + k as f64 * w, a + (k + 1) as f64 * w, &gl);
        }
        total += delta;
        a = b;
        if t == TimeTag::Asymptotic && a >= 5.0 * tau_c {
            if delta.norm() <= cfg.tol * total.norm() {
                quiet += 1;
                if quiet >= 2 {
                    return Ok(total);
                }
            } else {
                quiet = 0;
            }
        }
    }
    match t {
        TimeTag::Finite(_) => Ok(total),
        TimeTag::Asymptotic => Err(Error::Saturation(format!(
            "no saturation by t = {t_end:.4e} (correlation time {tau_c:.4e}, tolerance {:e})",
            cfg.tol
        ))),
    }
}

fn real_generator(order: u8, t: TimeTag, m: CMat4) -> GeneratorMatrix {
    GeneratorMatrix {
        order,
        t,
        m: m.map(|z| z.re),
    }
}

/// Second-order generator at time `t` or in the asymptotic limit.
pub fn tcl2_generator<C: Correlation>(
    params: &SpinBosonParams,
    corr: &mut C,
    cfg: &Tcl4Config,
    t: TimeTag,
) -> Result<GeneratorMatrix> {
    let k = SecondOrderKernel::new(params);
    let m = outer_integral(params, corr, cfg, t, |c, s| k.integrand(c, s))?;
    Ok(real_generator(2, t, m))
}

/// The fourth-order cumulant integrand at interaction-picture times
/// `t ≥ t₁ ≥ t₂ ≥ t₃ ≥ 0`, Bloch element `(i, j)`.
pub fn tcl4_integrand<C: Correlation + ?Sized>(
    params: &SpinBosonParams,
    corr: &C,
    element: (usize, usize),
    t: f64,
    t1: f64,
    t2: f64,
    t3: f64,
) -> Result<f64> {
    if !(t >= t1 && t1 >= t2 && t2 >= t3 && t3 >= 0.0) {
        return Err(Error::Domain(format!(
            "times must satisfy t >= t1 >= t2 >= t3 >= 0, got {t}, {t1}, {t2}, {t3}"
        )));
    }
    if element.0 > 3 || element.1 > 3 {
        return Err(Error::Domain(format!("element {element:?} out of range")));
    }
    let k = FourthOrderKernel::new(params);
    Ok(k.integrand(corr, [t - t1, t - t2, t - t3])[element].re)
}

/// Grouped kernel tensors for the inner `(x, y)` cubature at fixed `s₃`.
///
/// With `s₂ = s₃x`, `s₁ = s₂y`, every pairing has exactly one lag that
/// depends on `y`; the `y` sum is done first against that lag and the phase of
/// `s₁`.
struct InnerPlan {
    omega: f64,
    pairings: Vec<usize>,
    /// Per term: (pairing slot, conj of the y-independent lag, conj of the
    /// y-dependent lag, f₁ index, f₂, f₃, tensor).
    terms: Vec<(usize, bool, usize, usize, i32, i32, CMat4)>,
    x_nodes: Vec<UnitNode>,
    y_nodes: Vec<UnitNode>,
}

/// Which of the two lags of a pairing varies with `y`.
const DEPENDENT_SLOT: [usize; 3] = [0, 1, 1];

impl InnerPlan {
    fn new(k: &FourthOrderKernel, step: f64) -> Self {
        let mut pairings: Vec<usize> = k.merged.iter().map(|t| t.pairing).collect();
        pairings.sort_unstable();
        pairings.dedup();
        let terms = k
            .merged
            .iter()
            .map(|t| {
                let slot = pairings.iter().position(|p| *p == t.pairing).expect("pairing present");
                let dep = DEPENDENT_SLOT[t.pairing];
                (
                    slot,
                    t.conj[1 - dep],
                    t.conj[dep] as usize,
                    (t.freq[0] + 1) as usize,
                    t.freq[1],
                    t.freq[2],
                    t.t,
                )
            })
            .collect();
        let nodes = tanh_sinh_unit(step);
        Self {
            omega: k.omega,
            pairings,
            terms,
            x_nodes: nodes.clone(),
            y_nodes: nodes,
        }
    }

    /// `∫₀¹dx ∫₀¹dy s₃² x · integrand(s₃xy, s₃x, s₃)`.
    fn slice<C: Correlation + ?Sized>(&self, corr: &C, s3: f64) -> CMat4 {
        let np = self.pairings.len();
        let c_s3 = corr.correlation(s3);
        let mut out = CMat4::zeros();
        let mut acc = vec![[[C64::new(0.0, 0.0); 3]; 2]; np];
        for xn in &self.x_nodes {
            let (x, xc) = (xn.x, xn.xc);
            let s2 = s3 * x;
            for a in acc.iter_mut() {
                *a = [[C64::new(0.0, 0.0); 3]; 2];
            }
            for yn in &self.y_nodes {
                let (y, yc) = (yn.x, yn.xc);
                let s1 = s2 * y;
                let e1 = C64::from_polar(yn.w, -self.omega * s1);
                let e1c = C64::new(e1.re, -e1.im);
                for (slot, &p) in self.pairings.iter().enumerate() {
                    let d = match p {
                        0 => s1,
                        1 => s3 * (xc + x * yc),
                        _ => s2 * yc,
                    };
                    let c = corr.correlation(d);
                    let cc = c.conj();
                    let a = &mut acc[slot];
                    a[0][0] += c * e1c;
                    a[0][1] += c * yn.w;
                    a[0][2] += c * e1;
                    a[1][0] += cc * e1c;
                    a[1][1] += cc * yn.w;
                    a[1][2] += cc * e1;
                }
            }
            let indep: Vec<C64> = self
                .pairings
                .iter()
                .map(|&p| match p {
                    0 => corr.correlation(s3 - s2),
                    1 => corr.correlation(s2),
                    _ => c_s3,
                })
                .collect();
            let jac = xn.w * s3 * s3 * x;
            let mut local = CMat4::zeros();
            for (slot, ci, cd, f1, f2, f3, t) in &self.terms {
                let xi = if *ci { indep[*slot].conj() } else { indep[*slot] };
                let ph = C64::from_polar(1.0, -self.omega * (*f2 as f64 * s2 + *f3 as f64 * s3));
                local += t * (xi * ph * acc[*slot][*cd][*f1]);
            }
            out += local * C64::from(jac);
        }
        out
    }
}

/// Fourth-order generator at time `t` or in the asymptotic limit.
pub fn tcl4_generator<C: Correlation>(
    params: &SpinBosonParams,
    corr: &mut C,
    cfg: &Tcl4Config,
    t: TimeTag,
) -> Result<GeneratorMatrix> {
    let k = FourthOrderKernel::new(params);
    let plan = InnerPlan::new(&k, cfg.inner_step);
    let m = outer_integral(params, corr, cfg, t, |c, s3| plan.slice(c, s3))?;
    Ok(real_generator(4, t, m))
}
