//! Correlation functions as finite sums of decaying exponentials and exact
//! ordered-time integrals over such sums.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::Correlation;
use crate::error::{Error, Result};
use crate::system::SpinBosonParams;
use crate::tcl::kernel::{FourthOrderKernel, KernelTerm, SecondOrderKernel, FREQS, PAIRINGS};
use crate::tcl::{CMat4, GeneratorMatrix, TimeTag};

/// One term `weight · e^{−rate·t}` of `C(t) = ν(t) + iη(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpMode {
    pub weight: C64,
    pub rate: C64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialBath {
    pub modes: Vec<ExpMode>,
    pub n_matsubara: usize,
    pub beta: f64,
    /// `∫₀^∞` of the dropped Matsubara tail, the strength of its δ-function
    /// approximation.
    pub remainder: f64,
}

fn check_drude(gamma: f64, lambda_c: f64, beta: f64, n: usize) -> Result<()> {
    if !(gamma >= 0.0) || !(lambda_c > 0.0) || !(beta > 0.0) {
        return Err(Error::Config(format!(
            "Drude modes need gamma >= 0, lambda_c > 0, beta > 0 (got {gamma}, {lambda_c}, {beta})"
        )));
    }
    for k in 1..=n {
        let mu = 2.0 * PI * k as f64 / beta;
        if (lambda_c * lambda_c - mu * mu).abs() <= 1e-10 * lambda_c * lambda_c {
            return Err(Error::Degenerate(format!(
                "cutoff {lambda_c} coincides with Matsubara frequency {k} ({mu}); perturb lambda_c by ~1e-9 relative"
            )));
        }
    }
    Ok(())
}

fn matsubara_modes(gamma: f64, lambda_c: f64, beta: f64, n: usize) -> impl Iterator<Item = ExpMode> {
    let l2 = lambda_c * lambda_c;
    (1..=n).map(move |k| {
        let mu = 2.0 * PI * k as f64 / beta;
        ExpMode {
            weight: C64::from(-2.0 * PI * gamma * l2 * mu / (beta * (l2 - mu * mu))),
            rate: C64::from(mu),
        }
    })
}

/// `Σ_{k>N} c_k/μ_k` for the Drude Matsubara modes, from the closed form of
/// `Σ_{k≥1} 1/(μ_k² − Λ²) = (1 − x cot x)/(2Λ²)` with `x = βΛ/2`.
fn matsubara_remainder(gamma: f64, lambda_c: f64, beta: f64, n: usize) -> f64 {
    let l2 = lambda_c * lambda_c;
    let x = 0.5 * beta * lambda_c;
    let full = (1.0 - x / x.tan()) / (2.0 * l2);
    let partial: f64 = (1..=n)
        .map(|k| {
            let mu = 2.0 * PI * k as f64 / beta;
            1.0 / (mu * mu - l2)
        })
        .sum();
    2.0 * PI * gamma * l2 / beta * (full - partial)
}

/// Drude bath with the Matsubara sum truncated symmetrically at `|n| ≤ N`;
/// the cutoff mode carries the truncated partial sum too.
pub fn drude_modes(gamma: f64, lambda_c: f64, beta: f64, n: usize) -> Result<ExponentialBath> {
    check_drude(gamma, lambda_c, beta, n)?;
    let l2 = lambda_c * lambda_c;
    let mut partial = 1.0;
    for k in 1..=n {
        let mu = 2.0 * PI * k as f64 / beta;
        partial += 2.0 * l2 / (l2 - mu * mu);
    }
    let lead = ExpMode {
        weight: C64::new(PI * gamma * lambda_c / beta * partial, -0.5 * PI * gamma * l2),
        rate: C64::from(lambda_c),
    };
    let modes = std::iter::once(lead)
        .chain(matsubara_modes(gamma, lambda_c, beta, n))
        .collect();
    Ok(ExponentialBath {
        modes,
        n_matsubara: n,
        beta,
        remainder: matsubara_remainder(gamma, lambda_c, beta, n),
    })
}

/// Drude bath whose cutoff mode carries the full Matsubara sum,
/// `(πγΛ²/2) cot(βΛ/2)`; only the fast modes are truncated.
pub fn drude_modes_resummed(gamma: f64, lambda_c: f64, beta: f64, n: usize) -> Result<ExponentialBath> {
    check_drude(gamma, lambda_c, beta, n)?;
    let x = 0.5 * beta * lambda_c;
    let k = (x / PI).round();
    if k >= 1.0 && (x - k * PI).abs() <= 1e-10 * x {
        return Err(Error::Degenerate(format!(
            "cutoff {lambda_c} coincides with Matsubara frequency {k}; perturb lambda_c by ~1e-9 relative"
        )));
    }
    let l2 = lambda_c * lambda_c;
    let lead = ExpMode {
        weight: C64::new(0.5 * PI * gamma * l2 / x.tan(), -0.5 * PI * gamma * l2),
        rate: C64::from(lambda_c),
    };
    let modes = std::iter::once(lead)
        .chain(matsubara_modes(gamma, lambda_c, beta, n))
        .collect();
    Ok(ExponentialBath {
        modes,
        n_matsubara: n,
        beta,
        remainder: matsubara_remainder(gamma, lambda_c, beta, n),
    })
}

impl ExponentialBath {
    pub fn nu(&self, t: f64) -> f64 {
        self.correlation(t.abs()).re
    }

    pub fn eta(&self, t: f64) -> f64 {
        t.signum() * self.correlation(t.abs()).im
    }

    /// Modes of `C` (`conj = false`) or of `C*`.
    pub fn modes_of(&self, conj: bool) -> Vec<ExpMode> {
        self.modes
            .iter()
            .map(|m| {
                if conj {
                    ExpMode {
                        weight: m.weight.conj(),
                        rate: m.rate.conj(),
                    }
                } else {
                    *m
                }
            })
            .collect()
    }
}

impl Correlation for ExponentialBath {
    fn correlation(&self, t: f64) -> C64 {
        self.modes.iter().map(|m| m.weight * (-m.rate * t).exp()).sum()
    }

    fn correlation_time(&self) -> f64 {
        let slowest = self.modes.iter().map(|m| m.rate.re).fold(f64::INFINITY, f64::min);
        1.0 / slowest + self.beta / (2.0 * PI)
    }
}

/// Exponents closer than this are treated as equal.
const EXP_EPS: f64 = 1e-12;

/// `coeff · t^power · e^{exponent·t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyExpTerm {
    pub coeff: C64,
    pub power: u32,
    pub exponent: C64,
}

impl PolyExpTerm {
    fn is_zero_exponent(&self) -> bool {
        self.exponent.norm() <= EXP_EPS
    }

    /// Survives or grows as `t → ∞` and is not a plain constant.
    pub fn is_secular(&self) -> bool {
        self.exponent.re > -EXP_EPS && !(self.power == 0 && self.is_zero_exponent())
    }
}

/// `g(t) = Σ coeffⱼ tᵏʲ e^{exponentⱼ t}` on `t ≥ 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpSum {
    pub terms: Vec<PolyExpTerm>,
}

/// Constant and non-decaying parts of an [`ExpSum`] as `t → ∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct Asymptotics {
    pub constant: C64,
    pub secular: Vec<PolyExpTerm>,
}

impl ExpSum {
    pub fn constant(c: C64) -> Self {
        Self::exp(c, C64::new(0.0, 0.0))
    }

    pub fn exp(coeff: C64, exponent: C64) -> Self {
        Self {
            terms: vec![PolyExpTerm {
                coeff,
                power: 0,
                exponent,
            }],
        }
    }

    pub fn from_modes(modes: &[ExpMode]) -> Self {
        Self {
            terms: modes
                .iter()
                .map(|m| PolyExpTerm {
                    coeff: m.weight,
                    power: 0,
                    exponent: -m.rate,
                })
                .collect(),
        }
    }

    pub fn eval(&self, t: f64) -> C64 {
        self.terms
            .iter()
            .map(|x| x.coeff * t.powi(x.power as i32) * (x.exponent * t).exp())
            .sum()
    }

    /// Multiply by `e^{a t}`.
    pub fn shift(&self, a: C64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|x| PolyExpTerm {
                    exponent: x.exponent + a,
                    ..*x
                })
                .collect(),
        }
    }

    pub fn scale(&self, c: C64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|x| PolyExpTerm {
                    coeff: x.coeff * c,
                    ..*x
                })
                .collect(),
        }
    }

    /// Merge terms with equal power and exponents closer than `1e-12`.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by(|a, b| {
            a.power
                .cmp(&b.power)
                .then(a.exponent.re.total_cmp(&b.exponent.re))
                .then(a.exponent.im.total_cmp(&b.exponent.im))
        });
        let mut out: Vec<PolyExpTerm> = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            match out.last_mut() {
                Some(last) if last.power == t.power && (last.exponent - t.exponent).norm() <= EXP_EPS => {
                    last.coeff += t.coeff;
                }
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coeff != C64::new(0.0, 0.0));
        Self { terms: out }
    }

    /// `h(t) = ∫₀ᵗ g(s) ds`.
    pub fn ordered_integral(&self) -> Self {
        let mut out = Vec::with_capacity(2 * self.terms.len());
        let mut constant = C64::new(0.0, 0.0);
        for x in &self.terms {
            let k = x.power;
            if x.is_zero_exponent() {
                out.push(PolyExpTerm {
                    coeff: x.coeff / (k + 1) as f64,
                    power: k + 1,
                    exponent: C64::new(0.0, 0.0),
                });
                continue;
            }
            // ∫₀ᵗ sᵏ e^{as} ds = e^{at} Σⱼ (−1)ʲ k!/(k−j)! t^{k−j}/a^{j+1} − (−1)ᵏ k!/a^{k+1}
            let a = x.exponent;
            let mut fall = 1.0;
            let mut apow = a;
            for j in 0..=k {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                out.push(PolyExpTerm {
                    coeff: x.coeff * (sign * fall) / apow,
                    power: k - j,
                    exponent: a,
                });
                if j < k {
                    fall *= (k - j) as f64;
                    apow *= a;
                }
            }
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            constant -= x.coeff * (sign * fall) / apow;
        }
        out.push(PolyExpTerm {
            coeff: constant,
            power: 0,
            exponent: C64::new(0.0, 0.0),
        });
        Self { terms: out }
    }

    /// Split off the `t → ∞` behaviour: decaying terms are dropped, the
    /// constant is returned, and everything else is reported as secular.
    pub fn asymptotics(&self) -> Asymptotics {
        let mut constant = C64::new(0.0, 0.0);
        let mut secular = Vec::new();
        for x in &self.terms {
            if x.power == 0 && x.is_zero_exponent() {
                constant += x.coeff;
            } else if x.is_secular() {
                secular.push(*x);
            }
        }
        Asymptotics { constant, secular }
    }
}

/// Pointwise product; term count is `|a|·|b|` before compaction.
pub fn expsum_mul(a: &ExpSum, b: &ExpSum) -> ExpSum {
    let mut terms = Vec::with_capacity(a.terms.len() * b.terms.len());
    for x in &a.terms {
        for y in &b.terms {
            terms.push(PolyExpTerm {
                coeff: x.coeff * y.coeff,
                power: x.power + y.power,
                exponent: x.exponent + y.exponent,
            });
        }
    }
    ExpSum { terms }.compact()
}

pub fn expsum_ordered_integral(g: &ExpSum) -> ExpSum {
    g.ordered_integral().compact()
}

/// Asymptotic TCL2 generator for an exponential bath:
/// `Σ_{c,f} T[c][f] Σ_k w_k/(r_k + iΩf)`.
pub fn tcl2_exponential(params: &SpinBosonParams, bath: &ExponentialBath) -> GeneratorMatrix {
    let k = SecondOrderKernel::new(params);
    let mut m = CMat4::zeros();
    for (ci, conj) in [false, true].into_iter().enumerate() {
        for (fi, f) in FREQS.iter().enumerate() {
            let s: C64 = bath
                .modes_of(conj)
                .iter()
                .map(|md| md.weight / (md.rate + C64::new(0.0, params.omega * *f as f64)))
                .sum();
            m += k.t[ci][fi] * s;
        }
    }
    GeneratorMatrix {
        order: 2,
        t: TimeTag::Asymptotic,
        m: m.map(|z| z.re),
    }
}

/// Index of the lag-2 endpoints (in `s₁..s₃`) and the single variable touched
/// by lag 1, for each pairing.
fn lag_structure(p: usize) -> (usize, [Option<usize>; 2]) {
    let [(a, b), (c, d)] = PAIRINGS[p];
    debug_assert_eq!(a, 0);
    let var = |k: usize| if k == 0 { None } else { Some(k - 1) };
    (b - 1, [var(c), var(d)])
}

/// `∫_{0≤s₁≤s₂≤s₃≤t} X_{c₁}(d₁) X_{c₂}(d₂) e^{−iΩ f·s}` as an [`ExpSum`] in
/// `t`, summed over all mode pairs, reduced to its asymptotics.
fn pairing_asymptotics(p: usize, modes: [&[ExpMode]; 2], freq: [i32; 3], omega: f64) -> Asymptotics {
    let (lag1_var, [lo, hi]) = lag_structure(p);
    let g_a = ExpSum::from_modes(modes[0]);
    let mut constant = C64::new(0.0, 0.0);
    let mut secular = Vec::new();
    for mb in modes[1] {
        // e^{−r_b (s_hi − s_lo)}
        let mut e = [0usize; 3].map(|_| C64::new(0.0, 0.0));
        for (k, f) in freq.iter().enumerate() {
            e[k] = C64::new(0.0, -omega * *f as f64);
        }
        if let Some(lo) = lo {
            e[lo] += mb.rate;
        }
        if let Some(hi) = hi {
            e[hi] -= mb.rate;
        }
        let factor = |k: usize| -> ExpSum {
            if k == lag1_var {
                g_a.shift(e[k])
            } else {
                ExpSum::exp(C64::new(1.0, 0.0), e[k])
            }
        };
        let mut h = factor(0).ordered_integral();
        h = expsum_mul(&h, &factor(1)).ordered_integral();
        h = expsum_mul(&h, &factor(2)).ordered_integral();
        let asym = h.asymptotics();
        constant += asym.constant * mb.weight;
        secular.extend(asym.secular.into_iter().map(|t| PolyExpTerm {
            coeff: t.coeff * mb.weight,
            ..t
        }));
    }
    Asymptotics {
        constant,
        secular: ExpSum { terms: secular }.compact().terms,
    }
}

/// Asymptotic TCL4 generator for an exponential bath by exact ordered-time
/// integration of every kernel term. Non-decaying contributions of the
/// individual cumulant pieces must cancel; a residue above `1e-10` of the
/// result is an internal-consistency error.
pub fn tcl4_drude_matsubara(params: &SpinBosonParams, bath: &ExponentialBath) -> Result<GeneratorMatrix> {
    let k = FourthOrderKernel::new(params);
    let modes = [bath.modes_of(false), bath.modes_of(true)];
    let key = |t: &KernelTerm| (t.pairing, t.conj, t.freq);
    let mut keys: Vec<_> = k.full.iter().chain(&k.product).map(key).collect();
    keys.sort();
    keys.dedup();
    let tensor = |list: &[KernelTerm], kk| list.iter().find(|t| key(t) == kk).map_or(CMat4::zeros(), |t| t.t);

    let parts: Vec<(CMat4, Vec<(u32, C64, CMat4)>)> = keys
        .par_iter()
        .map(|&kk| {
            let t = tensor(&k.full, kk) - tensor(&k.product, kk);
            let (p, conj, freq) = kk;
            let asym = pairing_asymptotics(
                p,
                [&modes[conj[0] as usize], &modes[conj[1] as usize]],
                freq,
                params.omega,
            );
            let sec = asym
                .secular
                .iter()
                .map(|s| (s.power, s.exponent, t * s.coeff))
                .collect();
            (t * asym.constant, sec)
        })
        .collect();

    let mut m = CMat4::zeros();
    let mut secular: Vec<(u32, C64, CMat4)> = Vec::new();
    for (c, s) in parts {
        m += c;
        secular.extend(s);
    }
    secular.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.re.total_cmp(&b.1.re))
            .then(a.1.im.total_cmp(&b.1.im))
    });
    let mut merged: Vec<(u32, C64, CMat4)> = Vec::new();
    for s in secular {
        match merged.last_mut() {
            Some(last) if last.0 == s.0 && (last.1 - s.1).norm() <= EXP_EPS => last.2 += s.2,
            _ => merged.push(s),
        }
    }
    let scale = m.norm();
    if let Some(worst) = merged.iter().max_by(|a, b| a.2.norm().total_cmp(&b.2.norm())) {
        if worst.2.norm() > 1e-10 * scale {
            return Err(Error::Consistency(format!(
                "secular term t^{} e^({}t) does not cancel: residue {:e} vs generator norm {scale:e}",
                worst.0,
                worst.1,
                worst.2.norm()
            )));
        }
    }
    Ok(GeneratorMatrix {
        order: 4,
        t: TimeTag::Asymptotic,
        m: m.map(|z| z.re),
    })
}

/// `(F′ − X)/F′` over the eight independent entries.
pub fn relative_difference(reference: &GeneratorMatrix, x: &GeneratorMatrix) -> [f64; 8] {
    let r = reference.independent_entries();
    let v = x.independent_entries();
    let mut e = [0.0; 8];
    for k in 0..8 {
        e[k] = (r[k] - v[k]) / r[k];
    }
    e
}

/// Least-squares slope of `log|y|` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
