//! One-dimensional quadrature building blocks: adaptive Gauss–Kronrod,
//! Gauss–Legendre and tanh–sinh node sets, Wynn's epsilon extrapolation and a
//! half-line Fourier integrator built from them.

use std::collections::BinaryHeap;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995657163025808080735527280689003,
    0.973906528517171720077964012084452,
    0.930157491355708226001207180059508,
    0.865063366688984510732096688423493,
    0.780817726586416897063717578345042,
    0.679409568299024406234327365114874,
    0.562757134668604683339000099272694,
    0.433395394129247190799265943165784,
    0.294392862701460198131126603103866,
    0.148874338981631210884826001129720,
    0.000000000000000000000000000000000,
];

const WGK: [f64; 11] = [
    0.011694638867371874278064396062192,
    0.032558162307964727478818972459390,
    0.054755896574351996031381300244580,
    0.075039674810919952767043140916190,
    0.093125454583697605535065465083366,
    0.109387158802297641899210590325805,
    0.123491976262065851077600525138579,
    0.134709217311473325928054001771707,
    0.142775938577060080797094273138717,
    0.147739104901338491374841515972068,
    0.149445554002916905664936468389821,
];

const WG: [f64; 5] = [
    0.066671344308688137593568809893332,
    0.149451349150580593145776339657697,
    0.219086362515982043995534934228163,
    0.269266719309996355091226921569469,
    0.295524224714752870173892994651146,
];

/// Single 21-point Kronrod rule on `[a, b]`, returning `(integral, error estimate)`.
pub fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let (v, e, _) = gk21_abs(f, a, b);
    (v, e)
}

/// [`gk21`] plus the Kronrod estimate of `∫|f|`.
fn gk21_abs<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let x = half * XGK[j];
        let f1 = f(center - x);
        let f2 = f(center + x);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let result = res_k * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (result, err, res_abs)
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
    abs: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Tolerances for adaptive quadrature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    /// Number of bath frequency scales integrated directly before the
    /// oscillatory tail is handed to extrapolation.
    pub tail_start: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-15,
            rel_tol: 1e-13,
            max_subdivisions: 2000,
            tail_start: 40.0,
        }
    }
}

/// Adaptive Gauss–Kronrod integration over `[a, b]` with optional interior
/// breakpoints. Returns `(integral, estimated error)`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: &F, breakpoints: &[f64], cfg: &QuadratureConfig) -> Result<(f64, f64)> {
    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in breakpoints.windows(2) {
        if w[1] == w[0] {
            continue;
        }
        let (v, e, r) = gk21_abs(f, w[0], w[1]);
        total += v;
        total_err += e;
        heap.push(Segment {
            a: w[0],
            b: w[1],
            value: v,
            err: e,
            abs: r,
        });
    }
    let mut n = 0;
    while total_err > cfg.abs_tol.max(cfg.rel_tol * total.abs()) {
        if n >= cfg.max_subdivisions {
            // Round-off floor: accept if the remaining error is already at
            // the level of rounding in ∫|f|.
            if total_err <= 1e3 * f64::EPSILON * heap.iter().map(|s| s.abs).sum::<f64>() {
                break;
            }
            return Err(Error::Quadrature(format!(
                "adaptive Gauss-Kronrod hit {} subdivisions (value {total:e}, error {total_err:e})",
                cfg.max_subdivisions
            )));
        }
        let seg = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b {
            heap.push(seg);
            break;
        }
        let (v1, e1, r1) = gk21_abs(f, seg.a, mid);
        let (v2, e2, r2) = gk21_abs(f, mid, seg.b);
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.err;
        heap.push(Segment {
            a: seg.a,
            b: mid,
            value: v1,
            err: e1,
            abs: r1,
        });
        heap.push(Segment {
            a: mid,
            b: seg.b,
            value: v2,
            err: e2,
            abs: r2,
        });
        n += 1;
    }
    // Re-sum to shed the drift of incremental updates.
    let total: f64 = heap.iter().map(|s| s.value).sum();
    let err: f64 = heap.iter().map(|s| s.err).sum();
    Ok((total, err))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// A node of a rule on `[0, 1]` that also carries `1 - x` computed without
/// cancellation.
#[derive(Debug, Clone, Copy)]
pub struct UnitNode {
    pub x: f64,
    pub xc: f64,
    pub w: f64,
}

/// Tanh–sinh (double exponential) rule on `[0, 1]` with step `h`.
/// Handles integrable endpoint singularities with near-exponential convergence.
pub fn tanh_sinh_unit(h: f64) -> Vec<UnitNode> {
    let mut nodes = Vec::new();
    let mut k: i64 = 0;
    loop {
        let tau = k as f64 * h;
        let u = FRAC_PI_2 * tau.sinh();
        // x = 1/(1+e^{-2u}), 1-x = 1/(1+e^{2u})
        let x = 1.0 / (1.0 + (-2.0 * u).exp());
        let xc = 1.0 / (1.0 + (2.0 * u).exp());
        let ch = u.cosh();
        let w = h * FRAC_PI_2 * tau.cosh() / (2.0 * ch * ch);
        if w < 1e-300 || xc == 0.0 {
            break;
        }
        if k == 0 {
            nodes.push(UnitNode { x, xc, w });
        } else {
            nodes.push(UnitNode { x, xc, w });
            nodes.push(UnitNode { x: xc, xc: x, w });
        }
        if w < 1e-22 {
            break;
        }
        k += 1;
    }
    nodes
}

/// Gauss–Legendre rule mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<UnitNode> {
    let (x, w) = gauss_legendre(n);
    x.iter()
        .zip(&w)
        .map(|(&x, &w)| UnitNode {
            x: 0.5 * (1.0 + x),
            xc: 0.5 * (1.0 - x),
            w: 0.5 * w,
        })
        .collect()
}

/// Wynn's epsilon algorithm applied to a sequence of partial sums; returns the
/// best estimate from the last complete even column.
pub fn wynn_epsilon(partial_sums: &[f64]) -> f64 {
    let n = partial_sums.len();
    if n < 3 {
        return *partial_sums.last().unwrap_or(&0.0);
    }
    let mut prev = vec![0.0; n + 1];
    let mut cur: Vec<f64> = partial_sums.to_vec();
    let mut best = cur[n - 1];
    let mut col = 0;
    while cur.len() > 1 {
        let mut next = Vec::with_capacity(cur.len() - 1);
        let mut broken = false;
        for j in 0..cur.len() - 1 {
            let d = cur[j + 1] - cur[j];
            if d == 0.0 || !d.is_finite() {
                broken = true;
                break;
            }
            next.push(prev[j + 1] + 1.0 / d);
        }
        if broken {
            break;
        }
        col += 1;
        prev = cur;
        cur = next;
        if col % 2 == 0 && cur.last().is_some_and(|v| v.is_finite()) {
            best = *cur.last().unwrap();
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trig {
    Sin,
    Cos,
}

/// How the amplitude `g(ω)` of a Fourier integrand decays.
#[derive(Debug, Clone, Copy)]
pub enum Decay {
    /// `g` is negligible beyond the given frequency.
    Compact(f64),
    /// Algebraic decay; the oscillatory tail is summed cycle by cycle and
    /// extrapolated.
    Algebraic,
}

/// `∫₀^∞ g(ω) sin(ωt) dω` or the cosine analogue, for `t > 0`.
///
/// `scale` is the characteristic frequency of `g`, used to place breakpoints.
pub fn fourier_half_line<F: Fn(f64) -> f64>(
    g: &F,
    t: f64,
    trig: Trig,
    scale: f64,
    decay: Decay,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("fourier_half_line requires t > 0, got {t}")));
    }
    let integrand = |w: f64| {
        let (s, c) = (w * t).sin_cos();
        g(w) * if trig == Trig::Sin { s } else { c }
    };
    let half = PI / t;
    let offset = if trig == Trig::Sin { 0.0 } else { 0.5 };
    let zero = |k: f64| (k + offset) * half;

    let body_end = match decay {
        Decay::Compact(w) => w,
        Decay::Algebraic => {
            let k = (cfg.tail_start * scale / half - offset).ceil().max(1.0);
            zero(k)
        }
    };
    let mut bps = vec![0.0];
    let mut s = scale / 64.0;
    while s < body_end.min(32.0 * scale) {
        bps.push(s);
        s *= 2.0;
    }
    let mut k = 0.0;
    let cycles = body_end / half;
    let stride = (cycles / 2000.0).ceil().max(1.0);
    loop {
        let z = zero(k);
        if z >= body_end {
            break;
        }
        if z > 0.0 {
            bps.push(z);
        }
        k += stride;
    }
    bps.push(body_end);
    bps.sort_by(f64::total_cmp);
    bps.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * body_end);
    let (body, _) = integrate_adaptive(&integrand, &bps, cfg)?;
    let Decay::Algebraic = decay else {
        return Ok(body);
    };

    let k0 = ((body_end / half) - offset).round();
    let mut sums = Vec::with_capacity(128);
    let mut acc = body;
    let mut last_est = f64::NAN;
    let mut stable = 0;
    let max_cycles = 400;
    for c in 0..max_cycles {
        let a = zero(k0 + c as f64);
        let b = zero(k0 + c as f64 + 1.0);
        let (v, _) = integrate_adaptive(&integrand, &[a, b], cfg)?;
        acc += v;
        sums.push(acc);
        if sums.len() >= 6 {
            let est = wynn_epsilon(&sums);
            let tol = cfg.abs_tol.max(cfg.rel_tol * est.abs());
            if (est - last_est).abs() <= tol {
                stable += 1;
                if stable >= 2 {
                    return Ok(est);
                }
            } else {
                stable = 0;
            }
            last_est = est;
        }
    }
    let est = wynn_epsilon(&sums);
    if (est - last_est).abs() <= 1e-9 * est.abs().max(1e-300) {
        return Ok(est);
    }
    Err(Error::Quadrature(format!(
        "oscillatory tail did not converge at t={t} after {max_cycles} cycles"
    )))
}
