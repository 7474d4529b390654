//! Hierarchical equations of motion for the qubit coupled through `λA` to a
//! bath with exponential correlation modes `C(t) = Σ c_k e^{−ν_k t}`.
//!
//! Scaled auxiliary operators `ρ̃_n = ρ_n / Π_k √(n_k! |c_k|^{n_k})` obey
//!
//! ```text
//! ρ̃̇_n = −i[H, ρ̃_n] − Σ n_k ν_k ρ̃_n
//!        − iλ Σ_k √((n_k+1)|c_k|) [A, ρ̃_{n+e_k}]
//!        − iλ Σ_k √(n_k/|c_k|) (c_k A ρ̃_{n−e_k} − c̄_k ρ̃_{n−e_k} A).
//! ```
//!
//! Propagation is ETDRK4 with the damping and free precession (diagonal in the
//! matrix-element basis) treated exactly.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::expbath::{drude_modes_resummed, ExponentialBath};
use crate::system::{bloch_from_density, DensityMatrix, Mat2, SpinBosonParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Terminator {
    /// Auxiliaries beyond the truncation depth are set to zero.
    Truncate,
    /// Ishizaki–Tanimura closure: the first dropped tier is slaved to its
    /// parent.
    IshizakiTanimura,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeomConfig {
    pub n_matsubara: usize,
    pub depth: usize,
    /// ETDRK4 step.
    pub step: f64,
    pub terminator: Terminator,
    /// Add the dropped Matsubara tail as a Markovian `−λ²Δ[A,[A,·]]` term.
    pub delta_correction: bool,
}

impl Default for HeomConfig {
    fn default() -> Self {
        Self {
            n_matsubara: 32,
            depth: 2,
            step: 0.05,
            terminator: Terminator::Truncate,
            delta_correction: false,
        }
    }
}

impl HeomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.depth > 8 {
            return Err(Error::Config(format!(
                "HEOM depth must be in 1..=8, got {}",
                self.depth
            )));
        }
        if self.n_matsubara > 250 {
            return Err(Error::Config(format!(
                "at most 250 Matsubara terms supported, got {}",
                self.n_matsubara
            )));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!("HEOM step must be > 0, got {}", self.step)));
        }
        Ok(())
    }

    /// Drude bath with this configuration's Matsubara count.
    pub fn drude_bath(&self, gamma: f64, lambda_c: f64, beta: f64) -> Result<ExponentialBath> {
        drude_modes_resummed(gamma, lambda_c, beta, self.n_matsubara)
    }
}

/// Multi-index of mode occupations, stored as a sorted list of mode labels
/// packed into a `u64` (one byte per quantum, label `k + 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdoIndex(u64);

impl AdoIndex {
    pub const ROOT: AdoIndex = AdoIndex(0);

    fn labels(self) -> impl Iterator<Item = usize> {
        let mut key = self.0;
        std::iter::from_fn(move || {
            if key == 0 {
                None
            } else {
                let l = (key & 0xff) as usize - 1;
                key >>= 8;
                Some(l)
            }
        })
    }

    fn from_labels(labels: &[usize]) -> Self {
        let mut key = 0u64;
        for (i, l) in labels.iter().enumerate() {
            key |= ((l + 1) as u64) << (8 * i);
        }
        AdoIndex(key)
    }

    pub fn depth(self) -> usize {
        self.labels().count()
    }

    pub fn occupation(self, k: usize) -> usize {
        self.labels().filter(|l| *l == k).count()
    }

    /// Occupation numbers for `n_modes` modes.
    pub fn occupations(self, n_modes: usize) -> Vec<usize> {
        let mut n = vec![0; n_modes];
        for l in self.labels() {
            n[l] += 1;
        }
        n
    }

    fn with(self, k: usize) -> Self {
        let mut l: Vec<usize> = self.labels().collect();
        let pos = l.partition_point(|x| *x <= k);
        l.insert(pos, k);
        Self::from_labels(&l)
    }

    fn without(self, k: usize) -> Self {
        let mut l: Vec<usize> = self.labels().collect();
        let pos = l.iter().position(|x| *x == k).expect("mode present");
        l.remove(pos);
        Self::from_labels(&l)
    }
}

/// All multi-indices with depth ≤ L, ordered by depth, and their neighbours.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub n_modes: usize,
    pub depth: usize,
    pub indices: Vec<AdoIndex>,
    lookup: HashMap<AdoIndex, u32>,
    /// For ADOs below the truncation depth: `n_modes` entries each.
    up_start: Vec<u32>,
    up: Vec<u32>,
    down_start: Vec<u32>,
    /// `(mode, neighbour)`.
    down: Vec<(u32, u32)>,
}

impl Hierarchy {
    pub fn new(n_modes: usize, depth: usize) -> Result<Self> {
        if n_modes > 254 || depth > 8 {
            return Err(Error::Config(format!(
                "hierarchy too large: {n_modes} modes, depth {depth}"
            )));
        }
        let mut indices = vec![AdoIndex::ROOT];
        let mut tier = vec![(AdoIndex::ROOT, 0usize)];
        for _ in 0..depth {
            let mut next = Vec::new();
            for (idx, min_mode) in &tier {
                for k in *min_mode..n_modes {
                    next.push((idx.with(k), k));
                }
            }
            indices.extend(next.iter().map(|p| p.0));
            tier = next;
        }
        let lookup: HashMap<AdoIndex, u32> = indices.iter().enumerate().map(|(i, x)| (*x, i as u32)).collect();
        let mut up_start = Vec::with_capacity(indices.len() + 1);
        let mut up = Vec::new();
        let mut down_start = Vec::with_capacity(indices.len() + 1);
        let mut down = Vec::new();
        for idx in &indices {
            up_start.push(up.len() as u32);
            down_start.push(down.len() as u32);
            if idx.depth() < depth {
                for k in 0..n_modes {
                    up.push(lookup[&idx.with(k)]);
                }
            }
            let mut labels: Vec<usize> = idx.labels().collect();
            labels.dedup();
            for k in labels {
                down.push((k as u32, lookup[&idx.without(k)]));
            }
        }
        up_start.push(up.len() as u32);
        down_start.push(down.len() as u32);
        Ok(Self {
            n_modes,
            depth,
            indices,
            lookup,
            up_start,
            up,
            down_start,
            down,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn position(&self, idx: AdoIndex) -> Option<usize> {
        self.lookup.get(&idx).map(|i| *i as usize)
    }
}

/// Flat storage of all scaled ADOs, four complex entries each in the order
/// `(00, 01, 10, 11)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyState {
    pub data: Vec<C64>,
}

impl HierarchyState {
    pub fn ado(&self, i: usize) -> Mat2 {
        let d = &self.data[4 * i..4 * i + 4];
        Mat2::new(d[0], d[1], d[2], d[3])
    }

    pub fn physical(&self) -> DensityMatrix {
        let m = self.ado(0);
        // Symmetrise away round-off so the result passes the Hermiticity check.
        DensityMatrix((m + m.adjoint()) * C64::from(0.5))
    }
}

/// Diagnostics of a hierarchy state, suitable for JSON export.
#[derive(Debug, Clone, Serialize)]
pub struct HeomDiagnostics {
    pub n_ados: usize,
    pub n_modes: usize,
    pub depth: usize,
    /// Largest Frobenius norm of any scaled ADO per tier.
    pub max_norm_per_tier: Vec<f64>,
}

struct Coupling {
    /// `λ √((n_k+1)|c_k|)` per up-neighbour entry.
    up_w: Vec<f64>,
    /// `λ √(n_k/|c_k|) c_k` per down-neighbour entry.
    down_w: Vec<C64>,
    /// Terminator sums `Σ_k λ²(n_k+1) c_k/(Γ_n+ν_k)` per ADO (zero when unused).
    term_c: Vec<C64>,
    term_cbar: Vec<C64>,
}

pub struct HeomSolver {
    pub hierarchy: Hierarchy,
    a: [f64; 4],
    omega: f64,
    coupling: Coupling,
    /// Damping class per ADO and the distinct damping rates.
    class: Vec<u32>,
    rates: Vec<f64>,
    step: f64,
    /// `λ²Δ` of the δ-correction, zero when disabled.
    delta: f64,
}

const ELEMENT_FREQ: [f64; 4] = [0.0, 1.0, -1.0, 0.0];

fn mat_a_left(a: &[f64; 4], x: &[C64; 4]) -> [C64; 4] {
    [
        a[0] * x[0] + a[1] * x[2],
        a[0] * x[1] + a[1] * x[3],
        a[2] * x[0] + a[3] * x[2],
        a[2] * x[1] + a[3] * x[3],
    ]
}

fn mat_a_right(x: &[C64; 4], a: &[f64; 4]) -> [C64; 4] {
    [
        x[0] * a[0] + x[1] * a[2],
        x[0] * a[1] + x[1] * a[3],
        x[2] * a[0] + x[3] * a[2],
        x[2] * a[1] + x[3] * a[3],
    ]
}

/// `φ₁, φ₂, φ₃` at `z`, by series near the origin.
fn phis(z: C64) -> [C64; 3] {
    if z.norm() < 1.0 {
        let mut out = [C64::new(0.0, 0.0); 3];
        for (k, o) in out.iter_mut().enumerate() {
            // Σ_m z^m/(m+k+1)!
            let mut term = C64::new(1.0, 0.0);
            for j in 2..=(k + 1) {
                term /= j as f64;
            }
            let mut sum = term;
            for m in 1..40 {
                term *= z / (m + k + 1) as f64;
                sum += term;
            }
            *o = sum;
        }
        out
    } else {
        let e = z.exp();
        let p1 = (e - 1.0) / z;
        let p2 = (e - 1.0 - z) / (z * z);
        let p3 = (e - 1.0 - z - z * z * 0.5) / (z * z * z);
        [p1, p2, p3]
    }
}

/// ETDRK4 coefficients for one diagonal value.
#[derive(Clone, Copy)]
struct EtdCoeffs {
    e: C64,
    e2: C64,
    q: C64,
    f1: C64,
    f2: C64,
    f3: C64,
}

impl EtdCoeffs {
    fn new(l: C64, h: f64) -> Self {
        let z = l * h;
        let [p1, p2, p3] = phis(z);
        let half = phis(z * 0.5);
        Self {
            e: z.exp(),
            e2: (z * 0.5).exp(),
            q: half[0] * (0.5 * h),
            f1: (p1 - p2 * 3.0 + p3 * 4.0) * h,
            f2: (p2 - p3 * 2.0) * h,
            f3: (p3 * 4.0 - p2) * h,
        }
    }
}

impl HeomSolver {
    pub fn new(params: &SpinBosonParams, bath: &ExponentialBath, cfg: &HeomConfig) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if bath.modes.iter().any(|m| m.rate.im != 0.0 || !(m.rate.re > 0.0)) {
            return Err(Error::Config("HEOM needs real positive mode rates".into()));
        }
        let n_modes = bath.modes.len();
        let hierarchy = Hierarchy::new(n_modes, cfg.depth)?;
        let lam = params.lambda;
        let c: Vec<C64> = bath.modes.iter().map(|m| m.weight).collect();
        let nu: Vec<f64> = bath.modes.iter().map(|m| m.rate.re).collect();
        let n = hierarchy.len();

        let mut up_w = Vec::with_capacity(hierarchy.up.len());
        let mut down_w = Vec::with_capacity(hierarchy.down.len());
        let mut term_c = vec![C64::new(0.0, 0.0); n];
        let mut term_cbar = vec![C64::new(0.0, 0.0); n];
        let mut class = Vec::with_capacity(n);
        let mut rates = Vec::new();
        let mut rate_class: HashMap<u64, u32> = HashMap::new();
        for (i, idx) in hierarchy.indices.iter().enumerate() {
            let occ = |k: usize| idx.occupation(k) as f64;
            if idx.depth() < cfg.depth {
                for k in 0..n_modes {
                    up_w.push(lam * ((occ(k) + 1.0) * c[k].norm()).sqrt());
                }
            }
            let (d0, d1) = (hierarchy.down_start[i] as usize, hierarchy.down_start[i + 1] as usize);
            for &(k, _) in &hierarchy.down[d0..d1] {
                let k = k as usize;
                let w = if c[k].norm() == 0.0 {
                    C64::new(0.0, 0.0)
                } else {
                    c[k] * (lam * (occ(k) / c[k].norm()).sqrt())
                };
                down_w.push(w);
            }
            let gamma: f64 = idx.labels().map(|k| nu[k]).sum();
            if idx.depth() == cfg.depth && cfg.terminator == Terminator::IshizakiTanimura {
                for k in 0..n_modes {
                    let f = lam * lam * (occ(k) + 1.0) / (gamma + nu[k]);
                    term_c[i] += c[k] * f;
                    term_cbar[i] += c[k].conj() * f;
                }
            }
            let next = rates.len() as u32;
            let cl = *rate_class.entry(gamma.to_bits()).or_insert(next);
            if cl == next {
                rates.push(gamma);
            }
            class.push(cl);
        }
        let (a1, a3) = (params.a1(), params.a3());
        Ok(Self {
            hierarchy,
            a: [a3, -a1, -a1, -a3],
            omega: params.omega,
            coupling: Coupling {
                up_w,
                down_w,
                term_c,
                term_cbar,
            },
            class,
            rates,
            step: cfg.step,
            delta: if cfg.delta_correction {
                lam * lam * bath.remainder
            } else {
                0.0
            },
        })
    }

    pub fn initial_state(&self, rho0: &DensityMatrix) -> HierarchyState {
        let mut data = vec![C64::new(0.0, 0.0); 4 * self.hierarchy.len()];
        let m = rho0.0;
        data[..4].copy_from_slice(&[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]);
        HierarchyState { data }
    }

    fn diagonal(&self, i: usize, e: usize) -> C64 {
        C64::new(-self.rates[self.class[i] as usize], -ELEMENT_FREQ[e] * self.omega)
    }

    /// Off-diagonal (coupling and terminator) part of the right-hand side.
    fn coupling_rhs(&self, y: &[C64], out: &mut [C64]) {
        let h = &self.hierarchy;
        let a = &self.a;
        let cp = &self.coupling;
        let mi = C64::new(0.0, -1.0);
        out.par_chunks_mut(4).enumerate().for_each(|(i, o)| {
            let mut acc = [C64::new(0.0, 0.0); 4];
            let (u0, u1) = (h.up_start[i] as usize, h.up_start[i + 1] as usize);
            if u1 > u0 {
                let mut s = [C64::new(0.0, 0.0); 4];
                for (j, w) in h.up[u0..u1].iter().zip(&cp.up_w[u0..u1]) {
                    let j = *j as usize * 4;
                    for e in 0..4 {
                        s[e] += y[j + e] * *w;
                    }
                }
                let l = mat_a_left(a, &s);
                let r = mat_a_right(&s, a);
                for e in 0..4 {
                    acc[e] += mi * (l[e] - r[e]);
                }
            }
            let (d0, d1) = (h.down_start[i] as usize, h.down_start[i + 1] as usize);
            if d1 > d0 {
                let mut p = [C64::new(0.0, 0.0); 4];
                let mut q = [C64::new(0.0, 0.0); 4];
                for (&(_, j), w) in h.down[d0..d1].iter().zip(&cp.down_w[d0..d1]) {
                    let j = j as usize * 4;
                    let wc = w.conj();
                    for e in 0..4 {
                        p[e] += y[j + e] * w;
                        q[e] += y[j + e] * wc;
                    }
                }
                let l = mat_a_left(a, &p);
                let r = mat_a_right(&q, a);
                for e in 0..4 {
                    acc[e] += mi * (l[e] - r[e]);
                }
            }
            let (tc, tcb) = (cp.term_c[i], cp.term_cbar[i]);
            if tc != C64::new(0.0, 0.0) || tcb != C64::new(0.0, 0.0) {
                // −[A, c A ρ − c̄ ρ A]
                let x = [y[4 * i], y[4 * i + 1], y[4 * i + 2], y[4 * i + 3]];
                let ax = mat_a_left(a, &x);
                let xa = mat_a_right(&x, a);
                let inner: [C64; 4] = std::array::from_fn(|e| ax[e] * tc - xa[e] * tcb);
                let l = mat_a_left(a, &inner);
                let r = mat_a_right(&inner, a);
                for e in 0..4 {
                    acc[e] -= l[e] - r[e];
                }
            }
            if self.delta != 0.0 {
                let x = [y[4 * i], y[4 * i + 1], y[4 * i + 2], y[4 * i + 3]];
                let l = mat_a_left(a, &x);
                let r = mat_a_right(&x, a);
                let inner: [C64; 4] = std::array::from_fn(|e| l[e] - r[e]);
                let l = mat_a_left(a, &inner);
                let r = mat_a_right(&inner, a);
                for e in 0..4 {
                    acc[e] -= (l[e] - r[e]) * self.delta;
                }
            }
            o.copy_from_slice(&acc);
        });
    }

    /// Full time derivative of every ADO.
    pub fn rhs(&self, state: &HierarchyState) -> HierarchyState {
        let mut out = vec![C64::new(0.0, 0.0); state.data.len()];
        self.coupling_rhs(&state.data, &mut out);
        for (i, o) in out.chunks_mut(4).enumerate() {
            for e in 0..4 {
                o[e] += self.diagonal(i, e) * state.data[4 * i + e];
            }
        }
        HierarchyState { data: out }
    }

    fn coefficients(&self, h: f64) -> Vec<[EtdCoeffs; 3]> {
        self.rates
            .iter()
            .map(|g| {
                let c = |w: f64| EtdCoeffs::new(C64::new(-g, -w * self.omega), h);
                [c(0.0), c(1.0), c(-1.0)]
            })
            .collect()
    }

    fn coeff_for<'a>(&self, table: &'a [[EtdCoeffs; 3]], i: usize, e: usize) -> &'a EtdCoeffs {
        let slot = match e {
            1 => 1,
            2 => 2,
            _ => 0,
        };
        &table[self.class[i] as usize][slot]
    }

    fn etdrk4_step(&self, y: &mut [C64], table: &[[EtdCoeffs; 3]], work: &mut [Vec<C64>; 5]) {
        let n = y.len();
        let [ny, a, na, nb, nc] = work;
        self.coupling_rhs(y, ny);
        a.par_chunks_mut(4).enumerate().for_each(|(i, o)| {
            for e in 0..4 {
                let c = self.coeff_for(table, i, e);
                o[e] = c.e2 * y[4 * i + e] + c.q * ny[4 * i + e];
            }
        });
        self.coupling_rhs(a, na);
        // b reuses nc as storage.
        nc.par_chunks_mut(4).enumerate().for_each(|(i, o)| {
            for e in 0..4 {
                let c = self.coeff_for(table, i, e);
                o[e] = c.e2 * y[4 * i + e] + c.q * na[4 * i + e];
            }
        });
        self.coupling_rhs(nc, nb);
        // c overwrites a.
        a.par_chunks_mut(4).enumerate().for_each(|(i, o)| {
            for e in 0..4 {
                let c = self.coeff_for(table, i, e);
                let k = 4 * i + e;
                o[e] = c.e2 * o[e] + c.q * (nb[k] * 2.0 - ny[k]);
            }
        });
        self.coupling_rhs(a, nc);
        debug_assert_eq!(n, nc.len());
        y.par_chunks_mut(4).enumerate().for_each(|(i, o)| {
            for e in 0..4 {
                let c = self.coeff_for(table, i, e);
                let k = 4 * i + e;
                o[e] = c.e * o[e] + c.f1 * ny[k] + c.f2 * 2.0 * (na[k] + nb[k]) + c.f3 * nc[k];
            }
        });
    }

    /// Advance `state` from `t0` through each of `times` (ascending, ≥ `t0`),
    /// recording the physical Bloch vector.
    pub fn propagate(&self, state: &mut HierarchyState, t0: f64, times: &[f64]) -> Result<Trajectory> {
        if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < t0) {
            return Err(Error::Domain(
                "HEOM sample times must be ascending and not before the start".into(),
            ));
        }
        let n = state.data.len();
        let mut work: [Vec<C64>; 5] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); n]);
        let mut tables: Vec<(u64, Vec<[EtdCoeffs; 3]>)> = Vec::new();
        let mut t = t0;
        let mut states = Vec::with_capacity(times.len());
        for &target in times {
            let span = target - t;
            if span > 0.0 {
                let steps = (span / self.step * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                let h = span / steps as f64;
                let pos = match tables.iter().position(|(b, _)| *b == h.to_bits()) {
                    Some(p) => p,
                    None => {
                        tables.push((h.to_bits(), self.coefficients(h)));
                        tables.len() - 1
                    }
                };
                for _ in 0..steps {
                    self.etdrk4_step(&mut state.data, &tables[pos].1, &mut work);
                }
                let norm: f64 = state.data[..4].iter().map(|z| z.norm_sqr()).sum();
                if !norm.is_finite() || norm > 1e6 {
                    return Err(Error::Integration(format!(
                        "HEOM state diverged by t = {target} (step {h}); the hierarchy is too stiff for this step, reduce it or check the ADO scaling"
                    )));
                }
                t = target;
            }
            states.push(bloch_from_density(&state.physical()));
        }
        Ok(Trajectory {
            times: times.to_vec(),
            states,
        })
    }

    pub fn diagnostics(&self, state: &HierarchyState) -> HeomDiagnostics {
        let mut max_norm = vec![0.0f64; self.hierarchy.depth + 1];
        for (i, idx) in self.hierarchy.indices.iter().enumerate() {
            let nrm = state.data[4 * i..4 * i + 4]
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                .sqrt();
            let d = idx.depth();
            max_norm[d] = max_norm[d].max(nrm);
        }
        HeomDiagnostics {
            n_ados: self.hierarchy.len(),
            n_modes: self.hierarchy.n_modes,
            depth: self.hierarchy.depth,
            max_norm_per_tier: max_norm,
        }
    }

    /// Stationary physical state from a dense solve of the full hierarchy with
    /// the trace condition replacing one equation. Limited to small
    /// hierarchies.
    pub fn steady_state(&self) -> Result<DensityMatrix> {
        let n = 4 * self.hierarchy.len();
        if n > 6000 {
            return Err(Error::Config(format!(
                "dense HEOM steady state limited to 6000 unknowns, got {n}"
            )));
        }
        let mut m = DMatrix::<C64>::zeros(n, n);
        let mut unit = HierarchyState {
            data: vec![C64::new(0.0, 0.0); n],
        };
        for j in 0..n {
            unit.data[j] = C64::new(1.0, 0.0);
            let col = self.rhs(&unit);
            for (i, v) in col.data.iter().enumerate() {
                m[(i, j)] = *v;
            }
            unit.data[j] = C64::new(0.0, 0.0);
        }
        for j in 0..n {
            m[(0, j)] = C64::new(0.0, 0.0);
        }
        m[(0, 0)] = C64::new(1.0, 0.0);
        m[(0, 3)] = C64::new(1.0, 0.0);
        let mut b = nalgebra::DVector::<C64>::zeros(n);
        b[0] = C64::new(1.0, 0.0);
        let x = m
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Singular("HEOM steady-state system is singular".into()))?;
        let rho = Mat2::new(x[0], x[1], x[2], x[3]);
        Ok(DensityMatrix((rho + rho.adjoint()) * C64::from(0.5)))
    }
}

/// Time derivative of every ADO (convenience wrapper).
pub fn heom_rhs(
    state: &HierarchyState,
    params: &SpinBosonParams,
    bath: &ExponentialBath,
    cfg: &HeomConfig,
) -> Result<HierarchyState> {
    let solver = HeomSolver::new(params, bath, cfg)?;
    if state.data.len() != 4 * solver.hierarchy.len() {
        return Err(Error::Domain("state does not match the hierarchy size".into()));
    }
    Ok(solver.rhs(state))
}

/// Physical-state trajectory starting from `rho0` with all auxiliaries zero.
pub fn propagate_heom(
    rho0: &DensityMatrix,
    params: &SpinBosonParams,
    bath: &ExponentialBath,
    cfg: &HeomConfig,
    times: &[f64],
) -> Result<Trajectory> {
    let solver = HeomSolver::new(params, bath, cfg)?;
    let mut state = solver.initial_state(rho0);
    solver.propagate(&mut state, 0.0, times)
}

/// Reference for like-for-like asymptotic comparisons: the hierarchy evolved
/// for `tau`, then sampled at `tau + t`.
#[derive(Debug, Clone)]
pub struct ShiftedReference {
    /// `σ(τ)`, the initial state handed to the TCL propagation.
    pub rho_tcl_init: DensityMatrix,
    /// `σ(t + τ)` at the requested `t`.
    pub trajectory: Trajectory,
    pub warnings: Vec<String>,
}

pub fn asymptotic_shift(
    rho_init: &DensityMatrix,
    tau: f64,
    params: &SpinBosonParams,
    bath: &ExponentialBath,
    cfg: &HeomConfig,
    times: &[f64],
) -> Result<ShiftedReference> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("tau must be >= 0, got {tau}")));
    }
    let mut warnings = Vec::new();
    let memory = bath
        .modes
        .iter()
        .map(|m| 1.0 / m.rate.re)
        .fold(0.0, f64::max)
        .max(bath.beta);
    if tau < 5.0 * memory {
        warnings.push(format!(
            "tau = {tau} is below 5 x max(1/Lambda, beta) = {}",
            5.0 * memory
        ));
    }
    let solver = HeomSolver::new(params, bath, cfg)?;
    let mut state = solver.initial_state(rho_init);
    solver.propagate(&mut state, 0.0, &[tau])?;
    let rho_tcl_init = state.physical();
    let shifted: Vec<f64> = times.iter().map(|t| t + tau).collect();
    let mut trajectory = solver.propagate(&mut state, tau, &shifted)?;
    trajectory.times = times.to_vec();
    Ok(ShiftedReference {
        rho_tcl_init,
        trajectory,
        warnings,
    })
}

/// Clip eigenvalues in `[−1e-10, 0)` to zero; reject larger negativity.
fn clipped_eigen(rho: &DensityMatrix) -> Result<(f64, f64)> {
    let [l0, l1] = rho.eigenvalues();
    if l0 < -1e-10 {
        return Err(Error::Domain(format!("state has negative eigenvalue {l0:e}")));
    }
    Ok((l0.max(0.0), l1.max(0.0)))
}

/// Uhlmann fidelity `Tr√(√ρ σ √ρ)`, via the qubit identity
/// `F² = Tr(ρσ) + 2√(det ρ det σ)`.
pub fn fidelity(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    let (a0, a1) = clipped_eigen(a)?;
    let (b0, b1) = clipped_eigen(b)?;
    let overlap = (a.0 * b.0).trace().re;
    let f2 = overlap + 2.0 * (a0 * a1 * b0 * b1).sqrt();
    Ok(f2.max(0.0).sqrt().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::propagate;
    use crate::system::{density_from_bloch, BlochVector};
    use crate::tcl::{free_generator_matrix, TimeTag};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn hierarchy_counts_and_neighbours() {
        let h = Hierarchy::new(5, 3).unwrap();
        assert_eq!(h.len(), 56); // C(8, 3)
        for (i, idx) in h.indices.iter().enumerate() {
            assert_eq!(h.position(*idx), Some(i));
            assert!(idx.depth() <= 3);
        }
        let idx = AdoIndex::ROOT.with(2).with(0).with(2);
        assert_eq!(idx.occupations(5), vec![1, 0, 2, 0, 0]);
        assert_eq!(idx.without(2).occupations(5), vec![1, 0, 1, 0, 0]);
        assert_eq!(Hierarchy::new(33, 2).unwrap().len(), 595);
    }

    #[test]
    fn phi_functions_continuous_across_branch() {
        for z in [c(0.999, 0.0), c(-0.3, 0.95), c(0.0, -0.999)] {
            let inside = phis(z);
            let outside = phis(z * (1.0 + 2e-3));
            for k in 0..3 {
                assert!((inside[k] - outside[k]).norm() < 1e-2 * inside[k].norm());
            }
        }
        let [p1, p2, p3] = phis(c(0.0, 0.0));
        assert!((p1 - 1.0).norm() < 1e-16 && (p2 - 0.5).norm() < 1e-16 && (p3 - 1.0 / 6.0).norm() < 1e-16);
    }

    #[test]
    fn decoupled_hierarchy_is_free_rotation() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.0, 1.0).unwrap();
        let bath = drude_modes_resummed(1.0, 1.0, 1.0, 3).unwrap();
        let times: Vec<f64> = (1..=20).map(|k| 0.5 * k as f64).collect();
        let h = propagate_heom(
            &DensityMatrix::plus(),
            &p,
            &bath,
            &HeomConfig {
                n_matsubara: 3,
                ..Default::default()
            },
            &times,
        )
        .unwrap();
        let exact = propagate(&BlochVector::new(1.0, 0.0, 0.0), &free_generator_matrix(&p), &times).unwrap();
        for (a, b) in h.states.iter().zip(&exact.states) {
            assert!((a.0 - b.0).amax() < 1e-8);
        }
    }

    #[test]
    fn gibbs_like_state_is_stationary_without_coupling() {
        let p = SpinBosonParams::new(1.0, 0.3, 0.0, 1.0).unwrap();
        let bath = drude_modes_resummed(1.0, 1.0, 1.0, 2).unwrap();
        let rho = density_from_bloch(&BlochVector::new(0.0, 0.0, -0.46));
        let tr = propagate_heom(
            &rho,
            &p,
            &bath,
            &HeomConfig {
                n_matsubara: 2,
                ..Default::default()
            },
            &[3.0, 7.0],
        )
        .unwrap();
        assert!(tr.states.iter().all(|v| (v.0[3] + 0.46).abs() < 1e-14));
    }

    #[test]
    fn trace_and_hermiticity_preserved() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.2, 1.0).unwrap();
        let bath = drude_modes_resummed(0.5, 1.0, 1.0, 4).unwrap();
        let cfg = HeomConfig {
            n_matsubara: 4,
            depth: 3,
            ..Default::default()
        };
        let solver = HeomSolver::new(&p, &bath, &cfg).unwrap();
        let mut s = solver.initial_state(&DensityMatrix::plus());
        let mut t0 = 0.0;
        for t in [5.0, 15.0, 30.0] {
            solver.propagate(&mut s, t0, &[t]).unwrap();
            t0 = t;
            let m = s.ado(0);
            assert!((m.trace() - 1.0).norm() < 1e-8);
            assert!((m - m.adjoint()).norm() < 1e-8);
        }
    }

    #[test]
    fn step_halving_converges() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.2, 1.0).unwrap();
        let bath = drude_modes_resummed(0.5, 1.0, 1.0, 3).unwrap();
        let run = |h: f64| {
            propagate_heom(
                &DensityMatrix::plus(),
                &p,
                &bath,
                &HeomConfig {
                    n_matsubara: 3,
                    depth: 3,
                    step: h,
                    ..Default::default()
                },
                &[10.0],
            )
            .unwrap()
            .states[0]
        };
        let (a, b, c) = (run(0.2), run(0.1), run(0.05));
        let (e1, e2) = ((a.0 - b.0).amax(), (b.0 - c.0).amax());
        assert!(e2 < 1e-5, "{e2}");
        assert!(e1 / e2 > 8.0, "{e1} {e2}");
    }

    #[test]
    fn rhs_matches_unscaled_equation_at_second_tier() {
        // ρ̇₀ for a state whose first-tier ADOs are set by hand, compared with
        // the unscaled form −i[H,ρ₀] − iλ Σ_k [A, ρ_{e_k}].
        let p = SpinBosonParams::new(1.1, 0.4, 0.3, 1.0).unwrap();
        let bath = drude_modes_resummed(0.5, 1.0, 1.0, 1).unwrap();
        let cfg = HeomConfig {
            n_matsubara: 1,
            depth: 1,
            ..Default::default()
        };
        let solver = HeomSolver::new(&p, &bath, &cfg).unwrap();
        let mut s = solver.initial_state(&DensityMatrix::plus());
        let x = [
            Mat2::new(c(0.1, 0.2), c(0.3, -0.1), c(-0.2, 0.05), c(0.4, 0.0)),
            Mat2::new(c(0.0, 0.1), c(0.2, 0.2), c(0.1, -0.3), c(-0.1, 0.1)),
        ];
        for (k, m) in x.iter().enumerate() {
            let i = solver.hierarchy.position(AdoIndex::ROOT.with(k)).unwrap();
            s.data[4 * i..4 * i + 4].copy_from_slice(&[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]);
        }
        let d = solver.rhs(&s);
        let h = crate::system::pauli(3) * C64::from(0.5 * p.omega);
        let a = p.coupling_operator();
        let rho = s.ado(0);
        let mut expect = (h * rho - rho * h) * c(0.0, -1.0);
        for (k, m) in x.iter().enumerate() {
            // unscaled ρ_{e_k} = √|c_k| ρ̃_{e_k}
            let un = m * C64::from(bath.modes[k].weight.norm().sqrt());
            expect += (a * un - un * a) * c(0.0, -p.lambda);
        }
        assert!((d.ado(0) - expect).norm() < 1e-14);
        // First tier, down coupling: −ν_k ρ_{e_k} − iλ (c_k A ρ₀ − c̄_k ρ₀ A), scaled by 1/√|c_k|.
        for k in 0..2 {
            let i = solver.hierarchy.position(AdoIndex::ROOT.with(k)).unwrap();
            let ck = bath.modes[k].weight;
            let un = (h * x[k] - x[k] * h) * c(0.0, -1.0) - x[k] * bath.modes[k].rate
                + (a * rho * ck - rho * a * ck.conj()) * (c(0.0, -p.lambda) / ck.norm().sqrt());
            assert!((d.ado(i) - un).norm() < 1e-14);
        }
    }

    #[test]
    fn fidelity_examples() {
        let zero = DensityMatrix::pure(c(1.0, 0.0), c(0.0, 0.0)).unwrap();
        let one = DensityMatrix::pure(c(0.0, 0.0), c(1.0, 0.0)).unwrap();
        let mixed = density_from_bloch(&BlochVector::maximally_mixed());
        assert!((fidelity(&zero, &zero).unwrap() - 1.0).abs() < 1e-15);
        assert!(fidelity(&zero, &one).unwrap().abs() < 1e-15);
        assert!((fidelity(&zero, &mixed).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let bad = density_from_bloch(&BlochVector::new(0.0, 0.0, 1.1));
        assert!(matches!(fidelity(&bad, &zero), Err(Error::Domain(_))));
    }

    #[test]
    fn fidelity_matches_eigendecomposition() {
        use nalgebra::Matrix2;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut state = || {
            let r: f64 = rng.gen_range(0.0..1.0);
            let (th, ph): (f64, f64) = (rng.gen_range(0.0..std::f64::consts::PI), rng.gen_range(0.0..6.28));
            density_from_bloch(&BlochVector::new(
                r * th.sin() * ph.cos(),
                r * th.sin() * ph.sin(),
                r * th.cos(),
            ))
        };
        let sqrtm = |m: Matrix2<C64>| {
            let e = m.symmetric_eigen();
            let d = Matrix2::from_diagonal(&e.eigenvalues.map(|l| C64::from(l.max(0.0).sqrt())));
            e.eigenvectors * d * e.eigenvectors.adjoint()
        };
        for _ in 0..20 {
            let (a, b) = (state(), state());
            let s = sqrtm(a.0);
            let oracle = sqrtm(s * b.0 * s).trace().re;
            let f = fidelity(&a, &b).unwrap();
            assert!((f - oracle).abs() < 1e-10);
            assert!((fidelity(&b, &a).unwrap() - f).abs() < 1e-14);
        }
    }

    #[test]
    fn shift_is_time_translation() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.2, 1.0).unwrap();
        let bath = drude_modes_resummed(0.5, 1.0, 1.0, 2).unwrap();
        let cfg = HeomConfig {
            n_matsubara: 2,
            depth: 2,
            step: 0.05,
            ..Default::default()
        };
        let zero = asymptotic_shift(&DensityMatrix::plus(), 0.0, &p, &bath, &cfg, &[1.0]).unwrap();
        assert_eq!(zero.rho_tcl_init, DensityMatrix::plus());
        assert!(!zero.warnings.is_empty());
        let sh = asymptotic_shift(&DensityMatrix::plus(), 4.0, &p, &bath, &cfg, &[1.0, 2.0]).unwrap();
        let direct = propagate_heom(&DensityMatrix::plus(), &p, &bath, &cfg, &[5.0, 6.0]).unwrap();
        for (a, b) in sh.trajectory.states.iter().zip(&direct.states) {
            assert!((a.0 - b.0).amax() < 1e-12);
        }
        let _ = TimeTag::Asymptotic;
    }

    #[test]
    fn steady_state_is_stationary() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.3, 1.0).unwrap();
        let bath = drude_modes_resummed(0.5, 1.0, 1.0, 2).unwrap();
        let cfg = HeomConfig {
            n_matsubara: 2,
            depth: 3,
            step: 0.05,
            ..Default::default()
        };
        let solver = HeomSolver::new(&p, &bath, &cfg).unwrap();
        let ss = solver.steady_state().unwrap();
        let late = propagate_heom(&DensityMatrix::plus(), &p, &bath, &cfg, &[400.0]).unwrap();
        assert!((late.states[0].0 - bloch_from_density(&ss).0).amax() < 1e-8);
    }

    #[test]
    fn matches_dense_exponential() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.2, 1.0).unwrap();
        let bath = drude_modes_resummed(0.5, 1.0, 1.0, 3).unwrap();
        let cfg = HeomConfig {
            n_matsubara: 3,
            depth: 3,
            step: 0.025,
            ..Default::default()
        };
        let solver = HeomSolver::new(&p, &bath, &cfg).unwrap();
        let n = 4 * solver.hierarchy.len();
        let mut m = DMatrix::<C64>::zeros(n, n);
        let mut unit = HierarchyState {
            data: vec![c(0.0, 0.0); n],
        };
        for j in 0..n {
            unit.data[j] = c(1.0, 0.0);
            for (i, v) in solver.rhs(&unit).data.iter().enumerate() {
                m[(i, j)] = *v;
            }
            unit.data[j] = c(0.0, 0.0);
        }
        let y0 = solver.initial_state(&DensityMatrix::plus());
        let exact = (m * C64::from(10.0)).exp() * nalgebra::DVector::from_vec(y0.data.clone());
        let mut st = y0;
        solver.propagate(&mut st, 0.0, &[10.0]).unwrap();
        let err = (0..4).map(|k| (st.data[k] - exact[k]).norm()).fold(0.0, f64::max);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn matsubara_remainder_improves_short_truncation() {
        let p = SpinBosonParams::new(1.6, 0.785, 0.4, 1.0).unwrap();
        let run = |n: usize, delta: bool| {
            let cfg = HeomConfig {
                n_matsubara: n,
                depth: 3,
                delta_correction: delta,
                ..Default::default()
            };
            let bath = cfg.drude_bath(1.0, 1.0, 1.0).unwrap();
            propagate_heom(&DensityMatrix::plus(), &p, &bath, &cfg, &[4.0])
                .unwrap()
                .states[0]
        };
        let reference = run(12, true);
        let plain = (run(1, false).0 - reference.0).amax();
        let corrected = (run(1, true).0 - reference.0).amax();
        assert!(corrected < 0.5 * plain, "{corrected} {plain}");
    }

    #[test]
    fn depth_convergence_at_benchmark_parameters() {
        let p = SpinBosonParams::new(1.6, 0.785, (0.02f64).sqrt(), 1.0).unwrap();
        let run = |l: usize| {
            let cfg = HeomConfig {
                n_matsubara: 8,
                depth: l,
                step: 0.1,
                ..Default::default()
            };
            let bath = cfg.drude_bath(1.0, 1.0, 1.0).unwrap();
            propagate_heom(&DensityMatrix::plus(), &p, &bath, &cfg, &[10.0])
                .unwrap()
                .states[0]
        };
        let (v3, v4, v5) = (run(3), run(4), run(5));
        let (d34, d45) = ((v3.0 - v4.0).amax(), (v4.0 - v5.0).amax());
        assert!(d45 < 1e-4, "{d45}");
        assert!(d45 < 0.2 * d34, "{d34} {d45}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn physical_state_stays_hermitian_with_unit_trace(
                w in 0.5f64..2.0, th in 0.0f64..1.5, lambda in 0.0f64..0.3, beta in 0.5f64..2.0,
                lc in 0.5f64..2.0, n in 0usize..3, depth in 1usize..4, x in -0.6f64..0.6, y in -0.6f64..0.6,
            ) {
                let p = SpinBosonParams::new(w, th, lambda, beta).unwrap();
                let cfg = HeomConfig { n_matsubara: n, depth, ..Default::default() };
                let bath = cfg.drude_bath(1.0, lc, beta).unwrap();
                let solver = HeomSolver::new(&p, &bath, &cfg).unwrap();
                let mut state = solver.initial_state(&density_from_bloch(&BlochVector::new(x, y, 0.2)));
                solver.propagate(&mut state, 0.0, &[1.0, 3.0]).unwrap();
                let m = state.ado(0);
                prop_assert!((m.trace() - C64::new(1.0, 0.0)).norm() < 1e-10);
                prop_assert!((m - m.adjoint()).norm() < 1e-10);
                prop_assert!(state.data.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
            }
        }
    }
}
