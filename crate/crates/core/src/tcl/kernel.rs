//! Superoperator Wick expansion of the second- and fourth-order TCL integrands
//! in Schrödinger-picture lag variables.
//!
//! Interaction Liouvillians sit at times `τ = (0, −s₁, −s₂, −s₃)` with
//! `0 ≤ s₁ ≤ s₂ ≤ s₃`. Each `A(τ)` splits into Fourier components
//! `A(τ) = Σ_f A_f e^{ifΩτ}`, `f ∈ {−1, 0, 1}`, so every integrand is a sum of
//! constant Bloch matrices times correlation factors and phases
//! `e^{−iΩ(f₁s₁ + f₂s₂ + f₃s₃)}`.

use nalgebra::Matrix4;
use num_complex::Complex64 as C64;

use crate::bath::Correlation;
use crate::system::{pauli, Mat2, SpinBosonParams};

pub type CMat4 = Matrix4<C64>;

/// Time-index pairs of the three Wick pairings of four Liouvillians.
pub const PAIRINGS: [[(usize, usize); 2]; 3] = [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]];

pub const FREQS: [i32; 3] = [-1, 0, 1];

const ZERO: C64 = C64::new(0.0, 0.0);

/// Fourier components `A_f` of the coupling operator, indexed by `f + 1`.
pub fn coupling_components(params: &SpinBosonParams) -> [Mat2; 3] {
    let a1 = C64::from(params.a1());
    let a3 = C64::from(params.a3());
    [
        Mat2::new(ZERO, ZERO, -a1, ZERO),
        Mat2::new(a3, ZERO, ZERO, -a3),
        Mat2::new(ZERO, -a1, ZERO, ZERO),
    ]
}

/// Bloch matrix of `X ↦ c·L X R`.
fn sandwich(c: C64, l: &Mat2, r: &Mat2) -> CMat4 {
    let mut f = CMat4::zeros();
    for j in 0..4 {
        let image = l * pauli(j) * r;
        for i in 0..4 {
            f[(i, j)] = c * (pauli(i) * image).trace() * 0.5;
        }
    }
    f
}

/// `Σ_{sides}` of the bath-traced product of Liouvillians over `ops`, split
/// by the conjugation pattern that `pairs` induce.
///
/// A side bit of 1 means the Liouvillian acts from the right. The bath string
/// is `[right indices descending, left indices ascending]`; a pair `(lo, hi)`
/// contributes `C(s_hi − s_lo)` if `lo` stands first in it and the conjugate
/// otherwise. `emit(conj, matrix)` receives one flag per pair.
fn expand<F: FnMut(&[bool], CMat4)>(ops: &[Mat2], pairs: &[(usize, usize)], mut emit: F) {
    let n = ops.len();
    let minus_i = C64::new(0.0, -1.0);
    for sides in 0..(1usize << n) {
        let right = |k: usize| sides >> k & 1 == 1;
        let mut coeff = C64::new(1.0, 0.0);
        let mut l = Mat2::identity();
        let mut r = Mat2::identity();
        let mut pos = [0usize; 4];
        let mut p = 0;
        for k in (0..n).rev() {
            if right(k) {
                r *= ops[k];
                coeff *= -minus_i;
                pos[k] = p;
                p += 1;
            }
        }
        for k in 0..n {
            if !right(k) {
                l *= ops[k];
                coeff *= minus_i;
                pos[k] = p;
                p += 1;
            }
        }
        let conj: Vec<bool> = pairs.iter().map(|&(lo, hi)| pos[lo] > pos[hi]).collect();
        emit(&conj, sandwich(coeff, &l, &r));
    }
}

fn conj_index(conj: &[bool]) -> usize {
    conj.iter().enumerate().map(|(k, &c)| (c as usize) << k).sum()
}

/// Second-order kernel `⟨L_a L_b⟩` for two operators, by conjugation flag.
fn second_order(a: &Mat2, b: &Mat2) -> [CMat4; 2] {
    let mut out = [CMat4::zeros(); 2];
    expand(&[*a, *b], &[(0, 1)], |c, m| out[c[0] as usize] += m);
    out
}

/// Constant tensors of the TCL2 integrand
/// `Σ_{c,f} X_c(s) e^{−iΩfs} T[c][f]` with `X_0 = C`, `X_1 = C*`.
#[derive(Debug, Clone)]
pub struct SecondOrderKernel {
    pub omega: f64,
    pub t: [[CMat4; 3]; 2],
}

impl SecondOrderKernel {
    pub fn new(params: &SpinBosonParams) -> Self {
        let comps = coupling_components(params);
        let a0 = params.coupling_operator();
        let mut t = [[CMat4::zeros(); 3]; 2];
        for (fi, af) in comps.iter().enumerate() {
            let k = second_order(&a0, af);
            t[0][fi] = k[0];
            t[1][fi] = k[1];
        }
        Self { omega: params.omega, t }
    }

    pub fn integrand<C: Correlation + ?Sized>(&self, corr: &C, s: f64) -> CMat4 {
        let c = corr.correlation(s);
        let x = [c, c.conj()];
        let mut out = CMat4::zeros();
        for (ci, xc) in x.iter().enumerate() {
            for (fi, f) in FREQS.iter().enumerate() {
                let ph = C64::from_polar(1.0, -(*f as f64) * self.omega * s);
                out += self.t[ci][fi] * (xc * ph);
            }
        }
        out
    }
}

/// One constant tensor of the fourth-order integrand.
#[derive(Debug, Clone)]
pub struct KernelTerm {
    /// Index into [`PAIRINGS`].
    pub pairing: usize,
    /// Conjugation flag of each pair.
    pub conj: [bool; 2],
    /// Fourier indices of `A(−s₁)`, `A(−s₂)`, `A(−s₃)`.
    pub freq: [i32; 3],
    pub t: CMat4,
}

/// Tensors of the fourth-order cumulant integrand
/// `⟨L₀L₁L₂L₃⟩ − ⟨L₀L₁⟩⟨L₂L₃⟩ − ⟨L₀L₂⟩⟨L₁L₃⟩ − ⟨L₀L₃⟩⟨L₁L₂⟩`.
///
/// `full` holds the Wick terms of the first product, `product` the three
/// subtracted compositions, and `merged` their difference with vanishing
/// tensors dropped.
#[derive(Debug, Clone)]
pub struct FourthOrderKernel {
    pub omega: f64,
    pub full: Vec<KernelTerm>,
    pub product: Vec<KernelTerm>,
    pub merged: Vec<KernelTerm>,
}

fn term_index(p: usize, c: usize, f: [usize; 3]) -> usize {
    ((p * 4 + c) * 3 + f[0]) * 9 + f[1] * 3 + f[2]
}

impl FourthOrderKernel {
    pub fn new(params: &SpinBosonParams) -> Self {
        let comps = coupling_components(params);
        let a0 = params.coupling_operator();
        let n = 3 * 4 * 27;
        let mut full = vec![CMat4::zeros(); n];
        let mut product = vec![CMat4::zeros(); n];
        for f1 in 0..3 {
            for f2 in 0..3 {
                for f3 in 0..3 {
                    let f = [f1, f2, f3];
                    let ops = [a0, comps[f1], comps[f2], comps[f3]];
                    for (p, pairs) in PAIRINGS.iter().enumerate() {
                        expand(&ops, pairs, |c, m| full[term_index(p, conj_index(c), f)] += m);
                        let [(a, b), (c, d)] = *pairs;
                        let left = second_order(&ops[a], &ops[b]);
                        let right = second_order(&ops[c], &ops[d]);
                        for (c1, l) in left.iter().enumerate() {
                            for (c2, r) in right.iter().enumerate() {
                                product[term_index(p, c1 | c2 << 1, f)] += l * r;
                            }
                        }
                    }
                }
            }
        }
        let scale = full.iter().map(|m| m.norm()).fold(0.0, f64::max).max(1e-300);
        let collect = |mats: &[CMat4], keep: &dyn Fn(&CMat4) -> bool| -> Vec<KernelTerm> {
            let mut out = Vec::new();
            for p in 0..3 {
                for c in 0..4 {
                    for f1 in 0..3 {
                        for f2 in 0..3 {
                            for f3 in 0..3 {
                                let m = mats[term_index(p, c, [f1, f2, f3])];
                                if keep(&m) {
                                    out.push(KernelTerm {
                                        pairing: p,
                                        conj: [c & 1 == 1, c & 2 == 2],
                                        freq: [FREQS[f1], FREQS[f2], FREQS[f3]],
                                        t: m,
                                    });
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let nonzero = |m: &CMat4| m.norm() > 0.0;
        let diff: Vec<CMat4> = full.iter().zip(&product).map(|(a, b)| a - b).collect();
        Self {
            omega: params.omega,
            full: collect(&full, &nonzero),
            product: collect(&product, &nonzero),
            merged: collect(&diff, &|m: &CMat4| m.norm() > 1e-13 * scale),
        }
    }

    /// Lags `d = s_hi − s_lo` of the two pairs of a pairing, with `s₀ = 0`.
    pub fn lags(pairing: usize, s: [f64; 3]) -> [f64; 2] {
        let s4 = [0.0, s[0], s[1], s[2]];
        let [(a, b), (c, d)] = PAIRINGS[pairing];
        [s4[b] - s4[a], s4[d] - s4[c]]
    }

    /// Direct evaluation of the merged integrand at `s = (s₁, s₂, s₃)`.
    pub fn integrand<C: Correlation + ?Sized>(&self, corr: &C, s: [f64; 3]) -> CMat4 {
        let mut x = [[C64::new(0.0, 0.0); 2]; 3];
        for (p, xp) in x.iter_mut().enumerate() {
            let d = Self::lags(p, s);
            xp[0] = corr.correlation(d[0]);
            xp[1] = corr.correlation(d[1]);
        }
        let mut out = CMat4::zeros();
        for term in &self.merged {
            let xp = x[term.pairing];
            let x1 = if term.conj[0] { xp[0].conj() } else { xp[0] };
            let x2 = if term.conj[1] { xp[1].conj() } else { xp[1] };
            let phase: f64 = term.freq.iter().zip(&s).map(|(f, s)| *f as f64 * s).sum();
            out += term.t * (x1 * x2 * C64::from_polar(1.0, -self.omega * phase));
        }
        out
    }
}
