//! Qubit parameterisation, Pauli/Bloch algebra and the free generator.
//!
//! Conventions: `H_S = (Ω/2) σ₃`, coupling operator `A = a₃σ₃ − a₁σ₁`, Bloch
//! components `vᵢ = Tr{σᵢ ρ}` with `σ₀ = 1`, and a generator `F` acts as
//! `v̇ = F v` with `F_ij = ½ Tr{σᵢ 𝓛(σⱼ)}`. With `[σ₃, σ₁] = 2iσ₂` the free
//! part is `v̇₁ = −Ω v₂`, `v̇₂ = Ω v₁`.

use nalgebra::{Matrix2, Matrix4, Vector4};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat2 = Matrix2<C64>;

/// Tolerance beyond which a Bloch vector is flagged as unphysical.
pub const PHYSICALITY_SLACK: f64 = 0.05;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// σ₀ … σ₃.
pub fn pauli(i: usize) -> Mat2 {
    match i {
        0 => Mat2::new(ONE, ZERO, ZERO, ONE),
        1 => Mat2::new(ZERO, ONE, ONE, ZERO),
        2 => Mat2::new(ZERO, -I, I, ZERO),
        3 => Mat2::new(ONE, ZERO, ZERO, -ONE),
        _ => panic!("pauli index {i} out of range"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinBosonParams {
    /// Level splitting Ω.
    pub omega: f64,
    /// Mixing angle θ; `a₁ = sin θ`, `a₃ = cos θ`.
    pub theta: f64,
    /// Dimensionless coupling λ.
    pub lambda: f64,
    /// Inverse temperature β.
    pub beta: f64,
}

impl SpinBosonParams {
    pub fn new(omega: f64, theta: f64, lambda: f64, beta: f64) -> Result<Self> {
        let p = Self {
            omega,
            theta,
            lambda,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!(
                "omega must be finite and >= 0, got {}",
                self.omega
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        if !self.theta.is_finite() {
            return Err(Error::Config("theta must be finite".into()));
        }
        Ok(())
    }

    pub fn a1(&self) -> f64 {
        self.theta.sin()
    }

    pub fn a3(&self) -> f64 {
        self.theta.cos()
    }

    /// Parameters for a DQD at the given detuning and tunnelling.
    pub fn from_dqd(dqd: DqdParams, lambda: f64, beta: f64) -> Result<Self> {
        let (omega, a1, a3) = dqd_to_sbm(dqd)?;
        Self::new(omega, a1.atan2(a3), lambda, beta)
    }

    /// The coupling operator `A = a₃σ₃ − a₁σ₁`.
    pub fn coupling_operator(&self) -> Mat2 {
        pauli(3) * C64::from(self.a3()) - pauli(1) * C64::from(self.a1())
    }

    /// `e^{iHτ} A e^{−iHτ}` for `H = (Ω/2)σ₃`.
    pub fn coupling_at(&self, tau: f64) -> Mat2 {
        let a1 = self.a1();
        let a3 = self.a3();
        // σ₁ picks up the phase e^{iΩτ} on the upper off-diagonal.
        let ph = C64::from_polar(1.0, self.omega * tau);
        Mat2::new(C64::from(a3), -a1 * ph, -a1 * ph.conj(), C64::from(-a3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DqdParams {
    pub epsilon: f64,
    pub t_c: f64,
}

/// Map detuning and tunnelling to `(Ω, a₁, a₃)`.
pub fn dqd_to_sbm(p: DqdParams) -> Result<(f64, f64, f64)> {
    let omega = (p.epsilon * p.epsilon + 4.0 * p.t_c * p.t_c).sqrt();
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::Domain("DQD parameters give zero level splitting".into()));
    }
    Ok((omega, 2.0 * p.t_c / omega, p.epsilon / omega))
}

/// Bloch 4-vector `(1, ⟨σ₁⟩, ⟨σ₂⟩, ⟨σ₃⟩)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochVector(pub Vector4<f64>);

impl BlochVector {
    pub fn new(v1: f64, v2: f64, v3: f64) -> Self {
        Self(Vector4::new(1.0, v1, v2, v3))
    }

    pub fn maximally_mixed() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn spatial(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn radius(&self) -> f64 {
        let [x, y, z] = self.spatial();
        (x * x + y * y + z * z).sqrt()
    }

    /// True when the state lies outside the Bloch ball by more than
    /// [`PHYSICALITY_SLACK`]. Such states are reported, never clipped.
    pub fn is_flagged_unphysical(&self) -> bool {
        self.radius() > 1.0 + PHYSICALITY_SLACK
    }
}

/// 2×2 Hermitian unit-trace density matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix(pub Mat2);

impl DensityMatrix {
    pub fn new(m: Mat2) -> Result<Self> {
        let herm = (m - m.adjoint()).norm();
        if herm > 1e-12 {
            return Err(Error::Domain(format!(
                "density matrix is not Hermitian (residual {herm:e})"
            )));
        }
        let tr = m.trace();
        if (tr - ONE).norm() > 1e-12 {
            return Err(Error::Domain(format!("density matrix trace is {tr}, expected 1")));
        }
        Ok(Self(m))
    }

    /// Pure state `|ψ⟩⟨ψ|` for a normalised amplitude pair.
    pub fn pure(a: C64, b: C64) -> Result<Self> {
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        let (a, b) = (a / n, b / n);
        Self::new(Mat2::new(a * a.conj(), a * b.conj(), b * a.conj(), b * b.conj()))
    }

    /// `|+⟩⟨+|`.
    pub fn plus() -> Self {
        let h = C64::from(0.5);
        Self(Mat2::new(h, h, h, h))
    }

    pub fn eigenvalues(&self) -> [f64; 2] {
        let m = &self.0;
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b = m[(0, 1)];
        let mean = 0.5 * (a + d);
        let r = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        [mean - r, mean + r]
    }
}

pub fn bloch_from_density(rho: &DensityMatrix) -> BlochVector {
    let v = |i| (pauli(i) * rho.0).trace().re;
    BlochVector(Vector4::new(v(0), v(1), v(2), v(3)))
}

pub fn density_from_bloch(v: &BlochVector) -> DensityMatrix {
    let mut m = Mat2::zeros();
    for i in 0..4 {
        m += pauli(i) * C64::from(0.5 * v.0[i]);
    }
    // v₀ is 1 by construction, so the trace is exactly one.
    DensityMatrix(m)
}

/// Bloch-basis matrix `F_ij = ½ Tr{σᵢ 𝒮(σⱼ)}` of a superoperator given by its
/// action on a 2×2 matrix.
pub fn bloch_matrix_of<S: Fn(&Mat2) -> Mat2>(superop: S) -> Matrix4<C64> {
    let mut f = Matrix4::zeros();
    for j in 0..4 {
        let image = superop(&pauli(j));
        for i in 0..4 {
            f[(i, j)] = (pauli(i) * image).trace() * 0.5;
        }
    }
    f
}

/// Generator of `−i[(Ω/2)σ₃, ρ]` in the Bloch basis.
pub fn free_generator(params: &SpinBosonParams) -> Matrix4<f64> {
    let mut f = Matrix4::zeros();
    f[(1, 2)] = -params.omega;
    f[(2, 1)] = params.omega;
    f
}
