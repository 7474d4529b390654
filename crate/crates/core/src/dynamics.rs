//! Bloch dynamics under a constant generator and its steady state.

use std::io::Write;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::system::BlochVector;
use crate::tcl::GeneratorMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<BlochVector>,
}

impl Trajectory {
    /// CSV with columns `t,v1,v2,v3`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,v1,v2,v3")?;
        for (t, v) in self.times.iter().zip(&self.states) {
            let [x, y, z] = v.spatial();
            writeln!(w, "{t:.10e},{x:.15e},{y:.15e},{z:.15e}")?;
        }
        Ok(())
    }

    pub fn any_unphysical(&self) -> bool {
        self.states.iter().any(|v| v.is_flagged_unphysical())
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("times must be finite, non-negative and ascending".into()));
    }
    Ok(())
}

/// `v(t) = exp(G t) v(0)` by dense matrix exponential at every sample time.
pub fn propagate(v0: &BlochVector, g: &GeneratorMatrix, times: &[f64]) -> Result<Trajectory> {
    check_times(times)?;
    let states = times
        .iter()
        .map(|&t| {
            let mut v = (g.m * t).exp() * v0.0;
            v[0] = 1.0;
            BlochVector(v)
        })
        .collect();
    Ok(Trajectory {
        times: times.to_vec(),
        states,
    })
}

/// Adaptive Dormand–Prince 5(4) integration of `v̇ = G v`.
pub fn propagate_rk(v0: &BlochVector, g: &GeneratorMatrix, times: &[f64], rtol: f64) -> Result<Trajectory> {
    check_times(times)?;
    let f = |v: &Vector4<f64>| g.m * v;
    let mut states = Vec::with_capacity(times.len());
    let mut v = v0.0;
    let mut t = 0.0;
    let mut h = (0.01 / (g.m.norm() + 1e-300)).min(1.0);
    for &target in times {
        while t < target {
            let step = h.min(target - t);
            let (next, err) = dopri5_step(&f, &v, step);
            let scale = rtol * (1.0 + v.amax().max(next.amax()));
            let ratio = err / scale;
            if ratio <= 1.0 {
                v = next;
                t += step;
            }
            let factor = if ratio == 0.0 {
                5.0
            } else {
                (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = step * factor;
            if h < 1e-14 * (1.0 + t) {
                return Err(Error::Integration(format!("step size collapsed at t = {t}")));
            }
        }
        states.push(BlochVector(v));
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
    })
}

fn dopri5_step<F: Fn(&Vector4<f64>) -> Vector4<f64>>(f: &F, y: &Vector4<f64>, h: f64) -> (Vector4<f64>, f64) {
    let k1 = f(y);
    let k2 = f(&(y + k1 * (h / 5.0)));
    let k3 = f(&(y + (k1 * (3.0 / 40.0) + k2 * (9.0 / 40.0)) * h));
    let k4 = f(&(y + (k1 * (44.0 / 45.0) - k2 * (56.0 / 15.0) + k3 * (32.0 / 9.0)) * h));
    let k5 =
        f(&(y
            + (k1 * (19372.0 / 6561.0) - k2 * (25360.0 / 2187.0) + k3 * (64448.0 / 6561.0) - k4 * (212.0 / 729.0))
                * h));
    let k6 = f(&(y
        + (k1 * (9017.0 / 3168.0) - k2 * (355.0 / 33.0) + k3 * (46732.0 / 5247.0) + k4 * (49.0 / 176.0)
            - k5 * (5103.0 / 18656.0))
            * h));
    let y5 = y
        + (k1 * (35.0 / 384.0) + k3 * (500.0 / 1113.0) + k4 * (125.0 / 192.0) - k5 * (2187.0 / 6784.0)
            + k6 * (11.0 / 84.0))
            * h;
    let k7 = f(&y5);
    let err = (k1 * (71.0 / 57600.0) - k3 * (71.0 / 16695.0) + k4 * (71.0 / 1920.0) - k5 * (17253.0 / 339200.0)
        + k6 * (22.0 / 525.0)
        - k7 * (1.0 / 40.0))
        * h;
    (y5, err.amax())
}

/// Solve `G v = 0` with `v₀ = 1`.
pub fn steady_state(g: &GeneratorMatrix) -> Result<BlochVector> {
    steady_state_of(&g.m)
}

pub fn steady_state_of(m: &Matrix4<f64>) -> Result<BlochVector> {
    let block: Matrix3<f64> = m.fixed_view::<3, 3>(1, 1).into_owned();
    let rhs: Vector3<f64> = -m.fixed_view::<3, 1>(1, 0).into_owned();
    let sv = block.singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    if !(smin > 1e-13 * smax) {
        return Err(Error::Singular(format!(
            "steady-state block has near-zero singular value {smin:e} (largest {smax:e})"
        )));
    }
    let x = block
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular(format!("LU failed, smallest singular value {smin:e}")))?;
    Ok(BlochVector::new(x[0], x[1], x[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{free_generator, SpinBosonParams};
    use crate::tcl::TimeTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn gen(m: Matrix4<f64>) -> GeneratorMatrix {
        GeneratorMatrix {
            order: 2,
            t: TimeTag::Asymptotic,
            m,
        }
    }

    /// Amplitude damping plus dephasing and precession, written in Bloch form.
    fn random_stable(rng: &mut ChaCha8Rng) -> GeneratorMatrix {
        let (w, g1, g2) = (
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.05..0.5),
            rng.gen_range(0.05..0.5),
        );
        let z = rng.gen_range(-0.9..0.9);
        let mut m = Matrix4::zeros();
        m[(1, 2)] = -w;
        m[(2, 1)] = w;
        m[(1, 1)] = -g2;
        m[(2, 2)] = -g2;
        m[(3, 3)] = -g1;
        m[(3, 0)] = g1 * z;
        gen(m)
    }

    #[test]
    fn larmor_and_identity() {
        let p = SpinBosonParams::new(2.0, 0.3, 0.0, 1.0).unwrap();
        let g = gen(free_generator(&p));
        let tr = propagate(&BlochVector::new(1.0, 0.0, 0.0), &g, &[0.0, PI / 4.0]).unwrap();
        assert_eq!(tr.states[0], BlochVector::new(1.0, 0.0, 0.0));
        assert!((tr.states[1].0 - Vector4::new(1.0, 0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn exponential_and_rk_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let times: Vec<f64> = (0..=20).map(|k| 0.5 * k as f64).collect();
        for _ in 0..5 {
            let g = random_stable(&mut rng);
            let v0 = BlochVector::new(0.3, -0.5, 0.6);
            let a = propagate(&v0, &g, &times).unwrap();
            let b = propagate_rk(&v0, &g, &times, 1e-12).unwrap();
            for (x, y) in a.states.iter().zip(&b.states) {
                assert!((x.0 - y.0).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn steady_state_is_fixed_point_and_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_stable(&mut rng);
        let ss = steady_state(&g).unwrap();
        assert!((g.m * ss.0).amax() < 1e-14);
        let tr = propagate(&ss, &g, &[1.0, 10.0, 100.0]).unwrap();
        assert!(tr.states.iter().all(|v| (v.0 - ss.0).amax() < 1e-8));
        let rate = g.m.norm();
        let late = propagate(&BlochVector::new(1.0, 0.0, 0.0), &g, &[60.0 / rate.min(0.05)]).unwrap();
        assert!((late.states[0].0 - ss.0).amax() < 1e-6);
    }

    #[test]
    fn free_generator_has_no_steady_state() {
        let p = SpinBosonParams::new(1.0, 0.3, 0.0, 1.0).unwrap();
        let e = steady_state(&gen(free_generator(&p))).unwrap_err();
        assert!(matches!(e, Error::Singular(_)) && e.to_string().contains("singular value"));
    }

    #[test]
    fn csv_layout() {
        let tr = Trajectory {
            times: vec![0.0],
            states: vec![BlochVector::new(1.0, 0.0, -0.5)],
        };
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,v1,v2,v3\n0.0000000000e0,1.000000000000000e0,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn trace_component_is_preserved(seed in 0u64..1000, t in 0.0f64..50.0, x in -0.5f64..0.5, y in -0.5f64..0.5, z in -0.5f64..0.5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = random_stable(&mut rng);
                let tr = propagate(&BlochVector::new(x, y, z), &g, &[0.0, t]).unwrap();
                prop_assert!(tr.states.iter().all(|v| v.0[0] == 1.0));
                let ss = steady_state(&g).unwrap();
                prop_assert!((g.m * ss.0).norm() < 1e-10 * (1.0 + g.m.amax()));
            }
        }
    }
}
