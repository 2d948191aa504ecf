//! One-dimensional particle chain: a double-well repulsive nearest-neighbor
//! interaction under a confining external field, with bond lengths as the
//! penalized fast variables. Discrete Neumann operators, O(N) penalized
//! mass solves and the cosine spectral transform live here.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{SpdMatrix, TridiagFactor};
use crate::model::{
    ConstraintMap, Penalty, Potential, Structure, SystemModel, ThermostatConfig,
};

/// Bond potential `(50((r-0.1)^2 - 0.05^2))^2` for `r <= cutoff`, zero
/// beyond. The printed cutoff 0.1 leaves a jump of 0.015625 at the cutoff;
/// extending it to 0.15 (where the polynomial itself vanishes) makes the
/// potential continuous. See [`ChainModel::continuous_cutoff`].
pub fn v_int_with_cutoff(r: f64, cutoff: f64) -> f64 {
    if r > cutoff {
        return 0.0;
    }
    let s = (r - 0.1) * (r - 0.1) - 0.0025;
    2500.0 * s * s
}

pub fn v_int_prime_with_cutoff(r: f64, cutoff: f64) -> f64 {
    if r > cutoff {
        return 0.0;
    }
    let u = r - 0.1;
    10000.0 * u * (u * u - 0.0025)
}

/// Bond potential at the default cutoff 0.1.
pub fn v_int(r: f64) -> f64 {
    v_int_with_cutoff(r, 0.1)
}

pub fn v_int_prime(r: f64) -> f64 {
    v_int_prime_with_cutoff(r, 0.1)
}

/// Confining field `((q - 0.5) / 2.2)^2`.
pub fn v_ext(q: f64) -> f64 {
    let s = (q - 0.5) / 2.2;
    s * s
}

pub fn v_ext_prime(q: f64) -> f64 {
    2.0 * (q - 0.5) / (2.2 * 2.2)
}

/// Scaled forward difference `N (q_{i+1} - q_i)`, one value per bond.
pub fn discrete_gradient(q: &[f64]) -> Vec<f64> {
    let n = q.len();
    let scale = n as f64;
    (0..n - 1).map(|i| scale * (q[i + 1] - q[i])).collect()
}

/// Adjoint of [`discrete_gradient`]: maps bond values back to beads so that
/// `<grad q, w> = <q, grad^T w>` exactly.
pub fn discrete_gradient_transpose(w: &[f64], n_beads: usize) -> Vec<f64> {
    let scale = n_beads as f64;
    let mut out = vec![0.0; n_beads];
    for (i, &wi) in w.iter().enumerate() {
        out[i] -= scale * wi;
        out[i + 1] += scale * wi;
    }
    out
}

/// Chain parameters. The penalty seen by the integrators is `nu = nubar * N`
/// and the thermostat runs at the rescaled inverse temperature
/// `beta_N = beta / N`.
#[derive(Debug, Clone)]
pub struct ChainModel {
    pub n_beads: usize,
    pub nubar: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Extend the bond cutoff from the printed 0.1 to 0.15, where the
    /// double-well polynomial vanishes, removing the jump at the cutoff.
    pub continuous_cutoff: bool,
    /// Replace the bond potential by `r^2/2` and drop the external field
    /// (the analytically solvable variant).
    pub harmonic: bool,
}

impl ChainModel {
    pub fn new(n_beads: usize, nubar: f64, beta: f64) -> Result<Self> {
        if n_beads < 2 {
            return Err(Error::InvalidConfig(format!(
                "chain needs at least 2 beads, got {n_beads}"
            )));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive, got {beta}"
            )));
        }
        if !(nubar >= 0.0) {
            return Err(Error::InvalidPenalty(format!(
                "nubar must be nonnegative, got {nubar}"
            )));
        }
        Ok(Self {
            n_beads,
            nubar,
            beta,
            gamma: 0.1,
            continuous_cutoff: false,
            harmonic: false,
        })
    }

    pub fn harmonic(n_beads: usize, nubar: f64, beta: f64) -> Result<Self> {
        let mut m = Self::new(n_beads, nubar, beta)?;
        m.harmonic = true;
        Ok(m)
    }

    /// Penalty `nu = nubar * N`; `None` when `nubar = 0` (unpenalized
    /// baseline).
    pub fn penalty(&self) -> Option<Penalty> {
        if self.nubar == 0.0 {
            None
        } else {
            Some(Penalty::Finite(self.nubar * self.n_beads as f64))
        }
    }

    pub fn beta_n(&self) -> f64 {
        self.beta / self.n_beads as f64
    }

    pub fn cutoff(&self) -> f64 {
        if self.continuous_cutoff {
            0.15
        } else {
            0.1
        }
    }

    /// Langevin thermostat at `beta_N` with scalar friction on the beads
    /// and none on the bond variables.
    pub fn thermostat(&self) -> Result<ThermostatConfig> {
        ThermostatConfig::scalar(
            self.beta_n(),
            self.gamma,
            0.0,
            self.n_beads,
            self.n_beads - 1,
        )
    }

    /// Initial condition with zero potential energy for the macroscopic
    /// observable test: every bead at the center of the external field.
    pub fn concentrated_positions(&self) -> Vec<f64> {
        vec![0.5; self.n_beads]
    }

    /// Near-equilibrium ordered configuration: bead `i` at the
    /// `(i + 1/2)/N` quantile of the single-bead Boltzmann marginal of the
    /// external field. Every bond is detached, so samplers started here
    /// skip the slow collision-driven expansion out of the concentrated
    /// state. Only meaningful for the anharmonic chain.
    pub fn spread_positions(&self) -> Vec<f64> {
        use statrs::distribution::{ContinuousCDF, Normal};
        let sigma = 2.2 / (2.0 * self.beta_n()).sqrt();
        let gauss = Normal::new(0.5, sigma).expect("positive width");
        let n = self.n_beads as f64;
        (0..self.n_beads)
            .map(|i| gauss.inverse_cdf((i as f64 + 0.5) / n))
            .collect()
    }
}

struct ChainPotential {
    n: usize,
    cutoff: f64,
    harmonic: bool,
}

impl Potential for ChainPotential {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, q: &[f64]) -> f64 {
        let scale = self.n as f64;
        let mut total = 0.0;
        for i in 0..self.n - 1 {
            let r = scale * (q[i + 1] - q[i]);
            total += if self.harmonic {
                0.5 * r * r
            } else {
                v_int_with_cutoff(r, self.cutoff)
            };
        }
        if !self.harmonic {
            for &qi in q {
                total += v_ext(qi);
            }
        }
        total
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let scale = self.n as f64;
        out.fill(0.0);
        for i in 0..self.n - 1 {
            let r = scale * (q[i + 1] - q[i]);
            let dv = if self.harmonic {
                r
            } else {
                v_int_prime_with_cutoff(r, self.cutoff)
            };
            out[i] -= scale * dv;
            out[i + 1] += scale * dv;
        }
        if !self.harmonic {
            for (o, &qi) in out.iter_mut().zip(q) {
                *o += v_ext_prime(qi);
            }
        }
    }
}

struct BondConstraint {
    n_beads: usize,
}

impl ConstraintMap for BondConstraint {
    fn dim(&self) -> usize {
        self.n_beads
    }

    fn count(&self) -> usize {
        self.n_beads - 1
    }

    fn value(&self, q: &[f64], out: &mut [f64]) {
        for (b, o) in out.iter_mut().enumerate() {
            *o = q[b + 1] - q[b];
        }
    }

    fn apply_jacobian(&self, _q: &[f64], lambda: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (b, &l) in lambda.iter().enumerate() {
            out[b] -= l;
            out[b + 1] += l;
        }
    }

    fn apply_jacobian_transpose(&self, _q: &[f64], v: &[f64], out: &mut [f64]) {
        for (b, o) in out.iter_mut().enumerate() {
            *o = v[b + 1] - v[b];
        }
    }

    fn hessian_weighted_sum(&self, _q: &[f64], _weights: &DMatrix<f64>, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Assemble the penalized extended system of the chain: `d = N` beads with
/// identity masses, `n = N - 1` unscaled bond constraints
/// `xi_b = q_{b+1} - q_b`, tridiagonal structure flagged for O(N) solves.
pub fn build_chain_system(model: &ChainModel) -> Result<SystemModel> {
    let n = model.n_beads;
    SystemModel::new(
        Arc::new(ChainPotential {
            n,
            cutoff: model.cutoff(),
            harmonic: model.harmonic,
        }),
        Arc::new(BondConstraint { n_beads: n }),
        SpdMatrix::identity(n),
        SpdMatrix::identity(n - 1),
        Structure::Chain,
    )
}

/// Solve `(Id - nubar^2 Laplacian) x = w` where the Laplacian is the
/// discrete Neumann one, `N^2 (q_{i+1} - 2 q_i + q_{i-1})` with reflecting
/// ends. This is the low-pass filter applied by the penalized mass matrix.
pub fn tridiagonal_solve(nubar: f64, w: &[f64]) -> Result<Vec<f64>> {
    if nubar < 0.0 {
        return Err(Error::InvalidPenalty(format!(
            "nubar must be nonnegative, got {nubar}"
        )));
    }
    let n = w.len();
    let s = nubar * nubar * (n as f64) * (n as f64);
    let mut diag = vec![1.0 + 2.0 * s; n];
    diag[0] = 1.0 + s;
    diag[n - 1] = 1.0 + s;
    let off = vec![-s; n - 1];
    let factor = TridiagFactor::new(&off, &diag, &off)?;
    let mut x = w.to_vec();
    factor.solve_slice(&mut x);
    Ok(x)
}

/// Eigenvalue `4 N^2 sin^2(k pi / 2N)` of minus the discrete Neumann
/// Laplacian.
pub fn delta_k(n_beads: usize, k: usize) -> f64 {
    let nf = n_beads as f64;
    let s = (k as f64 * std::f64::consts::PI / (2.0 * nf)).sin();
    4.0 * nf * nf * s * s
}

/// Orthonormal cosine eigenbasis of the discrete Neumann Laplacian:
/// `P_{0,i} = sqrt(1/N)`, `P_{k,i} = sqrt(2/N) cos(k pi (i - 1/2) / N)`
/// (rows indexed by mode).
pub struct NeumannTransform {
    p: DMatrix<f64>,
}

impl NeumannTransform {
    pub fn new(n_beads: usize) -> Self {
        let nf = n_beads as f64;
        let p = DMatrix::from_fn(n_beads, n_beads, |k, i| {
            if k == 0 {
                (1.0 / nf).sqrt()
            } else {
                (2.0 / nf).sqrt()
                    * (k as f64 * std::f64::consts::PI * (i as f64 + 0.5) / nf).cos()
            }
        });
        Self { p }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Mode coefficients `y_k = sum_i P_{k,i} x_i`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n = self.p.nrows();
        let mut y = vec![0.0; n];
        for k in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.p[(k, i)] * x[i];
            }
            y[k] = acc;
        }
        y
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let n = self.p.nrows();
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += self.p[(k, i)] * y[k];
            }
            x[i] = acc;
        }
        x
    }
}

/// One-shot forward transform; build a [`NeumannTransform`] for repeated
/// use.
pub fn neumann_spectral_transform(x: &[f64]) -> Vec<f64> {
    NeumannTransform::new(x.len()).forward(x)
}

pub fn neumann_spectral_inverse(y: &[f64]) -> Vec<f64> {
    NeumannTransform::new(y.len()).inverse(y)
}

/// Dense `-Laplacian` (Neumann), for oracle comparisons.
pub fn dense_neumann_laplacian(n_beads: usize) -> DMatrix<f64> {
    let s = (n_beads * n_beads) as f64;
    DMatrix::from_fn(n_beads, n_beads, |i, j| {
        if i == j {
            let deg = if i == 0 || i == n_beads - 1 { 1.0 } else { 2.0 };
            deg * s
        } else if i.abs_diff(j) == 1 {
            -s
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::penalized_mass_apply;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn bond_potential_frozen_values() {
        assert_relative_eq!(v_int(0.05), 0.0);
        assert_relative_eq!(v_int(0.2), 0.0);
        assert_relative_eq!(v_int(0.0), 0.140625, epsilon = 1e-15);
        // Jump at the printed cutoff; the extended cutoff removes it.
        assert_relative_eq!(v_int(0.1), 0.015625, epsilon = 1e-15);
        assert_relative_eq!(v_int_with_cutoff(0.15, 0.15), 0.0, epsilon = 1e-15);
        assert!(v_int_with_cutoff(0.12, 0.15) > 0.0);
    }

    #[test]
    fn bond_derivative_matches_finite_differences() {
        let h = 1e-6;
        for r in [0.0f64, 0.03, 0.05, 0.08, 0.099] {
            let fd = (v_int(r + h) - v_int(r - h)) / (2.0 * h);
            assert_relative_eq!(v_int_prime(r), fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn external_field_values_and_derivative() {
        assert_relative_eq!(v_ext(0.5), 0.0);
        assert_relative_eq!(v_ext(2.7), 1.0, epsilon = 1e-15);
        let h = 1e-6;
        for q in [-1.0f64, 0.2, 0.5, 3.0] {
            let fd = (v_ext(q + h) - v_ext(q - h)) / (2.0 * h);
            assert_relative_eq!(v_ext_prime(q), fd, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn discrete_gradient_basics_and_adjointness() {
        let n = 9;
        assert!(discrete_gradient(&vec![0.7; n]).iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for v in discrete_gradient(&ramp) {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        let mut rng = crate::rng::rng_stream(21, 0, crate::rng::StreamTag::Auxiliary);
        let q: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>()).collect();
        let lhs: f64 = discrete_gradient(&q).iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = q
            .iter()
            .zip(discrete_gradient_transpose(&w, n))
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn penalty_bookkeeping_matches_scaled_laplacian() {
        // nu^2 J J^T with unscaled bond constraints equals
        // nubar^2 * (-Laplacian) once nu = nubar * N.
        let model = ChainModel::new(8, 0.3, 10.0).unwrap();
        let system = build_chain_system(&model).unwrap();
        let nu = model.nubar * 8.0;
        let jac = system.constraint.jacobian(&vec![0.0; 8]);
        let lhs = &jac * jac.transpose() * (nu * nu);
        let rhs = dense_neumann_laplacian(8) * (model.nubar * model.nubar);
        assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn bond_gram_is_second_difference_matrix() {
        let model = ChainModel::new(8, 0.3, 10.0).unwrap();
        let system = build_chain_system(&model).unwrap();
        let g = crate::geometry::gram(&system, &vec![0.0; 8]);
        for a in 0..7usize {
            for b in 0..7usize {
                let want = match a.abs_diff(b) {
                    0 => 2.0,
                    1 => -1.0,
                    _ => 0.0,
                };
                assert_relative_eq!(g[(a, b)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn penalized_mass_is_the_low_pass_filter() {
        for n in [4usize, 17, 32] {
            let model = ChainModel::new(n, 0.25, 10.0).unwrap();
            let system = build_chain_system(&model).unwrap();
            let pen = model.penalty().unwrap();
            let dense = DMatrix::identity(n, n)
                + dense_neumann_laplacian(n) * (model.nubar * model.nubar);
            let mut rng = crate::rng::rng_stream(22, 0, crate::rng::StreamTag::Auxiliary);
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut out = vec![0.0; n];
            penalized_mass_apply(&system, pen, &vec![0.5; n], &v, &mut out).unwrap();
            let want = &dense * DMatrix::from_column_slice(n, 1, &v);
            for i in 0..n {
                assert_relative_eq!(out[i], want[(i, 0)], epsilon = 1e-12);
            }
            // Round trip through the O(N) filter solve.
            let x = tridiagonal_solve(model.nubar, &out).unwrap();
            for i in 0..n {
                assert_relative_eq!(x[i], v[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn filter_solve_special_cases() {
        let w = vec![0.3, -0.7, 1.1, 0.2];
        let id = tridiagonal_solve(0.0, &w).unwrap();
        assert_eq!(id, w);
        let c = tridiagonal_solve(0.8, &vec![0.42; 6]).unwrap();
        for v in c {
            assert_relative_eq!(v, 0.42, epsilon = 1e-12);
        }
    }

    #[test]
    fn force_assembly_matches_finite_differences() {
        let n = 16;
        let model = ChainModel::new(n, 0.2, 10.0).unwrap();
        let system = build_chain_system(&model).unwrap();
        let mut rng = crate::rng::rng_stream(23, 0, crate::rng::StreamTag::Auxiliary);
        // Bead spacing keeps every bond safely away from the cutoff jump.
        let q: Vec<f64> = (0..n)
            .map(|i| 0.5 + 0.003 * i as f64 + 0.0004 * (rng.random::<f64>() - 0.5))
            .collect();
        let mut grad = vec![0.0; n];
        system.potential.gradient(&q, &mut grad);
        let h = 1e-7;
        let mut qp = q.clone();
        for i in 0..n {
            qp[i] = q[i] + h;
            let vp = system.potential.value(&qp);
            qp[i] = q[i] - h;
            let vm = system.potential.value(&qp);
            qp[i] = q[i];
            let fd = (vp - vm) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn harmonic_variant_gradient_is_scaled_laplacian() {
        let n = 8;
        let model = ChainModel::harmonic(n, 0.5, 10.0).unwrap();
        let system = build_chain_system(&model).unwrap();
        let mut rng = crate::rng::rng_stream(24, 0, crate::rng::StreamTag::Auxiliary);
        let q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut grad = vec![0.0; n];
        system.potential.gradient(&q, &mut grad);
        let want = dense_neumann_laplacian(n) * DMatrix::from_column_slice(n, 1, &q);
        for i in 0..n {
            assert_relative_eq!(grad[i], want[(i, 0)], epsilon = 1e-9);
        }
    }

    #[test]
    fn laplacian_eigenvalues() {
        assert_relative_eq!(delta_k(2, 1), 8.0, epsilon = 1e-12);
        assert_eq!(delta_k(7, 0), 0.0);
        let want = 9.0 * std::f64::consts::PI * std::f64::consts::PI;
        assert_relative_eq!(delta_k(1000, 3), want, max_relative = 1e-4);
    }

    #[test]
    fn cosine_basis_is_orthonormal_and_diagonalizes_laplacian() {
        let n = 8;
        let t = NeumannTransform::new(n);
        let gram = t.basis() * t.basis().transpose();
        assert_relative_eq!((gram - DMatrix::identity(n, n)).norm(), 0.0, epsilon = 1e-12);

        let coeffs = t.forward(&vec![0.42; n]);
        assert_relative_eq!(coeffs[0], 0.42 * (n as f64).sqrt(), epsilon = 1e-12);
        for &c in &coeffs[1..] {
            assert!(c.abs() < 1e-12);
        }

        let mut rng = crate::rng::rng_stream(25, 0, crate::rng::StreamTag::Auxiliary);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let back = t.inverse(&t.forward(&x));
        for (a, b) in back.iter().zip(&x) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }

        let conj = t.basis() * dense_neumann_laplacian(n) * t.basis().transpose();
        for k in 0..n {
            for l in 0..n {
                let want = if k == l { delta_k(n, k) } else { 0.0 };
                assert_relative_eq!(conj[(k, l)], want, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn chain_model_bookkeeping() {
        let model = ChainModel::new(100, 0.1, 10.0).unwrap();
        assert_relative_eq!(model.beta_n(), 0.1);
        match model.penalty().unwrap() {
            Penalty::Finite(nu) => assert_relative_eq!(nu, 10.0),
            _ => panic!("finite penalty expected"),
        }
        assert!(ChainModel::new(50, 0.0, 10.0).unwrap().penalty().is_none());
        assert!(ChainModel::new(1, 0.1, 10.0).is_err());
        assert_eq!(model.concentrated_positions(), vec![0.5; 100]);
    }
}
