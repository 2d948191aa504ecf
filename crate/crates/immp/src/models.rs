//! Small closed-form models used by tests, the exactness harness and the
//! stiff-limit demonstrations.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::linalg::SpdMatrix;
use crate::model::{ConstraintMap, Potential, Structure, SystemModel};

/// `V(q) = amp (q^2 - width^2)^2` in one dimension.
#[derive(Debug, Clone, Copy)]
pub struct DoubleWell {
    pub amp: f64,
    pub width: f64,
}

impl Potential for DoubleWell {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, q: &[f64]) -> f64 {
        let t = q[0] * q[0] - self.width * self.width;
        self.amp * t * t
    }
    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let t = q[0] * q[0] - self.width * self.width;
        out[0] = 4.0 * self.amp * q[0] * t;
    }
}

/// Identity map `xi(q) = q` in one dimension.
#[derive(Debug, Clone, Copy)]
pub struct ScalarCoordinate;

impl ConstraintMap for ScalarCoordinate {
    fn dim(&self) -> usize {
        1
    }
    fn count(&self) -> usize {
        1
    }
    fn value(&self, q: &[f64], out: &mut [f64]) {
        out[0] = q[0];
    }
    fn apply_jacobian(&self, _q: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = w[0];
    }
    fn apply_jacobian_transpose(&self, _q: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = v[0];
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// One-dimensional double well with the coordinate itself as the fast
/// variable: the sharpest exactness check, since every part of the chain
/// (Fixman constant, projection, acceptance) is in closed form.
pub fn double_well_model(amp: f64, width: f64) -> SystemModel {
    SystemModel::new(
        Arc::new(DoubleWell { amp, width }),
        Arc::new(ScalarCoordinate),
        SpdMatrix::identity(1),
        SpdMatrix::identity(1),
        Structure::General,
    )
    .unwrap()
}

/// `xi(q) = |q|^2 - radius^2` in two dimensions.
#[derive(Debug, Clone, Copy, Default)]
pub struct CircleConstraint;

impl ConstraintMap for CircleConstraint {
    fn dim(&self) -> usize {
        2
    }
    fn count(&self) -> usize {
        1
    }
    fn value(&self, q: &[f64], out: &mut [f64]) {
        out[0] = q[0] * q[0] + q[1] * q[1] - 1.0;
    }
    fn apply_jacobian(&self, q: &[f64], w: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * q[0] * w[0];
        out[1] = 2.0 * q[1] * w[0];
    }
    fn apply_jacobian_transpose(&self, q: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * (q[0] * v[0] + q[1] * v[1]);
    }
    fn hessian_weighted_sum(&self, _q: &[f64], weights: &DMatrix<f64>, out: &mut [f64]) -> bool {
        out[0] = 2.0 * weights[(0, 0)];
        out[1] = 2.0 * weights[(1, 0)];
        true
    }
}

/// Two-well angular potential `V(q) = barrier (1 - q_x^2 + q_y^2)`.
///
/// Restricted to the unit circle this is `barrier (1 - cos 2 theta)`, with
/// minima on the horizontal axis and saddles on the vertical one.
#[derive(Debug, Clone, Copy)]
pub struct TwoModeAngular {
    pub barrier: f64,
}

impl Potential for TwoModeAngular {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, q: &[f64]) -> f64 {
        self.barrier * (1.0 - q[0] * q[0] + q[1] * q[1])
    }
    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        out[0] = -2.0 * self.barrier * q[0];
        out[1] = 2.0 * self.barrier * q[1];
    }
}

/// Planar model with the unit circle as slow manifold and a two-well
/// angular potential; the curvature of `xi` exercises every Fixman path.
pub fn circle_model(_radius: f64, barrier: f64) -> SystemModel {
    SystemModel::new(
        Arc::new(TwoModeAngular { barrier }),
        Arc::new(CircleConstraint),
        SpdMatrix::identity(2),
        SpdMatrix::identity(1),
        Structure::General,
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn check_gradient(p: &dyn Potential, q: &[f64]) {
        let d = p.dim();
        let mut grad = vec![0.0; d];
        p.gradient(q, &mut grad);
        let mut qq = q.to_vec();
        for i in 0..d {
            let h = 1e-6 * q[i].abs().max(1.0);
            qq[i] = q[i] + h;
            let up = p.value(&qq);
            qq[i] = q[i] - h;
            let dn = p.value(&qq);
            qq[i] = q[i];
            assert_relative_eq!(grad[i], (up - dn) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn double_well_values_and_gradient() {
        let v = DoubleWell { amp: 1.0, width: 1.0 };
        assert_relative_eq!(v.value(&[0.0]), 1.0);
        assert_relative_eq!(v.value(&[1.0]), 0.0);
        assert_relative_eq!(v.value(&[-1.0]), 0.0);
        let mut g = [0.0];
        v.gradient(&[2.0], &mut g);
        assert_relative_eq!(g[0], 24.0);
        check_gradient(&v, &[0.37]);
    }

    #[test]
    fn angular_potential_on_circle_is_two_well() {
        let v = TwoModeAngular { barrier: 0.4 };
        for theta in [0.0f64, 0.8, 2.0, -1.1] {
            let q = [theta.cos(), theta.sin()];
            assert_relative_eq!(
                v.value(&q),
                0.4 * (1.0 - (2.0 * theta).cos()),
                epsilon = 1e-14
            );
        }
        check_gradient(&v, &[0.3, -0.9]);
    }

    #[test]
    fn circle_constraint_geometry() {
        let c = CircleConstraint;
        let mut xi = [0.0];
        c.value(&[0.6, 0.8], &mut xi);
        assert_relative_eq!(xi[0], 0.0, epsilon = 1e-15);
        let jac = c.jacobian(&[0.6, 0.8]);
        assert_relative_eq!(jac[(0, 0)], 1.2);
        assert_relative_eq!(jac[(1, 0)], 1.6);
        let w = DMatrix::from_column_slice(2, 1, &[0.5, -0.25]);
        let mut h = [0.0; 2];
        assert!(c.hessian_weighted_sum(&[0.6, 0.8], &w, &mut h));
        assert_relative_eq!(h[0], 1.0);
        assert_relative_eq!(h[1], -0.5);
    }
}
