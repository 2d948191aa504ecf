//! Constraint geometry: Gram matrices, the Fixman corrector and momentum
//! projection.
//!
//! The penalty-regularized Gram matrix `A(q) = G(q) + M_z^{-1} / nu^2` with
//! `G = Jxi^T M^{-1} Jxi` governs both the Fixman corrector
//! `V_fix = ln det A / (2 beta)` and the projection onto the hidden
//! momentum constraint. In the hard-constraint limit the regularization
//! vanishes and `A = G`.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::linalg::TridiagFactor;
use crate::model::{Penalty, Structure, SystemModel};

/// Condition-number threshold above which the regularized Gram matrix is
/// treated as singular.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

enum Factorization {
    Tridiag(TridiagFactor),
    Dense(Cholesky<f64, Dyn>),
}

struct Prepared {
    inv_sq: f64,
    factor: Factorization,
    log_det: f64,
    cond: f64,
}

/// Scratch space and, for constant-Jacobian constraints, a cached
/// factorization of the regularized Gram matrix.
pub struct GramWorkspace {
    d: usize,
    n: usize,
    chain: bool,
    linear: bool,
    cached: Option<Prepared>,
    buf_d: Vec<f64>,
    buf_n: Vec<f64>,
}

impl GramWorkspace {
    pub fn new(model: &SystemModel) -> Self {
        let d = model.dim();
        let n = model.n_constraints();
        Self {
            d,
            n,
            chain: model.structure == Structure::Chain,
            linear: model.constraint.is_linear(),
            cached: None,
            buf_d: vec![0.0; d],
            buf_n: vec![0.0; n],
        }
    }

    fn prepared(&mut self, model: &SystemModel, pen: Penalty, q: &[f64]) -> Result<&Prepared> {
        let inv_sq = pen.inv_sq();
        let reuse = self.linear
            && self
                .cached
                .as_ref()
                .is_some_and(|c| c.inv_sq == inv_sq);
        if !reuse {
            self.cached = Some(self.build(model, inv_sq, q)?);
        }
        Ok(self.cached.as_ref().unwrap())
    }

    fn build(&self, model: &SystemModel, inv_sq: f64, q: &[f64]) -> Result<Prepared> {
        let n = self.n;
        if self.chain {
            // G = tridiag(-1, 2, -1) on n = N - 1 sites; its eigenvalues are
            // 4 sin^2(k pi / 2N), k = 1..N-1.
            let len = n + 1;
            let diag = vec![2.0 + inv_sq; n];
            let off = vec![-1.0; n.saturating_sub(1)];
            let eig = |k: usize| {
                let s = (k as f64 * std::f64::consts::PI / (2.0 * len as f64)).sin();
                4.0 * s * s + inv_sq
            };
            let cond = eig(n) / eig(1);
            if !(cond.is_finite() && cond <= GRAM_CONDITION_LIMIT) {
                return Err(Error::GramSingular { cond });
            }
            let factor = TridiagFactor::new(&off, &diag, &off)?;
            let log_det = factor.log_abs_det();
            Ok(Prepared {
                inv_sq,
                factor: Factorization::Tridiag(factor),
                log_det,
                cond,
            })
        } else {
            let mut a = gram(model, q);
            if inv_sq != 0.0 {
                a += inv_dense(&model.mass_z) * inv_sq;
            }
            let eig = a.symmetric_eigenvalues();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in eig.iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            if !(cond.is_finite() && cond <= GRAM_CONDITION_LIMIT) {
                return Err(Error::GramSingular { cond });
            }
            let chol = Cholesky::new(a).ok_or(Error::GramSingular { cond })?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Ok(Prepared {
                inv_sq,
                factor: Factorization::Dense(chol),
                log_det,
                cond,
            })
        }
    }
}

pub(crate) fn inv_dense(m: &crate::linalg::SpdMatrix) -> DMatrix<f64> {
    let n = m.dim();
    let mut out = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        m.solve_into(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            out[(i, j)] = col[i];
        }
    }
    out
}

/// Dense Gram matrix `G(q) = Jxi(q)^T M^{-1} Jxi(q)`.
pub fn gram(model: &SystemModel, q: &[f64]) -> DMatrix<f64> {
    let jac = model.constraint.jacobian(q);
    let d = model.dim();
    let n = model.n_constraints();
    let mut minv_j = DMatrix::zeros(d, n);
    let mut col_in = vec![0.0; d];
    let mut col_out = vec![0.0; d];
    for b in 0..n {
        for i in 0..d {
            col_in[i] = jac[(i, b)];
        }
        model.mass.solve_into(&col_in, &mut col_out);
        for i in 0..d {
            minv_j[(i, b)] = col_out[i];
        }
    }
    jac.transpose() * minv_j
}

/// Cross Gram matrix `Jxi(q_left)^T M^{-1} Jxi(q_right)`, used by the
/// constraint solve of the reversible step where the two Jacobians are
/// evaluated at different points.
pub fn cross_gram(model: &SystemModel, q_left: &[f64], q_right: &[f64]) -> DMatrix<f64> {
    let jl = model.constraint.jacobian(q_left);
    let jr = model.constraint.jacobian(q_right);
    let d = model.dim();
    let n = model.n_constraints();
    let mut minv_jr = DMatrix::zeros(d, n);
    let mut col_in = vec![0.0; d];
    let mut col_out = vec![0.0; d];
    for b in 0..n {
        for i in 0..d {
            col_in[i] = jr[(i, b)];
        }
        model.mass.solve_into(&col_in, &mut col_out);
        for i in 0..d {
            minv_jr[(i, b)] = col_out[i];
        }
    }
    jl.transpose() * minv_jr
}

/// Condition number of the regularized Gram matrix at `q`.
pub fn gram_condition(
    model: &SystemModel,
    pen: Penalty,
    q: &[f64],
    ws: &mut GramWorkspace,
) -> Result<f64> {
    Ok(ws.prepared(model, pen, q)?.cond)
}

/// Solve `(G + M_z^{-1} / nu^2) x = rhs` in place.
pub fn solve_regularized_gram(
    model: &SystemModel,
    pen: Penalty,
    q: &[f64],
    rhs: &mut [f64],
    ws: &mut GramWorkspace,
) -> Result<()> {
    if rhs.len() != ws.n {
        return Err(Error::DimensionMismatch {
            context: "regularized Gram solve",
            expected: ws.n,
            got: rhs.len(),
        });
    }
    let prepared = ws.prepared(model, pen, q)?;
    match &prepared.factor {
        Factorization::Tridiag(f) => f.solve_slice(rhs),
        Factorization::Dense(chol) => {
            let mut v = DMatrix::from_column_slice(rhs.len(), 1, rhs);
            chol.solve_mut(&mut v);
            rhs.copy_from_slice(v.as_slice());
        }
    }
    Ok(())
}

/// Fixman corrector `V_fix(q) = ln det(G + M_z^{-1} / nu^2) / (2 beta)`.
pub fn fixman_potential(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    q: &[f64],
    ws: &mut GramWorkspace,
) -> Result<f64> {
    let prepared = ws.prepared(model, pen, q)?;
    Ok(prepared.log_det / (2.0 * beta))
}

/// Gradient of the Fixman corrector.
///
/// For a constant Jacobian the corrector is constant and the gradient is
/// zero. Otherwise `grad_i = sum_b [Hess(xi_b) W_(:,b)]_i / beta` with
/// `W = M^{-1} Jxi A^{-1}`; when the constraint map does not expose second
/// derivatives a central finite difference of the potential is used.
pub fn fixman_gradient(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    q: &[f64],
    out: &mut [f64],
    ws: &mut GramWorkspace,
) -> Result<()> {
    let d = model.dim();
    if out.len() != d {
        return Err(Error::DimensionMismatch {
            context: "Fixman gradient",
            expected: d,
            got: out.len(),
        });
    }
    if model.constraint.is_linear() {
        out.fill(0.0);
        return Ok(());
    }
    let n = model.n_constraints();
    // W = M^{-1} J A^{-1}, assembled column by column through the cached
    // factorization.
    let jac = model.constraint.jacobian(q);
    let mut minv_j = DMatrix::zeros(d, n);
    {
        let mut col_in = vec![0.0; d];
        let mut col_out = vec![0.0; d];
        for b in 0..n {
            for i in 0..d {
                col_in[i] = jac[(i, b)];
            }
            model.mass.solve_into(&col_in, &mut col_out);
            for i in 0..d {
                minv_j[(i, b)] = col_out[i];
            }
        }
    }
    let mut w = DMatrix::zeros(d, n);
    {
        let mut row = vec![0.0; n];
        for i in 0..d {
            for b in 0..n {
                row[b] = minv_j[(i, b)];
            }
            solve_regularized_gram(model, pen, q, &mut row, ws)?;
            for b in 0..n {
                w[(i, b)] = row[b];
            }
        }
    }
    if model.constraint.hessian_weighted_sum(q, &w, out) {
        for v in out.iter_mut() {
            *v /= beta;
        }
        return Ok(());
    }
    // No analytic second derivatives: central differences of the corrector.
    let mut qp = q.to_vec();
    for i in 0..d {
        let h = f64::EPSILON.cbrt() * q[i].abs().max(1.0);
        let orig = qp[i];
        qp[i] = orig + h;
        let up = fixman_potential(model, pen, beta, &qp, ws)?;
        qp[i] = orig - h;
        let dn = fixman_potential(model, pen, beta, &qp, ws)?;
        qp[i] = orig;
        out[i] = (up - dn) / (2.0 * h);
    }
    Ok(())
}

/// Project extended momenta onto the hidden constraint
/// `Jxi^T M^{-1} p = M_z^{-1} p_z / nu` by the canonical oblique projection:
/// `lambda = A^{-1} (Jxi^T M^{-1} p - M_z^{-1} p_z / nu)`,
/// `p <- p - Jxi lambda`, `p_z <- p_z + lambda / nu`.
///
/// Returns the multiplier. In the hard-constraint limit this reduces to the
/// usual cotangent-space projection of `p` and leaves `p_z` untouched.
pub fn project_momentum(
    model: &SystemModel,
    pen: Penalty,
    q: &[f64],
    p: &mut [f64],
    p_z: &mut [f64],
    ws: &mut GramWorkspace,
) -> Result<Vec<f64>> {
    let d = ws.d;
    let n = ws.n;
    let inv = pen.inv();
    let mut minv_p = std::mem::take(&mut ws.buf_d);
    model.mass.solve_into(p, &mut minv_p);
    let mut resid = vec![0.0; n];
    model
        .constraint
        .apply_jacobian_transpose(q, &minv_p, &mut resid);
    ws.buf_d = minv_p;
    if inv != 0.0 {
        let mut mzinv_pz = std::mem::take(&mut ws.buf_n);
        model.mass_z.solve_into(p_z, &mut mzinv_pz);
        for (r, v) in resid.iter_mut().zip(&mzinv_pz) {
            *r -= inv * v;
        }
        ws.buf_n = mzinv_pz;
    }
    solve_regularized_gram(model, pen, q, &mut resid, ws)?;
    let mut j_lambda = std::mem::take(&mut ws.buf_d);
    model.constraint.apply_jacobian(q, &resid, &mut j_lambda);
    for (pi, jl) in p.iter_mut().zip(&j_lambda[..d]) {
        *pi -= jl;
    }
    ws.buf_d = j_lambda;
    if inv != 0.0 {
        for (pz, l) in p_z.iter_mut().zip(&resid) {
            *pz += inv * l;
        }
    }
    Ok(resid)
}

/// Covariance of the extended momenta under the constrained Gibbs measure
/// at position `q`: `(M_ext - B A^{-1} B^T) / beta` with `B = [J; -I/nu]`
/// and `A` the regularized Gram matrix. This is the stationary law the
/// fluctuation/dissipation step must preserve.
pub fn constrained_momentum_covariance(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    q: &[f64],
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    let n = model.n_constraints();
    let inv = pen.inv();
    let jac = model.constraint.jacobian(q);
    let mut b = DMatrix::zeros(d + n, n);
    b.view_mut((0, 0), (d, n)).copy_from(&jac);
    for k in 0..n {
        b[(d + k, k)] = -inv;
    }
    let mut a = jac.transpose() * inv_dense(&model.mass) * &jac;
    if inv != 0.0 {
        a += inv_dense(&model.mass_z) * (inv * inv);
    }
    let a_inv = a
        .try_inverse()
        .ok_or(crate::error::Error::GramSingular { cond: f64::INFINITY })?;
    let mut cov = DMatrix::zeros(d + n, d + n);
    cov.view_mut((0, 0), (d, d))
        .copy_from(&model.mass.to_dense());
    cov.view_mut((d, d), (n, n))
        .copy_from(&model.mass_z.to_dense());
    cov -= &b * a_inv * b.transpose();
    Ok(cov / beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SpdMatrix;
    use crate::model::{ConstraintMap, PhaseState, Potential};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    struct ZeroPotential(usize);
    impl Potential for ZeroPotential {
        fn dim(&self) -> usize {
            self.0
        }
        fn value(&self, _q: &[f64]) -> f64 {
            0.0
        }
        fn gradient(&self, _q: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    // xi(q) = (q1, q1 + q2): a constant-Jacobian map with a non-trivial
    // Gram matrix [[1, 1], [1, 2]].
    struct SkewPair;
    impl ConstraintMap for SkewPair {
        fn dim(&self) -> usize {
            2
        }
        fn count(&self) -> usize {
            2
        }
        fn value(&self, q: &[f64], out: &mut [f64]) {
            out[0] = q[0];
            out[1] = q[0] + q[1];
        }
        fn apply_jacobian(&self, _q: &[f64], w: &[f64], out: &mut [f64]) {
            out[0] = w[0] + w[1];
            out[1] = w[1];
        }
        fn apply_jacobian_transpose(&self, _q: &[f64], v: &[f64], out: &mut [f64]) {
            out[0] = v[0] + v[1];
            out[1] = v[1];
        }
        fn is_linear(&self) -> bool {
            true
        }
    }

    fn skew_model() -> SystemModel {
        SystemModel::new(
            Arc::new(ZeroPotential(2)),
            Arc::new(SkewPair),
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            Structure::General,
        )
        .unwrap()
    }

    #[test]
    fn gram_of_skew_pair_is_known() {
        let model = skew_model();
        let g = gram(&model, &[0.0, 0.0]);
        let expect = [[1.0, 1.0], [1.0, 2.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(g[(i, j)], expect[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn fixman_matches_closed_form_on_skew_pair() {
        // det(G + I / nu^2) with G = [[1,1],[1,2]] is
        // (1 + s)(2 + s) - 1 for s = 1 / nu^2.
        let model = skew_model();
        let mut ws = GramWorkspace::new(&model);
        for nu in [0.5, 1.0, 4.0] {
            let s = 1.0 / (nu * nu);
            let det = (1.0 + s) * (2.0 + s) - 1.0;
            let beta = 1.7;
            let v = fixman_potential(&model, Penalty::Finite(nu), beta, &[0.3, -0.2], &mut ws)
                .unwrap();
            assert_relative_eq!(v, det.ln() / (2.0 * beta), epsilon = 1e-13);
        }
        let v_inf =
            fixman_potential(&model, Penalty::Infinite, 1.0, &[0.0, 0.0], &mut ws).unwrap();
        assert_relative_eq!(v_inf, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn projection_satisfies_hidden_constraint_and_is_idempotent() {
        let model = crate::models::circle_model(1.0, 0.4);
        let mut ws = GramWorkspace::new(&model);
        let pen = Penalty::Finite(3.0);
        let q = [0.6, 0.8];
        let mut p = vec![1.4, -0.3];
        let mut p_z = vec![0.7];
        project_momentum(&model, pen, &q, &mut p, &mut p_z, &mut ws).unwrap();
        let state = PhaseState {
            q: q.to_vec(),
            p: p.clone(),
            z: vec![0.0],
            p_z: p_z.clone(),
        };
        assert!(state.momentum_residual(&model, pen) < 1e-14);
        let (p0, pz0) = (p.clone(), p_z.clone());
        project_momentum(&model, pen, &q, &mut p, &mut p_z, &mut ws).unwrap();
        for (a, b) in p.iter().zip(&p0) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        for (a, b) in p_z.iter().zip(&pz0) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn hard_limit_projection_on_unit_circle() {
        // At q = (1, 0) / sqrt(2) scaled to the circle radius, projecting
        // p = (1, 0) against xi = |q|^2 - 1 at q = (1, 0) removes the
        // radial component entirely.
        let model = crate::models::circle_model(1.0, 0.4);
        let mut ws = GramWorkspace::new(&model);
        let q = [1.0, 0.0];
        let mut p = vec![1.0, 1.0];
        let mut p_z = vec![0.25];
        project_momentum(&model, Penalty::Infinite, &q, &mut p, &mut p_z, &mut ws).unwrap();
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(p[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(p_z[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn circle_fixman_gradient_matches_closed_form() {
        // xi = |q|^2 - 1: G = 4 |q|^2, A = 4 |q|^2 + 1 / nu^2, so
        // grad V_fix = 8 q / (2 beta A) = 4 q / (beta A).
        let model = crate::models::circle_model(1.0, 0.4);
        let mut ws = GramWorkspace::new(&model);
        let pen = Penalty::Finite(2.0);
        let beta = 1.5;
        let q = [0.9, -0.5];
        let mut grad = [0.0; 2];
        fixman_gradient(&model, pen, beta, &q, &mut grad, &mut ws).unwrap();
        let r2 = q[0] * q[0] + q[1] * q[1];
        let a = 4.0 * r2 + 0.25;
        for i in 0..2 {
            assert_relative_eq!(grad[i], 4.0 * q[i] / (beta * a), epsilon = 1e-10);
        }
    }

    #[test]
    fn finite_difference_gradient_agrees_with_analytic_path() {
        struct NoHess(crate::models::CircleConstraint);
        impl ConstraintMap for NoHess {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn count(&self) -> usize {
                self.0.count()
            }
            fn value(&self, q: &[f64], out: &mut [f64]) {
                self.0.value(q, out)
            }
            fn apply_jacobian(&self, q: &[f64], w: &[f64], out: &mut [f64]) {
                self.0.apply_jacobian(q, w, out)
            }
            fn apply_jacobian_transpose(&self, q: &[f64], v: &[f64], out: &mut [f64]) {
                self.0.apply_jacobian_transpose(q, v, out)
            }
        }
        let base = crate::models::circle_model(1.0, 0.4);
        let fd_model = SystemModel::new(
            base.potential.clone(),
            Arc::new(NoHess(crate::models::CircleConstraint)),
            SpdMatrix::identity(2),
            SpdMatrix::identity(1),
            Structure::General,
        )
        .unwrap();
        let mut ws_a = GramWorkspace::new(&base);
        let mut ws_b = GramWorkspace::new(&fd_model);
        let pen = Penalty::Finite(1.5);
        let q = [0.7, 0.6];
        let mut ga = [0.0; 2];
        let mut gb = [0.0; 2];
        fixman_gradient(&base, pen, 2.0, &q, &mut ga, &mut ws_a).unwrap();
        fixman_gradient(&fd_model, pen, 2.0, &q, &mut gb, &mut ws_b).unwrap();
        for (a, b) in ga.iter().zip(&gb) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn degenerate_gram_is_reported_singular() {
        // xi with a vanishing gradient at the origin makes G singular there.
        let model = crate::models::circle_model(1.0, 0.4);
        let mut ws = GramWorkspace::new(&model);
        let err = fixman_potential(&model, Penalty::Infinite, 1.0, &[0.0, 0.0], &mut ws);
        assert!(matches!(err, Err(Error::GramSingular { .. })));
    }
}
