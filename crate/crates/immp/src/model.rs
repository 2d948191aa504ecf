//! Core model types: potentials, constraint maps, mass matrices, the
//! extended phase state and the penalized/extended Hamiltonians.
//!
//! A system carries slow coordinates `q` in `R^d` with mass `M` and a map
//! `xi: R^d -> R^n` selecting the fast degrees of freedom. The penalization
//! couples `xi(q)` to auxiliary coordinates `z` with mass `M_z` through the
//! holonomic constraint `xi(q) = z / nu`. The penalized mass matrix
//! `M_nu(q) = M + nu^2 Jxi M_z Jxi^T` slows the fast motions by a factor
//! `nu` without changing the position marginal of the canonical measure.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{self, GramWorkspace};
use crate::linalg::{SpdMatrix, TridiagFactor};

/// Scalar potential on the slow coordinates.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, q: &[f64]) -> f64;
    fn gradient(&self, q: &[f64], out: &mut [f64]);
}

/// Differentiable map `xi: R^d -> R^n` selecting fast degrees of freedom.
///
/// The Jacobian `Jxi(q)` is the `d x n` matrix whose columns are the
/// gradients of the components of `xi`. Implementations provide
/// matrix-free Jacobian products; the dense Jacobian is only assembled for
/// small systems or inside `O(n^2)` geometry kernels.
pub trait ConstraintMap: Send + Sync {
    /// Ambient dimension `d`.
    fn dim(&self) -> usize;
    /// Number of constrained components `n`.
    fn count(&self) -> usize;
    /// `out = xi(q)`.
    fn value(&self, q: &[f64], out: &mut [f64]);
    /// `out = Jxi(q) w` for `w` in `R^n`.
    fn apply_jacobian(&self, q: &[f64], w: &[f64], out: &mut [f64]);
    /// `out = Jxi(q)^T v` for `v` in `R^d`.
    fn apply_jacobian_transpose(&self, q: &[f64], v: &[f64], out: &mut [f64]);

    /// Dense Jacobian, assembled column by column by default.
    fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let (d, n) = (self.dim(), self.count());
        let mut jac = DMatrix::zeros(d, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; d];
        for b in 0..n {
            e[b] = 1.0;
            self.apply_jacobian(q, &e, &mut col);
            e[b] = 0.0;
            for i in 0..d {
                jac[(i, b)] = col[i];
            }
        }
        jac
    }

    /// Accumulate `sum_b Hess(xi_b)(q) w_b` into `out`, where `w_b` is the
    /// b-th column of `weights` (`d x n`). Returns `false` when second
    /// derivatives are not available analytically; callers then fall back to
    /// finite differences of first-order quantities.
    fn hessian_weighted_sum(&self, q: &[f64], weights: &DMatrix<f64>, out: &mut [f64]) -> bool {
        let _ = (q, weights, out);
        false
    }

    /// Whether `xi` is affine, making the Jacobian and Gram matrix constant.
    fn is_linear(&self) -> bool {
        false
    }
}

/// Structural hint used to pick solver backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// No exploitable structure; dense kernels on small systems.
    General,
    /// Nearest-neighbour chain with identity masses and difference
    /// constraints: Gram and penalized-mass systems are tridiagonal.
    Chain,
}

/// Penalty strength applied to the fast degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Finite(f64),
    /// Hard-constraint limit: the fast directions are frozen.
    Infinite,
}

impl Penalty {
    /// `1 / nu`, zero in the hard-constraint limit.
    pub fn inv(self) -> f64 {
        match self {
            Penalty::Finite(v) => 1.0 / v,
            Penalty::Infinite => 0.0,
        }
    }

    /// `1 / nu^2`, zero in the hard-constraint limit.
    pub fn inv_sq(self) -> f64 {
        let i = self.inv();
        i * i
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Penalty::Finite(_))
    }

    pub fn finite_value(self) -> Option<f64> {
        match self {
            Penalty::Finite(v) => Some(v),
            Penalty::Infinite => None,
        }
    }

    /// Reject non-positive or non-finite penalties for constrained kernels.
    pub fn require_positive(self) -> Result<()> {
        match self {
            Penalty::Finite(v) if v > 0.0 && v.is_finite() => Ok(()),
            Penalty::Infinite => Ok(()),
            Penalty::Finite(v) => Err(Error::InvalidPenalty(format!(
                "constrained kernels need nu > 0 or the hard-constraint mode, got {v}"
            ))),
        }
    }
}

/// How the penalty scales with discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyRule {
    /// Fixed penalty, independent of the timestep.
    Fixed(Penalty),
    /// `nu = nu_bar * dt^k`; order of accuracy on the slow variables is
    /// `min(2, 2k)`.
    TimestepScaled { nu_bar: f64, k: f64 },
    /// `nu = nu_bar / eps` for a model with stiffness scale `eps`.
    StiffnessScaled { nu_bar: f64 },
}

/// Penalty selection for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub rule: PenaltyRule,
}

impl PenaltyConfig {
    pub fn fixed(nu: f64) -> Self {
        Self {
            rule: PenaltyRule::Fixed(Penalty::Finite(nu)),
        }
    }

    pub fn infinite() -> Self {
        Self {
            rule: PenaltyRule::Fixed(Penalty::Infinite),
        }
    }

    pub fn timestep_scaled(nu_bar: f64, k: f64) -> Self {
        Self {
            rule: PenaltyRule::TimestepScaled { nu_bar, k },
        }
    }

    pub fn stiffness_scaled(nu_bar: f64) -> Self {
        Self {
            rule: PenaltyRule::StiffnessScaled { nu_bar },
        }
    }

    /// Resolve the penalty for a concrete timestep and (optionally) a model
    /// stiffness scale.
    pub fn resolve(&self, dt: f64, eps: Option<f64>) -> Result<Penalty> {
        match self.rule {
            PenaltyRule::Fixed(p) => Ok(p),
            PenaltyRule::TimestepScaled { nu_bar, k } => {
                Ok(Penalty::Finite(nu_bar * dt.powf(k)))
            }
            PenaltyRule::StiffnessScaled { nu_bar } => {
                let eps = eps.ok_or_else(|| {
                    Error::InvalidPenalty(
                        "stiffness-scaled penalty needs the model's eps".into(),
                    )
                })?;
                Ok(Penalty::Finite(nu_bar / eps))
            }
        }
    }
}

/// Friction and inverse temperature for the fluctuation/dissipation part.
///
/// The noise amplitudes are tied to the friction by `sigma sigma^T =
/// 2 gamma / beta` on the slow block and `sigma_z sigma_z^T = 2 gamma_z /
/// beta` on the fast block.
#[derive(Debug, Clone)]
pub struct ThermostatConfig {
    pub beta: f64,
    pub gamma: SpdMatrix,
    pub gamma_z: SpdMatrix,
}

impl ThermostatConfig {
    /// Scalar frictions `gamma` on the slow block and `gamma_z` on the fast
    /// block.
    pub fn scalar(beta: f64, gamma: f64, gamma_z: f64, d: usize, n: usize) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            beta,
            gamma: SpdMatrix::scaled(d, gamma)?,
            gamma_z: SpdMatrix::scaled(n, gamma_z)?,
        })
    }
}

/// A penalized system: potential, constraint map, masses and structure hint.
pub struct SystemModel {
    pub potential: Arc<dyn Potential>,
    pub constraint: Arc<dyn ConstraintMap>,
    pub mass: SpdMatrix,
    pub mass_z: SpdMatrix,
    pub structure: Structure,
}

impl SystemModel {
    pub fn new(
        potential: Arc<dyn Potential>,
        constraint: Arc<dyn ConstraintMap>,
        mass: SpdMatrix,
        mass_z: SpdMatrix,
        structure: Structure,
    ) -> Result<Self> {
        let d = potential.dim();
        if constraint.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "constraint map ambient dimension",
                expected: d,
                got: constraint.dim(),
            });
        }
        if mass.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "mass matrix",
                expected: d,
                got: mass.dim(),
            });
        }
        if mass_z.dim() != constraint.count() {
            return Err(Error::DimensionMismatch {
                context: "fast mass matrix",
                expected: constraint.count(),
                got: mass_z.dim(),
            });
        }
        if !mass.is_positive_definite() || !mass_z.is_positive_definite() {
            return Err(Error::InvalidConfig(
                "mass matrices must be positive definite".into(),
            ));
        }
        if structure == Structure::Chain {
            let chain_ok = matches!(mass, SpdMatrix::Identity(_))
                && matches!(mass_z, SpdMatrix::Identity(_))
                && constraint.is_linear();
            if !chain_ok {
                return Err(Error::InvalidConfig(
                    "chain structure requires identity masses and a linear constraint map".into(),
                ));
            }
        }
        Ok(Self {
            potential,
            constraint,
            mass,
            mass_z,
            structure,
        })
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraint.count()
    }
}

/// Point in the extended phase space `(q, p, z, p_z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    pub p_z: Vec<f64>,
}

impl PhaseState {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            q: vec![0.0; d],
            p: vec![0.0; d],
            z: vec![0.0; n],
            p_z: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|x| x.is_finite())
            && self.p.iter().all(|x| x.is_finite())
            && self.z.iter().all(|x| x.is_finite())
            && self.p_z.iter().all(|x| x.is_finite())
    }

    /// Flip both momentum blocks in place (used on Metropolis rejection).
    pub fn flip_momenta(&mut self) {
        for v in self.p.iter_mut() {
            *v = -*v;
        }
        for v in self.p_z.iter_mut() {
            *v = -*v;
        }
    }

    /// Max-norm violation of the position constraint `xi(q) = z / nu`.
    pub fn position_residual(&self, model: &SystemModel, pen: Penalty) -> f64 {
        let mut xi = vec![0.0; model.n_constraints()];
        model.constraint.value(&self.q, &mut xi);
        let inv = pen.inv();
        xi.iter()
            .zip(&self.z)
            .map(|(x, z)| (x - z * inv).abs())
            .fold(0.0, f64::max)
    }

    /// Max-norm violation of the hidden momentum constraint
    /// `Jxi^T M^{-1} p = M_z^{-1} p_z / nu`.
    pub fn momentum_residual(&self, model: &SystemModel, pen: Penalty) -> f64 {
        let d = model.dim();
        let n = model.n_constraints();
        let mut minv_p = vec![0.0; d];
        model.mass.solve_into(&self.p, &mut minv_p);
        let mut lhs = vec![0.0; n];
        model
            .constraint
            .apply_jacobian_transpose(&self.q, &minv_p, &mut lhs);
        let mut mz_pz = vec![0.0; n];
        model.mass_z.solve_into(&self.p_z, &mut mz_pz);
        let inv = pen.inv();
        lhs.iter()
            .zip(&mz_pz)
            .map(|(a, b)| (a - b * inv).abs())
            .fold(0.0, f64::max)
    }
}

/// `out = M_nu(q) v = M v + nu^2 Jxi M_z Jxi^T v`.
pub fn penalized_mass_apply(
    model: &SystemModel,
    pen: Penalty,
    q: &[f64],
    v: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let nu = pen.finite_value().ok_or_else(|| {
        Error::InvalidPenalty("the penalized mass matrix is unbounded at nu = infinity".into())
    })?;
    let d = model.dim();
    let n = model.n_constraints();
    model.mass.apply(v, out);
    let mut jt_v = vec![0.0; n];
    model.constraint.apply_jacobian_transpose(q, v, &mut jt_v);
    let mut mz = vec![0.0; n];
    model.mass_z.apply(&jt_v, &mut mz);
    let mut back = vec![0.0; d];
    model.constraint.apply_jacobian(q, &mz, &mut back);
    let nu2 = nu * nu;
    for (o, b) in out.iter_mut().zip(&back) {
        *o += nu2 * b;
    }
    Ok(())
}

/// `out = M_nu(q)^{-1} rhs`, exploiting chain structure when available.
pub fn penalized_mass_solve(
    model: &SystemModel,
    pen: Penalty,
    q: &[f64],
    rhs: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let nu = pen.finite_value().ok_or_else(|| {
        Error::InvalidPenalty("the penalized mass matrix is unbounded at nu = infinity".into())
    })?;
    let d = model.dim();
    match model.structure {
        Structure::Chain => {
            // M_nu = Id + nu^2 D^T D with D the difference matrix: a
            // tridiagonal system solved by a Thomas sweep.
            let nu2 = nu * nu;
            let mut diag = vec![1.0 + 2.0 * nu2; d];
            diag[0] = 1.0 + nu2;
            diag[d - 1] = 1.0 + nu2;
            let off = vec![-nu2; d - 1];
            let factor = TridiagFactor::new(&off, &diag, &off)?;
            out.copy_from_slice(rhs);
            factor.solve_slice(out);
            Ok(())
        }
        Structure::General => {
            let jac = model.constraint.jacobian(q);
            let mut mnu = model.mass.to_dense();
            let mz_jt = {
                let n = model.n_constraints();
                let mut cols = DMatrix::zeros(n, d);
                for i in 0..d {
                    let mut col_in = vec![0.0; n];
                    for b in 0..n {
                        col_in[b] = jac[(i, b)];
                    }
                    let mut col_out = vec![0.0; n];
                    model.mass_z.apply(&col_in, &mut col_out);
                    for b in 0..n {
                        cols[(b, i)] = col_out[b];
                    }
                }
                cols
            };
            mnu += (&jac * mz_jt) * (nu * nu);
            let chol = nalgebra::Cholesky::new(mnu)
                .ok_or(Error::GramSingular { cond: f64::INFINITY })?;
            let mut v = DMatrix::from_column_slice(d, 1, rhs);
            chol.solve_mut(&mut v);
            out.copy_from_slice(v.as_slice());
            Ok(())
        }
    }
}

/// Extended Hamiltonian
/// `H = p^T M^{-1} p / 2 + p_z^T M_z^{-1} p_z / 2 + V(q) + V_fix(q)`,
/// with the penalty-regularized Fixman term.
pub fn immp_hamiltonian(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    state: &PhaseState,
    ws: &mut GramWorkspace,
) -> Result<f64> {
    let kinetic = 0.5 * model.mass.quad_inv(&state.p) + 0.5 * model.mass_z.quad_inv(&state.p_z);
    let v = model.potential.value(&state.q);
    let fix = geometry::fixman_potential(model, pen, beta, &state.q, ws)?;
    Ok(kinetic + v + fix)
}

/// Penalized-variable Hamiltonian
/// `H_nu = p_nu^T M_nu^{-1} p_nu / 2 + V(q) + V_fix(q)`.
///
/// On states satisfying the hidden momentum constraint with
/// `p_nu = p + nu Jxi p_z`, this agrees with [`immp_hamiltonian`].
pub fn penalized_hamiltonian(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    q: &[f64],
    p_nu: &[f64],
    ws: &mut GramWorkspace,
) -> Result<f64> {
    let mut minv = vec![0.0; p_nu.len()];
    penalized_mass_solve(model, pen, q, p_nu, &mut minv)?;
    let kinetic = 0.5 * p_nu.iter().zip(&minv).map(|(a, b)| a * b).sum::<f64>();
    let v = model.potential.value(q);
    let fix = geometry::fixman_potential(model, pen, beta, q, ws)?;
    Ok(kinetic + v + fix)
}

/// Penalized momenta `p_nu = p + nu Jxi(q) p_z` of a constraint-satisfying
/// state.
pub fn penalized_momentum(model: &SystemModel, pen: Penalty, state: &PhaseState) -> Result<Vec<f64>> {
    let nu = pen.finite_value().ok_or_else(|| {
        Error::InvalidPenalty("penalized momenta are undefined at nu = infinity".into())
    })?;
    let mut out = vec![0.0; model.dim()];
    model.constraint.apply_jacobian(&state.q, &state.p_z, &mut out);
    for (o, pi) in out.iter_mut().zip(&state.p) {
        *o = pi + nu * *o;
    }
    Ok(out)
}

/// Draw `(p, p_z) ~ N(0, M_ext / beta)` and project onto the hidden
/// momentum constraint, yielding the canonical constrained momentum law.
pub fn sample_constrained_momenta<R: Rng>(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    q: &[f64],
    ws: &mut GramWorkspace,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    let n = model.n_constraints();
    let scale = 1.0 / beta.sqrt();
    let u: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let uz: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut p = vec![0.0; d];
    let mut p_z = vec![0.0; n];
    model.mass.sqrt_apply(&u, &mut p);
    model.mass_z.sqrt_apply(&uz, &mut p_z);
    for v in p.iter_mut() {
        *v *= scale;
    }
    for v in p_z.iter_mut() {
        *v *= scale;
    }
    geometry::project_momentum(model, pen, q, &mut p, &mut p_z, ws)?;
    Ok((p, p_z))
}

/// Build a constraint-consistent extended state around positions `q`:
/// `z = nu xi(q)` and canonically distributed projected momenta.
pub fn init_state<R: Rng>(
    model: &SystemModel,
    pen: Penalty,
    beta: f64,
    q: &[f64],
    ws: &mut GramWorkspace,
    rng: &mut R,
) -> Result<PhaseState> {
    pen.require_positive()?;
    let n = model.n_constraints();
    let mut z = vec![0.0; n];
    if let Penalty::Finite(nu) = pen {
        model.constraint.value(q, &mut z);
        for v in z.iter_mut() {
            *v *= nu;
        }
    }
    let (p, p_z) = sample_constrained_momenta(model, pen, beta, q, ws, rng)?;
    Ok(PhaseState {
        q: q.to_vec(),
        p,
        z,
        p_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{circle_model, double_well_model};
    use crate::rng::{rng_stream, StreamTag};
    use approx::assert_relative_eq;

    #[test]
    fn scalar_extended_hamiltonian_reduces_to_fixman_constant() {
        // d = n = 1, xi(q) = q, M = M_z = 1, nu = 1, beta = 1, zero
        // potential and momenta: H = ln(2) / 2 from the Fixman term alone.
        let model = double_well_model(0.0, 1.0);
        let mut ws = GramWorkspace::new(&model);
        let state = PhaseState {
            q: vec![0.3],
            p: vec![0.0],
            z: vec![0.3],
            p_z: vec![0.0],
        };
        let h = immp_hamiltonian(&model, Penalty::Finite(1.0), 1.0, &state, &mut ws).unwrap();
        assert_relative_eq!(h, 0.5 * 2.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn penalized_and_extended_hamiltonians_agree_on_constrained_states() {
        let model = circle_model(1.0, 0.4);
        let mut ws = GramWorkspace::new(&model);
        let pen = Penalty::Finite(2.5);
        let beta = 1.3;
        let q = [0.8, -0.6];
        let mut rng = rng_stream(11, 0, StreamTag::Momenta);
        let state = init_state(&model, pen, beta, &q, &mut ws, &mut rng).unwrap();
        let p_nu = penalized_momentum(&model, pen, &state).unwrap();
        let h_ext = immp_hamiltonian(&model, pen, beta, &state, &mut ws).unwrap();
        let h_pen = penalized_hamiltonian(&model, pen, beta, &state.q, &p_nu, &mut ws).unwrap();
        assert_relative_eq!(h_ext, h_pen, max_relative = 1e-12);
    }

    #[test]
    fn init_state_satisfies_both_constraints() {
        let model = circle_model(1.0, 0.4);
        let mut ws = GramWorkspace::new(&model);
        let pen = Penalty::Finite(3.0);
        let mut rng = rng_stream(5, 2, StreamTag::Momenta);
        let state = init_state(&model, pen, 2.0, &[0.6, 0.8], &mut ws, &mut rng).unwrap();
        assert!(state.position_residual(&model, pen) < 1e-14);
        assert!(state.momentum_residual(&model, pen) < 1e-13);
    }

    #[test]
    fn penalized_mass_apply_then_solve_round_trips() {
        let model = circle_model(1.0, 0.4);
        let pen = Penalty::Finite(7.0);
        let q = [0.6, -0.8];
        let v = [0.4, 1.1];
        let mut mv = [0.0; 2];
        penalized_mass_apply(&model, pen, &q, &v, &mut mv).unwrap();
        let mut back = [0.0; 2];
        penalized_mass_solve(&model, pen, &q, &mv, &mut back).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn infinite_penalty_rejects_mass_kernels() {
        let model = double_well_model(1.0, 1.0);
        let mut out = [0.0];
        assert!(matches!(
            penalized_mass_apply(&model, Penalty::Infinite, &[0.1], &[1.0], &mut out),
            Err(Error::InvalidPenalty(_))
        ));
    }

    #[test]
    fn penalty_rules_resolve() {
        let cfg = PenaltyConfig::timestep_scaled(2.0, 1.0);
        assert_eq!(
            cfg.resolve(0.25, None).unwrap(),
            Penalty::Finite(0.5)
        );
        let cfg = PenaltyConfig::stiffness_scaled(3.0);
        assert_eq!(
            cfg.resolve(0.1, Some(0.01)).unwrap(),
            Penalty::Finite(300.0)
        );
        assert!(cfg.resolve(0.1, None).is_err());
        assert!(Penalty::Finite(0.0).require_positive().is_err());
    }
}
