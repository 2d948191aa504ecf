//! Time steppers for the penalized system: the constrained leapfrog
//! (RATTLE) step, the constrained implicit-midpoint fluctuation/dissipation
//! step, their Metropolized composition, an unconstrained leapfrog baseline
//! and the penalty-tuning search.
//!
//! All stochastic steps draw their Gaussians in the full `R^{d+n}` extended
//! momentum space in a fixed order before any penalty-dependent transform,
//! so two runs with equal seeds but different penalties consume identical
//! noise streams. Acceptance decisions come from a separate uniform stream.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{self, GramWorkspace};
use crate::linalg::{SpdMatrix, TridiagFactor};
use crate::model::{Penalty, PhaseState, Potential, Structure, SystemModel, ThermostatConfig};
use crate::rng::{rng_stream, StreamTag};

/// Placement of the fluctuation/dissipation part around the Hamiltonian
/// part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Splitting {
    /// Hamiltonian step then a full thermostat step.
    #[default]
    Lie,
    /// Half thermostat, Hamiltonian step, half thermostat.
    Strang,
}

/// Residual ceiling below which a stalled constraint Newton iteration
/// counts as converged. The multiplier solve cannot beat roughly
/// `cond(S)^2 * machine-eps` in f64, which passes 1e-8 for the largest
/// ill-conditioned chains; anything stalled above this ceiling is a
/// genuine failure.
pub const NEWTON_STALL_FLOOR: f64 = 1e-7;

/// Step sizes, solver tolerances and algorithmic switches.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Convergence tolerance of the Newton solve for the position
    /// constraint multiplier, up to the roundoff stall ceiling
    /// [`NEWTON_STALL_FLOOR`].
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Residual tolerance both constraints must satisfy after a step.
    pub tol_c: f64,
    /// Include the Fixman gradient in the step forces. The Metropolis
    /// Hamiltonian always contains the Fixman term regardless.
    pub fixman_in_forces: bool,
    pub metropolis: bool,
    pub ou_substeps: usize,
    /// Refresh the constraint Jacobian at the Newton trial point; when
    /// false a quasi-Newton iteration with the start-of-step Jacobian is
    /// used.
    pub refresh_jacobian: bool,
    pub splitting: Splitting,
}

impl IntegratorConfig {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            tol_c: 1e-9,
            fixman_in_forces: true,
            metropolis: true,
            ou_substeps: 1,
            refresh_jacobian: true,
            splitting: Splitting::Lie,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "timestep must be positive, got {}",
                self.dt
            )));
        }
        if !(self.newton_tol < self.tol_c) {
            return Err(Error::InvalidConfig(format!(
                "newton_tol ({}) must be below tol_c ({})",
                self.newton_tol, self.tol_c
            )));
        }
        if self.ou_substeps == 0 {
            return Err(Error::InvalidConfig("ou_substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub accepted: bool,
    pub delta_h: f64,
    pub newton_iters: usize,
    /// Multiplier of the position constraint (half kick).
    pub lambda_half: Vec<f64>,
    /// Multiplier of the final momentum projection.
    pub lambda_one: Vec<f64>,
    pub ou_substeps_used: usize,
}

impl StepReport {
    fn empty() -> Self {
        Self {
            accepted: true,
            delta_h: 0.0,
            newton_iters: 0,
            lambda_half: Vec::new(),
            lambda_one: Vec::new(),
            ou_substeps_used: 0,
        }
    }
}

/// Potential energy seen by the steppers, optionally depending on the
/// auxiliary coordinates (used by the hard-constraint effective sampler).
pub trait ForceField: Send + Sync {
    fn energy(&self, q: &[f64], z: &[f64]) -> f64;
    fn grad_q(&self, q: &[f64], z: &[f64], out: &mut [f64]);
    fn grad_z(&self, _q: &[f64], _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

enum FieldRef<'a> {
    Slow(&'a dyn Potential),
    Custom(&'a dyn ForceField),
}

impl FieldRef<'_> {
    fn energy(&self, q: &[f64], z: &[f64]) -> f64 {
        match self {
            FieldRef::Slow(p) => p.value(q),
            FieldRef::Custom(f) => f.energy(q, z),
        }
    }
    fn grad_q(&self, q: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            FieldRef::Slow(p) => p.gradient(q, out),
            FieldRef::Custom(f) => f.grad_q(q, z, out),
        }
    }
    fn grad_z(&self, q: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            FieldRef::Slow(_) => out.fill(0.0),
            FieldRef::Custom(f) => f.grad_z(q, z, out),
        }
    }
}

/// Paired random streams of one walker: Gaussian noise for the thermostat
/// and uniforms for accept/reject decisions. Keeping them separate makes
/// the noise sequence independent of acceptance outcomes.
pub struct WalkerRng {
    pub noise: ChaCha12Rng,
    pub accept: ChaCha12Rng,
}

impl WalkerRng {
    pub fn new(seed: u64, replica: u64) -> Self {
        Self {
            noise: rng_stream(seed, replica, StreamTag::OuNoise),
            accept: rng_stream(seed, replica, StreamTag::Metropolis),
        }
    }
}

/// `nu = nubar * dt^k`, the penalty scaling that makes the sampler a
/// consistent discretization of the unpenalized dynamics (order
/// `min(2, 2k)` on the slow variables).
pub fn consistent_penalty(dt: f64, nubar: f64, k: f64) -> f64 {
    nubar * dt.powf(k)
}

/// `min(1, e^{-beta dh})` with NaN mapped to 0.
pub fn acceptance_probability(beta: f64, delta_h: f64) -> f64 {
    if delta_h.is_nan() {
        return 0.0;
    }
    (-beta * delta_h).exp().min(1.0)
}

/// Spectral ratio `max((dt/2) lambda_max(Gamma) / lambda_min(M))` over the
/// slow and fast blocks; the midpoint fluctuation/dissipation step is
/// well-behaved when this is at most 1.
pub fn ou_stability_ratio(model: &SystemModel, thermo: &ThermostatConfig, dt: f64) -> f64 {
    let rp = 0.5 * dt * thermo.gamma.eig_max() / model.mass.eig_min();
    let rz = 0.5 * dt * thermo.gamma_z.eig_max() / model.mass_z.eig_min();
    rp.max(rz)
}

/// Smallest power-of-two multiple of `base` substeps satisfying the
/// stability ratio.
pub fn required_ou_substeps(
    model: &SystemModel,
    thermo: &ThermostatConfig,
    dt: f64,
    base: usize,
) -> usize {
    let mut k = base.max(1);
    while ou_stability_ratio(model, thermo, dt / k as f64) > 1.0 && k < (1 << 24) {
        k *= 2;
    }
    k
}

static OU_REFINE_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_ou_refinement(needed: usize, configured: usize) {
    if !OU_REFINE_WARNED.swap(true, Ordering::Relaxed) {
        eprintln!(
            "warning: fluctuation/dissipation step refined to {needed} substeps \
             (configured {configured}) to satisfy the midpoint stability bound"
        );
    }
}

struct OuCache {
    dt_sub: f64,
    /// `M + (dt/2) Gamma` on the slow block, solved against for the damped
    /// inverse.
    a_p: SpdMatrix,
    a_z: SpdMatrix,
    /// Multiplier system factorization, cached for constant Jacobians.
    s_factor: Option<SFactor>,
}

enum SFactor {
    Tridiag(TridiagFactor),
    Dense(Cholesky<f64, Dyn>),
}

#[derive(Default)]
struct Buffers {
    f: Vec<f64>,
    fz: Vec<f64>,
    grad: Vec<f64>,
    pb: Vec<f64>,
    pzb: Vec<f64>,
    qbar: Vec<f64>,
    zbar: Vec<f64>,
    q1: Vec<f64>,
    z1: Vec<f64>,
    resid: Vec<f64>,
    tmp_d: Vec<f64>,
    tmp_d2: Vec<f64>,
    tmp_n: Vec<f64>,
    u: Vec<f64>,
    uz: Vec<f64>,
    rhs_p: Vec<f64>,
    rhs_z: Vec<f64>,
}

impl Buffers {
    fn new(d: usize, n: usize) -> Self {
        Self {
            f: vec![0.0; d],
            fz: vec![0.0; n],
            grad: vec![0.0; d],
            pb: vec![0.0; d],
            pzb: vec![0.0; n],
            qbar: vec![0.0; d],
            zbar: vec![0.0; n],
            q1: vec![0.0; d],
            z1: vec![0.0; n],
            resid: vec![0.0; n],
            tmp_d: vec![0.0; d],
            tmp_d2: vec![0.0; d],
            tmp_n: vec![0.0; n],
            u: vec![0.0; d],
            uz: vec![0.0; n],
            rhs_p: vec![0.0; d],
            rhs_z: vec![0.0; n],
        }
    }
}

/// Reusable stepper for one penalized system: owns the geometry workspace,
/// scratch space and thermostat caches of a single walker.
pub struct Stepper<'a> {
    pub model: &'a SystemModel,
    field: FieldRef<'a>,
    pub pen: Penalty,
    pub thermo: &'a ThermostatConfig,
    pub cfg: IntegratorConfig,
    pub ws: GramWorkspace,
    bufs: Buffers,
    saved: PhaseState,
    ou: Option<OuCache>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        model: &'a SystemModel,
        thermo: &'a ThermostatConfig,
        pen: Penalty,
        cfg: IntegratorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        pen.require_positive()?;
        let (d, n) = (model.dim(), model.n_constraints());
        Ok(Self {
            model,
            field: FieldRef::Slow(model.potential.as_ref()),
            pen,
            thermo,
            cfg,
            ws: GramWorkspace::new(model),
            bufs: Buffers::new(d, n),
            saved: PhaseState::zeros(d, n),
            ou: None,
        })
    }

    /// Stepper whose potential is supplied externally, e.g. the two-scale
    /// energy of the hard-constraint effective sampler.
    pub fn with_field(
        model: &'a SystemModel,
        field: &'a dyn ForceField,
        thermo: &'a ThermostatConfig,
        pen: Penalty,
        cfg: IntegratorConfig,
    ) -> Result<Self> {
        let mut s = Self::new(model, thermo, pen, cfg)?;
        s.field = FieldRef::Custom(field);
        Ok(s)
    }

    /// Extended Hamiltonian at `s`, always including the Fixman term.
    pub fn energy(&mut self, s: &PhaseState) -> Result<f64> {
        let kin = 0.5 * self.model.mass.quad_inv(&s.p)
            + 0.5 * self.model.mass_z.quad_inv(&s.p_z);
        let pot = self.field.energy(&s.q, &s.z);
        let fix = geometry::fixman_potential(
            self.model,
            self.pen,
            self.thermo.beta,
            &s.q,
            &mut self.ws,
        )?;
        Ok(kin + pot + fix)
    }

    fn force_q(&mut self, q: &[f64], z: &[f64], into_f: bool) -> Result<()> {
        let Self {
            model,
            field,
            pen,
            thermo,
            cfg,
            ws,
            bufs,
            ..
        } = self;
        let out = if into_f { &mut bufs.f } else { &mut bufs.tmp_d };
        field.grad_q(q, z, out);
        for v in out.iter_mut() {
            *v = -*v;
        }
        if cfg.fixman_in_forces && !model.constraint.is_linear() {
            geometry::fixman_gradient(model, *pen, thermo.beta, q, &mut bufs.grad, ws)?;
            for (o, g) in out.iter_mut().zip(&bufs.grad) {
                *o -= g;
            }
        }
        Ok(())
    }

    /// One reversible constrained leapfrog step, mutating `s` in place.
    ///
    /// Half kick with the position-constraint multiplier solved by Newton,
    /// drift, second half kick, momentum projection. Fails with
    /// `NewtonDiverged` when the multiplier solve does not contract.
    pub fn rattle_step(&mut self, s: &mut PhaseState) -> Result<StepReport> {
        let dt = self.cfg.dt;
        let inv = self.pen.inv();
        let inv_sq = inv * inv;
        let n = self.model.n_constraints();

        self.force_q(&s.q, &s.z, true)?;
        self.field.grad_z(&s.q, &s.z, &mut self.bufs.fz);
        for v in self.bufs.fz.iter_mut() {
            *v = -*v;
        }
        // Base half kick and drift endpoints, before the multiplier.
        for ((pb, p), f) in self.bufs.pb.iter_mut().zip(&s.p).zip(&self.bufs.f) {
            *pb = p + 0.5 * dt * f;
        }
        for ((pzb, pz), fz) in self.bufs.pzb.iter_mut().zip(&s.p_z).zip(&self.bufs.fz) {
            *pzb = pz + 0.5 * dt * fz;
        }
        self.model.mass.solve_into(&self.bufs.pb, &mut self.bufs.tmp_d);
        for ((qb, q), v) in self.bufs.qbar.iter_mut().zip(&s.q).zip(&self.bufs.tmp_d) {
            *qb = q + dt * v;
        }
        self.model.mass_z.solve_into(&self.bufs.pzb, &mut self.bufs.tmp_n);
        for ((zb, z), v) in self.bufs.zbar.iter_mut().zip(&s.z).zip(&self.bufs.tmp_n) {
            *zb = z + dt * v;
        }

        // Newton iteration on the multiplier: the trial endpoint is
        // q1 = qbar - dt M^{-1} J0 lambda, z1 = zbar + (dt/nu) Mz^{-1} lambda.
        let mut lambda = vec![0.0; n];
        self.bufs.q1.copy_from_slice(&self.bufs.qbar);
        self.bufs.z1.copy_from_slice(&self.bufs.zbar);
        let mut iters = 0usize;
        let mut best = f64::INFINITY;
        loop {
            self.model
                .constraint
                .value(&self.bufs.q1, &mut self.bufs.resid);
            for (r, z) in self.bufs.resid.iter_mut().zip(&self.bufs.z1) {
                *r -= inv * z;
            }
            let res = self
                .bufs
                .resid
                .iter()
                .fold(0.0f64, |a, r| a.max(r.abs()));
            if res <= self.cfg.newton_tol {
                break;
            }
            // Large ill-conditioned Gram systems bottom out near
            // cond^2 * machine-eps before reaching newton_tol; a stalled
            // iterate below the floor is converged to working precision.
            if iters >= 2 && res > 0.5 * best && res <= NEWTON_STALL_FLOOR {
                break;
            }
            let diverging = !res.is_finite() || (iters >= 3 && res > 10.0 * best);
            if diverging || iters >= self.cfg.newton_max_iter {
                return Err(Error::NewtonDiverged {
                    iters,
                    residual: res,
                });
            }
            best = best.min(res);
            // Solve [J(qt)^T M^{-1} J0 + Mz^{-1}/nu^2] delta = resid / dt.
            for r in self.bufs.resid.iter_mut() {
                *r /= dt;
            }
            self.newton_solve(&s.q, inv_sq)?;
            for (l, dl) in lambda.iter_mut().zip(&self.bufs.resid) {
                *l += dl;
            }
            // Recompute the trial endpoint from scratch.
            self.model
                .constraint
                .apply_jacobian(&s.q, &lambda, &mut self.bufs.tmp_d);
            self.model
                .mass
                .solve_into(&self.bufs.tmp_d, &mut self.bufs.tmp_d2);
            for ((q1, qb), v) in self
                .bufs
                .q1
                .iter_mut()
                .zip(&self.bufs.qbar)
                .zip(&self.bufs.tmp_d2)
            {
                *q1 = qb - dt * v;
            }
            if inv != 0.0 {
                self.model.mass_z.solve_into(&lambda, &mut self.bufs.tmp_n);
                for ((z1, zb), v) in self
                    .bufs
                    .z1
                    .iter_mut()
                    .zip(&self.bufs.zbar)
                    .zip(&self.bufs.tmp_n)
                {
                    *z1 = zb + dt * inv * v;
                }
            }
            iters += 1;
        }

        // Momenta after the completed half kick.
        self.model
            .constraint
            .apply_jacobian(&s.q, &lambda, &mut self.bufs.tmp_d);
        for ((p, pb), jl) in s
            .p
            .iter_mut()
            .zip(&self.bufs.pb)
            .zip(&self.bufs.tmp_d)
        {
            *p = pb - jl;
        }
        for ((pz, pzb), l) in s.p_z.iter_mut().zip(&self.bufs.pzb).zip(&lambda) {
            *pz = pzb + inv * l;
        }
        s.q.copy_from_slice(&self.bufs.q1);
        s.z.copy_from_slice(&self.bufs.z1);

        // Second half kick at the endpoint, then projection onto the
        // hidden momentum constraint.
        self.force_q(&s.q, &s.z, true)?;
        self.field.grad_z(&s.q, &s.z, &mut self.bufs.fz);
        for ((p, f), _) in s.p.iter_mut().zip(&self.bufs.f).zip(0..) {
            *p += 0.5 * dt * f;
        }
        for (pz, fz) in s.p_z.iter_mut().zip(&self.bufs.fz) {
            *pz -= 0.5 * dt * fz;
        }
        let Self { model, pen, ws, .. } = self;
        let lambda_one = geometry::project_momentum(model, *pen, &s.q, &mut s.p, &mut s.p_z, ws)?;

        debug_assert!(
            s.position_residual(self.model, self.pen) <= self.cfg.tol_c.max(NEWTON_STALL_FLOOR),
            "position constraint violated after accepted step"
        );
        debug_assert!(
            s.momentum_residual(self.model, self.pen) <= self.cfg.tol_c.max(NEWTON_STALL_FLOOR),
            "momentum constraint violated after accepted step"
        );

        Ok(StepReport {
            accepted: true,
            delta_h: 0.0,
            newton_iters: iters,
            lambda_half: lambda,
            lambda_one,
            ou_substeps_used: 0,
        })
    }

    fn newton_solve(&mut self, q0: &[f64], inv_sq: f64) -> Result<()> {
        let linear = self.model.constraint.is_linear();
        if linear || !self.cfg.refresh_jacobian {
            let Self { model, pen, ws, bufs, .. } = self;
            return geometry::solve_regularized_gram(model, *pen, q0, &mut bufs.resid, ws);
        }
        let n = self.model.n_constraints();
        let mut k = geometry::cross_gram(self.model, &self.bufs.q1, q0);
        if inv_sq != 0.0 {
            k += geometry::inv_dense(&self.model.mass_z) * inv_sq;
        }
        let rhs = DMatrix::from_column_slice(n, 1, &self.bufs.resid);
        let sol = k
            .lu()
            .solve(&rhs)
            .ok_or(Error::GramSingular { cond: f64::INFINITY })?;
        self.bufs.resid.copy_from_slice(sol.as_slice());
        Ok(())
    }

    fn ensure_ou_cache(&mut self, dt_sub: f64, q: &[f64]) -> Result<()> {
        if self.ou.as_ref().is_some_and(|c| c.dt_sub == dt_sub) {
            return Ok(());
        }
        let half = 0.5 * dt_sub;
        let a_p = self.model.mass.add_scaled(half, &self.thermo.gamma)?;
        let a_z = self.model.mass_z.add_scaled(half, &self.thermo.gamma_z)?;
        let s_factor = if self.model.constraint.is_linear() {
            Some(self.build_s_factor(&a_p, &a_z, q)?)
        } else {
            None
        };
        self.ou = Some(OuCache {
            dt_sub,
            a_p,
            a_z,
            s_factor,
        });
        Ok(())
    }

    fn build_s_factor(&mut self, a_p: &SpdMatrix, a_z: &SpdMatrix, q: &[f64]) -> Result<SFactor> {
        let n = self.model.n_constraints();
        let inv_sq = self.pen.inv_sq();
        if self.model.structure == Structure::Chain {
            // S = d_p tridiag(-1,2,-1) + d_z Mz^{-1}/nu^2 with scalar damped
            // inverses.
            let d_p = 1.0 / a_p.as_scalar().expect("chain slow mass is scalar");
            let d_z = 1.0 / a_z.as_scalar().expect("chain fast mass is scalar");
            let shift = inv_sq * d_z;
            let diag = vec![2.0 * d_p + shift; n];
            let off = vec![-d_p; n.saturating_sub(1)];
            return Ok(SFactor::Tridiag(TridiagFactor::new(&off, &diag, &off)?));
        }
        let d = self.model.dim();
        let jac = self.model.constraint.jacobian(q);
        let mut s = DMatrix::zeros(n, n);
        let mut col_in = vec![0.0; d];
        let mut col_out = vec![0.0; d];
        for b in 0..n {
            for i in 0..d {
                col_in[i] = jac[(i, b)];
            }
            a_p.solve_into(&col_in, &mut col_out);
            for a in 0..n {
                let mut dot = 0.0;
                for i in 0..d {
                    dot += jac[(i, a)] * col_out[i];
                }
                s[(a, b)] += dot;
            }
        }
        if inv_sq != 0.0 {
            let mut e = vec![0.0; n];
            let mut col = vec![0.0; n];
            for b in 0..n {
                e[b] = 1.0;
                a_z.solve_into(&e, &mut col);
                e[b] = 0.0;
                for a in 0..n {
                    s[(a, b)] += inv_sq * col[a];
                }
            }
        }
        Cholesky::new(s)
            .map(SFactor::Dense)
            .ok_or(Error::GramSingular { cond: f64::INFINITY })
    }

    /// Constrained implicit-midpoint fluctuation/dissipation step over a
    /// time `dt_ou`, refined into substeps when the stability bound
    /// requires it. Returns the substep count used.
    pub fn ou_step(
        &mut self,
        s: &mut PhaseState,
        dt_ou: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<usize> {
        let k = required_ou_substeps(self.model, self.thermo, dt_ou, self.cfg.ou_substeps);
        if k > self.cfg.ou_substeps {
            warn_ou_refinement(k, self.cfg.ou_substeps);
        }
        let dts = dt_ou / k as f64;
        self.ensure_ou_cache(dts, &s.q)?;
        for _ in 0..k {
            self.ou_substep(s, dts, rng)?;
        }
        Ok(k)
    }

    fn ou_substep(&mut self, s: &mut PhaseState, dts: f64, rng: &mut ChaCha12Rng) -> Result<()> {
        let half = 0.5 * dts;
        let amp = (2.0 / self.thermo.beta).sqrt() * dts.sqrt();
        let inv = self.pen.inv();
        // Noise is always drawn for both blocks, in slow-then-fast order.
        for v in self.bufs.u.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for v in self.bufs.uz.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        // rhs_p = p - (dt/2) Gamma M^{-1} p + sqrt(dt) sqrt(2/beta) Gamma^{1/2} u
        self.model.mass.solve_into(&s.p, &mut self.bufs.tmp_d);
        self.thermo
            .gamma
            .apply(&self.bufs.tmp_d, &mut self.bufs.tmp_d2);
        self.thermo.gamma.sqrt_apply(&self.bufs.u, &mut self.bufs.tmp_d);
        for (((r, p), gm), gu) in self
            .bufs
            .rhs_p
            .iter_mut()
            .zip(&s.p)
            .zip(&self.bufs.tmp_d2)
            .zip(&self.bufs.tmp_d)
        {
            *r = p - half * gm + amp * gu;
        }
        self.model.mass_z.solve_into(&s.p_z, &mut self.bufs.tmp_n);
        self.thermo
            .gamma_z
            .apply(&self.bufs.tmp_n, &mut self.bufs.zbar);
        self.thermo
            .gamma_z
            .sqrt_apply(&self.bufs.uz, &mut self.bufs.tmp_n);
        for (((r, pz), gm), gu) in self
            .bufs
            .rhs_z
            .iter_mut()
            .zip(&s.p_z)
            .zip(&self.bufs.zbar)
            .zip(&self.bufs.tmp_n)
        {
            *r = pz - half * gm + amp * gu;
        }
        let cache = self.ou.as_ref().expect("cache ensured");
        // Multiplier right-hand side J^T D_p rhs_p - (1/nu) D_z rhs_z.
        cache.a_p.solve_into(&self.bufs.rhs_p, &mut self.bufs.tmp_d);
        self.model
            .constraint
            .apply_jacobian_transpose(&s.q, &self.bufs.tmp_d, &mut self.bufs.resid);
        if inv != 0.0 {
            cache.a_z.solve_into(&self.bufs.rhs_z, &mut self.bufs.tmp_n);
            for (r, v) in self.bufs.resid.iter_mut().zip(&self.bufs.tmp_n) {
                *r -= inv * v;
            }
        }
        match &cache.s_factor {
            Some(SFactor::Tridiag(f)) => f.solve_slice(&mut self.bufs.resid),
            Some(SFactor::Dense(chol)) => {
                let n = self.bufs.resid.len();
                let mut v = DMatrix::from_column_slice(n, 1, &self.bufs.resid);
                chol.solve_mut(&mut v);
                self.bufs.resid.copy_from_slice(v.as_slice());
            }
            None => {
                let a_p = cache.a_p.clone();
                let a_z = cache.a_z.clone();
                let factor = self.build_s_factor(&a_p, &a_z, &s.q)?;
                match factor {
                    SFactor::Tridiag(f) => f.solve_slice(&mut self.bufs.resid),
                    SFactor::Dense(chol) => {
                        let n = self.bufs.resid.len();
                        let mut v = DMatrix::from_column_slice(n, 1, &self.bufs.resid);
                        chol.solve_mut(&mut v);
                        self.bufs.resid.copy_from_slice(v.as_slice());
                    }
                }
            }
        }
        let cache = self.ou.as_ref().expect("cache ensured");
        // p = M D_p (rhs_p - J lambda); p_z = Mz D_z (rhs_z + lambda/nu).
        self.model
            .constraint
            .apply_jacobian(&s.q, &self.bufs.resid, &mut self.bufs.tmp_d);
        for (r, jl) in self.bufs.rhs_p.iter_mut().zip(&self.bufs.tmp_d) {
            *r -= jl;
        }
        cache.a_p.solve_into(&self.bufs.rhs_p, &mut self.bufs.tmp_d);
        self.model.mass.apply(&self.bufs.tmp_d, &mut s.p);
        if inv != 0.0 {
            for (r, l) in self.bufs.rhs_z.iter_mut().zip(&self.bufs.resid) {
                *r += inv * l;
            }
        }
        cache.a_z.solve_into(&self.bufs.rhs_z, &mut self.bufs.tmp_n);
        self.model.mass_z.apply(&self.bufs.tmp_n, &mut s.p_z);
        Ok(())
    }

    /// Metropolized step: constrained leapfrog proposal, accept/reject on
    /// the full extended Hamiltonian (momenta flipped on rejection), then
    /// the thermostat. With `metropolis = false` the proposal is always
    /// taken (unadjusted dynamics). `Strang` splitting wraps the proposal
    /// in two half thermostats instead.
    pub fn hmc_step(&mut self, s: &mut PhaseState, rng: &mut WalkerRng) -> Result<StepReport> {
        let dt = self.cfg.dt;
        match self.cfg.splitting {
            Splitting::Lie => {
                let mut rep = self.proposal_phase(s, rng)?;
                rep.ou_substeps_used = self.ou_step(s, dt, &mut rng.noise)?;
                Ok(rep)
            }
            Splitting::Strang => {
                let k0 = self.ou_step(s, 0.5 * dt, &mut rng.noise)?;
                let mut rep = self.proposal_phase(s, rng)?;
                let k1 = self.ou_step(s, 0.5 * dt, &mut rng.noise)?;
                rep.ou_substeps_used = k0 + k1;
                Ok(rep)
            }
        }
    }

    /// Unadjusted composition of the leapfrog and thermostat steps.
    pub fn langevin_step(&mut self, s: &mut PhaseState, rng: &mut WalkerRng) -> Result<StepReport> {
        let saved_metropolis = self.cfg.metropolis;
        self.cfg.metropolis = false;
        let out = self.hmc_step(s, rng);
        self.cfg.metropolis = saved_metropolis;
        out
    }

    fn proposal_phase(&mut self, s: &mut PhaseState, rng: &mut WalkerRng) -> Result<StepReport> {
        let h0 = self.energy(s)?;
        self.saved.q.copy_from_slice(&s.q);
        self.saved.p.copy_from_slice(&s.p);
        self.saved.z.copy_from_slice(&s.z);
        self.saved.p_z.copy_from_slice(&s.p_z);
        let proposal = self.rattle_step(s);
        // The uniform is drawn unconditionally to keep the acceptance
        // stream aligned across runs.
        let unif: f64 = rng.accept.random();
        match proposal {
            Ok(mut rep) => {
                let h1 = self.energy(s)?;
                rep.delta_h = h1 - h0;
                if !self.cfg.metropolis {
                    return Ok(rep);
                }
                let acc = acceptance_probability(self.thermo.beta, rep.delta_h);
                if unif < acc && s.is_finite() {
                    rep.accepted = true;
                } else {
                    s.q.copy_from_slice(&self.saved.q);
                    s.p.copy_from_slice(&self.saved.p);
                    s.z.copy_from_slice(&self.saved.z);
                    s.p_z.copy_from_slice(&self.saved.p_z);
                    s.flip_momenta();
                    rep.accepted = false;
                }
                Ok(rep)
            }
            Err(Error::NewtonDiverged { iters, .. }) if self.cfg.metropolis => {
                // A failed constraint solve is a rejected proposal: the
                // flip keeps the chain reversible.
                s.q.copy_from_slice(&self.saved.q);
                s.p.copy_from_slice(&self.saved.p);
                s.z.copy_from_slice(&self.saved.z);
                s.p_z.copy_from_slice(&self.saved.p_z);
                s.flip_momenta();
                Ok(StepReport {
                    accepted: false,
                    delta_h: f64::INFINITY,
                    newton_iters: iters,
                    ..StepReport::empty()
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// Unconstrained leapfrog with the same thermostat, run on the slow
/// variables only; the auxiliary block is untouched but its noise slots are
/// still consumed so streams stay aligned with penalized runs.
pub struct VerletStepper<'a> {
    pub model: &'a SystemModel,
    pub thermo: &'a ThermostatConfig,
    pub cfg: IntegratorConfig,
    f: Vec<f64>,
    u: Vec<f64>,
    uz: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
    rhs: Vec<f64>,
    saved_q: Vec<f64>,
    saved_p: Vec<f64>,
    a_p: Option<(f64, SpdMatrix)>,
}

impl<'a> VerletStepper<'a> {
    pub fn new(
        model: &'a SystemModel,
        thermo: &'a ThermostatConfig,
        cfg: IntegratorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, n) = (model.dim(), model.n_constraints());
        Ok(Self {
            model,
            thermo,
            cfg,
            f: vec![0.0; d],
            u: vec![0.0; d],
            uz: vec![0.0; n],
            tmp: vec![0.0; d],
            tmp2: vec![0.0; d],
            rhs: vec![0.0; d],
            saved_q: vec![0.0; d],
            saved_p: vec![0.0; d],
            a_p: None,
        })
    }

    /// Hamiltonian of the slow variables.
    pub fn energy(&self, s: &PhaseState) -> f64 {
        0.5 * self.model.mass.quad_inv(&s.p) + self.model.potential.value(&s.q)
    }

    pub fn step(&mut self, s: &mut PhaseState, rng: &mut WalkerRng) -> Result<StepReport> {
        let dt = self.cfg.dt;
        let h0 = self.energy(s);
        self.saved_q.copy_from_slice(&s.q);
        self.saved_p.copy_from_slice(&s.p);

        self.model.potential.gradient(&s.q, &mut self.f);
        for (p, g) in s.p.iter_mut().zip(&self.f) {
            *p -= 0.5 * dt * g;
        }
        self.model.mass.solve_into(&s.p, &mut self.tmp);
        for (q, v) in s.q.iter_mut().zip(&self.tmp) {
            *q += dt * v;
        }
        self.model.potential.gradient(&s.q, &mut self.f);
        for (p, g) in s.p.iter_mut().zip(&self.f) {
            *p -= 0.5 * dt * g;
        }

        let h1 = self.energy(s);
        let delta_h = h1 - h0;
        let unif: f64 = rng.accept.random();
        let mut accepted = true;
        if self.cfg.metropolis {
            let acc = acceptance_probability(self.thermo.beta, delta_h);
            let finite = s.q.iter().chain(s.p.iter()).all(|v| v.is_finite());
            if !(unif < acc && finite) {
                s.q.copy_from_slice(&self.saved_q);
                s.p.copy_from_slice(&self.saved_p);
                for p in s.p.iter_mut() {
                    *p = -*p;
                }
                accepted = false;
            }
        } else if !s.q.iter().chain(s.p.iter()).all(|v| v.is_finite()) {
            return Err(Error::Unstable {
                context: format!("leapfrog overflow at dt = {dt}"),
            });
        }

        let k = self.ou(s, dt, &mut rng.noise)?;
        Ok(StepReport {
            accepted,
            delta_h,
            ou_substeps_used: k,
            ..StepReport::empty()
        })
    }

    fn ou(&mut self, s: &mut PhaseState, dt_ou: f64, rng: &mut ChaCha12Rng) -> Result<usize> {
        let k = required_ou_substeps(self.model, self.thermo, dt_ou, self.cfg.ou_substeps);
        if k > self.cfg.ou_substeps {
            warn_ou_refinement(k, self.cfg.ou_substeps);
        }
        let dts = dt_ou / k as f64;
        if !self.a_p.as_ref().is_some_and(|(cached, _)| *cached == dts) {
            let a = self.model.mass.add_scaled(0.5 * dts, &self.thermo.gamma)?;
            self.a_p = Some((dts, a));
        }
        let amp = (2.0 / self.thermo.beta).sqrt() * dts.sqrt();
        let half = 0.5 * dts;
        for _ in 0..k {
            for v in self.u.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for v in self.uz.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            self.model.mass.solve_into(&s.p, &mut self.tmp);
            self.thermo.gamma.apply(&self.tmp, &mut self.tmp2);
            self.thermo.gamma.sqrt_apply(&self.u, &mut self.tmp);
            for (((r, p), gm), gu) in self
                .rhs
                .iter_mut()
                .zip(&s.p)
                .zip(&self.tmp2)
                .zip(&self.tmp)
            {
                *r = p - half * gm + amp * gu;
            }
            let (_, a_p) = self.a_p.as_ref().expect("cache set above");
            a_p.solve_into(&self.rhs, &mut self.tmp);
            self.model.mass.apply(&self.tmp, &mut s.p);
        }
        Ok(k)
    }
}

/// One reversible constrained leapfrog step (functional form).
pub fn rattle_step(
    model: &SystemModel,
    pen: Penalty,
    thermo: &ThermostatConfig,
    cfg: IntegratorConfig,
    s: &PhaseState,
    _rng: &mut WalkerRng,
) -> Result<(PhaseState, StepReport)> {
    let mut stepper = Stepper::new(model, thermo, pen, cfg)?;
    let mut out = s.clone();
    let rep = stepper.rattle_step(&mut out)?;
    Ok((out, rep))
}

/// One constrained midpoint fluctuation/dissipation step (functional form).
pub fn ou_midpoint_step(
    model: &SystemModel,
    pen: Penalty,
    thermo: &ThermostatConfig,
    cfg: IntegratorConfig,
    s: &PhaseState,
    rng: &mut ChaCha12Rng,
) -> Result<PhaseState> {
    let mut stepper = Stepper::new(model, thermo, pen, cfg)?;
    let mut out = s.clone();
    stepper.ou_step(&mut out, cfg.dt, rng)?;
    Ok(out)
}

/// One unadjusted penalized Langevin step (functional form).
pub fn langevin_immp_step(
    model: &SystemModel,
    pen: Penalty,
    thermo: &ThermostatConfig,
    cfg: IntegratorConfig,
    s: &PhaseState,
    rng: &mut WalkerRng,
) -> Result<(PhaseState, StepReport)> {
    let mut stepper = Stepper::new(model, thermo, pen, cfg)?;
    let mut out = s.clone();
    let rep = stepper.langevin_step(&mut out, rng)?;
    Ok((out, rep))
}

/// One Metropolized penalized step (functional form).
pub fn hmc_step(
    model: &SystemModel,
    pen: Penalty,
    thermo: &ThermostatConfig,
    cfg: IntegratorConfig,
    s: &PhaseState,
    rng: &mut WalkerRng,
) -> Result<(PhaseState, StepReport)> {
    let mut stepper = Stepper::new(model, thermo, pen, cfg)?;
    let mut out = s.clone();
    let rep = stepper.hmc_step(&mut out, rng)?;
    Ok((out, rep))
}

/// One unconstrained baseline step (functional form).
pub fn verlet_baseline_step(
    model: &SystemModel,
    thermo: &ThermostatConfig,
    cfg: IntegratorConfig,
    s: &PhaseState,
    rng: &mut WalkerRng,
) -> Result<(PhaseState, StepReport)> {
    let mut stepper = VerletStepper::new(model, thermo, cfg)?;
    let mut out = s.clone();
    let rep = stepper.step(&mut out, rng)?;
    Ok((out, rep))
}

/// Measured mean acceptance of the Metropolized sampler at one grid point.
/// `nu = 0` selects the unconstrained baseline. The mean is taken over
/// acceptance probabilities rather than accept indicators, which halves the
/// measurement noise for the same budget.
pub fn measure_acceptance(
    model: &SystemModel,
    thermo: &ThermostatConfig,
    mut cfg: IntegratorConfig,
    nu: f64,
    q0: &[f64],
    steps: usize,
    seed: u64,
    replica: u64,
) -> Result<f64> {
    cfg.metropolis = true;
    let burn = steps / 10;
    let mut rng = WalkerRng::new(seed, replica);
    let mut init_rng = rng_stream(seed, replica, StreamTag::Momenta);
    let mut total = 0.0;
    let mut count = 0usize;
    if nu == 0.0 {
        let mut stepper = VerletStepper::new(model, thermo, cfg)?;
        let mut s = PhaseState::zeros(model.dim(), model.n_constraints());
        s.q.copy_from_slice(q0);
        let scale = 1.0 / thermo.beta.sqrt();
        model.mass.sqrt_apply(
            &(0..model.dim())
                .map(|_| init_rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>(),
            &mut s.p,
        );
        for p in s.p.iter_mut() {
            *p *= scale;
        }
        for i in 0..steps {
            let rep = stepper.step(&mut s, &mut rng)?;
            if i >= burn {
                total += acceptance_probability(thermo.beta, rep.delta_h);
                count += 1;
            }
        }
    } else {
        let pen = Penalty::Finite(nu);
        let mut stepper = Stepper::new(model, thermo, pen, cfg)?;
        let mut s = crate::model::init_state(model, pen, thermo.beta, q0, &mut stepper.ws, &mut init_rng)?;
        for i in 0..steps {
            let rep = stepper.hmc_step(&mut s, &mut rng)?;
            if i >= burn {
                total += acceptance_probability(thermo.beta, rep.delta_h);
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Search grid for [`tune_penalty`].
#[derive(Debug, Clone)]
pub struct TuneGrid<'a> {
    /// Penalty values; `0` is measured with the unconstrained baseline.
    pub nu_values: &'a [f64],
    /// Candidate timesteps, ascending.
    pub dt_values: &'a [f64],
    /// Step budget per grid point.
    pub steps: usize,
    pub seed: u64,
}

/// One measured grid point.
#[derive(Debug, Clone, Copy)]
pub struct TunePoint {
    pub nu: f64,
    pub dt: f64,
    pub acceptance: f64,
}

/// Tuning outcome: the largest stable pair and the linear rule through it.
#[derive(Debug, Clone)]
pub struct TuneResult {
    pub nu_max: f64,
    pub dt_max: f64,
    /// Slope of the derived rule `nu(dt) = slope * dt`.
    pub slope: f64,
    pub table: Vec<TunePoint>,
}

/// Grid search for the largest `(nu, dt)` whose time-averaged Metropolis
/// acceptance stays at or above `target`.
pub fn tune_penalty(
    model: &SystemModel,
    thermo: &ThermostatConfig,
    base_cfg: IntegratorConfig,
    q0: &[f64],
    target: f64,
    grid: &TuneGrid,
) -> Result<TuneResult> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target acceptance must lie in (0, 1), got {target}"
        )));
    }
    let mut table = Vec::with_capacity(grid.nu_values.len() * grid.dt_values.len());
    let mut best: Option<(f64, f64)> = None;
    for (i, &nu) in grid.nu_values.iter().enumerate() {
        for (j, &dt) in grid.dt_values.iter().enumerate() {
            let mut cfg = base_cfg;
            cfg.dt = dt;
            let replica = (i * grid.dt_values.len() + j) as u64;
            let acc =
                measure_acceptance(model, thermo, cfg, nu, q0, grid.steps, grid.seed, replica)?;
            table.push(TunePoint {
                nu,
                dt,
                acceptance: acc,
            });
            if acc >= target {
                let better = match best {
                    None => true,
                    Some((bdt, bnu)) => dt > bdt || (dt == bdt && nu > bnu),
                };
                if better {
                    best = Some((dt, nu));
                }
            }
        }
    }
    let (dt_max, nu_max) = best.ok_or_else(|| {
        Error::TargetUnreachable(format!(
            "no grid point reached mean acceptance {target}"
        ))
    })?;
    Ok(TuneResult {
        nu_max,
        dt_max,
        slope: nu_max / dt_max,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_state, PenaltyConfig};
    use crate::models::{circle_model, double_well_model};
    use approx::assert_relative_eq;

    fn thermo_for(model: &SystemModel, beta: f64, gamma: f64, gamma_z: f64) -> ThermostatConfig {
        ThermostatConfig::scalar(beta, gamma, gamma_z, model.dim(), model.n_constraints())
            .unwrap()
    }

    #[test]
    fn free_flight_keeps_linear_constraint_without_multiplier() {
        // Zero potential, xi(q) = q, nu = 1: a constraint-satisfying state
        // free-streams and the multiplier solve returns zero.
        let model = double_well_model(0.0, 1.0);
        let thermo = thermo_for(&model, 1.0, 0.0, 0.0);
        let cfg = IntegratorConfig::new(0.05);
        let mut stepper = Stepper::new(&model, &thermo, Penalty::Finite(1.0), cfg).unwrap();
        let mut s = PhaseState {
            q: vec![0.4],
            p: vec![0.7],
            z: vec![0.4],
            p_z: vec![0.7],
        };
        let rep = stepper.rattle_step(&mut s).unwrap();
        assert_relative_eq!(s.q[0], 0.4 + 0.05 * 0.7, epsilon = 1e-14);
        assert_relative_eq!(s.z[0], 0.4 + 0.05 * 0.7, epsilon = 1e-14);
        assert!(rep.lambda_half[0].abs() < 1e-12);
        assert!(rep.lambda_one[0].abs() < 1e-12);
        assert_eq!(rep.newton_iters, 0);
    }

    #[test]
    fn rattle_is_time_reversible_on_the_circle() {
        let model = circle_model(1.0, 0.4);
        let thermo = thermo_for(&model, 1.0, 0.0, 0.0);
        let cfg = IntegratorConfig::new(1e-2);
        let pen = Penalty::Finite(2.0);
        let mut stepper = Stepper::new(&model, &thermo, pen, cfg).unwrap();
        let mut rng = rng_stream(3, 0, StreamTag::Momenta);
        let s0 = init_state(&model, pen, 1.0, &[0.9, 0.4], &mut stepper.ws, &mut rng).unwrap();
        let mut s = s0.clone();
        stepper.rattle_step(&mut s).unwrap();
        s.flip_momenta();
        stepper.rattle_step(&mut s).unwrap();
        s.flip_momenta();
        for (a, b) in s.q.iter().zip(&s0.q) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        for (a, b) in s.p.iter().zip(&s0.p) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        for (a, b) in s.z.iter().zip(&s0.z) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        for (a, b) in s.p_z.iter().zip(&s0.p_z) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn rattle_energy_drift_is_small() {
        let model = circle_model(1.0, 0.4);
        let thermo = thermo_for(&model, 1.0, 0.0, 0.0);
        let cfg = IntegratorConfig::new(1e-3);
        let pen = Penalty::Finite(1.5);
        let mut stepper = Stepper::new(&model, &thermo, pen, cfg).unwrap();
        let mut rng = rng_stream(4, 0, StreamTag::Momenta);
        let mut s = init_state(&model, pen, 1.0, &[0.8, -0.55], &mut stepper.ws, &mut rng).unwrap();
        let h0 = stepper.energy(&s).unwrap();
        for _ in 0..200 {
            stepper.rattle_step(&mut s).unwrap();
        }
        let h1 = stepper.energy(&s).unwrap();
        assert!((h1 - h0).abs() < 1e-5, "drift {}", h1 - h0);
    }

    #[test]
    fn frictionless_ou_is_identity() {
        let model = circle_model(1.0, 0.4);
        let thermo = thermo_for(&model, 2.0, 0.0, 0.0);
        let cfg = IntegratorConfig::new(0.1);
        let pen = Penalty::Finite(3.0);
        let mut stepper = Stepper::new(&model, &thermo, pen, cfg).unwrap();
        let mut rng = rng_stream(5, 0, StreamTag::Momenta);
        let s0 = init_state(&model, pen, 2.0, &[0.7, 0.7], &mut stepper.ws, &mut rng).unwrap();
        let mut s = s0.clone();
        let mut noise = rng_stream(5, 0, StreamTag::OuNoise);
        let before = noise.get_word_pos();
        stepper.ou_step(&mut s, 0.1, &mut noise).unwrap();
        assert!(noise.get_word_pos() > before, "noise must be consumed");
        for (a, b) in s.p.iter().zip(&s0.p) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        for (a, b) in s.p_z.iter().zip(&s0.p_z) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn baseline_ou_matches_scalar_midpoint_formula() {
        // d = 1, M = 1, gamma = 0.1, beta = 1, dt = 0.1, zero force:
        // p' = ((1 - a) p + sqrt(dt) sqrt(2 gamma) u) / (1 + a), a = dt*gamma/2.
        let model = double_well_model(0.0, 1.0);
        let thermo = thermo_for(&model, 1.0, 0.1, 0.0);
        let mut cfg = IntegratorConfig::new(0.1);
        cfg.metropolis = false;
        let mut stepper = VerletStepper::new(&model, &thermo, cfg).unwrap();
        let mut s = PhaseState {
            q: vec![0.3],
            p: vec![0.9],
            z: vec![0.0],
            p_z: vec![0.0],
        };
        let mut rng = WalkerRng::new(9, 0);
        let mut probe = rng_stream(9, 0, StreamTag::OuNoise);
        let u: f64 = probe.sample(StandardNormal);
        stepper.step(&mut s, &mut rng).unwrap();
        let a = 0.1 * 0.1 / 2.0;
        let expected = ((1.0 - a) * 0.9 + 0.1f64.sqrt() * 0.2f64.sqrt() * u) / (1.0 + a);
        assert_relative_eq!(s.p[0], expected, epsilon = 1e-14);
        assert_relative_eq!(s.q[0], 0.3 + 0.1 * 0.9, epsilon = 1e-14);
    }

    #[test]
    fn acceptance_rule_arithmetic() {
        assert_relative_eq!(acceptance_probability(2.0, 0.0), 1.0);
        let beta = 1.7;
        assert_relative_eq!(
            acceptance_probability(beta, 2.0f64.ln() / beta),
            0.5,
            epsilon = 1e-15
        );
        assert_relative_eq!(acceptance_probability(1.0, -3.0), 1.0);
        assert_eq!(acceptance_probability(1.0, f64::NAN), 0.0);
        assert_eq!(acceptance_probability(1.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn newton_divergence_counts_as_rejection_with_flipped_momenta() {
        let model = circle_model(1.0, 0.4);
        let thermo = thermo_for(&model, 1.0, 0.0, 0.0);
        let cfg = IntegratorConfig::new(50.0);
        let pen = Penalty::Finite(1.0);
        let mut stepper = Stepper::new(&model, &thermo, pen, cfg).unwrap();
        let mut rng_init = rng_stream(6, 0, StreamTag::Momenta);
        let s0 = init_state(&model, pen, 1.0, &[1.0, 0.1], &mut stepper.ws, &mut rng_init).unwrap();
        let mut s = s0.clone();
        let mut rng = WalkerRng::new(6, 0);
        let rep = stepper.hmc_step(&mut s, &mut rng).unwrap();
        assert!(!rep.accepted);
        assert_eq!(s.q, s0.q);
        for (a, b) in s.p.iter().zip(&s0.p) {
            assert_relative_eq!(*a, -b, epsilon = 1e-15);
        }
        for (a, b) in s.p_z.iter().zip(&s0.p_z) {
            assert_relative_eq!(*a, -b, epsilon = 1e-15);
        }
    }

    #[test]
    fn noise_streams_align_across_penalties() {
        let model = circle_model(1.0, 0.4);
        let thermo = thermo_for(&model, 1.0, 0.5, 0.5);
        let cfg = IntegratorConfig::new(0.05);
        let mut positions = Vec::new();
        for nu in [1.0, 10.0] {
            let pen = Penalty::Finite(nu);
            let mut stepper = Stepper::new(&model, &thermo, pen, cfg).unwrap();
            let mut init = rng_stream(12, 0, StreamTag::Momenta);
            let mut s =
                init_state(&model, pen, 1.0, &[0.2, 0.98], &mut stepper.ws, &mut init).unwrap();
            let mut rng = WalkerRng::new(12, 0);
            for _ in 0..50 {
                stepper.hmc_step(&mut s, &mut rng).unwrap();
            }
            positions.push((rng.noise.get_word_pos(), rng.accept.get_word_pos()));
        }
        assert_eq!(positions[0], positions[1]);
    }

    #[test]
    fn timestep_scaled_penalty_gives_second_order_trajectories() {
        // gamma = 0, nu = nubar * dt: the sampled path converges to the
        // unpenalized Hamiltonian flow at second order in dt.
        let model = circle_model(1.0, 0.4);
        let thermo = thermo_for(&model, 1.0, 0.0, 0.0);
        let q0 = [1.1, 0.3];
        let p0 = [-0.2, 0.7];
        let t_final = 0.25f64;

        let reference = {
            let mut cfg = IntegratorConfig::new(1e-5);
            cfg.metropolis = false;
            let mut v = VerletStepper::new(&model, &thermo, cfg).unwrap();
            let mut s = PhaseState {
                q: q0.to_vec(),
                p: p0.to_vec(),
                z: vec![0.0],
                p_z: vec![0.0],
            };
            let mut rng = WalkerRng::new(0, 0);
            for _ in 0..(t_final / 1e-5).round() as usize {
                v.step(&mut s, &mut rng).unwrap();
            }
            s.q
        };

        let run = |dt: f64| {
            let pen = PenaltyConfig::timestep_scaled(0.5, 1.0)
                .resolve(dt, None)
                .unwrap();
            let mut cfg = IntegratorConfig::new(dt);
            cfg.metropolis = false;
            let mut stepper = Stepper::new(&model, &thermo, pen, cfg).unwrap();
            let nu = pen.finite_value().unwrap();
            let mut s = PhaseState {
                q: q0.to_vec(),
                p: p0.to_vec(),
                z: vec![nu * (q0[0] * q0[0] + q0[1] * q0[1] - 1.0)],
                p_z: vec![nu * 2.0 * (q0[0] * p0[0] + q0[1] * p0[1])],
            };
            for _ in 0..(t_final / dt).round() as usize {
                stepper.rattle_step(&mut s).unwrap();
            }
            let dx = s.q[0] - reference[0];
            let dy = s.q[1] - reference[1];
            (dx * dx + dy * dy).sqrt()
        };

        let e1 = run(2e-3);
        let e2 = run(1e-3);
        let slope = (e1 / e2).ln() / 2.0f64.ln();
        assert!(
            (slope - 2.0).abs() < 0.3,
            "order slope {slope}, errors {e1:.3e}/{e2:.3e}"
        );
    }

    #[test]
    fn consistent_penalty_examples() {
        assert_relative_eq!(consistent_penalty(0.1, 2.0, 1.0), 0.2);
        assert_relative_eq!(consistent_penalty(0.01, 1.0, 0.5), 0.1);
    }

    #[test]
    fn tune_returns_largest_passing_timestep() {
        let model = double_well_model(1.0, 1.0);
        let thermo = thermo_for(&model, 1.0, 0.5, 0.0);
        let cfg = IntegratorConfig::new(0.1);
        let grid = TuneGrid {
            nu_values: &[1.0],
            dt_values: &[0.01, 0.1, 2.5],
            steps: 400,
            seed: 7,
        };
        let res = tune_penalty(&model, &thermo, cfg, &[1.0], 0.8, &grid).unwrap();
        assert!(res.dt_max >= 0.1, "dt_max {}", res.dt_max);
        assert!(res.dt_max < 2.5, "dt_max {}", res.dt_max);
        assert_eq!(res.table.len(), 3);
        let impossible = tune_penalty(
            &model,
            &thermo,
            cfg,
            &[1.0],
            0.999999,
            &TuneGrid {
                nu_values: &[1.0],
                dt_values: &[2.5],
                steps: 200,
                seed: 7,
            },
        );
        assert!(matches!(impossible, Err(Error::TargetUnreachable(_))));
    }

    #[test]
    fn config_validation_rejects_bad_tolerances() {
        let mut cfg = IntegratorConfig::new(0.1);
        cfg.newton_tol = 1e-6;
        cfg.tol_c = 1e-9;
        assert!(cfg.validate().is_err());
        assert!(IntegratorConfig::new(-1.0).validate().is_err());
    }
}
