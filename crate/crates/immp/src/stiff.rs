//! Stiff two-scale potentials and their hard-constraint limit.
//!
//! A two-scale energy `U(q, xi(q) / eps)` confines the system to a
//! neighbourhood of width `eps` around the zero set of `xi`. Simulating it
//! directly forces the timestep below the fast period `~ eps`. The
//! penalized chain at `nu = nubar / eps` instead rewrites the energy in
//! extended phase space as `U(q, z / nubar)`: on the constraint manifold
//! `xi(q) = z / nu` the two expressions agree, but the extended form has
//! order-one forces, so one timestep works for every `eps`. At `nu =
//! infinity` the same field and the constraint `xi = 0` give the
//! hard-constraint limit, where `z / nubar` is a free fiber coordinate.
//! The module provides the model plumbing for both formulations,
//! quadrature references for the fiber-averaged potential, and the sweep
//! over `eps` used by the demonstration runs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::GramWorkspace;
use crate::integrators::{
    acceptance_probability, ForceField, IntegratorConfig, Stepper, VerletStepper, WalkerRng,
};
use crate::model::{
    init_state, ConstraintMap, Penalty, PhaseState, Potential, Structure, SystemModel,
    ThermostatConfig,
};
use crate::linalg::SpdMatrix;
use crate::quad::integrate_line;
use crate::rng::{rng_stream, StreamTag};
use crate::stats::ks_two_sample;

/// Energy `U(q, zt)` of a slow configuration `q` and one rescaled fast
/// coordinate `zt`. The full potential of the stiff system is
/// `U(q, xi(q) / eps)`.
pub trait TwoScaleEnergy: Send + Sync {
    /// Ambient dimension of the slow configuration.
    fn dim(&self) -> usize;
    /// `U(q, zt)`.
    fn value(&self, q: &[f64], zt: f64) -> f64;
    /// Gradient in `q` at frozen `zt`.
    fn grad_q(&self, q: &[f64], zt: f64, out: &mut [f64]);
    /// Partial derivative in the fiber coordinate.
    fn dz(&self, q: &[f64], zt: f64) -> f64;
}

/// A stiff system `V(q) = U(q, xi(q) / eps)` penalized at `nu = nubar /
/// eps`.
#[derive(Clone)]
pub struct StiffModel {
    pub energy: Arc<dyn TwoScaleEnergy>,
    pub constraint: Arc<dyn ConstraintMap>,
    pub epsilon: f64,
    pub nubar: f64,
}

impl StiffModel {
    pub fn new(
        energy: Arc<dyn TwoScaleEnergy>,
        constraint: Arc<dyn ConstraintMap>,
        epsilon: f64,
        nubar: f64,
    ) -> Result<Self> {
        if constraint.count() != 1 {
            return Err(Error::InvalidConfig(format!(
                "stiff models take a scalar constraint, got {} components",
                constraint.count()
            )));
        }
        if constraint.dim() != energy.dim() {
            return Err(Error::InvalidConfig(format!(
                "constraint dimension {} does not match energy dimension {}",
                constraint.dim(),
                energy.dim()
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !(nubar > 0.0 && nubar.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "nubar must be positive and finite, got {nubar}"
            )));
        }
        Ok(Self {
            energy,
            constraint,
            epsilon,
            nubar,
        })
    }

    /// The same model at another stiffness.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.energy.clone(), self.constraint.clone(), epsilon, self.nubar)
    }

    /// Penalty strength `nubar / eps` that keeps the fast frequency fixed.
    pub fn nu(&self) -> f64 {
        self.nubar / self.epsilon
    }

    pub fn penalty(&self) -> Penalty {
        Penalty::Finite(self.nu())
    }

    /// The stiff system in its raw form: potential `U(q, xi(q) / eps)`
    /// with unit masses and order `1 / eps` forces. This is the
    /// formulation the uncoupled baseline integrates; the penalized chain
    /// uses [`StiffModel::extended_system`] instead.
    pub fn full_system(&self) -> Result<SystemModel> {
        let d = self.energy.dim();
        SystemModel::new(
            Arc::new(ComposedPotential {
                energy: self.energy.clone(),
                constraint: self.constraint.clone(),
                epsilon: self.epsilon,
            }),
            self.constraint.clone(),
            SpdMatrix::identity(d),
            SpdMatrix::identity(1),
            Structure::General,
        )
    }

    /// Model metadata for the extended-field sampler, at finite penalty
    /// `nubar / eps` or at `Penalty::Infinite`. The potential slot holds
    /// the frozen fiber slice `U(q, 0)`; the sampler never reads it
    /// because the energetics come from [`StiffModel::extended_field`].
    pub fn extended_system(&self) -> Result<SystemModel> {
        let d = self.energy.dim();
        SystemModel::new(
            Arc::new(FrozenFiberPotential {
                energy: self.energy.clone(),
            }),
            self.constraint.clone(),
            SpdMatrix::identity(d),
            SpdMatrix::identity(1),
            Structure::General,
        )
    }

    /// Extended-phase force field `U(q, z / nubar)`: the auxiliary
    /// coordinate stores `z = nubar * zt`. With `Penalty::Finite(nubar /
    /// eps)` the constraint pins `z / nubar` to `xi(q) / eps` and the
    /// chain samples the stiff system with order-one forces; with
    /// `Penalty::Infinite` it samples the hard-constraint limit.
    pub fn extended_field(&self) -> ExtendedField {
        ExtendedField {
            energy: self.energy.clone(),
            nubar: self.nubar,
        }
    }
}

struct ComposedPotential {
    energy: Arc<dyn TwoScaleEnergy>,
    constraint: Arc<dyn ConstraintMap>,
    epsilon: f64,
}

impl Potential for ComposedPotential {
    fn dim(&self) -> usize {
        self.energy.dim()
    }

    fn value(&self, q: &[f64]) -> f64 {
        let mut xi = [0.0];
        self.constraint.value(q, &mut xi);
        self.energy.value(q, xi[0] / self.epsilon)
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        let mut xi = [0.0];
        self.constraint.value(q, &mut xi);
        let zt = xi[0] / self.epsilon;
        self.energy.grad_q(q, zt, out);
        let w = self.energy.dz(q, zt) / self.epsilon;
        let mut jcol = vec![0.0; q.len()];
        self.constraint.apply_jacobian(q, &[w], &mut jcol);
        for (o, j) in out.iter_mut().zip(&jcol) {
            *o += j;
        }
    }
}

struct FrozenFiberPotential {
    energy: Arc<dyn TwoScaleEnergy>,
}

impl Potential for FrozenFiberPotential {
    fn dim(&self) -> usize {
        self.energy.dim()
    }

    fn value(&self, q: &[f64]) -> f64 {
        self.energy.value(q, 0.0)
    }

    fn gradient(&self, q: &[f64], out: &mut [f64]) {
        self.energy.grad_q(q, 0.0, out);
    }
}

/// Force field of the extended formulation; see
/// [`StiffModel::extended_field`].
pub struct ExtendedField {
    energy: Arc<dyn TwoScaleEnergy>,
    nubar: f64,
}

impl ForceField for ExtendedField {
    fn energy(&self, q: &[f64], z: &[f64]) -> f64 {
        self.energy.value(q, z[0] / self.nubar)
    }

    fn grad_q(&self, q: &[f64], z: &[f64], out: &mut [f64]) {
        self.energy.grad_q(q, z[0] / self.nubar, out);
    }

    fn grad_z(&self, q: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = self.energy.dz(q, z[0] / self.nubar) / self.nubar;
    }
}

/// Center and decay width of the fiber Boltzmann factor at fixed `q`.
///
/// Returns `(zt_star, u_star, width)` where `zt_star` roughly minimizes
/// `U(q, .)`, `u_star = U(q, zt_star)` and `exp(-beta (U - u_star))` falls
/// below `1e-13` at `zt_star +/- width`.
fn fiber_profile(
    energy: &dyn TwoScaleEnergy,
    q: &[f64],
    beta: f64,
) -> Result<(f64, f64, f64)> {
    let mut half = 4.0;
    let (mut zt_star, mut u_star) = (0.0, f64::INFINITY);
    for _ in 0..50 {
        let m = 128usize;
        let mut best = (0usize, f64::INFINITY);
        for i in 0..=m {
            let z = -half + 2.0 * half * i as f64 / m as f64;
            let u = energy.value(q, z);
            if u < best.1 {
                best = (i, u);
            }
        }
        if !best.1.is_finite() {
            return Err(Error::QuadratureDivergent {
                context: "fiber energy is not finite near its scan minimum".into(),
            });
        }
        if best.0 > 0 && best.0 < m {
            zt_star = -half + 2.0 * half * best.0 as f64 / m as f64;
            u_star = best.1;
            break;
        }
        half *= 2.0;
        if half > 1e12 {
            return Err(Error::QuadratureDivergent {
                context: "fiber energy has no interior minimum".into(),
            });
        }
    }
    if !u_star.is_finite() {
        return Err(Error::QuadratureDivergent {
            context: "fiber energy has no interior minimum".into(),
        });
    }
    let mut width = 1.0;
    for _ in 0..60 {
        let lo = (-beta * (energy.value(q, zt_star - width) - u_star)).exp();
        let hi = (-beta * (energy.value(q, zt_star + width) - u_star)).exp();
        if lo < 1e-13 && hi < 1e-13 {
            return Ok((zt_star, u_star, width));
        }
        width *= 2.0;
    }
    Err(Error::QuadratureDivergent {
        context: "fiber Boltzmann factor does not decay".into(),
    })
}

/// Fiber-averaged potential
/// `-(1 / beta) ln integral exp(-beta U(q, zt)) dzt`
/// by adaptive quadrature along the fiber. Accurate to about `1e-8` in
/// absolute terms for order-one confining fibers; fails with
/// `QuadratureDivergent` when the fiber factor is not integrable.
pub fn effective_potential(energy: &dyn TwoScaleEnergy, q: &[f64], beta: f64) -> Result<f64> {
    let (zt_star, u_star, width) = fiber_profile(energy, q, beta)?;
    let total = integrate_line(
        |z| (-beta * (energy.value(q, z) - u_star)).exp(),
        zt_star,
        (width / 8.0).max(1e-3),
        1e-12,
    );
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::QuadratureDivergent {
            context: format!("fiber partition value {total} at inverse temperature {beta}"),
        });
    }
    Ok(u_star - total.ln() / beta)
}

/// Gradient of [`effective_potential`] in `q`: the fiber average of
/// `grad_q U` under the normalized fiber Boltzmann weight.
pub fn effective_gradient(
    energy: &dyn TwoScaleEnergy,
    q: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    let (zt_star, u_star, width) = fiber_profile(energy, q, beta)?;
    let halfwidth = (width / 8.0).max(1e-3);
    let total = integrate_line(
        |z| (-beta * (energy.value(q, z) - u_star)).exp(),
        zt_star,
        halfwidth,
        1e-12,
    );
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::QuadratureDivergent {
            context: format!("fiber partition value {total} at inverse temperature {beta}"),
        });
    }
    let d = energy.dim();
    let mut grad = vec![0.0; d];
    let mut comp = vec![0.0; d];
    for (i, g) in grad.iter_mut().enumerate() {
        let mean = integrate_line(
            |z| {
                energy.grad_q(q, z, &mut comp);
                comp[i] * (-beta * (energy.value(q, z) - u_star)).exp()
            },
            zt_star,
            halfwidth,
            1e-12,
        );
        if !mean.is_finite() {
            return Err(Error::QuadratureDivergent {
                context: format!("fiber average of force component {i}"),
            });
        }
        *g = mean / total;
    }
    Ok(grad)
}

/// One row of an [`epsilon_sweep`].
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub epsilon: f64,
    pub observable_mean: f64,
    /// Mean hypothetical acceptance of the unadjusted penalized chain.
    pub acceptance: f64,
    /// Kolmogorov-Smirnov statistic between the observable samples and the
    /// hard-constraint reference run.
    pub marginal_distance: f64,
    /// p-value of that comparison.
    pub marginal_p: f64,
}

/// Sampling parameters shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub dt: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub beta: f64,
    pub gamma: f64,
    pub gamma_z: f64,
    pub seed: u64,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.burn_in >= self.steps {
            return Err(Error::InvalidConfig(format!(
                "need burn_in < steps, got {} and {}",
                self.burn_in, self.steps
            )));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidConfig("thinning must be at least 1".into()));
        }
        Ok(())
    }
}

fn collect_observable(
    samples: &mut Vec<f64>,
    step: usize,
    sweep: &SweepConfig,
    q: &[f64],
    observable: &dyn Fn(&[f64]) -> f64,
) {
    if step >= sweep.burn_in && (step - sweep.burn_in) % sweep.thinning == 0 {
        samples.push(observable(q));
    }
}

/// Unadjusted penalized runs at each `eps`, compared against one equally
/// unadjusted hard-constraint run at the same step size: as `eps -> 0` the
/// penalized numerical flow converges to the hard-constraint numerical
/// flow, so matching the discretization bias on both sides makes the
/// distance measure the `eps` effect alone. The start `q0` must lie on the
/// constraint manifold so the reference chain can use it too. All runs
/// draw from distinct substreams of `sweep.seed`.
pub fn epsilon_sweep(
    model: &StiffModel,
    eps_list: &[f64],
    q0: &[f64],
    observable: &dyn Fn(&[f64]) -> f64,
    sweep: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    sweep.validate()?;
    let mut xi = [0.0];
    model.constraint.value(q0, &mut xi);
    if xi[0].abs() > 1e-8 {
        return Err(Error::InvalidConfig(format!(
            "sweep start must satisfy the constraint, got xi = {}",
            xi[0]
        )));
    }
    let d = model.energy.dim();
    let thermo = ThermostatConfig::scalar(sweep.beta, sweep.gamma, sweep.gamma_z, d, 1)?;
    let cfg = IntegratorConfig::new(sweep.dt);

    let system = model.extended_system()?;
    let field = model.extended_field();
    let mut ws = GramWorkspace::new(&system);
    let mut init_rng = rng_stream(sweep.seed, 0, StreamTag::Momenta);
    let mut state = init_state(&system, Penalty::Infinite, sweep.beta, q0, &mut ws, &mut init_rng)?;
    let mut stepper = Stepper::with_field(&system, &field, &thermo, Penalty::Infinite, cfg)?;
    let mut rng = WalkerRng::new(sweep.seed, 0);
    let mut ref_samples = Vec::new();
    for step in 0..sweep.steps {
        stepper.langevin_step(&mut state, &mut rng)?;
        collect_observable(&mut ref_samples, step, sweep, &state.q, observable);
    }

    let mut rows = Vec::with_capacity(eps_list.len());
    for (idx, &eps) in eps_list.iter().enumerate() {
        let pen = model.with_epsilon(eps)?.penalty();
        let mut ws = GramWorkspace::new(&system);
        let replica = 1 + idx as u64;
        let mut init_rng = rng_stream(sweep.seed, replica, StreamTag::Momenta);
        let mut state = init_state(&system, pen, sweep.beta, q0, &mut ws, &mut init_rng)?;
        let mut stepper = Stepper::with_field(&system, &field, &thermo, pen, cfg)?;
        let mut rng = WalkerRng::new(sweep.seed, replica);
        let mut samples = Vec::new();
        let mut acc_sum = 0.0;
        for step in 0..sweep.steps {
            let rep = stepper.langevin_step(&mut state, &mut rng)?;
            acc_sum += acceptance_probability(sweep.beta, rep.delta_h);
            collect_observable(&mut samples, step, sweep, &state.q, observable);
        }
        let observable_mean = samples.iter().sum::<f64>() / samples.len() as f64;
        // The KS null assumes independent draws; thin both chains to a few
        // autocorrelation times so the p-value is calibrated.
        let tau = crate::stats::integrated_autocorr_time(&samples)
            .max(crate::stats::integrated_autocorr_time(&ref_samples));
        let stride = ((3.0 * tau).ceil() as usize).max(1);
        let thin = |v: &[f64]| -> Vec<f64> { v.iter().copied().step_by(stride).collect() };
        let (marginal_distance, marginal_p) = ks_two_sample(&thin(&samples), &thin(&ref_samples));
        rows.push(SweepRow {
            epsilon: eps,
            observable_mean,
            acceptance: acc_sum / sweep.steps as f64,
            marginal_distance,
            marginal_p,
        });
    }
    Ok(rows)
}

/// First step at which the unadjusted uncoupled integrator leaves the
/// finite range on `system`, or `None` if it survives `max_steps`. Used to
/// demonstrate the stability gap against the penalized chain.
pub fn baseline_blowup_step(
    system: &SystemModel,
    thermo: &ThermostatConfig,
    mut cfg: IntegratorConfig,
    s0: &PhaseState,
    max_steps: usize,
    seed: u64,
    replica: u64,
) -> Result<Option<usize>> {
    cfg.metropolis = false;
    let mut stepper = VerletStepper::new(system, thermo, cfg)?;
    let mut state = s0.clone();
    let mut rng = WalkerRng::new(seed, replica);
    for step in 0..max_steps {
        match stepper.step(&mut state, &mut rng) {
            Ok(_) => {}
            Err(Error::Unstable { .. }) => return Ok(Some(step)),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Anisotropic ring energy used by the demonstration runs: slow part
/// `a1 cos(theta) + a2 cos(2 theta)` written in Cartesian coordinates
/// (so it is defined off the circle too), quadratic fiber `zt^2 / 2`.
#[derive(Debug, Clone, Copy)]
pub struct CircleTwoScale {
    pub a1: f64,
    pub a2: f64,
}

impl CircleTwoScale {
    fn slow(&self, q: &[f64]) -> f64 {
        let r2 = q[0] * q[0] + q[1] * q[1];
        let r = r2.sqrt();
        self.a1 * q[0] / r + self.a2 * (q[0] * q[0] - q[1] * q[1]) / r2
    }

    fn slow_grad(&self, q: &[f64], out: &mut [f64]) {
        let r2 = q[0] * q[0] + q[1] * q[1];
        let r = r2.sqrt();
        let r3 = r2 * r;
        let diff = q[0] * q[0] - q[1] * q[1];
        out[0] = self.a1 * (1.0 / r - q[0] * q[0] / r3)
            + self.a2 * (2.0 * q[0] / r2 - 2.0 * diff * q[0] / (r2 * r2));
        out[1] = self.a1 * (-q[0] * q[1] / r3)
            + self.a2 * (-2.0 * q[1] / r2 - 2.0 * diff * q[1] / (r2 * r2));
    }
}

impl TwoScaleEnergy for CircleTwoScale {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, q: &[f64], zt: f64) -> f64 {
        self.slow(q) + 0.5 * zt * zt
    }

    fn grad_q(&self, q: &[f64], zt: f64, out: &mut [f64]) {
        let _ = zt;
        self.slow_grad(q, out);
    }

    fn dz(&self, _q: &[f64], zt: f64) -> f64 {
        zt
    }
}

/// A stiff ring: [`CircleTwoScale`] over the unit-circle constraint
/// `xi(q) = |q|^2 - 1`.
pub fn circle_stiff_model(a1: f64, a2: f64, epsilon: f64, nubar: f64) -> Result<StiffModel> {
    StiffModel::new(
        Arc::new(CircleTwoScale { a1, a2 }),
        Arc::new(crate::models::CircleConstraint),
        epsilon,
        nubar,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct ShiftedQuadratic {
        offset: f64,
    }

    impl TwoScaleEnergy for ShiftedQuadratic {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _q: &[f64], zt: f64) -> f64 {
            self.offset + 0.5 * zt * zt
        }
        fn grad_q(&self, _q: &[f64], _zt: f64, out: &mut [f64]) {
            out.fill(0.0);
        }
        fn dz(&self, _q: &[f64], zt: f64) -> f64 {
            zt
        }
    }

    struct CoupledQuartic;

    impl TwoScaleEnergy for CoupledQuartic {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, q: &[f64], zt: f64) -> f64 {
            0.25 * zt.powi(4) + 0.5 * (1.0 + q[0] * q[0]) * zt * zt + q[1] * zt + 0.3 * q[0]
        }
        fn grad_q(&self, q: &[f64], zt: f64, out: &mut [f64]) {
            out[0] = q[0] * zt * zt + 0.3;
            out[1] = zt;
        }
        fn dz(&self, q: &[f64], zt: f64) -> f64 {
            zt.powi(3) + (1.0 + q[0] * q[0]) * zt + q[1]
        }
    }

    struct Unconfined;

    impl TwoScaleEnergy for Unconfined {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _q: &[f64], zt: f64) -> f64 {
            -0.5 * zt * zt
        }
        fn grad_q(&self, _q: &[f64], _zt: f64, out: &mut [f64]) {
            out.fill(0.0);
        }
        fn dz(&self, _q: &[f64], zt: f64) -> f64 {
            -zt
        }
    }

    struct ZeroEnergy;

    impl TwoScaleEnergy for ZeroEnergy {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, _q: &[f64], _zt: f64) -> f64 {
            0.0
        }
        fn grad_q(&self, _q: &[f64], _zt: f64, out: &mut [f64]) {
            out.fill(0.0);
        }
        fn dz(&self, _q: &[f64], _zt: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn gaussian_fiber_integrates_exactly() {
        let u = ShiftedQuadratic { offset: 0.7 };
        let q = [0.2, -0.4];
        for beta in [1.0, 2.0] {
            let got = effective_potential(&u, &q, beta).unwrap();
            let want = 0.7 - (2.0 * std::f64::consts::PI / beta).ln() / (2.0 * beta);
            assert_relative_eq!(got, want, max_relative = 1e-8);
        }
        let grad = effective_gradient(&u, &q, 1.0).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn fiber_average_gradient_matches_finite_differences() {
        let u = CoupledQuartic;
        let q = [0.4, -0.7];
        let beta = 1.3;
        let grad = effective_gradient(&u, &q, beta).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (effective_potential(&u, &qp, beta).unwrap()
                - effective_potential(&u, &qm, beta).unwrap())
                / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn unconfined_fiber_is_reported_divergent() {
        let err = effective_potential(&Unconfined, &[0.0, 1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::QuadratureDivergent { .. }));
    }

    #[test]
    fn composed_potential_gradient_matches_finite_differences() {
        let model = circle_stiff_model(0.4, 0.3, 0.1, 0.7).unwrap();
        let system = model.full_system().unwrap();
        let q = [0.8, 0.45];
        let mut grad = vec![0.0; 2];
        system.potential.gradient(&q, &mut grad);
        let h = 1e-6;
        for i in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (system.potential.value(&qp) - system.potential.value(&qm)) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn extended_field_rescales_the_auxiliary_coordinate() {
        let model = circle_stiff_model(0.0, 0.0, 0.05, 2.0).unwrap();
        let field = model.extended_field();
        let q = [1.0, 0.0];
        let z = [3.0];
        assert_relative_eq!(field.energy(&q, &z), 0.5 * 1.5 * 1.5, epsilon = 1e-14);
        let mut gz = [0.0];
        field.grad_z(&q, &z, &mut gz);
        assert_relative_eq!(gz[0], 1.5 / 2.0, epsilon = 1e-14);
        assert_relative_eq!(model.nu(), 40.0, epsilon = 1e-14);
    }

    #[test]
    fn hard_constraint_geodesic_conserves_energy() {
        let model = StiffModel::new(
            Arc::new(ZeroEnergy),
            Arc::new(crate::models::CircleConstraint),
            0.1,
            1.0,
        )
        .unwrap();
        let system = model.extended_system().unwrap();
        let field = model.extended_field();
        let thermo = ThermostatConfig::scalar(1.0, 0.0, 0.0, 2, 1).unwrap();
        let mut cfg = IntegratorConfig::new(1e-4);
        cfg.metropolis = false;
        let mut stepper = Stepper::with_field(&system, &field, &thermo, Penalty::Infinite, cfg).unwrap();
        let mut s = PhaseState {
            q: vec![1.0, 0.0],
            p: vec![0.0, 0.7],
            z: vec![0.0],
            p_z: vec![0.4],
        };
        let e0 = stepper.energy(&s).unwrap();
        let mut rng = WalkerRng::new(11, 0);
        let mut xi = [0.0];
        for _ in 0..10_000 {
            stepper.hmc_step(&mut s, &mut rng).unwrap();
        }
        let e1 = stepper.energy(&s).unwrap();
        assert!((e1 - e0).abs() < 1e-8, "energy drift {}", e1 - e0);
        model.constraint.value(&s.q, &mut xi);
        assert!(xi[0].abs() < 1e-9, "constraint residual {}", xi[0]);
        assert!(s.z[0].abs() > 0.3, "free fiber coordinate should drift");
    }

    #[test]
    fn flat_ring_samples_a_uniform_angle() {
        let model = circle_stiff_model(0.0, 0.0, 0.1, 1.0).unwrap();
        let system = model.extended_system().unwrap();
        let field = model.extended_field();
        let beta = 1.0;
        let thermo = ThermostatConfig::scalar(beta, 1.0, 1.0, 2, 1).unwrap();
        let cfg = IntegratorConfig::new(0.2);
        let mut ws = GramWorkspace::new(&system);
        let mut init_rng = rng_stream(5, 0, StreamTag::Momenta);
        let mut s = init_state(&system, Penalty::Infinite, beta, &[1.0, 0.0], &mut ws, &mut init_rng)
            .unwrap();
        let mut stepper = Stepper::with_field(&system, &field, &thermo, Penalty::Infinite, cfg).unwrap();
        let mut rng = WalkerRng::new(5, 0);
        let (mut cs, mut sn) = (0.0, 0.0);
        let mut angles = Vec::new();
        let (burn, keep, thin) = (1000, 20_000, 20);
        for step in 0..burn + keep {
            stepper.hmc_step(&mut s, &mut rng).unwrap();
            if step >= burn {
                let theta = s.q[1].atan2(s.q[0]);
                cs += theta.cos();
                sn += theta.sin();
                if (step - burn) % thin == 0 {
                    angles.push(theta);
                }
            }
        }
        assert!((cs / keep as f64).abs() < 0.05, "mean cos {}", cs / keep as f64);
        assert!((sn / keep as f64).abs() < 0.05, "mean sin {}", sn / keep as f64);
        // The counting test needs roughly independent draws, hence the
        // thinning: the angle decorrelates in a few units of time.
        let bins = 8usize;
        let mut observed = vec![0.0; bins];
        for theta in &angles {
            let u = (theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            let b = ((u * bins as f64) as usize).min(bins - 1);
            observed[b] += 1.0;
        }
        let expected = vec![angles.len() as f64 / bins as f64; bins];
        let (_, p) = crate::stats::chi2_test(&observed, &expected).unwrap();
        assert!(p > 1e-3, "chi-square p = {p}");
    }

    #[test]
    fn fast_coordinate_shrinks_linearly_in_epsilon() {
        let beta = 1.0;
        let thermo = ThermostatConfig::scalar(beta, 1.0, 1.0, 2, 1).unwrap();
        let cfg = IntegratorConfig::new(0.05);
        let eps_list = [0.2, 0.1, 0.05];
        let mut logs = Vec::new();
        for (k, &eps) in eps_list.iter().enumerate() {
            let model = circle_stiff_model(0.4, 0.3, eps, 1.0).unwrap();
            let system = model.extended_system().unwrap();
            let field = model.extended_field();
            let pen = model.penalty();
            let mut ws = GramWorkspace::new(&system);
            let mut init_rng = rng_stream(23, k as u64, StreamTag::Momenta);
            let mut s =
                init_state(&system, pen, beta, &[1.0, 0.0], &mut ws, &mut init_rng).unwrap();
            let mut stepper = Stepper::with_field(&system, &field, &thermo, pen, cfg).unwrap();
            let mut rng = WalkerRng::new(23, k as u64);
            let (burn, keep) = (2000, 28_000);
            let mut sum = 0.0;
            let mut xi = [0.0];
            for step in 0..burn + keep {
                stepper.hmc_step(&mut s, &mut rng).unwrap();
                if step >= burn {
                    system.constraint.value(&s.q, &mut xi);
                    sum += xi[0].abs();
                }
            }
            logs.push((eps.ln(), (sum / keep as f64).ln()));
        }
        let n = logs.len() as f64;
        let mx = logs.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = logs.iter().map(|(_, y)| y).sum::<f64>() / n;
        let slope = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum::<f64>();
        assert!((slope - 1.0).abs() < 0.2, "got slope {slope}");
    }

    #[test]
    fn sweep_produces_finite_comparisons() {
        let model = circle_stiff_model(0.4, 0.3, 1.0, 1.0).unwrap();
        let sweep = SweepConfig {
            dt: 0.05,
            steps: 6000,
            burn_in: 1000,
            thinning: 5,
            beta: 1.0,
            gamma: 1.0,
            gamma_z: 1.0,
            seed: 7,
        };
        let observable = |q: &[f64]| q[1].atan2(q[0]);
        let rows = epsilon_sweep(&model, &[0.2, 0.05], &[1.0, 0.0], &observable, &sweep).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.observable_mean.is_finite());
            assert!(row.acceptance > 0.5 && row.acceptance <= 1.0, "acceptance {}", row.acceptance);
            assert!(row.marginal_distance > 0.0 && row.marginal_distance < 1.0);
        }
    }

    #[test]
    fn uncoupled_baseline_blows_up_where_the_penalized_chain_survives() {
        let eps = 1e-3;
        let model = circle_stiff_model(0.4, 0.3, eps, 1.0).unwrap();
        let system = model.full_system().unwrap();
        let thermo = ThermostatConfig::scalar(1.0, 0.1, 0.0, 2, 1).unwrap();
        let cfg = IntegratorConfig::new(0.05);
        let tilt = 1.0 + 2e-3;
        let s0 = PhaseState {
            q: vec![tilt * 0.3f64.cos(), tilt * 0.3f64.sin()],
            p: vec![0.0, 0.0],
            z: vec![0.0],
            p_z: vec![0.0],
        };
        let blowup = baseline_blowup_step(&system, &thermo, cfg, &s0, 1000, 3, 0)
            .unwrap()
            .expect("uncoupled integrator should leave the finite range");
        assert!(blowup < 500, "blowup step {blowup}");

        let extended = model.extended_system().unwrap();
        let field = model.extended_field();
        let pen = model.penalty();
        let mut ws = GramWorkspace::new(&extended);
        let mut init_rng = rng_stream(3, 1, StreamTag::Momenta);
        let mut s = init_state(&extended, pen, 1.0, &[1.0, 0.0], &mut ws, &mut init_rng).unwrap();
        let mut stepper = Stepper::with_field(&extended, &field, &thermo, pen, cfg).unwrap();
        let mut rng = WalkerRng::new(3, 1);
        for _ in 0..200 {
            stepper.langevin_step(&mut s, &mut rng).unwrap();
        }
        assert!(s.q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constructor_rejects_bad_parameters() {
        assert!(circle_stiff_model(0.4, 0.3, 0.0, 1.0).is_err());
        assert!(circle_stiff_model(0.4, 0.3, 0.1, 0.0).is_err());
        let model = circle_stiff_model(0.4, 0.3, 0.1, 1.0).unwrap();
        assert!(model.with_epsilon(-1.0).is_err());
        let sweep = SweepConfig {
            dt: 0.05,
            steps: 100,
            burn_in: 200,
            thinning: 1,
            beta: 1.0,
            gamma: 1.0,
            gamma_z: 1.0,
            seed: 1,
        };
        let obs = |q: &[f64]| q[0];
        assert!(epsilon_sweep(&model, &[0.1], &[1.0, 0.0], &obs, &sweep).is_err());
        let sweep_ok = SweepConfig {
            steps: 300,
            burn_in: 50,
            ..sweep
        };
        assert!(epsilon_sweep(&model, &[0.1], &[2.0, 0.0], &obs, &sweep_ok).is_err());
    }
}
