//! Closed-form stability and acceptance predictions for the harmonic
//! chain. Penalization turns each cosine mode into a harmonic oscillator
//! with mass `m_k = 1 + nubar^2 delta_k` and stiffness `delta_k`, so the
//! constrained leapfrog acts mode-wise as an explicit 2x2 update whose
//! spectral radius gives the exact stability threshold, and whose energy
//! error under canonical Gaussians has computable moments.

use nalgebra::Matrix2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::chain::{delta_k, NeumannTransform};

/// Per-mode effective mass `1 + nubar^2 delta_k`.
pub fn mode_mass(n_beads: usize, nubar: f64, k: usize) -> f64 {
    1.0 + nubar * nubar * delta_k(n_beads, k)
}

/// Dimensionless mode step `h_k = dt sqrt(delta_k / (1 + nubar^2 delta_k))`.
pub fn h_mode(dt: f64, n_beads: usize, nubar: f64, k: usize) -> f64 {
    let d = delta_k(n_beads, k);
    dt * (d / (1.0 + nubar * nubar * d)).sqrt()
}

/// One-step propagator of the normalized mode pair `(v_k, x_k)`:
/// a leapfrog rotation with unit determinant, stable when `|h| <= 2`.
pub fn mode_matrix(h: f64) -> Matrix2<f64> {
    Matrix2::new(
        1.0 - 0.5 * h * h,
        -h + 0.25 * h * h * h,
        h,
        1.0 - 0.5 * h * h,
    )
}

/// Stability summary of one mode.
#[derive(Debug, Clone)]
pub struct ModeStability {
    pub k: usize,
    pub h_k: f64,
    pub l_k: Matrix2<f64>,
    pub stable: bool,
}

pub fn mode_stability(dt: f64, n_beads: usize, nubar: f64, k: usize) -> ModeStability {
    let h_k = h_mode(dt, n_beads, nubar, k);
    ModeStability {
        k,
        h_k,
        l_k: mode_matrix(h_k),
        stable: h_k <= 2.0,
    }
}

/// Largest timestep with every mode stable:
/// `(4 nubar^2 + 1 / (N^2 sin^2((N-1) pi / 2N)))^{1/2}`. Grows like
/// `2 nubar` for large `N`, removing the `1/N` step restriction of the
/// unpenalized chain.
pub fn critical_timestep(n_beads: usize, nubar: f64) -> f64 {
    let nf = n_beads as f64;
    let s = ((nf - 1.0) * std::f64::consts::PI / (2.0 * nf)).sin();
    (4.0 * nubar * nubar + 1.0 / (nf * nf * s * s)).sqrt()
}

/// Mean and variance of the dimensionless one-step energy variation
/// `beta_N dH` under canonical Gaussians: exact finite sums
/// `m_N = sum h_k^6 / 2^5` and `sigma^2_N = sum h_k^6 / 2^4 + h_k^12 / 2^9`
/// over the nonzero modes.
pub fn energy_variation_moments(n_beads: usize, dt: f64, nubar: f64) -> (f64, f64) {
    let mut m = 0.0;
    let mut var = 0.0;
    for k in 1..n_beads {
        let h = h_mode(dt, n_beads, nubar, k);
        let h6 = h.powi(6);
        m += h6 / 32.0;
        var += h6 / 16.0 + h.powi(12) / 512.0;
    }
    (m, var)
}

/// Leading-order forms of [`energy_variation_moments`] for large `N`:
/// `(N dt^6 / (32 nubar^6), N dt^6 / (16 nubar^6))` when `nubar > 0`, and
/// `((5/8) N^7 dt^6, (5/4) N^7 dt^6)` when `nubar = 0`.
pub fn asymptotic_moments(n_beads: usize, dt: f64, nubar: f64) -> (f64, f64) {
    let nf = n_beads as f64;
    let dt6 = dt.powi(6);
    if nubar > 0.0 {
        let nu6 = nubar.powi(6);
        (nf * dt6 / (32.0 * nu6), nf * dt6 / (16.0 * nu6))
    } else {
        let n7 = nf.powi(7);
        (0.625 * n7 * dt6, 1.25 * n7 * dt6)
    }
}

/// Penalization branch of the critical-timestep scaling law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingBranch {
    /// `nubar > 0`: constant acceptance forces `N dt^6 = const`.
    Penalized,
    /// `nubar = 0`: constant acceptance forces `N^7 dt^6 = const`.
    Unpenalized,
}

/// Exponent `alpha` in `dt_max ~ N^{-alpha}` at fixed acceptance.
pub fn critical_dt_scaling_exponent(branch: ScalingBranch) -> f64 {
    match branch {
        ScalingBranch::Penalized => 1.0 / 6.0,
        ScalingBranch::Unpenalized => 7.0 / 6.0,
    }
}

/// Normalized spectral pairs `(v_k, x_k)`:
/// `v_k = (delta_k m_k)^{-1/4} (P p_nu)_k / sqrt(N)` and
/// `x_k = (delta_k m_k)^{1/4} (P q)_k / sqrt(N)` for `k >= 1`; the zero
/// mode keeps unit scaling (it is a free particle).
pub fn spectral_variables(
    t: &NeumannTransform,
    nubar: f64,
    q: &[f64],
    p_nu: &[f64],
) -> Vec<(f64, f64)> {
    let n = q.len();
    let root_n = (n as f64).sqrt();
    let qm = t.forward(q);
    let pm = t.forward(p_nu);
    (0..n)
        .map(|k| {
            if k == 0 {
                (pm[0] / root_n, qm[0] / root_n)
            } else {
                let w = (delta_k(n, k) * mode_mass(n, nubar, k)).powf(0.25);
                (pm[k] / (w * root_n), qm[k] * w / root_n)
            }
        })
        .collect()
}

/// Monte Carlo draws of the dimensionless one-step energy variation: each
/// sample propagates i.i.d. standard-normal mode pairs through the mode
/// matrices and accumulates the change of `(v^2 + x^2) / 2`.
pub fn mc_energy_variation(
    n_beads: usize,
    dt: f64,
    nubar: f64,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let mats: Vec<Matrix2<f64>> = (1..n_beads)
        .map(|k| mode_matrix(h_mode(dt, n_beads, nubar, k)))
        .collect();
    (0..samples)
        .map(|_| {
            let mut de = 0.0;
            for l in &mats {
                let v: f64 = rng.sample(StandardNormal);
                let x: f64 = rng.sample(StandardNormal);
                let v1 = l[(0, 0)] * v + l[(0, 1)] * x;
                let x1 = l[(1, 0)] * v + l[(1, 1)] * x;
                de += 0.5 * (v1 * v1 + x1 * x1 - v * v - x * x);
            }
            de
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_chain_system, ChainModel};
    use crate::integrators::{IntegratorConfig, Stepper};
    use crate::model::{init_state, penalized_momentum};
    use crate::rng::{rng_stream, StreamTag};
    use approx::assert_relative_eq;

    #[test]
    fn mode_step_values() {
        assert_relative_eq!(
            h_mode(0.1, 2, 0.0, 1),
            0.1 * 8.0f64.sqrt(),
            epsilon = 1e-15
        );
        assert_relative_eq!(h_mode(0.1, 2, 0.0, 1), 0.2828, epsilon = 1e-4);
        for k in [1usize, 5, 15] {
            assert_relative_eq!(
                h_mode(0.3, 16, 0.0, k),
                0.3 * delta_k(16, k).sqrt(),
                epsilon = 1e-14
            );
        }
        // Large penalty: h -> dt / nubar independently of the mode.
        let big = 1e6;
        let h1 = h_mode(0.2, 64, big, 1);
        let h63 = h_mode(0.2, 64, big, 63);
        assert_relative_eq!(h1, 0.2 / big, max_relative = 1e-4);
        assert_relative_eq!(h1, h63, max_relative = 1e-6);
    }

    #[test]
    fn mode_matrix_is_unimodular_and_cfl_matches_trace() {
        for h in [0.0f64, 0.3, 1.0, 1.99, 2.01, 3.5] {
            let l = mode_matrix(h);
            assert_relative_eq!(l.determinant(), 1.0, epsilon = 1e-12);
            let trace_stable = (l.trace()).abs() <= 2.0;
            assert_eq!(trace_stable, h <= 2.0, "h = {h}");
        }
        let s = mode_stability(0.5, 8, 0.0, 7);
        assert_eq!(s.stable, s.h_k <= 2.0);
    }

    #[test]
    fn critical_timestep_values() {
        assert_relative_eq!(
            critical_timestep(2, 0.0),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert_relative_eq!(critical_timestep(1_000_000, 1.0), 2.0, max_relative = 1e-5);
        let a = critical_timestep(64, 0.0);
        let b = critical_timestep(64, 0.5);
        let c = critical_timestep(64, 1.0);
        assert!(a < b && b < c);
        // Threshold is exactly where the stiffest mode hits h = 2.
        let dtc = critical_timestep(64, 0.3);
        assert_relative_eq!(h_mode(dtc, 64, 0.3, 63), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn energy_moment_values() {
        assert_eq!(energy_variation_moments(8, 0.0, 0.5), (0.0, 0.0));
        let (m, var) = energy_variation_moments(2, 0.1, 0.0);
        let h6 = (0.1 * 8.0f64.sqrt()).powi(6);
        assert_relative_eq!(m, h6 / 32.0, epsilon = 1e-18);
        assert_relative_eq!(m, 1.6e-5, max_relative = 1e-10);
        assert_relative_eq!(var, h6 / 16.0 + h6 * h6 / 512.0, epsilon = 1e-18);
    }

    #[test]
    fn asymptotics_match_exact_sums_at_large_n() {
        let n = 512;
        let dt = (n as f64).powf(-1.0 / 6.0) / 10.0;
        let (m, var) = energy_variation_moments(n, dt, 1.0);
        let (ma, va) = asymptotic_moments(n, dt, 1.0);
        assert_relative_eq!(m / ma, 1.0, epsilon = 0.05);
        assert_relative_eq!(var / va, 1.0, epsilon = 0.05);

        let dt0 = 1e-4;
        let (m0, var0) = energy_variation_moments(n, dt0, 0.0);
        let (ma0, va0) = asymptotic_moments(n, dt0, 0.0);
        assert_relative_eq!(m0 / ma0, 1.0, epsilon = 0.05);
        assert_relative_eq!(var0 / va0, 1.0, epsilon = 0.05);
    }

    #[test]
    fn scaling_exponents() {
        let pen = critical_dt_scaling_exponent(ScalingBranch::Penalized);
        let unpen = critical_dt_scaling_exponent(ScalingBranch::Unpenalized);
        assert_relative_eq!(pen, 1.0 / 6.0);
        assert_relative_eq!(unpen, 7.0 / 6.0);
        // Both sit inside the measured 0.2(1) and 1.2(1) windows.
        assert!((pen - 0.2).abs() <= 0.1);
        assert!((unpen - 1.2).abs() <= 0.1);
    }

    #[test]
    fn mc_energy_variation_matches_exact_moments() {
        let (n, dt, nubar) = (64, 0.08, 0.25);
        let (m, var) = energy_variation_moments(n, dt, nubar);
        let samples = 20_000;
        let mut rng = rng_stream(31, 0, StreamTag::Auxiliary);
        let draws = mc_energy_variation(n, dt, nubar, samples, &mut rng);
        let mean: f64 = draws.iter().sum::<f64>() / samples as f64;
        let se = (var / samples as f64).sqrt();
        assert!(
            (mean - m).abs() <= 3.0 * se,
            "mean {mean:.3e} vs exact {m:.3e}, s.e. {se:.3e}"
        );
        let sample_var: f64 =
            draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (samples - 1) as f64;
        assert_relative_eq!(sample_var / var, 1.0, epsilon = 0.15);
    }

    #[test]
    fn rattle_on_harmonic_chain_is_the_mode_matrix() {
        for (n, nubar) in [(16usize, 0.5), (64usize, 0.2)] {
            let chain = ChainModel::harmonic(n, nubar, 10.0).unwrap();
            let system = build_chain_system(&chain).unwrap();
            let pen = chain.penalty().unwrap();
            let thermo = chain.thermostat().unwrap();
            let dt = 0.01;
            let cfg = IntegratorConfig::new(dt);
            let mut stepper = Stepper::new(&system, &thermo, pen, cfg).unwrap();
            let mut init = rng_stream(32, 0, StreamTag::Momenta);
            let q0: Vec<f64> = (0..n).map(|i| 0.5 + 0.01 * (i as f64).sin()).collect();
            let mut s = init_state(
                &system,
                pen,
                chain.beta_n(),
                &q0,
                &mut stepper.ws,
                &mut init,
            )
            .unwrap();

            let t = NeumannTransform::new(n);
            let before = spectral_variables(
                &t,
                nubar,
                &s.q,
                &penalized_momentum(&system, pen, &s).unwrap(),
            );
            stepper.rattle_step(&mut s).unwrap();
            let after = spectral_variables(
                &t,
                nubar,
                &s.q,
                &penalized_momentum(&system, pen, &s).unwrap(),
            );

            // Zero mode free-streams; every other mode follows its matrix.
            assert_relative_eq!(after[0].0, before[0].0, epsilon = 1e-10);
            assert_relative_eq!(
                after[0].1,
                before[0].1 + dt * before[0].0,
                epsilon = 1e-10
            );
            for k in 1..n {
                let l = mode_matrix(h_mode(dt, n, nubar, k));
                let want_v = l[(0, 0)] * before[k].0 + l[(0, 1)] * before[k].1;
                let want_x = l[(1, 0)] * before[k].0 + l[(1, 1)] * before[k].1;
                assert_relative_eq!(after[k].0, want_v, epsilon = 1e-10);
                assert_relative_eq!(after[k].1, want_x, epsilon = 1e-10);
            }
        }
    }
}
