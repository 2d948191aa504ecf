//! Observables and estimators: chain macro-observables, autocorrelation,
//! kernel density estimates, relative entropy, threshold transition times,
//! the position/momentum norms used by the coupling diagnostics, and the
//! goodness-of-fit tests backing the acceptance suite.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::chain::{delta_k, NeumannTransform};
use crate::error::{Error, Result};

/// Uniformly sampled scalar observable with its provenance.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub replica: u64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, dt: f64, seed: u64, replica: u64) -> Self {
        Self {
            values,
            dt,
            seed,
            replica,
        }
    }
}

/// End-to-end extent `q_N - q_1`.
pub fn chain_length(q: &[f64]) -> f64 {
    q[q.len() - 1] - q[0]
}

/// Position of the central bead `q_{N/2}` (1-based midpoint).
pub fn center_of_mass(q: &[f64]) -> f64 {
    q[(q.len() - 1) / 2]
}

/// Biased autocorrelation estimate, normalized so `rho[0] = 1`.
pub fn autocorrelation(values: &[f64], max_lag: usize) -> Vec<f64> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let mut rho = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag.min(n - 1) {
        let mut acc = 0.0;
        for t in 0..n - lag {
            acc += (values[t] - mean) * (values[t + lag] - mean);
        }
        rho.push(if var > 0.0 { acc / var } else { 1.0 });
    }
    rho
}

/// Integrated autocorrelation time in units of the sampling interval:
/// `1 + 2 sum rho_t`, truncated at the first lag below 0.05. Distribution
/// tests assume roughly independent draws, so chains should be thinned by
/// a few times this before a KS or chi-square comparison.
pub fn integrated_autocorr_time(values: &[f64]) -> f64 {
    if values.len() < 8 {
        return 1.0;
    }
    let max_lag = (values.len() / 4).clamp(1, 2000);
    let rho = autocorrelation(values, max_lag);
    let mut tau = 1.0;
    for &r in rho.iter().skip(1) {
        if r < 0.05 {
            break;
        }
        tau += 2.0 * r;
    }
    tau.max(1.0)
}

fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (n - 1).max(1) as f64;
    var.sqrt()
}

/// Silverman rule-of-thumb bandwidth `1.06 sigma n^{-1/5}`, with a small
/// floor for degenerate samples.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let sd = sample_std(samples);
    let n = samples.len() as f64;
    let bw = 1.06 * sd * n.powf(-0.2);
    if bw > 0.0 {
        bw
    } else {
        let center = samples.iter().sum::<f64>() / n;
        1e-3 * (1.0 + center.abs())
    }
}

/// 512-point evaluation grid spanning the sample range extended by three
/// bandwidths on each side.
pub fn kde_grid(samples: &[f64]) -> Vec<f64> {
    let bw = silverman_bandwidth(samples);
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * bw;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bw;
    let m = 512;
    (0..m)
        .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
        .collect()
}

/// Gaussian kernel density estimate on `grid`.
pub fn kde_density(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let bw = silverman_bandwidth(samples);
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &s in samples {
                let u = (x - s) / bw;
                acc += (-0.5 * u * u).exp();
            }
            acc * norm
        })
        .collect()
}

/// Discrete relative entropy `sum p ln(p/q) dx` on a uniform grid, with
/// the reference density floored at 1e-12.
pub fn relative_entropy(p_hat: &[f64], q_hat: &[f64], grid: &[f64]) -> f64 {
    let dx = grid[1] - grid[0];
    let mut acc = 0.0;
    for (p, q) in p_hat.iter().zip(q_hat) {
        if *p > 0.0 {
            acc += p * (p / q.max(1e-12)).ln();
        }
    }
    acc * dx
}

/// Pooled mean transition time between two thresholds.
#[derive(Debug, Clone, Copy)]
pub struct TransitionTime {
    pub mean: f64,
    pub std_error: f64,
    pub events: usize,
}

/// Mean first-passage duration between levels `a < b`, pooled over both
/// directions. An upward event starts at the last upcrossing of `a` before
/// the series reaches `b` (any return below `a` resets the clock);
/// downward events are defined symmetrically.
pub fn mean_transition_time(ts: &TimeSeries, a: f64, b: f64) -> Result<TransitionTime> {
    if !(a < b) {
        return Err(Error::InvalidConfig(format!(
            "thresholds must satisfy a < b, got a = {a}, b = {b}"
        )));
    }
    let x = &ts.values;
    let mut durations = Vec::new();
    let mut collect = |low_to_high: bool| {
        let mut armed: Option<usize> = None;
        let mut outside = if low_to_high { x[0] < a } else { x[0] > b };
        for (t, &v) in x.iter().enumerate() {
            let (reset, arm_level, hit) = if low_to_high {
                (v < a, v >= a, v >= b)
            } else {
                (v > b, v <= b, v <= a)
            };
            if reset {
                armed = None;
                outside = true;
            } else if outside && arm_level {
                armed = Some(t);
                outside = false;
            }
            if hit {
                if let Some(t0) = armed.take() {
                    durations.push((t - t0) as f64 * ts.dt);
                }
            }
        }
    };
    collect(true);
    collect(false);
    let events = durations.len();
    if events < 10 {
        return Err(Error::InsufficientCrossings { events });
    }
    let mean = durations.iter().sum::<f64>() / events as f64;
    let var = durations
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / (events - 1) as f64;
    Ok(TransitionTime {
        mean,
        std_error: (var / events as f64).sqrt(),
        events,
    })
}

/// Normalized position norm `(N^{-1} sum q_i^2)^{1/2}`.
pub fn norm_l2(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    (q.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
}

/// Momentum norm weighted by the inverse Laplacian in mode space, the mean
/// mode entering with unit weight:
/// `(N^{-1} (y_0^2 + sum_{k>=1} y_k^2 / delta_k))^{1/2}`.
pub fn norm_hminus1(p: &[f64]) -> f64 {
    let n = p.len();
    let t = NeumannTransform::new(n);
    norm_hminus1_with(&t, p)
}

/// As [`norm_hminus1`] with a reusable transform.
pub fn norm_hminus1_with(t: &NeumannTransform, p: &[f64]) -> f64 {
    let n = p.len();
    let modes = t.forward(p);
    let mut acc = modes[0] * modes[0];
    for (k, y) in modes.iter().enumerate().skip(1) {
        acc += y * y / delta_k(n, k);
    }
    (acc / n as f64).sqrt()
}

/// Kolmogorov asymptotic survival function `Q(lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut acc = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        acc += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * acc).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against a reference CDF. Returns the
/// statistic and the asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let hi = (i as f64 + 1.0) / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    let rn = n.sqrt();
    let p = kolmogorov_q((rn + 0.12 + 0.11 / rn) * d);
    (d, p)
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let mut d = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        let t = sa[i].min(sb[j]);
        while i < na && sa[i] <= t {
            i += 1;
        }
        while j < nb && sb[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let rn = ne.sqrt();
    let p = kolmogorov_q((rn + 0.12 + 0.11 / rn) * d);
    (d, p)
}

/// Pearson chi-square test of observed counts against expected counts.
pub fn chi2_test(observed: &[f64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::InvalidConfig(
            "chi-square needs matching count vectors with at least 2 bins".into(),
        ));
    }
    let mut stat = 0.0;
    for (o, e) in observed.iter().zip(expected) {
        if *e <= 0.0 {
            return Err(Error::InvalidConfig(
                "chi-square expected counts must be positive".into(),
            ));
        }
        stat += (o - e) * (o - e) / e;
    }
    let dof = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(dof)
        .map_err(|e| Error::InvalidConfig(format!("chi-square setup: {e}")))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

/// Anderson-Darling normality test with estimated mean and variance
/// (case 4 of D'Agostino & Stephens). Returns the adjusted statistic and
/// p-value.
pub fn anderson_darling_normal(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let sd = sample_std(samples);
    let mut z: Vec<f64> = samples.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut a2 = 0.0;
    for i in 0..n {
        let phi_i = normal.cdf(z[i]).clamp(1e-300, 1.0 - 1e-16);
        let phi_rev = normal.cdf(z[n - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        a2 += (2.0 * i as f64 + 1.0) * (phi_i.ln() + (1.0 - phi_rev).ln());
    }
    a2 = -nf - a2 / nf;
    let a_star = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if a_star >= 0.6 {
        (1.2937 - 5.709 * a_star + 0.0186 * a_star * a_star).exp()
    } else if a_star > 0.34 {
        (0.9177 - 4.279 * a_star - 1.38 * a_star * a_star).exp()
    } else if a_star > 0.2 {
        1.0 - (-8.318 + 42.796 * a_star - 59.938 * a_star * a_star).exp()
    } else {
        1.0 - (-13.436 + 101.14 * a_star - 223.73 * a_star * a_star).exp()
    };
    (a_star, p.clamp(0.0, 1.0))
}

/// Squared same-noise distance between a penalized harmonic chain and its
/// unpenalized twin.
#[derive(Debug, Clone, Copy)]
pub struct CouplingRow {
    pub nubar: f64,
    pub mean_sq_distance: f64,
}

/// Runs the harmonic chain once per penalty value with bitwise-identical
/// noise and identical initial data, and reports the replica-averaged
/// squared position distance to the unpenalized run at the final time.
pub fn same_noise_coupling_distance(
    nubar_list: &[f64],
    n_beads: usize,
    t_final: f64,
    dt: f64,
    replicas: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<CouplingRow>> {
    use crate::chain::{build_chain_system, ChainModel};
    use crate::integrators::{IntegratorConfig, Stepper, VerletStepper, WalkerRng};
    use crate::model::PhaseState;
    use crate::rng::{rng_stream, StreamTag};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let steps = (t_final / dt).round() as usize;
    let mut cfg = IntegratorConfig::new(dt);
    cfg.metropolis = false;
    let mut rows: Vec<CouplingRow> = nubar_list
        .iter()
        .map(|&nb| CouplingRow {
            nubar: nb,
            mean_sq_distance: 0.0,
        })
        .collect();

    for replica in 0..replicas as u64 {
        let mut init = rng_stream(seed, replica, StreamTag::InitialState);
        let q0: Vec<f64> = (0..n_beads)
            .map(|i| 0.5 + 0.02 * (i as f64 * 0.37).sin())
            .collect();
        let p0: Vec<f64> = (0..n_beads)
            .map(|_| init.sample::<f64, _>(StandardNormal) / beta.sqrt())
            .collect();

        let base_model = ChainModel::harmonic(n_beads, 0.0, beta)?;
        let base_system = build_chain_system(&base_model)?;
        let thermo = base_model.thermostat()?;
        let mut base_state = PhaseState::zeros(n_beads, n_beads - 1);
        base_state.q.copy_from_slice(&q0);
        base_state.p.copy_from_slice(&p0);
        let mut base = VerletStepper::new(&base_system, &thermo, cfg)?;
        let mut rng = WalkerRng::new(seed, replica);
        for _ in 0..steps {
            base.step(&mut base_state, &mut rng)?;
        }

        for row in rows.iter_mut() {
            if row.nubar == 0.0 {
                continue;
            }
            let model = ChainModel::harmonic(n_beads, row.nubar, beta)?;
            let system = build_chain_system(&model)?;
            let pen = model.penalty().expect("nonzero penalty");
            let nu = row.nubar * n_beads as f64;
            let mut s = PhaseState::zeros(n_beads, n_beads - 1);
            s.q.copy_from_slice(&q0);
            s.p.copy_from_slice(&p0);
            // Fast variables chosen on both constraints without touching p,
            // so the two runs start from the same slow state.
            for b in 0..n_beads - 1 {
                s.z[b] = nu * (q0[b + 1] - q0[b]);
                s.p_z[b] = nu * (p0[b + 1] - p0[b]);
            }
            let mut stepper = Stepper::new(&system, &thermo, pen, cfg)?;
            let mut rng = WalkerRng::new(seed, replica);
            for _ in 0..steps {
                stepper.langevin_step(&mut s, &mut rng)?;
            }
            let d: f64 = s
                .q
                .iter()
                .zip(&base_state.q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n_beads as f64;
            row.mean_sq_distance += d / replicas as f64;
        }
    }
    Ok(rows)
}
