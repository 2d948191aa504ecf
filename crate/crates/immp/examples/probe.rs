use immp::chain::{build_chain_system, ChainModel};
use immp::integrators::{IntegratorConfig, Stepper, VerletStepper, WalkerRng};
use immp::model::{init_state, PhaseState};
use immp::rng::{rng_stream, StreamTag};
use immp::stats;
use rand::Rng;
use rand_distr::StandardNormal;

const DT: f64 = 6.5e-5;
const HORIZON: f64 = 60.0;
const BURN: f64 = 6.0;
const REC: f64 = 0.05;

fn report(name: &str, c: &[f64], p2_sum: f64, n_rec: usize) {
    let skip = (BURN / REC) as usize;
    let c = &c[skip..];
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c.len() as f64;
    let rho = stats::autocorrelation(c, 300);
    let mut zero_cross = f64::NAN;
    let mut tau_int = 0.5;
    for (k, &r) in rho.iter().enumerate().skip(1) {
        if r < 0.0 {
            zero_cross = k as f64 * REC;
            break;
        }
        tau_int += r;
    }
    let lags = [10, 20, 40, 60, 100, 140, 200];
    let vals: Vec<String> = lags
        .iter()
        .map(|&k| format!("{:.3}", rho.get(k).copied().unwrap_or(f64::NAN)))
        .collect();
    println!(
        "{name}: mean={mean:.3} sd={:.3} <p50^2>={:.3} zero_cross={zero_cross:.2} tau_int={:.3}",
        var.sqrt(),
        p2_sum / n_rec as f64,
        tau_int * REC,
    );
    println!("    rho@[0.5,1,2,3,5,7,10] = [{}]", vals.join(", "));
}

fn main() {
    let n = 100usize;
    let beta = 10.0;
    let steps = (HORIZON / DT) as usize;
    let rec = (REC / DT).round() as usize;
    let seed = 424242u64;

    // scenario list: (label, nubar, gamma, use_pen_path)
    let scenarios = [
        ("verlet+ou g=0.1", 0.0, 0.1, false),
        ("pen 3.16e-3 langevin g=0.1", 0.0031622776601683794, 0.1, true),
        ("pen 3.16e-3 rattle-only g=0", 0.0031622776601683794, 0.0, true),
        ("verlet nve g=0", 0.0, 0.0, false),
    ];

    for (idx, (label, nubar, gamma, pen_path)) in scenarios.iter().enumerate() {
        let mut chain = ChainModel::new(n, f64::max(*nubar, 0.05), beta).unwrap();
        chain.gamma = *gamma;
        let system = build_chain_system(&chain).unwrap();
        let thermo = chain.thermostat().unwrap();
        let q0 = chain.spread_positions();
        let mut icfg = IntegratorConfig::new(DT);
        icfg.metropolis = false;
        let replica = 77 + idx as u64;
        let mut rng = WalkerRng::new(seed, replica);
        let mut init = rng_stream(seed, replica, StreamTag::InitialState);

        let mut c = Vec::new();
        let mut p2 = 0.0;
        let mut n_rec = 0usize;
        let t0 = std::time::Instant::now();
        if *pen_path {
            let chain_pen = ChainModel::new(n, *nubar, beta).unwrap();
            let system = build_chain_system(&chain_pen).unwrap();
            let pen = chain_pen.penalty().unwrap();
            let mut stepper = Stepper::new(&system, &thermo, pen, icfg).unwrap();
            let mut s =
                init_state(&system, pen, chain_pen.beta_n(), &q0, &mut stepper.ws, &mut init)
                    .unwrap();
            for step in 0..steps {
                stepper.langevin_step(&mut s, &mut rng).unwrap();
                if step % rec == 0 {
                    c.push(stats::center_of_mass(&s.q));
                    p2 += s.p[49] * s.p[49];
                    n_rec += 1;
                }
            }
        } else {
            let mut stepper = VerletStepper::new(&system, &thermo, icfg).unwrap();
            let mut s = PhaseState::zeros(n, n - 1);
            s.q.copy_from_slice(&q0);
            let scale = 1.0 / chain.beta_n().sqrt();
            for p in s.p.iter_mut() {
                *p = scale * init.sample::<f64, _>(StandardNormal);
            }
            for step in 0..steps {
                stepper.step(&mut s, &mut rng).unwrap();
                if step % rec == 0 {
                    c.push(stats::center_of_mass(&s.q));
                    p2 += s.p[49] * s.p[49];
                    n_rec += 1;
                }
            }
        }
        let el = t0.elapsed().as_secs_f64();
        print!("[{el:.1}s] ");
        report(label, &c, p2, n_rec);
    }
}
