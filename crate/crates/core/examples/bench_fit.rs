use irtfed_core::sim::*;
use std::time::Instant;

fn main() {
    let cfg = StudyConfig {
        n_items: 10, n_schools: 10, students_per_school: 300, replications: 1,
        alpha_range: (1.0, 2.0), beta_range: (0.0, 1.0),
        s_true: vec![0.0; 10], contamination: Contamination::None, seed: 42,
    };
    let data = generate_dataset(&cfg, 0).unwrap();
    let t = Instant::now();
    let fit = fit_federated(&data.schools, false, 1e-4, 500).unwrap();
    println!("federated N=3000: {:?}, converged {} iters {} evals {}", t.elapsed(), fit.converged, fit.iterations, fit.comm_rounds);
    let t = Instant::now();
    let (ma, _mb) = fit_meta(&data.schools, 1e-4, 500).unwrap();
    println!("meta 10x300: {:?} alpha0 {:.3}", t.elapsed(), ma[0]);

    // mse vs truth
    let mse: f64 = fit.alpha.iter().zip(&data.truth.alpha).map(|(a,t)| (a-t)*(a-t)).sum::<f64>() / 10.0;
    println!("fed mse_alpha at Nk=300: {:.5}", mse);

    let cfg50 = StudyConfig { students_per_school: 50, ..cfg.clone() };
    let data50 = generate_dataset(&cfg50, 0).unwrap();
    let t = Instant::now();
    let fit50 = fit_federated(&data50.schools, false, 1e-4, 500).unwrap();
    println!("federated N=500: {:?} iters {}", t.elapsed(), fit50.iterations);
    let t = Instant::now();
    let _ = fit_meta(&data50.schools, 1e-4, 500).unwrap();
    println!("meta 10x50: {:?}", t.elapsed());

    // DP fit benchmark
    let t = Instant::now();
    let dp = irtfed_core::dp::DpConfig::default();
    let dpfit = fit_dp(&data50.schools, &dp, 777, false).unwrap();
    println!("dp N=500 rounds {}: {:?}", dpfit.rounds_executed, t.elapsed());
    let t = Instant::now();
    let dpfit2 = fit_dp(&data.schools, &dp, 778, false).unwrap();
    println!("dp N=3000 rounds {}: {:?} eps {:.3}", dpfit2.rounds_executed, t.elapsed(), dpfit2.ledger.epsilon);
}
