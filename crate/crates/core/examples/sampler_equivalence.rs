//! For a noiseless linear problem the per-singular-direction sampler and the
//! closed-form update `x_θ − H†H x_θ + H†y` produce the same trajectory when
//! they share noise draws and branch mixing.

use ddrmpr::ddrm_core::{
    run_sampler_traced, schedule_linear_vp, timesteps, BranchMixing, NoiseCoupling, SamplerConfig, SamplerMode,
};
use ddrmpr::denoise::{DenoiserHandle, Geometry};
use ddrmpr::linops::LinearOperator;
use ddrmpr::selftest::random_dense_operator;
use ddrmpr::Complex64;

pub fn run_example() -> ddrmpr::Result<()> {
    let sched = schedule_linear_vp(1000, 100.0)?;
    let cfg = SamplerConfig {
        eta: 0.6,
        eta_b: 0.8,
        steps: 20,
        t_init: 400,
        mixing: Some(BranchMixing::Exact),
        coupling: NoiseCoupling::Shared,
        ..Default::default()
    };
    println!("timesteps {:?}", timesteps(cfg.t_init, cfg.steps));
    let den = DenoiserHandle::gaussian(2.0);

    for (m, n, rank) in [(12, 8, None), (6, 12, None), (10, 10, Some(3))] {
        let op = random_dense_operator(m, n, rank, 5)?;
        let x0: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(((i as f64) * 0.7).sin() * 0.8, 0.0))
            .collect();
        let y = op.apply(&x0);
        let shape = Geometry {
            height: 1,
            width: n,
            channels: 1,
        };
        let a = run_sampler_traced(
            &y,
            &op,
            &sched,
            &cfg,
            &den,
            SamplerMode::Spectral { sigma_y: 0.0 },
            shape,
            0,
        )?;
        let b = run_sampler_traced(&y, &op, &sched, &cfg, &den, SamplerMode::Simplified, shape, 0)?;
        let worst = a
            .iterates
            .iter()
            .zip(&b.iterates)
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let rank = op.svd().map_or(0, |s| s.rank);
        println!("{m}x{n} operator of rank {rank}: largest iterate gap {worst:.2e}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
