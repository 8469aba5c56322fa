//! Diffusion-prior phase retrieval from noisy Fourier magnitudes with the
//! builtin wavelet-shrinkage denoiser, compared with its HIO initialization.

use ddrmpr::ddrm_pr::{reconstruct_problem, PrPipelineConfig, PrProblem};
use ddrmpr::denoise::DenoiserHandle;
use ddrmpr::eval::aligned_scores;
use ddrmpr::fixtures::piecewise_constant;
use ddrmpr::forward_model::{simulate, Geometry};
use ddrmpr::linops::make_fourier_operator;

pub fn run_example() -> ddrmpr::Result<()> {
    let n = 24;
    let op = make_fourier_operator(n, 2)?;
    let mut cfg = PrPipelineConfig::fourier_reference();
    cfg.random_init.num_inits = 10;
    cfg.random_init.final_iters = 300;
    cfg.hio_inner_iters = 40;
    let den = DenoiserHandle::shrinkage(1.0);
    println!(
        "eta {} eta_b {} steps {} t_init {}",
        cfg.sampler.eta, cfg.sampler.eta_b, cfg.sampler.steps, cfg.sampler.t_init
    );

    for seed in 0..3 {
        let x = piecewise_constant(n, 60 + seed);
        let y = simulate(&x, &op, Geometry::Fourier { n_side: n, factor: 2 }, 2.0, seed)?;
        let problem = PrProblem::fourier(&[y], &cfg)?;
        let opts = problem.align_options();
        let (p_init, _, _) = aligned_scores(&problem.init().clone().clamp_to_range(), &x, opts)?;
        let out = reconstruct_problem(&problem, &cfg, &den)?;
        let (p_out, s_out, _) = aligned_scores(&out.image, &x, opts)?;
        println!(
            "image {seed}: HIO init {p_init:.2} dB -> sampled {p_out:.2} dB (SSIM {:.3}), schedule {}",
            s_out.unwrap_or(f64::NAN),
            &out.manifest.schedule_hash[..12]
        );
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
