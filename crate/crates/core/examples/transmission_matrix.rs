//! Phase retrieval through a random complex transmission matrix, the dense
//! counterpart of the Fourier problem. A generic operator has no shift or flip
//! ambiguity, so scores are computed without alignment.
//!
//! The reference setting (η = 1, η_b = 0) never applies the consistency
//! projection; measurements enter only through the initialization, so it
//! needs a learned prior to hold on to them. With a builtin denoiser, a
//! nonzero η_b keeps the trajectory on the measurements.

use std::sync::Arc;

use ddrmpr::ddrm_pr::{reconstruct_problem, PrPipelineConfig, PrProblem};
use ddrmpr::denoise::{Denoiser, DenoiserHandle};
use ddrmpr::eval::psnr;
use ddrmpr::fixtures::piecewise_constant;
use ddrmpr::forward_model::{simulate, Geometry};
use ddrmpr::linops::{adjoint_mismatch, make_random_transmission_operator, LinearOperator};

pub fn run_example() -> ddrmpr::Result<()> {
    let side = 12;
    let n = side * side;
    let m = 4 * n;
    let op = make_random_transmission_operator(m, n, 11)?.with_svd()?;
    println!(
        "operator {} ({m}x{n}), rank {}, adjoint mismatch {:.1e}",
        op.id(),
        op.svd().map_or(0, |s| s.rank),
        adjoint_mismatch(&op, 4, 0)
    );
    let op: Arc<dyn LinearOperator> = Arc::new(op);
    let x = piecewise_constant(side, 9);
    let den = DenoiserHandle::gaussian(2.0);

    for alpha in [0.0, 0.2] {
        let y = simulate(&x, op.as_ref(), Geometry::Dense { m, n }, alpha, 1)?;
        let mut reference = PrPipelineConfig::transmission_reference();
        reference.random_init.num_inits = 8;
        reference.random_init.final_iters = 200;
        reference.hio_inner_iters = 30;
        let mut weighted = reference.clone();
        weighted.sampler.eta = 0.5;
        weighted.sampler.eta_b = 1.0;

        let problem = PrProblem::general(std::slice::from_ref(&y), op.clone(), &reference)?;
        let p_init = psnr(&problem.init().clone().clamp_to_range(), &x, 1.0)?;
        println!("alpha {alpha}: initialization {p_init:.2} dB");
        for (name, cfg) in [("eta 1, eta_b 0", &reference), ("eta 0.5, eta_b 1", &weighted)] {
            let out = reconstruct_problem(&problem, cfg, &den)?;
            println!("  {name} with {}: {:.2} dB", den.id(), psnr(&out.image, &x, 1.0)?);
        }
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
