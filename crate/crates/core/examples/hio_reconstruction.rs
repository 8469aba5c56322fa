//! Classical phase retrieval on a 32x32 object: multi-start HIO, then a few
//! error-reduction iterations, scored after removing the trivial ambiguities.

use ddrmpr::classic_pr::{
    er_run_traced, fourier_grid_operator, hio_run, random_init, ConstraintSet, HioParams, RandomInitParams,
};
use ddrmpr::eval::aligned_scores;
use ddrmpr::eval::AlignOptions;
use ddrmpr::field_ops::crop_top_left;
use ddrmpr::fixtures::piecewise_constant;
use ddrmpr::forward_model::{simulate, Geometry};
use ddrmpr::linops::make_fourier_operator;

pub fn run_example() -> ddrmpr::Result<()> {
    let n = 32;
    let x = piecewise_constant(n, 3);
    let y = simulate(
        &x,
        &make_fourier_operator(n, 2)?,
        Geometry::Fourier { n_side: n, factor: 2 },
        0.0,
        0,
    )?;

    // solvers work on the oversampled grid with a top-left support
    let grid_op = fourier_grid_operator(n, 2)?;
    let cons = ConstraintSet::fourier(n, 2)?;
    let params = RandomInitParams {
        num_inits: 16,
        short_iters: 50,
        final_iters: 400,
        ..Default::default()
    };
    let init = random_init(&y.y, &grid_op, &params, &cons)?;
    println!(
        "RandomInit picked start {} of {}, residual {:.3e} (relative {:.3e})",
        init.chosen,
        params.num_inits,
        init.residual,
        init.residual / y.norm()
    );

    let start = init.image(2 * n, 2 * n);
    let (hio, trace) = hio_run(&y.y, &grid_op, &start, &HioParams { iters: 100, beta: 0.9 }, &cons)?;
    let (er, er_trace) = er_run_traced(&y.y, &grid_op, &hio, 20, &cons)?;
    println!("100 more HIO: {:.3e} -> {:.3e}", trace[0], trace[trace.len() - 1]);
    println!(
        "20 ER:        {:.3e} -> {:.3e}",
        er_trace[0],
        er_trace[er_trace.len() - 1]
    );

    let recon = crop_top_left(&er, n, n)?.clamp_to_range();
    let (psnr, ssim, al) = aligned_scores(&recon, &x, AlignOptions::default())?;
    println!(
        "aligned PSNR {psnr:.2} dB, SSIM {:.4}, alignment {al:?}",
        ssim.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
