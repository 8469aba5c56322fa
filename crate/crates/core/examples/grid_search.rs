//! Tunes the sampler knobs on a small validation set. RandomInit runs once
//! per image and is shared by every grid cell.

use ddrmpr::ddrm_pr::{grid_csv_bytes, grid_search, GridSpec, PrPipelineConfig, ValItem};
use ddrmpr::denoise::DenoiserHandle;
use ddrmpr::fixtures::piecewise_constant;
use ddrmpr::forward_model::{simulate, Geometry};
use ddrmpr::linops::make_fourier_operator;

pub fn run_example() -> ddrmpr::Result<()> {
    let n = 12;
    let op = make_fourier_operator(n, 2)?;
    let val: Vec<ValItem> = (0..3)
        .map(|k| {
            let x = piecewise_constant(n, 80 + k);
            let y = simulate(&x, &op, Geometry::Fourier { n_side: n, factor: 2 }, 1.0, k)?;
            Ok((x, vec![y]))
        })
        .collect::<ddrmpr::Result<_>>()?;

    let mut base = PrPipelineConfig::fourier_reference();
    base.random_init.num_inits = 6;
    base.random_init.final_iters = 150;
    base.hio_inner_iters = 20;
    let grid = GridSpec::parse(
        "eta = 0.15, 0.5, 1.0\neta_b = 0.0, 0.2, 1.0\nsteps = 6  # short trajectories\nt_init = 200, 350\n",
        &base.sampler,
    )?;
    let (best, rows) = grid_search(&grid, &val, &base, &DenoiserHandle::shrinkage(1.0))?;
    println!("{} cells scored", rows.len());
    let csv = String::from_utf8(grid_csv_bytes(&rows)?).expect("utf-8 csv");
    for line in csv.lines().take(4) {
        println!("  {line}");
    }
    let s = &best.sampler;
    println!(
        "best: eta {} eta_b {} steps {} t_init {}",
        s.eta, s.eta_b, s.steps, s.t_init
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
