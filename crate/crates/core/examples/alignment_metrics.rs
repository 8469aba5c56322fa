//! PSNR, SSIM and the trivial-ambiguity search. A Fourier magnitude cannot
//! tell an object from its circular shifts or its point reflection, so
//! reconstructions are aligned to the ground truth before scoring.

use ddrmpr::eval::{align_ambiguities, mse, psnr, psnr_capped, ssim, Alignment};
use ddrmpr::fixtures::piecewise_constant;

pub fn run_example() -> ddrmpr::Result<()> {
    let gt = piecewise_constant(16, 4);
    let brighter = gt.map(|v| (v + 0.1).min(1.0));
    println!("PSNR(gt, gt + 0.1) = {:.3} dB", psnr(&gt, &brighter, 1.0)?);
    println!(
        "PSNR(gt, gt) capped = {:.1} dB, SSIM = {}",
        psnr_capped(&gt, &gt, 1.0)?,
        ssim(&gt, &gt)?
    );

    for al in [
        Alignment {
            flipped: false,
            shift: (3, 5),
            sign: 1,
        },
        Alignment {
            flipped: true,
            shift: (0, 0),
            sign: 1,
        },
        Alignment {
            flipped: true,
            shift: (15, 2),
            sign: 1,
        },
    ] {
        let moved = al.apply(&gt);
        let (back, found) = align_ambiguities(&moved, &gt)?;
        println!(
            "applied {al:?}: raw PSNR {:.2} dB, found {found:?}, aligned MSE {:.1e}",
            psnr(&moved, &gt, 1.0)?,
            mse(&back, &gt)?
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
