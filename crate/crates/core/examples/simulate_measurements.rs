//! Simulates noisy oversampled Fourier magnitudes for a synthetic object and
//! round-trips them through the on-disk measurement format.

use ddrmpr::field_ops::pad_to_oversampled;
use ddrmpr::fixtures::piecewise_constant;
use ddrmpr::forward_model::{intensity, simulate, Geometry, MeasurementSet};
use ddrmpr::linops::make_fourier_operator;

pub fn run_example() -> ddrmpr::Result<()> {
    let x = piecewise_constant(16, 1);
    let op = make_fourier_operator(16, 2)?;
    let geometry = Geometry::Fourier { n_side: 16, factor: 2 };
    println!("object 16x16, oversampled grid {:?}", geometry.out_dims());
    println!("zero-padded energy {:.4}", pad_to_oversampled(&x, 2)?.energy());

    for alpha in [0.0, 0.5, 1.0, 2.0, 3.0] {
        let m = simulate(&x, &op, geometry, alpha, 7)?;
        let clean = simulate(&x, &op, geometry, 0.0, 7)?;
        let err: f64 = intensity(&m)
            .iter()
            .zip(intensity(&clean))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        println!(
            "alpha {alpha:.1}: |y| {:.4}, intensity error {err:.4}, clamped {}",
            m.norm(),
            m.meta.clamped
        );
    }

    let dir = tempfile::tempdir()?;
    let stem = dir.path().join("blocks_c0");
    let m = simulate(&x, &op, geometry, 1.0, 7)?;
    m.save(&stem)?;
    let back = MeasurementSet::load(&stem)?;
    // the tensor is stored as f32
    let gap = m.y.iter().zip(&back.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("saved and reloaded {} values, max gap {gap:.2e}", back.y.len());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
