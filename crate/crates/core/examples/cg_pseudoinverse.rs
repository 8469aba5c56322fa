//! Matrix-free least squares: conjugate gradients on the normal equations
//! against the dense SVD pseudoinverse, including rank-deficient operators
//! where CG from zero still returns the minimum-norm solution.

use ddrmpr::linops::{pinv_apply, pinv_apply_cg, projector_range_rows, CgOptions, LinearOperator};
use ddrmpr::selftest::random_dense_operator;
use ddrmpr::Complex64;

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn run_example() -> ddrmpr::Result<()> {
    let opts = CgOptions {
        max_iters: 500,
        tol: 1e-13,
        regularizer: 0.0,
    };
    for (m, n, rank) in [(20, 12, None), (20, 12, Some(5)), (8, 14, None), (8, 14, Some(2))] {
        let op = random_dense_operator(m, n, rank, 17)?;
        let y: Vec<Complex64> = (0..m).map(|i| Complex64::new((i as f64 * 1.3).cos(), 0.0)).collect();
        let dense = op.svd().expect("attached").pinv_apply(&y);
        let cg = pinv_apply_cg(&op, &y, &opts)?;
        let gap: Vec<Complex64> = cg.iter().zip(&dense).map(|(a, b)| a - b).collect();

        // A†A is idempotent
        let p1 = projector_range_rows(&op, &cg, &opts)?;
        let p2 = projector_range_rows(&op, &p1, &opts)?;
        let idem: Vec<Complex64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        println!(
            "{m}x{n} rank {:>2}: CG vs SVD {:.1e}, projector idempotence {:.1e}",
            op.svd().map_or(0, |s| s.rank),
            norm(&gap) / norm(&dense),
            norm(&idem)
        );
    }

    // with a Tikhonov weight the SVD shortcut is bypassed
    let op = random_dense_operator(20, 12, Some(5), 3)?;
    let y = vec![Complex64::new(1.0, 0.0); 20];
    let ridge = pinv_apply(
        &op,
        &y,
        &CgOptions {
            regularizer: 1e-2,
            ..opts
        },
    )?;
    println!(
        "ridge solution norm {:.4} vs minimum-norm {:.4}",
        norm(&ridge),
        norm(&pinv_apply(&op, &y, &opts)?)
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
