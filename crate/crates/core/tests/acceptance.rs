//! Release criteria. Each test prints one `PASS`/`FAIL` line (straight to
//! stdout, so it survives output capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ddrmpr::classic_pr::{fourier_grid_operator, random_init, ConstraintSet, RandomInitParams};
use ddrmpr::cli::{self, io::Manifest};
use ddrmpr::ddrm_core::SamplerConfig;
use ddrmpr::ddrm_pr::{ddrm_pr_reconstruct, reconstruct_problem, PrPipelineConfig, PrProblem};
use ddrmpr::denoise::DenoiserHandle;
use ddrmpr::eval::{align_ambiguities, align_ambiguities_with, aligned_scores, mse, psnr, AlignOptions, Alignment};
use ddrmpr::field_ops::{crop_top_left, RealImage};
use ddrmpr::fixtures::{piecewise_constant, uniform_noise};
use ddrmpr::forward_model::{noisy_intensities, simulate, Geometry, MeasurementSet};
use ddrmpr::linops::{make_fourier_operator, pinv_apply_cg, CgOptions, DenseOperator, LinearOperator};
use ddrmpr::rng::{stream, StreamTag};
use ddrmpr::selftest;
use ddrmpr::Complex64;
use nalgebra::DMatrix;
use rand::Rng;

fn report(name: &str, passed: bool, detail: &str) -> bool {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} {name}: {detail}");
    let _ = out.flush();
    passed
}

fn fourier_measure(x: &RealImage, alpha: f64, seed: u64) -> MeasurementSet {
    let op = make_fourier_operator(x.height, 2).unwrap();
    simulate(
        x,
        &op,
        Geometry::Fourier {
            n_side: x.height,
            factor: 2,
        },
        alpha,
        seed,
    )
    .unwrap()
}

#[test]
fn sampler_equivalence_on_random_operators() {
    let start = Instant::now();
    let check = selftest::check_equivalence(10, 2024);
    let secs = start.elapsed().as_secs_f64();
    let ok = check.passed && secs < 10.0;
    assert!(report(
        "sampler equivalence",
        ok,
        &format!("{} in {secs:.2} s (limit 10 s)", check.detail)
    ));
}

#[test]
fn residual_statistics_and_epsilon_recovery() {
    let marg = selftest::check_noise_marginals(100_000, 2024);
    let eps = selftest::check_epsilon_recovery(2024);
    let ok = marg.passed && eps.passed;
    assert!(report(
        "residual statistics",
        ok,
        &format!("{}; {}", marg.detail, eps.detail)
    ));
}

#[test]
fn hio_noiseless_recovery() {
    const SEEDS: u64 = 10;
    let start = Instant::now();
    let op = fourier_grid_operator(32, 2).unwrap();
    let cons = ConstraintSet::fourier(32, 2).unwrap();
    let mut hits = 0;
    let mut details = Vec::new();
    for seed in 0..SEEDS {
        let x0 = piecewise_constant(32, 100 + seed);
        let y = fourier_measure(&x0, 0.0, seed);
        let params = RandomInitParams {
            seed,
            ..Default::default()
        };
        let out = random_init(&y.y, &op, &params, &cons).unwrap();
        let img = crop_top_left(&out.image(64, 64), 32, 32).unwrap();
        let rel = out.residual / y.norm();
        let (aligned, _) = align_ambiguities(&img.clamp_to_range(), &x0).unwrap();
        let p = psnr(&aligned, &x0, 1.0).unwrap();
        if rel <= 1e-3 && p >= 35.0 {
            hits += 1;
        }
        details.push(format!("{rel:.1e}/{p:.1}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = hits * 10 >= 7 * SEEDS && secs < 120.0;
    let detail = format!(
        "{hits}/{SEEDS} seeds with residual <= 1e-3 |y| and PSNR >= 35 dB (need 70%) in {secs:.1} s [{}]",
        details.join(" ")
    );
    assert!(report("HIO noiseless recovery", ok, &detail));
}

#[test]
fn forward_model_variance() {
    const DRAWS: usize = 100_000;
    let x = uniform_noise(8, 8, 5);
    let op = make_fourier_operator(8, 2).unwrap();
    let xc: Vec<Complex64> = x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let clean: Vec<f64> = op.apply(&xc).iter().map(|z| z.norm()).collect();
    let mut worst: f64 = 0.0;
    for (k, &alpha) in [0.5, 1.0, 2.0, 3.0].iter().enumerate() {
        let mut rng = stream(11, StreamTag::Measurement, k as u64);
        let mut sum = vec![0.0; clean.len()];
        let mut sq = vec![0.0; clean.len()];
        for _ in 0..DRAWS {
            for (i, v) in noisy_intensities(&clean, alpha, &mut rng).into_iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..clean.len() {
            let mean = sum[i] / DRAWS as f64;
            let var = (sq[i] - DRAWS as f64 * mean * mean) / (DRAWS - 1) as f64;
            let want = alpha * alpha * clean[i] * clean[i];
            let rel = if want > 0.0 { (var / want - 1.0).abs() } else { var };
            worst = worst.max(rel);
        }
    }
    let detail = format!(
        "worst relative variance error {worst:.4} over {} coordinates x 4 noise levels (limit 0.05)",
        clean.len()
    );
    assert!(report("forward-model variance", worst < 0.05, &detail));
}

/// `A = B C` with `B` of full column rank and `C` of full row rank, so
/// `A† = Cᵀ (C Cᵀ)⁻¹ (BᵀB)⁻¹ Bᵀ` needs only two small positive-definite solves.
fn factored_pinv(b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let bt_b = (b.transpose() * b).cholesky().expect("B has full column rank");
    let c_ct = (c * c.transpose()).cholesky().expect("C has full row rank");
    c.transpose() * c_ct.solve(&bt_b.solve(&b.transpose()))
}

#[test]
fn cg_pseudoinverse_matches_svd() {
    let opts = CgOptions {
        max_iters: 2000,
        tol: 1e-14,
        regularizer: 0.0,
    };
    let (mut worst_cg, mut worst_oracle): (f64, f64) = (0.0, 0.0);
    let mut deficient = 0;
    for seed in 0..20u64 {
        let rank = [6, 11, 1, 12][seed as usize % 4];
        deficient += (rank < 12) as usize;
        let mut rng = stream(seed, StreamTag::Fixture, 9);
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (b, c) = if rank == 12 {
            (draw(20, 12), DMatrix::identity(12, 12))
        } else {
            (draw(20, rank), draw(rank, 12))
        };
        let a = &b * &c;
        let op = DenseOperator::from_real("pinv-fixture", &a).with_svd().unwrap();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yc: Vec<Complex64> = y.iter().map(|&v| Complex64::new(v, 0.0)).collect();

        let dense = op.svd().unwrap().pinv_apply(&yc);
        let cg = pinv_apply_cg(&op, &yc, &opts).unwrap();
        let oracle = factored_pinv(&b, &c) * nalgebra::DVector::from_vec(y);
        let rel = |u: &[Complex64], v: &[Complex64]| {
            let d: f64 = u.iter().zip(v).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
            d / v.iter().map(|q| q.norm_sqr()).sum::<f64>().sqrt()
        };
        let oracle_c: Vec<Complex64> = oracle.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        worst_cg = worst_cg.max(rel(&cg, &dense));
        worst_oracle = worst_oracle.max(rel(&dense, &oracle_c));
    }
    let ok = worst_cg <= 1e-8 && worst_oracle <= 1e-8;
    let detail = format!(
        "CG vs dense SVD {worst_cg:.2e}, dense SVD vs factored closed form {worst_oracle:.2e} on 20 matrices 20x12, {deficient} rank-deficient (limit 1e-8)"
    );
    assert!(report("CG pseudoinverse", ok, &detail));
}

#[test]
fn oracle_denoiser_fixed_point() {
    let cfg = PrPipelineConfig {
        sampler: SamplerConfig {
            eta: 1.0,
            eta_b: 1.0,
            steps: 5,
            t_init: 300,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut worst = f64::INFINITY;
    for seed in 0..5u64 {
        let x0 = piecewise_constant(16, 40 + seed);
        let den = DenoiserHandle::oracle(&x0).unwrap();
        let out = ddrm_pr_reconstruct(&fourier_measure(&x0, 0.0, seed), &cfg, &den).unwrap();
        let (aligned, _) = align_ambiguities(&out, &x0).unwrap();
        worst = worst.min(psnr(&aligned, &x0, 1.0).unwrap());
    }
    let detail = format!("lowest PSNR {worst:.1} dB over 5 noiseless 16x16 instances (need >= 50)");
    assert!(report("oracle fixed point", worst >= 50.0, &detail));
}

#[test]
fn shrinkage_improves_on_its_initialization() {
    const TRIALS: u64 = 20;
    let mut cfg = PrPipelineConfig::fourier_reference();
    let den = DenoiserHandle::shrinkage(1.0);
    let (mut init_sum, mut pr_sum, mut wins) = (0.0, 0.0, 0);
    for trial in 0..TRIALS {
        let x0 = piecewise_constant(32, 500 + trial);
        cfg.random_init.seed = trial;
        cfg.sampler.seed = trial;
        let problem = PrProblem::fourier(&[fourier_measure(&x0, 2.0, trial)], &cfg).unwrap();
        let opts = problem.align_options();
        let init = problem.init().clone().clamp_to_range();
        let (p_init, _, _) = aligned_scores(&init, &x0, opts).unwrap();
        let out = reconstruct_problem(&problem, &cfg, &den).unwrap();
        let (p_pr, _, _) = aligned_scores(&out.image, &x0, opts).unwrap();
        init_sum += p_init;
        pr_sum += p_pr;
        wins += (p_pr >= p_init) as usize;
    }
    let (init_mean, pr_mean) = (init_sum / TRIALS as f64, pr_sum / TRIALS as f64);
    let detail = format!(
        "mean PSNR {pr_mean:.2} dB after sampling vs {init_mean:.2} dB at initialization, {wins}/{TRIALS} paired wins (alpha 2, 32x32)"
    );
    assert!(report("shrinkage beats initialization", pr_mean >= init_mean, &detail));
}

#[test]
fn metric_fixtures_and_alignment() {
    let base = selftest::check_metric_fixtures();
    let gt = uniform_noise(8, 8, 21);
    let opts = AlignOptions {
        translations: true,
        sign_search: true,
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for flipped in [false, true] {
        for sign in [1i8, -1] {
            for dy in 0..8 {
                for dx in 0..8 {
                    let al = Alignment {
                        flipped,
                        shift: (dy, dx),
                        sign,
                    };
                    let (back, _) = align_ambiguities_with(&al.apply(&gt), &gt, opts).unwrap();
                    worst = worst.max(mse(&back, &gt).unwrap());
                    count += 1;
                }
            }
        }
    }
    let ok = base.passed && worst < 1e-20;
    let detail = format!(
        "{}; worst aligned MSE {worst:.1e} over {count} transforms (limit 1e-20)",
        base.detail
    );
    assert!(report("metric fixtures", ok, &detail));
}

fn hashed_outputs_identical(a: &Path, b: &Path) -> Result<usize, String> {
    let first = Manifest::load(&a.join("manifest.json")).map_err(|e| e.to_string())?;
    let mut n = 0;
    for rec in first.outputs.iter().filter(|r| r.sha256.is_some()) {
        let x = std::fs::read(a.join(&rec.path)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(&rec.path)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} differs", rec.path));
        }
        n += 1;
    }
    Ok(n)
}

#[test]
fn cli_runs_reproduce_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let img = piecewise_constant(16, 8);
    std::fs::write(root.join("gt.png"), cli::io::png_bytes(&img).unwrap()).unwrap();

    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "simulate",
            vec![
                "--task",
                "simulate",
                "--input",
                &p("gt.png"),
                "--alpha",
                "1",
                "--seed",
                "3",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "hio",
            vec![
                "--task",
                "hio",
                "--input",
                &p("simulate"),
                "--num-inits",
                "6",
                "--final-iters",
                "200",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "ddrm-pr",
            vec![
                "--task",
                "ddrm-pr",
                "--input",
                &p("simulate"),
                "--num-inits",
                "6",
                "--final-iters",
                "200",
                "--steps",
                "4",
                "--inner-iters",
                "20",
                "--n-avg",
                "2",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "evaluate",
            vec![
                "--task",
                "evaluate",
                "--input",
                &p("ddrm-pr/gt.png"),
                "--gt",
                &p("gt.png"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let mut failures = Vec::new();
    let mut total = 0;
    for (name, args) in &runs {
        let mut first: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = p(name);
        first.extend(["--out", &out]);
        if cli::run_args(&first) != 0 {
            failures.push(format!("{name}: run failed"));
            continue;
        }
        let manifest = root.join(name).join("manifest.json");
        let again = p(&format!("{name}-again"));
        let code = cli::run_args(&["--from-manifest", &manifest.to_string_lossy(), "--out", &again]);
        if code != 0 {
            failures.push(format!("{name}: rerun exited {code}"));
            continue;
        }
        match hashed_outputs_identical(&root.join(name), Path::new(&again)) {
            Ok(n) => total += n,
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let ok = failures.is_empty() && total > 0;
    let detail = if ok {
        format!(
            "{total} hashed outputs over {} tasks reproduced byte for byte",
            runs.len()
        )
    } else {
        failures.join("; ")
    };
    assert!(report("manifest determinism", ok, &detail));
}
