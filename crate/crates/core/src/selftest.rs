//! Internal consistency properties, run by `ddrmpr --task selftest`.
//!
//! Each check returns a [`Check`] rather than panicking so the driver can
//! report every property before deciding the exit status.

use nalgebra::DMatrix;
use rand::Rng;

use crate::classic_pr::{fourier_grid_operator, hio_run, ConstraintSet, HioParams};
use crate::ddrm_core::{
    epsilon_estimate, run_sampler_traced, schedule_linear_vp, spectral_step, BranchMixing, DdrmState, NoiseCoupling,
    SamplerConfig, SamplerMode,
};
use crate::denoise::{DenoiseRequest, Denoiser, Geometry};
use crate::eval::{psnr, ssim};
use crate::field_ops::{pad_to_oversampled, RealImage, ValueRange};
use crate::forward_model::MeasurementSet;
use crate::linops::{DenseOperator, LinearOperator};
use crate::rng::{normal_vec, stream, StreamTag};
use crate::{Complex64, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn failed(name: &'static str, err: crate::Error) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Returns a fixed clean image (symmetric range) regardless of its input.
struct KnownSignal(RealImage);

impl Denoiser for KnownSignal {
    fn id(&self) -> String {
        "known-signal".into()
    }

    fn denoise(&self, _req: &DenoiseRequest) -> Result<RealImage> {
        Ok(self.0.clone())
    }
}

/// Dense real operator with entries in `[-1, 1)` and an SVD attached. A
/// `rank` below `min(m, n)` is enforced through a low-rank product.
pub fn random_dense_operator(m: usize, n: usize, rank: Option<usize>, seed: u64) -> Result<DenseOperator> {
    let mut rng = stream(seed, StreamTag::Operator, 0);
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let a = match rank {
        Some(k) => draw(m, k) * draw(k, n),
        None => draw(m, n),
    };
    DenseOperator::from_real(format!("random:m={m}:n={n}:seed={seed}"), &a).with_svd()
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Largest per-step relative gap between the spectral sampler and the
/// simplified sampler on one noiseless problem. Both share noise draws and
/// branch mixing.
pub fn equivalence_gap(op: &DenseOperator, eta: f64, eta_b: f64, steps: usize, seed: u64) -> Result<f64> {
    let n = op.in_dim();
    let sched = schedule_linear_vp(1000, 100.0)?;
    let mut rng = stream(seed, StreamTag::Fixture, 1);
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
    let y = op.apply(&to_complex(&x0));
    let cfg = SamplerConfig {
        eta,
        eta_b,
        steps,
        t_init: 400,
        seed,
        mixing: Some(BranchMixing::Exact),
        coupling: NoiseCoupling::Shared,
        ..Default::default()
    };
    let den = crate::denoise::DenoiserHandle::gaussian(2.0);
    let shape = Geometry {
        height: 1,
        width: n,
        channels: 1,
    };
    let a = run_sampler_traced(
        &y,
        op,
        &sched,
        &cfg,
        &den,
        SamplerMode::Spectral { sigma_y: 0.0 },
        shape,
        0,
    )?;
    let b = run_sampler_traced(&y, op, &sched, &cfg, &den, SamplerMode::Simplified, shape, 0)?;
    Ok(a.iterates
        .iter()
        .zip(&b.iterates)
        .map(|(p, q)| {
            let diff = p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            diff / norm.max(1e-300)
        })
        .fold(0.0, f64::max))
}

/// Random operators with `m, n ≤ 16`, 20 steps each.
pub fn check_equivalence(operators: usize, seed: u64) -> Check {
    const NAME: &str = "spectral/simplified equivalence";
    let mut worst: f64 = 0.0;
    let mut rng = stream(seed, StreamTag::Fixture, 2);
    for k in 0..operators {
        let m = rng.random_range(2..=16);
        let n = rng.random_range(2..=16);
        let rank = (k % 3 == 2).then(|| rng.random_range(1..=m.min(n)));
        let eta = rng.random_range(0.05..=1.0);
        let eta_b = rng.random_range(0.0..=1.0);
        let gap = random_dense_operator(m, n, rank, seed.wrapping_add(k as u64))
            .and_then(|op| equivalence_gap(&op, eta, eta_b, 20, seed.wrapping_add(k as u64)));
        match gap {
            Ok(g) => worst = worst.max(g),
            Err(e) => return Check::failed(NAME, e),
        }
    }
    Check::new(
        NAME,
        worst <= 1e-6,
        format!("{operators} operators, max relative error {worst:.2e} (limit 1e-6)"),
    )
}

/// Timestep, then per-coordinate means and variances.
pub type MarginalStats = (usize, Vec<f64>, Vec<f64>);

/// Per-coordinate mean and variance of `(x_t − √α_t x₀)/√(1 − α_t)` at every
/// visited `t > 0`. The first iterate is drawn from the forward marginal
/// `q(x_t | x₀)`; later ones come from spectral steps with a perfect
/// denoiser, which must preserve that marginal. (The sampler's own
/// initialization is centred at zero on the null space, so it is not a
/// marginal draw.)
pub fn noise_marginal_stats(draws: usize, seed: u64) -> Result<Vec<MarginalStats>> {
    let op = random_dense_operator(3, 6, None, seed)?;
    let sched = schedule_linear_vp(1000, 100.0)?;
    let mut rng = stream(seed, StreamTag::Fixture, 3);
    let x0: Vec<f64> = (0..6).map(|_| rng.random_range(-0.9..0.9)).collect();
    let y = op.apply(&to_complex(&x0));
    let truth = RealImage::from_vec(1, 6, 1, x0.clone(), ValueRange::Symmetric)?;
    let den = KnownSignal(truth);
    let cfg = SamplerConfig {
        eta: 0.6,
        eta_b: 1.0,
        steps: 3,
        t_init: 600,
        seed,
        ..Default::default()
    };
    let ts = crate::ddrm_core::timesteps(cfg.t_init, cfg.steps);
    let shape = Geometry {
        height: 1,
        width: 6,
        channels: 1,
    };
    let visited: Vec<usize> = ts.iter().copied().filter(|&t| t > 0).collect();
    let mut sum = vec![vec![0.0; 6]; visited.len()];
    let mut sq = vec![vec![0.0; 6]; visited.len()];
    for k in 0..draws {
        let mut rng = stream(seed, StreamTag::Trajectory, k as u64);
        let (a0, b0) = (sched.alpha(cfg.t_init).sqrt(), (1.0 - sched.alpha(cfg.t_init)).sqrt());
        let eps = normal_vec(&mut rng, 6);
        let mut state = DdrmState {
            x: x0.iter().zip(&eps).map(|(v, e)| a0 * v + b0 * e).collect(),
            t: cfg.t_init,
            rng,
            last_eps: eps,
            last_x_theta: None,
        };
        for (j, &t) in visited.iter().enumerate() {
            if j > 0 {
                state = spectral_step(state, &y, &op, &sched, &cfg, &den, shape, 0.0, t)?;
            }
            let (a, b) = (sched.alpha(t).sqrt(), (1.0 - sched.alpha(t)).sqrt());
            for i in 0..6 {
                let r = (state.x[i] - a * x0[i]) / b;
                sum[j][i] += r;
                sq[j][i] += r * r;
            }
        }
    }
    let n = draws as f64;
    Ok(visited
        .into_iter()
        .enumerate()
        .map(|(j, t)| {
            let mean: Vec<f64> = sum[j].iter().map(|s| s / n).collect();
            let var = sq[j].iter().zip(&mean).map(|(q, m)| q / n - m * m).collect();
            (t, mean, var)
        })
        .collect())
}

pub fn check_noise_marginals(draws: usize, seed: u64) -> Check {
    const NAME: &str = "noise marginal statistics";
    let stats = match noise_marginal_stats(draws, seed) {
        Ok(s) => s,
        Err(e) => return Check::failed(NAME, e),
    };
    let worst_mean = stats
        .iter()
        .flat_map(|s| s.1.iter())
        .fold(0.0f64, |a, m| a.max(m.abs()));
    let worst_var = stats
        .iter()
        .flat_map(|s| s.2.iter())
        .fold(0.0f64, |a, v| a.max((v - 1.0).abs()));
    Check::new(
        NAME,
        worst_mean < 0.02 && worst_var < 0.05,
        format!("{draws} draws, max |mean| {worst_mean:.4} (limit 0.02), max |var - 1| {worst_var:.4} (limit 0.05)"),
    )
}

/// Injects noise into a known signal and recovers it from the clean estimate.
pub fn check_epsilon_recovery(seed: u64) -> Check {
    const NAME: &str = "epsilon recovery";
    let mut rng = stream(seed, StreamTag::Fixture, 4);
    let mut worst: f64 = 0.0;
    for alpha in [0.999f64, 0.7, 0.2, 1e-3] {
        let x0: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = normal_vec(&mut rng, 64);
        let x: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(v, e)| alpha.sqrt() * v + (1.0 - alpha).sqrt() * e)
            .collect();
        match epsilon_estimate(&x, &x0, alpha) {
            Ok(got) => worst = got.iter().zip(&eps).fold(worst, |w, (g, e)| w.max((g - e).abs())),
            Err(e) => return Check::failed(NAME, e),
        }
    }
    Check::new(NAME, worst <= 1e-12, format!("max error {worst:.2e} (limit 1e-12)"))
}

/// HIO started at a feasible, consistent image must not move.
pub fn check_hio_fixed_point(seed: u64) -> Check {
    const NAME: &str = "HIO fixed point";
    let run = || -> Result<(f64, f64)> {
        let mut rng = stream(seed, StreamTag::Fixture, 5);
        let x = RealImage::gray(12, 12, (0..144).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let op = fourier_grid_operator(12, 2)?;
        let padded = pad_to_oversampled(&x, 2)?;
        let y = MeasurementSet::exact(
            &padded.data,
            &op,
            crate::forward_model::Geometry::Fourier { n_side: 12, factor: 2 },
        )?;
        let cons = ConstraintSet::fourier(12, 2)?;
        let (out, trace) = hio_run(&y.y, &op, &padded, &HioParams { beta: 0.9, iters: 50 }, &cons)?;
        let moved = out
            .data
            .iter()
            .zip(&padded.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok((moved, trace.last().copied().unwrap_or(0.0) / y.norm()))
    };
    match run() {
        Ok((moved, res)) => Check::new(
            NAME,
            moved <= 1e-10 && res <= 1e-10,
            format!("max drift {moved:.2e}, relative residual {res:.2e} (limits 1e-10)"),
        ),
        Err(e) => Check::failed(NAME, e),
    }
}

pub fn check_metric_fixtures() -> Check {
    const NAME: &str = "metric fixtures";
    let run = || -> Result<(f64, f64)> {
        let a = RealImage::gray(16, 16, vec![0.3; 256])?;
        let b = a.map(|v| v + 0.1);
        let ramp = RealImage::gray(16, 16, (0..256).map(|i| i as f64 / 255.0).collect())?;
        Ok((psnr(&a, &b, 1.0)?, ssim(&ramp, &ramp)?))
    };
    match run() {
        Ok((p, s)) => Check::new(
            NAME,
            (p - 20.0).abs() <= 1e-6 && s == 1.0,
            format!("PSNR {p:.9} dB (want 20 ± 1e-6), SSIM(identical) {s}"),
        ),
        Err(e) => Check::failed(NAME, e),
    }
}

/// The full suite. `draws` sets the sample count of the statistics check.
pub fn run_all(seed: u64, draws: usize) -> Vec<Check> {
    vec![
        check_equivalence(10, seed),
        check_noise_marginals(draws, seed),
        check_epsilon_recovery(seed),
        check_hio_fixed_point(seed),
        check_metric_fixtures(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_all(7, 20_000);
        for c in &a {
            assert!(c.passed, "{c}");
        }
        assert_eq!(a, run_all(7, 20_000));
    }

    #[test]
    fn report_lines() {
        let c = Check::new("x", false, "why".into());
        assert_eq!(c.to_string(), "FAIL x: why");
    }
}
