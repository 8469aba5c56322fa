//! Diffusion restoration for linear problems.
//!
//! Two samplers share one state type:
//!
//! - the *spectral* sampler works per singular direction of `H`, choosing a
//!   mean and variance per index from the singular value and the noise
//!   levels. It needs a materialized real SVD.
//! - the *simplified* sampler is its noiseless closed form,
//!   `x' = x_θ − H†H x_θ + H†y` followed by a blend with the denoised
//!   estimate and fresh noise. It only needs `pinv_apply`.
//!
//! With `σ_y = 0`, equal branch mixing and [`NoiseCoupling::Shared`], the two
//! produce identical trajectories; [`run_sampler_traced`] exposes every
//! iterate so this can be checked.
//!
//! The state lives in variance-preserving (VP) coordinates
//! `x̃_t = √α_t (x0 + σ_t ε)`, with `α_t = 1 / (1 + σ_t²)`. Images enter
//! and leave in the symmetric range `[-1, 1]`; measurements must be taken of
//! the symmetric-range signal (see [`to_vp_measurement`]).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoise::{denoise_adapted, DenoiseRequest, Denoiser, Geometry};
use crate::dprt::Tensor;
use crate::field_ops::{RealImage, ValueRange};
use crate::linops::{pinv_apply, projector_range_rows, CgOptions, LinearOperator, Svd};
use crate::rng::{normal_vec, stream, StreamRng, StreamTag};
use crate::{Complex64, Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_SIGMA_MAX: f64 = 100.0;
/// First-to-last β ratio of the classic DDPM ladder (1e-4 to 0.02).
const LINEAR_BETA_RATIO: f64 = 0.005;

pub fn alpha_from_sigma(sigma: f64) -> f64 {
    1.0 / (1.0 + sigma * sigma)
}

pub fn sigma_from_alpha(alpha: f64) -> f64 {
    ((1.0 - alpha) / alpha).sqrt()
}

/// Ascending noise ladder `0 = σ_0 < σ_1 < ... < σ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    alphas: Vec<f64>,
    pub spacing: String,
}

impl NoiseSchedule {
    pub fn from_sigmas(sigmas: Vec<f64>, spacing: impl Into<String>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::Schedule("need at least σ_0 and σ_1".into()));
        }
        if sigmas[0] != 0.0 {
            return Err(Error::Schedule(format!("σ_0 = {}, expected 0", sigmas[0])));
        }
        if let Some(i) = (1..sigmas.len()).find(|&i| !(sigmas[i] > sigmas[i - 1]) || !sigmas[i].is_finite()) {
            return Err(Error::Schedule(format!(
                "σ not strictly increasing and finite at t = {i}"
            )));
        }
        let alphas = sigmas.iter().map(|&s| alpha_from_sigma(s)).collect();
        Ok(Self {
            sigmas,
            alphas,
            spacing: spacing.into(),
        })
    }

    /// Ladder from DDPM betas: `α_t = Π_{s≤t} (1 − β_s)`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Schedule("betas must lie in (0, 1)".into()));
        }
        let mut log_alpha = 0.0;
        let mut sigmas = vec![0.0];
        for b in betas {
            log_alpha += (-b).ln_1p();
            sigmas.push((-log_alpha).exp_m1().sqrt());
        }
        Self::from_sigmas(sigmas, "betas")
    }

    /// `σ_t = σ_min (σ_max/σ_min)^((t−1)/(T−1))` for `t ≥ 1`.
    pub fn geometric(t_max: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if t_max == 0 || !(sigma_min > 0.0) || !(sigma_max >= sigma_min) {
            return Err(Error::Schedule(
                "geometric ladder needs T ≥ 1 and 0 < σ_min ≤ σ_max".into(),
            ));
        }
        let mut sigmas = vec![0.0];
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                1.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            sigmas.push(sigma_min * (sigma_max / sigma_min).powf(frac));
        }
        Self::from_sigmas(sigmas, format!("geometric:{sigma_min}"))
    }

    /// `T` transitions.
    pub fn t_max(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// SHA-256 over `T` and the bit patterns of every σ.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.t_max() as u64).to_le_bytes());
        for s in &self.sigmas {
            h.update(s.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear-β ladder (β ramps from `0.005 β_end` to `β_end`) with `β_end`
/// solved so that `σ_T = sigma_max`.
pub fn schedule_linear_vp(t_max: usize, sigma_max: f64) -> Result<NoiseSchedule> {
    if t_max == 0 || !(sigma_max > 0.0) || !sigma_max.is_finite() {
        return Err(Error::Schedule(format!(
            "need T ≥ 1 and σ_max > 0, got T = {t_max}, σ_max = {sigma_max}"
        )));
    }
    let betas = |end: f64| -> Vec<f64> {
        (1..=t_max)
            .map(|s| {
                let frac = if t_max == 1 {
                    1.0
                } else {
                    (s - 1) as f64 / (t_max - 1) as f64
                };
                end * (LINEAR_BETA_RATIO + (1.0 - LINEAR_BETA_RATIO) * frac)
            })
            .collect()
    };
    let log_alpha_t = |end: f64| betas(end).iter().map(|b| (-b).ln_1p()).sum::<f64>();
    // α_T = 1/(1+σ_max²) is monotone decreasing in β_end.
    let target = -(sigma_max * sigma_max).ln_1p();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_alpha_t(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let mut sched = NoiseSchedule::from_betas(&betas(0.5 * (lo + hi)))?;
    sched.spacing = format!("linear-beta:sigma_max={sigma_max}");
    Ok(sched)
}

/// Coefficient on the denoiser-implied noise when forming the next iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMixing {
    /// `1 − η`, the closed form's linearization.
    Linear,
    /// `√(1 − η²)`, which keeps the total noise variance at one.
    Exact,
}

impl BranchMixing {
    pub fn coefficient(self, eta: f64) -> f64 {
        match self {
            BranchMixing::Linear => 1.0 - eta,
            BranchMixing::Exact => (1.0 - eta * eta).max(0.0).sqrt(),
        }
    }
}

/// How the spectral sampler draws the fresh noise on range indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCoupling {
    /// A fresh standard normal per range index.
    #[default]
    Independent,
    /// `η ε̄ + c ε̄_θ`, i.e. the denoiser-implied noise stands in for part of
    /// the fresh draw exactly as in the simplified sampler.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub eta: f64,
    pub eta_b: f64,
    /// Number of transitions from `t_init` down to 0.
    pub steps: usize,
    pub t_init: usize,
    pub n_avg: usize,
    pub seed: u64,
    /// Overrides the sampler's default branch mixing.
    #[serde(default)]
    pub mixing: Option<BranchMixing>,
    #[serde(default)]
    pub coupling: NoiseCoupling,
    /// Dump every iterate as DPRT into this directory.
    #[serde(skip)]
    pub dump_dir: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 0.15,
            eta_b: 0.2,
            steps: 15,
            t_init: 350,
            n_avg: 1,
            seed: 0,
            mixing: None,
            coupling: NoiseCoupling::Independent,
            dump_dir: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta = {} outside (0, 1]", self.eta));
        }
        if !(0.0..=1.0).contains(&self.eta_b) {
            return bad(format!("eta_b = {} outside [0, 1]", self.eta_b));
        }
        if self.steps == 0 || self.steps > self.t_init || self.t_init > schedule.t_max() {
            return bad(format!(
                "need 1 ≤ steps ≤ t_init ≤ T, got steps = {}, t_init = {}, T = {}",
                self.steps,
                self.t_init,
                schedule.t_max()
            ));
        }
        if self.n_avg == 0 {
            return bad("n_avg must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn mixing_coefficient(&self, default: BranchMixing) -> f64 {
        self.mixing.unwrap_or(default).coefficient(self.eta)
    }
}

/// `steps + 1` distinct timesteps from `t_init` down to 0, uniformly spaced
/// with both endpoints included.
pub fn timesteps(t_init: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|j| (t_init * (steps - j) + steps / 2) / steps)
        .collect()
}

#[derive(Debug, Clone)]
pub struct DdrmState {
    /// Iterate in VP coordinates.
    pub x: Vec<f64>,
    pub t: usize,
    pub rng: StreamRng,
    /// The fresh noise drawn by the last transition, in the pixel basis.
    pub last_eps: Vec<f64>,
    /// The denoised estimate used by the last transition.
    pub last_x_theta: Option<Vec<f64>>,
}

impl DdrmState {
    fn check(&self) -> Result<()> {
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iter: self.t,
                what: "non-finite diffusion iterate".into(),
            });
        }
        Ok(())
    }
}

/// `(x_next − √α x_θ) / √(1 − α)`: the noise implied by a clean estimate.
pub fn epsilon_estimate(x_next: &[f64], x_theta: &[f64], alpha_next: f64) -> Result<Vec<f64>> {
    if !(alpha_next > 0.0 && alpha_next < 1.0) {
        return Err(Error::Domain(format!("alpha = {alpha_next} must lie in (0, 1)")));
    }
    if x_next.len() != x_theta.len() {
        return Err(Error::Shape(format!("{} vs {}", x_next.len(), x_theta.len())));
    }
    let (a, b) = (alpha_next.sqrt(), (1.0 - alpha_next).sqrt());
    Ok(x_next.iter().zip(x_theta).map(|(x, t)| (x - a * t) / b).collect())
}

/// `√α_t (η_b x' + (1 − η_b) x_θ) + √(1 − α_t) (η ε + c ε_θ)`.
///
/// `x_prime = None` means `η_b = 0` and the consistency term is skipped.
#[allow(clippy::too_many_arguments)]
pub fn blend(
    x_theta: &[f64],
    x_prime: Option<&[f64]>,
    eps_theta: &[f64],
    eps: &[f64],
    alpha_t: f64,
    eta: f64,
    eta_b: f64,
    mixing: f64,
) -> Vec<f64> {
    let (a, b) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    (0..x_theta.len())
        .map(|i| {
            let mean = match x_prime {
                Some(xp) => eta_b * xp[i] + (1.0 - eta_b) * x_theta[i],
                None => x_theta[i],
            };
            a * mean + b * (eta * eps[i] + mixing * eps_theta[i])
        })
        .collect()
}

/// Runs the denoiser on a flat VP vector at timestep `t`.
pub fn denoise_vec(
    den: &dyn Denoiser,
    x: &[f64],
    shape: Geometry,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let img = RealImage::from_vec(
        shape.height,
        shape.width,
        shape.channels,
        x.to_vec(),
        ValueRange::Symmetric,
    )
    .map_err(|_| Error::Divergence {
        iter: t,
        what: "non-finite denoiser input".into(),
    })?;
    let req = DenoiseRequest {
        x_t: img,
        t_index: t,
        sigma_t: schedule.sigma(t),
        alpha_t: schedule.alpha(t),
    };
    Ok(denoise_adapted(den, &req)?.data)
}

/// `2 y − H 1`: the measurement of `2x − 1` given the measurement of `x`.
pub fn to_vp_measurement(y: &[Complex64], op: &dyn LinearOperator) -> Vec<Complex64> {
    let ones = op.apply(&vec![Complex64::new(1.0, 0.0); op.in_dim()]);
    y.iter().zip(ones).map(|(v, o)| 2.0 * v - o).collect()
}

fn real_svd(op: &dyn LinearOperator) -> Result<&Svd> {
    match op.svd() {
        Some(s) if op.is_real() => Ok(s),
        Some(_) => Err(Error::Capability(format!("{} is not real-valued", op.id()))),
        None => Err(Error::Capability(format!("{} has no materialized SVD", op.id()))),
    }
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

fn re(x: Vec<Complex64>) -> Vec<f64> {
    x.into_iter().map(|z| z.re).collect()
}

/// Samples `x_T` per singular direction: `N(ȳ_i, σ_T² − σ_y²/s_i²)` on the
/// range, `N(0, σ_T²)` on the null space.
pub fn spectral_init(
    y: &[Complex64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    t_init: usize,
    sigma_y: f64,
    mut rng: StreamRng,
) -> Result<DdrmState> {
    let svd = real_svd(op)?;
    let ybar = re(svd.spectral_measurement(y));
    let sigma = schedule.sigma(t_init);
    let eps = normal_vec(&mut rng, op.in_dim());
    let eps_bar = re(svd.to_spectral(&to_complex(&eps)));
    let mut xbar = vec![0.0; op.in_dim()];
    for i in 0..xbar.len() {
        let s = svd.s[i];
        xbar[i] = if s > 0.0 {
            let var = sigma * sigma - (sigma_y / s).powi(2);
            if var < 0.0 {
                return Err(Error::Schedule(format!(
                    "σ_T = {sigma} below σ_y/s_{i} = {}",
                    sigma_y / s
                )));
            }
            ybar[i] + var.sqrt() * eps_bar[i]
        } else {
            sigma * eps_bar[i]
        };
    }
    let a = schedule.alpha(t_init).sqrt();
    let x = re(svd.from_spectral(&to_complex(&xbar)))
        .into_iter()
        .map(|v| a * v)
        .collect();
    Ok(DdrmState {
        x,
        t: t_init,
        rng,
        last_eps: eps,
        last_x_theta: None,
    })
}

/// One spectral transition from `state.t` down to `t`.
#[allow(clippy::too_many_arguments)]
pub fn spectral_step(
    mut state: DdrmState,
    y: &[Complex64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    den: &dyn Denoiser,
    shape: Geometry,
    sigma_y: f64,
    t: usize,
) -> Result<DdrmState> {
    let svd = real_svd(op)?;
    if !(sigma_y >= 0.0) {
        return Err(Error::Argument(format!("σ_y = {sigma_y}")));
    }
    let t_next = state.t;
    if t >= t_next {
        return Err(Error::Argument(format!("step must descend, {t_next} → {t}")));
    }
    let x_theta = denoise_vec(den, &state.x, shape, t_next, schedule)?;
    let eps_theta = epsilon_estimate(&state.x, &x_theta, schedule.alpha(t_next))?;
    let spec = |v: &[f64]| re(svd.to_spectral(&to_complex(v)));
    let (theta_bar, eps_theta_bar, ybar) = (spec(&x_theta), spec(&eps_theta), re(svd.spectral_measurement(y)));

    let eps = normal_vec(&mut state.rng, op.in_dim());
    let eps_bar = spec(&eps);
    let (eta, eta_b) = (cfg.eta, cfg.eta_b);
    let c = cfg.mixing_coefficient(BranchMixing::Exact);
    let sig_t = schedule.sigma(t);

    let mut xbar = vec![0.0; op.in_dim()];
    for i in 0..xbar.len() {
        let s = svd.s[i];
        // (x̄_{t+1} − x̄_θ)/σ_{t+1} in VE coordinates is exactly ε̄_θ.
        xbar[i] = if s == 0.0 {
            theta_bar[i] + c * sig_t * eps_theta_bar[i] + eta * sig_t * eps_bar[i]
        } else if sig_t < sigma_y / s {
            let ratio = sig_t / (sigma_y / s);
            theta_bar[i] + c * ratio * (ybar[i] - theta_bar[i]) + eta * sig_t * eps_bar[i]
        } else {
            let var = sig_t * sig_t - (sigma_y / s * eta_b).powi(2);
            if var < 0.0 {
                return Err(Error::Schedule(format!("negative variance at index {i}")));
            }
            let z = match cfg.coupling {
                NoiseCoupling::Independent => eps_bar[i],
                NoiseCoupling::Shared => eta * eps_bar[i] + c * eps_theta_bar[i],
            };
            (1.0 - eta_b) * theta_bar[i] + eta_b * ybar[i] + var.sqrt() * z
        };
    }
    let a = schedule.alpha(t).sqrt();
    state.x = re(svd.from_spectral(&to_complex(&xbar)))
        .into_iter()
        .map(|v| a * v)
        .collect();
    state.t = t;
    state.last_eps = eps;
    state.last_x_theta = Some(x_theta);
    state.check()?;
    Ok(state)
}

/// `x_T = √α_T H†y + √(1 − α_T) ε`.
pub fn simplified_init(
    y: &[Complex64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    t_init: usize,
    mut rng: StreamRng,
    cg: &CgOptions,
) -> Result<DdrmState> {
    let pinv = re(pinv_apply(op, y, cg)?);
    let eps = normal_vec(&mut rng, op.in_dim());
    let (a, b) = (schedule.alpha(t_init).sqrt(), (1.0 - schedule.alpha(t_init)).sqrt());
    let x = pinv.iter().zip(&eps).map(|(p, e)| a * p + b * e).collect();
    Ok(DdrmState {
        x,
        t: t_init,
        rng,
        last_eps: eps,
        last_x_theta: None,
    })
}

/// `x_θ − H†H x_θ + H†y`.
pub fn consistency_update(
    x_theta: &[f64],
    y: &[Complex64],
    op: &dyn LinearOperator,
    cg: &CgOptions,
) -> Result<Vec<f64>> {
    let proj = re(projector_range_rows(op, &to_complex(x_theta), cg)?);
    let pinv = re(pinv_apply(op, y, cg)?);
    Ok((0..x_theta.len()).map(|i| x_theta[i] - proj[i] + pinv[i]).collect())
}

/// One closed-form transition from `state.t` down to `t`.
#[allow(clippy::too_many_arguments)]
pub fn simplified_step(
    mut state: DdrmState,
    y: &[Complex64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    den: &dyn Denoiser,
    shape: Geometry,
    t: usize,
    cg: &CgOptions,
) -> Result<DdrmState> {
    let t_next = state.t;
    if t >= t_next {
        return Err(Error::Argument(format!("step must descend, {t_next} → {t}")));
    }
    let x_theta = denoise_vec(den, &state.x, shape, t_next, schedule)?;
    let eps_theta = epsilon_estimate(&state.x, &x_theta, schedule.alpha(t_next))?;
    let x_prime = if cfg.eta_b > 0.0 {
        Some(consistency_update(&x_theta, y, op, cg)?)
    } else {
        None
    };
    let eps = normal_vec(&mut state.rng, op.in_dim());
    state.x = blend(
        &x_theta,
        x_prime.as_deref(),
        &eps_theta,
        &eps,
        schedule.alpha(t),
        cfg.eta,
        cfg.eta_b,
        cfg.mixing_coefficient(BranchMixing::Linear),
    );
    state.t = t;
    state.last_eps = eps;
    state.last_x_theta = Some(x_theta);
    state.check()?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SamplerMode {
    Spectral { sigma_y: f64 },
    Simplified,
}

/// Every iterate of one trajectory, `x_{t_init}` first.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    pub iterates: Vec<Vec<f64>>,
    pub x_thetas: Vec<Vec<f64>>,
}

/// Runs one trajectory with the trajectory stream `index`.
#[allow(clippy::too_many_arguments)]
pub fn run_sampler_traced(
    y: &[Complex64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    den: &dyn Denoiser,
    mode: SamplerMode,
    shape: Geometry,
    index: u64,
) -> Result<Trajectory> {
    cfg.validate(schedule)?;
    if shape.height * shape.width * shape.channels != op.in_dim() {
        return Err(Error::Shape(format!(
            "{shape:?} does not match operator input {}",
            op.in_dim()
        )));
    }
    let cg = CgOptions::default();
    let ts = timesteps(cfg.t_init, cfg.steps);
    let rng = stream(cfg.seed, StreamTag::Trajectory, index);
    let mut state = match mode {
        SamplerMode::Spectral { sigma_y } => spectral_init(y, op, schedule, cfg.t_init, sigma_y, rng)?,
        SamplerMode::Simplified => simplified_init(y, op, schedule, cfg.t_init, rng, &cg)?,
    };
    let mut out = Trajectory {
        timesteps: ts.clone(),
        iterates: vec![state.x.clone()],
        x_thetas: Vec::new(),
    };
    dump(cfg, index, 0, &state, shape)?;
    for (j, &t) in ts.iter().enumerate().skip(1) {
        state = match mode {
            SamplerMode::Spectral { sigma_y } => spectral_step(state, y, op, schedule, cfg, den, shape, sigma_y, t)?,
            SamplerMode::Simplified => simplified_step(state, y, op, schedule, cfg, den, shape, t, &cg)?,
        };
        dump(cfg, index, j, &state, shape)?;
        out.iterates.push(state.x.clone());
        out.x_thetas.push(state.last_x_theta.take().unwrap_or_default());
    }
    Ok(out)
}

fn dump(cfg: &SamplerConfig, traj: u64, step: usize, state: &DdrmState, shape: Geometry) -> Result<()> {
    let Some(dir) = &cfg.dump_dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let img = RealImage::from_vec(
        shape.height,
        shape.width,
        shape.channels,
        state.x.clone(),
        ValueRange::Symmetric,
    )?;
    Tensor::from_image(&img).write_file(&dir.join(format!("traj{traj}_step{step:04}_t{}.dprt", state.t)))
}

/// Averages `n_avg` trajectories and returns `x_0` in unit range.
#[allow(clippy::too_many_arguments)]
pub fn run_sampler(
    y: &[Complex64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    den: &dyn Denoiser,
    mode: SamplerMode,
    shape: Geometry,
) -> Result<RealImage> {
    let mut acc = vec![0.0; op.in_dim()];
    for k in 0..cfg.n_avg {
        let traj = run_sampler_traced(y, op, schedule, cfg, den, mode, shape, k as u64)?;
        let last = traj.iterates.last().expect("at least the initial iterate");
        acc.iter_mut().zip(last).for_each(|(a, v)| *a += v);
    }
    let n = cfg.n_avg as f64;
    let img = RealImage::from_vec(
        shape.height,
        shape.width,
        shape.channels,
        acc.into_iter().map(|v| v / n).collect(),
        ValueRange::Symmetric,
    )?;
    Ok(img.from_vp())
}

/// Record written next to every sampler output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schedule_hash: String,
    pub schedule_spacing: String,
    pub schedule_t: usize,
    pub cfg: SamplerConfig,
    pub seed: u64,
    pub mode: String,
    pub denoiser_id: String,
    pub timesteps: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl RunManifest {
    pub fn new(schedule: &NoiseSchedule, cfg: &SamplerConfig, mode: &str, denoiser_id: &str) -> Self {
        let ts = timesteps(cfg.t_init, cfg.steps);
        Self {
            schedule_hash: schedule.hash(),
            schedule_spacing: schedule.spacing.clone(),
            schedule_t: schedule.t_max(),
            cfg: cfg.clone(),
            seed: cfg.seed,
            mode: mode.to_string(),
            denoiser_id: denoiser_id.to_string(),
            sigmas: ts.iter().map(|&t| schedule.sigma(t)).collect(),
            timesteps: ts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::DenoiserHandle;
    use crate::linops::DenseOperator;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn geom(h: usize, w: usize) -> Geometry {
        Geometry {
            height: h,
            width: w,
            channels: 1,
        }
    }

    fn random_dense(m: usize, n: usize, rank: Option<usize>, seed: u64) -> DenseOperator {
        let mut rng = stream(seed, StreamTag::Fixture, 0);
        let mut a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        if let Some(r) = rank {
            let b = DMatrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
            a = b * c;
        }
        DenseOperator::from_real(format!("test:{seed}"), &a).with_svd().unwrap()
    }

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, StreamTag::Fixture, 1);
        (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()
    }

    fn measure(op: &dyn LinearOperator, x: &[f64]) -> Vec<Complex64> {
        op.apply(&to_complex(x))
    }

    #[test]
    fn alpha_sigma_duality() {
        assert_eq!(alpha_from_sigma(0.0), 1.0);
        assert_eq!(alpha_from_sigma(1.0), 0.5);
        assert!((alpha_from_sigma(3.0) - 0.1).abs() < 1e-15);
        for s in [1e-3, 0.5, 2.0, 50.0] {
            assert!((sigma_from_alpha(alpha_from_sigma(s)) - s).abs() < 1e-12 * s.max(1.0));
        }
    }

    #[test]
    fn linear_schedule_hits_sigma_max() {
        for (t, smax) in [(1000, 100.0), (1, 3.0), (50, 0.5)] {
            let s = schedule_linear_vp(t, smax).unwrap();
            assert_eq!(s.t_max(), t);
            assert!((s.sigma(t) - smax).abs() < 1e-9 * smax, "{} vs {smax}", s.sigma(t));
            for i in 0..=t {
                assert!((s.alpha(i) * (1.0 + s.sigma(i).powi(2)) - 1.0).abs() < 1e-12);
            }
        }
        assert!(schedule_linear_vp(0, 1.0).is_err());
        assert!(schedule_linear_vp(10, 0.0).is_err());
    }

    #[test]
    fn schedule_validation_and_hash() {
        assert!(NoiseSchedule::from_sigmas(vec![0.0, 1.0, 1.0], "x").is_err());
        assert!(NoiseSchedule::from_sigmas(vec![0.1, 1.0], "x").is_err());
        let g = NoiseSchedule::geometric(10, 0.01, 10.0).unwrap();
        assert!((g.sigma(1) - 0.01).abs() < 1e-15 && (g.sigma(10) - 10.0).abs() < 1e-12);
        let a = schedule_linear_vp(100, 10.0).unwrap();
        assert_eq!(a.hash(), schedule_linear_vp(100, 10.0).unwrap().hash());
        assert_ne!(a.hash(), g.hash());
    }

    #[test]
    fn timestep_subset() {
        assert_eq!(timesteps(350, 1), vec![350, 0]);
        assert_eq!(timesteps(10, 5), vec![10, 8, 6, 4, 2, 0]);
        for (t, s) in [(350, 15), (220, 35), (7, 7), (1000, 999)] {
            let ts = timesteps(t, s);
            assert_eq!(ts.len(), s + 1);
            assert_eq!((ts[0], ts[s]), (t, 0));
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn config_validation() {
        let s = schedule_linear_vp(1000, 100.0).unwrap();
        let ok = SamplerConfig::default();
        ok.validate(&s).unwrap();
        for bad in [
            SamplerConfig { eta: 0.0, ..ok.clone() },
            SamplerConfig {
                eta_b: 1.5,
                ..ok.clone()
            },
            SamplerConfig { steps: 0, ..ok.clone() },
            SamplerConfig {
                steps: 400,
                ..ok.clone()
            },
            SamplerConfig {
                t_init: 1001,
                ..ok.clone()
            },
            SamplerConfig { n_avg: 0, ..ok.clone() },
        ] {
            assert!(bad.validate(&s).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn epsilon_estimate_identities() {
        let x0 = random_signal(8, 1);
        let eps = random_signal(8, 2);
        let alpha: f64 = 0.3;
        let xn: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| alpha.sqrt() * x + (1.0 - alpha).sqrt() * e)
            .collect();
        let rec = epsilon_estimate(&xn, &x0, alpha).unwrap();
        assert!(rec.iter().zip(&eps).all(|(a, b)| (a - b).abs() < 1e-12));
        let scaled: Vec<f64> = x0.iter().map(|v| alpha.sqrt() * v).collect();
        assert!(epsilon_estimate(&scaled, &x0, alpha)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-15));
        let zero = vec![0.0; 8];
        let r = epsilon_estimate(&x0, &zero, alpha).unwrap();
        assert!(r
            .iter()
            .zip(&x0)
            .all(|(a, b)| (a - b / (1.0 - alpha).sqrt()).abs() < 1e-15));
        assert!(matches!(epsilon_estimate(&x0, &x0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(epsilon_estimate(&x0, &x0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn consistency_update_cases() {
        let cg = CgOptions::default();
        let x = random_signal(6, 3);
        let y = to_complex(&random_signal(6, 4));
        let id = DenseOperator::identity(6);
        let xp = consistency_update(&x, &y, &id, &cg).unwrap();
        assert!(xp.iter().zip(&y).all(|(a, b)| (a - b.re).abs() < 1e-12));

        let op = random_dense(4, 6, None, 5);
        let x0 = random_signal(6, 6);
        let y0 = measure(&op, &x0);
        let xp = consistency_update(&x0, &y0, &op, &cg).unwrap();
        assert!(xp.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn eta_one_uses_only_fresh_noise() {
        let n = 5;
        let (xt, xp, et, e) = (
            random_signal(n, 1),
            random_signal(n, 2),
            random_signal(n, 3),
            random_signal(n, 4),
        );
        let alpha: f64 = 0.4;
        let out = blend(
            &xt,
            Some(&xp),
            &et,
            &e,
            alpha,
            1.0,
            0.5,
            BranchMixing::Linear.coefficient(1.0),
        );
        for i in 0..n {
            let want = alpha.sqrt() * (0.5 * xp[i] + 0.5 * xt[i]) + (1.0 - alpha).sqrt() * e[i];
            assert_eq!(out[i], want);
        }
    }

    #[test]
    fn spectral_needs_real_svd() {
        let s = schedule_linear_vp(10, 5.0).unwrap();
        let op = DenseOperator::identity(4);
        let err = spectral_init(
            &to_complex(&[0.0; 4]),
            &op,
            &s,
            10,
            0.0,
            stream(0, StreamTag::Trajectory, 0),
        );
        assert!(matches!(err, Err(Error::Capability(_))));
    }

    #[test]
    fn spectral_cases_match_closed_forms() {
        // Diagonal H with one zero singular value; check per-index mean and
        // spread against the case formulas over many fresh draws.
        let op = DenseOperator::diagonal(&[2.0, 0.5, 0.0]).with_svd().unwrap();
        let sched = NoiseSchedule::from_sigmas(vec![0.0, 0.3, 1.0], "test").unwrap();
        let y = to_complex(&[0.4, -0.2, 0.0]);
        let sigma_y = 0.25;
        let eta = 0.6;
        let cfg = SamplerConfig {
            eta,
            eta_b: 0.7,
            steps: 1,
            t_init: 2,
            ..Default::default()
        };
        let den = DenoiserHandle::identity();
        let x_next = vec![0.2, 0.1, -0.3];
        let trials = 20_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for k in 0..trials {
            let st = DdrmState {
                x: x_next.clone(),
                t: 2,
                rng: stream(k, StreamTag::Fixture, 9),
                last_eps: vec![],
                last_x_theta: None,
            };
            let out = spectral_step(st, &y, &op, &sched, &cfg, &den, geom(1, 3), sigma_y, 1).unwrap();
            let a = sched.alpha(1).sqrt();
            for i in 0..3 {
                // singular vectors are signed coordinate axes; compare |.| free stats via VE value
                let v = out.x[i] / a;
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let (s1, s2) = (sched.sigma(1), sched.sigma(2));
        let an = sched.alpha(2).sqrt();
        let theta: Vec<f64> = x_next.clone(); // identity denoiser
        let xve: Vec<f64> = x_next.iter().map(|v| v / an).collect();
        let c = (1.0f64 - eta * eta).sqrt();
        // index 0: s = 2 → σ_y/s = 0.125 < σ_t → third case
        let m0 = (1.0 - 0.7) * theta[0] + 0.7 * 0.2;
        let v0 = s1 * s1 - (0.125 * 0.7f64).powi(2);
        // index 1: s = 0.5 → σ_y/s = 0.5 > σ_t → middle case
        let m1 = theta[1] + c * s1 * (-0.4 - theta[1]) / 0.5;
        let v1 = (eta * s1).powi(2);
        // index 2: null space
        let m2 = theta[2] + c * s1 * (xve[2] - theta[2]) / s2;
        let v2 = (eta * s1).powi(2);
        for (i, (m, v)) in [(m0, v0), (m1, v1), (m2, v2)].into_iter().enumerate() {
            let mean = sum[i] / trials as f64;
            let var = sq[i] / trials as f64 - mean * mean;
            assert!(
                (mean - m).abs() < 4.0 * (v / trials as f64).sqrt() + 1e-12,
                "index {i}: mean {mean} vs {m}"
            );
            assert!((var / v - 1.0).abs() < 0.05, "index {i}: var {var} vs {v}");
        }
    }

    #[test]
    fn spectral_init_mean_matches_measurement() {
        let op = random_dense(6, 4, None, 11);
        let sched = schedule_linear_vp(100, 2.0).unwrap();
        let y = measure(&op, &random_signal(4, 12));
        let svd = op.svd().unwrap();
        let ybar = re(svd.spectral_measurement(&y));
        let draws = 10_000;
        let mut mean = [0.0; 4];
        for k in 0..draws {
            let st = spectral_init(&y, &op, &sched, 100, 0.0, stream(3, StreamTag::Trajectory, k)).unwrap();
            let xb = re(svd.to_spectral(&to_complex(&st.x)));
            mean.iter_mut()
                .zip(xb)
                .for_each(|(m, v)| *m += v / sched.alpha(100).sqrt() / draws as f64);
        }
        for i in 0..4 {
            assert!(
                (mean[i] - ybar[i]).abs() < 3.0 * sched.sigma(100) / 100.0,
                "{i}: {} vs {}",
                mean[i],
                ybar[i]
            );
        }
    }

    #[test]
    fn spectral_init_rejects_negative_variance() {
        let op = DenseOperator::diagonal(&[0.1, 1.0]).with_svd().unwrap();
        let sched = NoiseSchedule::from_sigmas(vec![0.0, 1.0], "t").unwrap();
        let r = spectral_init(
            &to_complex(&[0.0, 0.0]),
            &op,
            &sched,
            1,
            0.5,
            stream(0, StreamTag::Trajectory, 0),
        );
        assert!(matches!(r, Err(Error::Schedule(_))));
    }

    /// Runs both samplers with equal mixing and shared noise, returning the
    /// largest relative difference over all iterates.
    fn equivalence_gap(op: &DenseOperator, eta: f64, eta_b: f64, steps: usize, seed: u64) -> f64 {
        let n = op.in_dim();
        let sched = schedule_linear_vp(1000, 100.0).unwrap();
        let x0 = random_signal(n, seed);
        let y = measure(op, &x0);
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
        let den = DenoiserHandle::gaussian(2.0);
        let shape = geom(1, n);
        let a = run_sampler_traced(
            &y,
            op,
            &sched,
            &cfg,
            &den,
            SamplerMode::Spectral { sigma_y: 0.0 },
            shape,
            0,
        )
        .unwrap();
        let b = run_sampler_traced(&y, op, &sched, &cfg, &den, SamplerMode::Simplified, shape, 0).unwrap();
        a.iterates
            .iter()
            .zip(&b.iterates)
            .map(|(p, q)| {
                let diff: f64 = p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                diff / norm.max(1e-300)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn spectral_and_simplified_agree_on_small_operator() {
        let op = random_dense(6, 4, None, 21);
        for eta in [0.2, 0.5, 1.0] {
            for eta_b in [0.0, 0.5, 1.0] {
                let gap = equivalence_gap(&op, eta, eta_b, 20, 7);
                assert!(gap <= 1e-6, "η={eta} η_b={eta_b}: {gap}");
            }
        }
        // wide and rank-deficient operators exercise the null-space branch
        for (m, n, r) in [(4, 9, None), (12, 16, Some(5))] {
            let op = random_dense(m, n, r, 30 + m as u64);
            assert!(equivalence_gap(&op, 0.5, 0.5, 20, 8) <= 1e-6);
        }
    }

    #[test]
    fn perfect_denoiser_single_step_recovers_signal() {
        let sched = schedule_linear_vp(1000, 100.0).unwrap();
        let x_unit = RealImage::gray(4, 4, random_signal(16, 5).iter().map(|v| 0.5 + 0.5 * v).collect()).unwrap();
        let x_vp = x_unit.to_vp();
        let op = random_dense(10, 16, None, 5);
        let y = measure(&op, &x_vp.data);
        let den = DenoiserHandle::oracle(&x_unit).unwrap();
        let cfg = SamplerConfig {
            eta: 0.5,
            eta_b: 1.0,
            steps: 1,
            t_init: 500,
            ..Default::default()
        };
        for mode in [SamplerMode::Simplified, SamplerMode::Spectral { sigma_y: 0.0 }] {
            let out = run_sampler(&y, &op, &sched, &cfg, &den, mode, geom(4, 4)).unwrap();
            assert!(
                out.data.iter().zip(&x_unit.data).all(|(a, b)| (a - b).abs() < 1e-8),
                "{mode:?}"
            );
        }
    }

    #[test]
    fn inpainting_fills_missing_coordinates() {
        let sched = schedule_linear_vp(1000, 100.0).unwrap();
        let x_unit = RealImage::gray(8, 8, random_signal(64, 6).iter().map(|v| 0.5 + 0.5 * v).collect()).unwrap();
        let kept: Vec<usize> = (0..64).filter(|i| (i / 8 + i % 8) % 2 == 0).collect();
        let op = DenseOperator::subsample(64, &kept).unwrap();
        let y_unit = measure(&op, &x_unit.data);
        let y = to_vp_measurement(&y_unit, &op);
        let den = DenoiserHandle::oracle(&x_unit).unwrap();
        let cfg = SamplerConfig {
            eta: 0.85,
            eta_b: 1.0,
            steps: 10,
            t_init: 300,
            ..Default::default()
        };
        let out = run_sampler(&y, &op, &sched, &cfg, &den, SamplerMode::Simplified, geom(8, 8)).unwrap();
        for (row, &i) in kept.iter().enumerate() {
            assert!((out.data[i] - y_unit[row].re).abs() < 1e-12);
        }
        assert!(out.data.iter().zip(&x_unit.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn sampler_is_deterministic_and_seed_sensitive() {
        let sched = schedule_linear_vp(200, 20.0).unwrap();
        let op = random_dense(8, 16, None, 9);
        let y = measure(&op, &random_signal(16, 9));
        let den = DenoiserHandle::shrinkage(1.0);
        let cfg = SamplerConfig {
            eta: 0.5,
            eta_b: 0.5,
            steps: 5,
            t_init: 100,
            n_avg: 2,
            ..Default::default()
        };
        let run =
            |c: &SamplerConfig| run_sampler(&y, &op, &sched, c, &den, SamplerMode::Simplified, geom(4, 4)).unwrap();
        let a = run(&cfg);
        assert_eq!(a, run(&cfg));
        assert_ne!(a, run(&SamplerConfig { seed: 1, ..cfg }));
    }

    #[test]
    fn eta_b_zero_skips_the_operator() {
        // An operator whose pseudoinverse is unusable must not be touched.
        struct Poison;
        impl LinearOperator for Poison {
            fn in_dim(&self) -> usize {
                4
            }
            fn out_dim(&self) -> usize {
                4
            }
            fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
                x.iter().map(|_| Complex64::new(f64::NAN, 0.0)).collect()
            }
            fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
                self.apply(y)
            }
            fn id(&self) -> String {
                "poison".into()
            }
        }
        let sched = schedule_linear_vp(100, 10.0).unwrap();
        let cfg = SamplerConfig {
            eta: 1.0,
            eta_b: 0.0,
            steps: 3,
            t_init: 50,
            ..Default::default()
        };
        let st = DdrmState {
            x: random_signal(4, 1),
            t: 50,
            rng: stream(0, StreamTag::Trajectory, 0),
            last_eps: vec![],
            last_x_theta: None,
        };
        let out = simplified_step(
            st,
            &to_complex(&[0.0; 4]),
            &Poison,
            &sched,
            &cfg,
            &DenoiserHandle::identity(),
            geom(2, 2),
            30,
            &CgOptions::default(),
        );
        assert!(out.is_ok());
    }

    #[test]
    fn manifest_echoes_config() {
        let sched = schedule_linear_vp(1000, 100.0).unwrap();
        let cfg = SamplerConfig {
            eta: 0.15,
            eta_b: 0.20,
            steps: 15,
            t_init: 350,
            n_avg: 1,
            ..Default::default()
        };
        let m = RunManifest::new(&sched, &cfg, "simplified", "shrinkage:1");
        let back: RunManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.sigmas.len(), 16);
        assert_eq!(back.sigmas[15], 0.0);
    }
}
