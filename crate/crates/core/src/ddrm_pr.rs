//! Diffusion-regularized phase retrieval.
//!
//! The linear closed form `x' = x_θ − H†H x_θ + H†y` has no analogue for
//! magnitude measurements, so the pseudoinverse terms are replaced by phase
//! retrieval runs:
//!
//! ```text
//! x' = f − AP(|A f|, k iterations) + RandomInit(y)
//! ```
//!
//! where `f` is the denoised estimate. The RandomInit reconstruction is
//! computed once per channel and cached in a [`PrProblem`]; every timestep of
//! every averaged trajectory reuses it. `x'` then enters the same blend as
//! the linear sampler.
//!
//! Fourier problems use HIO on the oversampled grid with a support
//! constraint. Generic operators (e.g. transmission matrices) use either
//! HIO with only sign constraints or the measurement-projection AP.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classic_pr::{
    ap_general_run_complex, fourier_grid_operator, random_init_with, run_ap, ApMethod, ConstraintSet, HioParams,
    InitSolver, RandomInitParams,
};
use crate::ddrm_core::{
    blend, denoise_vec, epsilon_estimate, schedule_linear_vp, timesteps, BranchMixing, NoiseSchedule, RunManifest,
    SamplerConfig, DEFAULT_SIGMA_MAX, DEFAULT_T,
};
use crate::denoise::{Denoiser, Geometry as ImageShape};
use crate::eval::{align_ambiguities_with, aligned_scores, AlignOptions};
use crate::field_ops::{RealImage, SupportMask, ValueRange};
use crate::forward_model::{Geometry, MeasurementSet};
use crate::linops::{CgOptions, LinearOperator};
use crate::rng::{normal_vec, stream, StreamRng, StreamTag};
use crate::{Complex64, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    Hio,
    /// `A†{y ⊙ phase(Ax)}` followed by the constraint projection.
    General,
}

/// Where the inner AP run starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HioStart {
    /// The denoised estimate `f`, mapped to unit range.
    #[default]
    Denoised,
    /// The noisy iterate `x_{t+1}`, mapped to unit range.
    Iterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub sigma_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T,
            sigma_max: DEFAULT_SIGMA_MAX,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        schedule_linear_vp(self.t_max, self.sigma_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPipelineConfig {
    pub sampler: SamplerConfig,
    pub hio_inner_iters: usize,
    pub hio_beta: f64,
    pub random_init: RandomInitParams,
    pub nonneg: bool,
    pub real_valued: bool,
    pub ap_mode: ApMode,
    pub hio_start: HioStart,
    pub schedule: ScheduleSpec,
    /// Align each averaged sample to the first before taking the mean.
    pub align_samples: bool,
}

impl Default for PrPipelineConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            hio_inner_iters: 100,
            hio_beta: 0.9,
            random_init: RandomInitParams::default(),
            nonneg: true,
            real_valued: true,
            ap_mode: ApMode::Hio,
            hio_start: HioStart::Denoised,
            schedule: ScheduleSpec::default(),
            align_samples: true,
        }
    }
}

impl PrPipelineConfig {
    /// η = 0.15, η_b = 0.20, 15 steps from 350, one sample.
    pub fn fourier_reference() -> Self {
        Self {
            sampler: SamplerConfig {
                eta: 0.15,
                eta_b: 0.20,
                steps: 15,
                t_init: 350,
                n_avg: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// η = 1.0, η_b = 0.0, 35 steps from 220, one sample.
    pub fn transmission_reference() -> Self {
        Self {
            sampler: SamplerConfig {
                eta: 1.0,
                eta_b: 0.0,
                steps: 35,
                t_init: 220,
                n_avg: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<NoiseSchedule> {
        let schedule = self.schedule.build()?;
        self.sampler.validate(&schedule)?;
        if self.hio_inner_iters == 0 {
            return Err(Error::Config("hio_inner_iters must be ≥ 1".into()));
        }
        HioParams {
            beta: self.hio_beta,
            iters: self.hio_inner_iters,
        }
        .validate()?;
        self.random_init.validate()?;
        if !self.nonneg && !self.real_valued {
            return Err(Error::Config(
                "the pipeline reconstructs real images; enable nonneg or real_valued".into(),
            ));
        }
        Ok(schedule)
    }
}

/// A measured object with its cached RandomInit reconstruction.
pub struct PrProblem {
    ys: Vec<Vec<f64>>,
    op: Arc<dyn LinearOperator>,
    cons: ConstraintSet,
    method: ApMethod,
    general: bool,
    grid: (usize, usize),
    shape: ImageShape,
    keys: Vec<u64>,
    init: RealImage,
    init_residuals: Vec<f64>,
    translations: bool,
}

impl std::fmt::Debug for PrProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrProblem")
            .field("operator", &self.op.id())
            .field("shape", &self.shape)
            .field("grid", &self.grid)
            .finish()
    }
}

/// Stream key derived from the measurement values, so that per-channel noise
/// does not depend on channel order.
fn measurement_key(y: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in y {
        h.update(v.to_bits().to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) & 0xFFFF_FFFF
}

fn fourier_dims(ys: &[MeasurementSet]) -> Result<(usize, usize)> {
    let first = ys.first().ok_or_else(|| Error::Argument("no measurements".into()))?;
    let Geometry::Fourier { n_side, factor } = first.meta.geometry else {
        return Err(Error::Argument("expected Fourier measurements".into()));
    };
    if ys.iter().any(|m| m.meta.geometry != first.meta.geometry) {
        return Err(Error::Shape("channels have different geometries".into()));
    }
    Ok((n_side, factor))
}

impl PrProblem {
    /// Oversampled Fourier magnitudes, one measurement set per channel.
    pub fn fourier(ys: &[MeasurementSet], cfg: &PrPipelineConfig) -> Result<Self> {
        let (n_side, factor) = fourier_dims(ys)?;
        let op: Arc<dyn LinearOperator> = Arc::new(fourier_grid_operator(n_side, factor)?);
        Self::with_support(ys, op, n_side, factor, cfg)
    }

    fn with_support(
        ys: &[MeasurementSet],
        op: Arc<dyn LinearOperator>,
        n_side: usize,
        factor: usize,
        cfg: &PrPipelineConfig,
    ) -> Result<Self> {
        let cons = ConstraintSet {
            support: Some(SupportMask::for_oversampled(n_side, factor)?),
            nonneg: cfg.nonneg,
            real_valued: cfg.real_valued,
        };
        let m = n_side * factor;
        Self::build(
            ys,
            op,
            cons,
            false,
            (m, m),
            ImageShape {
                height: n_side,
                width: n_side,
                channels: ys.len(),
            },
            true,
            cfg,
        )
    }

    /// Magnitudes of a generic operator. Fourier geometries paired with the
    /// oversampled-grid operator keep their support constraint and use HIO.
    pub fn general(ys: &[MeasurementSet], op: Arc<dyn LinearOperator>, cfg: &PrPipelineConfig) -> Result<Self> {
        let first = ys.first().ok_or_else(|| Error::Argument("no measurements".into()))?;
        if let Geometry::Fourier { n_side, factor } = first.meta.geometry {
            fourier_dims(ys)?;
            let m = n_side * factor;
            if op.in_dim() == m * m {
                return Self::with_support(ys, op, n_side, factor, cfg);
            }
        }
        let n = op.in_dim();
        let side = (n as f64).sqrt().round() as usize;
        let (h, w) = if side * side == n { (side, side) } else { (1, n) };
        let cons = ConstraintSet {
            support: None,
            nonneg: cfg.nonneg,
            real_valued: cfg.real_valued,
        };
        Self::build(
            ys,
            op,
            cons,
            cfg.ap_mode == ApMode::General,
            (h, w),
            ImageShape {
                height: h,
                width: w,
                channels: ys.len(),
            },
            false,
            cfg,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        ys: &[MeasurementSet],
        op: Arc<dyn LinearOperator>,
        cons: ConstraintSet,
        general: bool,
        grid: (usize, usize),
        shape: ImageShape,
        translations: bool,
        cfg: &PrPipelineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        for m in ys {
            if m.y.len() != op.out_dim() {
                return Err(Error::Shape(format!(
                    "{} magnitudes for an operator with {} outputs",
                    m.y.len(),
                    op.out_dim()
                )));
            }
        }
        let method = ApMethod::Hio { beta: cfg.hio_beta };
        let solver = if general {
            InitSolver::General { constrained: true }
        } else {
            InitSolver::Ap(ApMethod::Hio {
                beta: cfg.random_init.beta,
            })
        };
        let mut problem = Self {
            ys: ys.iter().map(|m| m.y.clone()).collect(),
            op,
            cons,
            method,
            general,
            grid,
            shape,
            keys: ys.iter().map(|m| measurement_key(&m.y)).collect(),
            init: RealImage::zeros(shape.height, shape.width, shape.channels, ValueRange::Unit),
            init_residuals: Vec::new(),
            translations,
        };
        let cg = CgOptions::default();
        let mut planes = Vec::with_capacity(ys.len());
        for y in &problem.ys {
            let ri = random_init_with(y, problem.op.as_ref(), &cfg.random_init, &problem.cons, solver, &cg)?;
            problem.init_residuals.push(ri.residual);
            planes.push(problem.extract(&ri.estimate));
        }
        problem.init = RealImage::from_vec(
            shape.height,
            shape.width,
            shape.channels,
            planes.concat(),
            ValueRange::Unit,
        )?;
        Ok(problem)
    }

    /// The cached RandomInit reconstruction (unit range, not clamped).
    pub fn init(&self) -> &RealImage {
        &self.init
    }

    pub fn init_residuals(&self) -> &[f64] {
        &self.init_residuals
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn operator(&self) -> &dyn LinearOperator {
        self.op.as_ref()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.cons
    }

    /// Alignment options matching this problem's ambiguity group.
    pub fn align_options(&self) -> AlignOptions {
        AlignOptions {
            translations: self.translations,
            sign_search: !self.cons.nonneg,
        }
    }

    fn plane_len(&self) -> usize {
        self.shape.height * self.shape.width
    }

    /// Object plane → operator grid (zero padding to the top-left).
    fn embed(&self, plane: &[f64]) -> Vec<Complex64> {
        let (gh, gw) = self.grid;
        let (h, w) = (self.shape.height, self.shape.width);
        let mut out = vec![Complex64::new(0.0, 0.0); gh * gw];
        for r in 0..h {
            for c in 0..w {
                out[r * gw + c] = Complex64::new(plane[r * w + c], 0.0);
            }
        }
        out
    }

    /// Operator grid → object plane (top-left crop, real part).
    fn extract(&self, x: &[Complex64]) -> Vec<f64> {
        let gw = self.grid.1;
        let (h, w) = (self.shape.height, self.shape.width);
        (0..h * w).map(|i| x[(i / w) * gw + i % w].re).collect()
    }

    /// Magnitude residual `‖|A x_c| − y_c‖` of each channel of `img`.
    pub fn residuals(&self, img: &RealImage) -> Result<Vec<f64>> {
        if img.height != self.shape.height || img.width != self.shape.width || img.channels != self.shape.channels {
            return Err(Error::Shape("image does not match the problem".into()));
        }
        Ok(self
            .ys
            .iter()
            .enumerate()
            .map(|(c, y)| {
                let ax = self.op.apply(&self.embed(img.plane(c)));
                ax.iter()
                    .zip(y)
                    .map(|(z, v)| (z.norm() - v).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// `k` iterations of the inner AP on the magnitudes of `f`, started from
    /// `start`; returns the constraint-projected estimate on the object.
    pub fn inner_ap(&self, f: &[f64], start: &[f64], iters: usize) -> Result<Vec<f64>> {
        let fx = self.embed(f);
        let y_f: Vec<f64> = self.op.apply(&fx).iter().map(|z| z.norm()).collect();
        let cg = CgOptions::default();
        let x = if self.general {
            ap_general_run_complex(&y_f, self.op.as_ref(), self.embed(start), iters, Some(&self.cons), &cg)?
        } else {
            let out = run_ap(
                &y_f,
                self.op.as_ref(),
                self.embed(start),
                iters,
                &self.cons,
                self.method,
                None,
                &cg,
            )?;
            self.cons.project(&out.iterate)
        };
        Ok(self.extract(&x))
    }
}

fn unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// One reconstruction trajectory's state.
#[derive(Debug, Clone)]
pub struct PrState {
    /// Iterate in VP coordinates, planar over channels.
    pub x: Vec<f64>,
    pub t: usize,
    /// One noise stream per channel.
    pub rngs: Vec<StreamRng>,
    pub last_eps: Vec<f64>,
}

impl PrState {
    fn draw(&mut self, plane: usize) -> Vec<f64> {
        let mut eps = Vec::with_capacity(plane * self.rngs.len());
        for rng in &mut self.rngs {
            eps.extend(normal_vec(rng, plane));
        }
        eps
    }
}

/// Streams for trajectory `k`, one per channel.
pub fn trajectory_streams(problem: &PrProblem, seed: u64, k: usize) -> Vec<StreamRng> {
    problem
        .keys
        .iter()
        .map(|key| stream(seed, StreamTag::Trajectory, (key << 16) | (k as u64 & 0xFFFF)))
        .collect()
}

/// `x_{T_init} = √α to_vp(RandomInit) + √(1 − α) ε`.
pub fn ddrm_pr_init(problem: &PrProblem, schedule: &NoiseSchedule, t_init: usize, rngs: Vec<StreamRng>) -> PrState {
    let mut state = PrState {
        x: Vec::new(),
        t: t_init,
        rngs,
        last_eps: Vec::new(),
    };
    let eps = state.draw(problem.plane_len());
    let (a, b) = (schedule.alpha(t_init).sqrt(), (1.0 - schedule.alpha(t_init)).sqrt());
    state.x = problem
        .init
        .data
        .iter()
        .zip(&eps)
        .map(|(r, e)| a * (2.0 * r - 1.0) + b * e)
        .collect();
    state.last_eps = eps;
    state
}

/// `x' = f − to_vp(AP(|A f|)) + to_vp(RandomInit)` per channel, where the AP
/// start follows `cfg.hio_start`.
pub fn consistency_term(
    problem: &PrProblem,
    x_theta: &[f64],
    x_next: &[f64],
    cfg: &PrPipelineConfig,
) -> Result<Vec<f64>> {
    let n = problem.plane_len();
    let per_channel: Vec<Vec<f64>> = (0..problem.shape.channels)
        .into_par_iter()
        .map(|c| {
            let f: Vec<f64> = x_theta[c * n..(c + 1) * n].iter().map(|&v| unit(v)).collect();
            let start: Vec<f64> = match cfg.hio_start {
                HioStart::Denoised => f.clone(),
                HioStart::Iterate => x_next[c * n..(c + 1) * n].iter().map(|&v| unit(v)).collect(),
            };
            let z = problem.inner_ap(&f, &start, cfg.hio_inner_iters)?;
            let ri = problem.init.plane(c);
            Ok((0..n)
                .map(|i| x_theta[c * n + i] - (2.0 * z[i] - 1.0) + (2.0 * ri[i] - 1.0))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_channel.concat())
}

/// One transition from `state.t` down to `t`.
pub fn ddrm_pr_step(
    mut state: PrState,
    problem: &PrProblem,
    cfg: &PrPipelineConfig,
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<PrState> {
    let t_next = state.t;
    if t >= t_next {
        return Err(Error::Argument(format!("step must descend, {t_next} → {t}")));
    }
    let s = &cfg.sampler;
    let x_theta = denoise_vec(den, &state.x, problem.shape, t_next, schedule)?;
    let eps_theta = epsilon_estimate(&state.x, &x_theta, schedule.alpha(t_next))?;
    // With η_b = 0 the consistency term has zero weight; skip the AP runs.
    let x_prime = if s.eta_b > 0.0 {
        Some(consistency_term(problem, &x_theta, &state.x, cfg)?)
    } else {
        None
    };
    let eps = state.draw(problem.plane_len());
    state.x = blend(
        &x_theta,
        x_prime.as_deref(),
        &eps_theta,
        &eps,
        schedule.alpha(t),
        s.eta,
        s.eta_b,
        s.mixing_coefficient(BranchMixing::Linear),
    );
    state.t = t;
    state.last_eps = eps;
    if state.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iter: t,
            what: "non-finite reconstruction iterate".into(),
        });
    }
    Ok(state)
}

/// Runs trajectory `k` and returns `x_0` in unit range.
pub fn run_trajectory(
    problem: &PrProblem,
    cfg: &PrPipelineConfig,
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    k: usize,
) -> Result<RealImage> {
    let s = &cfg.sampler;
    let ts = timesteps(s.t_init, s.steps);
    let mut state = ddrm_pr_init(problem, schedule, s.t_init, trajectory_streams(problem, s.seed, k));
    for &t in &ts[1..] {
        state = ddrm_pr_step(state, problem, cfg, den, schedule, t)?;
    }
    let sh = problem.shape;
    RealImage::from_vec(sh.height, sh.width, sh.channels, state.x, ValueRange::Symmetric).map(|x| x.from_vp())
}

/// Pixelwise mean after aligning every sample to the first.
pub fn average_samples(samples: &[RealImage]) -> Result<RealImage> {
    average_samples_with(samples, Some(AlignOptions::default()))
}

pub fn average_samples_with(samples: &[RealImage], align: Option<AlignOptions>) -> Result<RealImage> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot average an empty sample list".into()))?;
    let mut acc = first.data.clone();
    for s in &samples[1..] {
        if !s.same_shape(first) {
            return Err(Error::Shape("samples differ in shape".into()));
        }
        let aligned = match align {
            Some(opts) => align_ambiguities_with(s, first, opts)?.0,
            None => s.clone(),
        };
        acc.iter_mut().zip(&aligned.data).for_each(|(a, v)| *a += v);
    }
    let n = samples.len() as f64;
    Ok(RealImage {
        data: acc.into_iter().map(|v| v / n).collect(),
        ..first.clone()
    })
}

#[derive(Debug, Clone)]
pub struct PrOutcome {
    pub image: RealImage,
    pub samples: Vec<RealImage>,
    pub manifest: RunManifest,
}

/// Runs `n_avg` trajectories on a prepared problem and averages them.
pub fn reconstruct_problem(problem: &PrProblem, cfg: &PrPipelineConfig, den: &dyn Denoiser) -> Result<PrOutcome> {
    let schedule = cfg.validate()?;
    let samples: Vec<RealImage> = (0..cfg.sampler.n_avg)
        .into_par_iter()
        .map(|k| run_trajectory(problem, cfg, den, &schedule, k))
        .collect::<Result<_>>()?;
    let align = cfg.align_samples.then(|| problem.align_options());
    let image = average_samples_with(&samples, align)?;
    let mode = if problem.general { "ddrm-pr-general" } else { "ddrm-pr" };
    Ok(PrOutcome {
        image,
        samples,
        manifest: RunManifest::new(&schedule, &cfg.sampler, mode, &den.id()),
    })
}

/// Fourier reconstruction of a single-channel measurement.
pub fn ddrm_pr_reconstruct(y: &MeasurementSet, cfg: &PrPipelineConfig, den: &dyn Denoiser) -> Result<RealImage> {
    ddrm_pr_reconstruct_channels(std::slice::from_ref(y), cfg, den)
}

/// Fourier reconstruction with one measurement set per channel.
pub fn ddrm_pr_reconstruct_channels(
    ys: &[MeasurementSet],
    cfg: &PrPipelineConfig,
    den: &dyn Denoiser,
) -> Result<RealImage> {
    let problem = PrProblem::fourier(ys, cfg)?;
    Ok(reconstruct_problem(&problem, cfg, den)?.image)
}

pub fn ddrm_pr_general_reconstruct(
    y: &MeasurementSet,
    op: Arc<dyn LinearOperator>,
    cfg: &PrPipelineConfig,
    den: &dyn Denoiser,
) -> Result<RealImage> {
    let problem = PrProblem::general(std::slice::from_ref(y), op, cfg)?;
    Ok(reconstruct_problem(&problem, cfg, den)?.image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Psnr,
    Ssim,
}

/// Candidate values per sampler knob. Cells enumerate the Cartesian product
/// with `eta` outermost and `n_avg` innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub eta: Vec<f64>,
    pub eta_b: Vec<f64>,
    pub steps: Vec<usize>,
    pub t_init: Vec<usize>,
    pub n_avg: Vec<usize>,
    pub objective: Objective,
}

impl GridSpec {
    /// A grid with the base config's value on every axis.
    pub fn single(cfg: &SamplerConfig) -> Self {
        Self {
            eta: vec![cfg.eta],
            eta_b: vec![cfg.eta_b],
            steps: vec![cfg.steps],
            t_init: vec![cfg.t_init],
            n_avg: vec![cfg.n_avg],
            objective: Objective::Psnr,
        }
    }

    /// Parses `axis = v1, v2, ...` lines; `#` starts a comment. Axes not
    /// mentioned take the base config's value.
    pub fn parse(text: &str, base: &SamplerConfig) -> Result<Self> {
        let mut g = Self::single(base);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, vals) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: expected `axis = values`", lineno + 1)))?;
            let items: Vec<&str> = vals.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let bad = |what: &str| Error::Config(format!("grid line {}: bad {what}", lineno + 1));
            let floats = || {
                items
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| bad("number")))
                    .collect::<Result<Vec<_>>>()
            };
            let ints = || {
                items
                    .iter()
                    .map(|s| s.parse::<usize>().map_err(|_| bad("integer")))
                    .collect::<Result<Vec<_>>>()
            };
            match key.trim().replace('-', "_").as_str() {
                "eta" => g.eta = floats()?,
                "eta_b" => g.eta_b = floats()?,
                "steps" => g.steps = ints()?,
                "t_init" => g.t_init = ints()?,
                "n_avg" => g.n_avg = ints()?,
                "objective" => {
                    g.objective = match items.as_slice() {
                        ["psnr"] => Objective::Psnr,
                        ["ssim"] => Objective::Ssim,
                        _ => return Err(bad("objective")),
                    }
                }
                other => return Err(Error::Config(format!("unknown grid axis `{other}`"))),
            }
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta.is_empty()
            || self.eta_b.is_empty()
            || self.steps.is_empty()
            || self.t_init.is_empty()
            || self.n_avg.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        Ok(())
    }

    pub fn cells(&self, base: &SamplerConfig) -> Vec<SamplerConfig> {
        let mut out = Vec::new();
        for &eta in &self.eta {
            for &eta_b in &self.eta_b {
                for &steps in &self.steps {
                    for &t_init in &self.t_init {
                        for &n_avg in &self.n_avg {
                            out.push(SamplerConfig {
                                eta,
                                eta_b,
                                steps,
                                t_init,
                                n_avg,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One scored grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: usize,
    pub eta: f64,
    pub eta_b: f64,
    pub steps: usize,
    pub t_init: usize,
    pub n_avg: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub wall_ms: u128,
    pub error: Option<String>,
}

/// A validation item: ground truth and its per-channel Fourier measurements.
pub type ValItem = (RealImage, Vec<MeasurementSet>);

/// Scores every cell on the validation set and returns the best config with
/// the full table. RandomInit runs once per item and is shared by all cells.
pub fn grid_search(
    grid: &GridSpec,
    val_set: &[ValItem],
    cfg_base: &PrPipelineConfig,
    den: &dyn Denoiser,
) -> Result<(PrPipelineConfig, Vec<GridRow>)> {
    grid.validate()?;
    if val_set.is_empty() {
        return Err(Error::Argument("empty validation set".into()));
    }
    let problems: Vec<PrProblem> = val_set
        .iter()
        .map(|(_, ys)| PrProblem::fourier(ys, cfg_base))
        .collect::<Result<_>>()?;
    let cells = grid.cells(&cfg_base.sampler);
    let rows: Vec<GridRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, sampler)| {
            let cfg = PrPipelineConfig {
                sampler: sampler.clone(),
                ..cfg_base.clone()
            };
            let start = Instant::now();
            let scored = (|| -> Result<(f64, Option<f64>)> {
                let (mut p_sum, mut s_sum, mut s_n) = (0.0, 0.0, 0usize);
                for ((gt, _), problem) in val_set.iter().zip(&problems) {
                    let out = reconstruct_problem(problem, &cfg, den)?;
                    let (p, s, _) = aligned_scores(&out.image, gt, problem.align_options())?;
                    p_sum += p;
                    if let Some(s) = s {
                        s_sum += s;
                        s_n += 1;
                    }
                }
                Ok((p_sum / val_set.len() as f64, (s_n > 0).then(|| s_sum / s_n as f64)))
            })();
            let (mean_psnr, mean_ssim, error) = match scored {
                Ok((p, s)) => (Some(p), s, None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            GridRow {
                cell: i,
                eta: sampler.eta,
                eta_b: sampler.eta_b,
                steps: sampler.steps,
                t_init: sampler.t_init,
                n_avg: sampler.n_avg,
                mean_psnr,
                mean_ssim,
                wall_ms: start.elapsed().as_millis(),
                error,
            }
        })
        .collect();
    let score = |r: &GridRow| match grid.objective {
        Objective::Psnr => r.mean_psnr,
        Objective::Ssim => r.mean_ssim,
    };
    let best = rows
        .iter()
        .filter_map(|r| score(r).map(|s| (r.cell, s)))
        .fold(None::<(usize, f64)>, |acc, (c, s)| match acc {
            Some((_, b)) if s <= b => acc,
            _ => Some((c, s)),
        })
        .ok_or_else(|| Error::Config("every grid cell failed".into()))?;
    let best_cfg = PrPipelineConfig {
        sampler: cells[best.0].clone(),
        ..cfg_base.clone()
    };
    Ok((best_cfg, rows))
}

pub fn grid_csv_bytes(rows: &[GridRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Argument(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_grid_csv(path: &std::path::Path, rows: &[GridRow]) -> Result<()> {
    crate::dprt::write_atomic(path, &grid_csv_bytes(rows)?)
}
