//! Alternating-projection phase retrieval: HIO, ER, general AP, RandomInit.
//!
//! Iterates live on the operator's input grid. For Fourier phase retrieval that
//! is the oversampled grid, with the object support in the top-left corner
//! (see [`fourier_grid_operator`]).

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dprt::write_atomic;
use crate::field_ops::{RealImage, SupportMask, ValueRange};
use crate::linops::{make_fourier_operator, pinv_apply, CgOptions, FourierOperator, LinearOperator};
use crate::rng::{stream, StreamTag};
use crate::{Error, Result};

/// Fourier bins below this modulus get unit phase.
pub const ZERO_MAGNITUDE: f64 = 1e-12;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Square unitary DFT on the oversampled grid, the operator HIO iterates with.
pub fn fourier_grid_operator(n_side: usize, factor: usize) -> Result<FourierOperator> {
    make_fourier_operator(n_side * factor, 1)
}

/// Spatial-domain constraints. A pixel violates them when it lies outside the
/// support, is negative under `nonneg`, or keeps an imaginary part while
/// realness is not enforced by projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub support: Option<SupportMask>,
    pub nonneg: bool,
    pub real_valued: bool,
}

impl ConstraintSet {
    /// Support + non-negativity + realness for an oversampled Fourier problem.
    pub fn fourier(n_side: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            support: Some(SupportMask::for_oversampled(n_side, factor)?),
            nonneg: true,
            real_valued: true,
        })
    }

    pub fn real_nonneg() -> Self {
        Self {
            support: None,
            nonneg: true,
            real_valued: true,
        }
    }

    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if self.support.is_none() && !self.nonneg && !self.real_valued {
            return Err(Error::Config("constraint set has no active constraint".into()));
        }
        if let Some(s) = &self.support {
            if s.inside.len() != grid_len {
                return Err(Error::Shape(format!(
                    "support has {} pixels, grid has {grid_len}",
                    s.inside.len()
                )));
            }
            if s.count() == 0 {
                return Err(Error::Config("support mask is empty".into()));
            }
        }
        Ok(())
    }

    fn inside(&self, i: usize) -> bool {
        self.support.as_ref().is_none_or(|s| s.inside[i])
    }

    /// Makes `u[i]` real when realness is enforced, then reports whether it
    /// belongs to the violation set γ.
    fn admit(&self, i: usize, u: &mut Complex64) -> bool {
        if self.real_valued {
            u.im = 0.0;
        }
        let negative = self.nonneg && (u.re < 0.0 || u.im != 0.0);
        !self.inside(i) || negative
    }

    /// Nearest point satisfying every constraint.
    pub fn project(&self, x: &[Complex64]) -> Vec<Complex64> {
        x.iter()
            .enumerate()
            .map(|(i, &z)| {
                if !self.inside(i) {
                    return ZERO;
                }
                let mut z = z;
                if self.real_valued || self.nonneg {
                    z.im = 0.0;
                }
                if self.nonneg {
                    z.re = z.re.max(0.0);
                }
                z
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HioParams {
    pub beta: f64,
    pub iters: usize,
}

impl Default for HioParams {
    fn default() -> Self {
        Self { beta: 0.9, iters: 100 }
    }
}

impl HioParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) || self.iters == 0 {
            return Err(Error::Config(format!("invalid HIO parameters {self:?}")));
        }
        Ok(())
    }
}

/// How candidate reconstructions are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// `‖y − |Ax|‖₂`
    #[default]
    Magnitude,
    /// `‖y² − |Ax|²‖₂`
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomInitParams {
    pub num_inits: usize,
    pub short_iters: usize,
    pub final_iters: usize,
    pub seed: u64,
    pub beta: f64,
    pub residual: ResidualKind,
}

impl Default for RandomInitParams {
    fn default() -> Self {
        Self {
            num_inits: 50,
            short_iters: 50,
            final_iters: 1000,
            seed: 0,
            beta: 0.9,
            residual: ResidualKind::Magnitude,
        }
    }
}

impl RandomInitParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_inits == 0 || self.short_iters == 0 || self.final_iters == 0 {
            return Err(Error::Config(format!("RandomInit counts must be >= 1: {self:?}")));
        }
        HioParams {
            beta: self.beta,
            iters: 1,
        }
        .validate()
    }
}

/// Iteration rule applied to the pixels in γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ApMethod {
    /// `x_{k+1} = x_k − β u_k` on γ.
    Hio { beta: f64 },
    /// `x_{k+1} = 0` on γ.
    Er,
}

/// `‖y − |Ax|‖₂` (or the intensity variant).
pub fn residual_with(y: &[f64], x: &[Complex64], op: &dyn LinearOperator, kind: ResidualKind) -> f64 {
    residual_of_transform(y, &op.apply(x), kind)
}

fn residual_of_transform(y: &[f64], ax: &[Complex64], kind: ResidualKind) -> f64 {
    y.iter()
        .zip(ax)
        .map(|(&yi, z)| match kind {
            ResidualKind::Magnitude => (yi - z.norm()).powi(2),
            ResidualKind::Intensity => (yi * yi - z.norm_sqr()).powi(2),
        })
        .sum::<f64>()
        .sqrt()
}

/// Magnitude residual `‖y − |Ax|‖₂` of a real image.
pub fn residual(y: &[f64], x: &RealImage, op: &dyn LinearOperator) -> Result<f64> {
    let xc = to_complex(x, op)?;
    Ok(residual_with(y, &xc, op, ResidualKind::Magnitude))
}

fn to_complex(x: &RealImage, op: &dyn LinearOperator) -> Result<Vec<Complex64>> {
    if x.channels != 1 || x.data.len() != op.in_dim() {
        return Err(Error::Shape(format!(
            "{}x{}x{} image for an operator with {} inputs",
            x.height,
            x.width,
            x.channels,
            op.in_dim()
        )));
    }
    Ok(x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect())
}

fn to_image(x: &[Complex64], like: &RealImage) -> RealImage {
    RealImage {
        height: like.height,
        width: like.width,
        channels: 1,
        data: x.iter().map(|z| z.re).collect(),
        range: ValueRange::Unit,
    }
}

fn check_measurements(y: &[f64], op: &dyn LinearOperator) -> Result<()> {
    if y.len() != op.out_dim() {
        return Err(Error::Shape(format!(
            "{} magnitudes for an operator with {} outputs",
            y.len(),
            op.out_dim()
        )));
    }
    Ok(())
}

/// Measurement-consistency step `A†{y ⊙ Ax/|Ax|}`, returning also `Ax`.
fn measurement_step(
    x: &[Complex64],
    y: &[f64],
    op: &dyn LinearOperator,
    cg: &CgOptions,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let ax = op.apply(x);
    let target: Vec<Complex64> = ax
        .iter()
        .zip(y)
        .map(|(z, &yi)| {
            let n = z.norm();
            if n < ZERO_MAGNITUDE {
                Complex64::new(yi, 0.0)
            } else {
                z * (yi / n)
            }
        })
        .collect();
    Ok((pinv_apply(op, &target, cg)?, ax))
}

/// `u_k = A†{y ⊙ Ax_k/|Ax_k|}`, real part when `real_valued`.
pub fn fourier_projection(x: &RealImage, y: &[f64], op: &dyn LinearOperator, real_valued: bool) -> Result<RealImage> {
    check_measurements(y, op)?;
    let xc = to_complex(x, op)?;
    let (mut u, _) = measurement_step(&xc, y, op, &CgOptions::default())?;
    if real_valued {
        u.iter_mut().for_each(|z| z.im = 0.0);
    }
    Ok(to_image(&u, x))
}

/// Per-pixel update of one AP iteration. Each pixel depends only on its own
/// `x_k`, `u_k`, so the result is independent of visiting order.
fn ap_update(x: &[Complex64], u: &mut [Complex64], cons: &ConstraintSet, method: ApMethod) -> Vec<Complex64> {
    x.iter()
        .zip(u.iter_mut())
        .enumerate()
        .map(|(i, (&xi, ui))| {
            if cons.admit(i, ui) {
                match method {
                    ApMethod::Hio { beta } => xi - *ui * beta,
                    ApMethod::Er => ZERO,
                }
            } else {
                *ui
            }
        })
        .collect()
}

/// Result of an alternating-projection run.
#[derive(Debug, Clone)]
pub struct ApOutcome {
    /// Final iterate exactly as produced by the recursion.
    pub iterate: Vec<Complex64>,
    /// Residual of the constraint-projected iterate after each iteration.
    pub trace: Vec<f64>,
}

impl ApOutcome {
    pub fn estimate(&self, cons: &ConstraintSet) -> Vec<Complex64> {
        cons.project(&self.iterate)
    }
}

/// Core loop shared by HIO and ER. `record` controls the residual trace.
#[allow(clippy::too_many_arguments)]
pub fn run_ap(
    y: &[f64],
    op: &dyn LinearOperator,
    init: Vec<Complex64>,
    iters: usize,
    cons: &ConstraintSet,
    method: ApMethod,
    record: Option<ResidualKind>,
    cg: &CgOptions,
) -> Result<ApOutcome> {
    check_measurements(y, op)?;
    cons.validate(op.in_dim())?;
    if init.len() != op.in_dim() {
        return Err(Error::Shape(format!(
            "initial iterate has {} values, grid has {}",
            init.len(),
            op.in_dim()
        )));
    }
    let mut x = init;
    let mut trace = Vec::with_capacity(if record.is_some() { iters } else { 0 });
    for k in 0..iters {
        let (mut u, _) = measurement_step(&x, y, op, cg)?;
        x = ap_update(&x, &mut u, cons, method);
        if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Divergence {
                iter: k + 1,
                what: "non-finite iterate".into(),
            });
        }
        if let Some(kind) = record {
            trace.push(residual_with(y, &cons.project(&x), op, kind));
        }
    }
    Ok(ApOutcome { iterate: x, trace })
}

/// Hybrid input-output. Returns the final iterate and a residual trace with
/// `params.iters` entries.
pub fn hio_run(
    y: &[f64],
    op: &dyn LinearOperator,
    init: &RealImage,
    params: &HioParams,
    cons: &ConstraintSet,
) -> Result<(RealImage, Vec<f64>)> {
    params.validate()?;
    let out = run_ap(
        y,
        op,
        to_complex(init, op)?,
        params.iters,
        cons,
        ApMethod::Hio { beta: params.beta },
        Some(ResidualKind::Magnitude),
        &CgOptions::default(),
    )?;
    Ok((to_image(&out.iterate, init), out.trace))
}

/// Error reduction: violating pixels are set to zero.
pub fn er_run(
    y: &[f64],
    op: &dyn LinearOperator,
    init: &RealImage,
    iters: usize,
    cons: &ConstraintSet,
) -> Result<RealImage> {
    Ok(er_run_traced(y, op, init, iters, cons)?.0)
}

pub fn er_run_traced(
    y: &[f64],
    op: &dyn LinearOperator,
    init: &RealImage,
    iters: usize,
    cons: &ConstraintSet,
) -> Result<(RealImage, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::Config("ER needs at least one iteration".into()));
    }
    let out = run_ap(
        y,
        op,
        to_complex(init, op)?,
        iters,
        cons,
        ApMethod::Er,
        Some(ResidualKind::Magnitude),
        &CgOptions::default(),
    )?;
    Ok((to_image(&out.iterate, init), out.trace))
}

/// Gerchberg–Saxton style AP for an arbitrary operator: each iterate is
/// `A†{y ⊙ Ax_k/|Ax_k|}`, followed by the constraint projection when given.
pub fn ap_general_run_complex(
    y: &[f64],
    op: &dyn LinearOperator,
    init: Vec<Complex64>,
    iters: usize,
    cons: Option<&ConstraintSet>,
    cg: &CgOptions,
) -> Result<Vec<Complex64>> {
    check_measurements(y, op)?;
    if init.len() != op.in_dim() {
        return Err(Error::Shape("initial iterate length".into()));
    }
    if let Some(c) = cons {
        c.validate(op.in_dim())?;
    }
    let mut x = init;
    for k in 0..iters {
        let (u, _) = measurement_step(&x, y, op, cg)?;
        x = match cons {
            Some(c) => c.project(&u),
            None => u,
        };
        if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Divergence {
                iter: k + 1,
                what: "non-finite iterate".into(),
            });
        }
    }
    Ok(x)
}

pub fn ap_general_run(
    y: &[f64],
    op: &dyn LinearOperator,
    init: &RealImage,
    iters: usize,
    cons: Option<&ConstraintSet>,
) -> Result<RealImage> {
    let x = ap_general_run_complex(y, op, to_complex(init, op)?, iters, cons, &CgOptions::default())?;
    Ok(to_image(&x, init))
}

/// Uniform `[0, 1]` inside the support, zero outside.
pub fn random_start(len: usize, cons: &ConstraintSet, seed: u64, index: u64) -> Vec<Complex64> {
    let mut rng = stream(seed, StreamTag::RandomInit, index);
    (0..len)
        .map(|i| {
            let v: f64 = rng.random();
            if cons.inside(i) {
                Complex64::new(v, 0.0)
            } else {
                ZERO
            }
        })
        .collect()
}

/// Which iteration RandomInit runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSolver {
    Ap(ApMethod),
    /// General AP; `constrained` projects onto the constraint set every
    /// iteration instead of only at the end.
    General {
        constrained: bool,
    },
}

#[derive(Debug, Clone)]
pub struct RandomInitOutcome {
    /// Constraint-projected final reconstruction on the operator grid.
    pub estimate: Vec<Complex64>,
    /// Residual of `estimate`.
    pub residual: f64,
    pub candidate_residuals: Vec<f64>,
    pub chosen: usize,
}

impl RandomInitOutcome {
    pub fn image(&self, height: usize, width: usize) -> RealImage {
        RealImage {
            height,
            width,
            channels: 1,
            data: self.estimate.iter().map(|z| z.re).collect(),
            range: ValueRange::Unit,
        }
    }
}

/// Multi-start initialization: `num_inits` short runs from random starts, keep
/// the smallest residual, then one long run from it. Candidates run in
/// parallel; each draws from its own stream so results do not depend on
/// scheduling.
pub fn random_init_with(
    y: &[f64],
    op: &dyn LinearOperator,
    params: &RandomInitParams,
    cons: &ConstraintSet,
    solver: InitSolver,
    cg: &CgOptions,
) -> Result<RandomInitOutcome> {
    params.validate()?;
    check_measurements(y, op)?;
    cons.validate(op.in_dim())?;
    let n = op.in_dim();
    let run = |start: Vec<Complex64>, iters: usize| -> Result<Vec<Complex64>> {
        match solver {
            InitSolver::Ap(method) => Ok(run_ap(y, op, start, iters, cons, method, None, cg)?.iterate),
            InitSolver::General { constrained } => {
                ap_general_run_complex(y, op, start, iters, constrained.then_some(cons), cg)
            }
        }
    };
    let score = |x: &[Complex64]| residual_with(y, &cons.project(x), op, params.residual);

    let candidates: Vec<(Vec<Complex64>, f64)> = (0..params.num_inits)
        .into_par_iter()
        .map(|i| {
            let x = run(random_start(n, cons, params.seed, i as u64), params.short_iters)?;
            let r = score(&x);
            Ok((x, r))
        })
        .collect::<Result<_>>()?;
    let candidate_residuals: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let chosen = candidate_residuals
        .iter()
        .enumerate()
        .fold(0, |best, (i, &r)| if r < candidate_residuals[best] { i } else { best });
    let start = candidates.into_iter().nth(chosen).expect("non-empty").0;
    let last = run(start, params.final_iters)?;
    let estimate = cons.project(&last);
    let residual = residual_with(y, &estimate, op, ResidualKind::Magnitude);
    Ok(RandomInitOutcome {
        estimate,
        residual,
        candidate_residuals,
        chosen,
    })
}

/// RandomInit with HIO (β from `params`).
pub fn random_init(
    y: &[f64],
    op: &dyn LinearOperator,
    params: &RandomInitParams,
    cons: &ConstraintSet,
) -> Result<RandomInitOutcome> {
    random_init_with(
        y,
        op,
        params,
        cons,
        InitSolver::Ap(ApMethod::Hio { beta: params.beta }),
        &CgOptions::default(),
    )
}

/// Writes a residual trace as CSV with columns `iter,residual`.
pub fn write_residual_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "iter,residual")?;
    for (i, r) in trace.iter().enumerate() {
        writeln!(buf, "{},{:e}", i + 1, r)?;
    }
    write_atomic(path, &buf)
}
