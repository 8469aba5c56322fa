//! The `ddrmpr` command-line driver.
//!
//! Every flag has a key of the same name in the flat `key = value` config
//! file; precedence is manifest < config file < command line. Each run writes
//! `manifest.json` with the resolved configuration and SHA-256 digests of
//! its outputs, and `--from-manifest` re-executes it.
//!
//! Exit codes: 0 ok, 1 selftest failure, 2 input error, 3 denoiser
//! transport, 4 numerical divergence.

pub mod io;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use clap::parser::ValueSource;
use clap::{CommandFactory, FromArgMatches, Parser, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ddrm_pr::{
    grid_csv_bytes, grid_search, reconstruct_problem, ApMode, GridSpec, HioStart, PrPipelineConfig, PrProblem,
};
use crate::denoise::protocol::ServerInfo;
use crate::denoise::server::{serve_stdio, serve_tcp};
use crate::denoise::{DenoiserHandle, DenoiserKind};
use crate::eval::{aligned_scores, mean_row, metrics_csv_bytes, psnr_capped, ssim, AlignOptions, MetricRow};
use crate::field_ops::RealImage;
use crate::forward_model::{simulate_all_channels, Geometry, MeasurementSet};
use crate::linops::{make_fourier_operator, operator_from_id, LinearOperator};
use crate::{Error, Result};
use io::{file_name, load_grouped, read_image, Manifest, OutputSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFTEST: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Sample count for the statistics property of `--task selftest`.
const SELFTEST_DRAWS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Simulate,
    Hio,
    DdrmPr,
    DdrmPrGeneral,
    Evaluate,
    Gridsearch,
    Selftest,
    /// Serve a builtin denoiser over DNZ1 (stdio, or TCP with `--listen`).
    Serve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Flips and circular shifts, as for Fourier magnitudes.
    #[default]
    Fourier,
    /// Identity only, as for transmission matrices with nonnegativity.
    Dense,
    None,
}

#[derive(Debug, Parser)]
#[command(
    name = "ddrmpr",
    version,
    about = "Phase retrieval with alternating projections and diffusion priors"
)]
pub struct Args {
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Images (simulate, gridsearch, evaluate) or measurement stems/directories.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ground-truth images for evaluate, paired with --input in order.
    #[arg(long, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub factor: Option<usize>,
    /// Operator id for dense geometries, e.g. transmission:m=512:n=256:seed=3.
    #[arg(long)]
    pub operator: Option<String>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub eta_b: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub t_init: Option<usize>,
    #[arg(long)]
    pub n_avg: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// identity | gaussian[:w] | shrinkage[:c] | host:port | stdio:CMD
    #[arg(long, env = "DDRMPR_DENOISER")]
    pub denoiser: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub num_inits: Option<usize>,
    #[arg(long)]
    pub short_iters: Option<usize>,
    #[arg(long)]
    pub final_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub hio_start: Option<HioStartArg>,
    #[arg(long, value_enum)]
    pub ap_mode: Option<ApModeArg>,
    #[arg(long, value_enum)]
    pub align: Option<AlignMode>,
    /// Method label for evaluate rows.
    #[arg(long)]
    pub method: Option<String>,
    /// Address for `--task serve`; stdio when absent.
    #[arg(long)]
    pub listen: Option<String>,
    /// Flat `key = value` file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-executes the run recorded in a manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HioStartArg {
    Denoised,
    Iterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApModeArg {
    Hio,
    General,
}

/// Resolved settings of one invocation; serialized into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub input: Vec<PathBuf>,
    pub out: PathBuf,
    pub gt: Vec<PathBuf>,
    pub alpha: f64,
    pub factor: usize,
    pub operator: Option<String>,
    pub eta: Option<f64>,
    pub eta_b: Option<f64>,
    pub steps: Option<usize>,
    pub t_init: Option<usize>,
    pub n_avg: Option<usize>,
    pub seed: u64,
    pub denoiser: Option<String>,
    pub jobs: Option<usize>,
    pub beta: f64,
    pub inner_iters: usize,
    pub grid: Option<PathBuf>,
    pub num_inits: usize,
    pub short_iters: usize,
    pub final_iters: usize,
    pub hio_start: HioStart,
    pub ap_mode: ApMode,
    pub align: AlignMode,
    pub method: Option<String>,
    pub listen: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PrPipelineConfig::default();
        Self {
            task: None,
            input: Vec::new(),
            out: PathBuf::from("out"),
            gt: Vec::new(),
            alpha: 0.0,
            factor: 2,
            operator: None,
            eta: None,
            eta_b: None,
            steps: None,
            t_init: None,
            n_avg: None,
            seed: 0,
            denoiser: None,
            jobs: None,
            beta: p.hio_beta,
            inner_iters: p.hio_inner_iters,
            grid: None,
            num_inits: p.random_init.num_inits,
            short_iters: p.random_init.short_iters,
            final_iters: p.random_init.final_iters,
            hio_start: p.hio_start,
            ap_mode: p.ap_mode,
            align: AlignMode::Fourier,
            method: None,
            listen: None,
        }
    }
}

pub const DEFAULT_DENOISER: &str = "shrinkage";

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn paths(v: &str) -> Vec<PathBuf> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn value_enum<T: ValueEnum>(key: &str, v: &str) -> Result<T> {
    T::from_str(v.trim(), true).map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    /// Sets one key. Keys are flag names; `-` and `_` are interchangeable.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "task" => self.task = Some(value_enum(k, v)?),
            "input" => self.input = paths(v),
            "out" => self.out = PathBuf::from(v.trim()),
            "gt" => self.gt = paths(v),
            "alpha" => self.alpha = parse(k, v)?,
            "factor" => self.factor = parse(k, v)?,
            "operator" => self.operator = Some(v.trim().to_string()),
            "eta" => self.eta = Some(parse(k, v)?),
            "eta_b" => self.eta_b = Some(parse(k, v)?),
            "steps" => self.steps = Some(parse(k, v)?),
            "t_init" => self.t_init = Some(parse(k, v)?),
            "n_avg" => self.n_avg = Some(parse(k, v)?),
            "seed" => self.seed = parse(k, v)?,
            "denoiser" => self.denoiser = Some(v.trim().to_string()),
            "jobs" => self.jobs = Some(parse(k, v)?),
            "beta" => self.beta = parse(k, v)?,
            "inner_iters" => self.inner_iters = parse(k, v)?,
            "grid" => self.grid = Some(PathBuf::from(v.trim())),
            "num_inits" => self.num_inits = parse(k, v)?,
            "short_iters" => self.short_iters = parse(k, v)?,
            "final_iters" => self.final_iters = parse(k, v)?,
            "hio_start" => {
                self.hio_start = match value_enum::<HioStartArg>(k, v)? {
                    HioStartArg::Denoised => HioStart::Denoised,
                    HioStartArg::Iterate => HioStart::Iterate,
                }
            }
            "ap_mode" => {
                self.ap_mode = match value_enum::<ApModeArg>(k, v)? {
                    ApModeArg::Hio => ApMode::Hio,
                    ApModeArg::General => ApMode::General,
                }
            }
            "align" => self.align = value_enum(k, v)?,
            "method" => self.method = Some(v.trim().to_string()),
            "listen" => self.listen = Some(v.trim().to_string()),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// The flat file form; `apply_text` on a default config reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        let join = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        if let Some(t) = self.task {
            put("task", t.to_possible_value().expect("named").get_name().to_string());
        }
        if !self.input.is_empty() {
            put("input", join(&self.input));
        }
        put("out", self.out.display().to_string());
        if !self.gt.is_empty() {
            put("gt", join(&self.gt));
        }
        put("alpha", self.alpha.to_string());
        put("factor", self.factor.to_string());
        for (k, v) in [
            ("operator", self.operator.clone()),
            ("eta", self.eta.map(|v| v.to_string())),
            ("eta-b", self.eta_b.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("t-init", self.t_init.map(|v| v.to_string())),
            ("n-avg", self.n_avg.map(|v| v.to_string())),
        ] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        put("seed", self.seed.to_string());
        if let Some(d) = &self.denoiser {
            put("denoiser", d.clone());
        }
        if let Some(j) = self.jobs {
            put("jobs", j.to_string());
        }
        put("beta", self.beta.to_string());
        put("inner-iters", self.inner_iters.to_string());
        if let Some(g) = &self.grid {
            put("grid", g.display().to_string());
        }
        put("num-inits", self.num_inits.to_string());
        put("short-iters", self.short_iters.to_string());
        put("final-iters", self.final_iters.to_string());
        put(
            "hio-start",
            match self.hio_start {
                HioStart::Denoised => "denoised",
                HioStart::Iterate => "iterate",
            }
            .into(),
        );
        put(
            "ap-mode",
            match self.ap_mode {
                ApMode::Hio => "hio",
                ApMode::General => "general",
            }
            .into(),
        );
        put(
            "align",
            self.align.to_possible_value().expect("named").get_name().to_string(),
        );
        if let Some(m) = &self.method {
            put("method", m.clone());
        }
        if let Some(l) = &self.listen {
            put("listen", l.clone());
        }
        out
    }

    fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| Error::Config("no --task given".into()))
    }

    /// Pipeline settings with the task's reference defaults underneath.
    pub fn pipeline(&self) -> Result<PrPipelineConfig> {
        let mut p = match self.task {
            Some(Task::DdrmPrGeneral) => PrPipelineConfig::transmission_reference(),
            _ => PrPipelineConfig::fourier_reference(),
        };
        let s = &mut p.sampler;
        s.eta = self.eta.unwrap_or(s.eta);
        s.eta_b = self.eta_b.unwrap_or(s.eta_b);
        s.steps = self.steps.unwrap_or(s.steps);
        s.t_init = self.t_init.unwrap_or(s.t_init);
        s.n_avg = self.n_avg.unwrap_or(s.n_avg);
        s.seed = self.seed;
        p.hio_beta = self.beta;
        p.hio_inner_iters = self.inner_iters;
        p.random_init.beta = self.beta;
        p.random_init.seed = self.seed;
        p.random_init.num_inits = self.num_inits;
        p.random_init.short_iters = self.short_iters;
        p.random_init.final_iters = self.final_iters;
        p.hio_start = self.hio_start;
        p.ap_mode = self.ap_mode;
        p.validate()?;
        Ok(p)
    }

    /// Fills task-dependent defaults so the manifest is self-contained.
    pub fn resolve(mut self) -> Result<Self> {
        let task = self.task()?;
        if matches!(task, Task::DdrmPr | Task::DdrmPrGeneral | Task::Gridsearch) {
            let p = self.pipeline()?;
            self.eta = Some(p.sampler.eta);
            self.eta_b = Some(p.sampler.eta_b);
            self.steps = Some(p.sampler.steps);
            self.t_init = Some(p.sampler.t_init);
            self.n_avg = Some(p.sampler.n_avg);
        }
        if matches!(
            task,
            Task::DdrmPr | Task::DdrmPrGeneral | Task::Gridsearch | Task::Serve
        ) && self.denoiser.is_none()
        {
            self.denoiser = Some(DEFAULT_DENOISER.into());
        }
        Ok(self)
    }

    fn denoiser(&self) -> Result<DenoiserHandle> {
        DenoiserHandle::from_spec(self.denoiser.as_deref().unwrap_or(DEFAULT_DENOISER))
    }
}

/// Maps an error to its stable exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Transport { .. } | Error::Protocol(_) => EXIT_TRANSPORT,
        Error::Divergence { .. } | Error::Convergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

/// Builds the run configuration: manifest, then config file, then flags.
/// Returns the config and the manifest it was loaded from, if any.
pub fn config_from_args<I, T>(argv: I) -> std::result::Result<(RunConfig, Option<Manifest>), clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Args::command().try_get_matches_from(argv)?;
    let args = Args::from_arg_matches(&matches)?;
    let to_clap = |e: Error| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n"));
    let mut cfg = RunConfig::default();
    let mut previous = None;
    if let Some(p) = &args.from_manifest {
        let m = Manifest::load(p).map_err(to_clap)?;
        cfg = m.config.clone();
        previous = Some(m);
    }
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| to_clap(e.into()))?;
        cfg.apply_text(&text).map_err(to_clap)?;
    }
    let mut from_env = None;
    for arg in Args::command().get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(id, "config" | "from_manifest") {
            continue;
        }
        let Ok(Some(raw)) = matches.try_get_raw(id) else {
            continue;
        };
        let joined = raw
            .map(|s| s.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(",");
        match matches.value_source(id) {
            Some(ValueSource::CommandLine) => cfg.set(id, &joined).map_err(to_clap)?,
            Some(ValueSource::EnvVariable) => from_env = Some(joined),
            _ => {}
        }
    }
    if cfg.denoiser.is_none() {
        cfg.denoiser = from_env;
    }
    Ok((cfg, previous))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (cfg, previous) = match config_from_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(j) = cfg.jobs {
        // Ignored if a pool already exists (e.g. when called from tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    match run(cfg) {
        Ok((code, manifest)) => {
            if let (Some(old), Some(new)) = (previous, manifest) {
                let bad = old.mismatches(&new);
                let hashed = old.outputs.iter().filter(|r| r.sha256.is_some()).count();
                if bad.is_empty() {
                    eprintln!("reproduced {hashed}/{hashed} hashed outputs");
                } else {
                    eprintln!("outputs differ from the manifest: {}", bad.join(", "));
                }
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one resolved task. Returns the exit code and, for tasks that write
/// files, the manifest.
pub fn run(cfg: RunConfig) -> Result<(i32, Option<Manifest>)> {
    let cfg = cfg.resolve()?;
    match cfg.task()? {
        Task::Selftest => Ok((cmd_selftest(&cfg), None)),
        Task::Serve => cmd_serve(&cfg).map(|_| (EXIT_OK, None)),
        task => {
            let mut outs = OutputSet::new(&cfg.out)?;
            let items = match task {
                Task::Simulate => cmd_simulate(&cfg, &mut outs)?,
                Task::Hio | Task::DdrmPr | Task::DdrmPrGeneral => cmd_reconstruct(&cfg, &mut outs)?,
                Task::Evaluate => cmd_evaluate(&cfg, &mut outs)?,
                Task::Gridsearch => cmd_gridsearch(&cfg, &mut outs)?,
                Task::Selftest | Task::Serve => unreachable!(),
            };
            let manifest = Manifest {
                tool: "ddrmpr".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: cfg.clone(),
                outputs: outs.records,
                items,
            };
            manifest.save(&cfg.out)?;
            Ok((EXIT_OK, Some(manifest)))
        }
    }
}

type Items = BTreeMap<String, serde_json::Value>;

fn require_inputs(cfg: &RunConfig) -> Result<()> {
    if cfg.input.is_empty() {
        return Err(Error::Argument("no --input given".into()));
    }
    Ok(())
}

fn measure_image(img: &RealImage, cfg: &RunConfig) -> Result<Vec<MeasurementSet>> {
    match &cfg.operator {
        Some(id) => {
            let op = operator_from_id(id)?;
            if img.plane_len() != op.in_dim() {
                return Err(Error::Shape(format!(
                    "{}x{} image for an operator with {} inputs",
                    img.height,
                    img.width,
                    op.in_dim()
                )));
            }
            let geometry = Geometry::Dense {
                m: op.out_dim(),
                n: op.in_dim(),
            };
            simulate_all_channels(img, op.as_ref(), geometry, cfg.alpha, cfg.seed)
        }
        None => {
            if img.height != img.width {
                return Err(Error::Shape(format!(
                    "Fourier geometry needs a square image, got {}x{}",
                    img.height, img.width
                )));
            }
            let op = make_fourier_operator(img.height, cfg.factor)?;
            let geometry = Geometry::Fourier {
                n_side: img.height,
                factor: cfg.factor,
            };
            simulate_all_channels(img, &op, geometry, cfg.alpha, cfg.seed)
        }
    }
}

fn cmd_simulate(cfg: &RunConfig, outs: &mut OutputSet) -> Result<Items> {
    require_inputs(cfg)?;
    let mut items = Items::new();
    for path in &cfg.input {
        let img = read_image(path)?;
        let name = file_name(path);
        let sets = measure_image(&img, cfg)?;
        for (c, m) in sets.iter().enumerate() {
            outs.write_measurement(&format!("{name}_c{c}"), m)?;
        }
        items.insert(
            name,
            json!({
                "channels": sets.len(),
                "alpha": cfg.alpha,
                "seed": cfg.seed,
                "geometry": sets[0].meta.geometry,
                "clamped": sets.iter().map(|m| m.meta.clamped).collect::<Vec<_>>(),
            }),
        );
    }
    Ok(items)
}

fn build_problem(task: Task, ys: &[MeasurementSet], p: &PrPipelineConfig) -> Result<PrProblem> {
    match (task, ys[0].meta.geometry) {
        (_, Geometry::Fourier { .. }) => PrProblem::fourier(ys, p),
        (Task::DdrmPr, Geometry::Dense { .. }) => Err(Error::Argument(
            "ddrm-pr needs Fourier measurements; use ddrm-pr-general for dense operators".into(),
        )),
        (_, Geometry::Dense { .. }) => {
            let op: Arc<dyn LinearOperator> = Arc::from(operator_from_id(&ys[0].meta.operator_id)?);
            PrProblem::general(ys, op, p)
        }
    }
}

fn cmd_reconstruct(cfg: &RunConfig, outs: &mut OutputSet) -> Result<Items> {
    require_inputs(cfg)?;
    let task = cfg.task()?;
    let p = cfg.pipeline()?;
    let groups = load_grouped(&cfg.input)?;
    let den = if task == Task::Hio { None } else { Some(cfg.denoiser()?) };
    let results: Vec<(String, RealImage, serde_json::Value)> = groups
        .par_iter()
        .map(|(name, ys)| {
            let problem = build_problem(task, ys, &p)?;
            let norms: Vec<f64> = ys.iter().map(|m| m.norm().max(f64::MIN_POSITIVE)).collect();
            let rel = |r: &[f64]| r.iter().zip(&norms).map(|(r, n)| r / n).collect::<Vec<_>>();
            let init_rel = rel(problem.init_residuals());
            let (image, sampler) = match &den {
                None => (problem.init().clone().clamp_to_range(), serde_json::Value::Null),
                Some(d) => {
                    let out = reconstruct_problem(&problem, &p, d)?;
                    (out.image, serde_json::to_value(&out.manifest)?)
                }
            };
            let residuals = problem.residuals(&image)?;
            let detail = json!({
                "channels": ys.len(),
                "residual": residuals,
                "residual_rel": rel(&residuals),
                "init_residual_rel": init_rel,
                "sampler": sampler,
            });
            Ok((name.clone(), image, detail))
        })
        .collect::<Result<_>>()?;
    let mut items = Items::new();
    for (name, image, detail) in results {
        outs.write_image(&name, &image)?;
        items.insert(name, detail);
    }
    Ok(items)
}

fn align_options(mode: AlignMode) -> Option<AlignOptions> {
    match mode {
        AlignMode::Fourier => Some(AlignOptions::default()),
        AlignMode::Dense => Some(AlignOptions {
            translations: false,
            sign_search: false,
        }),
        AlignMode::None => None,
    }
}

fn cmd_evaluate(cfg: &RunConfig, outs: &mut OutputSet) -> Result<Items> {
    require_inputs(cfg)?;
    if cfg.input.len() != cfg.gt.len() {
        return Err(Error::Argument(format!(
            "{} reconstructions but {} ground truths",
            cfg.input.len(),
            cfg.gt.len()
        )));
    }
    let method = cfg.method.clone().unwrap_or_else(|| "recon".into());
    let mut rows = Vec::new();
    for (rp, gp) in cfg.input.iter().zip(&cfg.gt) {
        let (recon, gt) = (read_image(rp)?, read_image(gp)?);
        if !recon.same_shape(&gt) {
            return Err(Error::Shape(format!(
                "{} is {}x{}x{}, {} is {}x{}x{}",
                rp.display(),
                recon.height,
                recon.width,
                recon.channels,
                gp.display(),
                gt.height,
                gt.width,
                gt.channels
            )));
        }
        let (psnr, ssim_v, al) = match align_options(cfg.align) {
            Some(opts) => {
                let (p, s, al) = aligned_scores(&recon, &gt, opts)?;
                (p, s, Some(al))
            }
            None => (psnr_capped(&recon, &gt, 1.0)?, ssim(&recon, &gt).ok(), None),
        };
        rows.push(MetricRow {
            image_id: file_name(rp),
            method: method.clone(),
            alpha: cfg.alpha,
            psnr,
            ssim: ssim_v,
            flipped: al.is_some_and(|a| a.flipped),
            dy: al.map_or(0, |a| a.shift.0),
            dx: al.map_or(0, |a| a.shift.1),
        });
    }
    let mean = mean_row(&rows, &method).expect("non-empty");
    for r in rows.iter().chain(std::iter::once(&mean)) {
        let s = r.ssim.map_or("-".to_string(), |s| format!("{s:.4}"));
        println!("{:<24} {:<12} PSNR {:>7.3} dB  SSIM {s}", r.image_id, r.method, r.psnr);
    }
    rows.push(mean.clone());
    outs.write("metrics.csv", &metrics_csv_bytes(&rows)?)?;
    let mut items = Items::new();
    items.insert("mean".into(), json!({ "psnr": mean.psnr, "ssim": mean.ssim }));
    Ok(items)
}

fn cmd_gridsearch(cfg: &RunConfig, outs: &mut OutputSet) -> Result<Items> {
    require_inputs(cfg)?;
    let base = cfg.pipeline()?;
    let grid = match &cfg.grid {
        Some(p) => GridSpec::parse(&std::fs::read_to_string(p)?, &base.sampler)?,
        None => GridSpec::single(&base.sampler),
    };
    let val = cfg
        .input
        .iter()
        .map(|p| {
            let img = read_image(p)?;
            let ys = measure_image(
                &img,
                &RunConfig {
                    operator: None,
                    ..cfg.clone()
                },
            )?;
            Ok((img, ys))
        })
        .collect::<Result<Vec<_>>>()?;
    let den = cfg.denoiser()?;
    let (best, rows) = grid_search(&grid, &val, &base, &den)?;
    for r in &rows {
        match (&r.error, r.mean_psnr) {
            (Some(e), _) => println!("cell {:>3}: failed ({e})", r.cell),
            (None, Some(p)) => println!(
                "cell {:>3}: eta {} eta_b {} steps {} t_init {} n_avg {} -> {p:.3} dB",
                r.cell, r.eta, r.eta_b, r.steps, r.t_init, r.n_avg
            ),
            _ => {}
        }
    }
    // The table carries wall-clock times, so it is not hashed.
    outs.write_with("grid.csv", &grid_csv_bytes(&rows)?, false)?;
    let s = &best.sampler;
    let best_cfg = RunConfig {
        task: Some(Task::DdrmPr),
        input: Vec::new(),
        grid: None,
        eta: Some(s.eta),
        eta_b: Some(s.eta_b),
        steps: Some(s.steps),
        t_init: Some(s.t_init),
        n_avg: Some(s.n_avg),
        ..cfg.clone()
    };
    outs.write("best.conf", best_cfg.to_text().as_bytes())?;
    println!(
        "best: eta {} eta_b {} steps {} t_init {} n_avg {}",
        s.eta, s.eta_b, s.steps, s.t_init, s.n_avg
    );
    let mut items = Items::new();
    items.insert("best".into(), serde_json::to_value(s)?);
    items.insert("cells".into(), json!(rows.len()));
    Ok(items)
}

fn cmd_selftest(cfg: &RunConfig) -> i32 {
    let checks = crate::selftest::run_all(cfg.seed, SELFTEST_DRAWS);
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        println!("all {} properties pass", checks.len());
        EXIT_OK
    } else {
        eprintln!("failing: {}", failed.join(", "));
        EXIT_SELFTEST
    }
}

fn cmd_serve(cfg: &RunConfig) -> Result<()> {
    let den = cfg.denoiser()?;
    if matches!(den.kind, DenoiserKind::Remote(_)) {
        return Err(Error::Config("serve needs a builtin denoiser".into()));
    }
    let info = ServerInfo {
        model_id: den.id.clone(),
        geometry: den.geometry,
        schedule_t: Some(
            cfg.pipeline()
                .map(|p| p.schedule.t_max)
                .unwrap_or(crate::ddrm_core::DEFAULT_T),
        ),
    };
    match &cfg.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("serving {} on {}", info.model_id, listener.local_addr()?);
            serve_tcp(listener, Arc::new(den), info)
        }
        None => serve_stdio(&den, &info),
    }
}

/// Convenience for tests and examples: runs with string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    main_with(std::iter::once("ddrmpr").chain(args.iter().copied()))
}
