//! The denoiser boundary `f_θ(x_t, t, σ_t) → x̂0`.
//!
//! Inputs are variance-preserving iterates `x̃_t = √α_t x_t` in the symmetric
//! range; outputs are clean-image estimates in `[-1, 1]`. Builtin denoisers
//! work channel by channel and are deterministic. Out-of-process models are
//! reached through the DNZ1 protocol ([`protocol`], [`remote`]).

pub mod protocol;
pub mod remote;
pub mod server;

use serde::{Deserialize, Serialize};

use crate::field_ops::{RealImage, ValueRange};
use crate::{Error, Result};

pub use remote::RemoteDenoiser;

/// Tolerance on `α_t (1 + σ_t²) = 1`.
const SCHEDULE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseRequest {
    /// Noisy iterate in VP coordinates.
    pub x_t: RealImage,
    pub t_index: usize,
    pub sigma_t: f64,
    pub alpha_t: f64,
}

impl DenoiseRequest {
    pub fn new(x_t: RealImage, t_index: usize, sigma_t: f64) -> Self {
        Self {
            x_t,
            t_index,
            sigma_t,
            alpha_t: 1.0 / (1.0 + sigma_t * sigma_t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t >= 0.0) || !(self.alpha_t > 0.0 && self.alpha_t <= 1.0) {
            return Err(Error::Argument(format!(
                "σ_t = {}, α_t = {} out of range",
                self.sigma_t, self.alpha_t
            )));
        }
        let lhs = self.alpha_t * (1.0 + self.sigma_t * self.sigma_t);
        if (lhs - 1.0).abs() > SCHEDULE_TOL {
            return Err(Error::Argument(format!("α_t (1 + σ_t²) = {lhs}, expected 1")));
        }
        if self.x_t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite denoiser input".into()));
        }
        Ok(())
    }

    /// The iterate rescaled to `x0 + σ_t ε` coordinates.
    fn variance_exploding(&self) -> RealImage {
        let s = 1.0 / self.alpha_t.sqrt();
        self.x_t.map(|v| v * s)
    }
}

/// Anything that maps a noisy iterate to a clean estimate.
pub trait Denoiser: Send + Sync {
    fn id(&self) -> String;

    /// Channel count the model expects, if fixed.
    fn channels(&self) -> Option<usize> {
        None
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<RealImage>;

    /// Equivalent to mapping [`Denoiser::denoise`]; any failure fails the batch.
    fn denoise_batch(&self, reqs: &[DenoiseRequest]) -> Result<Vec<RealImage>> {
        reqs.iter().map(|r| self.denoise(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub enum DenoiserKind {
    Identity,
    /// Circular Gaussian blur of width `width_per_sigma · σ_t` pixels.
    Gaussian {
        width_per_sigma: f64,
    },
    /// Cycle-spun Haar soft thresholding at `threshold_scale · σ_t`.
    Shrinkage {
        threshold_scale: f64,
        max_levels: usize,
    },
    /// Returns the stored clean image (symmetric range) regardless of input.
    Oracle {
        truth: RealImage,
    },
    Remote(RemoteDenoiser),
}

#[derive(Debug, Clone)]
pub struct DenoiserHandle {
    pub id: String,
    pub kind: DenoiserKind,
    pub geometry: Option<Geometry>,
}

pub const DEFAULT_GAUSSIAN_WIDTH: f64 = 4.0;
pub const DEFAULT_SHRINK_THRESHOLD: f64 = 1.0;
pub const DEFAULT_SHRINK_LEVELS: usize = 3;

impl DenoiserHandle {
    pub fn identity() -> Self {
        Self {
            id: "identity".into(),
            kind: DenoiserKind::Identity,
            geometry: None,
        }
    }

    pub fn gaussian(width_per_sigma: f64) -> Self {
        Self {
            id: format!("gaussian:{width_per_sigma}"),
            kind: DenoiserKind::Gaussian { width_per_sigma },
            geometry: None,
        }
    }

    pub fn shrinkage(threshold_scale: f64) -> Self {
        Self {
            id: format!("shrinkage:{threshold_scale}"),
            kind: DenoiserKind::Shrinkage {
                threshold_scale,
                max_levels: DEFAULT_SHRINK_LEVELS,
            },
            geometry: None,
        }
    }

    /// Ground-truth oracle for validating fixed points. Only available in
    /// debug builds or with the `oracle` feature.
    pub fn oracle(truth: &RealImage) -> Result<Self> {
        if !(cfg!(debug_assertions) || cfg!(feature = "oracle")) {
            return Err(Error::Config(
                "the oracle denoiser is only available in test builds".into(),
            ));
        }
        let truth = match truth.range {
            ValueRange::Unit => truth.to_vp(),
            ValueRange::Symmetric => truth.clone(),
        };
        Ok(Self {
            id: "oracle".into(),
            geometry: Some(Geometry {
                height: truth.height,
                width: truth.width,
                channels: truth.channels,
            }),
            kind: DenoiserKind::Oracle { truth },
        })
    }

    pub fn remote(client: RemoteDenoiser) -> Self {
        Self {
            id: format!("remote:{}", client.endpoint()),
            geometry: client.geometry(),
            kind: DenoiserKind::Remote(client),
        }
    }

    /// Parses `identity`, `gaussian[:w]`, `shrinkage[:c]`, `host:port`,
    /// `tcp:host:port` or `stdio:CMD`.
    pub fn from_spec(spec: &str) -> Result<Self> {
        let (head, rest) = match spec.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (spec, None),
        };
        let num = |r: Option<&str>, default: f64| -> Result<f64> {
            r.map_or(Ok(default), |s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad denoiser parameter in `{spec}`")))
            })
        };
        match head {
            "identity" => Ok(Self::identity()),
            "gaussian" => Ok(Self::gaussian(num(rest, DEFAULT_GAUSSIAN_WIDTH)?)),
            "shrinkage" => Ok(Self::shrinkage(num(rest, DEFAULT_SHRINK_THRESHOLD)?)),
            "stdio" => {
                Ok(Self::remote(RemoteDenoiser::spawn_stdio(rest.ok_or_else(|| {
                    Error::Config("stdio denoiser needs a command".into())
                })?)?))
            }
            "tcp" => {
                Ok(Self::remote(RemoteDenoiser::connect_tcp(rest.ok_or_else(|| {
                    Error::Config("tcp denoiser needs host:port".into())
                })?)?))
            }
            _ if rest.is_some_and(|r| r.parse::<u16>().is_ok()) => Ok(Self::remote(RemoteDenoiser::connect_tcp(spec)?)),
            _ => Err(Error::Config(format!("unknown denoiser `{spec}`"))),
        }
    }
}

impl Denoiser for DenoiserHandle {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn channels(&self) -> Option<usize> {
        self.geometry.map(|g| g.channels)
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<RealImage> {
        req.validate()?;
        if let Some(g) = self.geometry {
            let x = &req.x_t;
            if (x.height, x.width, x.channels) != (g.height, g.width, g.channels) {
                return Err(Error::Protocol(format!(
                    "request {}x{}x{} does not match denoiser geometry {}x{}x{}",
                    x.height, x.width, x.channels, g.height, g.width, g.channels
                )));
            }
        }
        let out = match &self.kind {
            DenoiserKind::Identity => req.x_t.clone(),
            DenoiserKind::Gaussian { width_per_sigma } => {
                let width = width_per_sigma * req.sigma_t;
                per_channel(&req.variance_exploding(), |p, h, w| gaussian_blur(p, h, w, width))
            }
            DenoiserKind::Shrinkage {
                threshold_scale,
                max_levels,
            } => {
                let thr = threshold_scale * req.sigma_t;
                per_channel(&req.variance_exploding(), |p, h, w| {
                    haar_shrink(p, h, w, thr, *max_levels)
                })
            }
            DenoiserKind::Oracle { truth } => {
                if !truth.same_shape(&req.x_t) {
                    return Err(Error::Protocol("oracle truth shape differs from request".into()));
                }
                truth.clone()
            }
            DenoiserKind::Remote(client) => client.denoise(req)?,
        };
        finish(out, &req.x_t)
    }

    fn denoise_batch(&self, reqs: &[DenoiseRequest]) -> Result<Vec<RealImage>> {
        match &self.kind {
            DenoiserKind::Remote(client) => {
                for r in reqs {
                    r.validate()?;
                }
                client
                    .denoise_batch(reqs)?
                    .into_iter()
                    .zip(reqs)
                    .map(|(out, r)| finish(out, &r.x_t))
                    .collect()
            }
            _ => reqs.iter().map(|r| self.denoise(r)).collect(),
        }
    }
}

/// Shape check, finiteness and clamping to `[-1, 1]`.
fn finish(out: RealImage, input: &RealImage) -> Result<RealImage> {
    if !out.same_shape(input) {
        return Err(Error::Protocol(format!(
            "denoiser returned {}x{}x{} for a {}x{}x{} input",
            out.height, out.width, out.channels, input.height, input.width, input.channels
        )));
    }
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("denoiser returned non-finite values".into()));
    }
    Ok(RealImage {
        range: ValueRange::Symmetric,
        ..out
    }
    .clamp_to_range())
}

fn per_channel(img: &RealImage, f: impl Fn(&[f64], usize, usize) -> Vec<f64>) -> RealImage {
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = f(img.plane(c), img.height, img.width);
        out.plane_mut(c).copy_from_slice(&plane);
    }
    out
}

/// Runs `den` on an image whose channel count may differ from the model's.
/// Grayscale inputs to a 3-channel model are replicated, and the three output
/// channels averaged back.
pub fn denoise_adapted(den: &dyn Denoiser, req: &DenoiseRequest) -> Result<RealImage> {
    match (den.channels(), req.x_t.channels) {
        (Some(3), 1) => {
            let x = &req.x_t;
            let rgb = RealImage::from_channels(&[x.clone(), x.clone(), x.clone()])?;
            let out = den.denoise(&DenoiseRequest {
                x_t: rgb,
                ..req.clone()
            })?;
            let n = out.plane_len();
            let data = (0..n)
                .map(|i| (out.data[i] + out.data[n + i] + out.data[2 * n + i]) / 3.0)
                .collect();
            RealImage::from_vec(x.height, x.width, 1, data, ValueRange::Symmetric)
        }
        _ => den.denoise(req),
    }
}

/// Separable circular Gaussian blur with standard deviation `width` pixels.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, width: f64) -> Vec<f64> {
    if !(width > 0.0) {
        return plane.to_vec();
    }
    let rows = blur_axis(plane, h, w, width, true);
    blur_axis(&rows, h, w, width, false)
}

/// Circular kernel of length `len`: weight per offset modulo `len`.
fn circular_kernel(len: usize, width: f64) -> Vec<f64> {
    let radius = ((4.0 * width).ceil() as usize).min(4 * len);
    let mut k = vec![0.0; len];
    for d in -(radius as isize)..=(radius as isize) {
        let wgt = (-(d * d) as f64 / (2.0 * width * width)).exp();
        k[d.rem_euclid(len as isize) as usize] += wgt;
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn blur_axis(plane: &[f64], h: usize, w: usize, width: f64, along_rows: bool) -> Vec<f64> {
    let len = if along_rows { w } else { h };
    let k = circular_kernel(len, width);
    let taps: Vec<(usize, f64)> = k.iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for &(d, wgt) in &taps {
                let v = if along_rows {
                    plane[r * w + (c + w - d) % w]
                } else {
                    plane[((r + h - d) % h) * w + c]
                };
                acc += wgt * v;
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn roll(plane: &[f64], h: usize, w: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[((r + dy) % h) * w + (c + dx) % w] = plane[r * w + c];
        }
    }
    out
}

fn haar_levels(h: usize, w: usize, max_levels: usize) -> usize {
    let mut l = 0;
    while l < max_levels && h.is_multiple_of(2 << l) && w.is_multiple_of(2 << l) {
        l += 1;
    }
    l
}

/// One orthonormal 2-D Haar level on the top-left `h x w` block of a
/// `stride`-wide buffer.
fn haar_forward(buf: &mut [f64], stride: usize, h: usize, w: usize) {
    let mut tmp = vec![0.0; h * w];
    let (h2, w2) = (h / 2, w / 2);
    for i in 0..h2 {
        for j in 0..w2 {
            let a = buf[2 * i * stride + 2 * j];
            let b = buf[2 * i * stride + 2 * j + 1];
            let c = buf[(2 * i + 1) * stride + 2 * j];
            let d = buf[(2 * i + 1) * stride + 2 * j + 1];
            tmp[i * w + j] = (a + b + c + d) / 2.0;
            tmp[i * w + w2 + j] = (a - b + c - d) / 2.0;
            tmp[(h2 + i) * w + j] = (a + b - c - d) / 2.0;
            tmp[(h2 + i) * w + w2 + j] = (a - b - c + d) / 2.0;
        }
    }
    for r in 0..h {
        buf[r * stride..r * stride + w].copy_from_slice(&tmp[r * w..(r + 1) * w]);
    }
}

fn haar_inverse(buf: &mut [f64], stride: usize, h: usize, w: usize) {
    let mut tmp = vec![0.0; h * w];
    let (h2, w2) = (h / 2, w / 2);
    for i in 0..h2 {
        for j in 0..w2 {
            let ll = buf[i * stride + j];
            let lh = buf[i * stride + w2 + j];
            let hl = buf[(h2 + i) * stride + j];
            let hh = buf[(h2 + i) * stride + w2 + j];
            tmp[2 * i * w + 2 * j] = (ll + lh + hl + hh) / 2.0;
            tmp[2 * i * w + 2 * j + 1] = (ll - lh + hl - hh) / 2.0;
            tmp[(2 * i + 1) * w + 2 * j] = (ll + lh - hl - hh) / 2.0;
            tmp[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) / 2.0;
        }
    }
    for r in 0..h {
        buf[r * stride..r * stride + w].copy_from_slice(&tmp[r * w..(r + 1) * w]);
    }
}

fn soft(v: f64, thr: f64) -> f64 {
    v.signum() * (v.abs() - thr).max(0.0)
}

/// Haar soft thresholding averaged over every cyclic shift of the dyadic
/// block grid, which makes it exactly equivariant to circular shifts. Grids
/// with an odd side get no decomposition and pass through unchanged.
pub fn haar_shrink(plane: &[f64], h: usize, w: usize, thr: f64, max_levels: usize) -> Vec<f64> {
    let levels = haar_levels(h, w, max_levels);
    if levels == 0 || !(thr > 0.0) {
        return plane.to_vec();
    }
    let period = 1usize << levels;
    let mut acc = vec![0.0; h * w];
    for dy in 0..period {
        for dx in 0..period {
            let mut buf = roll(plane, h, w, h - dy, w - dx);
            for l in 0..levels {
                haar_forward(&mut buf, w, h >> l, w >> l);
            }
            let (ch, cw) = (h >> levels, w >> levels);
            for r in 0..h {
                for c in 0..w {
                    if r >= ch || c >= cw {
                        buf[r * w + c] = soft(buf[r * w + c], thr);
                    }
                }
            }
            for l in (0..levels).rev() {
                haar_inverse(&mut buf, w, h >> l, w >> l);
            }
            let back = roll(&buf, h, w, dy, dx);
            acc.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
    }
    let norm = (period * period) as f64;
    acc.iter_mut().for_each(|v| *v /= norm);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream, StreamTag};

    fn smooth(h: usize, w: usize) -> RealImage {
        let data = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                0.6 * (r * 0.3).sin() * (c * 0.2).cos()
            })
            .collect();
        RealImage::from_vec(h, w, 1, data, ValueRange::Symmetric).unwrap()
    }

    fn noisy_request(x0: &RealImage, sigma: f64, seed: u64) -> DenoiseRequest {
        let mut rng = stream(seed, StreamTag::Fixture, 0);
        let eps = normal_vec(&mut rng, x0.data.len());
        let alpha = 1.0 / (1.0 + sigma * sigma);
        let data = x0
            .data
            .iter()
            .zip(&eps)
            .map(|(x, e)| alpha.sqrt() * (x + sigma * e))
            .collect();
        DenoiseRequest::new(
            RealImage::from_vec(x0.height, x0.width, x0.channels, data, ValueRange::Symmetric).unwrap(),
            10,
            sigma,
        )
    }

    fn mse(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
    }

    fn shift_img(img: &RealImage, dy: usize, dx: usize) -> RealImage {
        RealImage {
            data: roll(&img.data, img.height, img.width, dy, dx),
            ..img.clone()
        }
    }

    #[test]
    fn identity_clamps() {
        let x = RealImage::from_vec(1, 3, 1, vec![-2.0, 0.5, 1.5], ValueRange::Symmetric).unwrap();
        let out = DenoiserHandle::identity()
            .denoise(&DenoiseRequest::new(x, 0, 0.0))
            .unwrap();
        assert_eq!(out.data, vec![-1.0, 0.5, 1.0]);
    }

    #[test]
    fn oracle_ignores_input() {
        let truth = smooth(4, 4);
        let h = DenoiserHandle::oracle(&truth).unwrap();
        let out = h.denoise(&noisy_request(&truth, 0.5, 1)).unwrap();
        assert_eq!(out, truth);
    }

    #[test]
    fn gaussian_and_shrinkage_reduce_error() {
        let x0 = smooth(16, 16);
        for den in [
            DenoiserHandle::gaussian(DEFAULT_GAUSSIAN_WIDTH),
            DenoiserHandle::shrinkage(1.0),
        ] {
            for sigma in [0.1, 0.5] {
                let mut wins = 0;
                for seed in 0..20 {
                    let req = noisy_request(&x0, sigma, seed);
                    let input_mse = mse(&req.variance_exploding().data, &x0.data);
                    let out = den.denoise(&req).unwrap();
                    if mse(&out.data, &x0.data) < input_mse {
                        wins += 1;
                    }
                }
                assert_eq!(wins, 20, "{} at σ={sigma}", den.id);
            }
        }
    }

    #[test]
    fn builtins_are_shift_equivariant() {
        let mut rng = stream(3, StreamTag::Fixture, 0);
        let x = RealImage::from_vec(16, 8, 1, normal_vec(&mut rng, 128), ValueRange::Symmetric)
            .unwrap()
            .map(|v| 0.3 * v);
        let req = DenoiseRequest::new(x.clone(), 3, 0.4);
        for den in [
            DenoiserHandle::identity(),
            DenoiserHandle::gaussian(2.0),
            DenoiserHandle::shrinkage(0.5),
        ] {
            let base = den.denoise(&req).unwrap();
            for &(dy, dx) in &[(1, 0), (3, 5), (7, 2)] {
                let shifted = den
                    .denoise(&DenoiseRequest::new(shift_img(&x, dy, dx), 3, 0.4))
                    .unwrap();
                let expect = shift_img(&base, dy, dx);
                let err = shifted
                    .data
                    .iter()
                    .zip(&expect.data)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-10, "{} shift ({dy},{dx}) err {err}", den.id);
            }
        }
    }

    #[test]
    fn haar_is_orthonormal() {
        let mut rng = stream(4, StreamTag::Fixture, 0);
        let plane = normal_vec(&mut rng, 64);
        let mut buf = plane.clone();
        haar_forward(&mut buf, 8, 8, 8);
        haar_forward(&mut buf, 8, 4, 4);
        let e0: f64 = plane.iter().map(|v| v * v).sum();
        let e1: f64 = buf.iter().map(|v| v * v).sum();
        assert!((e0 - e1).abs() < 1e-12 * e0);
        haar_inverse(&mut buf, 8, 4, 4);
        haar_inverse(&mut buf, 8, 8, 8);
        assert!(buf.iter().zip(&plane).all(|(a, b)| (a - b).abs() < 1e-12));
        // zero threshold is the identity
        assert_eq!(haar_shrink(&plane, 8, 8, 0.0, 3), plane);
    }

    #[test]
    fn deterministic_and_batch_equivalent() {
        let x0 = smooth(8, 8);
        let den = DenoiserHandle::shrinkage(1.0);
        let req = noisy_request(&x0, 0.3, 9);
        let single = den.denoise(&req).unwrap();
        let batch = den.denoise_batch(&vec![req.clone(); 4]).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|b| b.data == single.data));
        assert!(den.denoise_batch(&[]).unwrap().is_empty());
        assert_eq!(den.denoise_batch(std::slice::from_ref(&req)).unwrap()[0], single);
    }

    #[test]
    fn rejects_inconsistent_schedule_values() {
        let mut req = DenoiseRequest::new(smooth(2, 2), 0, 1.0);
        req.alpha_t = 0.7;
        assert!(DenoiserHandle::identity().denoise(&req).is_err());
    }

    #[test]
    fn oracle_rejects_wrong_shape() {
        let h = DenoiserHandle::oracle(&smooth(4, 4)).unwrap();
        assert!(matches!(
            h.denoise(&DenoiseRequest::new(smooth(2, 2), 0, 0.1)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn gray_input_to_rgb_model_is_replicated_then_averaged() {
        let truth = smooth(4, 4);
        let rgb = RealImage::from_channels(&[truth.clone(), truth.map(|v| v * 0.5), truth.map(|v| -v)]).unwrap();
        let h = DenoiserHandle::oracle(&rgb).unwrap();
        let out = denoise_adapted(&h, &DenoiseRequest::new(truth.clone(), 0, 0.1)).unwrap();
        for (o, t) in out.data.iter().zip(&truth.data) {
            assert!((o - t * 0.5 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parses_specs() {
        assert_eq!(DenoiserHandle::from_spec("identity").unwrap().id, "identity");
        assert!(matches!(
            DenoiserHandle::from_spec("gaussian:2.5").unwrap().kind,
            DenoiserKind::Gaussian { width_per_sigma } if width_per_sigma == 2.5
        ));
        assert!(DenoiserHandle::from_spec("unet").is_err());
        assert!(DenoiserHandle::from_spec("gaussian:x").is_err());
    }
}
