//! Distortion metrics and trivial-ambiguity alignment.
//!
//! Fourier magnitudes cannot distinguish an image from its circular shifts,
//! its point reflection, or (without a nonnegativity constraint) its
//! negative. Before scoring, [`align_ambiguities`] picks the member of that
//! group which correlates best with the ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::field_ops::{Fft2Plan, RealImage};
use crate::{Complex64, Error, Result};

/// Value reported in tables when the MSE is exactly zero.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &RealImage, b: &RealImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &RealImage, b: &RealImage) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(peak² / MSE)`; `+∞` when the images are equal.
pub fn psnr(a: &RealImage, b: &RealImage, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Argument(format!("peak = {peak}")));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

/// PSNR with the infinite case reported as [`PSNR_CAP`].
pub fn psnr_capped(a: &RealImage, b: &RealImage, peak: f64) -> Result<f64> {
    Ok(psnr(a, b, peak)?.min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sums over every fully contained window.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|d| g[d] * plane[r * w + c + d]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|d| g[d] * rows[(r + d) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-window SSIM (11x11, σ = 1.5, dynamic range 1) averaged over the
/// valid region and then over channels.
pub fn ssim(a: &RealImage, b: &RealImage) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.height, a.width
        )));
    }
    let total: f64 = (0..a.channels)
        .map(|c| ssim_plane(a.plane(c), b.plane(c), a.height, a.width))
        .sum();
    Ok(total / a.channels as f64)
}

/// One element of the trivial-ambiguity group: optional point reflection,
/// then a circular shift, then a global sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub flipped: bool,
    pub shift: (usize, usize),
    pub sign: i8,
}

impl Default for Alignment {
    fn default() -> Self {
        Self {
            flipped: false,
            shift: (0, 0),
            sign: 1,
        }
    }
}

impl Alignment {
    /// `out[(r + dy) % h, (c + dx) % w] = sign · src[r, c]`, where `src` is
    /// the image reversed along both axes when `flipped`.
    pub fn apply(&self, img: &RealImage) -> RealImage {
        let (h, w) = (img.height, img.width);
        let (dy, dx) = self.shift;
        let s = self.sign as f64;
        let mut out = img.clone();
        for c in 0..img.channels {
            let src = img.plane(c);
            let dst = out.plane_mut(c);
            for r in 0..h {
                for col in 0..w {
                    let (sr, sc) = if self.flipped {
                        (h - 1 - r, w - 1 - col)
                    } else {
                        (r, col)
                    };
                    dst[((r + dy) % h) * w + (col + dx) % w] = s * src[sr * w + sc];
                }
            }
        }
        out
    }
}

fn reversed(img: &RealImage) -> RealImage {
    Alignment {
        flipped: true,
        ..Default::default()
    }
    .apply(img)
}

/// `corr[dy, dx] = Σ_{r,c} gt[(r+dy)%h, (c+dx)%w] · x[r, c]`, summed over
/// channels, via the unitary FFT.
pub fn circular_cross_correlation(x: &RealImage, gt: &RealImage) -> Result<Vec<f64>> {
    check_shapes(x, gt)?;
    let (h, w) = (x.height, x.width);
    let plan = Fft2Plan::new(h, w);
    let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
    for c in 0..x.channels {
        let mut fx: Vec<Complex64> = x.plane(c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut fg: Vec<Complex64> = gt.plane(c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        plan.forward(&mut fx);
        plan.forward(&mut fg);
        acc.iter_mut()
            .zip(fg.iter().zip(&fx))
            .for_each(|(a, (g, v))| *a += g * v.conj());
    }
    plan.inverse(&mut acc);
    let scale = ((h * w) as f64).sqrt();
    Ok(acc.iter().map(|z| z.re * scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignOptions {
    /// Search flips and circular shifts. Off for operators without that
    /// ambiguity, such as dense transmission matrices.
    pub translations: bool,
    /// Also consider the negated image; only meaningful without a
    /// nonnegativity constraint.
    pub sign_search: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            translations: true,
            sign_search: false,
        }
    }
}

/// Aligns `recon` to `gt` over flips and circular shifts (sign fixed).
pub fn align_ambiguities(recon: &RealImage, gt: &RealImage) -> Result<(RealImage, Alignment)> {
    align_ambiguities_with(recon, gt, AlignOptions::default())
}

pub fn align_ambiguities_with(recon: &RealImage, gt: &RealImage, opts: AlignOptions) -> Result<(RealImage, Alignment)> {
    check_shapes(recon, gt)?;
    let w = recon.width;
    let mut best: Option<(f64, Alignment)> = None;
    let orientations: &[bool] = if opts.translations { &[false, true] } else { &[false] };
    for &flipped in orientations {
        let src = if flipped { reversed(recon) } else { recon.clone() };
        let corr = if opts.translations {
            circular_cross_correlation(&src, gt)?
        } else {
            vec![src.data.iter().zip(&gt.data).map(|(a, b)| a * b).sum()]
        };
        for (k, &v) in corr.iter().enumerate() {
            for sign in [1i8, -1] {
                if sign < 0 && !opts.sign_search {
                    continue;
                }
                let score = sign as f64 * v;
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((
                        score,
                        Alignment {
                            flipped,
                            shift: (k / w, k % w),
                            sign,
                        },
                    ));
                }
            }
        }
    }
    let (_, al) = best.expect("non-empty search");
    Ok((al.apply(recon), al))
}

/// Aligned PSNR (peak 1) and SSIM, when the image is large enough.
pub fn aligned_scores(recon: &RealImage, gt: &RealImage, opts: AlignOptions) -> Result<(f64, Option<f64>, Alignment)> {
    let (aligned, al) = align_ambiguities_with(recon, gt, opts)?;
    let p = psnr_capped(&aligned, gt, 1.0)?;
    let s = if gt.height >= SSIM_WINDOW && gt.width >= SSIM_WINDOW {
        Some(ssim(&aligned, gt)?)
    } else {
        None
    };
    Ok((p, s, al))
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub alpha: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub flipped: bool,
    pub dy: usize,
    pub dx: usize,
}

/// Arithmetic mean of the numeric columns, labelled `mean`.
pub fn mean_row(rows: &[MetricRow], method: &str) -> Option<MetricRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let ssims: Vec<f64> = rows.iter().filter_map(|r| r.ssim).collect();
    Some(MetricRow {
        image_id: "mean".into(),
        method: method.into(),
        alpha: rows.iter().map(|r| r.alpha).sum::<f64>() / n,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: (!ssims.is_empty()).then(|| ssims.iter().sum::<f64>() / ssims.len() as f64),
        flipped: false,
        dy: 0,
        dx: 0,
    })
}

pub fn metrics_csv_bytes(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Argument(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    crate::dprt::write_atomic(path, &metrics_csv_bytes(rows)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Argument(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Argument(e.to_string())))
        .collect()
}
