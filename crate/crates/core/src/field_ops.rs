//! Real and complex grids plus the unitary 2-D DFT.
//!
//! Images are stored planar: channel `c` occupies `data[c*H*W..(c+1)*H*W]`,
//! each plane row-major. All Fourier operations act on one channel at a time.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Declared value range of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`, the range of measured objects.
    Unit,
    /// `[-1, 1]`, the range diffusion denoisers work in.
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub range: ValueRange,
}

impl RealImage {
    pub fn zeros(height: usize, width: usize, channels: usize, range: ValueRange) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            range,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite pixel at index {bad}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            range,
        })
    }

    /// Single-channel image from a plane.
    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(height, width, 1, data, ValueRange::Unit)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &RealImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel(&self, c: usize) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.plane(c).to_vec(),
            range: self.range,
        }
    }

    /// Stacks single-channel images into one multi-channel image.
    pub fn from_channels(planes: &[RealImage]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Argument("no channels to stack".into()))?;
        let mut data = Vec::with_capacity(first.plane_len() * planes.len());
        for p in planes {
            if p.height != first.height || p.width != first.width || p.channels != 1 {
                return Err(Error::Shape("channel planes differ in shape".into()));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(RealImage {
            height: first.height,
            width: first.width,
            channels: planes.len(),
            data,
            range: first.range,
        })
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[c * self.plane_len() + row * self.width + col]
    }

    /// Clamps every value into the declared range.
    pub fn clamp_to_range(mut self) -> Self {
        let (lo, hi) = self.range.bounds();
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RealImage {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Unit range `[0,1]` to symmetric `[-1,1]`: `2x - 1`.
    pub fn to_vp(&self) -> Self {
        RealImage {
            data: self.data.iter().map(|&v| 2.0 * v - 1.0).collect(),
            range: ValueRange::Symmetric,
            ..self.clone()
        }
    }

    /// Symmetric to unit range with clamping: `clamp((x + 1) / 2, 0, 1)`.
    pub fn from_vp(&self) -> Self {
        RealImage {
            data: self.data.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
            range: ValueRange::Unit,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} field",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_real(img: &RealImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::Shape(format!(
                "expected a single-channel image, got {} channels",
                img.channels
            )));
        }
        Ok(Self {
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        })
    }

    pub fn real_part(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|z| z.re).collect(),
            range: ValueRange::Unit,
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    pub height: usize,
    pub width: usize,
    pub inside: Vec<bool>,
}

impl SupportMask {
    /// A `rows x cols` rectangle in the top-left corner of a `height x width` grid.
    pub fn top_left(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > height || cols > width {
            return Err(Error::Shape(format!(
                "support {rows}x{cols} does not fit in a {height}x{width} grid"
            )));
        }
        let inside = (0..height * width)
            .map(|i| i / width < rows && i % width < cols)
            .collect();
        Ok(Self { height, width, inside })
    }

    /// Support for an `n_side x n_side` object oversampled by `factor`.
    pub fn for_oversampled(n_side: usize, factor: usize) -> Result<Self> {
        let m_side = n_side * factor;
        Self::top_left(m_side, m_side, n_side, n_side)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            inside: vec![true; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }
}

/// Reusable unitary 2-D FFT for one grid size.
#[derive(Clone)]
pub struct Fft2Plan {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2Plan")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2Plan {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: 1.0 / ((height * width) as f64).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.len(), "FFT buffer length");
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for row in data.chunks_exact_mut(self.width) {
            rows.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); self.height];
        for c in 0..self.width {
            for r in 0..self.height {
                column[r] = data[r * self.width + c];
            }
            cols.process(&mut column);
            for r in 0..self.height {
                data[r * self.width + c] = column[r] * self.scale;
            }
        }
    }
}

/// Unitary 2-D DFT of a single-channel image.
pub fn dft2_unitary(img: &RealImage) -> Result<ComplexField> {
    let mut field = ComplexField::from_real(img)?;
    Fft2Plan::new(field.height, field.width).forward(&mut field.data);
    Ok(field)
}

/// Inverse of [`dft2_unitary`], also unitary.
pub fn idft2_unitary(field: &ComplexField) -> Result<ComplexField> {
    if field.data.len() != field.height * field.width {
        return Err(Error::Shape("field data length".into()));
    }
    let mut out = field.clone();
    Fft2Plan::new(out.height, out.width).inverse(&mut out.data);
    Ok(out)
}

/// Zero-pads every channel to `factor` times its size, content top-left.
pub fn pad_to_oversampled(img: &RealImage, factor: usize) -> Result<RealImage> {
    if factor == 0 {
        return Err(Error::Argument("oversampling factor must be >= 1".into()));
    }
    let (h, w) = (img.height * factor, img.width * factor);
    let mut out = RealImage::zeros(h, w, img.channels, img.range);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for r in 0..img.height {
            dst[r * w..r * w + img.width].copy_from_slice(&src[r * img.width..(r + 1) * img.width]);
        }
    }
    Ok(out)
}

/// Top-left `rows x cols` window of every channel.
pub fn crop_top_left(img: &RealImage, rows: usize, cols: usize) -> Result<RealImage> {
    if rows > img.height || cols > img.width {
        return Err(Error::Shape(format!(
            "cannot crop {rows}x{cols} from {}x{}",
            img.height, img.width
        )));
    }
    let mut out = RealImage::zeros(rows, cols, img.channels, img.range);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for r in 0..rows {
            dst[r * cols..(r + 1) * cols].copy_from_slice(&src[r * img.width..r * img.width + cols]);
        }
    }
    Ok(out)
}

/// Elementwise modulus.
pub fn magnitude(field: &ComplexField) -> RealImage {
    RealImage {
        height: field.height,
        width: field.width,
        channels: 1,
        data: field.data.iter().map(|z| z.norm()).collect(),
        range: ValueRange::Unit,
    }
}
