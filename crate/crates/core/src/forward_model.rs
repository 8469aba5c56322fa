//! Noisy magnitude measurements.
//!
//! Intensities follow `y² = |Ax|² + w` with `w ~ N(0, α² diag(|Ax|²))`.
//! Negative noisy intensities are clamped to zero before the square root.

use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dprt::{write_atomic, Tensor};
use crate::field_ops::RealImage;
use crate::linops::LinearOperator;
use crate::rng::{stream, StreamRng, StreamTag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    /// `n_side x n_side` object, DFT on a `factor * n_side` square grid.
    Fourier { n_side: usize, factor: usize },
    /// Generic `m x n` operator.
    Dense { m: usize, n: usize },
}

impl Geometry {
    pub fn out_dims(&self) -> Vec<u32> {
        match *self {
            Geometry::Fourier { n_side, factor } => {
                vec![(n_side * factor) as u32, (n_side * factor) as u32]
            }
            Geometry::Dense { m, .. } => vec![m as u32],
        }
    }

    /// Side length of the square object, when the object is square.
    pub fn object_side(&self) -> Option<usize> {
        match *self {
            Geometry::Fourier { n_side, .. } => Some(n_side),
            Geometry::Dense { n, .. } => {
                let side = (n as f64).sqrt().round() as usize;
                (side * side == n).then_some(side)
            }
        }
    }
}

/// Sidecar metadata stored next to the magnitude tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub alpha: f64,
    pub sigma_y: f64,
    pub seed: u64,
    pub channel: usize,
    pub operator_id: String,
    pub geometry: Geometry,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    /// Non-negative magnitudes, one per operator output.
    pub y: Vec<f64>,
    pub meta: MeasurementMeta,
}

impl MeasurementSet {
    pub fn new(y: Vec<f64>, meta: MeasurementMeta) -> Result<Self> {
        if let Some(i) = y.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("magnitude {i} is {}", y[i])));
        }
        Ok(Self { y, meta })
    }

    /// Noiseless measurements `|Ax|` of an already-known vector.
    pub fn exact(x: &[f64], op: &dyn LinearOperator, geometry: Geometry) -> Result<Self> {
        let y = clean_magnitudes(x, op)?;
        Self::new(
            y,
            MeasurementMeta {
                alpha: 0.0,
                sigma_y: 0.0,
                seed: 0,
                channel: 0,
                operator_id: op.id(),
                geometry,
                clamped: 0,
            },
        )
    }

    pub fn y_complex(&self) -> Vec<Complex64> {
        self.y.iter().map(|&v| Complex64::new(v, 0.0)).collect()
    }

    pub fn norm(&self) -> f64 {
        self.y.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Writes `<stem>.dprt` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let t = Tensor::real(
            self.meta.geometry.out_dims(),
            self.y.iter().map(|&v| v as f32).collect(),
        )?;
        t.write_file(&stem.with_extension("dprt"))?;
        write_atomic(
            &stem.with_extension("json"),
            serde_json::to_string_pretty(&self.meta)?.as_bytes(),
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let t = Tensor::read_file(&stem.with_extension("dprt"))?;
        let meta: MeasurementMeta = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        if t.dims != meta.geometry.out_dims() {
            return Err(Error::Shape(format!(
                "tensor dims {:?} disagree with sidecar geometry {:?}",
                t.dims, meta.geometry
            )));
        }
        Self::new(t.to_real_vec()?, meta)
    }
}

fn clean_magnitudes(x: &[f64], op: &dyn LinearOperator) -> Result<Vec<f64>> {
    if x.len() != op.in_dim() {
        return Err(Error::Shape(format!(
            "image has {} values, operator expects {}",
            x.len(),
            op.in_dim()
        )));
    }
    let xc: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Ok(op.apply(&xc).iter().map(|z| z.norm()).collect())
}

/// Noisy intensities `|Ax|² + w` before clamping, for clean magnitudes `|Ax|`.
pub fn noisy_intensities(clean: &[f64], alpha: f64, rng: &mut StreamRng) -> Vec<f64> {
    clean
        .iter()
        .map(|&a| {
            let z: f64 = StandardNormal.sample(rng);
            a * a + alpha * a * z
        })
        .collect()
}

/// Simulates one channel of `x` with noise stream `(seed, channel)`.
pub fn simulate_channel(
    x: &RealImage,
    channel: usize,
    op: &dyn LinearOperator,
    geometry: Geometry,
    alpha: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Argument(format!("alpha must be >= 0, got {alpha}")));
    }
    if channel >= x.channels {
        return Err(Error::Argument(format!("channel {channel} of {}", x.channels)));
    }
    let plane = x.plane(channel);
    if let Some(v) = plane.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("pixel {v} outside the unit range")));
    }
    let clean = clean_magnitudes(plane, op)?;
    let mut clamped = 0;
    let y = if alpha == 0.0 {
        clean
    } else {
        let mut rng = stream(seed, StreamTag::Measurement, channel as u64);
        noisy_intensities(&clean, alpha, &mut rng)
            .into_iter()
            .map(|v| {
                if v < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    v.sqrt()
                }
            })
            .collect()
    };
    MeasurementSet::new(
        y,
        MeasurementMeta {
            alpha,
            sigma_y: 0.0,
            seed,
            channel,
            operator_id: op.id(),
            geometry,
            clamped,
        },
    )
}

/// Simulates a single-channel image.
pub fn simulate(
    x: &RealImage,
    op: &dyn LinearOperator,
    geometry: Geometry,
    alpha: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    if x.channels != 1 {
        return Err(Error::Shape(
            "simulate takes one channel; use simulate_all_channels".into(),
        ));
    }
    simulate_channel(x, 0, op, geometry, alpha, seed)
}

/// One measurement set per channel, each with its own noise stream.
pub fn simulate_all_channels(
    x: &RealImage,
    op: &dyn LinearOperator,
    geometry: Geometry,
    alpha: f64,
    seed: u64,
) -> Result<Vec<MeasurementSet>> {
    (0..x.channels)
        .map(|c| simulate_channel(x, c, op, geometry, alpha, seed))
        .collect()
}

/// Elementwise `y²`.
pub fn intensity(mset: &MeasurementSet) -> Vec<f64> {
    mset.y.iter().map(|v| v * v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{make_fourier_operator, DenseOperator};

    fn fixture(side: usize) -> RealImage {
        let data = (0..side * side)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                0.5 + 0.4 * ((r as f64 * 0.7).sin() * (c as f64 * 0.4).cos())
            })
            .collect();
        RealImage::gray(side, side, data).unwrap()
    }

    fn geom(n: usize) -> Geometry {
        Geometry::Fourier { n_side: n, factor: 2 }
    }

    #[test]
    fn noiseless_is_exact_magnitude() {
        let x = fixture(4);
        let op = make_fourier_operator(4, 2).unwrap();
        let m = simulate(&x, &op, geom(4), 0.0, 9).unwrap();
        let xc: Vec<Complex64> = x.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let expect: Vec<f64> = op.apply(&xc).iter().map(|z| z.norm()).collect();
        assert_eq!(m.y, expect);
        assert_eq!(m.meta.clamped, 0);
    }

    #[test]
    fn zero_image_gives_zero_for_any_alpha() {
        let x = RealImage::gray(4, 4, vec![0.0; 16]).unwrap();
        let op = make_fourier_operator(4, 2).unwrap();
        for alpha in [0.0, 1.0, 3.0] {
            let m = simulate(&x, &op, geom(4), alpha, 1).unwrap();
            assert!(m.y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn seeded_draws_are_deterministic() {
        let x = fixture(4);
        let op = make_fourier_operator(4, 2).unwrap();
        let a = simulate(&x, &op, geom(4), 1.0, 5).unwrap();
        let b = simulate(&x, &op, geom(4), 1.0, 5).unwrap();
        let c = simulate(&x, &op, geom(4), 1.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn intensity_variance_at_half_magnitude() {
        // Var(y²) = α²|Ax|² = 0.25 for α = 1 and |Ax| = 0.5.
        let op = DenseOperator::diagonal(&[0.5]);
        let clean = clean_magnitudes(&[1.0], &op).unwrap();
        let n = 100_000;
        let mut rng = stream(77, StreamTag::Measurement, 0);
        let draws: Vec<f64> = (0..n).map(|_| noisy_intensities(&clean, 1.0, &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.25).abs() / 0.25 < 0.05, "var {var}");
        // Mean is |Ax|² within 3 Monte-Carlo standard errors.
        assert!((mean - 0.25).abs() < 3.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn clamped_fraction_stays_below_half() {
        // Each bin clamps with probability Φ(−|Ax|/α) < 1/2; on a textured
        // 32x32 image the realized fraction sits clearly below one half.
        let mut rng = stream(12, StreamTag::Fixture, 0);
        let data = (0..32 * 32)
            .map(|i| {
                let block = ((i / 32) / 8 + (i % 32) / 8) % 2;
                (0.3 + 0.4 * block as f64 + 0.3 * rand::Rng::random::<f64>(&mut rng)).min(1.0)
            })
            .collect();
        let x = RealImage::gray(32, 32, data).unwrap();
        let op = make_fourier_operator(32, 2).unwrap();
        let m = simulate(&x, &op, geom(32), 3.0, 2).unwrap();
        let frac = m.meta.clamped as f64 / m.y.len() as f64;
        assert!(frac > 0.0 && frac < 0.5, "clamped fraction {frac}");
    }

    #[test]
    fn intensity_squares() {
        let meta = MeasurementMeta {
            alpha: 0.0,
            sigma_y: 0.0,
            seed: 0,
            channel: 0,
            operator_id: "x".into(),
            geometry: Geometry::Dense { m: 2, n: 1 },
            clamped: 0,
        };
        let m = MeasurementSet::new(vec![3.0, 4.0], meta.clone()).unwrap();
        assert_eq!(intensity(&m), vec![9.0, 16.0]);
        let back: Vec<f64> = intensity(&m).iter().map(|v| v.sqrt()).collect();
        assert_eq!(back, m.y);
        let z = MeasurementSet::new(vec![0.0, 0.0], meta.clone()).unwrap();
        assert_eq!(intensity(&z), vec![0.0, 0.0]);
        assert!(MeasurementSet::new(vec![-1.0, 0.0], meta).is_err());
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let op = make_fourier_operator(2, 2).unwrap();
        let x = RealImage::gray(2, 2, vec![0.0, 1.5, 0.0, 0.0]).unwrap();
        assert!(matches!(simulate(&x, &op, geom(2), 0.0, 0), Err(Error::Domain(_))));
        let ok = RealImage::gray(2, 2, vec![0.5; 4]).unwrap();
        assert!(simulate(&ok, &op, geom(2), -1.0, 0).is_err());
    }

    #[test]
    fn channels_draw_independent_noise() {
        let gray = fixture(4);
        let rgb = RealImage::from_channels(&[gray.clone(), gray.clone(), gray]).unwrap();
        let op = make_fourier_operator(4, 2).unwrap();
        let sets = simulate_all_channels(&rgb, &op, geom(4), 1.0, 3).unwrap();
        assert_eq!(sets.len(), 3);
        assert_ne!(sets[0].y, sets[1].y);
        assert_eq!(sets[2].meta.channel, 2);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let op = make_fourier_operator(4, 2).unwrap();
        let m = simulate(&fixture(4), &op, geom(4), 0.5, 4).unwrap();
        let stem = dir.path().join("meas");
        m.save(&stem).unwrap();
        let back = MeasurementSet::load(&stem).unwrap();
        assert_eq!(back.meta, m.meta);
        for (a, b) in back.y.iter().zip(&m.y) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
