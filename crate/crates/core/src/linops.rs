//! Linear measurement operators.
//!
//! Everything here works on complex vectors; realness of images is a
//! constraint enforced by callers. Dense operators can carry an SVD, the
//! Fourier operator is matrix-free, and [`pinv_apply`] uses conjugate
//! gradient on the normal equations whenever no closed form is available.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dprt::Tensor;
use crate::field_ops::Fft2Plan;
use crate::rng::{stream, StreamTag};
use crate::{Error, Result};

/// Largest `m * n` for which a dense SVD is materialized.
pub const DENSE_SVD_LIMIT: usize = 1_000_000;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

pub trait LinearOperator: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64>;
    fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64>;

    /// Stable identifier, e.g. `fourier:n=32:factor=2`.
    fn id(&self) -> String;

    fn svd(&self) -> Option<&Svd> {
        None
    }

    /// `AᴴA = I`, so the pseudoinverse is the adjoint.
    fn is_isometry(&self) -> bool {
        false
    }

    /// All matrix entries are real.
    fn is_real(&self) -> bool {
        false
    }
}

/// `A = U diag(S) Vᴴ`.
///
/// `u` is `m x k` with `k = min(m, n)`. `s` has length `n`, sorted descending;
/// entries past `k` and those below the rank tolerance are exactly zero.
/// `v` is a complete `n x n` unitary basis, so null-space directions are
/// available to the spectral sampler.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<Complex64>,
    pub s: Vec<f64>,
    pub v: DMatrix<Complex64>,
    pub rank: usize,
}

impl Svd {
    pub fn compute(a: &DMatrix<Complex64>, real: bool) -> Result<Self> {
        let (m, n) = a.shape();
        if m * n > DENSE_SVD_LIMIT {
            return Err(Error::Size(format!(
                "dense SVD of a {m}x{n} operator exceeds {DENSE_SVD_LIMIT} entries"
            )));
        }
        let k = m.min(n);
        // faer returns a full SVD (complete U and V) with σ sorted descending
        let (u, s, v) = if real {
            let ar = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)].re);
            let svd = ar.svd().map_err(svd_failed)?;
            (
                DMatrix::from_fn(m, k, |i, j| Complex64::new(svd.U()[(i, j)], 0.0)),
                (0..k).map(|i| svd.S()[i]).collect::<Vec<_>>(),
                DMatrix::from_fn(n, n, |i, j| Complex64::new(svd.V()[(i, j)], 0.0)),
            )
        } else {
            let ac = faer::Mat::<Complex64>::from_fn(m, n, |i, j| a[(i, j)]);
            let svd = ac.svd().map_err(svd_failed)?;
            (
                DMatrix::from_fn(m, k, |i, j| svd.U()[(i, j)]),
                (0..k).map(|i| svd.S()[i].re).collect::<Vec<_>>(),
                DMatrix::from_fn(n, n, |i, j| svd.V()[(i, j)]),
            )
        };
        let smax = s.first().copied().unwrap_or(0.0);
        let tol = (m.max(n) as f64) * f64::EPSILON * smax;
        let mut s_sorted = vec![0.0; n];
        for (dst, &sv) in s.iter().enumerate() {
            s_sorted[dst] = if sv > tol { sv } else { 0.0 };
        }
        let rank = s_sorted.iter().filter(|&&x| x > 0.0).count();
        Ok(Self {
            u,
            s: s_sorted,
            v,
            rank,
        })
    }

    /// `V Σ† Uᴴ y`.
    pub fn pinv_apply(&self, y: &[Complex64]) -> Vec<Complex64> {
        let yv = DVector::from_column_slice(y);
        let mut coeff = self.u.adjoint() * yv;
        for (i, c) in coeff.iter_mut().enumerate() {
            *c = if self.s[i] > 0.0 { *c / self.s[i] } else { ZERO };
        }
        let k = coeff.len();
        let x = self.v.columns(0, k) * coeff;
        x.iter().copied().collect()
    }

    /// `Σ† Uᴴ y` as a length-`n` vector in the V basis.
    pub fn spectral_measurement(&self, y: &[Complex64]) -> Vec<Complex64> {
        let coeff = self.u.adjoint() * DVector::from_column_slice(y);
        (0..self.s.len())
            .map(|i| {
                if i < coeff.len() && self.s[i] > 0.0 {
                    coeff[i] / self.s[i]
                } else {
                    ZERO
                }
            })
            .collect()
    }

    /// `Vᴴ x`.
    pub fn to_spectral(&self, x: &[Complex64]) -> Vec<Complex64> {
        (self.v.adjoint() * DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect()
    }

    /// `V x̄`.
    pub fn from_spectral(&self, xbar: &[Complex64]) -> Vec<Complex64> {
        (&self.v * DVector::from_column_slice(xbar)).iter().copied().collect()
    }
}

fn svd_failed(e: impl std::fmt::Debug) -> Error {
    Error::Divergence {
        iter: 0,
        what: format!("dense SVD did not converge: {e:?}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub max_iters: usize,
    /// Relative residual of the normal equations at which CG stops.
    pub tol: f64,
    /// Tikhonov weight λ in `(AᴴA + λI) x = Aᴴy`.
    pub regularizer: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-10,
            regularizer: 0.0,
        }
    }
}

impl CgOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || !(self.regularizer >= 0.0) {
            return Err(Error::Config(format!("invalid CG options {self:?}")));
        }
        Ok(())
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Minimum-norm least-squares solution by CG on `(AᴴA + λI) x = Aᴴy`.
pub fn pinv_apply_cg(op: &dyn LinearOperator, y: &[Complex64], opts: &CgOptions) -> Result<Vec<Complex64>> {
    opts.validate()?;
    check_len("measurement", y.len(), op.out_dim())?;
    let b = op.adjoint(y);
    let b_norm = norm(&b);
    let mut x = vec![ZERO; op.in_dim()];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b;
    let mut p = r.clone();
    let mut rr = dot(&r, &r).re;
    for iter in 0..opts.max_iters {
        let mut q = op.adjoint(&op.apply(&p));
        if opts.regularizer > 0.0 {
            for (qi, pi) in q.iter_mut().zip(&p) {
                *qi += pi * opts.regularizer;
            }
        }
        let pq = dot(&p, &q).re;
        if pq <= 0.0 {
            // p is numerically in the null space of the normal operator
            let rel = rr.sqrt() / b_norm;
            if rel < opts.tol {
                return Ok(x);
            }
            return Err(Error::Convergence {
                iters: iter,
                residual: rel,
            });
        }
        let step = rr / pq;
        for i in 0..x.len() {
            x[i] += p[i] * step;
            r[i] -= q[i] * step;
        }
        let rr_new = dot(&r, &r).re;
        if rr_new.sqrt() / b_norm < opts.tol {
            return Ok(x);
        }
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + p[i] * beta;
        }
        rr = rr_new;
    }
    Err(Error::Convergence {
        iters: opts.max_iters,
        residual: rr.sqrt() / b_norm,
    })
}

/// `A† y`, through the cheapest exact route the operator offers: the adjoint
/// for isometries, the stored SVD, otherwise CG.
pub fn pinv_apply(op: &dyn LinearOperator, y: &[Complex64], opts: &CgOptions) -> Result<Vec<Complex64>> {
    check_len("measurement", y.len(), op.out_dim())?;
    if opts.regularizer == 0.0 {
        if op.is_isometry() {
            return Ok(op.adjoint(y));
        }
        if let Some(svd) = op.svd() {
            return Ok(svd.pinv_apply(y));
        }
    }
    pinv_apply_cg(op, y, opts)
}

/// `A†A x`, the orthogonal projector onto the row space.
pub fn projector_range_rows(op: &dyn LinearOperator, x: &[Complex64], opts: &CgOptions) -> Result<Vec<Complex64>> {
    check_len("input", x.len(), op.in_dim())?;
    pinv_apply(op, &op.apply(x), opts)
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} length {got}, expected {want}")));
    }
    Ok(())
}

/// Explicit matrix operator.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    id: String,
    matrix: DMatrix<Complex64>,
    real: bool,
    svd: Option<Svd>,
}

impl DenseOperator {
    pub fn new(id: impl Into<String>, matrix: DMatrix<Complex64>) -> Self {
        let real = matrix.iter().all(|z| z.im == 0.0);
        Self {
            id: id.into(),
            matrix,
            real,
            svd: None,
        }
    }

    pub fn from_real(id: impl Into<String>, matrix: &DMatrix<f64>) -> Self {
        Self::new(id, matrix.map(|x| Complex64::new(x, 0.0)))
    }

    /// Materializes the SVD; fails past [`DENSE_SVD_LIMIT`].
    pub fn with_svd(mut self) -> Result<Self> {
        self.svd = Some(Svd::compute(&self.matrix, self.real)?);
        Ok(self)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_real(format!("identity:n={n}"), &DMatrix::identity(n, n))
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Self::from_real(
            format!("diagonal:n={}", diag.len()),
            &DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        )
    }

    /// Keeps the listed coordinates of an `n`-vector, in order.
    pub fn subsample(n: usize, kept: &[usize]) -> Result<Self> {
        let mut m = DMatrix::zeros(kept.len(), n);
        for (row, &col) in kept.iter().enumerate() {
            if col >= n {
                return Err(Error::Argument(format!("kept index {col} out of range {n}")));
            }
            m[(row, col)] = 1.0;
        }
        Ok(Self::from_real(format!("subsample:n={n}:m={}", kept.len()), &m))
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn to_tensor(&self) -> Tensor {
        let (m, n) = self.matrix.shape();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                let z = self.matrix[(r, c)];
                data.push(num_complex::Complex32::new(z.re as f32, z.im as f32));
            }
        }
        Tensor::complex(vec![m as u32, n as u32], data).expect("dims match payload")
    }

    pub fn from_tensor(id: impl Into<String>, t: &Tensor) -> Result<Self> {
        let [m, n] = t.dims[..] else {
            return Err(Error::Format("operator tensor must be rank 2".into()));
        };
        let vals = t.to_complex_vec()?;
        Ok(Self::new(id, DMatrix::from_row_slice(m as usize, n as usize, &vals)))
    }
}

impl LinearOperator for DenseOperator {
    fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        (&self.matrix * DVector::from_column_slice(x)).iter().copied().collect()
    }

    fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        (self.matrix.adjoint() * DVector::from_column_slice(y))
            .iter()
            .copied()
            .collect()
    }

    fn id(&self) -> String {
        self.id.clone()
    }

    fn svd(&self) -> Option<&Svd> {
        self.svd.as_ref()
    }

    fn is_real(&self) -> bool {
        self.real
    }
}

/// Zero-pad by `factor` then unitary 2-D DFT, mapping an `n_side x n_side`
/// image (`n` values) to `m = (factor * n_side)²` Fourier coefficients.
#[derive(Debug, Clone)]
pub struct FourierOperator {
    n_side: usize,
    factor: usize,
    plan: Fft2Plan,
}

impl FourierOperator {
    pub fn n_side(&self) -> usize {
        self.n_side
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn m_side(&self) -> usize {
        self.n_side * self.factor
    }
}

impl LinearOperator for FourierOperator {
    fn in_dim(&self) -> usize {
        self.n_side * self.n_side
    }

    fn out_dim(&self) -> usize {
        self.m_side() * self.m_side()
    }

    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let (n, ms) = (self.n_side, self.m_side());
        let mut buf = vec![ZERO; ms * ms];
        for r in 0..n {
            buf[r * ms..r * ms + n].copy_from_slice(&x[r * n..(r + 1) * n]);
        }
        self.plan.forward(&mut buf);
        buf
    }

    fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        let (n, ms) = (self.n_side, self.m_side());
        let mut buf = y.to_vec();
        self.plan.inverse(&mut buf);
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            out.extend_from_slice(&buf[r * ms..r * ms + n]);
        }
        out
    }

    fn id(&self) -> String {
        format!("fourier:n={}:factor={}", self.n_side, self.factor)
    }

    fn is_isometry(&self) -> bool {
        true
    }
}

pub fn make_fourier_operator(n_side: usize, factor: usize) -> Result<FourierOperator> {
    if n_side == 0 || factor == 0 {
        return Err(Error::Argument(format!(
            "fourier operator needs n_side >= 1 and factor >= 1 (got {n_side}, {factor})"
        )));
    }
    let m_side = n_side * factor;
    Ok(FourierOperator {
        n_side,
        factor,
        plan: Fft2Plan::new(m_side, m_side),
    })
}

/// I.i.d. circular complex Gaussian `m x n` matrix with entries of variance
/// `1/m`, so columns have unit expected norm.
pub fn make_random_transmission_operator(m: usize, n: usize, seed: u64) -> Result<DenseOperator> {
    if n == 0 || m < n {
        return Err(Error::Argument(format!(
            "transmission operator needs m >= n >= 1 (got {m}x{n})"
        )));
    }
    let entries = m
        .checked_mul(n)
        .filter(|&e| e <= 64 * DENSE_SVD_LIMIT)
        .ok_or_else(|| Error::Size(format!("{m}x{n} dense operator")))?;
    let mut rng = stream(seed, StreamTag::Operator, 0);
    let scale = 1.0 / (2.0 * m as f64).sqrt();
    let vals: Vec<Complex64> = (0..entries)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    Ok(DenseOperator::new(
        format!("transmission:m={m}:n={n}:seed={seed}"),
        DMatrix::from_row_slice(m, n, &vals),
    ))
}

/// Rebuilds a matrix-free or seeded operator from its identifier.
pub fn operator_from_id(id: &str) -> Result<Box<dyn LinearOperator>> {
    let mut parts = id.split(':');
    let kind = parts.next().unwrap_or_default();
    let mut field = |name: &str| -> Result<u64> {
        let part = parts
            .next()
            .ok_or_else(|| Error::Argument(format!("operator id `{id}` lacks {name}")))?;
        part.strip_prefix(name)
            .and_then(|s| s.strip_prefix('='))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Argument(format!("operator id `{id}`: bad {name}")))
    };
    match kind {
        "fourier" => {
            let n = field("n")? as usize;
            let factor = field("factor")? as usize;
            Ok(Box::new(make_fourier_operator(n, factor)?))
        }
        "transmission" => {
            let m = field("m")? as usize;
            let n = field("n")? as usize;
            let seed = field("seed")?;
            let op = make_random_transmission_operator(m, n, seed)?;
            if m * n <= DENSE_SVD_LIMIT {
                Ok(Box::new(op.with_svd()?))
            } else {
                Ok(Box::new(op))
            }
        }
        _ => Err(Error::Argument(format!("unknown operator id `{id}`"))),
    }
}

/// Relative mismatch `|⟨Ax, y⟩ − ⟨x, Aᴴy⟩| / (‖Ax‖‖y‖)`, worst over probes.
pub fn adjoint_mismatch(op: &dyn LinearOperator, probes: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, StreamTag::Fixture, 0);
    let mut draw = |len: usize| -> Vec<Complex64> {
        (0..len)
            .map(|_| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(re, im)
            })
            .collect()
    };
    (0..probes)
        .map(|_| {
            let x = draw(op.in_dim());
            let y = draw(op.out_dim());
            let ax = op.apply(&x);
            let lhs = dot(&y, &ax);
            let rhs = dot(&op.adjoint(&y), &x);
            (lhs - rhs).norm() / (norm(&ax) * norm(&y)).max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}
