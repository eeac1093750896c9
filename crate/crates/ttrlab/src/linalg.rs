//! Dense real matrices, symmetric eigendecomposition, and seeded samplers.
//!
//! Everything is `f64`; the theorem-verification tolerances used elsewhere in
//! the crate (1e-9 and tighter) are not reachable in single precision.
//!
//! Randomness is always explicit: every sampler takes a seed and runs its own
//! ChaCha8 stream (a counter-based generator with a portable, documented
//! output sequence), so any value produced here is reproducible across
//! platforms and runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Build from a row-major entry vector; errors when the count is off.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::Dim(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `Aᵀ y` without materializing the transpose.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if self.rows != y.len() {
            return Err(Error::Dim(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += yi * a;
            }
        }
        Ok(out)
    }

    /// Gram matrix `AᵀA` (cols × cols).
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..n {
                    g.data[i * n + j] += a * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    /// Outer Gram `AAᵀ` (rows × rows).
    pub fn outer_gram(&self) -> Matrix {
        let m = self.rows;
        let mut g = Matrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = dot(self.row(i), self.row(j));
                g.data[i * m + j] = v;
                g.data[j * m + i] = v;
            }
        }
        g
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dim(format!(
                "add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute deviation from symmetry, `max |a_ij − a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut dev = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                dev = dev.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        dev
    }

    fn require_symmetric(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::Dim(format!("expected square matrix, got {}x{}", self.rows, self.cols)));
        }
        let tol = 1e-9 * self.frobenius_norm().max(1e-300);
        let dev = self.asymmetry();
        if dev > tol {
            return Err(Error::Asymmetric { max_dev: dev, tol });
        }
        Ok(())
    }
}

/// Plain dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Deterministic sub-seed derivation (two rounds of splitmix64 over the base
/// seed xor a tagged stream index), used wherever one experiment seed has to
/// fan out into independent streams.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

/// Symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvector columns. The sweep order is fixed, so results are bit-stable
/// for a given input. Errors on non-square input or when the asymmetry
/// exceeds `1e-9·‖m‖_F`.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    m.require_symmetric()?;
    let n = m.rows;
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut a = m.clone();
    // average away any sub-tolerance asymmetry so rotations see one value
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let stop = 1e-15 * norm;

    let max_sweeps = 64;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.get(i, j).powi(2);
            }
        }
        if (2.0 * off).sqrt() <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    if k != p && k != q {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        let new_kp = c * akp - s * akq;
                        let new_kq = s * akp + c * akq;
                        a.set(k, p, new_kp);
                        a.set(p, k, new_kp);
                        a.set(k, q, new_kq);
                        a.set(q, k, new_kq);
                    }
                }
                let app_new = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                let aqq_new = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                a.set(p, p, app_new);
                a.set(q, q, aqq_new);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);

                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok((eigenvalues, vectors))
}

/// Eigenvalues only, ascending.
pub fn sym_eigvalues(m: &Matrix) -> Result<Vec<f64>> {
    sym_eig(m).map(|(vals, _)| vals)
}

/// True iff the symmetric matrix has no eigenvalue above `tol`.
pub fn is_nsd(m: &Matrix, tol: f64) -> Result<bool> {
    let vals = sym_eigvalues(m)?;
    Ok(vals.last().is_none_or(|&v| v <= tol))
}

/// Supported initialization families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitDistribution {
    /// `U[−√(3k/fan_in), +√(3k/fan_in)]`, per-entry variance exactly `k/fan_in`.
    KaimingUniform,
    /// `N(0, k/fan_in)`.
    Gaussian,
    /// `N(0, 2k/(fan_in+fan_out))`.
    XavierNormal,
    Zero,
    Identity,
}

impl InitDistribution {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kaiming-uniform" => Ok(InitDistribution::KaimingUniform),
            "gaussian" => Ok(InitDistribution::Gaussian),
            "xavier-normal" => Ok(InitDistribution::XavierNormal),
            "zero" => Ok(InitDistribution::Zero),
            "identity" => Ok(InitDistribution::Identity),
            other => Err(Error::Config(format!("unknown init distribution '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InitDistribution::KaimingUniform => "kaiming-uniform",
            InitDistribution::Gaussian => "gaussian",
            InitDistribution::XavierNormal => "xavier-normal",
            InitDistribution::Zero => "zero",
            InitDistribution::Identity => "identity",
        }
    }
}

/// Seeded initialization recipe. `scale` is the variance multiplier `k`: the
/// realized per-entry variance is `k/fan_in` for kaiming-uniform and gaussian
/// draws and `2k/(fan_in+fan_out)` for xavier-normal, with `fan_in = cols`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub distribution: InitDistribution,
    pub scale: f64,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(distribution: InitDistribution, scale: f64, seed: u64) -> Self {
        InitSpec { distribution, scale, seed }
    }

    pub fn kaiming(scale: f64, seed: u64) -> Self {
        Self::new(InitDistribution::KaimingUniform, scale, seed)
    }

    pub fn zero() -> Self {
        Self::new(InitDistribution::Zero, 1.0, 0)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Draw a matrix per the spec's fan-in variance rule.
pub fn sample_matrix(rows: usize, cols: usize, init: &InitSpec) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dim("sample_matrix needs rows, cols >= 1".into()));
    }
    let fan_in = cols as f64;
    let fan_out = rows as f64;
    let variance = match init.distribution {
        InitDistribution::KaimingUniform | InitDistribution::Gaussian => init.scale / fan_in,
        InitDistribution::XavierNormal => 2.0 * init.scale / (fan_in + fan_out),
        InitDistribution::Zero => return Ok(Matrix::zeros(rows, cols)),
        InitDistribution::Identity => {
            if rows != cols {
                return Err(Error::Dim(format!("identity init needs square shape, got {rows}x{cols}")));
            }
            return Ok(Matrix::identity(rows));
        }
    };
    if !(init.scale > 0.0) {
        return Err(Error::Config(format!("variance scale must be positive, got {}", init.scale)));
    }
    sample_with_variance(rows, cols, init.distribution, variance, init.seed)
}

/// Draw a matrix with a given absolute per-entry variance, bypassing the
/// fan-in rule. The NTK parameterization uses this: its `1/√fan_in` forward
/// scaling already carries the fan-in factor.
pub fn sample_with_variance(
    rows: usize,
    cols: usize,
    distribution: InitDistribution,
    variance: f64,
    seed: u64,
) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dim("sampler needs rows, cols >= 1".into()));
    }
    match distribution {
        InitDistribution::Zero => return Ok(Matrix::zeros(rows, cols)),
        InitDistribution::Identity => {
            if rows != cols {
                return Err(Error::Dim(format!("identity init needs square shape, got {rows}x{cols}")));
            }
            return Ok(Matrix::identity(rows));
        }
        _ => {}
    }
    if !(variance > 0.0) {
        return Err(Error::Config(format!("variance must be positive, got {variance}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * cols);
    match distribution {
        InitDistribution::KaimingUniform => {
            // U[-limit, limit] has variance limit^2/3
            let limit = (3.0 * variance).sqrt();
            for _ in 0..rows * cols {
                data.push(rng.random_range(-limit..limit));
            }
        }
        InitDistribution::Gaussian | InitDistribution::XavierNormal => {
            let sigma = variance.sqrt();
            for _ in 0..rows * cols {
                let z: f64 = rng.sample(StandardNormal);
                data.push(sigma * z);
            }
        }
        InitDistribution::Zero | InitDistribution::Identity => unreachable!(),
    }
    Ok(Matrix { rows, cols, data })
}

/// Seeded standard-normal vector (unit variance per coordinate).
pub fn sample_std_normal_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
