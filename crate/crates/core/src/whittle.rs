//! Fourier coefficients, modified-Cholesky spectral parameterisation and the
//! Whittle likelihood.
//!
//! Spectral matrices are parameterised through `f⁻¹ = Θ Ψ⁻¹ Θ*` with `Θ`
//! unit lower triangular and `Ψ⁻¹` positive diagonal. The sampler works
//! with regression coefficients `θ_kℓ` (`k > ℓ`) that predict channel `ℓ`
//! from the later channels: the quadratic form decomposes as
//!
//! ```text
//! Y* f⁻¹ Y = Σ_k ψ⁻¹_kk |Y_k - Σ_{ℓ>k} θ_ℓk Y_ℓ|²
//! ```
//!
//! which fixes the factor entries as `Θ_kℓ = -conj(θ_kℓ)`.
//! [`CholeskyComponents::from_regression`] performs that translation.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::basis::FrequencyGrid;
use crate::error::{Error, Result};
use crate::ingest::MultiSubjectSeries;

/// Condition estimate above which a spectral matrix is rejected.
pub const MAX_CONDITION: f64 = 1e14;

/// Strictly-lower index pairs `(k, ℓ)`, zero-based, in sampling order:
/// `(1,0), (2,0), (2,1)`.
pub fn lower_pairs(p: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in 1..p {
        for l in 0..k {
            out.push((k, l));
        }
    }
    out.sort_by_key(|&(k, l)| (l != 0, k, l));
    // (1,0), (2,0), (2,1) for p = 3
    out
}

/// Position of `(k, ℓ)` within [`lower_pairs`].
pub fn pair_index(k: usize, l: usize) -> usize {
    match (k, l) {
        (1, 0) => 0,
        (2, 0) => 1,
        (2, 1) => 2,
        _ => panic!("unsupported lower pair ({k}, {l})"),
    }
}

/// Discrete Fourier coefficients `Y_jm` at the interior Fourier frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct DftData {
    grid: FrequencyGrid,
    n_subjects: usize,
    n_channels: usize,
    /// `[subject][frequency][channel]`.
    y: Vec<Complex64>,
}

impl DftData {
    /// Wraps precomputed coefficients laid out `[subject][frequency][channel]`.
    pub fn from_coefficients(
        grid: FrequencyGrid,
        n_subjects: usize,
        n_channels: usize,
        y: Vec<Complex64>,
    ) -> Result<Self> {
        if y.len() != n_subjects * grid.len() * n_channels {
            return Err(Error::Dimension(format!(
                "{} coefficients for {n_subjects} x {} x {n_channels}",
                y.len(),
                grid.len()
            )));
        }
        Ok(DftData {
            grid,
            n_subjects,
            n_channels,
            y,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_freq(&self) -> usize {
        self.grid.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    /// `Y_pjm`, zero-based.
    pub fn y(&self, j: usize, m: usize, p: usize) -> Complex64 {
        self.y[(j * self.grid.len() + m) * self.n_channels + p]
    }

    /// The channel vector `Y_jm`.
    pub fn vector(&self, j: usize, m: usize) -> &[Complex64] {
        let start = (j * self.grid.len() + m) * self.n_channels;
        &self.y[start..start + self.n_channels]
    }

    /// `|Y_pjm|²` as an `N x M` matrix.
    pub fn power(&self, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_subjects, self.n_freq(), |j, m| {
            self.y(j, m, p).norm_sqr()
        })
    }

    /// `Y_ajm conj(Y_bjm)` as an `N x M` matrix.
    pub fn cross(&self, a: usize, b: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.n_subjects, self.n_freq(), |j, m| {
            self.y(j, m, a) * self.y(j, m, b).conj()
        })
    }
}

/// `Y_jm = n^{-1/2} Σ_{t=1}^{n} X_jt exp(-2πi ω_m t)` for `m = 1..=M`.
pub fn dft(series: &MultiSubjectSeries) -> DftData {
    let n = series.n_time();
    let grid = FrequencyGrid::new(n).expect("validated series length");
    let m_count = grid.len();
    let p_count = series.n_channels();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let norm = 1.0 / (n as f64).sqrt();
    let mut y = vec![Complex64::new(0.0, 0.0); series.n_subjects() * m_count * p_count];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..series.n_subjects() {
        for p in 0..p_count {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(series.value(j, t, p), 0.0);
            }
            fft.process(&mut buf);
            for m in 1..=m_count {
                // The FFT indexes time from 0; the t = 1..n convention adds
                // one sample of phase.
                let phase =
                    Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * m as f64 / n as f64);
                y[(j * m_count + m - 1) * p_count + p] = buf[m] * phase * norm;
            }
        }
    }
    DftData {
        grid,
        n_subjects: series.n_subjects(),
        n_channels: p_count,
        y,
    }
}

/// Periodogram matrix `Y_jm Y_jm*`.
pub fn periodogram(data: &DftData, j: usize, m: usize) -> DMatrix<Complex64> {
    let v = data.vector(j, m);
    DMatrix::from_fn(v.len(), v.len(), |a, b| v[a] * v[b].conj())
}

/// Hermitian matrix of order at most 3 stored as a real diagonal and a
/// strictly lower triangle in [`lower_pairs`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackedHermitian {
    dim: usize,
    diag: [f64; 3],
    lower: [Complex64; 3],
}

impl PackedHermitian {
    pub fn identity(dim: usize) -> Self {
        assert!((1..=3).contains(&dim));
        let mut diag = [0.0; 3];
        diag[..dim].iter_mut().for_each(|d| *d = 1.0);
        PackedHermitian {
            dim,
            diag,
            lower: [Complex64::new(0.0, 0.0); 3],
        }
    }

    pub fn from_full(m: &DMatrix<Complex64>) -> Result<Self> {
        let dim = m.nrows();
        if dim != m.ncols() || !(1..=3).contains(&dim) {
            return Err(Error::Dimension(format!(
                "expected a square matrix of order 1..=3, got {:?}",
                m.shape()
            )));
        }
        let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        let mut out = PackedHermitian::identity(dim);
        for k in 0..dim {
            if m[(k, k)].im.abs() > 1e-10 * scale {
                return Err(Error::InvalidInput("diagonal is not real".into()));
            }
            out.diag[k] = m[(k, k)].re;
        }
        for (i, (k, l)) in lower_pairs(dim).into_iter().enumerate() {
            if (m[(k, l)] - m[(l, k)].conj()).norm() > 1e-10 * scale {
                return Err(Error::InvalidInput("matrix is not Hermitian".into()));
            }
            out.lower[i] = m[(k, l)];
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry `(a, b)` of the full matrix.
    pub fn get(&self, a: usize, b: usize) -> Complex64 {
        if a == b {
            Complex64::new(self.diag[a], 0.0)
        } else if a > b {
            self.lower[pair_index(a, b)]
        } else {
            self.lower[pair_index(b, a)].conj()
        }
    }

    pub fn to_full(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.dim, |a, b| self.get(a, b))
    }

    fn frobenius(&self) -> f64 {
        let d: f64 = self.diag[..self.dim].iter().map(|x| x * x).sum();
        let l: f64 = self.lower[..self.dim * (self.dim - 1) / 2]
            .iter()
            .map(|z| z.norm_sqr())
            .sum();
        (d + 2.0 * l).sqrt()
    }
}

/// Factor entries of `f⁻¹ = Θ Ψ⁻¹ Θ*` at one `(ω, u)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CholeskyComponents {
    dim: usize,
    /// `Θ_kℓ` for `k > ℓ`, in [`lower_pairs`] order.
    theta: [Complex64; 3],
    /// `Ψ⁻¹_kk`.
    psi_inv: [f64; 3],
}

impl CholeskyComponents {
    pub fn new(dim: usize, theta: &[Complex64], psi_inv: &[f64]) -> Result<Self> {
        if !(1..=3).contains(&dim) || theta.len() != dim * (dim - 1) / 2 || psi_inv.len() != dim {
            return Err(Error::Dimension(format!(
                "components of order {dim} need {} off-diagonal and {dim} diagonal entries",
                dim * (dim - 1) / 2
            )));
        }
        if let Some(d) = psi_inv.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::Domain(format!("Ψ⁻¹ entry {d} is not positive")));
        }
        let mut t = [Complex64::new(0.0, 0.0); 3];
        t[..theta.len()].copy_from_slice(theta);
        let mut p = [0.0; 3];
        p[..dim].copy_from_slice(psi_inv);
        Ok(CholeskyComponents {
            dim,
            theta: t,
            psi_inv: p,
        })
    }

    /// Components from the sampler's regression coefficients `θ_kℓ`, using
    /// `Θ_kℓ = -conj(θ_kℓ)`.
    pub fn from_regression(dim: usize, regression: &[Complex64], psi_inv: &[f64]) -> Result<Self> {
        let theta: Vec<Complex64> = regression.iter().map(|z| -z.conj()).collect();
        Self::new(dim, &theta, psi_inv)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &[Complex64] {
        &self.theta[..self.dim * (self.dim - 1) / 2]
    }

    pub fn psi_inv(&self) -> &[f64] {
        &self.psi_inv[..self.dim]
    }

    /// Regression coefficients `θ_kℓ = -conj(Θ_kℓ)`.
    pub fn regression(&self) -> Vec<Complex64> {
        self.theta().iter().map(|z| -z.conj()).collect()
    }

    /// Unit lower-triangular `Θ` as a full matrix.
    pub fn theta_matrix(&self) -> DMatrix<Complex64> {
        let mut t = DMatrix::identity(self.dim, self.dim);
        for (i, (k, l)) in lower_pairs(self.dim).into_iter().enumerate() {
            t[(k, l)] = self.theta[i];
        }
        t
    }

    /// `Θ Ψ⁻¹ Θ*`, the inverse spectral matrix.
    pub fn precision(&self) -> PackedHermitian {
        let t = self.theta_matrix();
        let mut out = PackedHermitian::identity(self.dim);
        let entry = |a: usize, b: usize| -> Complex64 {
            (0..=a.min(b))
                .map(|c| t[(a, c)] * self.psi_inv[c] * t[(b, c)].conj())
                .sum()
        };
        for k in 0..self.dim {
            out.diag[k] = entry(k, k).re;
        }
        for (i, (k, l)) in lower_pairs(self.dim).into_iter().enumerate() {
            out.lower[i] = entry(k, l);
        }
        out
    }
}

fn unit_lower_inverse(t: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = t.nrows();
    let mut inv = DMatrix::identity(n, n);
    for col in 0..n {
        for row in col + 1..n {
            let s: Complex64 = (col..row).map(|c| t[(row, c)] * inv[(c, col)]).sum();
            inv[(row, col)] = -s;
        }
    }
    inv
}

/// `f = (Θ Ψ⁻¹ Θ*)⁻¹ = Θ^{-*} Ψ Θ^{-1}`.
pub fn cholesky_to_spectrum(c: &CholeskyComponents) -> Result<PackedHermitian> {
    let f = spectrum_unchecked(c);
    let condition = c.precision().frobenius() * f.frobenius();
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular { condition });
    }
    Ok(f)
}

/// [`cholesky_to_spectrum`] without the conditioning check, for hot loops
/// over posterior draws.
pub fn spectrum_unchecked(c: &CholeskyComponents) -> PackedHermitian {
    let dim = c.dim;
    let tinv = unit_lower_inverse(&c.theta_matrix());
    let entry = |a: usize, b: usize| -> Complex64 {
        // (Θ^{-*} Ψ Θ^{-1})_{ab} = Σ_c conj(tinv[c, a]) ψ_c tinv[c, b]
        (a.max(b)..dim)
            .map(|k| tinv[(k, a)].conj() * (1.0 / c.psi_inv[k]) * tinv[(k, b)])
            .sum()
    };
    let mut out = PackedHermitian::identity(dim);
    for k in 0..dim {
        out.diag[k] = entry(k, k).re;
    }
    for (i, (k, l)) in lower_pairs(dim).into_iter().enumerate() {
        out.lower[i] = entry(k, l);
    }
    out
}

/// Unique `(Θ, Ψ⁻¹)` with `f⁻¹ = Θ Ψ⁻¹ Θ*`.
pub fn spectrum_to_cholesky(f: &PackedHermitian) -> Result<CholeskyComponents> {
    let dim = f.dim;
    let full = f.to_full();
    let chol = full
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("spectral matrix".into()))?;
    let b = chol.inverse();
    // LDL* of b.
    let mut l = DMatrix::<Complex64>::identity(dim, dim);
    let mut d = vec![0.0; dim];
    for j in 0..dim {
        let mut dj = b[(j, j)].re;
        for k in 0..j {
            dj -= l[(j, k)].norm_sqr() * d[k];
        }
        if !(dj > 0.0) {
            return Err(Error::NotPositiveDefinite("inverse spectral matrix".into()));
        }
        d[j] = dj;
        for i in j + 1..dim {
            let mut s = b[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj() * d[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    let theta: Vec<Complex64> = lower_pairs(dim)
        .into_iter()
        .map(|(k, l_)| l[(k, l_)])
        .collect();
    CholeskyComponents::new(dim, &theta, &d)
}

/// Log of the Whittle likelihood, `Σ_{j,m} [log det f⁻¹ - Y* f⁻¹ Y]`, with
/// `f_eval` laid out subject-major (`j * M + m`).
///
/// Subject partial sums are computed in parallel and added in subject
/// order, so the result does not depend on the thread count.
pub fn whittle_loglik(data: &DftData, f_eval: &[PackedHermitian]) -> Result<f64> {
    let (n, m) = (data.n_subjects(), data.n_freq());
    if f_eval.len() != n * m {
        return Err(Error::Dimension(format!(
            "{} spectral matrices for {n} x {m} coefficients",
            f_eval.len()
        )));
    }
    let partial: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut acc = 0.0;
            for k in 0..m {
                acc += whittle_term(data.vector(j, k), &f_eval[j * m + k])?;
            }
            Ok(acc)
        })
        .collect();
    partial.into_iter().sum()
}

fn whittle_term(y: &[Complex64], f: &PackedHermitian) -> Result<f64> {
    let full = f.to_full();
    let chol = full
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("spectral matrix in likelihood".into()))?;
    let l = chol.l();
    let log_det_f: f64 = (0..f.dim).map(|k| 2.0 * l[(k, k)].re.ln()).sum();
    let yv = nalgebra::DVector::from_column_slice(y);
    let z = l
        .solve_lower_triangular(&yv)
        .ok_or_else(|| Error::NotPositiveDefinite("spectral matrix in likelihood".into()))?;
    Ok(-log_det_f - z.norm_squared())
}

/// Current regression coefficients `θ_kℓ(ω_m, u_j)` for every lower pair,
/// each an `N x M` complex array.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaField {
    dim: usize,
    entries: Vec<DMatrix<Complex64>>,
}

impl ThetaField {
    pub fn zeros(dim: usize, n_subjects: usize, n_freq: usize) -> Self {
        ThetaField {
            dim,
            entries: lower_pairs(dim)
                .iter()
                .map(|_| DMatrix::from_element(n_subjects, n_freq, Complex64::new(0.0, 0.0)))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize, l: usize) -> &DMatrix<Complex64> {
        &self.entries[pair_index(k, l)]
    }

    pub fn set(&mut self, k: usize, l: usize, value: DMatrix<Complex64>) {
        self.entries[pair_index(k, l)] = value;
    }

    pub fn at(&self, k: usize, l: usize, j: usize, m: usize) -> Complex64 {
        self.entries[pair_index(k, l)][(j, m)]
    }
}

/// Residual powers `v_kjm` entering the diagonal-component density, for
/// zero-based channel `k`, written out term by term.
pub fn residual_v(k: usize, data: &DftData, theta: &ThetaField) -> Result<DMatrix<f64>> {
    let p = data.n_channels();
    if k >= p || theta.dim() != p {
        return Err(Error::Dimension(format!(
            "channel {k} requested for a {p}-channel model"
        )));
    }
    let (n, m) = (data.n_subjects(), data.n_freq());
    let mut v = DMatrix::zeros(n, m);
    for j in 0..n {
        for w in 0..m {
            let y = data.vector(j, w);
            v[(j, w)] = match (p, k) {
                (_, 0) if p == 1 => y[0].norm_sqr(),
                (2, 0) => {
                    let t21 = theta.at(1, 0, j, w);
                    y[0].norm_sqr() + (t21 * y[1]).norm_sqr() - 2.0 * (t21 * y[0].conj() * y[1]).re
                }
                (3, 0) => {
                    let t21 = theta.at(1, 0, j, w);
                    let t31 = theta.at(2, 0, j, w);
                    y[0].norm_sqr() + (t21 * y[1]).norm_sqr() + (t31 * y[2]).norm_sqr()
                        - 2.0
                            * (t21 * y[0].conj() * y[1] + t31 * y[0].conj() * y[2]
                                - t21.conj() * t31 * y[1].conj() * y[2])
                                .re
                }
                (3, 1) => {
                    let t32 = theta.at(2, 1, j, w);
                    y[1].norm_sqr() + (t32 * y[2]).norm_sqr() - 2.0 * (t32 * y[1].conj() * y[2]).re
                }
                (_, _) => y[k].norm_sqr(),
            };
        }
    }
    Ok(v)
}
