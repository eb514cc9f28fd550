//! The conditional MA(2) simulation design: data generator, closed-form
//! true spectrum, error metrics, two-stage baselines and the replicate
//! driver.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{kernel_h, FrequencyGrid, Rank};
use crate::error::{Error, Result};
use crate::ingest::MultiSubjectSeries;
use crate::sampler::{run_chain, ModelConfig};
use crate::summaries::{
    coherence_pairs, default_band_curves, unit_grid, Band, BandKind, DEFAULT_U_POINTS, HF_BAND,
    LF_BAND,
};
use crate::whittle::{dft, DftData, PackedHermitian};

/// Channel count of the design.
pub const MA2_CHANNELS: usize = 3;
/// Default multiplier on the rule-of-thumb local-linear bandwidth.
pub const DEFAULT_BANDWIDTH_FACTOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ma2Config {
    pub n_subjects: usize,
    pub n_time: usize,
    pub seed: u64,
}

/// Innovation variance `σ²(u) = (2 - u)²`.
pub fn sigma2(u: f64) -> f64 {
    (2.0 - u) * (2.0 - u)
}

/// Innovation correlation `ρ(u) = 0.6 + 0.25 cos(πu)`.
pub fn rho(u: f64) -> f64 {
    0.6 + 0.25 * (PI * u).cos()
}

/// Equicorrelated innovation covariance `Ω(u)`.
pub fn omega_matrix(u: f64) -> Matrix3<f64> {
    let s = sigma2(u);
    let r = rho(u);
    Matrix3::from_fn(|a, b| if a == b { s } else { s * r })
}

/// Scalar transfer function `θ(ω) = 1 - e^{-2πiω} + 0.6 e^{-4πiω}`.
pub fn transfer(omega: f64) -> Complex64 {
    Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -2.0 * PI * omega)
        + Complex64::from_polar(0.6, -4.0 * PI * omega)
}

/// `f(ω, u) = |θ(ω)|² Ω(u)`.
pub fn true_spectrum_ma2(omega: f64, u: f64) -> Result<PackedHermitian> {
    if !(0.0..=0.5).contains(&omega) || !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!(
            "(ω, u) = ({omega}, {u}) outside [0, 1/2] x [0, 1]"
        )));
    }
    let g = transfer(omega).norm_sqr();
    let om = omega_matrix(u);
    let full = DMatrix::from_fn(3, 3, |a, b| Complex64::new(g * om[(a, b)], 0.0));
    PackedHermitian::from_full(&full)
}

/// Simulates `X_jt = ε_jt - ε_{j,t-1} + 0.6 ε_{j,t-2}` with
/// `ε ~ N(0, Ω(j/N))`, drawing the two pre-sample innovations so `X_1` is
/// stationary.
pub fn generate_ma2(cfg: &Ma2Config) -> Result<MultiSubjectSeries> {
    let (nsub, n) = (cfg.n_subjects, cfg.n_time);
    if nsub < 2 || n < crate::ingest::MIN_SERIES_LENGTH {
        return Err(Error::InvalidInput(format!(
            "MA(2) design needs N >= 2 and n >= {}",
            crate::ingest::MIN_SERIES_LENGTH
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(nsub * n * 3);
    let mut outcomes = Vec::with_capacity(nsub);
    for j in 1..=nsub {
        let u = j as f64 / nsub as f64;
        outcomes.push(u);
        let l = omega_matrix(u)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
            .l();
        let eps: Vec<[f64; 3]> = (0..n + 2)
            .map(|_| {
                let z = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let e = l * z;
                [e[0], e[1], e[2]]
            })
            .collect();
        for t in 2..n + 2 {
            for p in 0..3 {
                data.push(eps[t][p] - eps[t - 1][p] + 0.6 * eps[t - 2][p]);
            }
        }
    }
    let ids = (1..=nsub).map(|j| format!("s{j:04}")).collect();
    MultiSubjectSeries::from_unit_outcomes(ids, n, 3, data, outcomes)
}

/// Trapezoidal `∫ (est - truth)²` on a common equally spaced grid.
pub fn ise(estimate: &[f64], truth: &[f64], us: &[f64]) -> Result<f64> {
    check_grid(estimate, truth, us)?;
    let n = us.len();
    let d2: Vec<f64> = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .collect();
    let mut acc = 0.0;
    for i in 0..n - 1 {
        acc += 0.5 * (d2[i] + d2[i + 1]) * (us[i + 1] - us[i]);
    }
    Ok(acc)
}

/// Fraction of grid points with `lower <= truth <= upper`.
pub fn coverage(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<f64> {
    if lower.len() != truth.len() || upper.len() != truth.len() || truth.is_empty() {
        return Err(Error::Dimension("coverage curves differ in length".into()));
    }
    let hits = lower
        .iter()
        .zip(upper)
        .zip(truth)
        .filter(|((l, h), t)| *l <= *t && *t <= *h)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

fn check_grid(a: &[f64], b: &[f64], us: &[f64]) -> Result<()> {
    if a.len() != us.len() || b.len() != us.len() || us.len() < 2 {
        return Err(Error::Dimension("curves and grid differ in length".into()));
    }
    Ok(())
}

fn band_mean_true(n: usize, band: Band, u: f64, a: usize, b: usize) -> Result<f64> {
    let grid = FrequencyGrid::new(n)?;
    let idx = grid.band_indices(band.lo, band.hi);
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty band".into()));
    }
    let mut acc = 0.0;
    for &m in &idx {
        acc += true_spectrum_ma2(grid.omegas()[m], u)?.get(a, b).re;
    }
    Ok(acc / idx.len() as f64)
}

/// True value of a band functional on `us`, with band averages over the
/// Fourier frequencies of length-`n` series.
pub fn true_band_curve(kind: BandKind, n: usize, us: &[f64]) -> Result<Vec<f64>> {
    us.iter()
        .map(|&u| match kind {
            BandKind::Power { p } => band_mean_true(n, HF_BAND, u, p, p),
            BandKind::Ratio { p } => {
                Ok(band_mean_true(n, LF_BAND, u, p, p)? / band_mean_true(n, HF_BAND, u, p, p)?)
            }
            BandKind::Coherence { p, q } => {
                let c = band_mean_true(n, HF_BAND, u, p, q)?;
                Ok(c * c
                    / (band_mean_true(n, HF_BAND, u, p, p)? * band_mean_true(n, HF_BAND, u, q, q)?))
            }
            BandKind::CoherenceDerivative { .. } => {
                let r = rho(u);
                Ok(2.0 * r * (-0.25 * PI * (PI * u).sin()))
            }
        })
        .collect()
}

/// How stage 1 collapses periodogram ordinates within a band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1 {
    #[default]
    Average,
    Sum,
}

fn raw_band(data: &DftData, j: usize, p: usize, band: Band, stage1: Stage1) -> Result<f64> {
    let idx = data.grid().band_indices(band.lo, band.hi);
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty band".into()));
    }
    let s: f64 = idx.iter().map(|&m| data.y(j, m, p).norm_sqr()).sum();
    Ok(match stage1 {
        Stage1::Average => s / idx.len() as f64,
        Stage1::Sum => s,
    })
}

/// Stage-1 raw measures per subject: HF power for each channel, then
/// LF/HF for each channel.
pub fn raw_measures(data: &DftData, stage1: Stage1) -> Result<Vec<(BandKind, Vec<f64>)>> {
    let p = data.n_channels();
    let mut out = Vec::new();
    for c in 0..p {
        let v = (0..data.n_subjects())
            .map(|j| raw_band(data, j, c, HF_BAND, stage1))
            .collect::<Result<Vec<_>>>()?;
        out.push((BandKind::Power { p: c }, v));
    }
    for c in 0..p {
        let v = (0..data.n_subjects())
            .map(|j| {
                Ok(raw_band(data, j, c, LF_BAND, stage1)? / raw_band(data, j, c, HF_BAND, stage1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((BandKind::Ratio { p: c }, v));
    }
    Ok(out)
}

/// Cubic smoothing spline `f = d0 + d1 u + Σ c_i H(u, u_i)` with its
/// penalty weight `Nλ` chosen by generalized cross-validation.
#[derive(Clone, Debug)]
pub struct SmoothingSpline {
    knots: Vec<f64>,
    c: DVector<f64>,
    d: [f64; 2],
    /// Selected `Nλ`.
    pub penalty: f64,
    pub gcv: f64,
}

/// Quantities of the GCV criterion that do not depend on `λ`.
pub struct GcvProblem {
    knots: Vec<f64>,
    y: DVector<f64>,
    t: DMatrix<f64>,
    k: DMatrix<f64>,
    q2u: DMatrix<f64>,
    lambda: Vec<f64>,
    z: Vec<f64>,
}

impl GcvProblem {
    pub fn new(u: &[f64], y: &[f64]) -> Result<Self> {
        let n = u.len();
        if n != y.len() || n < 3 {
            return Err(Error::Dimension(
                "spline needs at least 3 paired points".into(),
            ));
        }
        let (lo, hi) = u
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                (a.min(x), b.max(x))
            });
        if !(hi > lo) {
            return Err(Error::InvalidInput(
                "GCV is degenerate for constant u".into(),
            ));
        }
        let t = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { u[i] });
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for l in 0..n {
                k[(i, l)] = kernel_h(u[i], u[l])?;
            }
        }
        // Orthonormal basis of the complement of span(T): the unit
        // eigenspace of the residual projector.
        let tt_inv = (t.transpose() * &t)
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("GCV is degenerate for constant u".into()))?;
        let proj = DMatrix::<f64>::identity(n, n) - &t * tt_inv * t.transpose();
        let pe = ((&proj + proj.transpose()) * 0.5).symmetric_eigen();
        let keep: Vec<usize> = (0..n).filter(|&i| pe.eigenvalues[i] > 0.5).collect();
        let q2 = DMatrix::from_fn(n, keep.len(), |r, c| pe.eigenvectors[(r, keep[c])]);
        let inner = q2.transpose() * &k * &q2;
        let inner = (&inner + inner.transpose()) * 0.5;
        let eig = inner.symmetric_eigen();
        let q2u = &q2 * &eig.eigenvectors;
        let yv = DVector::from_column_slice(y);
        let z = (q2u.transpose() * &yv).iter().copied().collect();
        Ok(GcvProblem {
            knots: u.to_vec(),
            y: yv,
            t,
            k,
            q2u,
            lambda: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
            z,
        })
    }

    /// `N · RSS / tr(I - A)²` at penalty weight `Nλ = rho`.
    pub fn score(&self, rho: f64) -> f64 {
        let n = self.y.len() as f64;
        let mut rss = 0.0;
        let mut tr = 0.0;
        for (l, z) in self.lambda.iter().zip(&self.z) {
            let s = rho / (l + rho);
            rss += s * s * z * z;
            tr += s;
        }
        n * rss / (tr * tr)
    }

    /// Largest kernel eigenvalue, which sets the natural penalty scale.
    pub fn scale(&self) -> f64 {
        self.lambda.iter().cloned().fold(0.0, f64::max).max(1e-300)
    }

    pub fn fit(&self, rho: f64) -> Result<SmoothingSpline> {
        let w = DVector::from_iterator(
            self.z.len(),
            self.lambda.iter().zip(&self.z).map(|(l, z)| z / (l + rho)),
        );
        let c = &self.q2u * w;
        let resid = &self.y - &self.k * &c - &c * rho;
        let tt = self.t.transpose() * &self.t;
        let d = tt
            .cholesky()
            .ok_or(Error::Singular {
                condition: f64::INFINITY,
            })?
            .solve(&(self.t.transpose() * resid));
        Ok(SmoothingSpline {
            knots: self.knots.clone(),
            c,
            d: [d[0], d[1]],
            penalty: rho,
            gcv: self.score(rho),
        })
    }

    /// Log-spaced search over `[1e-10, 1e6]` times the kernel scale, then
    /// golden-section refinement around the best grid point. Ties go to
    /// the heavier penalty.
    pub fn select(&self) -> Result<SmoothingSpline> {
        let s = self.scale();
        let (lo, hi, steps) = ((1e-10 * s).ln(), (1e6 * s).ln(), 161usize);
        let grid: Vec<f64> = (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut best = steps - 1;
        for i in (0..steps).rev() {
            if self.score(grid[i].exp()) < self.score(grid[best].exp()) {
                best = i;
            }
        }
        let a = grid[best.saturating_sub(1)];
        let b = grid[(best + 1).min(steps - 1)];
        let x = golden_section(|x| self.score(x.exp()), a, b, 1e-8);
        let rho = if self.score(x.exp()) < self.score(grid[best].exp()) {
            x.exp()
        } else {
            grid[best].exp()
        };
        self.fit(rho)
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

impl SmoothingSpline {
    pub fn eval(&self, u: f64) -> Result<f64> {
        let mut v = self.d[0] + self.d[1] * u;
        for (ci, &ki) in self.c.iter().zip(&self.knots) {
            v += ci * kernel_h(u, ki)?;
        }
        Ok(v)
    }
}

/// GCV smoothing spline of `y` on `u`, evaluated on `grid`.
pub fn spline_smooth(u: &[f64], y: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let fit = GcvProblem::new(u, y)?.select()?;
    grid.iter().map(|&g| fit.eval(g)).collect()
}

/// Rule-of-thumb bandwidth `factor · 1.06 · sd(u) · N^{-1/5}`.
pub fn plugin_bandwidth(u: &[f64], factor: f64) -> f64 {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let sd = (u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    factor * 1.06 * sd * n.powf(-0.2)
}

/// Local linear regression with the Epanechnikov kernel.
pub fn local_linear(u: &[f64], y: &[f64], grid: &[f64], h: f64) -> Result<Vec<f64>> {
    if u.len() != y.len() || u.len() < 2 {
        return Err(Error::Dimension("local linear needs paired points".into()));
    }
    let mut sorted = u.to_vec();
    sorted.sort_by(f64::total_cmp);
    let gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    if !(h > gap) {
        return Err(Error::InvalidInput(format!(
            "bandwidth {h} is below the largest gap {gap}"
        )));
    }
    grid.iter()
        .map(|&x| {
            let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut inside = 0;
            for (&ui, &yi) in u.iter().zip(y) {
                let r = (ui - x) / h;
                if r.abs() >= 1.0 {
                    continue;
                }
                inside += 1;
                let w = 0.75 * (1.0 - r * r);
                let dx = ui - x;
                s0 += w;
                s1 += w * dx;
                s2 += w * dx * dx;
                t0 += w * yi;
                t1 += w * dx * yi;
            }
            if inside < 2 {
                return Err(Error::InvalidInput(format!(
                    "bandwidth {h} leaves fewer than two observations near u = {x}"
                )));
            }
            let det = s0 * s2 - s1 * s1;
            if !(det > 1e-14 * s0 * s2) {
                return Err(Error::Numerical(format!(
                    "local linear design singular at u = {x}"
                )));
            }
            Ok((s2 * t0 - s1 * t1) / det)
        })
        .collect()
}

/// Spline baseline curves for the within-channel measures.
pub fn two_stage_spline(
    data: &MultiSubjectSeries,
    stage1: Stage1,
    grid: &[f64],
) -> Result<Vec<(BandKind, Vec<f64>)>> {
    raw_measures(&dft(data), stage1)?
        .into_iter()
        .map(|(k, y)| Ok((k, spline_smooth(data.outcomes(), &y, grid)?)))
        .collect()
}

/// Local-linear baseline curves for the within-channel measures.
pub fn two_stage_local(
    data: &MultiSubjectSeries,
    stage1: Stage1,
    factor: f64,
    grid: &[f64],
) -> Result<Vec<(BandKind, Vec<f64>)>> {
    let h = plugin_bandwidth(data.outcomes(), factor);
    raw_measures(&dft(data), stage1)?
        .into_iter()
        .map(|(k, y)| Ok((k, local_linear(data.outcomes(), &y, grid, h)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Bayes,
    TwoStageSpline,
    TwoStageLocal,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Bayes => "bayes",
            Estimator::TwoStageSpline => "two-stage-spline",
            Estimator::TwoStageLocal => "two-stage-local",
        }
    }
}

/// Scores of one estimator on one measure in one replicate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub estimator: Estimator,
    pub kind: BandKind,
    pub ise: f64,
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub data_seed: u64,
    pub chain_seed: u64,
    pub scores: Vec<Score>,
    pub acceptance: Vec<f64>,
    pub mean_iteration_seconds: f64,
    pub error: Option<String>,
}

/// Settings of a simulation study beyond the model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub n_subjects: usize,
    pub n_time: usize,
    pub seed: u64,
    pub u_points: usize,
    pub stage1: Stage1,
    pub bandwidth_factor: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replicates: 20,
            n_subjects: 25,
            n_time: 300,
            seed: 1,
            u_points: DEFAULT_U_POINTS,
            stage1: Stage1::Average,
            bandwidth_factor: DEFAULT_BANDWIDTH_FACTOR,
        }
    }
}

/// Data and chain seeds of replicate `index`, drawn from stream `index` of
/// the master generator.
pub fn replicate_seeds(master: u64, index: usize) -> (u64, u64) {
    let mut r = ChaCha20Rng::seed_from_u64(master);
    r.set_stream(index as u64);
    (r.next_u64(), r.next_u64())
}

/// Runs one replicate: simulate, fit all three estimators, score against
/// the truth.
pub fn run_replicate(index: usize, study: &StudyConfig, model: &ModelConfig) -> ReplicateResult {
    let (data_seed, chain_seed) = replicate_seeds(study.seed, index);
    let mut result = ReplicateResult {
        index,
        data_seed,
        chain_seed,
        scores: Vec::new(),
        acceptance: Vec::new(),
        mean_iteration_seconds: 0.0,
        error: None,
    };
    if let Err(e) = score_replicate(study, model, &mut result) {
        result.scores.clear();
        result.error = Some(e.to_string());
    }
    result
}

fn score_replicate(
    study: &StudyConfig,
    model: &ModelConfig,
    out: &mut ReplicateResult,
) -> Result<()> {
    let data = generate_ma2(&Ma2Config {
        n_subjects: study.n_subjects,
        n_time: study.n_time,
        seed: out.data_seed,
    })?;
    let us = unit_grid(study.u_points)?;
    let config = ModelConfig {
        seed: out.chain_seed,
        ..model.clone()
    };
    let draws = run_chain(&data, &config)?;
    out.acceptance = draws.diagnostics.acceptance_rates();
    out.mean_iteration_seconds = draws.mean_iteration_seconds();
    for curve in default_band_curves(&draws, LF_BAND, HF_BAND, &us)? {
        let truth = true_band_curve(curve.kind, study.n_time, &us)?;
        out.scores.push(Score {
            estimator: Estimator::Bayes,
            kind: curve.kind,
            ise: ise(&curve.mean, &truth, &us)?,
            coverage: Some(coverage(&curve.lower95, &curve.upper95, &truth)?),
        });
    }
    let baselines = [
        (
            Estimator::TwoStageSpline,
            two_stage_spline(&data, study.stage1, &us)?,
        ),
        (
            Estimator::TwoStageLocal,
            two_stage_local(&data, study.stage1, study.bandwidth_factor, &us)?,
        ),
    ];
    for (est, curves) in baselines {
        for (kind, fit) in curves {
            let mut truth = true_band_curve(kind, study.n_time, &us)?;
            if let (Stage1::Sum, BandKind::Power { .. }) = (study.stage1, kind) {
                let w = FrequencyGrid::new(study.n_time)?
                    .band_indices(HF_BAND.lo, HF_BAND.hi)
                    .len() as f64;
                truth.iter_mut().for_each(|t| *t *= w);
            }
            if let (Stage1::Sum, BandKind::Ratio { .. }) = (study.stage1, kind) {
                let g = FrequencyGrid::new(study.n_time)?;
                let w = g.band_indices(LF_BAND.lo, LF_BAND.hi).len() as f64
                    / g.band_indices(HF_BAND.lo, HF_BAND.hi).len() as f64;
                truth.iter_mut().for_each(|t| *t *= w);
            }
            out.scores.push(Score {
                estimator: est,
                kind,
                ise: ise(&fit, &truth, &us)?,
                coverage: None,
            });
        }
    }
    Ok(())
}

/// Aggregate of one (measure, estimator) cell across replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: BandKind,
    pub estimator: Estimator,
    pub ise_mean: f64,
    pub ise_sd: f64,
    pub coverage_mean: Option<f64>,
    pub coverage_sd: Option<f64>,
    pub replicates: usize,
}

impl ReportRow {
    /// Multiplier applied to ISE columns in the report file.
    pub fn ise_scale(&self) -> f64 {
        match self.kind {
            BandKind::Ratio { .. } => 1e5,
            _ => 1e3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: StudyConfig,
    pub replicates: Vec<ReplicateResult>,
    pub rows: Vec<ReportRow>,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Measure order of the report: HF power, LF/HF, then band coherence.
pub fn report_kinds() -> Vec<BandKind> {
    let mut k: Vec<BandKind> = (0..MA2_CHANNELS).map(|p| BandKind::Power { p }).collect();
    k.extend((0..MA2_CHANNELS).map(|p| BandKind::Ratio { p }));
    k.extend(
        coherence_pairs(MA2_CHANNELS)
            .into_iter()
            .map(|(p, q)| BandKind::Coherence { p, q }),
    );
    k
}

impl StudyReport {
    pub fn aggregate(study: StudyConfig, replicates: Vec<ReplicateResult>) -> Self {
        let mut rows = Vec::new();
        for est in [
            Estimator::Bayes,
            Estimator::TwoStageSpline,
            Estimator::TwoStageLocal,
        ] {
            for kind in report_kinds() {
                let cell: Vec<&Score> = replicates
                    .iter()
                    .flat_map(|r| r.scores.iter())
                    .filter(|s| s.estimator == est && s.kind == kind)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let ises: Vec<f64> = cell.iter().map(|s| s.ise).collect();
                let covs: Vec<f64> = cell.iter().filter_map(|s| s.coverage).collect();
                let (ise_mean, ise_sd) = mean_sd(&ises);
                let (cm, cs) = if covs.is_empty() {
                    (None, None)
                } else {
                    let (a, b) = mean_sd(&covs);
                    (Some(a), Some(b))
                };
                rows.push(ReportRow {
                    kind,
                    estimator: est,
                    ise_mean,
                    ise_sd,
                    coverage_mean: cm,
                    coverage_sd: cs,
                    replicates: cell.len(),
                });
            }
        }
        StudyReport {
            study,
            replicates,
            rows,
        }
    }

    pub fn row(&self, estimator: Estimator, kind: BandKind) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.kind == kind)
    }

    pub fn failed(&self) -> usize {
        self.replicates.iter().filter(|r| r.error.is_some()).count()
    }

    /// One row per (measure, estimator); ISE columns are multiplied by
    /// `ise_scale`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "measure,estimator,ise_scale,ise_mean,ise_sd,coverage_mean,coverage_sd,replicates\n",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let s = r.ise_scale();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.kind.stem(),
                r.estimator.name(),
                s,
                r.ise_mean * s,
                r.ise_sd * s,
                opt(r.coverage_mean),
                opt(r.coverage_sd),
                r.replicates
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::ingest::write_file(path, self.to_csv().as_bytes())
    }
}

/// Runs `study.replicates` independent replicates in parallel and
/// aggregates them in replicate order.
pub fn run_study(study: &StudyConfig, model: &ModelConfig) -> Result<StudyReport> {
    if study.replicates == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    model.validate()?;
    let reps: Vec<ReplicateResult> = (0..study.replicates)
        .into_par_iter()
        .map(|i| run_replicate(i, study, model))
        .collect();
    Ok(StudyReport::aggregate(study.clone(), reps))
}

/// Model settings of the simulation design with fixed ranks.
pub fn study_model(iterations: usize, burn_in: usize) -> ModelConfig {
    ModelConfig {
        n_j: Rank::Fixed(10),
        n_h: Rank::Fixed(5),
        iterations,
        burn_in,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn true_spectrum_values() {
        let f = true_spectrum_ma2(0.0, 0.0).unwrap();
        assert!((f.get(0, 0).re - 1.44).abs() < 1e-12);
        let f = true_spectrum_ma2(0.3, 0.0).unwrap();
        let r2 = f.get(0, 1).norm_sqr() / (f.get(0, 0).re * f.get(1, 1).re);
        assert!((r2 - 0.7225).abs() < 1e-12);
        assert!(true_spectrum_ma2(0.6, 0.0).is_err());
    }

    #[test]
    fn ise_oracles() {
        let us = unit_grid(201).unwrap();
        let t: Vec<f64> = us.iter().map(|u| u.sin()).collect();
        assert_eq!(ise(&t, &t, &us).unwrap(), 0.0);
        let plus1: Vec<f64> = t.iter().map(|x| x + 1.0).collect();
        assert!((ise(&plus1, &t, &us).unwrap() - 1.0).abs() < 1e-12);
        let plus_u: Vec<f64> = t.iter().zip(&us).map(|(x, u)| x + u).collect();
        assert!((ise(&plus_u, &t, &us).unwrap() - 1.0 / 3.0).abs() < 1e-4);
        assert!(ise(&t[..3], &t, &us).is_err());
    }

    #[test]
    fn coverage_closed_intervals() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(coverage(&t, &t, &t).unwrap(), 1.0);
        assert_eq!(coverage(&[5.0; 3], &[6.0; 3], &t).unwrap(), 0.0);
        assert_eq!(
            coverage(&[0.0, 2.5, 0.0], &[9.0; 3], &t).unwrap(),
            2.0 / 3.0
        );
    }

    #[test]
    fn seeds_differ_between_replicates() {
        assert_ne!(replicate_seeds(1, 0), replicate_seeds(1, 1));
        assert_eq!(replicate_seeds(1, 3), replicate_seeds(1, 3));
    }
}
