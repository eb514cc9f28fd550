//! Spectral surfaces and band-collapsed functionals evaluated from
//! posterior draws, with posterior means and pointwise 95% intervals.
//!
//! Per-draw work runs in parallel over draws and is collected in draw
//! order. Means are summed over sorted values, so every summary is a
//! function of the multiset of draws alone.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{Component, PosteriorDraws};
use crate::whittle::{cholesky_to_spectrum, lower_pairs, CholeskyComponents, PackedHermitian};

/// Clamp applied to squared coherence before taking the logit.
pub const LOGIT_CLAMP: f64 = 1e-12;
/// Default number of equally spaced outcome points on `[0, 1]`.
pub const DEFAULT_U_POINTS: usize = 101;
pub const HF_BAND: Band = Band { lo: 0.15, hi: 0.40 };
pub const LF_BAND: Band = Band { lo: 0.04, hi: 0.15 };

/// Half-open frequency band `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 0.5) {
            return Err(Error::Domain(format!(
                "band [{lo}, {hi}) not inside [0, 1/2]"
            )));
        }
        Ok(Band { lo, hi })
    }
}

impl std::str::FromStr for Band {
    type Err = Error;

    /// Parses `lo:hi`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("band '{s}' is not lo:hi")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("band '{s}' is not lo:hi")))
        };
        Band::new(parse(a)?, parse(b)?)
    }
}

/// `n` equally spaced points from 0 to 1.
pub fn unit_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidInput("u grid needs at least 2 points".into()));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

/// Empirical `alpha` percentile of sorted values: the order statistic at
/// one-based index `ceil(alpha * S)`.
pub fn percentile_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let s = sorted.len();
    let idx = ((alpha * s as f64).ceil() as usize).clamp(1, s);
    sorted[idx - 1]
}

/// Mean, 2.5% and 97.5% percentiles of a sample.
pub fn summarize(values: &mut [f64]) -> (f64, f64, f64) {
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (
        mean,
        percentile_sorted(values, 0.025),
        percentile_sorted(values, 0.975),
    )
}

pub fn logit_clamped(rho2: f64) -> f64 {
    let r = rho2.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (r / (1.0 - r)).ln()
}

/// Scale on which a summary is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    LogSpectrum,
    LogitSquaredCoherence,
    Linear,
}

/// Pointwise summaries on an `(ω, u)` grid, stored u-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEstimate {
    pub omegas: Vec<f64>,
    pub us: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
    pub scale: Scale,
    /// Posterior mean of the untransformed quantity (`ρ²` for coherence).
    pub raw_mean: Option<Vec<f64>>,
    pub draws: usize,
}

impl SurfaceEstimate {
    pub fn at(&self, iu: usize, iw: usize) -> (f64, f64, f64) {
        let i = iu * self.omegas.len() + iw;
        (self.mean[i], self.lower95[i], self.upper95[i])
    }

    /// Grid points where the mean falls outside its own interval.
    pub fn violations(&self) -> usize {
        count_violations(&self.mean, &self.lower95, &self.upper95)
    }
}

fn count_violations(mean: &[f64], lo: &[f64], hi: &[f64]) -> usize {
    mean.iter()
        .zip(lo.iter().zip(hi))
        .filter(|(m, (l, h))| *m < *l || *m > *h)
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandKind {
    Power { p: usize },
    Ratio { p: usize },
    Coherence { p: usize, q: usize },
    CoherenceDerivative { p: usize, q: usize },
}

impl BandKind {
    /// File stem, with one-based channels.
    pub fn stem(&self) -> String {
        match *self {
            BandKind::Power { p } => format!("band_power_{}", p + 1),
            BandKind::Ratio { p } => format!("band_ratio_{}", p + 1),
            BandKind::Coherence { p, q } => format!("band_coherence_{}{}", p + 1, q + 1),
            BandKind::CoherenceDerivative { p, q } => {
                format!("band_coherence_derivative_{}{}", p + 1, q + 1)
            }
        }
    }
}

/// A band functional summarized over draws on a `u` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub kind: BandKind,
    pub us: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
    /// Bands used, numerator first for ratios.
    pub bands: Vec<Band>,
    pub draws: usize,
}

impl BandCurve {
    pub fn violations(&self) -> usize {
        count_violations(&self.mean, &self.lower95, &self.upper95)
    }

    fn from_draws(kind: BandKind, us: &[f64], bands: Vec<Band>, per_draw: &[Vec<f64>]) -> Self {
        let nu = us.len();
        let mut mean = vec![0.0; nu];
        let mut lower95 = vec![0.0; nu];
        let mut upper95 = vec![0.0; nu];
        let mut column = vec![0.0; per_draw.len()];
        for i in 0..nu {
            for (c, d) in column.iter_mut().zip(per_draw) {
                *c = d[i];
            }
            let (m, l, h) = summarize(&mut column);
            mean[i] = m;
            lower95[i] = l;
            upper95[i] = h;
        }
        BandCurve {
            kind,
            us: us.to_vec(),
            mean,
            lower95,
            upper95,
            bands,
            draws: per_draw.len(),
        }
    }
}

/// Basis rows for evaluating draws at arbitrary `(ω, u)` points.
pub struct Evaluator<'a> {
    draws: &'a PosteriorDraws,
}

impl<'a> Evaluator<'a> {
    pub fn new(draws: &'a PosteriorDraws) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidInput("no retained draws".into()));
        }
        Ok(Evaluator { draws })
    }

    pub fn draws(&self) -> &PosteriorDraws {
        self.draws
    }

    fn check_targets(omegas: &[f64], us: &[f64]) -> Result<()> {
        if let Some(w) = omegas.iter().find(|w| !(**w > 0.0 && **w < 0.5)) {
            return Err(Error::Domain(format!("frequency {w} outside (0, 1/2)")));
        }
        if let Some(u) = us.iter().find(|u| !(**u >= 0.0 && **u <= 1.0)) {
            return Err(Error::Domain(format!("outcome {u} outside [0, 1]")));
        }
        Ok(())
    }

    /// `(L_H | Q_H)` rows at `us` and `(L_J | Q_J)` rows at `omegas`.
    pub fn rows(&self, omegas: &[f64], us: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Self::check_targets(omegas, us)?;
        let basis = &self.draws.basis;
        Ok((
            basis.outcome_basis().rows_at(us)?,
            basis.frequency_basis().rows_at(omegas)?,
        ))
    }

    /// Spectral matrices of draw `s` at every `(u, ω)` pair of the given
    /// rows, u-major.
    pub fn spectra(
        &self,
        s: usize,
        bh: &DMatrix<f64>,
        bj: &DMatrix<f64>,
    ) -> Result<Vec<PackedHermitian>> {
        let d = self.draws;
        let p = d.dim;
        let basis = &d.basis;
        let pairs = lower_pairs(p);
        let theta: Vec<(DMatrix<f64>, DMatrix<f64>)> = pairs
            .iter()
            .map(|&(k, l)| {
                (
                    basis.field_with(bh, bj, &d.eta(s, Component::Real(k, l))),
                    basis.field_with(bh, bj, &d.eta(s, Component::Imag(k, l))),
                )
            })
            .collect();
        let log_psi: Vec<DMatrix<f64>> = (0..p)
            .map(|k| basis.field_with(bh, bj, &d.eta(s, Component::Diag(k))))
            .collect();
        let (nu, nw) = (bh.nrows(), bj.nrows());
        let mut out = Vec::with_capacity(nu * nw);
        let mut reg = vec![Complex64::new(0.0, 0.0); pairs.len()];
        let mut psi = vec![0.0; p];
        for iu in 0..nu {
            for iw in 0..nw {
                for (r, (re, im)) in reg.iter_mut().zip(&theta) {
                    *r = Complex64::new(re[(iu, iw)], im[(iu, iw)]);
                }
                for (x, lp) in psi.iter_mut().zip(&log_psi) {
                    *x = lp[(iu, iw)].exp();
                }
                let c = CholeskyComponents::from_regression(p, &reg, &psi)?;
                out.push(cholesky_to_spectrum(&c)?);
            }
        }
        Ok(out)
    }

    /// Spectral matrices of draw `s` at explicit `(ω, u)` targets.
    pub fn at_targets(&self, s: usize, targets: &[(f64, f64)]) -> Result<Vec<PackedHermitian>> {
        targets
            .iter()
            .map(|&(w, u)| {
                let (bh, bj) = self.rows(&[w], &[u])?;
                Ok(self.spectra(s, &bh, &bj)?[0])
            })
            .collect()
    }

    /// Applies `f` to the spectra of every draw on the grid, returning one
    /// vector per draw.
    fn per_draw<F>(&self, omegas: &[f64], us: &[f64], f: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&PackedHermitian) -> f64 + Sync,
    {
        let (bh, bj) = self.rows(omegas, us)?;
        (0..self.draws.len())
            .into_par_iter()
            .map(|s| Ok(self.spectra(s, &bh, &bj)?.iter().map(&f).collect()))
            .collect()
    }

    fn surface<F>(
        &self,
        omegas: &[f64],
        us: &[f64],
        scale: Scale,
        f: F,
        raw: Option<fn(f64) -> f64>,
    ) -> Result<SurfaceEstimate>
    where
        F: Fn(&PackedHermitian) -> f64 + Sync,
    {
        let nw = omegas.len();
        let mut mean = Vec::with_capacity(us.len() * nw);
        let mut lower95 = Vec::with_capacity(us.len() * nw);
        let mut upper95 = Vec::with_capacity(us.len() * nw);
        let mut raw_mean = raw.map(|_| Vec::with_capacity(us.len() * nw));
        // One outcome row at a time bounds memory by draws x frequencies.
        for &u in us {
            let vals = self.per_draw(omegas, &[u], &f)?;
            let mut column = vec![0.0; vals.len()];
            for iw in 0..nw {
                for (c, v) in column.iter_mut().zip(&vals) {
                    *c = v[iw];
                }
                if let (Some(inv), Some(rm)) = (raw, raw_mean.as_mut()) {
                    let mut back: Vec<f64> = column.iter().map(|x| inv(*x)).collect();
                    back.sort_by(f64::total_cmp);
                    rm.push(back.iter().sum::<f64>() / back.len() as f64);
                }
                let (m, l, h) = summarize(&mut column);
                mean.push(m);
                lower95.push(l);
                upper95.push(h);
            }
        }
        Ok(SurfaceEstimate {
            omegas: omegas.to_vec(),
            us: us.to_vec(),
            mean,
            lower95,
            upper95,
            scale,
            raw_mean,
            draws: self.draws.len(),
        })
    }
}

fn spectrum_entry(f: &PackedHermitian, p: usize, q: usize) -> Complex64 {
    f.get(p, q)
}

/// Squared coherence `|f_pq|² / (f_pp f_qq)`, clipped to `[0, 1]`.
pub fn squared_coherence(f: &PackedHermitian, p: usize, q: usize) -> f64 {
    let c = spectrum_entry(f, p, q).norm_sqr() / (f.get(p, p).re * f.get(q, q).re);
    c.clamp(0.0, 1.0)
}

fn check_channel(draws: &PosteriorDraws, p: usize) -> Result<()> {
    if p >= draws.dim {
        return Err(Error::Dimension(format!(
            "channel {p} requested for a {}-channel fit",
            draws.dim
        )));
    }
    Ok(())
}

fn check_pair(draws: &PosteriorDraws, p: usize, q: usize) -> Result<()> {
    check_channel(draws, p)?;
    check_channel(draws, q)?;
    if p == q {
        return Err(Error::InvalidInput(
            "coherence needs two distinct channels".into(),
        ));
    }
    Ok(())
}

/// Spectral matrices of draw `s` at `(ω, u)` targets.
pub fn evaluate_spectrum_draw(
    draws: &PosteriorDraws,
    s: usize,
    targets: &[(f64, f64)],
) -> Result<Vec<PackedHermitian>> {
    if s >= draws.len() {
        return Err(Error::InvalidInput(format!("draw {s} out of range")));
    }
    Evaluator::new(draws)?.at_targets(s, targets)
}

/// Summaries of `log f_pp` over draws.
pub fn log_spectrum_surface(
    draws: &PosteriorDraws,
    p: usize,
    omegas: &[f64],
    us: &[f64],
) -> Result<SurfaceEstimate> {
    check_channel(draws, p)?;
    Evaluator::new(draws)?.surface(
        omegas,
        us,
        Scale::LogSpectrum,
        |f| f.get(p, p).re.ln(),
        None,
    )
}

/// Summaries of clamped `logit ρ²_pq` over draws; `raw_mean` holds the
/// posterior mean of `ρ²` itself.
pub fn coherence_surface(
    draws: &PosteriorDraws,
    p: usize,
    q: usize,
    omegas: &[f64],
    us: &[f64],
) -> Result<SurfaceEstimate> {
    check_pair(draws, p, q)?;
    fn expit(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
    Evaluator::new(draws)?.surface(
        omegas,
        us,
        Scale::LogitSquaredCoherence,
        |f| logit_clamped(squared_coherence(f, p, q)),
        Some(expit),
    )
}

/// Band-averaged spectral matrices per draw, band and outcome point.
#[derive(Clone, Debug)]
pub struct BandAverages {
    pub bands: Vec<Band>,
    pub us: Vec<f64>,
    pub dim: usize,
    /// `values[s][b][iu]`, each a full `dim x dim` matrix flattened
    /// row-major.
    values: Vec<Vec<Vec<Vec<Complex64>>>>,
}

impl BandAverages {
    /// Averages every draw's spectral matrix over the Fourier frequencies of
    /// the fit in each half-open band.
    pub fn compute(draws: &PosteriorDraws, bands: &[Band], us: &[f64]) -> Result<Self> {
        let ev = Evaluator::new(draws)?;
        let grid = draws.basis.frequency_basis().points().to_vec();
        let p = draws.dim;
        let mut rows = Vec::with_capacity(bands.len());
        for b in bands {
            let idx: Vec<usize> = grid
                .iter()
                .enumerate()
                .filter(|(_, w)| **w >= b.lo && **w < b.hi)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "band [{}, {}) contains no Fourier frequency",
                    b.lo, b.hi
                )));
            }
            let omegas: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
            rows.push(ev.rows(&omegas, us)?);
        }
        let values = (0..draws.len())
            .into_par_iter()
            .map(|s| {
                rows.iter()
                    .map(|(bh, bj)| {
                        let spec = ev.spectra(s, bh, bj)?;
                        let w = bj.nrows();
                        Ok((0..us.len())
                            .map(|iu| {
                                let mut acc = vec![Complex64::new(0.0, 0.0); p * p];
                                for f in &spec[iu * w..(iu + 1) * w] {
                                    for a in 0..p {
                                        for c in 0..p {
                                            acc[a * p + c] += f.get(a, c);
                                        }
                                    }
                                }
                                acc.iter().map(|z| z / w as f64).collect()
                            })
                            .collect())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BandAverages {
            bands: bands.to_vec(),
            us: us.to_vec(),
            dim: p,
            values,
        })
    }

    pub fn draws(&self) -> usize {
        self.values.len()
    }

    fn band_index(&self, band: Band) -> Result<usize> {
        self.bands.iter().position(|b| *b == band).ok_or_else(|| {
            Error::InvalidInput(format!("band [{}, {}) not computed", band.lo, band.hi))
        })
    }

    /// Band average of `f_ac` for draw `s` at outcome index `iu`.
    pub fn entry(&self, s: usize, band: usize, iu: usize, a: usize, c: usize) -> Complex64 {
        self.values[s][band][iu][a * self.dim + c]
    }

    fn curves<F>(&self, f: F) -> Vec<Vec<f64>>
    where
        F: Fn(usize, usize) -> f64,
    {
        (0..self.draws())
            .map(|s| (0..self.us.len()).map(|iu| f(s, iu)).collect())
            .collect()
    }

    /// Per-draw band power curves.
    pub fn power_draws(&self, p: usize, band: Band) -> Result<Vec<Vec<f64>>> {
        let b = self.band_index(band)?;
        Ok(self.curves(|s, iu| self.entry(s, b, iu, p, p).re))
    }

    /// Per-draw ratio of band averages.
    pub fn ratio_draws(&self, p: usize, num: Band, den: Band) -> Result<Vec<Vec<f64>>> {
        let (bn, bd) = (self.band_index(num)?, self.band_index(den)?);
        Ok(self.curves(|s, iu| self.entry(s, bn, iu, p, p).re / self.entry(s, bd, iu, p, p).re))
    }

    /// Per-draw band coherence curves.
    pub fn coherence_draws(&self, p: usize, q: usize, band: Band) -> Result<Vec<Vec<f64>>> {
        let b = self.band_index(band)?;
        Ok(self.curves(|s, iu| {
            let num = self.entry(s, b, iu, p, q).norm_sqr();
            let den = self.entry(s, b, iu, p, p).re * self.entry(s, b, iu, q, q).re;
            (num / den).clamp(0.0, 1.0)
        }))
    }

    pub fn power(&self, p: usize, band: Band) -> Result<BandCurve> {
        let d = self.power_draws(p, band)?;
        Ok(BandCurve::from_draws(
            BandKind::Power { p },
            &self.us,
            vec![band],
            &d,
        ))
    }

    pub fn ratio(&self, p: usize, num: Band, den: Band) -> Result<BandCurve> {
        let d = self.ratio_draws(p, num, den)?;
        Ok(BandCurve::from_draws(
            BandKind::Ratio { p },
            &self.us,
            vec![num, den],
            &d,
        ))
    }

    pub fn coherence(&self, p: usize, q: usize, band: Band) -> Result<BandCurve> {
        let d = self.coherence_draws(p, q, band)?;
        Ok(BandCurve::from_draws(
            BandKind::Coherence { p, q },
            &self.us,
            vec![band],
            &d,
        ))
    }

    pub fn coherence_derivative(&self, p: usize, q: usize, band: Band) -> Result<BandCurve> {
        let h = grid_spacing(&self.us)?;
        let d: Vec<Vec<f64>> = self
            .coherence_draws(p, q, band)?
            .iter()
            .map(|c| finite_difference(c, h))
            .collect();
        Ok(BandCurve::from_draws(
            BandKind::CoherenceDerivative { p, q },
            &self.us,
            vec![band],
            &d,
        ))
    }
}

/// Spacing of an equally spaced grid with at least 5 points.
pub fn grid_spacing(us: &[f64]) -> Result<f64> {
    if us.len() < 5 {
        return Err(Error::InvalidInput(
            "derivative needs at least 5 grid points".into(),
        ));
    }
    let h = (us[us.len() - 1] - us[0]) / (us.len() - 1) as f64;
    let equal = us
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1e-300));
    if !(h > 0.0) || !equal {
        return Err(Error::InvalidInput(
            "derivative grid must be equally spaced".into(),
        ));
    }
    Ok(h)
}

/// Central differences in the interior, one-sided at the endpoints.
pub fn finite_difference(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| match i {
            0 => (y[1] - y[0]) / h,
            i if i == n - 1 => (y[n - 1] - y[n - 2]) / h,
            i => (y[i + 1] - y[i - 1]) / (2.0 * h),
        })
        .collect()
}

pub fn band_power(draws: &PosteriorDraws, p: usize, band: Band, us: &[f64]) -> Result<BandCurve> {
    check_channel(draws, p)?;
    BandAverages::compute(draws, &[band], us)?.power(p, band)
}

pub fn band_ratio(
    draws: &PosteriorDraws,
    p: usize,
    lf: Band,
    hf: Band,
    us: &[f64],
) -> Result<BandCurve> {
    check_channel(draws, p)?;
    BandAverages::compute(draws, &[lf, hf], us)?.ratio(p, lf, hf)
}

pub fn band_coherence(
    draws: &PosteriorDraws,
    p: usize,
    q: usize,
    band: Band,
    us: &[f64],
) -> Result<BandCurve> {
    check_pair(draws, p, q)?;
    BandAverages::compute(draws, &[band], us)?.coherence(p, q, band)
}

pub fn band_coherence_derivative(
    draws: &PosteriorDraws,
    p: usize,
    q: usize,
    band: Band,
    us: &[f64],
) -> Result<BandCurve> {
    check_pair(draws, p, q)?;
    grid_spacing(us)?;
    BandAverages::compute(draws, &[band], us)?.coherence_derivative(p, q, band)
}

/// All default band curves for a fit: power and LF/HF ratio per channel,
/// then band coherence per channel pair.
pub fn default_band_curves(
    draws: &PosteriorDraws,
    lf: Band,
    hf: Band,
    us: &[f64],
) -> Result<Vec<BandCurve>> {
    let avg = BandAverages::compute(draws, &[lf, hf], us)?;
    let p = draws.dim;
    let mut out = Vec::new();
    for c in 0..p {
        out.push(avg.power(c, hf)?);
    }
    for c in 0..p {
        out.push(avg.ratio(c, lf, hf)?);
    }
    for (a, b) in coherence_pairs(p) {
        out.push(avg.coherence(a, b, hf)?);
    }
    Ok(out)
}

/// Channel pairs in reporting order: (1,2), (2,3), (1,3).
pub fn coherence_pairs(p: usize) -> Vec<(usize, usize)> {
    match p {
        2 => vec![(0, 1)],
        3 => vec![(0, 1), (1, 2), (0, 2)],
        _ => Vec::new(),
    }
}

/// Metadata written next to every output CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub name: String,
    pub scale: Scale,
    pub bands: Vec<Band>,
    pub omega_points: usize,
    pub u_points: usize,
    pub u_spacing: Option<f64>,
    pub draws: usize,
    pub seed: u64,
    pub config_hash: String,
    pub outcome_offset: f64,
    pub outcome_scale: f64,
    /// Points where the mean lies outside its 95% interval.
    pub interval_violations: usize,
}

fn write_sidecar(path: &Path, meta: &OutputMeta) -> Result<()> {
    let json =
        serde_json::to_string_pretty(meta).map_err(|e| Error::InvalidInput(e.to_string()))?;
    crate::ingest::write_file(path, json.as_bytes())
}

/// Writes `omega,u,u_raw,mean,lo95,hi95` rows (plus `rho2_mean` for
/// coherence) and a `.json` sidecar.
pub fn write_surface(
    dir: &Path,
    name: &str,
    est: &SurfaceEstimate,
    draws: &PosteriorDraws,
    config_hash: &str,
) -> Result<()> {
    let t = draws.outcome_transform;
    let mut out = String::from("omega,u,u_raw,mean,lo95,hi95");
    if est.raw_mean.is_some() {
        out.push_str(",rho2_mean");
    }
    out.push('\n');
    for (iu, &u) in est.us.iter().enumerate() {
        for (iw, &w) in est.omegas.iter().enumerate() {
            let i = iu * est.omegas.len() + iw;
            out.push_str(&format!(
                "{w},{u},{},{},{},{}",
                t.to_raw(u),
                est.mean[i],
                est.lower95[i],
                est.upper95[i]
            ));
            if let Some(r) = &est.raw_mean {
                out.push_str(&format!(",{}", r[i]));
            }
            out.push('\n');
        }
    }
    crate::ingest::write_file(&dir.join(format!("{name}.csv")), out.as_bytes())?;
    let meta = OutputMeta {
        name: name.to_string(),
        scale: est.scale,
        bands: Vec::new(),
        omega_points: est.omegas.len(),
        u_points: est.us.len(),
        u_spacing: grid_spacing(&est.us).ok(),
        draws: est.draws,
        seed: draws.config.seed,
        config_hash: config_hash.to_string(),
        outcome_offset: t.offset,
        outcome_scale: t.scale,
        interval_violations: est.violations(),
    };
    write_sidecar(&dir.join(format!("{name}.json")), &meta)
}

/// Writes `u,u_raw,mean,lo95,hi95` rows and a `.json` sidecar.
pub fn write_band_curve(
    dir: &Path,
    curve: &BandCurve,
    draws: &PosteriorDraws,
    config_hash: &str,
) -> Result<()> {
    let t = draws.outcome_transform;
    let name = curve.kind.stem();
    let mut out = String::from("u,u_raw,mean,lo95,hi95\n");
    for (i, &u) in curve.us.iter().enumerate() {
        out.push_str(&format!(
            "{u},{},{},{},{}\n",
            t.to_raw(u),
            curve.mean[i],
            curve.lower95[i],
            curve.upper95[i]
        ));
    }
    crate::ingest::write_file(&dir.join(format!("{name}.csv")), out.as_bytes())?;
    let meta = OutputMeta {
        name: name.clone(),
        scale: Scale::Linear,
        bands: curve.bands.clone(),
        omega_points: 0,
        u_points: curve.us.len(),
        u_spacing: grid_spacing(&curve.us).ok(),
        draws: curve.draws,
        seed: draws.config.seed,
        config_hash: config_hash.to_string(),
        outcome_offset: t.offset,
        outcome_scale: t.scale,
        interval_violations: curve.violations(),
    };
    write_sidecar(&dir.join(format!("{name}.json")), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_rule() {
        let v: Vec<f64> = (1..=1500).map(|i| i as f64).collect();
        assert_eq!(percentile_sorted(&v, 0.025), 38.0);
        assert_eq!(percentile_sorted(&v, 0.975), 1463.0);
        assert_eq!(percentile_sorted(&[5.0], 0.025), 5.0);
    }

    #[test]
    fn band_parsing() {
        let b: Band = "0.04:0.15".parse().unwrap();
        assert_eq!(b, LF_BAND);
        assert!("0.3:0.2".parse::<Band>().is_err());
        assert!("0.1".parse::<Band>().is_err());
        assert!("0.1:0.6".parse::<Band>().is_err());
    }

    #[test]
    fn logit_clamp_is_finite() {
        assert!(logit_clamped(0.0).is_finite());
        assert!(logit_clamped(1.0).is_finite());
        assert!((logit_clamped(0.5)).abs() < 1e-15);
    }

    #[test]
    fn finite_differences() {
        let us = unit_grid(101).unwrap();
        let h = grid_spacing(&us).unwrap();
        let lin: Vec<f64> = us.iter().map(|u| 3.0 * u - 1.0).collect();
        assert!(finite_difference(&lin, h)
            .iter()
            .all(|d| (d - 3.0).abs() < 1e-9));
        let constant = vec![0.4; 101];
        assert!(finite_difference(&constant, h)
            .iter()
            .all(|d| d.abs() < 1e-12));
        assert!(grid_spacing(&us[..4]).is_err());
        assert!(grid_spacing(&[0.0, 0.1, 0.3, 0.4, 0.5]).is_err());
    }

    #[test]
    fn summaries_are_order_free() {
        let mut a = vec![0.3, 1e16, -1e16, 0.1, 2.0, 7.0];
        let mut b = vec![7.0, 0.1, -1e16, 2.0, 0.3, 1e16];
        assert_eq!(summarize(&mut a), summarize(&mut b));
    }
}
