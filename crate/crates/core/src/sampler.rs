//! Gibbs sampler with a Metropolis-Hastings step for the tensor-product
//! Cholesky-component model.
//!
//! One iteration runs three steps in a fixed order:
//!
//! 1. Gaussian draws of the real and imaginary coefficients of every
//!    regression coefficient `θ_kℓ`, pairs in order (2,1), (3,1), (3,2).
//! 2. For `k = 1..P`, an independence Metropolis-Hastings draw of the
//!    log-diagonal coefficients `η_dkk` from a multivariate-t proposal
//!    centred at the Newton mode of the conditional log density with scale
//!    equal to the inverse observed information.
//! 3. Inverse-gamma draws for every smoothing variance `τ²` and its
//!    half-t mixing variable `g`.
//!
//! The conditional densities all operate on `N x M` arrays of current
//! component values, kept in [`ChainState`] as a cache and refreshed
//! whenever a coefficient block changes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{build_frequency_basis, build_outcome_basis, tensor_design, Rank, TensorBasis};
use crate::error::{Error, Result};
use crate::ingest::{MultiSubjectSeries, OutcomeTransform};
use crate::whittle::{dft, lower_pairs, pair_index, residual_v, DftData, ThetaField};

/// Step-halvings allowed per Newton iteration.
const MAX_HALVINGS: usize = 30;

/// Model hyperparameters and run length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_j: Rank,
    pub n_h: Rank,
    /// Prior variance of the linear-by-linear coefficients.
    pub sigma2_alpha: f64,
    /// Half-t scale `G`.
    pub g_scale: f64,
    /// Half-t degrees of freedom.
    pub nu: f64,
    /// Degrees of freedom of the multivariate-t proposal.
    pub proposal_df: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Holds every smoothing variance at this value and skips the smoothing update.
    #[serde(default)]
    pub fixed_smoothing: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_j: Rank::Fixed(10),
            n_h: Rank::Fixed(10),
            sigma2_alpha: 1e5,
            g_scale: 1e5,
            nu: 3.0,
            proposal_df: 3.0,
            iterations: 3000,
            burn_in: 500,
            seed: 0,
            newton_tol: 1e-8,
            newton_max_iter: 100,
            fixed_smoothing: None,
        }
    }
}

impl ModelConfig {
    /// Settings of the MA(2) simulation design: `n_J = 10`, `n_H = 5`,
    /// 2000 iterations with 500 burn-in.
    pub fn simulation_preset() -> Self {
        ModelConfig {
            n_h: Rank::Fixed(5),
            iterations: 2000,
            burn_in: 500,
            ..ModelConfig::default()
        }
    }

    /// Settings of the 108-subject application: `n_H = n_J = 10`,
    /// 3000 iterations with 500 burn-in.
    pub fn application_preset() -> Self {
        ModelConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if !(self.g_scale > 0.0) {
            return Err(Error::Config("G must be positive".into()));
        }
        if !(self.nu >= 1.0) || !(self.proposal_df > 0.0) {
            return Err(Error::Config("degrees of freedom out of range".into()));
        }
        if !(self.sigma2_alpha > 0.0) {
            return Err(Error::Config("sigma2_alpha must be positive".into()));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::Config("invalid Newton settings".into()));
        }
        if let Some(t) = self.fixed_smoothing {
            if !(t > 0.0) {
                return Err(Error::Config(
                    "fixed smoothing variance must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.iterations - self.burn_in
    }
}

/// One Cholesky component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    /// Real part of `θ_kℓ` (zero-based `k > ℓ`).
    Real(usize, usize),
    /// Imaginary part of `θ_kℓ`.
    Imag(usize, usize),
    /// `log ψ⁻¹_kk`.
    Diag(usize),
}

/// Components in storage order: `r, i` for each lower pair, then the
/// diagonals.
pub fn components(p: usize) -> Vec<Component> {
    let mut out = Vec::with_capacity(p * p);
    for (k, l) in lower_pairs(p) {
        out.push(Component::Real(k, l));
        out.push(Component::Imag(k, l));
    }
    out.extend((0..p).map(Component::Diag));
    out
}

/// Smoothing variances and mixing variables for the nonlinear blocks
/// `(b, c, d)` of one component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub tau2: [f64; 3],
    pub g: [f64; 3],
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing {
            tau2: [1.0; 3],
            g: [1.0; 3],
        }
    }
}

/// Diagonal prior covariance of one coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorCovariance {
    pub diag: DVector<f64>,
}

impl PriorCovariance {
    pub fn new(basis: &TensorBasis, sigma2_alpha: f64, tau2: [f64; 3]) -> Self {
        let bm = basis.block_map();
        let mut diag = DVector::zeros(basis.n_coef());
        diag.rows_mut(bm.a.start, bm.a.len()).fill(sigma2_alpha);
        diag.rows_mut(bm.b.start, bm.b.len()).fill(tau2[0]);
        diag.rows_mut(bm.c.start, bm.c.len()).fill(tau2[1]);
        diag.rows_mut(bm.d.start, bm.d.len()).fill(tau2[2]);
        PriorCovariance { diag }
    }

    pub fn precision(&self) -> DVector<f64> {
        self.diag.map(|d| 1.0 / d)
    }
}

/// Coefficients, smoothing parameters and cached component fields.
#[derive(Clone, Debug)]
pub struct ChainState {
    dim: usize,
    /// One coefficient vector per entry of [`components`].
    pub eta: Vec<DVector<f64>>,
    pub smoothing: Vec<Smoothing>,
    theta: ThetaField,
    log_psi: Vec<DMatrix<f64>>,
    psi: Vec<DMatrix<f64>>,
}

impl ChainState {
    /// All coefficients zero (`Θ = I`, `Ψ⁻¹ = I`), `τ² = g = 1`.
    pub fn initial(dim: usize, basis: &TensorBasis) -> Self {
        let comps = components(dim);
        let (n, m) = (basis.n_subjects(), basis.n_freq());
        ChainState {
            dim,
            eta: vec![DVector::zeros(basis.n_coef()); comps.len()],
            smoothing: vec![Smoothing::default(); comps.len()],
            theta: ThetaField::zeros(dim, n, m),
            log_psi: vec![DMatrix::zeros(n, m); dim],
            psi: vec![DMatrix::from_element(n, m, 1.0); dim],
        }
    }

    /// Rebuilds a state, including caches, from coefficient vectors.
    pub fn from_coefficients(
        dim: usize,
        basis: &TensorBasis,
        eta: Vec<DVector<f64>>,
        smoothing: Vec<Smoothing>,
    ) -> Result<Self> {
        let comps = components(dim);
        if eta.len() != comps.len() || smoothing.len() != comps.len() {
            return Err(Error::Dimension("component count mismatch".into()));
        }
        if eta.iter().any(|e| e.len() != basis.n_coef()) {
            return Err(Error::Dimension("coefficient length mismatch".into()));
        }
        let mut s = ChainState::initial(dim, basis);
        s.eta = eta;
        s.smoothing = smoothing;
        s.refresh_all(basis);
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index_of(&self, c: Component) -> usize {
        component_index(self.dim, c)
    }

    pub fn eta_of(&self, c: Component) -> &DVector<f64> {
        &self.eta[self.index_of(c)]
    }

    pub fn theta(&self) -> &ThetaField {
        &self.theta
    }

    /// Cached `ψ⁻¹_kk` field (`N x M`).
    pub fn psi_inv(&self, k: usize) -> &DMatrix<f64> {
        &self.psi[k]
    }

    fn refresh_theta(&mut self, basis: &TensorBasis, k: usize, l: usize) {
        let re = basis.field(self.eta_of(Component::Real(k, l)));
        let im = basis.field(self.eta_of(Component::Imag(k, l)));
        let z = re.zip_map(&im, Complex64::new);
        self.theta.set(k, l, z);
    }

    fn refresh_psi(&mut self, basis: &TensorBasis, k: usize) {
        let lp = basis.field(self.eta_of(Component::Diag(k)));
        self.psi[k] = lp.map(f64::exp);
        self.log_psi[k] = lp;
    }

    fn refresh_all(&mut self, basis: &TensorBasis) {
        for (k, l) in lower_pairs(self.dim) {
            self.refresh_theta(basis, k, l);
        }
        for k in 0..self.dim {
            self.refresh_psi(basis, k);
        }
    }

    /// Largest deviation between cached fields and their recomputation.
    pub fn cache_deviation(&self, basis: &TensorBasis) -> f64 {
        let mut fresh = self.clone();
        fresh.refresh_all(basis);
        let mut dev: f64 = 0.0;
        for (k, l) in lower_pairs(self.dim) {
            dev = dev.max(
                (self.theta.get(k, l) - fresh.theta.get(k, l))
                    .iter()
                    .map(|z| z.norm())
                    .fold(0.0, f64::max),
            );
        }
        for k in 0..self.dim {
            let rel = self.psi[k]
                .zip_map(&fresh.psi[k], |a, b| (a - b).abs() / b.abs().max(1.0))
                .max();
            dev = dev.max(rel);
        }
        dev
    }
}

fn component_index(dim: usize, c: Component) -> usize {
    let pairs = dim * (dim - 1) / 2;
    match c {
        Component::Real(k, l) => 2 * pair_index(k, l),
        Component::Imag(k, l) => 2 * pair_index(k, l) + 1,
        Component::Diag(k) => 2 * pairs + k,
    }
}

/// Which part of `θ_kℓ` a Gaussian block draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Real,
    Imag,
}

/// Result of the Newton search for the diagonal-component mode.
#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub mode: DVector<f64>,
    /// Negative Hessian at the mode.
    pub information: DMatrix<f64>,
    pub iterations: usize,
}

/// Conditional log density of `η_dkk` up to a constant:
/// `Σ_{j,m} [q'η - exp(q'η) v] - η' D⁻¹ η / 2`.
pub fn log_target_eta_d(
    basis: &TensorBasis,
    v: &DMatrix<f64>,
    prior_precision: &DVector<f64>,
    eta: &DVector<f64>,
) -> f64 {
    let s = basis.field(eta);
    let lik: f64 = s.zip_fold(v, 0.0, |acc, si, vi| acc + si - si.exp() * vi);
    lik - 0.5 * eta.component_mul(eta).dot(prior_precision)
}

/// Gradient of [`log_target_eta_d`].
pub fn gradient_eta_d(
    basis: &TensorBasis,
    v: &DMatrix<f64>,
    prior_precision: &DVector<f64>,
    eta: &DVector<f64>,
) -> DVector<f64> {
    let s = basis.field(eta);
    let r = s.zip_map(v, |si, vi| 1.0 - vi * si.exp());
    basis.weighted_sum(&r) - prior_precision.component_mul(eta)
}

/// Negative Hessian of [`log_target_eta_d`].
pub fn information_eta_d(
    basis: &TensorBasis,
    v: &DMatrix<f64>,
    prior_precision: &DVector<f64>,
    eta: &DVector<f64>,
) -> DMatrix<f64> {
    let s = basis.field(eta);
    let w = s.zip_map(v, |si, vi| vi * si.exp());
    let mut h = basis.weighted_gram(&w);
    for i in 0..h.nrows() {
        h[(i, i)] += prior_precision[i];
    }
    h
}

/// Cholesky factor of a symmetric positive-definite matrix, retrying once
/// with a `1e-10 · trace / dim` ridge.
fn factor_spd(m: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let ridge = 1e-10 * m.trace() / m.nrows() as f64;
    match m.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let mut r = m;
            for i in 0..r.nrows() {
                r[(i, i)] += ridge;
            }
            r.cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
        }
    }
}

/// Newton iterations with step halving on the diagonal-component density.
/// Converged once the gradient max-norm is below `tol · max(1, ‖Q'1‖∞)`.
pub fn newton_mode_eta_d(
    basis: &TensorBasis,
    v: &DMatrix<f64>,
    prior_precision: &DVector<f64>,
    start: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<NewtonOutcome> {
    if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidInput(
            "residual powers must be nonnegative".into(),
        ));
    }
    let mut eta = start.clone();
    let mut value = log_target_eta_d(basis, v, prior_precision, &eta);
    if !value.is_finite() {
        eta = DVector::zeros(start.len());
        value = log_target_eta_d(basis, v, prior_precision, &eta);
    }
    // The gradient is a sum over N·M terms, so its rounding floor grows
    // with the grid; the tolerance is taken relative to the size of Q'1.
    let ones = DMatrix::from_element(v.nrows(), v.ncols(), 1.0);
    let scale = basis.weighted_sum(&ones).amax().max(1.0);
    let mut trace = Vec::new();
    for iter in 0..=max_iter {
        let grad = gradient_eta_d(basis, v, prior_precision, &eta);
        let gnorm = grad.amax();
        trace.push(gnorm);
        let info = information_eta_d(basis, v, prior_precision, &eta);
        if gnorm < tol * scale {
            return Ok(NewtonOutcome {
                mode: eta,
                information: info,
                iterations: iter,
            });
        }
        if iter == max_iter {
            break;
        }
        let chol = factor_spd(info.clone(), "observed information")?;
        let step = chol.solve(&grad);
        let decrement = grad.dot(&step);
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &eta + &step * scale;
            let cv = log_target_eta_d(basis, v, prior_precision, &cand);
            if cv.is_finite() && cv >= value {
                if cv == value && decrement <= 1e-12 * (1.0 + value.abs()) {
                    return Ok(NewtonOutcome {
                        mode: cand,
                        information: info,
                        iterations: iter + 1,
                    });
                }
                eta = cand;
                value = cv;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            // No representable ascent left: the gradient is pure rounding.
            if decrement <= 1e-12 * (1.0 + value.abs()) {
                return Ok(NewtonOutcome {
                    mode: eta,
                    information: info,
                    iterations: iter,
                });
            }
            break;
        }
    }
    Err(Error::NewtonFailed {
        iterations: trace.len(),
        trace,
    })
}

/// Samples inverse-gamma `IG(shape, rate)` with density ∝ `x^{-(shape+1)} e^{-rate/x}`.
pub fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Per-chain acceptance and timing diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// MH acceptances per diagonal component over all iterations.
    pub accepted: Vec<usize>,
    pub iterations: usize,
    /// Newton iterations summed over all MH steps.
    pub newton_iterations: usize,
    pub gaussian_failures: usize,
}

impl ChainDiagnostics {
    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .map(|&a| a as f64 / self.iterations.max(1) as f64)
            .collect()
    }
}

/// The sampler bound to one dataset and basis.
pub struct Sampler<'a> {
    data: &'a DftData,
    basis: &'a TensorBasis,
    config: ModelConfig,
    power: Vec<DMatrix<f64>>,
    /// `Y_a conj(Y_b)` for `a < b`, indexed by [`pair_index`]`(b, a)`.
    cross: Vec<DMatrix<Complex64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a DftData, basis: &'a TensorBasis, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let p = data.n_channels();
        if !(1..=3).contains(&p) {
            return Err(Error::Dimension(format!("unsupported channel count {p}")));
        }
        if basis.n_subjects() != data.n_subjects() || basis.n_freq() != data.n_freq() {
            return Err(Error::Dimension("basis does not match DFT data".into()));
        }
        let power = (0..p).map(|k| data.power(k)).collect();
        let cross = lower_pairs(p)
            .into_iter()
            .map(|(b, a)| data.cross(a, b))
            .collect();
        Ok(Sampler {
            data,
            basis,
            config,
            power,
            cross,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn basis(&self) -> &TensorBasis {
        self.basis
    }

    pub fn data(&self) -> &DftData {
        self.data
    }

    pub fn initial_state(&self) -> ChainState {
        ChainState::initial(self.data.n_channels(), self.basis)
    }

    fn prior(&self, state: &ChainState, c: Component) -> PriorCovariance {
        let tau2 = match self.config.fixed_smoothing {
            Some(t) => [t; 3],
            None => state.smoothing[state.index_of(c)].tau2,
        };
        PriorCovariance::new(self.basis, self.config.sigma2_alpha, tau2)
    }

    /// `Y_a conj(Y_b)` for any `a != b`.
    fn cross_product(&self, a: usize, b: usize) -> DMatrix<Complex64> {
        if a < b {
            self.cross[pair_index(b, a)].clone()
        } else {
            self.cross[pair_index(a, b)].map(|z| z.conj())
        }
    }

    /// Precision `Σ⁻¹` and `Σ⁻¹ μ` of the Gaussian conditional for one part
    /// of `θ_kℓ`.
    pub fn theta_conditional(
        &self,
        state: &ChainState,
        k: usize,
        l: usize,
        part: Part,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let p = self.data.n_channels();
        let c = match part {
            Part::Real => Component::Real(k, l),
            Part::Imag => Component::Imag(k, l),
        };
        let psi = state.psi_inv(l);
        let w = psi.zip_map(&self.power[k], |a, b| 2.0 * a * b);
        let mut precision = self.basis.weighted_gram(&w);
        let prior_prec = self.prior(state, c).precision();
        for i in 0..precision.nrows() {
            precision[(i, i)] += prior_prec[i];
        }
        let re = |z: Complex64| z.re;
        let im = |z: Complex64| z.im;
        // Bracketed terms of Σ⁻¹μ, before the 2ψ⁻¹ weight.
        let inner: DMatrix<f64> = match (k, l) {
            (1, 0) => {
                let y12 = self.cross_product(0, 1);
                if p == 3 {
                    let y23 = self.cross_product(1, 2);
                    let t31 = state.theta().get(2, 0);
                    match part {
                        Part::Real => DMatrix::from_fn(y12.nrows(), y12.ncols(), |j, m| {
                            re(y12[(j, m)] - t31[(j, m)].conj() * y23[(j, m)])
                        }),
                        Part::Imag => DMatrix::from_fn(y12.nrows(), y12.ncols(), |j, m| {
                            im(y12[(j, m)] + t31[(j, m)].conj() * y23[(j, m)])
                        }),
                    }
                } else {
                    match part {
                        Part::Real => y12.map(re),
                        Part::Imag => y12.map(im),
                    }
                }
            }
            (2, 0) => {
                let y13 = self.cross_product(0, 2);
                // Y2* Y3
                let y2c3 = self.cross_product(2, 1);
                let t21 = state.theta().get(1, 0);
                match part {
                    Part::Real => DMatrix::from_fn(y13.nrows(), y13.ncols(), |j, m| {
                        re(y13[(j, m)] - t21[(j, m)].conj() * y2c3[(j, m)])
                    }),
                    Part::Imag => DMatrix::from_fn(y13.nrows(), y13.ncols(), |j, m| {
                        im(y13[(j, m)] + t21[(j, m)].conj() * y2c3[(j, m)])
                    }),
                }
            }
            (2, 1) => match part {
                // Re{Y2* Y3} and Im{Y2 Y3*}
                Part::Real => self.cross_product(2, 1).map(re),
                Part::Imag => self.cross_product(1, 2).map(im),
            },
            _ => {
                return Err(Error::Dimension(format!(
                    "no Gaussian block for pair ({k}, {l})"
                )))
            }
        };
        let r = inner.zip_map(psi, |x, ps| 2.0 * ps * x);
        let rhs = self.basis.weighted_sum(&r);
        Ok((precision, rhs))
    }

    /// Draws one part of `θ_kℓ`'s coefficients from its Gaussian conditional
    /// and refreshes the cached `θ_kℓ`.
    pub fn draw_theta_block<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        k: usize,
        l: usize,
        part: Part,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let (precision, rhs) = self.theta_conditional(state, k, l, part)?;
        debug_assert!((&precision - precision.transpose()).amax() <= 1e-8 * precision.amax());
        let chol = factor_spd(precision, "Gaussian block precision")?;
        let mean = chol.solve(&rhs);
        let z = standard_normal_vec(rng, mean.len());
        let lt = chol.l().transpose();
        let dev = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let draw = mean + dev;
        let c = match part {
            Part::Real => Component::Real(k, l),
            Part::Imag => Component::Imag(k, l),
        };
        let idx = state.index_of(c);
        state.eta[idx] = draw.clone();
        state.refresh_theta(self.basis, k, l);
        Ok(draw)
    }

    /// Residual powers `v_k` under the current `θ`.
    pub fn residuals(&self, state: &ChainState, k: usize) -> Result<DMatrix<f64>> {
        residual_v(k, self.data, state.theta())
    }

    /// Prior precision diagonal of `η_dkk` under the current state.
    pub fn diag_prior_precision(&self, state: &ChainState, k: usize) -> DVector<f64> {
        self.prior(state, Component::Diag(k)).precision()
    }

    /// Metropolis-Hastings update of `η_dkk`. Returns whether the proposal
    /// was accepted and the Newton iteration count.
    pub fn draw_eta_d_mh<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        k: usize,
        rng: &mut R,
    ) -> Result<(bool, usize)> {
        let v = self.residuals(state, k)?;
        let prec = self.diag_prior_precision(state, k);
        let idx = state.index_of(Component::Diag(k));
        let current = state.eta[idx].clone();
        let newton = newton_mode_eta_d(
            self.basis,
            &v,
            &prec,
            &current,
            self.config.newton_tol,
            self.config.newton_max_iter,
        )?;
        let chol = factor_spd(newton.information.clone(), "observed information")?;
        let df = self.config.proposal_df;
        let dim = current.len();
        let z = standard_normal_vec(rng, dim);
        let chi2: f64 = ChiSquared::new(df).expect("positive df").sample(rng);
        let lt = chol.l().transpose();
        let dev = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let proposal = &newton.mode + dev * (df / chi2).sqrt();

        let log_t = |x: &DVector<f64>| {
            let d = x - &newton.mode;
            let q = (chol.l().transpose() * d).norm_squared();
            -0.5 * (df + dim as f64) * (q / df).ln_1p()
        };
        let accept = if proposal == current {
            true
        } else {
            let log_r = log_target_eta_d(self.basis, &v, &prec, &proposal)
                - log_target_eta_d(self.basis, &v, &prec, &current)
                + log_t(&current)
                - log_t(&proposal);
            let u: f64 = rng.random();
            log_r.is_finite() && u.ln() < log_r
        };
        if accept {
            state.eta[idx] = proposal;
            state.refresh_psi(self.basis, k);
        }
        Ok((accept, newton.iterations))
    }

    /// Inverse-gamma updates of all `τ²`, then of all mixing variables `g`.
    pub fn draw_smoothing<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R) {
        let nu = self.config.nu;
        let inv_g2 = 1.0 / (self.config.g_scale * self.config.g_scale);
        let bm = self.basis.block_map().clone();
        let blocks = [bm.b, bm.c, bm.d];
        for idx in 0..state.eta.len() {
            let eta = &state.eta[idx];
            let sm = &mut state.smoothing[idx];
            for (x, block) in blocks.iter().enumerate() {
                let seg = eta.rows(block.start, block.len());
                let ss = seg.norm_squared();
                let shape = (block.len() as f64 + nu) / 2.0;
                let rate = ss / 2.0 + nu / sm.g[x];
                sm.tau2[x] = sample_inv_gamma(rng, shape, rate);
            }
            for x in 0..3 {
                sm.g[x] = sample_inv_gamma(rng, (nu + 1.0) / 2.0, nu / sm.tau2[x] + inv_g2);
            }
        }
    }

    /// One full sweep of the three steps.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        rng: &mut R,
        diagnostics: &mut ChainDiagnostics,
    ) -> Result<()> {
        let p = self.data.n_channels();
        for (k, l) in lower_pairs(p) {
            self.draw_theta_block(state, k, l, Part::Real, rng)?;
            self.draw_theta_block(state, k, l, Part::Imag, rng)?;
        }
        for k in 0..p {
            let (accepted, iters) = self.draw_eta_d_mh(state, k, rng)?;
            diagnostics.accepted[k] += accepted as usize;
            diagnostics.newton_iterations += iters;
        }
        if self.config.fixed_smoothing.is_none() {
            self.draw_smoothing(state, rng);
        }
        diagnostics.iterations += 1;
        Ok(())
    }

    /// Runs the configured number of iterations from the zero state and
    /// keeps every post-burn-in state.
    pub fn run(&self) -> Result<PosteriorDraws> {
        let p = self.data.n_channels();
        let draws = PosteriorDraws {
            config: self.config.clone(),
            dim: p,
            basis: self.basis.clone(),
            coefficients: Vec::with_capacity(self.config.retained()),
            tau2: Vec::with_capacity(self.config.retained()),
            diagnostics: ChainDiagnostics {
                accepted: vec![0; p],
                ..Default::default()
            },
            iteration_seconds: Vec::with_capacity(self.config.iterations),
            outcome_transform: OutcomeTransform::identity(),
            snapshot: ChainSnapshot::start(&self.initial_state(), self.config.seed),
        };
        self.extend(draws)
    }

    /// Continues a chain from its final snapshot up to this sampler's
    /// `iterations`. Continuing a shortened run reproduces the full run
    /// exactly.
    pub fn extend(&self, mut draws: PosteriorDraws) -> Result<PosteriorDraws> {
        let done = draws.snapshot.completed;
        if self.config.iterations < done {
            return Err(Error::Config(format!(
                "chain already has {done} iterations, more than the requested {}",
                self.config.iterations
            )));
        }
        let mut state = draws.snapshot.restore(self.data.n_channels(), self.basis)?;
        let mut rng = draws.snapshot.rng();
        for s in done + 1..=self.config.iterations {
            let started = Instant::now();
            self.step(&mut state, &mut rng, &mut draws.diagnostics)?;
            draws
                .iteration_seconds
                .push(started.elapsed().as_secs_f64());
            if cfg!(debug_assertions) && s % 100 == 0 {
                let dev = state.cache_deviation(self.basis);
                debug_assert!(dev < 1e-10, "cache deviation {dev} at iteration {s}");
            }
            if s > self.config.burn_in {
                draws.coefficients.push(flatten(&state.eta));
                draws
                    .tau2
                    .push(state.smoothing.iter().flat_map(|s| s.tau2).collect());
            }
        }
        draws.snapshot = ChainSnapshot::capture(&state, &rng, self.config.iterations);
        draws.config = self.config.clone();
        Ok(draws)
    }
}

/// Everything needed to continue a chain: coefficients, smoothing
/// parameters and the generator position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSnapshot {
    pub completed: usize,
    pub eta: Vec<Vec<f64>>,
    pub smoothing: Vec<Smoothing>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

impl ChainSnapshot {
    fn start(state: &ChainState, seed: u64) -> Self {
        Self::capture(state, &ChaCha20Rng::seed_from_u64(seed), 0)
    }

    fn capture(state: &ChainState, rng: &ChaCha20Rng, completed: usize) -> Self {
        ChainSnapshot {
            completed,
            eta: state
                .eta
                .iter()
                .map(|e| e.iter().copied().collect())
                .collect(),
            smoothing: state.smoothing.clone(),
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    fn rng(&self) -> ChaCha20Rng {
        let mut r = ChaCha20Rng::from_seed(self.rng_seed);
        r.set_stream(self.rng_stream);
        r.set_word_pos(self.rng_word_pos);
        r
    }

    fn restore(&self, dim: usize, basis: &TensorBasis) -> Result<ChainState> {
        let eta = self
            .eta
            .iter()
            .map(|e| DVector::from_column_slice(e))
            .collect();
        ChainState::from_coefficients(dim, basis, eta, self.smoothing.clone())
    }
}

fn flatten(eta: &[DVector<f64>]) -> Vec<f64> {
    eta.iter().flat_map(|e| e.iter().copied()).collect()
}

/// Retained post-burn-in states of one chain.
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub config: ModelConfig,
    pub dim: usize,
    pub basis: TensorBasis,
    /// Per retained iteration, coefficient vectors of all components
    /// concatenated in [`components`] order.
    pub coefficients: Vec<Vec<f64>>,
    /// Per retained iteration, `τ²` for `(b, c, d)` of every component.
    pub tau2: Vec<Vec<f64>>,
    pub diagnostics: ChainDiagnostics,
    /// Wall time of every iteration; not part of the reproducible output.
    pub iteration_seconds: Vec<f64>,
    /// Map from raw outcome units to the unit interval used by the basis.
    pub outcome_transform: OutcomeTransform,
    /// State after the last iteration.
    pub snapshot: ChainSnapshot,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Coefficient vector of component `c` in retained draw `s`.
    pub fn eta(&self, s: usize, c: Component) -> DVector<f64> {
        let n = self.basis.n_coef();
        let idx = component_index(self.dim, c);
        DVector::from_column_slice(&self.coefficients[s][idx * n..(idx + 1) * n])
    }

    /// Mean per-iteration wall time in seconds.
    pub fn mean_iteration_seconds(&self) -> f64 {
        self.iteration_seconds.iter().sum::<f64>() / self.iteration_seconds.len().max(1) as f64
    }
}

/// Builds the tensor basis for a dataset under `config`'s ranks.
pub fn build_basis(
    outcomes: &[f64],
    series_length: usize,
    config: &ModelConfig,
) -> Result<TensorBasis> {
    let grid = crate::basis::FrequencyGrid::new(series_length)?;
    let fb = build_frequency_basis(&grid, config.n_j)?;
    let ob = build_outcome_basis(outcomes, config.n_h)?;
    Ok(tensor_design(ob, fb))
}

/// Transforms, builds the basis, and runs one chain.
pub fn run_chain(data: &MultiSubjectSeries, config: &ModelConfig) -> Result<PosteriorDraws> {
    let y = dft(data);
    let basis = build_basis(data.outcomes(), data.n_time(), config)?;
    let mut draws = Sampler::new(&y, &basis, config.clone())?.run()?;
    draws.outcome_transform = data.outcome_transform();
    Ok(draws)
}
