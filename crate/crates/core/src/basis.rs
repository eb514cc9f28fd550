//! Reproducing-kernel bases for functions of frequency and of outcome, and
//! their tensor-product design.
//!
//! Both kernels are the cubic-spline reproducing kernel
//! `K(x, y) = ∫ (x - v)₊ (y - v)₊ dv`, which has the closed form
//! `a²b/2 - a³/6` with `a = min(x, y)` and `b = max(x, y)` whenever the
//! upper integration limit is at least `a`. A Gram matrix `K = V D V'` on
//! the training points yields the low-rank basis `Q = V D^{1/2}` (leading
//! columns only) and the linear null space `L = (1 | x)`.
//!
//! The tensor-product design `Q = (L_H⊗L_J | Q_H⊗L_J | L_H⊗Q_J | Q_H⊗Q_J)`
//! is never materialised during sampling. Every column is the product of
//! one outcome column and one frequency column, so weighted cross-products
//! reduce to small matrix products against `B_H = (L_H | Q_H)` and
//! `B_J = (L_J | Q_J)`.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::write_file;

/// Fraction-of-variance threshold for automatic basis rank selection.
pub const DEFAULT_FVE_THRESHOLD: f64 = 0.97975;

/// Relative cutoff below which Gram eigenvalues are treated as zero.
const EIGEN_TRUNCATION: f64 = 1e-12;

fn cubic_kernel(x: f64, y: f64) -> f64 {
    let (a, b) = if x <= y { (x, y) } else { (y, x) };
    a * a * b / 2.0 - a * a * a / 6.0
}

/// Frequency kernel `J(w1, w2) = ∫₀^{1/2} (w1 - v)₊ (w2 - v)₊ dv`.
pub fn kernel_j(w1: f64, w2: f64) -> Result<f64> {
    for w in [w1, w2] {
        if !(0.0..=0.5).contains(&w) {
            return Err(Error::Domain(format!("frequency {w} outside [0, 1/2]")));
        }
    }
    Ok(cubic_kernel(w1, w2))
}

/// Outcome kernel `H(u1, u2) = ∫₀¹ (u1 - v)₊ (u2 - v)₊ dv`.
pub fn kernel_h(u1: f64, u2: f64) -> Result<f64> {
    for u in [u1, u2] {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!("outcome {u} outside [0, 1]")));
        }
    }
    Ok(cubic_kernel(u1, u2))
}

/// Fourier frequencies `m / n` for `m = 1..=⌊(n-1)/2⌋`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    n: usize,
    omegas: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(n: usize) -> Result<Self> {
        let m = n.saturating_sub(1) / 2;
        if m == 0 {
            return Err(Error::Dimension(format!(
                "series length {n} has no interior Fourier frequency"
            )));
        }
        let omegas = (1..=m).map(|k| k as f64 / n as f64).collect();
        Ok(FrequencyGrid { n, omegas })
    }

    pub fn series_length(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// Zero-based indices of Fourier frequencies inside `[lo, hi)`.
    pub fn band_indices(&self, lo: f64, hi: f64) -> Vec<usize> {
        self.omegas
            .iter()
            .enumerate()
            .filter(|(_, &w)| w >= lo && w < hi)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Smallest `k` whose leading eigenvalues explain at least `threshold` of
/// the total.
pub fn select_rank_fve(eigenvalues: &[f64], threshold: f64) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidInput("empty eigenvalue vector".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!(
            "FVE threshold {threshold} not in (0, 1)"
        )));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("eigenvalues sum to zero".into()));
    }
    let mut acc = 0.0;
    for (k, &l) in eigenvalues.iter().enumerate() {
        acc += l;
        // Tolerance absorbs summation-order noise at exact ties.
        if acc / total >= threshold - 1e-14 {
            return Ok(k + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Requested rank of a kernel basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Fixed(usize),
    FveAuto { threshold: f64 },
}

impl Rank {
    pub fn fve_auto() -> Self {
        Rank::FveAuto {
            threshold: DEFAULT_FVE_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Frequency,
    Outcome,
}

impl KernelKind {
    fn eval(self, x: f64, y: f64) -> Result<f64> {
        match self {
            KernelKind::Frequency => kernel_j(x, y),
            KernelKind::Outcome => kernel_h(x, y),
        }
    }
}

/// Nonincreasing eigenvalues and matching unit eigenvectors of a symmetric
/// matrix, with each eigenvector's first nonzero entry made positive.
#[derive(Clone, Debug)]
pub struct Eigensystem {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigensystem {
    pub fn symmetric(matrix: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(matrix.clone());
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(matrix.nrows(), n);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).clone_owned();
            let scale = col.amax();
            if let Some(first) = col.iter().find(|v| v.abs() > 1e-10 * scale) {
                if *first < 0.0 {
                    col.neg_mut();
                }
            }
            vectors.set_column(dst, &col);
        }
        Eigensystem { values, vectors }
    }
}

/// Linear part `L = (1 | x)` and scaled-eigenvector part `Q = V D^{1/2}` of
/// one kernel basis on its training points.
#[derive(Clone, Debug)]
pub struct KernelBasis {
    kind: KernelKind,
    points: Vec<f64>,
    /// Kept eigenvalues, all strictly positive, nonincreasing.
    eigenvalues: Vec<f64>,
    /// Full-length eigenvalue spectrum after truncation, for FVE diagnostics.
    spectrum: Vec<f64>,
    /// Training-point eigenvectors for the kept columns.
    vectors: DMatrix<f64>,
    linear: DMatrix<f64>,
    scaled: DMatrix<f64>,
}

impl KernelBasis {
    fn build(kind: KernelKind, points: &[f64], rank: Rank) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Dimension("no training points".into()));
        }
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k = kind.eval(points[i], points[j])?;
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
        }
        let eig = Eigensystem::symmetric(&gram);
        let lmax = eig.values[0].max(0.0);
        let spectrum: Vec<f64> = eig
            .values
            .iter()
            .map(|&l| if l < EIGEN_TRUNCATION * lmax { 0.0 } else { l })
            .collect();
        let rank = match rank {
            Rank::Fixed(r) => r,
            Rank::FveAuto { threshold } => select_rank_fve(&spectrum, threshold)?,
        };
        if rank == 0 || rank > n {
            return Err(Error::Dimension(format!(
                "basis rank {rank} not in 1..={n}"
            )));
        }
        let positive = spectrum.iter().take_while(|&&l| l > 0.0).count();
        if rank > positive {
            return Err(Error::Dimension(format!(
                "basis rank {rank} exceeds numerical rank {positive} of the kernel matrix"
            )));
        }
        let vectors = eig.vectors.columns(0, rank).clone_owned();
        let eigenvalues = spectrum[..rank].to_vec();
        let mut scaled = vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= eigenvalues[k].sqrt();
        }
        let linear = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { points[i] });
        Ok(KernelBasis {
            kind,
            points: points.to_vec(),
            eigenvalues,
            spectrum,
            vectors,
            linear,
            scaled,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// All Gram eigenvalues (nonincreasing, truncated at the relative cutoff).
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// `L = (1 | x)` on the training points.
    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    /// `Q = V D^{1/2}` restricted to the kept columns.
    pub fn scaled(&self) -> &DMatrix<f64> {
        &self.scaled
    }

    /// `(L | Q)` on the training points.
    pub fn combined(&self) -> DMatrix<f64> {
        hcat(&self.linear, &self.scaled)
    }

    /// Row of `(L | Q)` at a new point by Nyström extension: the kernel
    /// column against the training points, projected through `V D^{-1/2}`.
    /// Reproduces the training rows exactly at training points.
    pub fn row_at(&self, x: f64) -> Result<Vec<f64>> {
        let kx = self
            .points
            .iter()
            .map(|&p| self.kind.eval(x, p))
            .collect::<Result<Vec<_>>>()?;
        let mut row = vec![1.0, x];
        for k in 0..self.rank() {
            let dot: f64 = kx
                .iter()
                .zip(self.vectors.column(k).iter())
                .map(|(a, b)| a * b)
                .sum();
            row.push(dot / self.eigenvalues[k].sqrt());
        }
        Ok(row)
    }

    /// Rows of `(L | Q)` at many points.
    pub fn rows_at(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(xs.len(), 2 + self.rank());
        for (i, &x) in xs.iter().enumerate() {
            for (c, v) in self.row_at(x)?.into_iter().enumerate() {
                out[(i, c)] = v;
            }
        }
        Ok(out)
    }
}

pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// `(L_J, Q_J)` on the Fourier grid.
pub fn build_frequency_basis(grid: &FrequencyGrid, rank: Rank) -> Result<KernelBasis> {
    if let Rank::Fixed(r) = rank {
        if r > grid.len() {
            return Err(Error::Dimension(format!(
                "frequency rank {r} exceeds M = {}",
                grid.len()
            )));
        }
    }
    KernelBasis::build(KernelKind::Frequency, grid.omegas(), rank)
}

/// `(L_H, Q_H)` on the unit-scaled outcomes.
pub fn build_outcome_basis(outcomes: &[f64], rank: Rank) -> Result<KernelBasis> {
    if let Rank::Fixed(r) = rank {
        if r > outcomes.len() {
            return Err(Error::Dimension(format!(
                "outcome rank {r} exceeds N = {}",
                outcomes.len()
            )));
        }
    }
    KernelBasis::build(KernelKind::Outcome, outcomes, rank)
}

/// Column ranges of the four coefficient blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMap {
    pub a: Range<usize>,
    pub b: Range<usize>,
    pub c: Range<usize>,
    pub d: Range<usize>,
}

/// The tensor-product design on the `(subject, frequency)` training grid.
///
/// Row `j * M + m` corresponds to subject `j` at frequency `m`. Column `c`
/// equals `B_H[:, h] ⊗ B_J[:, f]` for `(h, f) = column_pairs[c]`.
#[derive(Clone, Debug)]
pub struct TensorBasis {
    outcome: KernelBasis,
    frequency: KernelBasis,
    bh: DMatrix<f64>,
    bj: DMatrix<f64>,
    column_pairs: Vec<(usize, usize)>,
    block_map: BlockMap,
    /// Row-wise outer products of `B_H` (N x nh²) and `B_J` (M x nf²).
    bh_outer: DMatrix<f64>,
    bj_outer: DMatrix<f64>,
}

/// Builds the tensor-product design from an outcome and a frequency basis.
pub fn tensor_design(outcome: KernelBasis, frequency: KernelBasis) -> TensorBasis {
    let n_h = outcome.rank();
    let n_j = frequency.rank();
    let mut pairs = Vec::with_capacity((n_h + 2) * (n_j + 2));
    let a_start = pairs.len();
    for h in 0..2 {
        for f in 0..2 {
            pairs.push((h, f));
        }
    }
    let b_start = pairs.len();
    for h in 0..n_h {
        for f in 0..2 {
            pairs.push((2 + h, f));
        }
    }
    let c_start = pairs.len();
    for h in 0..2 {
        for f in 0..n_j {
            pairs.push((h, 2 + f));
        }
    }
    let d_start = pairs.len();
    for h in 0..n_h {
        for f in 0..n_j {
            pairs.push((2 + h, 2 + f));
        }
    }
    let block_map = BlockMap {
        a: a_start..b_start,
        b: b_start..c_start,
        c: c_start..d_start,
        d: d_start..pairs.len(),
    };
    let bh = outcome.combined();
    let bj = frequency.combined();
    let bh_outer = row_outer(&bh);
    let bj_outer = row_outer(&bj);
    TensorBasis {
        outcome,
        frequency,
        bh,
        bj,
        column_pairs: pairs,
        block_map,
        bh_outer,
        bj_outer,
    }
}

fn row_outer(b: &DMatrix<f64>) -> DMatrix<f64> {
    let k = b.ncols();
    DMatrix::from_fn(b.nrows(), k * k, |r, c| b[(r, c / k)] * b[(r, c % k)])
}

impl TensorBasis {
    pub fn n_subjects(&self) -> usize {
        self.bh.nrows()
    }

    pub fn n_freq(&self) -> usize {
        self.bj.nrows()
    }

    /// Number of coefficients per Cholesky component.
    pub fn n_coef(&self) -> usize {
        self.column_pairs.len()
    }

    pub fn n_h(&self) -> usize {
        self.outcome.rank()
    }

    pub fn n_j(&self) -> usize {
        self.frequency.rank()
    }

    pub fn block_map(&self) -> &BlockMap {
        &self.block_map
    }

    pub fn outcome_basis(&self) -> &KernelBasis {
        &self.outcome
    }

    pub fn frequency_basis(&self) -> &KernelBasis {
        &self.frequency
    }

    pub fn column_pairs(&self) -> &[(usize, usize)] {
        &self.column_pairs
    }

    /// Row index of `(subject j, frequency m)`, both zero-based.
    pub fn row_index(&self, j: usize, m: usize) -> usize {
        j * self.n_freq() + m
    }

    /// Design row `q_jm`.
    pub fn row(&self, j: usize, m: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.n_coef(),
            self.column_pairs
                .iter()
                .map(|&(h, f)| self.bh[(j, h)] * self.bj[(m, f)]),
        )
    }

    /// The dense `NM x n_coef` design matrix.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n_subjects(), self.n_freq());
        let mut q = DMatrix::zeros(n * m, self.n_coef());
        for j in 0..n {
            for k in 0..m {
                let r = self.row_index(j, k);
                for (c, &(h, f)) in self.column_pairs.iter().enumerate() {
                    q[(r, c)] = self.bh[(j, h)] * self.bj[(k, f)];
                }
            }
        }
        q
    }

    fn coef_matrix(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.bh.ncols(), self.bj.ncols());
        for (c, &(h, f)) in self.column_pairs.iter().enumerate() {
            e[(h, f)] = eta[c];
        }
        e
    }

    /// `Q η` reshaped to `N x M` (subject by frequency).
    pub fn field(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        self.field_with(&self.bh, &self.bj, eta)
    }

    /// Evaluates the expansion of `eta` on arbitrary outcome rows `bh` and
    /// frequency rows `bj` (from [`KernelBasis::rows_at`]).
    pub fn field_with(
        &self,
        bh: &DMatrix<f64>,
        bj: &DMatrix<f64>,
        eta: &DVector<f64>,
    ) -> DMatrix<f64> {
        bh * self.coef_matrix(eta) * bj.transpose()
    }

    /// `Q' diag(w) Q` for weights given as an `N x M` matrix.
    pub fn weighted_gram(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let nf = self.bj.ncols();
        let nh = self.bh.ncols();
        // S[j, (f1, f2)] = Σ_m w_jm B_J[m, f1] B_J[m, f2]
        let s = w * &self.bj_outer;
        // T[(h1, h2), (f1, f2)] = Σ_j B_H[j, h1] B_H[j, h2] S[j, (f1, f2)]
        let t = self.bh_outer.transpose() * s;
        let p = self.n_coef();
        let mut g = DMatrix::zeros(p, p);
        for (c1, &(h1, f1)) in self.column_pairs.iter().enumerate() {
            for (c2, &(h2, f2)) in self.column_pairs.iter().enumerate().take(c1 + 1) {
                let v = t[(h1 * nh + h2, f1 * nf + f2)];
                g[(c1, c2)] = v;
                g[(c2, c1)] = v;
            }
        }
        g
    }

    /// `Q' r` for an `N x M` array `r`.
    pub fn weighted_sum(&self, r: &DMatrix<f64>) -> DVector<f64> {
        let t = self.bh.transpose() * r * &self.bj;
        DVector::from_iterator(
            self.n_coef(),
            self.column_pairs.iter().map(|&(h, f)| t[(h, f)]),
        )
    }

    /// Writes `L_J`, `Q_J`, `L_H`, `Q_H` as CSV files into `dir`.
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        let items = [
            ("L_J.csv", self.frequency.linear()),
            ("Q_J.csv", self.frequency.scaled()),
            ("L_H.csv", self.outcome.linear()),
            ("Q_H.csv", self.outcome.scaled()),
        ];
        for (name, m) in items {
            write_file(&dir.join(name), matrix_csv(m).as_bytes())?;
        }
        Ok(())
    }
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
