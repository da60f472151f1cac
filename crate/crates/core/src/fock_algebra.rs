//! Truncated bosonic operator algebra.
//!
//! Every operator lives on a tensor product of truncated Fock spaces. The
//! composite basis index is row-major over factors: for cutoffs
//! `[d0, d1, d2]` the state `|i0, i1, i2>` has index `(i0 * d1 + i1) * d2 + i2`,
//! which is the ordering produced by [`tensor`].
//!
//! Factor ordering is fixed library-wide as (idler, signal, bath). Whenever a
//! factor is absent the remaining ones keep their relative order, so the
//! received state lives on (idler, returned mode).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Largest composite dimension [`tensor`] will build.
pub const DEFAULT_MAX_DIMENSION: usize = 4096;

/// Tolerance for the Hermitian hint.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Tolerance on `trace + trace_deficit = 1`.
pub const TRACE_TOL: f64 = 1e-12;

#[inline]
pub(crate) fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Largest entrywise modulus of `a - a^dagger`.
pub fn hermitian_deviation(a: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            let d = (a[(i, j)] - a[(j, i)].conj()).norm();
            worst = worst.max(d);
        }
    }
    worst
}

/// A dense operator on a product of truncated modes.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedOperator {
    data: CMatrix,
    cutoffs: Vec<usize>,
    hermitian_hint: bool,
}

impl TruncatedOperator {
    /// Wraps `data`, checking it is square with dimension equal to the
    /// product of `cutoffs`. The Hermitian hint is set when the matrix
    /// passes the hermiticity tolerance.
    pub fn new(data: CMatrix, cutoffs: Vec<usize>) -> Result<Self> {
        let dim = checked_product(&cutoffs)?;
        if data.nrows() != dim || data.ncols() != dim {
            return Err(Error::InvalidDimension(format!(
                "matrix is {}x{} but cutoffs {:?} give {}",
                data.nrows(),
                data.ncols(),
                cutoffs,
                dim
            )));
        }
        let hermitian_hint = hermitian_deviation(&data) < HERMITIAN_TOL;
        Ok(Self { data, cutoffs, hermitian_hint })
    }

    /// Like [`TruncatedOperator::new`] but rejects non-Hermitian input.
    pub fn hermitian(data: CMatrix, cutoffs: Vec<usize>) -> Result<Self> {
        let op = Self::new(data, cutoffs)?;
        if !op.hermitian_hint {
            return Err(Error::NotHermitian { deviation: hermitian_deviation(&op.data) });
        }
        Ok(op)
    }

    pub fn identity(cutoffs: Vec<usize>) -> Result<Self> {
        let dim = checked_product(&cutoffs)?;
        Ok(Self { data: CMatrix::identity(dim, dim), cutoffs, hermitian_hint: true })
    }

    pub fn zeros(cutoffs: Vec<usize>) -> Result<Self> {
        let dim = checked_product(&cutoffs)?;
        Ok(Self { data: CMatrix::zeros(dim, dim), cutoffs, hermitian_hint: true })
    }

    pub fn data(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_data(self) -> CMatrix {
        self.data
    }

    pub fn cutoffs(&self) -> &[usize] {
        &self.cutoffs
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn hermitian_hint(&self) -> bool {
        self.hermitian_hint
    }

    pub fn trace(&self) -> C64 {
        self.data.trace()
    }

    pub fn dagger(&self) -> Self {
        Self {
            data: self.data.adjoint(),
            cutoffs: self.cutoffs.clone(),
            hermitian_hint: self.hermitian_hint,
        }
    }

    pub fn scale(&self, factor: C64) -> Self {
        let data = &self.data * factor;
        let hermitian_hint = self.hermitian_hint && factor.im == 0.0;
        Self { data, cutoffs: self.cutoffs.clone(), hermitian_hint }
    }

    fn same_space(&self, other: &Self) -> Result<()> {
        if self.cutoffs != other.cutoffs {
            return Err(Error::InvalidDimension(format!(
                "cutoff mismatch {:?} vs {:?}",
                self.cutoffs, other.cutoffs
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Self::new(&self.data + &other.data, self.cutoffs.clone())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Self::new(&self.data - &other.data, self.cutoffs.clone())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Self::new(&self.data * &other.data, self.cutoffs.clone())
    }

    /// `[self, other]`
    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        let d = &self.data * &other.data - &other.data * &self.data;
        Self::new(d, self.cutoffs.clone())
    }

    /// `Tr(self * other)` without forming the product.
    pub fn trace_product(&self, other: &Self) -> Result<C64> {
        self.same_space(other)?;
        Ok(trace_of_product(&self.data, &other.data))
    }
}

/// `Tr(a b)` in O(n^2).
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

fn checked_product(cutoffs: &[usize]) -> Result<usize> {
    if cutoffs.is_empty() {
        return Err(Error::InvalidDimension("empty cutoff list".into()));
    }
    let mut dim: usize = 1;
    for &d in cutoffs {
        if d == 0 {
            return Err(Error::InvalidDimension("zero cutoff".into()));
        }
        dim = dim
            .checked_mul(d)
            .ok_or(Error::DimensionOverflow { requested: usize::MAX, max: DEFAULT_MAX_DIMENSION })?;
    }
    Ok(dim)
}

/// Annihilation operator on a single mode truncated at `d` levels.
pub fn annihilation(d: usize) -> Result<TruncatedOperator> {
    if d < 2 {
        return Err(Error::InvalidDimension(format!("mode cutoff must be >= 2, got {d}")));
    }
    let mut m = CMatrix::zeros(d, d);
    for n in 1..d {
        m[(n - 1, n)] = c((n as f64).sqrt());
    }
    Ok(TruncatedOperator { data: m, cutoffs: vec![d], hermitian_hint: false })
}

pub fn creation(d: usize) -> Result<TruncatedOperator> {
    Ok(annihilation(d)?.dagger())
}

/// `a^dagger a`, exact on every retained level.
pub fn number(d: usize) -> Result<TruncatedOperator> {
    if d < 1 {
        return Err(Error::InvalidDimension("mode cutoff must be >= 1".into()));
    }
    let data = CMatrix::from_diagonal(&CVector::from_iterator(d, (0..d).map(|n| c(n as f64))));
    Ok(TruncatedOperator { data, cutoffs: vec![d], hermitian_hint: true })
}

/// Kronecker product with the default dimension cap.
pub fn tensor(a: &TruncatedOperator, b: &TruncatedOperator) -> Result<TruncatedOperator> {
    tensor_with_limit(a, b, DEFAULT_MAX_DIMENSION)
}

pub fn tensor_with_limit(
    a: &TruncatedOperator,
    b: &TruncatedOperator,
    max_dimension: usize,
) -> Result<TruncatedOperator> {
    let requested = a
        .dim()
        .checked_mul(b.dim())
        .ok_or(Error::DimensionOverflow { requested: usize::MAX, max: max_dimension })?;
    if requested > max_dimension {
        return Err(Error::DimensionOverflow { requested, max: max_dimension });
    }
    let data = a.data.kronecker(&b.data);
    let mut cutoffs = a.cutoffs.clone();
    cutoffs.extend_from_slice(&b.cutoffs);
    Ok(TruncatedOperator {
        data,
        cutoffs,
        hermitian_hint: a.hermitian_hint && b.hermitian_hint,
    })
}

/// Embeds a single-mode operator at position `site` of a product space,
/// padding the other factors with identities.
pub fn embed(op: &TruncatedOperator, site: usize, cutoffs: &[usize]) -> Result<TruncatedOperator> {
    if site >= cutoffs.len() || op.cutoffs() != [cutoffs[site]] {
        return Err(Error::InvalidFactors(format!(
            "cannot embed operator with cutoffs {:?} at site {site} of {cutoffs:?}",
            op.cutoffs()
        )));
    }
    let mut acc: Option<TruncatedOperator> = None;
    for (k, &d) in cutoffs.iter().enumerate() {
        let factor = if k == site { op.clone() } else { TruncatedOperator::identity(vec![d])? };
        acc = Some(match acc {
            None => factor,
            Some(prev) => tensor(&prev, &factor)?,
        });
    }
    Ok(acc.expect("nonempty cutoffs"))
}

/// Partial trace of an arbitrary operator, keeping the factors in `keep`
/// (in ascending order, regardless of the order given).
pub fn partial_trace_op(op: &TruncatedOperator, keep: &[usize]) -> Result<TruncatedOperator> {
    let dims = op.cutoffs();
    let mut kept: Vec<usize> = keep.to_vec();
    kept.sort_unstable();
    kept.dedup();
    if kept.is_empty() {
        return Err(Error::InvalidFactors("keep set is empty".into()));
    }
    if kept.len() != keep.len() {
        return Err(Error::InvalidFactors(format!("duplicate factor index in {keep:?}")));
    }
    if let Some(&bad) = kept.iter().find(|&&k| k >= dims.len()) {
        return Err(Error::InvalidFactors(format!(
            "factor {bad} out of range for {} factors",
            dims.len()
        )));
    }
    let traced: Vec<usize> = (0..dims.len()).filter(|k| !kept.contains(k)).collect();
    let kept_dims: Vec<usize> = kept.iter().map(|&k| dims[k]).collect();
    let n_keep: usize = kept_dims.iter().product();
    let n_traced: usize = traced.iter().map(|&k| dims[k]).product();

    // full[t][k] = composite index of (kept multi-index k, traced multi-index t)
    let mut full = vec![vec![0usize; n_keep]; n_traced];
    let n = op.dim();
    let mut digits = vec![0usize; dims.len()];
    for idx in 0..n {
        let mut rem = idx;
        for f in (0..dims.len()).rev() {
            digits[f] = rem % dims[f];
            rem /= dims[f];
        }
        let k = kept.iter().fold(0, |acc, &f| acc * dims[f] + digits[f]);
        let t = traced.iter().fold(0, |acc, &f| acc * dims[f] + digits[f]);
        full[t][k] = idx;
    }

    let data = op.data();
    let mut out = CMatrix::zeros(n_keep, n_keep);
    for row_map in &full {
        for j in 0..n_keep {
            let cj = row_map[j];
            for i in 0..n_keep {
                out[(i, j)] += data[(row_map[i], cj)];
            }
        }
    }
    Ok(TruncatedOperator {
        hermitian_hint: op.hermitian_hint && hermitian_deviation(&out) < HERMITIAN_TOL,
        data: out,
        cutoffs: kept_dims,
    })
}

/// Partial trace of a density operator; the deficit is carried through.
pub fn partial_trace(rho: &DensityOperator, keep: &[usize]) -> Result<DensityOperator> {
    let op = partial_trace_op(rho.op(), keep)?;
    DensityOperator::with_trace_tolerance(op, rho.trace_deficit(), TRACE_TOL.max(1e-14 * rho.dim() as f64))
}

/// A density operator on a truncated space together with the probability
/// mass that fell outside the truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    op: TruncatedOperator,
    trace_deficit: f64,
}

impl DensityOperator {
    /// Checks hermiticity and `trace + trace_deficit = 1`. Positivity is
    /// checked separately by [`DensityOperator::min_eigenvalue`].
    pub fn new(op: TruncatedOperator, trace_deficit: f64) -> Result<Self> {
        Self::with_trace_tolerance(op, trace_deficit, TRACE_TOL)
    }

    pub fn with_trace_tolerance(op: TruncatedOperator, trace_deficit: f64, tol: f64) -> Result<Self> {
        if !op.hermitian_hint() {
            return Err(Error::NotHermitian { deviation: hermitian_deviation(op.data()) });
        }
        if !(trace_deficit >= 0.0) {
            return Err(Error::InvalidParameter(format!("negative trace deficit {trace_deficit}")));
        }
        let tr = op.trace();
        if (tr.re + trace_deficit - 1.0).abs() > tol || tr.im.abs() > tol {
            return Err(Error::Numerical(format!(
                "trace {tr} plus deficit {trace_deficit:e} is not 1"
            )));
        }
        Ok(Self { op, trace_deficit })
    }

    /// Pure state `|v><v|`; the deficit is `1 - <v|v>`.
    pub fn from_pure(v: &CVector, cutoffs: Vec<usize>) -> Result<Self> {
        let data = v * v.adjoint();
        let norm_sq = v.norm_squared();
        let op = TruncatedOperator::new(data, cutoffs)?;
        Self::new(op, (1.0 - norm_sq).max(0.0))
    }

    pub fn op(&self) -> &TruncatedOperator {
        &self.op
    }

    pub fn matrix(&self) -> &CMatrix {
        self.op.data()
    }

    pub fn cutoffs(&self) -> &[usize] {
        self.op.cutoffs()
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn trace_deficit(&self) -> f64 {
        self.trace_deficit
    }

    /// Errors with [`Error::Truncation`] when the deficit exceeds `tolerance`.
    pub fn check_truncation(&self, tolerance: f64) -> Result<()> {
        if self.trace_deficit > tolerance {
            return Err(Error::Truncation { deficit: self.trace_deficit, tolerance });
        }
        Ok(())
    }

    /// `Tr(rho A)` (real part; imaginary part is dropped for Hermitian `A`).
    pub fn expectation(&self, a: &TruncatedOperator) -> Result<f64> {
        Ok(self.op.trace_product(a)?.re)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let e = eig_hermitian(&self.op)?;
        Ok(*e.values.last().expect("nonempty spectrum"))
    }

    pub fn tensor(&self, other: &Self) -> Result<Self> {
        let op = tensor(&self.op, &other.op)?;
        let kept = (1.0 - self.trace_deficit) * (1.0 - other.trace_deficit);
        Self::new(op, 1.0 - kept)
    }
}

/// Bose-Einstein weights `N_B^n / (1 + N_B)^(1 + n)` for `n < d`.
pub fn thermal_weights(n_b: f64, d: usize) -> Vec<f64> {
    let ratio = n_b / (1.0 + n_b);
    let mut w = Vec::with_capacity(d);
    let mut rho = 1.0 / (1.0 + n_b);
    for _ in 0..d {
        w.push(rho);
        rho *= ratio;
    }
    w
}

/// Probability mass of the thermal distribution at levels `>= d`.
pub fn thermal_tail(n_b: f64, d: usize) -> f64 {
    (n_b / (1.0 + n_b)).powi(d as i32)
}

/// Thermal state with mean photon number `n_b`, truncated to `d` levels
/// without renormalization.
pub fn thermal_state(n_b: f64, d: usize) -> Result<DensityOperator> {
    if !(n_b >= 0.0) || !n_b.is_finite() {
        return Err(Error::InvalidParameter(format!("N_B must be finite and >= 0, got {n_b}")));
    }
    if d < 1 {
        return Err(Error::InvalidDimension("thermal cutoff must be >= 1".into()));
    }
    let w = thermal_weights(n_b, d);
    let data = CMatrix::from_diagonal(&CVector::from_iterator(d, w.iter().map(|&x| c(x))));
    let op = TruncatedOperator { data, cutoffs: vec![d], hermitian_hint: true };
    // the truncated weights sum to 1 - tail up to rounding
    let deficit = thermal_tail(n_b, d);
    DensityOperator::new(op, deficit)
}

/// Thermal state that additionally errors when the truncation deficit is
/// above `tolerance`.
pub fn thermal_state_checked(n_b: f64, d: usize, tolerance: f64) -> Result<DensityOperator> {
    let rho = thermal_state(n_b, d)?;
    rho.check_truncation(tolerance)?;
    Ok(rho)
}

/// Spectrum of a Hermitian operator, eigenvalues in descending order and
/// eigenvectors as the matching orthonormal columns.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

impl HermitianEigen {
    /// `sum_i lambda_i v_i v_i^dagger`
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            for i in 0..n {
                scaled[(i, j)] *= lam;
            }
        }
        scaled * self.vectors.adjoint()
    }
}

pub fn eig_hermitian(a: &TruncatedOperator) -> Result<HermitianEigen> {
    if !a.hermitian_hint() {
        return Err(Error::NotHermitian { deviation: hermitian_deviation(a.data()) });
    }
    hermitian_eigen(a.data())
}

/// Eigendecomposition of a Hermitian matrix given as a raw matrix. The
/// input is symmetrized before decomposition.
pub fn hermitian_eigen(a: &CMatrix) -> Result<HermitianEigen> {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return Err(Error::InvalidDimension(format!("{}x{} is not square", a.nrows(), a.ncols())));
    }
    let sym = (a + a.adjoint()) * c(0.5);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue".into()));
    }
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(HermitianEigen { values, vectors })
}

/// One photon-number block of the beamsplitter: basis states `(s, b)` with
/// `s + b = total`, sorted by `s`, and the unitary restricted to them.
#[derive(Debug, Clone)]
struct BeamsplitterBlock {
    states: Vec<(usize, usize)>,
    unitary: CMatrix,
}

/// `exp[asin(eta) (s^dagger b - s b^dagger)]` on (signal, bath), stored
/// block-diagonally by total photon number.
///
/// The generator conserves `s + b`. A block with total `N` is complete, and
/// so exact, when `N < min(d_s, d_b)`; blocks at or above that joint cutoff
/// are missing states and their rows deviate from the untruncated unitary.
/// The truncated matrix is still exactly unitary.
#[derive(Debug, Clone)]
pub struct Beamsplitter {
    eta: f64,
    d_s: usize,
    d_b: usize,
    blocks: Vec<BeamsplitterBlock>,
}

impl Beamsplitter {
    pub fn new(eta: f64, d_s: usize, d_b: usize) -> Result<Self> {
        if !(eta.abs() <= 1.0) {
            return Err(Error::InvalidParameter(format!("|eta| must be <= 1, got {eta}")));
        }
        if d_s < 1 || d_b < 1 {
            return Err(Error::InvalidDimension("beamsplitter cutoffs must be >= 1".into()));
        }
        let theta = eta.asin();
        let mut blocks = Vec::with_capacity(d_s + d_b - 1);
        for total in 0..(d_s + d_b - 1) {
            let s_lo = total.saturating_sub(d_b - 1);
            let s_hi = total.min(d_s - 1);
            let states: Vec<(usize, usize)> = (s_lo..=s_hi).map(|s| (s, total - s)).collect();
            let k = states.len();
            // i * generator, Hermitian and tridiagonal
            let mut herm = CMatrix::zeros(k, k);
            for j in 0..k.saturating_sub(1) {
                let (s, b) = states[j];
                let g = ((s + 1) as f64 * b as f64).sqrt();
                herm[(j + 1, j)] = C64::new(0.0, g);
                herm[(j, j + 1)] = C64::new(0.0, -g);
            }
            let unitary = if theta == 0.0 || k == 1 {
                CMatrix::identity(k, k)
            } else {
                let e = hermitian_eigen(&herm)?;
                let mut phased = e.vectors.clone();
                for (col, &lam) in e.values.iter().enumerate() {
                    let phase = C64::from_polar(1.0, -theta * lam);
                    for row in 0..k {
                        phased[(row, col)] *= phase;
                    }
                }
                phased * e.vectors.adjoint()
            };
            blocks.push(BeamsplitterBlock { states, unitary });
        }
        Ok(Self { eta, d_s, d_b, blocks })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn cutoffs(&self) -> (usize, usize) {
        (self.d_s, self.d_b)
    }

    /// Index of `|s, b>` on the (signal, bath) space.
    #[inline]
    pub fn index(&self, s: usize, b: usize) -> usize {
        s * self.d_b + b
    }

    /// Whether the basis row `|s, b>` lies in a block cut by truncation.
    pub fn is_boundary(&self, s: usize, b: usize) -> bool {
        s + b >= self.d_s.min(self.d_b)
    }

    /// Applies the unitary to a vector on (signal, bath).
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); v.len()];
        let mut local = Vec::new();
        for block in &self.blocks {
            local.clear();
            local.extend(block.states.iter().map(|&(s, b)| v[self.index(s, b)]));
            if local.iter().all(|x| x.re == 0.0 && x.im == 0.0) {
                continue;
            }
            for (r, &(s, b)) in block.states.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for (col, x) in local.iter().enumerate() {
                    acc += block.unitary[(r, col)] * x;
                }
                out[self.index(s, b)] = acc;
            }
        }
        out
    }

    pub fn to_operator(&self) -> TruncatedOperator {
        let dim = self.d_s * self.d_b;
        let mut m = CMatrix::zeros(dim, dim);
        for block in &self.blocks {
            for (r, &(sr, br)) in block.states.iter().enumerate() {
                for (col, &(sc, bc)) in block.states.iter().enumerate() {
                    m[(self.index(sr, br), self.index(sc, bc))] = block.unitary[(r, col)];
                }
            }
        }
        TruncatedOperator { hermitian_hint: hermitian_deviation(&m) < HERMITIAN_TOL, data: m, cutoffs: vec![self.d_s, self.d_b] }
    }
}

/// Dense beamsplitter unitary on (signal, bath) with cutoffs `(d_s, d_b)`.
pub fn beamsplitter_unitary(eta: f64, d_s: usize, d_b: usize) -> Result<TruncatedOperator> {
    Ok(Beamsplitter::new(eta, d_s, d_b)?.to_operator())
}
