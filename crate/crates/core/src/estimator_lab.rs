//! Optimal estimator observables on a concrete (idler, returned mode) space,
//! their outcome statistics under `rho_eta`, and the moment machinery behind
//! the error-exponent theorem.
//!
//! The idler is realised with dimension equal to the Schmidt rank, label `a`
//! standing for `|v_a>`. Full `rho_eta` construction is meant for small baths
//! (`N_B` up to about 3); bright-bath results come from `qfi_engine` only.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock_algebra::{
    annihilation, c, hermitian_eigen, tensor, thermal_weights, trace_of_product, Beamsplitter, CMatrix,
    DensityOperator, TruncatedOperator, C64, DEFAULT_MAX_DIMENSION,
};
use crate::qfi_engine::{derivative_at_zero, rest_state, SUPPORT_GUARD};
use crate::state_models::SchmidtState;

pub const RECONSTRUCTION_TOL: f64 = 1e-9;

/// Reflectivities used for derivative and unbiasedness checks.
pub const ETA_GRID: [f64; 3] = [1e-2, 5e-3, 1e-3];

pub const DISTRIBUTION_CSV_SCHEMA: &str = "# schema: qi-distribution-csv v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableSource {
    Sld,
    GaussianAb,
    Quadrature,
    JaynesCummings,
}

impl fmt::Display for ObservableSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sld => "sld",
            Self::GaussianAb => "gaussian_ab",
            Self::Quadrature => "quadrature",
            Self::JaynesCummings => "jaynes_cummings",
        })
    }
}

/// A Hermitian observable together with its spectral decomposition.
///
/// Every constructor in this module rescales the raw operator so that
/// `Tr(d rho/d eta * O) = 1`; `normalization` is the factor applied. For the
/// SLD this factor is `1/H`.
#[derive(Debug, Clone)]
pub struct ObservableSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `eigenvalues`.
    pub basis: CMatrix,
    pub source: ObservableSource,
    pub normalization: f64,
    operator: TruncatedOperator,
}

impl ObservableSpectrum {
    pub fn from_operator(op: TruncatedOperator, source: ObservableSource, normalization: f64) -> Result<Self> {
        let eig = hermitian_eigen(op.data())?;
        let scale = op.data().iter().fold(1.0_f64, |m, z| m.max(z.norm()));
        let err = (eig.reconstruct() - op.data()).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        if err > RECONSTRUCTION_TOL * scale {
            return Err(Error::Numerical(format!("observable reconstruction error {err:e}")));
        }
        Ok(Self { eigenvalues: eig.values, basis: eig.vectors, source, normalization, operator: op })
    }

    pub fn operator(&self) -> &TruncatedOperator {
        &self.operator
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Tr(rho O)`
    pub fn expectation(&self, rho: &DensityOperator) -> Result<f64> {
        rho.expectation(&self.operator)
    }

    /// QFI implied by the normalization, for the SLD only.
    pub fn sld_information(&self) -> Option<f64> {
        (self.source == ObservableSource::Sld).then(|| 1.0 / self.normalization)
    }
}

/// `rho_0` and its reflectivity derivative on (idler, returned mode).
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub rho0: DensityOperator,
    pub drho: TruncatedOperator,
    pub bath_cutoff: usize,
}

pub fn local_model(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<LocalModel> {
    Ok(LocalModel {
        rho0: rest_state(state, n_b, bath_cutoff)?,
        drho: derivative_at_zero(state, n_b, bath_cutoff)?,
        bath_cutoff,
    })
}

/// Closed-form SLD:
/// `L = -2/(1+N_B) sum |v_a><v_a'| (x) (conj(c_{aa'}) b + c_{a'a} b^dagger)`,
/// `c_{aa'} = sqrt(p_a p_a') <w_a|s|w_a'> / (p_a + p_a' N_B/(1+N_B))`.
pub fn sld_operator(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<TruncatedOperator> {
    let r = state.rank();
    if r * bath_cutoff > DEFAULT_MAX_DIMENSION {
        return Err(Error::DimensionOverflow { requested: r * bath_cutoff, max: DEFAULT_MAX_DIMENSION });
    }
    let ratio = n_b / (1.0 + n_b);
    let p = state.probabilities();
    let s = state.lowering_elements();
    let coef = CMatrix::from_fn(r, r, |a, ap| {
        let den = p[a] + p[ap] * ratio;
        if den < SUPPORT_GUARD {
            C64::new(0.0, 0.0)
        } else {
            s[(a, ap)] * c((p[a] * p[ap]).sqrt() / den)
        }
    });
    let with_b = CMatrix::from_fn(r, r, |a, ap| coef[(a, ap)].conj());
    let with_bdag = CMatrix::from_fn(r, r, |a, ap| coef[(ap, a)]);
    let b = annihilation(bath_cutoff)?;
    let l = tensor(&TruncatedOperator::new(with_b, vec![r])?, &b)?
        .add(&tensor(&TruncatedOperator::new(with_bdag, vec![r])?, &b.dagger())?)?;
    Ok(l.scale(c(-2.0 / (1.0 + n_b))))
}

/// SLD from its definition in the eigenbasis of `rho_0`:
/// `L = sum_{mn} 2 <m|d rho|n> / (lambda_m + lambda_n) |m><n|`, restricted to
/// pairs with `lambda_m + lambda_n >= SUPPORT_GUARD`.
pub fn sld_eigen_sum(rho0: &CMatrix, drho: &CMatrix) -> Result<CMatrix> {
    let eig = hermitian_eigen(rho0)?;
    let mut rotated = eig.vectors.adjoint() * drho * &eig.vectors;
    let n = eig.values.len();
    for j in 0..n {
        for i in 0..n {
            let den = eig.values[i] + eig.values[j];
            rotated[(i, j)] = if den < SUPPORT_GUARD { C64::new(0.0, 0.0) } else { rotated[(i, j)] * c(2.0 / den) };
        }
    }
    Ok(&eig.vectors * rotated * eig.vectors.adjoint())
}

/// Rescales a Hermitian operator so that `Tr(d rho * O) = 1`.
pub fn normalized_observable(
    raw: TruncatedOperator,
    drho: &TruncatedOperator,
    source: ObservableSource,
) -> Result<ObservableSpectrum> {
    if raw.cutoffs() != drho.cutoffs() {
        return Err(Error::InvalidFactors(format!("observable {:?} vs model {:?}", raw.cutoffs(), drho.cutoffs())));
    }
    let slope = trace_of_product(drho.data(), raw.data()).re;
    let scale = raw.data().iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    if !(slope.abs() > 1e-13 * scale.max(1.0)) {
        return Err(Error::ZeroInformation);
    }
    let norm = 1.0 / slope;
    let op = TruncatedOperator::hermitian(raw.scale(c(norm)).into_data(), raw.cutoffs().to_vec())?;
    ObservableSpectrum::from_operator(op, source, norm)
}

/// `O = L / H`, with `H = Tr(L d rho)` on the truncated space.
pub fn sld_observable(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<ObservableSpectrum> {
    let l = sld_operator(state, n_b, bath_cutoff)?;
    let drho = derivative_at_zero(state, n_b, bath_cutoff)?;
    normalized_observable(l, &drho, ObservableSource::Sld)
}

/// `a b + a^dagger b^dagger`, with the idler labels read as Fock levels in
/// Schmidt order (the natural basis for the squeezed vacuum).
pub fn gaussian_ab_observable(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<ObservableSpectrum> {
    let r = state.rank();
    if r < 2 {
        return Err(Error::InvalidDimension("idler needs at least two Schmidt terms".into()));
    }
    let ab = tensor(&annihilation(r)?, &annihilation(bath_cutoff)?)?;
    let raw = ab.add(&ab.dagger())?;
    normalized_observable(raw, &derivative_at_zero(state, n_b, bath_cutoff)?, ObservableSource::GaussianAb)
}

/// `e^{-i phi} b + e^{i phi} b^dagger` on the returned mode.
pub fn quadrature_observable(
    state: &SchmidtState,
    n_b: f64,
    bath_cutoff: usize,
    phi: f64,
) -> Result<ObservableSpectrum> {
    let b = annihilation(bath_cutoff)?;
    let quad = b.scale(C64::from_polar(1.0, -phi)).add(&b.dagger().scale(C64::from_polar(1.0, phi)))?;
    let raw = tensor(&TruncatedOperator::identity(vec![state.rank()])?, &quad)?;
    normalized_observable(raw, &derivative_at_zero(state, n_b, bath_cutoff)?, ObservableSource::Quadrature)
}

/// `sigma^+ b + sigma^- b^dagger` with `sigma^+ = |v_0><v_1|`, on a two-term
/// idler. Only the operator is modelled, not a physical readout.
pub fn jaynes_cummings_observable(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<ObservableSpectrum> {
    if state.rank() != 2 {
        return Err(Error::InvalidDimension(format!("needs Schmidt rank 2, got {}", state.rank())));
    }
    let mut sp = CMatrix::zeros(2, 2);
    sp[(0, 1)] = c(1.0);
    let term = tensor(&TruncatedOperator::new(sp, vec![2])?, &annihilation(bath_cutoff)?)?;
    let raw = term.add(&term.dagger())?;
    normalized_observable(raw, &derivative_at_zero(state, n_b, bath_cutoff)?, ObservableSource::JaynesCummings)
}

/// `rho_eta` on (idler, returned mode).
///
/// Each bath level `|n>` is pushed together with every Schmidt vector through
/// the beamsplitter on an enlarged (signal, bath) space, large enough that no
/// populated photon-number block is cut. The signal is traced out and the
/// returned mode cropped to `bath_cutoff`; mass lost to the crop, the bath tail
/// and the transmitter truncation is reported as the trace deficit, which must
/// not exceed `tolerance`.
pub fn received_state(
    state: &SchmidtState,
    n_b: f64,
    eta: f64,
    bath_cutoff: usize,
    tolerance: f64,
) -> Result<DensityOperator> {
    if bath_cutoff < 2 {
        return Err(Error::InvalidDimension("bath cutoff must be >= 2".into()));
    }
    let r = state.rank();
    let rows = r * bath_cutoff;
    if rows > DEFAULT_MAX_DIMENSION {
        return Err(Error::DimensionOverflow { requested: rows, max: DEFAULT_MAX_DIMENSION });
    }
    let d_s = state.cutoff();
    let span = d_s + bath_cutoff;
    let bs = Beamsplitter::new(eta, span, span)?;
    let weights = thermal_weights(n_b, bath_cutoff);
    let levels: Vec<usize> = (0..bath_cutoff).filter(|&n| weights[n] > 0.0).collect();

    // one (rows x span) block per bath level; the full product is then a
    // single matrix multiplication, independent of the thread count
    let blocks: Vec<CMatrix> = levels
        .par_iter()
        .map(|&n| {
            let mut a = CMatrix::zeros(rows, span);
            let mut input = vec![C64::new(0.0, 0.0); span * span];
            for (alpha, t) in state.terms().iter().enumerate() {
                input.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
                for s in 0..d_s {
                    input[bs.index(s, n)] = t.vector[s];
                }
                let out = bs.apply(&input);
                let w = c((t.p * weights[n]).sqrt());
                for b in 0..bath_cutoff {
                    for s in 0..span {
                        a[(alpha * bath_cutoff + b, s)] = out[bs.index(s, b)] * w;
                    }
                }
            }
            a
        })
        .collect();
    let mut stacked = CMatrix::zeros(rows, span * blocks.len());
    for (k, blk) in blocks.iter().enumerate() {
        stacked.columns_mut(k * span, span).copy_from(blk);
    }
    let rho = &stacked * stacked.adjoint();
    let rho = (&rho + rho.adjoint()) * c(0.5);
    let deficit = (1.0 - rho.trace().re).max(0.0);
    if deficit > tolerance {
        return Err(Error::Truncation { deficit, tolerance });
    }
    let op = TruncatedOperator::hermitian(rho, vec![r, bath_cutoff])?;
    DensityOperator::with_trace_tolerance(op, deficit, 1e-12)
}

/// Least-squares quadratic fit of `eta -> Tr(rho_eta O)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessFit {
    pub etas: Vec<f64>,
    pub means: Vec<f64>,
    pub intercept: f64,
    pub slope: f64,
    pub curvature: f64,
    /// `2 g(h/2) - g(h)` with `g(h) = (m(h) - m(0)) / h`, when the grid holds
    /// such a pair.
    pub richardson_slope: Option<f64>,
}

pub fn unbiasedness_check(
    state: &SchmidtState,
    n_b: f64,
    obs: &ObservableSpectrum,
    etas: &[f64],
    bath_cutoff: usize,
    tolerance: f64,
) -> Result<UnbiasednessFit> {
    let mut grid = vec![0.0];
    grid.extend(etas.iter().copied().filter(|&e| e != 0.0));
    if grid.len() < 3 {
        return Err(Error::InvalidParameter("need at least two nonzero reflectivities".into()));
    }
    let means = grid
        .iter()
        .map(|&eta| obs.expectation(&received_state(state, n_b, eta, bath_cutoff, tolerance)?))
        .collect::<Result<Vec<f64>>>()?;
    let design = DMatrix::from_fn(grid.len(), 3, |i, j| grid[i].powi(j as i32));
    let coeffs = design
        .svd(true, true)
        .solve(&DVector::from_column_slice(&means), 1e-300)
        .map_err(|e| Error::Numerical(e.to_string()))?;

    let slope_at = |h: f64| grid.iter().position(|&e| e == h).map(|i| (means[i] - means[0]) / h);
    let richardson_slope = grid
        .iter()
        .find_map(|&h| Some(2.0 * slope_at(h / 2.0)? - slope_at(h)?).filter(|_| h != 0.0));
    Ok(UnbiasednessFit {
        etas: grid,
        means,
        intercept: coeffs[0],
        slope: coeffs[1],
        curvature: coeffs[2],
        richardson_slope,
    })
}

/// Projective-measurement statistics of an observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDistribution {
    pub values: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub eta: Option<f64>,
    pub deficit: f64,
}

pub fn outcome_distribution(rho: &DensityOperator, obs: &ObservableSpectrum) -> Result<OutcomeDistribution> {
    if rho.dim() != obs.dim() {
        return Err(Error::InvalidFactors(format!("state dim {} vs observable dim {}", rho.dim(), obs.dim())));
    }
    let rotated = rho.matrix() * &obs.basis;
    let mut probabilities = Vec::with_capacity(obs.dim());
    for i in 0..obs.dim() {
        let p: C64 = obs.basis.column(i).iter().zip(rotated.column(i).iter()).map(|(u, v)| u.conj() * v).sum();
        if p.re < -1e-10 {
            return Err(Error::Numerical(format!("negative outcome probability {:e}", p.re)));
        }
        probabilities.push(p.re.max(0.0));
    }
    let total: f64 = probabilities.iter().sum();
    Ok(OutcomeDistribution {
        values: obs.eigenvalues.clone(),
        probabilities,
        eta: None,
        deficit: (1.0 - total).max(0.0),
    })
}

impl OutcomeDistribution {
    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    /// `sum_i p_i o_i^k`, unnormalised.
    pub fn raw_moment(&self, k: u32) -> f64 {
        self.values.iter().zip(&self.probabilities).map(|(o, p)| p * o.powi(k as i32)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    pub fn central_moment(&self, k: u32) -> f64 {
        let m = self.mean();
        self.values.iter().zip(&self.probabilities).map(|(o, p)| p * (o - m).powi(k as i32)).sum()
    }

    pub fn variance(&self) -> f64 {
        self.raw_moment(2) - self.mean().powi(2)
    }

    /// Outcomes sorted by value, with values closer than `tol` merged and
    /// zero-probability outcomes dropped.
    pub fn merged(&self, tol: f64) -> Self {
        let mut pairs: Vec<(f64, f64)> =
            self.values.iter().copied().zip(self.probabilities.iter().copied()).filter(|&(_, p)| p > 0.0).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::new();
        let mut probabilities: Vec<f64> = Vec::new();
        for (v, p) in pairs {
            match values.last() {
                Some(&last) if (v - last).abs() <= tol => {
                    let q = probabilities.last_mut().expect("parallel vectors");
                    // probability-weighted representative value
                    let merged = (last * *q + v * p) / (*q + p);
                    *q += p;
                    *values.last_mut().expect("parallel vectors") = merged;
                }
                _ => {
                    values.push(v);
                    probabilities.push(p);
                }
            }
        }
        Self { values, probabilities, eta: self.eta, deficit: self.deficit }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "{DISTRIBUTION_CSV_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["value", "probability"]).map_err(|e| Error::Format(e.to_string()))?;
        for (v, p) in self.values.iter().zip(&self.probabilities) {
            w.write_record([v.to_string(), p.to_string()]).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Central moments of the optimal observable at `eta = 0` against the bound
/// `F_2k <= (C / (H^2 N_B))^k (2k)!`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBoundReport {
    pub ks: Vec<u32>,
    /// `F_j` for `j = 1..=2 k_max`.
    pub central_moments: Vec<f64>,
    /// `<s^k s^dagger^k>` of the signal marginal, `k = 1..=k_max`.
    pub antinormal_moments: Vec<f64>,
    /// Smallest `C` with `<s^k s^dagger^k> <= k! C^k` on the computed range.
    pub c: f64,
    pub h: f64,
    pub n_b: f64,
    pub bounds: Vec<f64>,
    pub pass: Vec<bool>,
}

impl MomentBoundReport {
    pub fn f(&self, j: usize) -> f64 {
        self.central_moments[j - 1]
    }

    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    /// Upper end of the interval on which the moment generating function is
    /// guaranteed finite, `sqrt(H^2 N_B / C)`.
    pub fn mgf_radius(&self) -> f64 {
        (self.h * self.h * self.n_b / self.c).sqrt()
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Nonzero entries of a dense matrix, for cheap repeated products with the
/// (very sparse) estimator observables.
struct Triplets(Vec<(usize, usize, C64)>);

impl Triplets {
    fn from_dense(m: &CMatrix) -> Self {
        let mut out = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let z = m[(i, j)];
                if z.re != 0.0 || z.im != 0.0 {
                    out.push((i, j, z));
                }
            }
        }
        Self(out)
    }

    fn mul(&self, x: &CMatrix) -> CMatrix {
        let mut y = CMatrix::zeros(x.nrows(), x.ncols());
        for col in 0..x.ncols() {
            let xc = x.column(col);
            let mut yc = y.column_mut(col);
            for &(i, j, z) in &self.0 {
                yc[i] += z * xc[j];
            }
        }
        y
    }
}

/// Central moments `F_j = Tr(rho_0 (O - <O>)^j)` come from
/// `X_k = (O - <O>)^k rho_0^{1/2}`: `F_2k = |X_k|^2`, `F_2k+1 = <X_k, X_k+1>`.
/// `rho_0` is diagonal in the product basis, which keeps this exact.
pub fn moment_bound_check(state: &SchmidtState, n_b: f64, k_max: u32, bath_cutoff: usize) -> Result<MomentBoundReport> {
    if k_max == 0 || k_max > 5 {
        return Err(Error::InvalidParameter(format!("k_max must be in 1..=5, got {k_max}")));
    }
    let model = local_model(state, n_b, bath_cutoff)?;
    let l = sld_operator(state, n_b, bath_cutoff)?;
    let h = trace_of_product(l.data(), model.drho.data()).re;
    if !(h > 0.0) {
        return Err(Error::ZeroInformation);
    }
    let rho = model.rho0.matrix();
    let dim = rho.nrows();
    let mut obs = l.data() / c(h);
    let mean = trace_of_product(rho, &obs).re;
    for i in 0..dim {
        obs[(i, i)] -= c(mean);
    }
    let centered = Triplets::from_dense(&obs);

    let mut x = CMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| c(rho[(i, i)].re.max(0.0).sqrt())));
    let mut central_moments = Vec::with_capacity(2 * k_max as usize);
    for _ in 0..k_max {
        let next = centered.mul(&x);
        central_moments.push(x.dotc(&next).re);
        central_moments.push(next.norm_squared());
        x = next;
    }
    let antinormal_moments: Vec<f64> = (1..=k_max).map(|k| state.antinormal_moment(k)).collect();
    let c_fit = antinormal_moments
        .iter()
        .zip(1..=k_max)
        .map(|(&m, k)| (m / factorial(k)).powf(1.0 / k as f64))
        .fold(0.0_f64, f64::max);

    let ks: Vec<u32> = (1..=k_max).collect();
    let bounds: Vec<f64> = ks
        .iter()
        .map(|&k| {
            if n_b == 0.0 {
                f64::INFINITY
            } else {
                (c_fit / (h * h * n_b)).powi(k as i32) * factorial(2 * k)
            }
        })
        .collect();
    let pass = ks.iter().zip(&bounds).map(|(&k, &b)| central_moments[2 * k as usize - 1] <= b).collect();
    Ok(MomentBoundReport { ks, central_moments, antinormal_moments, c: c_fit, h, n_b, bounds, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgfEstimate {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    /// `t` lies outside `[0, limit)`; the value is still computed because the
    /// spectrum is finite.
    pub outside_interval: Vec<bool>,
}

/// `sum_i p_i exp(t (o_i - mean))`, normalised by the retained mass.
pub fn mgf_empirical(dist: &OutcomeDistribution, ts: &[f64], limit: Option<f64>) -> MgfEstimate {
    let total = dist.total();
    let mean = dist.mean() / total;
    let values = ts
        .iter()
        .map(|&t| {
            dist.values.iter().zip(&dist.probabilities).map(|(o, p)| p * (t * (o - mean)).exp()).sum::<f64>() / total
        })
        .collect();
    let outside_interval = ts.iter().map(|&t| t < 0.0 || limit.is_some_and(|l| t >= l)).collect();
    MgfEstimate { t: ts.to_vec(), values, outside_interval }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qfi_engine::qfi_schmidt_value;
    use crate::state_models::{cat_state, coherent, tmsv};

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().fold(0.0_f64, |a, z| a.max(z.norm()))
    }

    #[test]
    fn sld_solves_lyapunov_equation() {
        for state in [tmsv(0.3, 14).unwrap(), coherent(0.3, 0.4, 16).unwrap(), cat_state(0.3, 2, 16).unwrap()] {
            let m = local_model(&state, 1.0, 30).unwrap();
            let l = sld_operator(&state, 1.0, 30).unwrap();
            let rho = m.rho0.matrix();
            let lhs = (rho * l.data() + l.data() * rho) * c(0.5);
            assert!(max_abs(&(lhs - m.drho.data())) < 1e-12);
            assert!(l.hermitian_hint());
        }
    }

    #[test]
    fn sld_trace_identities() {
        for state in [tmsv(0.3, 14).unwrap(), coherent(0.3, 0.0, 16).unwrap(), cat_state(0.3, 2, 16).unwrap()] {
            let m = local_model(&state, 1.0, 40).unwrap();
            let l = sld_operator(&state, 1.0, 40).unwrap();
            let h = qfi_schmidt_value(&state, 1.0).unwrap();
            assert!(m.rho0.expectation(&l).unwrap().abs() < 1e-9);
            assert!((trace_of_product(l.data(), m.drho.data()).re - h).abs() < 1e-8);
            // Tr(rho L^2) = H as well
            let l2 = l.matmul(&l).unwrap();
            assert!((m.rho0.expectation(&l2).unwrap() - h).abs() < 1e-8);
        }
    }

    #[test]
    fn closed_and_eigen_sum_sld_agree() {
        for state in [tmsv(0.3, 10).unwrap(), cat_state(0.5, 3, 14).unwrap()] {
            let m = local_model(&state, 1.0, 24).unwrap();
            let closed = sld_operator(&state, 1.0, 24).unwrap();
            let eig = sld_eigen_sum(m.rho0.matrix(), m.drho.data()).unwrap();
            // compare on the support: weight by rho_0^{1/2} on both sides
            let e = hermitian_eigen(m.rho0.matrix()).unwrap();
            let diff = e.vectors.adjoint() * (eig - closed.data()) * &e.vectors;
            let n = e.values.len();
            let mut worst = 0.0_f64;
            for i in 0..n {
                for j in 0..n {
                    if e.values[i] + e.values[j] >= SUPPORT_GUARD {
                        worst = worst.max(diff[(i, j)].norm());
                    }
                }
            }
            assert!(worst < 1e-8, "{worst:e}");
        }
    }

    #[test]
    fn coherent_sld_is_a_quadrature() {
        let phi = 0.7;
        let state = coherent(0.4, phi, 20).unwrap();
        let sld = sld_observable(&state, 1.0, 20).unwrap();
        let quad = quadrature_observable(&state, 1.0, 20, phi).unwrap();
        assert!(max_abs(&(sld.operator().data() - quad.operator().data())) < 1e-10);
        // the measured quadrature has the sign that makes the slope positive
        let b = annihilation(20).unwrap();
        let x = tensor(
            &TruncatedOperator::identity(vec![1]).unwrap(),
            &b.scale(C64::from_polar(1.0, -phi)).add(&b.dagger().scale(C64::from_polar(1.0, phi))).unwrap(),
        )
        .unwrap();
        let ratio = sld.operator().data()[(0, 1)] / x.data()[(0, 1)];
        assert!(ratio.re < 0.0 && ratio.im.abs() < 1e-12);
    }

    #[test]
    fn tmsv_sld_couples_neighbouring_levels() {
        let state = tmsv(0.05, 8).unwrap();
        let l = sld_operator(&state, 1.0, 10).unwrap();
        let d_b = 10;
        for (i, z) in l.data().iter().enumerate() {
            let (row, col) = (i % l.dim(), i / l.dim());
            if z.norm() > 0.0 {
                let (a, m) = (row / d_b, row % d_b);
                let (ap, mp) = (col / d_b, col % d_b);
                // both excitation numbers move together, as in a b + a^dagger b^dagger
                assert!((a + 1 == ap && m + 1 == mp) || (ap + 1 == a && mp + 1 == m), "({a},{m}) <- ({ap},{mp})");
            }
        }
        // and is proportional to a b + a^dagger b^dagger on the dominant block
        let gauss = gaussian_ab_observable(&state, 1.0, 10).unwrap();
        let sld = sld_observable(&state, 1.0, 10).unwrap();
        let (row, col) = (1 * d_b + 1, 0);
        let ratio = sld.operator().data()[(row, col)] / gauss.operator().data()[(row, col)];
        assert!((ratio.re - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn cat_sld_has_jaynes_cummings_structure() {
        let state = cat_state(0.05, 2, 12).unwrap();
        let sld = sld_observable(&state, 1.0, 12).unwrap();
        let jc = jaynes_cummings_observable(&state, 1.0, 12).unwrap();
        let d_b = 12;
        // dominant couplings are |v_0, m-1><v_1, m| and their conjugates
        let s = sld.operator().data();
        let j = jc.operator().data();
        let ratio = s[(0, d_b + 1)] / j[(0, d_b + 1)];
        assert!((ratio.re - 1.0).abs() < 0.1, "{ratio}");
        assert!(ratio.im.abs() < 1e-12);
    }

    #[test]
    fn observables_are_normalized() {
        let state = tmsv(0.3, 12).unwrap();
        let m = local_model(&state, 1.0, 20).unwrap();
        for obs in [sld_observable(&state, 1.0, 20).unwrap(), gaussian_ab_observable(&state, 1.0, 20).unwrap()] {
            assert!((trace_of_product(m.drho.data(), obs.operator().data()).re - 1.0).abs() < 1e-12);
        }
        // the squeezed vacuum carries no information in a bare quadrature
        assert_eq!(quadrature_observable(&state, 1.0, 20, 0.0).unwrap_err(), Error::ZeroInformation);
    }

    #[test]
    fn vacuum_has_no_estimator() {
        let state = tmsv(0.0, 3).unwrap();
        assert_eq!(sld_observable(&state, 1.0, 10).unwrap_err(), Error::ZeroInformation);
    }

    #[test]
    fn received_state_at_zero_is_product() {
        let state = tmsv(0.3, 12).unwrap();
        let rho = received_state(&state, 1.0, 0.0, 30, 1e-6).unwrap();
        let rest = rest_state(&state, 1.0, 30).unwrap();
        assert!(max_abs(&(rho.matrix() - rest.matrix())) < 1e-15);
    }

    #[test]
    fn received_state_trace_bookkeeping() {
        let state = tmsv(0.3, 16).unwrap();
        let rho = received_state(&state, 1.0, 0.1, 30, 1e-6).unwrap();
        assert!((rho.op().trace().re + rho.trace_deficit() - 1.0).abs() < 1e-12);
        assert!(rho.trace_deficit() < 1e-8);
        assert!(rho.min_eigenvalue().unwrap() > -1e-12);
        assert!(matches!(
            received_state(&state, 1.0, 0.1, 4, 1e-6).unwrap_err(),
            Error::Truncation { .. }
        ));
    }

    #[test]
    fn received_state_finite_difference_matches_derivative() {
        for state in [tmsv(0.3, 12).unwrap(), cat_state(0.4, 3, 14).unwrap()] {
            let d_b = 20;
            let delta = 1e-5;
            let r0 = received_state(&state, 1.0, 0.0, d_b, 1e-4).unwrap();
            let r1 = received_state(&state, 1.0, delta, d_b, 1e-4).unwrap();
            let fd = (r1.matrix() - r0.matrix()) / c(delta);
            let exact = derivative_at_zero(&state, 1.0, d_b).unwrap();
            assert!(max_abs(&(fd - exact.data())) < 1e-4);
        }
    }

    #[test]
    fn unbiasedness_and_variance() {
        let state = tmsv(0.3, 14).unwrap();
        let obs = sld_observable(&state, 1.0, 40).unwrap();
        let fit = unbiasedness_check(&state, 1.0, &obs, &ETA_GRID, 40, 1e-8).unwrap();
        assert!(fit.intercept.abs() < 1e-9);
        assert!((fit.slope - 1.0).abs() < 1e-3);
        assert!((fit.richardson_slope.unwrap() - 1.0).abs() < 1e-3);

        let rho0 = received_state(&state, 1.0, 0.0, 40, 1e-8).unwrap();
        let dist = outcome_distribution(&rho0, &obs).unwrap();
        let h = qfi_schmidt_value(&state, 1.0).unwrap();
        assert!(dist.mean().abs() < 1e-10);
        assert!((dist.variance() - 1.0 / h).abs() < 1e-6);
    }

    #[test]
    fn distribution_wiring() {
        let state = cat_state(0.3, 2, 14).unwrap();
        let obs = sld_observable(&state, 1.0, 24).unwrap();
        let rho = received_state(&state, 1.0, 0.05, 24, 1e-5).unwrap();
        let dist = outcome_distribution(&rho, &obs).unwrap().with_eta(0.05);
        assert!((dist.mean() - obs.expectation(&rho).unwrap()).abs() < 1e-10);
        let o2 = obs.operator().matmul(obs.operator()).unwrap();
        let var = rho.expectation(&o2).unwrap() - obs.expectation(&rho).unwrap().powi(2);
        assert!((dist.variance() - var).abs() < 1e-10);
        assert!((dist.total() + dist.deficit - 1.0).abs() < 1e-10);
        assert!(dist.probabilities.iter().all(|&p| p >= -1e-12));

        let merged = dist.merged(1e-9);
        assert!((merged.mean() - dist.mean()).abs() < 1e-12);
        assert!((merged.total() - dist.total()).abs() < 1e-12);
        assert!(merged.values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn eigenprojector_gives_point_mass() {
        let state = tmsv(0.3, 6).unwrap();
        let obs = sld_observable(&state, 1.0, 8).unwrap();
        let v = obs.basis.column(3).into_owned();
        let rho = DensityOperator::from_pure(&v, vec![state.rank(), 8]).unwrap();
        let dist = outcome_distribution(&rho, &obs).unwrap();
        assert!((dist.probabilities[3] - 1.0).abs() < 1e-10);
        assert!((dist.mean() - obs.eigenvalues[3]).abs() < 1e-9);
        let mgf = mgf_empirical(&dist.merged(1e-12), &[0.0, 0.5, 3.0], None);
        assert!(mgf.values.iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn moment_bounds_for_tmsv() {
        let n_s = 0.3;
        let state = tmsv(n_s, 40).unwrap();
        let rep = moment_bound_check(&state, 1.0, 4, 40).unwrap();
        assert!(rep.f(1).abs() < 1e-10 && rep.f(3).abs() < 1e-10);
        assert!((rep.c - (1.0 + n_s)).abs() < 1e-6);
        assert!(rep.all_pass(), "{:?}", rep);
        for (k, m) in (1..=4).zip(&rep.antinormal_moments) {
            let want = factorial(k) * (1.0 + n_s).powi(k as i32);
            assert!(((m - want) / want).abs() < 1e-8);
        }
        // the distribution route gives the same central moments
        let obs = sld_observable(&state, 1.0, 40).unwrap();
        let dist = outcome_distribution(&rest_state(&state, 1.0, 40).unwrap(), &obs).unwrap();
        for j in 1..=8u32 {
            assert!((dist.central_moment(j) - rep.f(j as usize)).abs() < 1e-9 * rep.f(8).max(1.0));
        }
        assert!(moment_bound_check(&state, 1.0, 6, 40).is_err());
    }

    #[test]
    fn mgf_small_t_expansion() {
        let state = tmsv(0.3, 40).unwrap();
        let rep = moment_bound_check(&state, 1.0, 2, 40).unwrap();
        let obs = sld_observable(&state, 1.0, 40).unwrap();
        let dist = outcome_distribution(&rest_state(&state, 1.0, 40).unwrap(), &obs).unwrap();
        let t = 0.1 * rep.mgf_radius();
        let mgf = mgf_empirical(&dist, &[0.0, t, 2.0 * rep.mgf_radius()], Some(rep.mgf_radius()));
        assert_eq!(mgf.values[0], 1.0);
        let ratio = mgf.values[1].ln() / (t * t / (2.0 * rep.h));
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
        assert_eq!(mgf.outside_interval, vec![false, false, true]);
    }

    #[test]
    fn distribution_csv() {
        let dist = OutcomeDistribution { values: vec![-1.0, 2.5], probabilities: vec![0.25, 0.75], eta: None, deficit: 0.0 };
        let mut buf = Vec::new();
        dist.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{DISTRIBUTION_CSV_SCHEMA}\nvalue,probability\n-1,0.25\n2.5,0.75\n"));
    }
}
