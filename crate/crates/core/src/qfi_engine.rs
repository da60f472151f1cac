//! Quantum Fisher information of the reflectivity at `eta = 0`.
//!
//! Three independent routes are provided and cross-checked in tests:
//!
//! * [`qfi_schmidt`], the closed sum over pairs of Schmidt terms;
//! * [`qfi_cat_direct`], the spectral sum specialised to multilevel cat
//!   transmitters with a truncated received mode;
//! * [`qfi_numerical`], the generic eigen-sum over a concrete
//!   (idler, returned mode) space.
//!
//! Bounds: `H_Q1 = 4 N_S / (1 + N_B)`, `H_Q2 = (2 N_S + 1) / N_B`, and the
//! coherent-state benchmark `H_C = 4 N_S / (1 + 2 N_B)`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock_algebra::{
    annihilation, c, hermitian_eigen, tensor, thermal_state, thermal_weights, CMatrix, DensityOperator,
    TruncatedOperator, C64, DEFAULT_MAX_DIMENSION,
};
use crate::state_models::{SchmidtState, StateSpec};

/// Pairs whose denominator `p_a' + p_a N_B/(N_B+1)` falls below this are skipped.
pub const DENOMINATOR_GUARD: f64 = 1e-14;

/// Eigenvalue pairs with `lambda_m + lambda_n` below this are excluded from
/// the numerical eigen-sum (support projection of the SLD).
pub const SUPPORT_GUARD: f64 = 1e-12;

/// First line of every QFI CSV file.
pub const QFI_CSV_SCHEMA: &str = "# schema: qi-qfi-csv v1";

const QFI_CSV_HEADER: [&str; 12] =
    ["family", "N_S", "N_B", "H", "H_Q1", "H_Q2", "H_C", "gain", "gain_db", "equals_H_C", "cutoff", "deficit"];

/// Shortest round-trip float text, switching to exponent form at extremes.
pub fn csv_float(x: f64) -> String {
    format!("{x:?}")
}

fn check_nonnegative(name: &str, x: f64) -> Result<()> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {x}")));
    }
    Ok(())
}

/// Upper bounds on the QFI and the coherent-state benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QfiBounds {
    pub h_q1: f64,
    /// `None` when `N_B = 0`, where the bound is unbounded.
    pub h_q2: Option<f64>,
    pub h_c: f64,
}

impl QfiBounds {
    /// `min(H_Q1, H_Q2)`
    pub fn h_q(&self) -> f64 {
        match self.h_q2 {
            Some(h2) => self.h_q1.min(h2),
            None => self.h_q1,
        }
    }
}

pub fn qfi_bounds(n_s: f64, n_b: f64) -> QfiBounds {
    QfiBounds {
        h_q1: 4.0 * n_s / (1.0 + n_b),
        h_q2: (n_b > 0.0).then(|| (2.0 * n_s + 1.0) / n_b),
        h_c: 4.0 * n_s / (1.0 + 2.0 * n_b),
    }
}

/// Closed-form QFI of the two-mode squeezed vacuum.
pub fn qfi_gaussian_closed(n_s: f64, n_b: f64) -> f64 {
    let ks = n_s / (1.0 + n_s);
    let kb = n_b / (1.0 + n_b);
    4.0 * n_s / (1.0 + n_b) / (1.0 + ks * kb)
}

/// QFI together with its bounds for one (state, `N_B`) instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QfiReport {
    pub family: String,
    /// Mean signal photon number of the (truncated) state.
    pub n_s: f64,
    pub n_b: f64,
    pub h: f64,
    pub h_q1: f64,
    pub h_q2: Option<f64>,
    pub h_q: f64,
    pub h_c: f64,
    /// `H / H_C`; absent when `H_C = 0`.
    pub gain: Option<f64>,
    pub gain_db: Option<f64>,
    pub equals_classical: bool,
    pub cutoff: Option<usize>,
    /// Probability mass lost by truncating the transmitter.
    pub deficit_warning: f64,
}

impl QfiReport {
    pub fn new(family: String, n_s: f64, n_b: f64, h: f64, cutoff: Option<usize>, deficit: f64) -> Self {
        let b = qfi_bounds(n_s, n_b);
        let gain = (b.h_c > 0.0).then(|| h / b.h_c);
        Self {
            family,
            n_s,
            n_b,
            h,
            h_q1: b.h_q1,
            h_q2: b.h_q2,
            h_q: b.h_q(),
            h_c: b.h_c,
            gain,
            gain_db: gain.map(|g| 10.0 * g.log10()),
            equals_classical: (h - b.h_c).abs() <= 1e-10 * b.h_c.max(1.0),
            cutoff,
            deficit_warning: deficit,
        }
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.family.clone(),
            csv_float(self.n_s),
            csv_float(self.n_b),
            csv_float(self.h),
            csv_float(self.h_q1),
            self.h_q2.map(csv_float).unwrap_or_else(|| "inf".into()),
            csv_float(self.h_c),
            self.gain.map(csv_float).unwrap_or_default(),
            self.gain_db.map(csv_float).unwrap_or_default(),
            self.equals_classical.to_string(),
            self.cutoff.map(|d| d.to_string()).unwrap_or_default(),
            csv_float(self.deficit_warning),
        ]
    }
}

/// Writes reports as CSV, preceded by the schema comment line.
pub fn write_qfi_csv<W: Write>(out: W, reports: &[QfiReport]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{QFI_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(QFI_CSV_HEADER).map_err(|e| Error::Format(e.to_string()))?;
    for r in reports {
        w.write_record(r.csv_record()).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// QFI from the Schmidt form:
/// `H = 4/(1+N_B) sum_{a,a'} p_a p_a' / (p_a' + p_a N_B/(N_B+1)) |<w_a'|s|w_a>|^2`.
pub fn qfi_schmidt_value(state: &SchmidtState, n_b: f64) -> Result<f64> {
    check_nonnegative("N_B", n_b)?;
    let ratio = n_b / (n_b + 1.0);
    let p = state.probabilities();
    let s = state.lowering_elements();
    let mut sum = 0.0;
    for (a, &pa) in p.iter().enumerate() {
        for (ap, &pap) in p.iter().enumerate() {
            let m = s[(ap, a)].norm_sqr();
            if m == 0.0 {
                continue;
            }
            let den = pap + pa * ratio;
            if den < DENOMINATOR_GUARD {
                continue;
            }
            sum += pa * pap / den * m;
        }
    }
    Ok(4.0 / (1.0 + n_b) * sum)
}

pub fn qfi_schmidt(state: &SchmidtState, n_b: f64) -> Result<QfiReport> {
    let h = qfi_schmidt_value(state, n_b)?;
    Ok(QfiReport::new(
        state.family().label(),
        state.mean_photon_number(),
        n_b,
        h,
        Some(state.cutoff()),
        state.deficit(),
    ))
}

/// Cat-state QFI from the spectral decomposition of `rho_I (x) rho_B`, with
/// the received mode truncated at `cutoff` levels.
///
/// With `T = (2 N_S / d^4) sum_{l,l'} sum_n (n+1) (rho_{n+1} - rho_n)^2`, the
/// summand is `|A_{ll'}|^2 / (lambda_l rho_n + lambda_l' rho_{n+1}) +
/// |B_{ll'}|^2 / (lambda_l rho_{n+1} + lambda_l' rho_n)` where
/// `A_{ll'} = sum_{r,s} <alpha_s|alpha_r> e^{2 pi i (l' s - l r)/d} e^{-2 pi i s/d}` and
/// `B_{ll'}` carries `e^{2 pi i r/d}` instead. The Kronecker deltas of the
/// `b` and `b^dagger` matrix elements have already collapsed `n'`.
pub fn qfi_cat_direct(n_s: f64, d: usize, n_b: f64, cutoff: usize) -> Result<f64> {
    check_nonnegative("N_S", n_s)?;
    check_nonnegative("N_B", n_b)?;
    if d < 2 {
        return Err(Error::InvalidParameter(format!("cat state needs d >= 2, got {d}")));
    }
    if cutoff < 2 {
        return Err(Error::InvalidDimension("received-mode cutoff must be >= 2".into()));
    }
    let df = d as f64;
    let root = |k: i64| {
        let r = k.rem_euclid(d as i64) as f64;
        C64::from_polar(1.0, 2.0 * PI * r / df)
    };
    let alphas: Vec<C64> = (0..d as i64).map(|k| root(k) * c(n_s.sqrt())).collect();
    // overlap[s][r] = <alpha_s|alpha_r>
    let overlap: Vec<Vec<C64>> = (0..d)
        .map(|s| (0..d).map(|r| (c(-n_s) + alphas[s].conj() * alphas[r]).exp()).collect())
        .collect();
    // lambda_l = sqrt(d) <w_0|rho_I|v_l> = (1/d) sum_k <alpha_k|alpha_0> e^{2 pi i l k/d}
    let lambdas: Vec<f64> = (0..d as i64)
        .map(|l| {
            let sum: C64 = (0..d as i64).map(|k| overlap[k as usize][0] * root(l * k)).sum();
            (sum / c(df)).re
        })
        .collect();
    if let Some(bad) = lambdas.iter().find(|&&l| l < -1e-10) {
        return Err(Error::Numerical(format!("negative idler eigenvalue {bad}")));
    }

    let mut a_coef = vec![vec![C64::new(0.0, 0.0); d]; d];
    let mut b_coef = vec![vec![C64::new(0.0, 0.0); d]; d];
    for l in 0..d as i64 {
        for lp in 0..d as i64 {
            let mut a = C64::new(0.0, 0.0);
            let mut b = C64::new(0.0, 0.0);
            for r in 0..d as i64 {
                for s in 0..d as i64 {
                    let base = overlap[s as usize][r as usize] * root(lp * s - l * r);
                    a += base * root(-s);
                    b += base * root(r);
                }
            }
            a_coef[l as usize][lp as usize] = a;
            b_coef[l as usize][lp as usize] = b;
        }
    }

    let rho = thermal_weights(n_b, cutoff);
    let mut total = 0.0;
    for l in 0..d {
        for lp in 0..d {
            let a2 = a_coef[l][lp].norm_sqr();
            let b2 = b_coef[l][lp].norm_sqr();
            for n in 0..cutoff - 1 {
                let diff = rho[n + 1] - rho[n];
                let weight = (n + 1) as f64 * diff * diff;
                let den_a = lambdas[l] * rho[n] + lambdas[lp] * rho[n + 1];
                if den_a >= DENOMINATOR_GUARD {
                    total += weight * a2 / den_a;
                }
                let den_b = lambdas[l] * rho[n + 1] + lambdas[lp] * rho[n];
                if den_b >= DENOMINATOR_GUARD {
                    total += weight * b2 / den_b;
                }
            }
        }
    }
    Ok(2.0 * n_s / df.powi(4) * total)
}

/// Result of [`converge_cutoff`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Converged {
    pub value: f64,
    pub cutoff: usize,
    /// Every `(cutoff, value)` evaluated, in order.
    pub history: Vec<(usize, f64)>,
    /// Whether the evaluated sequence was monotone.
    pub monotone: bool,
}

/// Doubles the cutoff from `start` until two successive values differ by
/// less than `rel_tol` relative to the newer one.
pub fn converge_cutoff<F>(mut f: F, start: usize, rel_tol: f64, max_cutoff: usize) -> Result<Converged>
where
    F: FnMut(usize) -> Result<f64>,
{
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidParameter(format!("rel_tol must be > 0, got {rel_tol}")));
    }
    if start == 0 || start > max_cutoff {
        return Err(Error::InvalidParameter(format!("start cutoff {start} outside 1..={max_cutoff}")));
    }
    let mut d = start;
    let mut prev = f(d)?;
    let mut history = vec![(d, prev)];
    let mut last_change = f64::INFINITY;
    while d * 2 <= max_cutoff {
        d *= 2;
        let next = f(d)?;
        history.push((d, next));
        let change = (next - prev).abs();
        last_change = if next != 0.0 { change / next.abs() } else { change };
        if change <= rel_tol * next.abs() || change == 0.0 {
            let monotone = is_monotone(&history);
            return Ok(Converged { value: next, cutoff: d, history, monotone });
        }
        prev = next;
    }
    Err(Error::NotConverged { max_cutoff, last_change })
}

fn is_monotone(history: &[(usize, f64)]) -> bool {
    let up = history.windows(2).all(|w| w[1].1 >= w[0].1);
    let down = history.windows(2).all(|w| w[1].1 <= w[0].1);
    up || down
}

/// How the signal cutoff of a transmitter is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum CutoffPolicy {
    Fixed { cutoff: usize },
    Auto { start: usize, rel_tol: f64, max_cutoff: usize },
}

impl Default for CutoffPolicy {
    fn default() -> Self {
        CutoffPolicy::Auto { start: 16, rel_tol: 1e-10, max_cutoff: 1024 }
    }
}

/// QFI report for a transmitter family under a cutoff policy.
pub fn qfi_for_spec(spec: StateSpec, n_s: f64, n_b: f64, policy: CutoffPolicy) -> Result<QfiReport> {
    check_nonnegative("N_S", n_s)?;
    check_nonnegative("N_B", n_b)?;
    if !spec.uses_cutoff() {
        return qfi_schmidt(&spec.build(n_s, 1)?, n_b);
    }
    match policy {
        CutoffPolicy::Fixed { cutoff } => qfi_schmidt(&spec.build(n_s, cutoff)?, n_b),
        CutoffPolicy::Auto { start, rel_tol, max_cutoff } => {
            let conv = converge_cutoff(|d| qfi_schmidt_value(&spec.build(n_s, d)?, n_b), start, rel_tol, max_cutoff)?;
            qfi_schmidt(&spec.build(n_s, conv.cutoff)?, n_b)
        }
    }
}

/// One report per `(family, N_S)`; families outer, photon numbers inner.
/// Grid points are evaluated in parallel and returned in grid order.
pub fn gain_curves(families: &[StateSpec], n_s_grid: &[f64], n_b: f64, policy: CutoffPolicy) -> Result<Vec<QfiReport>> {
    let jobs: Vec<(StateSpec, f64)> =
        families.iter().flat_map(|&f| n_s_grid.iter().map(move |&n| (f, n))).collect();
    jobs.par_iter().map(|&(f, n)| qfi_for_spec(f, n, n_b, policy)).collect()
}

/// `rho_0 = sum_a p_a |v_a><v_a| (x) rho_B` on (idler, returned mode) with
/// the idler realised at dimension equal to the Schmidt rank.
pub fn rest_state(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<DensityOperator> {
    let r = state.rank();
    let mut idler = CMatrix::zeros(r, r);
    for (a, t) in state.terms().iter().enumerate() {
        idler[(a, a)] = c(t.p);
    }
    let idler = DensityOperator::with_trace_tolerance(
        TruncatedOperator::new(idler, vec![r])?,
        state.deficit(),
        1e-10,
    )?;
    let bath = thermal_state(n_b, bath_cutoff)?;
    let op = tensor(idler.op(), bath.op())?;
    let kept = (1.0 - state.deficit()) * (1.0 - bath.trace_deficit());
    DensityOperator::with_trace_tolerance(op, 1.0 - kept, 1e-10)
}

/// `d rho_eta / d eta` at `eta = 0` on (idler, returned mode):
/// `Tr_S [s^dagger b - s b^dagger, |psi><psi| (x) rho_B]`, which reduces to
/// `sum_{a,a'} sqrt(p_a p_a') |v_a><v_a'| (x) [<w_a'|s^dagger|w_a> b - <w_a'|s|w_a> b^dagger, rho_B]`.
pub fn derivative_at_zero(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<TruncatedOperator> {
    check_nonnegative("N_B", n_b)?;
    let r = state.rank();
    if r * bath_cutoff > DEFAULT_MAX_DIMENSION {
        return Err(Error::DimensionOverflow { requested: r * bath_cutoff, max: DEFAULT_MAX_DIMENSION });
    }
    let p = state.probabilities();
    let s = state.lowering_elements();
    // with_b[a, a'] = sqrt(p p') <w_a'|s^dagger|w_a> = sqrt(p p') conj(<w_a|s|w_a'>)
    let with_b = CMatrix::from_fn(r, r, |a, ap| s[(a, ap)].conj() * c((p[a] * p[ap]).sqrt()));
    // with_bdag[a, a'] = sqrt(p p') <w_a'|s|w_a>
    let with_bdag = CMatrix::from_fn(r, r, |a, ap| s[(ap, a)] * c((p[a] * p[ap]).sqrt()));

    let rho_b = thermal_state(n_b, bath_cutoff)?;
    let b = annihilation(bath_cutoff.max(2))?;
    let (comm_b, comm_bdag) = if bath_cutoff >= 2 {
        (b.commutator(rho_b.op())?, b.dagger().commutator(rho_b.op())?)
    } else {
        (TruncatedOperator::zeros(vec![1])?, TruncatedOperator::zeros(vec![1])?)
    };
    let left = tensor(&TruncatedOperator::new(with_b, vec![r])?, &comm_b)?;
    let right = tensor(&TruncatedOperator::new(with_bdag, vec![r])?, &comm_bdag)?;
    left.sub(&right)
}

/// Output of [`qfi_numerical`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalQfi {
    pub value: f64,
    /// Eigenvalue pairs excluded by [`SUPPORT_GUARD`] that carried a
    /// nonzero derivative matrix element.
    pub skipped_pairs: usize,
}

/// QFI from its definition, `2 sum_{mn} |<phi_m|d rho|phi_n>|^2 / (lambda_m + lambda_n)`,
/// with the spectrum of `rho_0` obtained numerically.
pub fn qfi_numerical(state: &SchmidtState, n_b: f64, bath_cutoff: usize) -> Result<NumericalQfi> {
    let rho0 = rest_state(state, n_b, bath_cutoff)?;
    let drho = derivative_at_zero(state, n_b, bath_cutoff)?;
    let eig = hermitian_eigen(rho0.matrix())?;
    let rotated = eig.vectors.adjoint() * drho.data() * &eig.vectors;
    let n = eig.values.len();
    let mut value = 0.0;
    let mut skipped_pairs = 0;
    for j in 0..n {
        for i in 0..n {
            let num = rotated[(i, j)].norm_sqr();
            let den = eig.values[i] + eig.values[j];
            if den < SUPPORT_GUARD {
                if num > 0.0 {
                    skipped_pairs += 1;
                }
                continue;
            }
            value += num / den;
        }
    }
    Ok(NumericalQfi { value: 2.0 * value, skipped_pairs })
}
