//! Signal-idler transmitter states in Schmidt form.
//!
//! A [`SchmidtState`] stores the Schmidt probabilities `p_a` and the signal
//! Schmidt vectors `w_a` in the truncated Fock basis. Idler vectors are never
//! stored: they are orthonormal labels, and everything downstream depends
//! only on `p_a`, `w_a` and idler orthonormality.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock_algebra::{c, CMatrix, CVector, DensityOperator, TruncatedOperator, C64};

/// Terms with a Schmidt probability below this are pruned into the deficit.
pub const PRUNE_THRESHOLD: f64 = 1e-14;

const NORMALIZATION_TOL: f64 = 1e-10;
const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Which constructor produced a state, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Tmsv { n_s: f64 },
    Coherent { n_s: f64, phi: f64 },
    MaxEntangledFock { d: usize },
    Cat { n_s: f64, d: usize },
    CatInfinite { n_s: f64 },
    Custom,
}

impl Family {
    pub fn label(&self) -> String {
        match self {
            Family::Tmsv { .. } => "tmsv".into(),
            Family::Coherent { .. } => "coherent".into(),
            Family::MaxEntangledFock { d } => format!("maxfock:{d}"),
            Family::Cat { d, .. } => format!("cat:{d}"),
            Family::CatInfinite { .. } => "cat:inf".into(),
            Family::Custom => "custom".into(),
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match *self {
            Family::Tmsv { n_s } | Family::CatInfinite { n_s } => {
                m.insert("n_s".into(), n_s);
            }
            Family::Coherent { n_s, phi } => {
                m.insert("n_s".into(), n_s);
                m.insert("phi".into(), phi);
            }
            Family::MaxEntangledFock { d } => {
                m.insert("d".into(), d as f64);
            }
            Family::Cat { n_s, d } => {
                m.insert("n_s".into(), n_s);
                m.insert("d".into(), d as f64);
            }
            Family::Custom => {}
        }
        m
    }

    fn from_parts(label: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            params
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("family {label} is missing parameter {k}")))
        };
        let spec: StateSpec = match label {
            "custom" => return Ok(Family::Custom),
            other => other.parse()?,
        };
        Ok(match spec {
            StateSpec::Tmsv => Family::Tmsv { n_s: get("n_s")? },
            StateSpec::Coherent { .. } => Family::Coherent { n_s: get("n_s")?, phi: get("phi")? },
            StateSpec::MaxEntangledFock { d } => Family::MaxEntangledFock { d },
            StateSpec::Cat { d } => Family::Cat { n_s: get("n_s")?, d },
            StateSpec::CatInfinite => Family::CatInfinite { n_s: get("n_s")? },
        })
    }
}

/// One Schmidt term: probability and signal vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SchmidtTerm {
    pub p: f64,
    pub vector: CVector,
}

/// `|psi> = sum_a sqrt(p_a) |w_a>_S |v_a>_I` on a truncated signal space.
#[derive(Debug, Clone, PartialEq)]
pub struct SchmidtState {
    terms: Vec<SchmidtTerm>,
    cutoff: usize,
    deficit: f64,
    family: Family,
}

impl SchmidtState {
    /// Validates and prunes. Terms below [`PRUNE_THRESHOLD`] move into the
    /// deficit.
    pub fn new(terms: Vec<SchmidtTerm>, cutoff: usize, deficit: f64, family: Family) -> Result<Self> {
        if cutoff < 1 {
            return Err(Error::InvalidDimension("signal cutoff must be >= 1".into()));
        }
        let mut kept = Vec::with_capacity(terms.len());
        let mut deficit = deficit;
        for t in terms {
            if t.vector.len() != cutoff {
                return Err(Error::InvalidDimension(format!(
                    "Schmidt vector has length {} but cutoff is {cutoff}",
                    t.vector.len()
                )));
            }
            if !(t.p >= 0.0) || !t.p.is_finite() {
                return Err(Error::InvalidParameter(format!("Schmidt probability {} is invalid", t.p)));
            }
            if t.p < PRUNE_THRESHOLD {
                deficit += t.p;
            } else {
                kept.push(t);
            }
        }
        if kept.is_empty() {
            return Err(Error::InvalidParameter("state has no Schmidt term above the pruning threshold".into()));
        }
        let total: f64 = kept.iter().map(|t| t.p).sum::<f64>() + deficit;
        if (total - 1.0).abs() > NORMALIZATION_TOL || deficit < -NORMALIZATION_TOL {
            return Err(Error::NotNormalized { norm_sq: total });
        }
        let deficit = deficit.max(0.0);
        for (a, ta) in kept.iter().enumerate() {
            for (b, tb) in kept.iter().enumerate().skip(a) {
                let overlap = ta.vector.dotc(&tb.vector);
                let target = if a == b { 1.0 } else { 0.0 };
                if (overlap - c(target)).norm() > ORTHONORMALITY_TOL {
                    return Err(Error::Numerical(format!(
                        "Schmidt vectors {a} and {b} are not orthonormal (overlap {overlap})"
                    )));
                }
            }
        }
        Ok(Self { terms: kept, cutoff, deficit, family })
    }

    pub fn terms(&self) -> &[SchmidtTerm] {
        &self.terms
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn deficit(&self) -> f64 {
        self.deficit
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.p).collect()
    }

    /// `sum_a p_a <w_a| s^dagger s |w_a>`
    pub fn mean_photon_number(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.p * t.vector.iter().enumerate().map(|(n, z)| n as f64 * z.norm_sqr()).sum::<f64>())
            .sum()
    }

    /// Matrix `S[a', a] = <w_a'| s |w_a>` over the Schmidt terms. Truncation
    /// does not affect these elements since `s` only lowers.
    pub fn lowering_elements(&self) -> CMatrix {
        let r = self.rank();
        let lowered: Vec<CVector> = self.terms.iter().map(|t| lower(&t.vector)).collect();
        CMatrix::from_fn(r, r, |ap, a| self.terms[ap].vector.dotc(&lowered[a]))
    }

    /// Antinormally ordered moment `<s^k s^dagger^k>` of the signal marginal.
    ///
    /// Evaluated exactly: `s^dagger^k` maps `|n>` to an orthogonal
    /// `|n + k>` with squared norm `(n+k)!/n!`, so no padding is needed.
    pub fn antinormal_moment(&self, k: u32) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.p * t
                    .vector
                    .iter()
                    .enumerate()
                    .map(|(n, z)| z.norm_sqr() * rising(n, k))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Amplitude matrix `A[n, a] = sqrt(p_a) w_a[n]` indexed by (signal
    /// Fock level, idler label).
    pub fn amplitude_matrix(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.cutoff, self.rank());
        for (a, t) in self.terms.iter().enumerate() {
            m.set_column(a, &(&t.vector * c(t.p.sqrt())));
        }
        m
    }

    /// Reduced signal state `sum_a p_a |w_a><w_a|`.
    pub fn signal_marginal(&self) -> Result<DensityOperator> {
        let mut rho = CMatrix::zeros(self.cutoff, self.cutoff);
        for t in &self.terms {
            rho += &t.vector * t.vector.adjoint() * c(t.p);
        }
        let op = TruncatedOperator::new(rho, vec![self.cutoff])?;
        DensityOperator::with_trace_tolerance(op, self.deficit, NORMALIZATION_TOL)
    }

    /// Copy with every signal vector padded with zeros to `cutoff`.
    pub fn padded(&self, cutoff: usize) -> Result<Self> {
        if cutoff < self.cutoff {
            return Err(Error::InvalidDimension(format!(
                "cannot pad cutoff {} down to {cutoff}",
                self.cutoff
            )));
        }
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut v = CVector::zeros(cutoff);
                v.rows_mut(0, self.cutoff).copy_from(&t.vector);
                SchmidtTerm { p: t.p, vector: v }
            })
            .collect();
        Ok(Self { terms, cutoff, deficit: self.deficit, family: self.family.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SchmidtStateJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: SchmidtStateJson = serde_json::from_str(s)?;
        wire.try_into()
    }
}

/// `s |v>` on the truncated space.
fn lower(v: &CVector) -> CVector {
    let d = v.len();
    CVector::from_fn(d, |n, _| if n + 1 < d { v[n + 1] * ((n + 1) as f64).sqrt() } else { c(0.0) })
}

/// `(n+1)(n+2)...(n+k)`
fn rising(n: usize, k: u32) -> f64 {
    (1..=k as usize).map(|j| (n + j) as f64).product()
}

/// JSON shape: `{family, params, cutoff, deficit, terms: [{p, re, im}]}`.
#[derive(Debug, Serialize, Deserialize)]
struct SchmidtStateJson {
    family: String,
    params: BTreeMap<String, f64>,
    cutoff: usize,
    deficit: f64,
    terms: Vec<TermJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TermJson {
    p: f64,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl From<&SchmidtState> for SchmidtStateJson {
    fn from(s: &SchmidtState) -> Self {
        Self {
            family: s.family.label(),
            params: s.family.params(),
            cutoff: s.cutoff,
            deficit: s.deficit,
            terms: s
                .terms
                .iter()
                .map(|t| TermJson {
                    p: t.p,
                    re: t.vector.iter().map(|z| z.re).collect(),
                    im: t.vector.iter().map(|z| z.im).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<SchmidtStateJson> for SchmidtState {
    type Error = Error;

    fn try_from(w: SchmidtStateJson) -> Result<Self> {
        let family = Family::from_parts(&w.family, &w.params)?;
        let mut terms = Vec::with_capacity(w.terms.len());
        for t in w.terms {
            if t.re.len() != t.im.len() {
                return Err(Error::Format("re and im arrays differ in length".into()));
            }
            let vector = CVector::from_iterator(t.re.len(), t.re.iter().zip(&t.im).map(|(&r, &i)| C64::new(r, i)));
            terms.push(SchmidtTerm { p: t.p, vector });
        }
        SchmidtState::new(terms, w.cutoff, w.deficit, family)
    }
}

fn check_photons(n_s: f64) -> Result<()> {
    if !(n_s >= 0.0) || !n_s.is_finite() {
        return Err(Error::InvalidParameter(format!("N_S must be finite and >= 0, got {n_s}")));
    }
    Ok(())
}

fn fock(n: usize, d: usize) -> CVector {
    let mut v = CVector::zeros(d);
    v[n] = c(1.0);
    v
}

/// Two-mode squeezed vacuum: geometric Schmidt spectrum over Fock states.
pub fn tmsv(n_s: f64, cutoff: usize) -> Result<SchmidtState> {
    check_photons(n_s)?;
    if cutoff < 1 {
        return Err(Error::InvalidDimension("signal cutoff must be >= 1".into()));
    }
    let ratio = n_s / (1.0 + n_s);
    let mut p = 1.0 / (1.0 + n_s);
    let mut terms = Vec::with_capacity(cutoff);
    for n in 0..cutoff {
        terms.push(SchmidtTerm { p, vector: fock(n, cutoff) });
        p *= ratio;
    }
    let deficit = ratio.powi(cutoff as i32);
    SchmidtState::new(terms, cutoff, deficit, Family::Tmsv { n_s })
}

/// Coherent-state amplitudes `e^{-N/2} alpha^n / sqrt(n!)` for `n < cutoff`.
fn coherent_amplitudes(alpha: C64, cutoff: usize) -> CVector {
    let mut v = CVector::zeros(cutoff);
    let mut amp = C64::from_polar((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for n in 0..cutoff {
        v[n] = amp;
        amp *= alpha / ((n + 1) as f64).sqrt();
    }
    v
}

/// Unentangled coherent transmitter `|alpha>` with `alpha = sqrt(N_S) e^{i phi}`.
///
/// The probability of the single term is the retained Poisson mass and the
/// vector is renormalized.
pub fn coherent(n_s: f64, phi: f64, cutoff: usize) -> Result<SchmidtState> {
    check_photons(n_s)?;
    if cutoff < 1 {
        return Err(Error::InvalidDimension("signal cutoff must be >= 1".into()));
    }
    let alpha = C64::from_polar(n_s.sqrt(), phi);
    let v = coherent_amplitudes(alpha, cutoff);
    let p = v.norm_squared();
    let vector = v / c(p.sqrt());
    SchmidtState::new(vec![SchmidtTerm { p, vector }], cutoff, 1.0 - p, Family::Coherent { n_s, phi })
}

/// `(1/sqrt d) sum_{n<d} |n>|n>`, mean photon number `(d-1)/2`.
pub fn max_entangled_fock(d: usize) -> Result<SchmidtState> {
    if d < 1 {
        return Err(Error::InvalidParameter("rank must be >= 1".into()));
    }
    let terms = (0..d).map(|n| SchmidtTerm { p: 1.0 / d as f64, vector: fock(n, d) }).collect();
    SchmidtState::new(terms, d, 0.0, Family::MaxEntangledFock { d })
}

/// Multilevel cat `(1/sqrt d) sum_k |alpha_k>|w_k>`, `alpha_k = sqrt(N_S) e^{2 pi i k/d}`.
///
/// The idler reduced state commutes with the cyclic shift on the `w_k`, so
/// its eigenvectors are the Fourier vectors `v_j = (1/sqrt d) sum_l
/// e^{2 pi i j l/d} |w_l>` with eigenvalues `lambda_j = sqrt(d) <w_0|rho_I|v_j>`.
/// The signal vector paired with `v_j` is `(1/(d sqrt(lambda_j))) sum_k
/// e^{-2 pi i j k/d} |alpha_k>`, which fixes the phase convention. After
/// truncation each term's probability is the retained squared norm.
pub fn cat_state(n_s: f64, d: usize, cutoff: usize) -> Result<SchmidtState> {
    check_photons(n_s)?;
    if d < 2 {
        return Err(Error::InvalidParameter(format!("cat state needs d >= 2, got {d}")));
    }
    if cutoff < 1 {
        return Err(Error::InvalidDimension("signal cutoff must be >= 1".into()));
    }
    let df = d as f64;
    let phase = |x: f64| C64::from_polar(1.0, x);
    let alphas: Vec<C64> = (0..d).map(|k| C64::from_polar(n_s.sqrt(), 2.0 * PI * k as f64 / df)).collect();
    // <alpha_a|alpha_b> = exp(-N + conj(alpha_a) alpha_b)
    let overlap = |a: usize, b: usize| (c(-n_s) + alphas[a].conj() * alphas[b]).exp();

    // rho_I = (1/d) sum_{k,k'} <alpha_k|alpha_k'> |w_k'><w_k|
    let rho_idler = DMatrix::from_fn(d, d, |row, col| overlap(col, row) / c(df));
    let fourier = DMatrix::from_fn(d, d, |l, j| phase(2.0 * PI * (j * l) as f64 / df) / c(df.sqrt()));

    let mut lambdas = Vec::with_capacity(d);
    for j in 0..d {
        let v = fourier.column(j).into_owned();
        let rv = &rho_idler * &v;
        let lam = rv[0] * c(df.sqrt());
        if lam.im.abs() > 1e-10 || lam.re < -1e-10 {
            return Err(Error::Numerical(format!("cat idler eigenvalue {j} is {lam}")));
        }
        let residual = (&rv - &v * lam).norm();
        if residual > 1e-10 {
            return Err(Error::Numerical(format!("Fourier vector {j} is not an eigenvector (residual {residual:e})")));
        }
        lambdas.push(lam.re.max(0.0));
    }

    let coherent: Vec<CVector> = alphas.iter().map(|&a| coherent_amplitudes(a, cutoff)).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut terms: Vec<SchmidtTerm> = Vec::with_capacity(d);
    let mut dropped = 0.0;
    for j in order {
        let lam = lambdas[j];
        if lam < PRUNE_THRESHOLD {
            dropped += lam;
            continue;
        }
        let mut y = CVector::zeros(cutoff);
        for (k, ck) in coherent.iter().enumerate() {
            y += ck * phase(-2.0 * PI * ((j * k) % d) as f64 / df);
        }
        y /= c(df);
        let p = y.norm_squared();
        // Cancellation noise in the Fourier sum is amplified by 1/sqrt(p) for
        // small terms; two Gram-Schmidt passes against the larger terms
        // restore orthogonality.
        let mut w = y;
        for _ in 0..2 {
            for t in &terms {
                let proj = t.vector.dotc(&w);
                w -= &t.vector * proj;
            }
        }
        let norm = w.norm();
        terms.push(SchmidtTerm { p, vector: w / c(norm) });
    }
    let kept: f64 = terms.iter().map(|t| t.p).sum();
    let deficit = (1.0 - kept).max(dropped);
    SchmidtState::new(terms, cutoff, deficit, Family::Cat { n_s, d })
}

/// Infinite-`d` limit of the cat family: Poisson Schmidt coefficients over
/// Fock states.
pub fn cat_state_infinite_d(n_s: f64, cutoff: usize) -> Result<SchmidtState> {
    check_photons(n_s)?;
    if cutoff < 1 {
        return Err(Error::InvalidDimension("signal cutoff must be >= 1".into()));
    }
    let mut p = (-n_s).exp();
    let mut terms = Vec::with_capacity(cutoff);
    for n in 0..cutoff {
        terms.push(SchmidtTerm { p, vector: fock(n, cutoff) });
        p *= n_s / (n + 1) as f64;
    }
    let kept: f64 = terms.iter().map(|t| t.p).sum();
    SchmidtState::new(terms, cutoff, (1.0 - kept).max(0.0), Family::CatInfinite { n_s })
}

/// Schmidt form of an arbitrary pure state given by its amplitude matrix
/// indexed (signal Fock level, idler basis), via the SVD.
pub fn schmidt_decompose(amplitudes: &CMatrix) -> Result<SchmidtState> {
    let norm_sq = amplitudes.norm_squared();
    if (norm_sq - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { norm_sq });
    }
    let cutoff = amplitudes.nrows();
    let svd = amplitudes.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return left vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let terms: Vec<SchmidtTerm> = order
        .iter()
        .map(|&i| SchmidtTerm { p: svd.singular_values[i].powi(2), vector: u.column(i).into_owned() })
        .collect();
    let total: f64 = terms.iter().map(|t| t.p).sum();
    SchmidtState::new(terms, cutoff, (1.0 - total).max(0.0), Family::Custom)
}

/// Transmitter family selector, written `tmsv`, `coherent`, `cat:<d>`,
/// `cat:inf` or `maxfock:<d>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StateSpec {
    Tmsv,
    Coherent { phi: f64 },
    Cat { d: usize },
    CatInfinite,
    MaxEntangledFock { d: usize },
}

impl StateSpec {
    /// Builds the state. `n_s` is ignored for `maxfock`, whose photon
    /// number is fixed by `d`; the cutoff is ignored there as well.
    pub fn build(&self, n_s: f64, cutoff: usize) -> Result<SchmidtState> {
        match *self {
            StateSpec::Tmsv => tmsv(n_s, cutoff),
            StateSpec::Coherent { phi } => coherent(n_s, phi, cutoff),
            StateSpec::Cat { d } => cat_state(n_s, d, cutoff),
            StateSpec::CatInfinite => cat_state_infinite_d(n_s, cutoff),
            StateSpec::MaxEntangledFock { d } => max_entangled_fock(d),
        }
    }

    /// Whether the Schmidt spectrum depends on the signal cutoff.
    pub fn uses_cutoff(&self) -> bool {
        !matches!(self, StateSpec::MaxEntangledFock { .. })
    }
}

impl fmt::Display for StateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateSpec::Tmsv => write!(f, "tmsv"),
            StateSpec::Coherent { phi } if *phi == 0.0 => write!(f, "coherent"),
            StateSpec::Coherent { phi } => write!(f, "coherent:{phi}"),
            StateSpec::Cat { d } => write!(f, "cat:{d}"),
            StateSpec::CatInfinite => write!(f, "cat:inf"),
            StateSpec::MaxEntangledFock { d } => write!(f, "maxfock:{d}"),
        }
    }
}

impl FromStr for StateSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown family '{s}'"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let rank = |a: Option<&str>, min: usize| -> Result<usize> {
            let d: usize = a.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if d < min {
                return Err(Error::InvalidParameter(format!("family '{s}' needs d >= {min}")));
            }
            Ok(d)
        };
        match head {
            "tmsv" if arg.is_none() => Ok(StateSpec::Tmsv),
            "coherent" => {
                let phi = match arg {
                    None => 0.0,
                    Some(a) => a.parse().map_err(|_| bad())?,
                };
                Ok(StateSpec::Coherent { phi })
            }
            "cat" if arg == Some("inf") => Ok(StateSpec::CatInfinite),
            "cat" => Ok(StateSpec::Cat { d: rank(arg, 2)? }),
            "maxfock" => Ok(StateSpec::MaxEntangledFock { d: rank(arg, 1)? }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for StateSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StateSpec> for String {
    fn from(s: StateSpec) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson_pmf(mean: f64, n: usize) -> f64 {
        (0..n).fold((-mean).exp(), |acc, k| acc * mean / (k + 1) as f64)
    }

    #[test]
    fn tmsv_vacuum_and_geometric_weights() {
        let s = tmsv(0.0, 5).unwrap();
        assert_eq!(s.rank(), 1);
        assert_eq!(s.terms()[0].p, 1.0);
        assert_eq!(s.terms()[0].vector[0], c(1.0));

        let s = tmsv(1.0, 3).unwrap();
        assert_eq!(s.probabilities(), vec![0.5, 0.25, 0.125]);
        assert_eq!(s.deficit(), 0.125);
    }

    #[test]
    fn tmsv_mean_photons() {
        let s = tmsv(0.5, 40).unwrap();
        // geometric series: sum_n n p_n = N_S; the missing tail carries at
        // most (D + N_S + 1) times the deficit
        assert!(s.deficit() < 1e-13);
        assert!((s.mean_photon_number() - 0.5).abs() < 41.5 * s.deficit() + 1e-15);
    }

    #[test]
    fn tmsv_antinormal_moments() {
        let n_s: f64 = 0.3;
        let s = tmsv(n_s, 60).unwrap();
        let mut fact = 1.0;
        for k in 1..=5u32 {
            fact *= k as f64;
            let want = fact * (1.0 + n_s).powi(k as i32);
            // pruning removes p_n < 1e-14, weighted here by (n+k)!/n!
            assert!((s.antinormal_moment(k) / want - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn coherent_vacuum_and_eigenvalue() {
        let s = coherent(0.0, 0.3, 4).unwrap();
        assert_eq!(s.rank(), 1);
        assert!((s.terms()[0].vector[0] - c(1.0)).norm() < 1e-15);

        let phi = 0.7;
        let s = coherent(1.0, phi, 30).unwrap();
        let mean_s = s.lowering_elements()[(0, 0)];
        let alpha = C64::from_polar(1.0, phi);
        assert!((mean_s - alpha).norm() < 1e-12);
    }

    #[test]
    fn coherent_truncated_weight_is_poisson_cdf() {
        let (n_s, d) = (2.0, 6);
        let s = coherent(n_s, 0.0, d).unwrap();
        let cdf: f64 = (0..d).map(|n| poisson_pmf(n_s, n)).sum();
        assert!((s.terms()[0].p - cdf).abs() < 1e-14);
        assert!((s.deficit() - (1.0 - cdf)).abs() < 1e-14);
    }

    #[test]
    fn max_entangled_photons() {
        let s = max_entangled_fock(1).unwrap();
        assert_eq!(s.rank(), 1);
        let s = max_entangled_fock(2).unwrap();
        assert_eq!(s.probabilities(), vec![0.5, 0.5]);
        assert!((s.mean_photon_number() - 0.5).abs() < 1e-15);
        assert!((max_entangled_fock(5).unwrap().mean_photon_number() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cat_degenerate_at_zero_photons() {
        let s = cat_state(0.0, 3, 5).unwrap();
        assert_eq!(s.rank(), 1);
        assert!((s.terms()[0].p - 1.0).abs() < 1e-15);
        assert!((s.terms()[0].vector[0].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cat_two_component_eigenvalues() {
        for n_s in [0.01, 0.1, 0.5] {
            let s = cat_state(n_s, 2, 40).unwrap();
            let mut p = s.probabilities();
            p.sort_by(|a, b| b.total_cmp(a));
            // <alpha|-alpha> = e^{-2N}
            let overlap = (-2.0 * n_s).exp();
            assert!((p[0] - (1.0 + overlap) / 2.0).abs() < 1e-12);
            assert!((p[1] - (1.0 - overlap) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cat_eigenvalues_are_poisson_residue_classes() {
        // oracle: lambda_j = sum_{m = j mod d} Poisson(N_S, m)
        let (n_s, d) = (1.3, 4);
        let s = cat_state(n_s, d, 60).unwrap();
        assert_eq!(s.rank(), d);
        for t in s.terms() {
            let lead = (0..60).max_by(|&a, &b| t.vector[a].norm().total_cmp(&t.vector[b].norm())).unwrap();
            let j = lead % d;
            let want: f64 = (0..60).filter(|m| m % d == j).map(|m| poisson_pmf(n_s, m)).sum();
            assert!((t.p - want).abs() < 1e-12, "class {j}");
            for (n, z) in t.vector.iter().enumerate() {
                if n % d != j {
                    assert!(z.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cat_vectors_orthonormal() {
        let s = cat_state(1.0, 4, 40).unwrap();
        let r = s.rank();
        for a in 0..r {
            for b in 0..r {
                let ov = s.terms()[a].vector.dotc(&s.terms()[b].vector);
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((ov - c(want)).norm() < 1e-9);
            }
        }
        assert!((s.mean_photon_number() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cat_infinite_is_poisson() {
        let s = cat_state_infinite_d(0.0, 5).unwrap();
        assert_eq!(s.rank(), 1);
        let s = cat_state_infinite_d(1.0, 30).unwrap();
        let e = (-1.0f64).exp();
        let p = s.probabilities();
        assert!((p[0] - e).abs() < 1e-15);
        assert!((p[1] - e).abs() < 1e-15);
        assert!((p[2] - e / 2.0).abs() < 1e-15);
        assert!((s.mean_photon_number() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cat_converges_to_infinite_limit() {
        let n_s = 1.0;
        let finite = cat_state(n_s, 32, 40).unwrap();
        let limit = cat_state_infinite_d(n_s, 40).unwrap();
        let mut a = finite.probabilities();
        let mut b = limit.probabilities();
        a.sort_by(|x, y| y.total_cmp(x));
        b.sort_by(|x, y| y.total_cmp(x));
        let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // residue class n also collects n + 32, whose Poisson weight is ~1e-36
        println!("cat d=32 vs d=inf max deviation {dev:e}");
        assert!(dev < 1e-12, "max deviation {dev:e}");
    }

    #[test]
    fn schmidt_decompose_basic_shapes() {
        let mut prod = CMatrix::zeros(3, 2);
        prod[(1, 0)] = c(0.6);
        prod[(1, 1)] = C64::new(0.0, 0.8);
        let s = schmidt_decompose(&prod).unwrap();
        assert_eq!(s.rank(), 1);
        assert!((s.terms()[0].p - 1.0).abs() < 1e-12);

        let h = 0.5f64.sqrt();
        let bell = CMatrix::from_row_slice(2, 2, &[c(h), c(0.0), c(0.0), c(h)]);
        let s = schmidt_decompose(&bell).unwrap();
        assert_eq!(s.rank(), 2);
        for p in s.probabilities() {
            assert!((p - 0.5).abs() < 1e-12);
        }

        assert!(matches!(schmidt_decompose(&(bell * c(2.0))), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn schmidt_decompose_reproduces_cat() {
        let (n_s, d, cutoff) = (1.0f64, 3, 40);
        let df = d as f64;
        let amps = CMatrix::from_fn(cutoff, d, |n, k| {
            let alpha = C64::from_polar(n_s.sqrt(), 2.0 * PI * k as f64 / df);
            let mut a = c((-n_s / 2.0).exp());
            for m in 0..n {
                a *= alpha / ((m + 1) as f64).sqrt();
            }
            a / c(df.sqrt())
        });
        let svd = schmidt_decompose(&amps).unwrap();
        let cat = cat_state(n_s, d, cutoff).unwrap();
        let mut a = svd.probabilities();
        let mut b = cat.probabilities();
        a.sort_by(|x, y| y.total_cmp(x));
        b.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip() {
        let s = cat_state(0.4, 2, 12).unwrap();
        let text = s.to_json().unwrap();
        let back = SchmidtState::from_json(&text).unwrap();
        assert_eq!(back.family(), s.family());
        assert_eq!(back.cutoff(), 12);
        for (x, y) in back.terms().iter().zip(s.terms()) {
            assert_eq!(x.p, y.p);
            assert!((&x.vector - &y.vector).norm() < 1e-15);
        }
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["family", "params", "cutoff", "deficit", "terms"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["family"], "cat:2");
        assert!(v["terms"][0].get("re").is_some() && v["terms"][0].get("im").is_some());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("tmsv".parse::<StateSpec>().unwrap(), StateSpec::Tmsv);
        assert_eq!("cat:3".parse::<StateSpec>().unwrap(), StateSpec::Cat { d: 3 });
        assert_eq!("cat:inf".parse::<StateSpec>().unwrap(), StateSpec::CatInfinite);
        assert_eq!("maxfock:5".parse::<StateSpec>().unwrap(), StateSpec::MaxEntangledFock { d: 5 });
        assert_eq!("coherent".parse::<StateSpec>().unwrap(), StateSpec::Coherent { phi: 0.0 });
        assert!("cat:1".parse::<StateSpec>().is_err());
        assert!("squeezed".parse::<StateSpec>().is_err());
        assert!("maxfock".parse::<StateSpec>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn constructors_keep_invariants(n_s in 0.0f64..3.0, d in 2usize..6) {
                let cutoff = 50;
                for s in [
                    tmsv(n_s, cutoff).unwrap(),
                    coherent(n_s, 0.4, cutoff).unwrap(),
                    cat_state(n_s, d, cutoff).unwrap(),
                    cat_state_infinite_d(n_s, cutoff).unwrap(),
                ] {
                    let total: f64 = s.probabilities().iter().sum::<f64>() + s.deficit();
                    prop_assert!((total - 1.0).abs() < 1e-10);
                    prop_assert!((s.mean_photon_number() - n_s).abs() < 1e-8 + 60.0 * s.deficit());
                }
            }
        }
    }
}
