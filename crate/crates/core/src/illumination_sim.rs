//! Monte Carlo simulation of the threshold detection protocol.
//!
//! Each trial draws `M` i.i.d. outcomes of the optimal observable, forms the
//! sample mean `eta_hat`, and declares the target present iff
//! `eta_hat > xi * eta`. Under H0 the outcomes come from `rho_0`, under H1
//! from `rho_eta`.
//!
//! Randomness is keyed by `(seed, branch, trial)`: every trial owns a ChaCha
//! stream and draws its copies sequentially from it. Trials are processed in
//! fixed-size chunks whose partial results are combined in chunk order, so the
//! output does not depend on how many threads run.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::estimator_lab::{outcome_distribution, received_state, sld_observable, OutcomeDistribution};
use crate::fock_algebra::thermal_tail;
use crate::qfi_engine::{csv_float, qfi_bounds, rest_state};
use crate::state_models::StateSpec;

pub const SIMULATION_CSV_SCHEMA: &str = "# schema: qi-simulation-csv v1";

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

const CHUNK: u64 = 2048;
const AUTO_TAIL: f64 = 1e-10;
const RECEIVED_TOLERANCE: f64 = 1e-6;
const MERGE_TOL: f64 = 1e-12;

fn one_or_many<'de, D, T>(de: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

fn half() -> f64 {
    0.5
}

fn default_min_events() -> u64 {
    50
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    /// Transmitter signal cutoff; chosen so the truncation deficit is below
    /// `1e-10` when absent.
    pub signal: Option<usize>,
    /// Returned-mode cutoff; chosen so the thermal tail is below `1e-10`
    /// when absent.
    pub bath: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// `-ln P` against `M` through the origin.
    LogLinear,
    /// `erfc^-1(2P)^2` against `M` through the origin; exact for
    /// `P = erfc(sqrt(rate M)) / 2`.
    #[default]
    GaussianTail,
}

/// One simulated protocol. `m` and `xi` accept a number or a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub family: StateSpec,
    pub n_s: f64,
    pub n_b: f64,
    pub eta: f64,
    #[serde(deserialize_with = "one_or_many")]
    pub m: Vec<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub xi: Vec<f64>,
    #[serde(default = "half")]
    pub pi0: f64,
    #[serde(default = "half")]
    pub pi1: f64,
    /// Initial number of trials per hypothesis.
    pub trials: u64,
    /// Cap for adaptive doubling; defaults to `16 * trials`.
    #[serde(default)]
    pub max_trials: Option<u64>,
    /// Error events required at every `M` of the fitted threshold.
    #[serde(default = "default_min_events")]
    pub min_events: u64,
    pub seed: u64,
    #[serde(default)]
    pub cutoffs: Cutoffs,
    #[serde(default)]
    pub fit: FitMethod,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.n_s > 0.0 && self.n_s.is_finite()) {
            return bad(format!("N_S must be > 0, got {}", self.n_s));
        }
        if !(self.n_b >= 0.0 && self.n_b.is_finite()) {
            return bad(format!("N_B must be >= 0, got {}", self.n_b));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must be in (0, 1], got {}", self.eta));
        }
        if self.m.is_empty() || self.m.contains(&0) {
            return bad("M grid must be nonempty with M >= 1".into());
        }
        if self.xi.is_empty() || self.xi.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return bad("xi values must lie in (0, 1)".into());
        }
        if !(self.pi0 >= 0.0 && self.pi1 >= 0.0 && (self.pi0 + self.pi1 - 1.0).abs() < 1e-12) {
            return bad(format!("priors ({}, {}) are not a distribution", self.pi0, self.pi1));
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.max_trials.is_some_and(|cap| cap < self.trials) {
            return bad("max_trials must be >= trials".into());
        }
        Ok(())
    }

    pub fn trial_cap(&self) -> u64 {
        self.max_trials.unwrap_or(16 * self.trials)
    }

    fn sorted_m(&self) -> Vec<usize> {
        let mut m = self.m.clone();
        m.sort_unstable();
        m.dedup();
        m
    }

    fn sorted_xi(&self) -> Vec<f64> {
        let mut xi = self.xi.clone();
        xi.sort_by(f64::total_cmp);
        xi.dedup();
        xi
    }

    /// The threshold used for the headline exponent fit: the grid value
    /// closest to 1/2.
    pub fn fit_xi(&self) -> f64 {
        self.sorted_xi().into_iter().min_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs())).unwrap_or(0.5)
    }
}

/// Closed-form classical references at one `(M, xi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalErrors {
    pub p_i: f64,
    pub p_ii: f64,
    /// Optimal classical error probability with global measurements.
    pub pr_err_opt: f64,
}

/// `P_I,II = erfc(sqrt(eta_k^2 H_C M / 2)) / 2` with `eta_I = xi eta`,
/// `eta_II = (1 - xi) eta`, and the equal-prior Chernoff bound
/// `exp(-eta^2 N_S (sqrt(N_B+1) - sqrt(N_B))^2 M) / 2`.
pub fn classical_error_closed(n_s: f64, n_b: f64, eta: f64, m: usize, xi: f64) -> Result<ClassicalErrors> {
    if !(n_s >= 0.0 && n_b >= 0.0 && eta >= 0.0) {
        return Err(Error::InvalidParameter("N_S, N_B and eta must be >= 0".into()));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::InvalidParameter(format!("xi must lie in (0, 1), got {xi}")));
    }
    let h_c = qfi_bounds(n_s, n_b).h_c;
    let m = m as f64;
    let tail = |eta_k: f64| 0.5 * erfc((eta_k * eta_k * h_c * m / 2.0).sqrt());
    let gap = (n_b + 1.0).sqrt() - n_b.sqrt();
    Ok(ClassicalErrors {
        p_i: tail(xi * eta),
        p_ii: tail((1.0 - xi) * eta),
        pr_err_opt: 0.5 * (-eta * eta * n_s * gap * gap * m).exp(),
    })
}

/// A binomial proportion with its 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionEstimate {
    pub events: u64,
    pub trials: u64,
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn wilson(events: u64, trials: u64) -> ProportionEstimate {
    if trials == 0 {
        return ProportionEstimate { events, trials, p: f64::NAN, lo: 0.0, hi: 1.0 };
    }
    let n = trials as f64;
    let p = events as f64 / n;
    let z2 = Z95 * Z95;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z95 / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ProportionEstimate { events, trials, p, lo: (centre - half).max(0.0).min(p), hi: (centre + half).min(1.0).max(p) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub method: FitMethod,
    pub rate: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Fits an exponential decay rate through the origin, weighting each point by
/// the inverse binomial variance of its transformed probability. The standard
/// error is inflated by the reduced chi-square when that exceeds one.
pub fn exponent_fit(m_grid: &[usize], estimates: &[ProportionEstimate], method: FitMethod) -> Result<RateFit> {
    if m_grid.len() != estimates.len() {
        return Err(Error::InvalidParameter("one estimate per M value required".into()));
    }
    if m_grid.len() < 3 {
        return Err(Error::InvalidParameter(format!("need >= 3 M values, got {}", m_grid.len())));
    }
    if let Some(e) = estimates.iter().find(|e| e.events == 0) {
        return Err(Error::Unresolved(format!(
            "no error events in {} trials; increase the trial budget",
            e.trials
        )));
    }
    if estimates.iter().any(|e| e.events >= e.trials) {
        return Err(Error::Unresolved("error probability estimate is 1".into()));
    }
    let mut swm2 = 0.0;
    let mut swmy = 0.0;
    let mut pts = Vec::with_capacity(m_grid.len());
    for (&m, e) in m_grid.iter().zip(estimates) {
        let var_p = e.p * (1.0 - e.p) / e.trials as f64;
        let (y, dy) = match method {
            FitMethod::LogLinear => (-e.p.ln(), 1.0 / e.p),
            FitMethod::GaussianTail => {
                let z = erfc_inv(2.0 * e.p);
                // d/dP of z|z|, with dz/dP = -sqrt(pi) e^{z^2}
                (z * z.abs(), 2.0 * z.abs() * std::f64::consts::PI.sqrt() * (z * z).exp())
            }
        };
        let w = 1.0 / (dy * dy * var_p);
        let m = m as f64;
        swm2 += w * m * m;
        swmy += w * m * y;
        pts.push((m, y, w));
    }
    let rate = swmy / swm2;
    let chi2: f64 = pts.iter().map(|&(m, y, w)| w * (y - rate * m).powi(2)).sum();
    let dof = (pts.len() - 1) as f64;
    let stderr = (1.0 / swm2).sqrt() * (chi2 / dof).max(1.0).sqrt();
    Ok(RateFit { method, rate, stderr, points: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub ratio: f64,
    pub ratio_stderr: f64,
    pub gain_db: f64,
    pub gain_db_stderr: f64,
}

/// `10 log10(rate_quantum / rate_classical)` with first-order error propagation.
pub fn gain_summary(quantum: &RateFit, classical: &RateFit) -> Result<GainSummary> {
    if !(quantum.rate > 0.0 && classical.rate > 0.0) {
        return Err(Error::InvalidParameter("rates must be positive".into()));
    }
    let ratio = quantum.rate / classical.rate;
    let rel = ((quantum.stderr / quantum.rate).powi(2) + (classical.stderr / classical.rate).powi(2)).sqrt();
    Ok(GainSummary {
        ratio,
        ratio_stderr: ratio * rel,
        gain_db: 10.0 * ratio.log10(),
        gain_db_stderr: 10.0 / std::f64::consts::LN_10 * rel,
    })
}

/// Outcome distributions of the optimal observable under both hypotheses.
#[derive(Debug, Clone)]
pub struct ProtocolModel {
    /// QFI of the truncated model, `1 / normalization` of the observable.
    pub h: f64,
    pub h_c: f64,
    pub signal_cutoff: usize,
    pub bath_cutoff: usize,
    pub h0: OutcomeDistribution,
    pub h1: OutcomeDistribution,
}

fn auto_bath_cutoff(n_b: f64) -> Result<usize> {
    (8..=crate::fock_algebra::DEFAULT_MAX_DIMENSION)
        .find(|&d| thermal_tail(n_b, d) < AUTO_TAIL)
        .ok_or_else(|| Error::Truncation { deficit: thermal_tail(n_b, 4096), tolerance: AUTO_TAIL })
}

fn auto_signal_cutoff(spec: StateSpec, n_s: f64) -> Result<usize> {
    if !spec.uses_cutoff() {
        return Ok(spec.build(n_s, 1)?.cutoff());
    }
    let mut last = f64::INFINITY;
    for d in (4..=256).step_by(2) {
        last = spec.build(n_s, d)?.deficit();
        if last < AUTO_TAIL {
            return Ok(d);
        }
    }
    Err(Error::Truncation { deficit: last, tolerance: AUTO_TAIL })
}

pub fn prepare_model(cfg: &ProtocolConfig) -> Result<ProtocolModel> {
    cfg.validate()?;
    let d_s = match cfg.cutoffs.signal {
        Some(d) => d,
        None => auto_signal_cutoff(cfg.family, cfg.n_s)?,
    };
    let d_b = match cfg.cutoffs.bath {
        Some(d) => d,
        None => auto_bath_cutoff(cfg.n_b)?,
    };
    let state = cfg.family.build(cfg.n_s, d_s)?;
    let obs = sld_observable(&state, cfg.n_b, d_b)?;
    let rho0 = rest_state(&state, cfg.n_b, d_b)?;
    let rho1 = received_state(&state, cfg.n_b, cfg.eta, d_b, RECEIVED_TOLERANCE)?;
    Ok(ProtocolModel {
        h: 1.0 / obs.normalization,
        h_c: qfi_bounds(cfg.n_s, cfg.n_b).h_c,
        signal_cutoff: state.cutoff(),
        bath_cutoff: d_b,
        h0: outcome_distribution(&rho0, &obs)?.with_eta(0.0).merged(MERGE_TOL),
        h1: outcome_distribution(&rho1, &obs)?.with_eta(cfg.eta).merged(MERGE_TOL),
    })
}

struct Sampler {
    values: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl Sampler {
    fn new(dist: &OutcomeDistribution) -> Result<Self> {
        let alias = WeightedAliasIndex::new(dist.probabilities.clone())
            .map_err(|e| Error::Numerical(format!("cannot sample outcome distribution: {e}")))?;
        Ok(Self { values: dist.values.clone(), alias })
    }
}

/// Per-chunk tallies for one hypothesis: `present[m][xi]` counts trials that
/// declared the target present; `sum`/`sum_sq` accumulate `eta_hat` per `M`.
#[derive(Debug, Clone, PartialEq)]
struct Tally {
    trials: u64,
    present: Vec<Vec<u64>>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Tally {
    fn zeros(n_m: usize, n_xi: usize) -> Self {
        Self { trials: 0, present: vec![vec![0; n_xi]; n_m], sum: vec![0.0; n_m], sum_sq: vec![0.0; n_m] }
    }

    fn absorb(&mut self, other: &Tally) {
        self.trials += other.trials;
        for (a, b) in self.present.iter_mut().zip(&other.present) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }
}

fn stream_id(branch: u64, trial: u64) -> u64 {
    trial.wrapping_mul(2).wrapping_add(branch)
}

fn run_trials(
    sampler: &Sampler,
    branch: u64,
    seed: u64,
    range: (u64, u64),
    m_grid: &[usize],
    thresholds: &[f64],
) -> Tally {
    let base = ChaCha8Rng::seed_from_u64(seed);
    let m_max = *m_grid.last().expect("nonempty M grid");
    let chunks: Vec<(u64, u64)> = (range.0..range.1)
        .step_by(CHUNK as usize)
        .map(|start| (start, (start + CHUNK).min(range.1)))
        .collect();
    let partial: Vec<Tally> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut tally = Tally::zeros(m_grid.len(), thresholds.len());
            for trial in lo..hi {
                let mut rng = base.clone();
                rng.set_stream(stream_id(branch, trial));
                let mut sum = 0.0;
                let mut next = 0;
                for copy in 1..=m_max {
                    sum += sampler.values[sampler.alias.sample(&mut rng)];
                    if copy == m_grid[next] {
                        let est = sum / copy as f64;
                        for (k, &thr) in thresholds.iter().enumerate() {
                            if est > thr {
                                tally.present[next][k] += 1;
                            }
                        }
                        tally.sum[next] += est;
                        tally.sum_sq[next] += est * est;
                        next += 1;
                    }
                }
            }
            tally.trials = hi - lo;
            tally
        })
        .collect();
    let mut total = Tally::zeros(m_grid.len(), thresholds.len());
    for t in &partial {
        total.absorb(t);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub m: usize,
    pub xi: f64,
    pub p_i: ProportionEstimate,
    pub p_ii: ProportionEstimate,
    pub pr_err: f64,
    pub pr_err_lo: f64,
    pub pr_err_hi: f64,
    /// `-ln(P)/M`, absent when no error event was seen.
    pub exponent_i: Option<f64>,
    pub exponent_ii: Option<f64>,
    /// `xi^2 eta^2 H / 2` and `(1 - xi)^2 eta^2 H / 2`.
    pub predicted_exponent_i: f64,
    pub predicted_exponent_ii: f64,
    pub classical: ClassicalErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiRates {
    pub xi: f64,
    pub rate_i: Option<RateFit>,
    pub rate_ii: Option<RateFit>,
    /// `min(rate_I, rate_II)` with the standard error of the smaller one.
    pub min_rate: Option<f64>,
    pub min_rate_stderr: Option<f64>,
    /// Whether this threshold maximises `min_rate` over the grid.
    pub max_min: bool,
}

/// Sample moments of `eta_hat` next to the Cramér-Rao value `1/(M H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMoments {
    pub m: usize,
    pub h0_mean: f64,
    pub h0_variance: f64,
    pub h1_mean: f64,
    pub h1_variance: f64,
    pub cramer_rao: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub config: ProtocolConfig,
    pub h: f64,
    pub h_c: f64,
    pub signal_cutoff: usize,
    pub bath_cutoff: usize,
    pub trials: u64,
    /// Whether the event target was met before the trial cap.
    pub resolved: bool,
    pub fit_xi: f64,
    pub fit_i: Option<RateFit>,
    pub fit_ii: Option<RateFit>,
    /// Sorted by `(M, xi)`.
    pub points: Vec<ErrorPoint>,
    pub xi_rates: Vec<XiRates>,
    pub estimator: Vec<EstimatorMoments>,
}

pub fn run_protocol(cfg: &ProtocolConfig) -> Result<ErrorReport> {
    let model = prepare_model(cfg)?;
    run_with_model(cfg, &model)
}

/// Runs the simulation on precomputed outcome distributions.
pub fn run_with_model(cfg: &ProtocolConfig, model: &ProtocolModel) -> Result<ErrorReport> {
    cfg.validate()?;
    let m_grid = cfg.sorted_m();
    let xi_grid = cfg.sorted_xi();
    let fit_xi = cfg.fit_xi();
    let fit_k = xi_grid.iter().position(|&x| x == fit_xi).expect("fit xi is on the grid");
    let thresholds: Vec<f64> = xi_grid.iter().map(|&x| x * cfg.eta).collect();
    let s0 = Sampler::new(&model.h0)?;
    let s1 = Sampler::new(&model.h1)?;

    let (n_m, n_xi) = (m_grid.len(), xi_grid.len());
    let mut t0 = Tally::zeros(n_m, n_xi);
    let mut t1 = Tally::zeros(n_m, n_xi);
    let mut done = 0;
    let mut target = cfg.trials;
    let cap = cfg.trial_cap();
    let resolved = loop {
        t0.absorb(&run_trials(&s0, 0, cfg.seed, (done, target), &m_grid, &thresholds));
        t1.absorb(&run_trials(&s1, 1, cfg.seed, (done, target), &m_grid, &thresholds));
        done = target;
        let enough = (0..n_m).all(|i| {
            t0.present[i][fit_k] >= cfg.min_events && done - t1.present[i][fit_k] >= cfg.min_events
        });
        if enough {
            break true;
        }
        if done >= cap {
            break false;
        }
        target = (2 * done).min(cap);
    };

    let mut points = Vec::with_capacity(n_m * n_xi);
    for (i, &m) in m_grid.iter().enumerate() {
        for (k, &xi) in xi_grid.iter().enumerate() {
            let p_i = wilson(t0.present[i][k], done);
            let p_ii = wilson(done - t1.present[i][k], done);
            let exponent = |e: &ProportionEstimate| (e.events > 0).then(|| -e.p.ln() / m as f64);
            let scale = cfg.eta * cfg.eta * model.h / 2.0;
            points.push(ErrorPoint {
                m,
                xi,
                pr_err: cfg.pi0 * p_i.p + cfg.pi1 * p_ii.p,
                pr_err_lo: cfg.pi0 * p_i.lo + cfg.pi1 * p_ii.lo,
                pr_err_hi: cfg.pi0 * p_i.hi + cfg.pi1 * p_ii.hi,
                exponent_i: exponent(&p_i),
                exponent_ii: exponent(&p_ii),
                predicted_exponent_i: xi * xi * scale,
                predicted_exponent_ii: (1.0 - xi) * (1.0 - xi) * scale,
                classical: classical_error_closed(cfg.n_s, cfg.n_b, cfg.eta, m, xi)?,
                p_i,
                p_ii,
            });
        }
    }

    let column = |k: usize, pick: fn(&ErrorPoint) -> ProportionEstimate| -> Vec<ProportionEstimate> {
        (0..n_m).map(|i| pick(&points[i * n_xi + k])).collect()
    };
    let fit = |est: Vec<ProportionEstimate>| exponent_fit(&m_grid, &est, cfg.fit).ok();
    let mut xi_rates: Vec<XiRates> = xi_grid
        .iter()
        .enumerate()
        .map(|(k, &xi)| {
            let rate_i = fit(column(k, |p| p.p_i));
            let rate_ii = fit(column(k, |p| p.p_ii));
            let smaller = match (&rate_i, &rate_ii) {
                (Some(a), Some(b)) => Some(if a.rate <= b.rate { a } else { b }),
                _ => None,
            };
            XiRates {
                xi,
                min_rate: smaller.map(|f| f.rate),
                min_rate_stderr: smaller.map(|f| f.stderr),
                rate_i,
                rate_ii,
                max_min: false,
            }
        })
        .collect();
    if let Some(best) = xi_rates
        .iter()
        .enumerate()
        .filter_map(|(k, r)| r.min_rate.map(|v| (k, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
    {
        xi_rates[best].max_min = true;
    }

    let moments = |t: &Tally, i: usize| {
        let n = t.trials as f64;
        let mean = t.sum[i] / n;
        (mean, (t.sum_sq[i] / n - mean * mean) * n / (n - 1.0).max(1.0))
    };
    let estimator = m_grid
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let (h0_mean, h0_variance) = moments(&t0, i);
            let (h1_mean, h1_variance) = moments(&t1, i);
            EstimatorMoments { m, h0_mean, h0_variance, h1_mean, h1_variance, cramer_rao: 1.0 / (m as f64 * model.h) }
        })
        .collect();

    Ok(ErrorReport {
        config: cfg.clone(),
        h: model.h,
        h_c: model.h_c,
        signal_cutoff: model.signal_cutoff,
        bath_cutoff: model.bath_cutoff,
        trials: done,
        resolved,
        fit_xi,
        fit_i: xi_rates[fit_k].rate_i.clone(),
        fit_ii: xi_rates[fit_k].rate_ii.clone(),
        points,
        xi_rates,
        estimator,
    })
}

const SIMULATION_CSV_HEADER: [&str; 25] = [
    "family",
    "N_S",
    "N_B",
    "eta",
    "M",
    "xi",
    "trials",
    "errors_I",
    "errors_II",
    "P_I",
    "P_I_lo",
    "P_I_hi",
    "P_II",
    "P_II_lo",
    "P_II_hi",
    "Pr_err",
    "exponent_I",
    "exponent_II",
    "predicted_exponent_I",
    "predicted_exponent_II",
    "classical_P_I",
    "classical_P_II",
    "classical_Pr_err_opt",
    "H",
    "max_min_xi",
];

/// One row per `(config, M, xi)`; the `max_min_xi` column flags the
/// threshold that maximises `min(rate_I, rate_II)`.
pub fn write_simulation_csv<W: Write>(out: W, reports: &[ErrorReport]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{SIMULATION_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(SIMULATION_CSV_HEADER).map_err(fmt_err)?;
    let opt = |x: Option<f64>| x.map(csv_float).unwrap_or_default();
    for rep in reports {
        let cfg = &rep.config;
        for p in &rep.points {
            let flagged = rep.xi_rates.iter().any(|r| r.xi == p.xi && r.max_min);
            let row = [
                cfg.family.to_string(),
                csv_float(cfg.n_s),
                csv_float(cfg.n_b),
                csv_float(cfg.eta),
                p.m.to_string(),
                csv_float(p.xi),
                p.p_i.trials.to_string(),
                p.p_i.events.to_string(),
                p.p_ii.events.to_string(),
                csv_float(p.p_i.p),
                csv_float(p.p_i.lo),
                csv_float(p.p_i.hi),
                csv_float(p.p_ii.p),
                csv_float(p.p_ii.lo),
                csv_float(p.p_ii.hi),
                csv_float(p.pr_err),
                opt(p.exponent_i),
                opt(p.exponent_ii),
                csv_float(p.predicted_exponent_i),
                csv_float(p.predicted_exponent_ii),
                csv_float(p.classical.p_i),
                csv_float(p.classical.p_ii),
                csv_float(p.classical.pr_err_opt),
                csv_float(rep.h),
                flagged.to_string(),
            ];
            w.write_record(row).map_err(fmt_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(family: StateSpec, m: Vec<usize>, xi: Vec<f64>, trials: u64) -> ProtocolConfig {
        ProtocolConfig {
            family,
            n_s: 0.5,
            n_b: 1.0,
            eta: 0.1,
            m,
            xi,
            pi0: 0.5,
            pi1: 0.5,
            trials,
            max_trials: Some(trials),
            min_events: 50,
            seed: 7,
            cutoffs: Cutoffs::default(),
            fit: FitMethod::GaussianTail,
        }
    }

    #[test]
    fn classical_closed_form_limits() {
        let e = classical_error_closed(0.5, 1.0, 0.0, 100, 0.5).unwrap();
        assert_eq!((e.p_i, e.p_ii, e.pr_err_opt), (0.5, 0.5, 0.5));
        let e = classical_error_closed(0.5, 1.0, 0.1, 1_000_000, 0.5).unwrap();
        assert!(e.p_i < 1e-100 && e.p_ii < 1e-100 && e.pr_err_opt < 1e-100);
        // bright-bath exponent approaches M eta^2 N_S / (4 N_B)
        let n_b = 1e4;
        let e = classical_error_closed(0.1, n_b, 0.1, 1000, 0.5).unwrap();
        let want = 1000.0 * 0.01 * 0.1 / (4.0 * n_b);
        assert!(((-(2.0 * e.pr_err_opt).ln() - want) / want).abs() < 1e-3);
        assert!(classical_error_closed(0.1, 1.0, 0.1, 10, 1.0).is_err());
    }

    #[test]
    fn wilson_interval_contains_estimate() {
        for (k, n) in [(0, 10), (10, 10), (3, 1000), (500, 1000)] {
            let w = wilson(k, n);
            assert!(w.lo <= w.p && w.p <= w.hi && w.lo >= 0.0 && w.hi <= 1.0);
        }
        let w = wilson(0, 100);
        assert_eq!(w.lo, 0.0);
        assert!(w.hi > 0.0);
    }

    fn synthetic(m_grid: &[usize], p: impl Fn(f64) -> f64) -> Vec<ProportionEstimate> {
        let n = 1_000_000_000u64;
        m_grid
            .iter()
            .map(|&m| {
                let q = p(m as f64);
                ProportionEstimate { events: (q * n as f64) as u64, trials: n, p: q, lo: q, hi: q }
            })
            .collect()
    }

    #[test]
    fn fit_recovers_exact_inputs() {
        let grid = [100, 200, 400, 800];
        let fit = exponent_fit(&grid, &synthetic(&grid, |m| (-0.003 * m).exp()), FitMethod::LogLinear).unwrap();
        assert!((fit.rate - 0.003).abs() <= fit.stderr.max(1e-12));
        let fit =
            exponent_fit(&grid, &synthetic(&grid, |m| 0.5 * erfc((0.002 * m).sqrt())), FitMethod::GaussianTail).unwrap();
        assert!((fit.rate - 0.002).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_unresolved_points() {
        let grid = [100, 200, 400];
        let mut est = synthetic(&grid, |m| (-0.003 * m).exp());
        est[2] = wilson(0, 1000);
        assert!(matches!(exponent_fit(&grid, &est, FitMethod::LogLinear), Err(Error::Unresolved(_))));
        assert!(exponent_fit(&grid[..2], &est[..2], FitMethod::LogLinear).is_err());
    }

    #[test]
    fn identical_rates_give_zero_db() {
        let f = RateFit { method: FitMethod::GaussianTail, rate: 1e-3, stderr: 1e-5, points: 5 };
        let g = gain_summary(&f, &f).unwrap();
        assert_eq!(g.gain_db, 0.0);
        assert!(g.gain_db_stderr > 0.0);
    }

    #[test]
    fn config_json_accepts_scalars_and_lists() {
        let cfg: ProtocolConfig = serde_json::from_str(
            r#"{"family":"coherent","n_s":0.5,"n_b":1,"eta":0.1,"m":500,"xi":[0.3,0.5],"trials":10,"seed":1}"#,
        )
        .unwrap();
        assert_eq!(cfg.m, vec![500]);
        assert_eq!(cfg.xi, vec![0.3, 0.5]);
        assert_eq!(cfg.fit, FitMethod::GaussianTail);
        assert_eq!(cfg.fit_xi(), 0.5);
        assert_eq!(cfg.trial_cap(), 160);
        let back: ProtocolConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);

        let mut bad = cfg.clone();
        bad.xi = vec![1.0];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.pi0 = 0.7;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.eta = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn simulation_is_reproducible_and_thread_independent() {
        let cfg = config(StateSpec::Coherent { phi: 0.0 }, vec![50, 100, 200], vec![0.3, 0.5], 3000);
        let model = prepare_model(&cfg).unwrap();
        let csv_of = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let rep = pool.install(|| run_with_model(&cfg, &model)).unwrap();
            let mut buf = Vec::new();
            write_simulation_csv(&mut buf, &[rep]).unwrap();
            buf
        };
        let a = csv_of(1);
        assert_eq!(a, csv_of(1));
        assert_eq!(a, csv_of(3));
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(SIMULATION_CSV_SCHEMA));
        assert_eq!(text.lines().count(), 2 + 6);
    }

    #[test]
    fn larger_thresholds_trade_type_one_for_type_two() {
        let cfg = config(StateSpec::Coherent { phi: 0.0 }, vec![100, 400], vec![0.2, 0.5, 0.8], 4000);
        let rep = run_protocol(&cfg).unwrap();
        for m in [100, 400] {
            let row: Vec<&ErrorPoint> = rep.points.iter().filter(|p| p.m == m).collect();
            for w in row.windows(2) {
                assert!(w[1].p_i.p <= w[0].p_i.hi);
                assert!(w[1].p_ii.p >= w[0].p_ii.lo);
            }
        }
        // more copies make both errors smaller
        let at = |m: usize| rep.points.iter().find(|p| p.m == m && p.xi == 0.5).unwrap().clone();
        assert!(at(400).p_i.p < at(100).p_i.p && at(400).p_ii.p < at(100).p_ii.p);
    }

    #[test]
    fn estimator_meets_cramer_rao() {
        let cfg = config(StateSpec::Tmsv, vec![20, 80], vec![0.5], 4000);
        let rep = run_protocol(&cfg).unwrap();
        for e in &rep.estimator {
            // sample variance of a sample mean, 4000 trials: ~2.2% relative error
            assert!((e.h1_variance / e.cramer_rao - 1.0).abs() < 0.1, "{e:?}");
            assert!((e.h1_mean - cfg.eta).abs() < 5.0 * e.cramer_rao.sqrt() / (4000f64).sqrt() + 2e-3);
            assert!(e.h0_mean.abs() < 5.0 * e.cramer_rao.sqrt() / (4000f64).sqrt());
        }
        assert!((rep.h - 4.0 * 0.5 / 2.0 / (1.0 + 0.5 / 1.5 * 0.5)).abs() < 1e-8);
    }
}
