//! The acceptance suite: each criterion is a function reporting what was
//! measured next to what was expected.
//!
//! `fast` runs everything except the Monte Carlo exponent criteria, which
//! only `full` includes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator_lab::{
    local_model, mgf_empirical, moment_bound_check, outcome_distribution, received_state, sld_observable,
    unbiasedness_check, ETA_GRID,
};
use crate::fock_algebra::trace_of_product;
use crate::illumination_sim::{
    gain_summary, prepare_model, run_with_model, write_simulation_csv, Cutoffs, ErrorReport, FitMethod,
    ProtocolConfig,
};
use crate::qfi_engine::{
    converge_cutoff, qfi_bounds, qfi_cat_direct, qfi_for_spec, qfi_gaussian_closed, qfi_schmidt_value, CutoffPolicy,
};
use crate::state_models::{cat_state, coherent, max_entangled_fock, tmsv, SchmidtState, StateSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Fast,
    Full,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Suite::Fast),
            "full" => Ok(Suite::Full),
            other => Err(Error::InvalidParameter(format!("unknown suite {other:?} (fast | full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub expected: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: measured {}; expected {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.expected,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub suite: Suite,
    pub results: Vec<CriterionResult>,
}

impl ValidationSummary {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

struct Outcome {
    passed: bool,
    measured: String,
    expected: String,
}

fn timed(id: u8, name: &str, f: impl FnOnce() -> Result<Outcome>) -> CriterionResult {
    let start = Instant::now();
    let out = f();
    let seconds = start.elapsed().as_secs_f64();
    match out {
        Ok(o) => CriterionResult { id, name: name.into(), passed: o.passed, measured: o.measured, expected: o.expected, seconds },
        Err(e) => CriterionResult {
            id,
            name: name.into(),
            passed: false,
            measured: format!("error: {e}"),
            expected: "no error".into(),
            seconds,
        },
    }
}

const N_B_GRID: [f64; 5] = [0.1, 1.0, 10.0, 50.0, 100.0];

/// Squeezed-vacuum QFI from the Schmidt sum against the closed form.
pub fn closed_form_equivalence() -> CriterionResult {
    timed(1, "closed-form oracle equivalence", || {
        let start = Instant::now();
        let mut worst_small = 0.0_f64;
        let mut worst_large = 0.0_f64;
        for n_s in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0] {
            let state = tmsv(n_s, 60)?;
            for n_b in N_B_GRID {
                let h = qfi_schmidt_value(&state, n_b)?;
                let rel = ((h - qfi_gaussian_closed(n_s, n_b)) / qfi_gaussian_closed(n_s, n_b)).abs();
                if n_s == 5.0 {
                    worst_large = worst_large.max(rel);
                } else {
                    worst_small = worst_small.max(rel);
                }
            }
        }
        let secs = start.elapsed().as_secs_f64();
        Ok(Outcome {
            passed: worst_small < 1e-8 && worst_large < 1e-6 && secs < 1.0,
            measured: format!("max rel err {worst_small:.2e} (N_S<=2), {worst_large:.2e} (N_S=5); {secs:.3} s"),
            expected: "< 1e-8 (N_S<=2), < 1e-6 (N_S=5); < 1 s".into(),
        })
    })
}

pub fn coherent_degeneracy() -> CriterionResult {
    timed(2, "maximally entangled / coherent degeneracy", || {
        let mut worst = 0.0_f64;
        for d in 1..=20 {
            let state = max_entangled_fock(d)?;
            let n_s = (d as f64 - 1.0) / 2.0;
            for n_b in N_B_GRID {
                let h = qfi_schmidt_value(&state, n_b)?;
                worst = worst.max((h - 4.0 * n_s / (1.0 + 2.0 * n_b)).abs());
            }
        }
        Ok(Outcome {
            passed: worst <= 1e-10,
            measured: format!("max |H - 4N_S/(1+2N_B)| = {worst:.2e} over d<=20"),
            expected: "<= 1e-10".into(),
        })
    })
}

fn all_families() -> Vec<StateSpec> {
    let mut f = vec![
        StateSpec::Tmsv,
        StateSpec::Coherent { phi: 0.0 },
        StateSpec::Cat { d: 2 },
        StateSpec::Cat { d: 3 },
        StateSpec::Cat { d: 4 },
        StateSpec::Cat { d: 8 },
        StateSpec::CatInfinite,
    ];
    f.extend((2..=20).step_by(3).map(|d| StateSpec::MaxEntangledFock { d }));
    f
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

pub fn gain_cap() -> CriterionResult {
    timed(3, "gain cap", || {
        let policy = CutoffPolicy::Fixed { cutoff: 96 };
        let mut worst = 0.0_f64;
        let mut count = 0;
        for spec in all_families() {
            let grid = if spec.uses_cutoff() { log_grid(1e-4, 5.0, 16) } else { vec![1.0] };
            for &n_s in &grid {
                for n_b in N_B_GRID {
                    let rep = qfi_for_spec(spec, n_s, n_b, policy)?;
                    if let Some(g) = rep.gain {
                        worst = worst.max(g);
                        count += 1;
                    }
                }
            }
        }
        let edge = qfi_for_spec(StateSpec::Tmsv, 1e-4, 50.0, CutoffPolicy::default())?.gain.unwrap_or(f64::NAN);
        let want = 101.0 / 51.0;
        Ok(Outcome {
            passed: worst <= 2.0 + 1e-9 && (edge - want).abs() < 1e-3,
            measured: format!("max gain {worst:.9} over {count} points; tmsv edge gain {edge:.6}"),
            expected: format!("<= 2 + 1e-9; edge {want:.6} +- 1e-3"),
        })
    })
}

pub fn cat_limits() -> CriterionResult {
    timed(4, "cat-state limits", || {
        let mut msgs = Vec::new();
        let mut passed = true;
        let n_s = 1e-3;
        let target = 4.0 * n_s / 51.0;
        let mut worst = 0.0_f64;
        let mut monotone = true;
        for d in [2, 3, 4] {
            let conv = converge_cutoff(|k| qfi_cat_direct(n_s, d, 50.0, k), 16, 1e-8, 1 << 16)?;
            worst = worst.max(((conv.value - target) / target).abs());
            monotone &= conv.monotone;
        }
        passed &= worst < 0.01;
        msgs.push(format!("low-N_S rel dev {worst:.2e}"));

        let mut agree = 0.0_f64;
        for n_s in [0.5, 1.0] {
            let conv = converge_cutoff(|k| qfi_cat_direct(n_s, 2, 50.0, k), 16, 1e-10, 1 << 16)?;
            let schmidt = qfi_schmidt_value(&cat_state(n_s, 2, 60)?, 50.0)?;
            agree = agree.max((conv.value - schmidt).abs());
        }
        passed &= agree < 1e-6;
        msgs.push(format!("direct vs Schmidt {agree:.2e}"));

        let mut prev = 0.0;
        for k in [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048] {
            let h = qfi_cat_direct(1.0, 2, 50.0, k)?;
            monotone &= h >= prev;
            prev = h;
        }
        passed &= monotone;
        msgs.push(format!("monotone in cutoff: {monotone}"));
        Ok(Outcome {
            passed,
            measured: msgs.join(", "),
            expected: "< 1%, < 1e-6, monotone".into(),
        })
    })
}

pub fn figure_ordering() -> CriterionResult {
    timed(5, "gain ordering at N_B = 50", || {
        let policy = CutoffPolicy::default();
        let slack = 1e-9;
        let mut violations = Vec::new();
        let mut rows = Vec::new();
        for n_s in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let gain = |spec| -> Result<f64> {
                qfi_for_spec(spec, n_s, 50.0, policy)?.gain.ok_or(Error::ZeroInformation)
            };
            let (c2, ci, t) = (gain(StateSpec::Cat { d: 2 })?, gain(StateSpec::CatInfinite)?, gain(StateSpec::Tmsv)?);
            if !(c2 <= ci + slack && ci <= t + slack && t <= 2.0 + slack) {
                violations.push(n_s);
            }
            rows.push(format!("{n_s}: {c2:.4}/{ci:.4}/{t:.4}"));
        }
        Ok(Outcome {
            passed: violations.is_empty(),
            measured: format!("cat2/catinf/tmsv gains {}", rows.join(" ")),
            expected: "cat2 <= catinf <= tmsv <= 2".into(),
        })
    })
}

fn desk_states(n_s: f64) -> Result<Vec<SchmidtState>> {
    Ok(vec![tmsv(n_s, 18)?, coherent(n_s, 0.0, 18)?, cat_state(n_s, 2, 18)?])
}

pub fn sld_identities() -> CriterionResult {
    timed(6, "SLD identity suite", || {
        let (n_b, d_b) = (1.0, 40);
        let mut worst = [0.0_f64; 4];
        for state in desk_states(0.3)? {
            let h = qfi_schmidt_value(&state, n_b)?;
            let model = local_model(&state, n_b, d_b)?;
            let l = crate::estimator_lab::sld_operator(&state, n_b, d_b)?;
            worst[0] = worst[0].max(model.rho0.expectation(&l)?.abs());
            worst[1] = worst[1].max((trace_of_product(l.data(), model.drho.data()).re - h).abs());
            let obs = sld_observable(&state, n_b, d_b)?;
            let o2 = obs.operator().matmul(obs.operator())?;
            let var = model.rho0.expectation(&o2)? - obs.expectation(&model.rho0)?.powi(2);
            worst[2] = worst[2].max((var - 1.0 / h).abs());
            let fit = unbiasedness_check(&state, n_b, &obs, &ETA_GRID, d_b, 1e-6)?;
            worst[3] = worst[3].max((fit.slope - 1.0).abs());
        }
        Ok(Outcome {
            passed: worst[0] <= 1e-9 && worst[1] <= 1e-8 && worst[2] <= 1e-6 && worst[3] <= 1e-3,
            measured: format!(
                "|Tr(rho0 L)| {:.1e}, |Tr(L drho) - H| {:.1e}, |Var - 1/H| {:.1e}, |slope - 1| {:.1e}",
                worst[0], worst[1], worst[2], worst[3]
            ),
            expected: "<= 1e-9, 1e-8, 1e-6, 1e-3".into(),
        })
    })
}

pub fn moment_machinery() -> CriterionResult {
    timed(7, "moment / MGF machinery", || {
        let (n_s, n_b, d_b) = (0.3, 1.0, 40);
        let mut odd = 0.0_f64;
        let mut bounds_ok = true;
        for state in desk_states(n_s)? {
            let rep = moment_bound_check(&state, n_b, 2, d_b)?;
            odd = odd.max(rep.f(1).abs()).max(rep.f(3).abs());
            bounds_ok &= rep.all_pass();
        }
        let state = tmsv(n_s, 40)?;
        let rep = moment_bound_check(&state, n_b, 2, d_b)?;
        let c_dev = (rep.c - (1.0 + n_s)).abs();
        let obs = sld_observable(&state, n_b, d_b)?;
        let dist = outcome_distribution(&received_state(&state, n_b, 0.0, d_b, 1e-8)?, &obs)?;
        let t = 0.1 * rep.mgf_radius();
        let mgf = mgf_empirical(&dist, &[t], Some(rep.mgf_radius()));
        let ratio = mgf.values[0].ln() / (t * t / (2.0 * rep.h));
        Ok(Outcome {
            passed: odd <= 1e-10 && bounds_ok && c_dev <= 1e-6 && (ratio - 1.0).abs() <= 0.02,
            measured: format!(
                "max |F1|,|F3| {odd:.1e}; F2,F4 bounds hold: {bounds_ok}; |C - (1+N_S)| {c_dev:.1e}; log M0 ratio {ratio:.5}"
            ),
            expected: "<= 1e-10; true; <= 1e-6; 1 +- 0.02".into(),
        })
    })
}

/// Configuration shared by the Monte Carlo criteria.
pub fn exponent_config(family: StateSpec) -> ProtocolConfig {
    ProtocolConfig {
        family,
        n_s: 0.5,
        n_b: 1.0,
        eta: 0.1,
        m: vec![200, 500, 1000, 1500, 2000],
        xi: (1..=9).map(|k| k as f64 / 10.0).collect(),
        pi0: 0.5,
        pi1: 0.5,
        trials: 100_000,
        max_trials: Some(1_600_000),
        min_events: 50,
        seed: 20_240_601,
        cutoffs: Cutoffs::default(),
        fit: FitMethod::GaussianTail,
    }
}

/// Coherent and squeezed-vacuum runs used by criteria 8 and 9.
pub fn exponent_runs() -> Result<(ErrorReport, ErrorReport)> {
    let run = |spec| -> Result<ErrorReport> {
        let cfg = exponent_config(spec);
        run_with_model(&cfg, &prepare_model(&cfg)?)
    };
    Ok((run(StateSpec::Coherent { phi: 0.0 })?, run(StateSpec::Tmsv)?))
}

pub fn monte_carlo_exponents(runs: &Result<(ErrorReport, ErrorReport)>, seconds: f64) -> CriterionResult {
    let mut res = timed(8, "Monte Carlo exponents", || {
        let (coh, sq) = runs.as_ref().map_err(Clone::clone)?;
        let unresolved = || Error::Unresolved("type-I exponent fit unresolved".into());
        let fc = coh.fit_i.as_ref().ok_or_else(unresolved)?;
        let fq = sq.fit_i.as_ref().ok_or_else(unresolved)?;
        let predicted = 0.01 * qfi_bounds(0.5, 1.0).h_c / 8.0;
        let rel = (fc.rate - predicted).abs() / predicted;
        let gain = gain_summary(fq, fc)?;
        let want = qfi_gaussian_closed(0.5, 1.0) / qfi_bounds(0.5, 1.0).h_c;
        let ratio_dev = (gain.ratio - want).abs() / want;
        let lower = gain.ratio - crate::illumination_sim::Z95 * gain.ratio_stderr;
        let trials_ok = coh.trials >= 100_000 && sq.trials >= 100_000;
        Ok(Outcome {
            passed: rel <= 0.15 && ratio_dev <= 0.20 && lower > 1.0 && trials_ok && seconds < 600.0,
            measured: format!(
                "coherent rate {:.4e} +- {:.1e} ({:.1}% off); ratio {:.4} +- {:.4} (95% lower {:.4}); trials {}/{}; {seconds:.1} s",
                fc.rate,
                fc.stderr,
                100.0 * rel,
                gain.ratio,
                gain.ratio_stderr,
                lower,
                coh.trials,
                sq.trials
            ),
            expected: format!("rate {predicted:.4e} +- 15%; ratio {want:.4} +- 20%, > 1 at 95%; >= 1e5 trials; < 600 s"),
        })
    });
    res.seconds = seconds;
    res
}

fn xi_argmax_ok(rep: &ErrorReport) -> (bool, String) {
    let at_half = rep.xi_rates.iter().find(|r| (r.xi - 0.5).abs() < 1e-12);
    let best = rep.xi_rates.iter().find(|r| r.max_min);
    match (at_half, best) {
        (Some(h), Some(b)) => {
            let (hv, hs) = (h.min_rate.unwrap_or(0.0), h.min_rate_stderr.unwrap_or(0.0));
            let (bv, bs) = (b.min_rate.unwrap_or(0.0), b.min_rate_stderr.unwrap_or(0.0));
            // either 1/2 is the maximiser, or indistinguishable from it
            let ok = b.xi == h.xi || bv - hv <= crate::illumination_sim::Z95 * (hs * hs + bs * bs).sqrt();
            (ok, format!("argmax xi {} (min rate {:.3e} vs {:.3e} at 1/2)", b.xi, bv, hv))
        }
        _ => (false, "unresolved".into()),
    }
}

pub fn xi_optimality(runs: &Result<(ErrorReport, ErrorReport)>) -> CriterionResult {
    timed(9, "xi optimality", || {
        let (coh, sq) = runs.as_ref().map_err(Clone::clone)?;
        let (a, ma) = xi_argmax_ok(coh);
        let (b, mb) = xi_argmax_ok(sq);
        Ok(Outcome {
            passed: a && b,
            measured: format!("coherent {ma}; tmsv {mb}"),
            expected: "max-min rate at xi = 0.5 (CI-aware)".into(),
        })
    })
}

/// A small protocol used for the determinism check.
pub fn determinism_config() -> ProtocolConfig {
    ProtocolConfig {
        family: StateSpec::Tmsv,
        n_s: 0.5,
        n_b: 1.0,
        eta: 0.1,
        m: vec![50, 100, 200],
        xi: vec![0.3, 0.5, 0.7],
        pi0: 0.5,
        pi1: 0.5,
        trials: 5000,
        max_trials: Some(5000),
        min_events: 50,
        seed: 99,
        cutoffs: Cutoffs { signal: Some(16), bath: Some(24) },
        fit: FitMethod::GaussianTail,
    }
}

pub fn simulation_csv(cfg: &ProtocolConfig) -> Result<Vec<u8>> {
    let rep = run_with_model(cfg, &prepare_model(cfg)?)?;
    let mut buf = Vec::new();
    write_simulation_csv(&mut buf, &[rep])?;
    Ok(buf)
}

pub fn determinism() -> CriterionResult {
    timed(10, "determinism", || {
        let cfg = determinism_config();
        let with_threads = |n: usize| -> Result<Vec<u8>> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Numerical(e.to_string()))?;
            pool.install(|| simulation_csv(&cfg))
        };
        let a = with_threads(1)?;
        let b = with_threads(1)?;
        let many = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(4);
        let c = with_threads(many)?;
        Ok(Outcome {
            passed: a == b && a == c,
            measured: format!("repeat identical: {}; 1 vs {many} threads identical: {}", a == b, a == c),
            expected: "byte-identical CSV".into(),
        })
    })
}

/// Runs a suite. Criteria are independent; a failing one does not stop the rest.
pub fn run_suite(suite: Suite) -> ValidationSummary {
    let mut results = vec![
        closed_form_equivalence(),
        coherent_degeneracy(),
        gain_cap(),
        cat_limits(),
        figure_ordering(),
        sld_identities(),
        moment_machinery(),
    ];
    if suite == Suite::Full {
        let start = Instant::now();
        let runs = exponent_runs();
        let secs = start.elapsed().as_secs_f64();
        results.push(monte_carlo_exponents(&runs, secs));
        results.push(xi_optimality(&runs));
    }
    results.push(determinism());
    ValidationSummary { suite, results }
}
