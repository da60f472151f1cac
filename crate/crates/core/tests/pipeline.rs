//! State -> QFI -> estimator -> outcome statistics, through the public API only.

use proptest::prelude::*;
use qi_core::estimator_lab::{outcome_distribution, received_state, sld_observable};
use qi_core::qfi_engine::{qfi_bounds, qfi_gaussian_closed, qfi_schmidt_value};
use qi_core::state_models::{coherent, tmsv};

#[test]
fn estimator_statistics_match_the_information() {
    let (n_s, n_b, d_b) = (0.5, 1.0, 40);
    let state = tmsv(n_s, 14).unwrap();
    let h = qfi_schmidt_value(&state, n_b).unwrap();
    let obs = sld_observable(&state, n_b, d_b).unwrap();
    let info = obs.sld_information().unwrap();
    assert!((info - h).abs() < 1e-8 * h, "{info} vs {h}");

    let at_rest = outcome_distribution(&received_state(&state, n_b, 0.0, d_b, 1e-6).unwrap(), &obs).unwrap();
    assert!(at_rest.mean().abs() < 1e-9);
    assert!((at_rest.variance() - 1.0 / h).abs() < 1e-6 / h);

    // locally unbiased: the mean tracks eta to first order
    let eta = 1e-3;
    let lit = outcome_distribution(&received_state(&state, n_b, eta, d_b, 1e-6).unwrap(), &obs).unwrap();
    assert!((lit.mean() - eta).abs() < 1e-2 * eta, "{}", lit.mean());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn squeezed_vacuum_sits_between_classical_and_quantum_bounds(n_s in 0.01f64..2.0, n_b in 0.01f64..100.0) {
        let h = qfi_schmidt_value(&tmsv(n_s, 200).unwrap(), n_b).unwrap();
        let b = qfi_bounds(n_s, n_b);
        prop_assert!((h - qfi_gaussian_closed(n_s, n_b)).abs() < 1e-8 * h);
        prop_assert!(h >= b.h_c * (1.0 - 1e-12));
        prop_assert!(h <= b.h_q() * (1.0 + 1e-12));
        prop_assert!(h / b.h_c <= 2.0 + 1e-9);
    }

    #[test]
    fn coherent_transmitter_is_classical(n_s in 0.01f64..4.0, n_b in 0.0f64..100.0, phi in 0.0f64..6.28) {
        let h = qfi_schmidt_value(&coherent(n_s, phi, 64).unwrap(), n_b).unwrap();
        let h_c = qfi_bounds(n_s, n_b).h_c;
        prop_assert!((h - h_c).abs() < 1e-6 * h_c);
    }
}
