//! Analytic gradients against central finite differences, in float64, on
//! micro networks.

mod common;

use common::{ssl_case, supervised_case, target_gradient_max};
use gazekit::losses::WeightingConfig;

#[test]
fn mae_gradient_matches_finite_differences() {
    let e = supervised_case(WeightingConfig::default(), false);
    assert!(e < 1e-5, "max relative error {e:e}");
}

#[test]
fn weighted_loss_gradient_with_weight_in_graph() {
    let cfg = WeightingConfig { omega_in_graph: true, omega_max: 1e6, ..WeightingConfig::default() };
    let e = supervised_case(cfg, true);
    assert!(e < 1e-5, "max relative error {e:e}");
}

#[test]
fn ssl_loss_gradient_on_micro_network() {
    let e = ssl_case();
    assert!(e < 1e-5, "max relative error {e:e}");
}

#[test]
fn target_parameters_receive_no_gradient() {
    let (worst, online) = target_gradient_max();
    assert_eq!(worst, 0.0);
    assert!(online);
}
