mod common;

#[test]
fn event_probability_matches_enumeration() {
    let summary = common::check_event_probability_oracle().unwrap();
    println!("{summary}");
}

#[test]
fn likelihood_loss_matches_finite_differences() {
    common::check_ml_loss_gradient().unwrap();
}

#[test]
fn surrogate_matches_smoothed_spike() {
    common::check_surrogate_gradient().unwrap();
}

#[test]
fn conv_and_pool_backward_match_finite_differences() {
    common::check_conv_pool_gradients().unwrap();
}

#[test]
fn two_layer_bptt_matches_scalar_oracle() {
    common::check_end_to_end_gradients().unwrap();
}

#[test]
fn de_best_objective_never_increases() {
    let stats = common::de_sphere_stats();
    assert!(stats.non_monotone.is_empty(), "{:?}", stats.non_monotone);
}

#[test]
fn de_usually_reaches_sphere_minimum() {
    // eight members in two dimensions occasionally stagnate on one axis
    let stats = common::de_sphere_stats();
    assert!(stats.converged.len() >= 15, "converged on {:?}", stats.converged);
    assert!(stats.slowest <= 50);
}
