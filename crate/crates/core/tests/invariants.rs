mod common;

fn assert_suite(result: Result<(), String>) {
    if let Err(e) = result {
        panic!("{e}");
    }
}

#[test]
fn spectral_round_trip_and_potential_recovery() {
    assert_suite(common::spectral_suite());
}

#[test]
fn bracket_antisymmetry_and_leibniz() {
    assert_suite(common::bracket_suite());
}

#[test]
fn flow_group_law() {
    assert_suite(common::group_law_suite());
}

#[test]
fn integrator_is_symplectic() {
    assert_suite(common::symplecticity_suite());
}

#[test]
fn hamilton_jacobi_residual() {
    assert_suite(common::hamilton_jacobi_suite());
}

#[test]
fn mixed_partials_converge_at_second_order() {
    assert_suite(common::mixed_partial_suite());
}
