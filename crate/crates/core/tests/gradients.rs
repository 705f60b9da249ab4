mod common;

use common::{gated_layer_instance, gated_model_instance, primitive_cases};

const TOL: f64 = 1e-6;
const INSTANCES: u64 = 20;

#[test]
fn every_primitive_matches_central_differences() {
    for case in primitive_cases() {
        for seed in 0..INSTANCES {
            let e = (case.instance)(seed);
            assert!(e <= TOL, "{} instance {seed}: relative error {e:e}", case.name);
        }
    }
}

#[test]
fn gated_layer_matches_central_differences() {
    for seed in 0..INSTANCES {
        let e = gated_layer_instance(seed);
        assert!(e <= TOL, "instance {seed}: relative error {e:e}");
    }
}

#[test]
fn gated_model_matches_central_differences() {
    for seed in 0..INSTANCES {
        let e = gated_model_instance(seed);
        assert!(e <= TOL, "instance {seed}: relative error {e:e}");
    }
}

#[test]
fn relative_error_is_scale_free() {
    let g = [1.0, -2.0, 3.0];
    let h: Vec<f64> = g.iter().map(|x| x * (1.0 + 1e-9)).collect();
    let e = common::relative_error(&g, &h);
    assert!(e < 2e-9 && e > 0.0);
    let big: Vec<f64> = g.iter().map(|x| x * 1e6).collect();
    let big_h: Vec<f64> = h.iter().map(|x| x * 1e6).collect();
    assert!((common::relative_error(&big, &big_h) - e).abs() < 1e-15);
}
