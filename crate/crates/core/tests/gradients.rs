mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn mce_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let e = gradcheck_mce(seed);
        assert!(e < TOL, "seed {seed}: rel err {e}");
    }
}

#[test]
fn mixup_gradient_matches_finite_differences() {
    let e = gradcheck_mixup(3);
    assert!(e < TOL, "rel err {e}");
}

#[test]
fn adversarial_gradient_matches_finite_differences() {
    let e = gradcheck_adversarial(5);
    assert!(e < TOL, "rel err {e}");
}

#[test]
fn discriminator_gradient_matches_finite_differences() {
    let e = gradcheck_discriminator(7);
    assert!(e < TOL, "rel err {e}");
}
