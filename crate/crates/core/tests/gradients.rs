mod common;

use common::grad;

fn check(name: &str, path: fn(u64) -> grad::Check) {
    if let Err(e) = grad::run_path(name, path) {
        panic!("{e}");
    }
}

#[test]
fn dense_layers() {
    check("dense", grad::dense_layers);
}

#[test]
fn step_size() {
    check("step size", grad::step_size);
}

#[test]
fn noise_quantization() {
    check("noise quantization", grad::noise_quantization);
}

#[test]
fn straight_through_masks() {
    check("masks", grad::straight_through_masks);
}

#[test]
fn hash_binarization() {
    check("hash binarization", grad::hash_binarization);
}

#[test]
fn rate_with_masks_and_mixture() {
    check("rate", grad::rate_with_masks_and_mixture);
}

#[test]
fn hash_rate() {
    check("hash rate", grad::hash_rate);
}

#[test]
fn full_training_loss() {
    check("full loss", grad::full_training_loss);
}
