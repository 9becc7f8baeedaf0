#![allow(dead_code)]

pub mod grad;

use hacpp::anchor::{generate, AnchorSet, SyntheticConfig};
use hacpp::hash_grid::HashGridConfig;
use hacpp::pipeline::{train, TrainConfig, TrainOutcome};

/// Default grid levels with smaller tables, so short runs stay fast.
pub fn reduced_grid() -> HashGridConfig {
    HashGridConfig {
        table_log2_3d: 10,
        table_log2_2d: 12,
        ..Default::default()
    }
}

pub fn short_config(iterations: usize, lambda: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default().with_iterations(iterations);
    cfg.lambda = lambda;
    cfg.seed = seed;
    cfg.grid = reduced_grid();
    cfg
}

pub fn cloud(n: usize, seed: u64) -> AnchorSet {
    generate(&SyntheticConfig {
        n,
        seed,
        ..Default::default()
    })
}

pub fn fit(anchors: &AnchorSet, cfg: &TrainConfig) -> TrainOutcome<f32> {
    train::<f32>(anchors, cfg).expect("training succeeds")
}
