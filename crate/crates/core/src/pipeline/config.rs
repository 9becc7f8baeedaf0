use serde::{Deserialize, Serialize};

use crate::entropy::ContextConfig;
use crate::hash_grid::HashGridConfig;
use crate::masking::DEFAULT_THRESHOLD;
use crate::quantizer::QuantSpec;
use crate::tensor::AdamConfig;

use super::PipelineError;

/// Weights of the surrogate distortion per attribute group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionWeights {
    pub feature: f64,
    pub scaling: f64,
    pub offset: f64,
}

impl Default for DistortionWeights {
    fn default() -> Self {
        DistortionWeights {
            feature: 0.01,
            scaling: 10.0,
            offset: 0.25,
        }
    }
}

impl DistortionWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.feature, self.scaling, self.offset]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Distortion only, no quantization noise.
    Warmup,
    /// Noise at the base step, no context networks.
    Noise,
    /// Everything.
    Full,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Warmup => 1,
            Phase::Noise => 2,
            Phase::Full => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// First iteration of the noise phase.
    pub phase1_end: usize,
    /// First iteration of the full phase.
    pub phase2_end: usize,
    pub lambda: f64,
    pub sample_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lr_context: f64,
    pub lr_grid: f64,
    pub lr_mask: f64,
    /// Learning rates decay geometrically to this fraction by the last step.
    pub lr_final_ratio: f64,
    pub distortion: DistortionWeights,
    pub grid: HashGridConfig,
    pub context: ContextConfig,
    pub quant: QuantSpec,
    pub grid_init: f64,
    pub mask_init: f64,
    pub mask_threshold: f64,
    pub bounds_margin: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            phase1_end: 3_000,
            phase2_end: 10_000,
            lambda: 1e-3,
            sample_fraction: 0.05,
            seed: 0,
            adam: AdamConfig::default(),
            lr_context: 2e-3,
            lr_grid: 5e-3,
            lr_mask: 0.1,
            lr_final_ratio: 0.05,
            distortion: DistortionWeights::default(),
            grid: HashGridConfig::default(),
            context: ContextConfig::default(),
            quant: QuantSpec::default(),
            grid_init: 1e-3,
            mask_init: 0.0,
            mask_threshold: DEFAULT_THRESHOLD,
            bounds_margin: 0.01,
        }
    }
}

impl TrainConfig {
    /// Same schedule shape compressed to `iterations` steps.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.phase1_end = (iterations / 10).max(1);
        self.phase2_end = (iterations / 3).max(self.phase1_end + 1);
        self.iterations = iterations.max(self.phase2_end + 1);
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0 < self.phase1_end
            && self.phase1_end < self.phase2_end
            && self.phase2_end < self.iterations)
        {
            return bad(format!(
                "phase boundaries must satisfy 0 < {} < {} < {}",
                self.phase1_end, self.phase2_end, self.iterations
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!(
                "sample fraction must be in (0, 1], got {}",
                self.sample_fraction
            ));
        }
        if self.quant.q0.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
            return bad("base steps must be positive".into());
        }
        if self.context.chunks == 0 {
            return bad("chunk count must be positive".into());
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask threshold must be in (0, 1)".into());
        }
        if !(self.bounds_margin > 0.0) {
            return bad("bounds margin must be positive".into());
        }
        self.grid
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn phase(&self, iteration: usize) -> Phase {
        if iteration < self.phase1_end {
            Phase::Warmup
        } else if iteration < self.phase2_end {
            Phase::Noise
        } else {
            Phase::Full
        }
    }

    /// Anchors drawn per step out of `n`.
    pub fn batch_size(&self, n: usize) -> usize {
        ((self.sample_fraction * n as f64).round() as usize).clamp(1, n.max(1))
    }

    /// Learning-rate multiplier at `iteration`.
    pub fn lr_decay(&self, iteration: usize) -> f64 {
        let t = iteration as f64 / self.iterations.max(1) as f64;
        self.lr_final_ratio.powf(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.phase(0), Phase::Warmup);
        assert_eq!(c.phase(3_000), Phase::Noise);
        assert_eq!(c.phase(10_000), Phase::Full);
        assert_eq!(c.batch_size(10_000), 500);
        assert_eq!(c.batch_size(3), 1);
    }

    #[test]
    fn rejects_bad_values() {
        let c = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            phase2_end: 2_000,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            sample_fraction: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn shortened_schedule_keeps_order() {
        for n in [3, 10, 100, 2_000] {
            let c = TrainConfig::default().with_iterations(n);
            c.validate().unwrap();
        }
    }
}
