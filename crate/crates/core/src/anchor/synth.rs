use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AnchorSet, AttributeLayout};

/// Parameters of the synthetic anchor generator. Attributes are smooth
/// functions of location plus noise, so spatial context is informative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
    pub seed: u64,
    /// Edge length of the scene cube.
    pub scene_extent: f32,
    /// Gaussian blobs the locations cluster around.
    pub clusters: usize,
    /// Fraction of points drawn uniformly instead of from a blob.
    pub uniform_fraction: f64,
    /// Number of plane waves composing each smooth field.
    pub waves: usize,
    /// Spatial frequency range of the waves, in cycles per scene.
    pub frequency: (f64, f64),
    /// Standard deviation of the smooth feature component.
    pub feature_signal_std: f64,
    /// Standard deviation of the per-anchor latent shared across channels.
    pub feature_latent_std: f64,
    pub feature_noise_std: f64,
    /// Offsets drawn from the near-zero spike rather than the anchor's spread.
    pub offset_impulse_fraction: f64,
    /// Anchors whose offsets are all near zero.
    pub dead_anchor_fraction: f64,
    pub offset_impulse_std: f64,
    /// Log-uniform range of per-anchor offset spread.
    pub offset_scale: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 1000,
            feature_dim: 50,
            offsets_per_anchor: 10,
            seed: 0,
            scene_extent: 10.0,
            clusters: 8,
            uniform_fraction: 0.3,
            waves: 6,
            frequency: (0.5, 2.0),
            feature_signal_std: 2.5,
            feature_latent_std: 1.0,
            feature_noise_std: 0.3,
            offset_impulse_fraction: 0.4,
            dead_anchor_fraction: 0.15,
            offset_impulse_std: 0.005,
            offset_scale: (0.05, 1.0),
        }
    }
}

struct Field {
    dirs: Vec<[f64; 3]>,
    phases: Vec<f64>,
    /// `channels × waves` mixing weights.
    mix: Vec<f64>,
    channels: usize,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, channels: usize, cfg: &SyntheticConfig, std: f64) -> Self {
        let waves = cfg.waves.max(1);
        let mut dirs = Vec::with_capacity(waves);
        for _ in 0..waves {
            let v: [f64; 3] = [0, 1, 2].map(|_| rng.sample(StandardNormal));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            let f = rng.gen_range(cfg.frequency.0..=cfg.frequency.1);
            dirs.push(v.map(|c| 2.0 * PI * f * c / norm));
        }
        let phases = (0..waves).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        // A sinusoid with random phase has variance 1/2.
        let w = std * (2.0 / waves as f64).sqrt();
        let mix = (0..channels * waves)
            .map(|_| w * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Field {
            dirs,
            phases,
            mix,
            channels,
        }
    }

    fn eval(&self, u: [f64; 3], out: &mut [f64]) {
        let waves = self.dirs.len();
        let basis: Vec<f64> = (0..waves)
            .map(|m| {
                let d = self.dirs[m];
                (d[0] * u[0] + d[1] * u[1] + d[2] * u[2] + self.phases[m]).sin()
            })
            .collect();
        for (j, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = (0..waves).map(|m| self.mix[j * waves + m] * basis[m]).sum();
        }
    }
}

/// Spatially correlated anchor cloud. Identical configs give identical sets.
pub fn generate(cfg: &SyntheticConfig) -> AnchorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let da = cfg.feature_dim;
    let k = cfg.offsets_per_anchor;
    let ext = cfg.scene_extent as f64;

    let centers: Vec<([f64; 3], f64)> = (0..cfg.clusters.max(1))
        .map(|_| {
            let c = [0, 1, 2].map(|_| rng.gen_range(0.1..0.9));
            (c, rng.gen_range(0.03..0.12))
        })
        .collect();
    let feat_field = Field::new(&mut rng, da, cfg, cfg.feature_signal_std);
    let scale_field = Field::new(&mut rng, 6, cfg, 1.0);
    let spread_field = Field::new(&mut rng, 1, cfg, 1.0);
    let loadings: Vec<f64> = (0..da)
        .map(|_| cfg.feature_latent_std * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut set = AnchorSet {
        layout: AttributeLayout {
            feature_dim: da,
            offsets_per_anchor: k,
        },
        locations: Vec::with_capacity(n),
        features: Vec::with_capacity(n * da),
        scalings: Vec::with_capacity(n * 6),
        offsets: Vec::with_capacity(n * 3 * k),
    };
    let mut fbuf = vec![0.0; da];
    let mut sbuf = [0.0; 6];
    let mut spread = [0.0; 1];
    let (lo, hi) = (cfg.offset_scale.0.ln(), cfg.offset_scale.1.ln());
    for _ in 0..n {
        let u: [f64; 3] = if rng.gen_bool(cfg.uniform_fraction.clamp(0.0, 1.0)) {
            [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))
        } else {
            let (c, s) = centers[rng.gen_range(0..centers.len())];
            [0, 1, 2].map(|a| (c[a] + s * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
        };
        set.locations.push(u.map(|c| (c * ext) as f32));

        feat_field.eval(u, &mut fbuf);
        let z: f64 = rng.sample(StandardNormal);
        for j in 0..da {
            let e: f64 = rng.sample(StandardNormal);
            set.features
                .push((fbuf[j] + loadings[j] * z + cfg.feature_noise_std * e) as f32);
        }

        scale_field.eval(u, &mut sbuf);
        for s in sbuf {
            let e: f64 = rng.sample(StandardNormal);
            let v = 1.0 / (1.0 + (-(-3.0 + 0.6 * s + 0.15 * e)).exp());
            set.scalings.push((v as f32).clamp(1e-6, 1.0 - 1e-6));
        }

        spread_field.eval(u, &mut spread);
        let t =
            (0.5 + 0.35 * spread[0] + 0.1 * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        let scale = (lo + t * (hi - lo)).exp();
        let dead = rng.gen_bool(cfg.dead_anchor_fraction.clamp(0.0, 1.0));
        for _ in 0..k {
            let spike = dead || rng.gen_bool(cfg.offset_impulse_fraction.clamp(0.0, 1.0));
            let s = if spike { cfg.offset_impulse_std } else { scale };
            for _ in 0..3 {
                set.offsets
                    .push((s * rng.sample::<f64, _>(StandardNormal)) as f32);
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SyntheticConfig {
            n: 500,
            seed: 4,
            ..SyntheticConfig::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        a.validate().unwrap();
        a.check_chunks(5).unwrap();
        let other = generate(&SyntheticConfig { seed: 5, ..cfg });
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn features_are_spatially_correlated() {
        let a = generate(&SyntheticConfig {
            n: 2000,
            seed: 1,
            ..SyntheticConfig::default()
        });
        let da = a.layout.feature_dim;
        // Mean squared difference between nearby pairs vs random pairs.
        let (mut near, mut far, mut nn, mut nf) = (0.0f64, 0.0f64, 0usize, 0usize);
        for i in 0..400 {
            for j in (i + 1)..2000 {
                let d: f32 = (0..3)
                    .map(|x| (a.locations[i][x] - a.locations[j][x]).powi(2))
                    .sum();
                let diff: f64 = (0..da)
                    .map(|c| (a.features[i * da + c] - a.features[j * da + c]) as f64)
                    .map(|x| x * x)
                    .sum();
                if d < 0.1 {
                    near += diff;
                    nn += 1;
                } else if d > 9.0 && nf < 20000 {
                    far += diff;
                    nf += 1;
                }
            }
        }
        assert!(nn > 50 && nf > 1000);
        assert!(near / (nn as f64) < 0.6 * far / (nf as f64));
    }

    #[test]
    fn offsets_have_impulse_at_zero() {
        let a = generate(&SyntheticConfig {
            n: 1000,
            seed: 2,
            ..SyntheticConfig::default()
        });
        let tiny = a.offsets.iter().filter(|v| v.abs() < 0.02).count() as f64;
        assert!(tiny / a.offsets.len() as f64 > 0.3);
    }
}
