//! Mixed 3D/2D multiresolution hash grid with binarized entries.
//!
//! 3D levels use trilinear interpolation of 8 hashed corners. Each 2D level
//! owns three tables, one per axis-aligned plane (xy, xz, yz); its feature is
//! the average of the three bilinear lookups. Level features are
//! concatenated, 3D levels first, each in ascending resolution.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{GatherPlan, ParamId, ParamStore, Tape, Tensor, Var};

pub const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid resolutions must be strictly increasing: {0:?}")]
    Resolutions(Vec<u32>),
    #[error("table size 2^{0} is out of range")]
    TableSize(u32),
    #[error("feature dim must be positive")]
    FeatureDim,
    #[error("grid payload holds {actual} bits, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels_3d: usize,
    pub min_res_3d: u32,
    pub max_res_3d: u32,
    pub table_log2_3d: u32,
    pub levels_2d: usize,
    pub min_res_2d: u32,
    pub max_res_2d: u32,
    pub table_log2_2d: u32,
    pub feature_dim: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels_3d: 12,
            min_res_3d: 16,
            max_res_3d: 512,
            table_log2_3d: 13,
            levels_2d: 4,
            min_res_2d: 128,
            max_res_2d: 1024,
            table_log2_2d: 15,
            feature_dim: 4,
        }
    }
}

/// `count` resolutions on a geometric ladder from `lo` to `hi`, floored.
pub fn resolution_ladder(count: usize, lo: u32, hi: u32) -> Vec<u32> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let growth = (hi as f64 / lo as f64).powf(1.0 / (count - 1) as f64);
            (0..count)
                .map(|l| {
                    if l == count - 1 {
                        hi
                    } else {
                        (lo as f64 * growth.powi(l as i32) + 1e-9).floor() as u32
                    }
                })
                .collect()
        }
    }
}

impl HashGridConfig {
    pub fn resolutions_3d(&self) -> Vec<u32> {
        resolution_ladder(self.levels_3d, self.min_res_3d, self.max_res_3d)
    }

    pub fn resolutions_2d(&self) -> Vec<u32> {
        resolution_ladder(self.levels_2d, self.min_res_2d, self.max_res_2d)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.feature_dim == 0 {
            return Err(GridError::FeatureDim);
        }
        for (levels, log2) in [
            (self.levels_3d, self.table_log2_3d),
            (self.levels_2d, self.table_log2_2d),
        ] {
            if levels > 0 && !(1..=24).contains(&log2) {
                return Err(GridError::TableSize(log2));
            }
        }
        for ladder in [self.resolutions_3d(), self.resolutions_2d()] {
            if ladder.first() == Some(&0) || ladder.windows(2).any(|w| w[1] <= w[0]) {
                return Err(GridError::Resolutions(ladder));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.levels_3d + self.levels_2d
    }

    /// Width of the interpolated feature `f^h`.
    pub fn output_dim(&self) -> usize {
        self.levels() * self.feature_dim
    }

    /// Total number of binarized entries across every table.
    pub fn parameter_count(&self) -> usize {
        self.feature_dim
            * ((self.levels_3d << self.table_log2_3d) + 3 * (self.levels_2d << self.table_log2_2d))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    resolution: u32,
    /// Axes each table of this level projects onto.
    planes: Vec<Vec<usize>>,
    /// First row of each plane's table inside the stacked latent tensor.
    table_rows: Vec<usize>,
    table_size: u32,
}

/// Index of a lattice cell in a hash table of `table_size` rows (a power of two).
pub fn hash_index(cell: &[u32], table_size: u32) -> u32 {
    let mut h = 0u32;
    for (c, p) in cell.iter().zip(PRIMES) {
        h ^= c.wrapping_mul(p);
    }
    h & (table_size - 1)
}

/// Hash grid whose latent tables are stacked into one parameter tensor of
/// shape `rows × D^h`, level by level in output order.
#[derive(Debug, Clone)]
pub struct HashGrid {
    pub config: HashGridConfig,
    pub table: ParamId,
    levels: Vec<Level>,
    rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    Binarized,
    Latent,
}

impl HashGrid {
    fn layout(config: &HashGridConfig) -> (Vec<Level>, usize) {
        let mut levels = Vec::new();
        let mut rows = 0usize;
        let t3 = 1u32 << config.table_log2_3d;
        for r in config.resolutions_3d() {
            levels.push(Level {
                resolution: r,
                planes: vec![vec![0, 1, 2]],
                table_rows: vec![rows],
                table_size: t3,
            });
            rows += t3 as usize;
        }
        let t2 = 1u32 << config.table_log2_2d;
        for r in config.resolutions_2d() {
            let planes = vec![vec![0, 1], vec![0, 2], vec![1, 2]];
            let table_rows = (0..3).map(|p| rows + p * t2 as usize).collect();
            rows += 3 * t2 as usize;
            levels.push(Level {
                resolution: r,
                planes,
                table_rows,
                table_size: t2,
            });
        }
        (levels, rows)
    }

    /// Registers a grid with latents drawn from `U(-init, init)`.
    pub fn new<S: Scalar, R: Rng>(
        config: HashGridConfig,
        store: &mut ParamStore<S>,
        init: f64,
        rng: &mut R,
    ) -> Result<Self, GridError> {
        config.validate()?;
        let (levels, rows) = Self::layout(&config);
        let d = config.feature_dim;
        let values = (0..rows * d)
            .map(|_| S::c(rng.gen_range(-init..init)))
            .collect();
        let table = store.add("hash_grid", Tensor::new(rows, d, values));
        Ok(HashGrid {
            config,
            table,
            levels,
            rows,
        })
    }

    /// Grid with entries set to the given ±1 bits (`true` = +1), in table order.
    pub fn from_bits<S: Scalar>(
        config: HashGridConfig,
        store: &mut ParamStore<S>,
        bits: &[bool],
    ) -> Result<Self, GridError> {
        config.validate()?;
        let (levels, rows) = Self::layout(&config);
        let d = config.feature_dim;
        if bits.len() != rows * d {
            return Err(GridError::PayloadLength {
                expected: rows * d,
                actual: bits.len(),
            });
        }
        let values = bits
            .iter()
            .map(|&b| if b { S::one() } else { -S::one() })
            .collect();
        let table = store.add("hash_grid", Tensor::new(rows, d, values));
        Ok(HashGrid {
            config,
            table,
            levels,
            rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Corner rows and interpolation weights for one level, in lexicographic
    /// corner order, planes in xy, xz, yz order.
    fn level_corners<S: Scalar>(&self, level: &Level, x: [S; 3], out: &mut Vec<(u32, S)>) {
        let res = level.resolution;
        let share = S::one() / S::c(level.planes.len() as f64);
        for (axes, &base) in level.planes.iter().zip(&level.table_rows) {
            let mut cell0 = [0u32; 3];
            let mut frac = [S::zero(); 3];
            for (j, &a) in axes.iter().enumerate() {
                let p = x[a].max(S::zero()).min(S::one()) * S::c(res as f64);
                let i0 = p.floor().to_u32().unwrap_or(0).min(res - 1);
                cell0[j] = i0;
                frac[j] = p - S::c(i0 as f64);
            }
            let dims = axes.len();
            let mut cell = [0u32; 3];
            for corner in 0..(1u32 << dims) {
                let mut w = share;
                for j in 0..dims {
                    let bit = (corner >> (dims - 1 - j)) & 1;
                    cell[j] = cell0[j] + bit;
                    w = w * if bit == 1 {
                        frac[j]
                    } else {
                        S::one() - frac[j]
                    };
                }
                let row = base as u32 + hash_index(&cell[..dims], level.table_size);
                out.push((row, w));
            }
        }
    }

    /// Interpolation plan for a batch of normalized locations.
    pub fn plan<S: Scalar>(&self, points: &[[S; 3]]) -> GatherPlan<S> {
        let mut plan = GatherPlan::new(points.len(), self.levels.len());
        let mut buf = Vec::with_capacity(24);
        for &x in points {
            for level in &self.levels {
                buf.clear();
                self.level_corners(level, x, &mut buf);
                plan.push_cell(buf.iter().copied());
            }
        }
        plan
    }

    /// Table values seen by the context model.
    pub fn view<S: Scalar>(&self, store: &ParamStore<S>, mode: GridMode) -> Vec<S> {
        let latent = &store.value(self.table).values;
        match mode {
            GridMode::Latent => latent.clone(),
            GridMode::Binarized => latent.iter().map(|&v| binarize(v)).collect(),
        }
    }

    /// `f^h` for each point, `points.len() × output_dim`, row-major.
    pub fn interpolate<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        points: &[[S; 3]],
        mode: GridMode,
    ) -> Vec<S> {
        self.plan(points)
            .apply(&self.view(store, mode), self.config.feature_dim)
    }

    /// Records binarization on the tape; returns the `±1` table node.
    pub fn binarized_on_tape<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> Var {
        let latent = tape.param(store, self.table);
        tape.sign_ste(latent)
    }

    /// `f^h` on the tape from a binarized table node.
    pub fn features_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        binarized: Var,
        plan: Rc<GatherPlan<S>>,
    ) -> Var {
        tape.gather(binarized, plan)
    }

    /// Binarized entries in table order, `true` for +1.
    pub fn bits<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<bool> {
        store
            .value(self.table)
            .values
            .iter()
            .map(|&v| v >= S::zero())
            .collect()
    }

    /// Replaces every latent by its binarized value.
    pub fn freeze<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for v in &mut store.value_mut(self.table).values {
            *v = binarize(*v);
        }
    }
}

/// `sign(v)` with `sign(0) = +1`.
#[inline]
pub fn binarize<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

/// Occurrence frequency of +1, clamped to the coder's resolution.
pub fn occurrence_frequency(bits: &[bool]) -> f64 {
    if bits.is_empty() {
        return 0.5;
    }
    let plus = bits.iter().filter(|&&b| b).count();
    crate::tensor::clamp_frequency(plus as f64 / bits.len() as f64)
}

/// Estimated bits for coding `bits` with a single global frequency.
pub fn hash_rate_bits(bits: &[bool]) -> f64 {
    let plus = bits.iter().filter(|&&b| b).count() as f64;
    crate::tensor::binary_rate(plus, bits.len() as f64)
}
