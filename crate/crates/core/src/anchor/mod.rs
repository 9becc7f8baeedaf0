//! Anchors and their attribute groups, scene bounds, and file ingestion.

mod io;
mod synth;

pub use io::{load_anchors, load_ply_with_extras, save_anchors, write_ply, AnchorFormat};
pub use synth::{generate, SyntheticConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("missing property `{0}`")]
    MissingChannel(String),
    #[error("row {row}: non-finite value in `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: scaling l_{channel} = {value} outside (0, 1)")]
    ScalingOutOfRange {
        row: usize,
        channel: usize,
        value: f32,
    },
    #[error("anchor set is empty")]
    Empty,
    #[error("degenerate scene bounds; a margin > 0 is required")]
    DegenerateBounds,
    #[error("feature dim {dim} is not divisible into {chunks} chunks")]
    ChunkMismatch { dim: usize, chunks: usize },
}

/// The three attribute groups carried by every anchor, in stream order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeGroup {
    Feature,
    Scaling,
    Offset,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 3] = [
        AttributeGroup::Feature,
        AttributeGroup::Scaling,
        AttributeGroup::Offset,
    ];

    pub fn index(self) -> usize {
        match self {
            AttributeGroup::Feature => 0,
            AttributeGroup::Scaling => 1,
            AttributeGroup::Offset => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeGroup::Feature => "f_anchor",
            AttributeGroup::Scaling => "scaling",
            AttributeGroup::Offset => "offset",
        }
    }

    /// Base quantization step `Q0`.
    pub fn default_q0(self) -> f32 {
        match self {
            AttributeGroup::Feature => 1.0,
            AttributeGroup::Scaling => 0.001,
            AttributeGroup::Offset => 0.2,
        }
    }
}

/// Per-anchor attribute layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLayout {
    pub feature_dim: usize,
    pub offsets_per_anchor: usize,
}

impl AttributeLayout {
    pub const SCALING_DIM: usize = 6;

    pub fn dim(&self, g: AttributeGroup) -> usize {
        match g {
            AttributeGroup::Feature => self.feature_dim,
            AttributeGroup::Scaling => Self::SCALING_DIM,
            AttributeGroup::Offset => 3 * self.offsets_per_anchor,
        }
    }

    /// Start column of a group inside the concatenated `(f, l, o)` row.
    pub fn start(&self, g: AttributeGroup) -> usize {
        match g {
            AttributeGroup::Feature => 0,
            AttributeGroup::Scaling => self.feature_dim,
            AttributeGroup::Offset => self.feature_dim + Self::SCALING_DIM,
        }
    }

    /// `D^a + 6 + 3K`.
    pub fn total(&self) -> usize {
        self.feature_dim + Self::SCALING_DIM + 3 * self.offsets_per_anchor
    }
}

/// N anchors with locations and attribute groups `(f^a, l, o)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub layout: AttributeLayout,
    pub locations: Vec<[f32; 3]>,
    pub features: Vec<f32>,
    pub scalings: Vec<f32>,
    pub offsets: Vec<f32>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn group(&self, g: AttributeGroup) -> &[f32] {
        match g {
            AttributeGroup::Feature => &self.features,
            AttributeGroup::Scaling => &self.scalings,
            AttributeGroup::Offset => &self.offsets,
        }
    }

    pub fn group_row(&self, g: AttributeGroup, i: usize) -> &[f32] {
        let d = self.layout.dim(g);
        &self.group(g)[i * d..(i + 1) * d]
    }

    /// Checks the structural invariants: non-empty, finite, `l` in (0, 1).
    pub fn validate(&self) -> Result<(), AnchorError> {
        let n = self.len();
        if n == 0 {
            return Err(AnchorError::Empty);
        }
        let l = self.layout;
        if self.features.len() != n * l.feature_dim
            || self.scalings.len() != n * AttributeLayout::SCALING_DIM
            || self.offsets.len() != n * 3 * l.offsets_per_anchor
        {
            return Err(AnchorError::Format(
                "attribute arrays disagree with N".into(),
            ));
        }
        for i in 0..n {
            for (axis, v) in ["x", "y", "z"].iter().zip(self.locations[i]) {
                if !v.is_finite() {
                    return Err(AnchorError::NonFinite {
                        row: i,
                        column: axis.to_string(),
                    });
                }
            }
            for g in AttributeGroup::ALL {
                for (c, v) in self.group_row(g, i).iter().enumerate() {
                    if !v.is_finite() {
                        return Err(AnchorError::NonFinite {
                            row: i,
                            column: format!("{}_{c}", g.name()),
                        });
                    }
                }
            }
            for (c, &v) in self
                .group_row(AttributeGroup::Scaling, i)
                .iter()
                .enumerate()
            {
                if !(v > 0.0 && v < 1.0) {
                    return Err(AnchorError::ScalingOutOfRange {
                        row: i,
                        channel: c,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn check_chunks(&self, chunks: usize) -> Result<(), AnchorError> {
        if chunks == 0 || !self.layout.feature_dim.is_multiple_of(chunks) {
            return Err(AnchorError::ChunkMismatch {
                dim: self.layout.feature_dim,
                chunks,
            });
        }
        Ok(())
    }

    /// Rows reordered by `perm` (`out[i] = self[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> AnchorSet {
        let pick = |src: &[f32], d: usize| -> Vec<f32> {
            perm.iter()
                .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
                .collect()
        };
        AnchorSet {
            layout: self.layout,
            locations: perm.iter().map(|&i| self.locations[i]).collect(),
            features: pick(&self.features, self.layout.feature_dim),
            scalings: pick(&self.scalings, AttributeLayout::SCALING_DIM),
            offsets: pick(&self.offsets, 3 * self.layout.offsets_per_anchor),
        }
    }
}

/// Axis-aligned box enclosing the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl SceneBounds {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self, AnchorError> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(AnchorError::DegenerateBounds);
        }
        Ok(SceneBounds { min, max })
    }

    pub fn unit() -> Self {
        SceneBounds {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn contains(&self, x: [f32; 3]) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    /// Affine map of `x` into the unit cube; out-of-range coordinates are
    /// clamped with a warning.
    pub fn normalize(&self, x: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        let mut clamped = false;
        for a in 0..3 {
            let t = (x[a] - self.min[a]) / (self.max[a] - self.min[a]);
            if !(0.0..=1.0).contains(&t) {
                clamped = true;
            }
            out[a] = t.clamp(0.0, 1.0);
        }
        if clamped {
            log::warn!("location {x:?} outside scene bounds; clamped");
        }
        out
    }
}

pub fn normalize_location(x: [f32; 3], bounds: &SceneBounds) -> [f32; 3] {
    bounds.normalize(x)
}

/// Bounding box of the anchor locations, padded on each side by `margin`
/// times the box extent along that axis (the largest extent for flat axes).
pub fn compute_bounds(anchors: &AnchorSet, margin: f32) -> Result<SceneBounds, AnchorError> {
    if anchors.is_empty() {
        return Err(AnchorError::Empty);
    }
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in &anchors.locations {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent: Vec<f32> = (0..3).map(|a| hi[a] - lo[a]).collect();
    let largest = extent.iter().cloned().fold(0.0f32, f32::max);
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for a in 0..3 {
        let base = if extent[a] > 0.0 {
            extent[a]
        } else if largest > 0.0 {
            largest
        } else {
            1.0
        };
        let pad = margin.max(0.0) * base;
        min[a] = lo[a] - pad;
        max[a] = hi[a] + pad;
    }
    SceneBounds::new(min, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_anchor(loc: [f32; 3]) -> AnchorSet {
        AnchorSet {
            layout: AttributeLayout {
                feature_dim: 2,
                offsets_per_anchor: 1,
            },
            locations: vec![loc],
            features: vec![0.0; 2],
            scalings: vec![0.5; 6],
            offsets: vec![0.0; 3],
        }
    }

    #[test]
    fn single_point_needs_margin() {
        let a = one_anchor([0.0; 3]);
        assert!(matches!(
            compute_bounds(&a, 0.0),
            Err(AnchorError::DegenerateBounds)
        ));
        let b = compute_bounds(&a, 0.1).unwrap();
        assert!(b.contains([0.0; 3]));
    }

    #[test]
    fn unit_diagonal_with_margin() {
        let mut a = one_anchor([0.0; 3]);
        a.locations.push([1.0; 3]);
        a.features.extend([0.0; 2]);
        a.scalings.extend([0.5; 6]);
        a.offsets.extend([0.0; 3]);
        let b = compute_bounds(&a, 0.05).unwrap();
        for ax in 0..3 {
            assert!((b.min[ax] + 0.05).abs() < 1e-6);
            assert!((b.max[ax] - 1.05).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_corners_and_midpoint() {
        let b = SceneBounds::new([-1.0, 0.0, 2.0], [1.0, 4.0, 3.0]).unwrap();
        assert_eq!(b.normalize(b.min), [0.0; 3]);
        assert_eq!(b.normalize(b.max), [1.0; 3]);
        assert_eq!(b.normalize([0.0, 2.0, 2.5]), [0.5; 3]);
        assert_eq!(b.normalize([5.0, -3.0, 2.5]), [1.0, 0.0, 0.5]);
    }

    #[test]
    fn scaling_out_of_range_reports_row() {
        let mut a = one_anchor([0.0; 3]);
        for _ in 0..4 {
            a.locations.push([0.0; 3]);
            a.features.extend([0.0; 2]);
            a.scalings.extend([0.5; 6]);
            a.offsets.extend([0.0; 3]);
        }
        a.scalings[3 * 6 + 2] = 1.5;
        match a.validate() {
            Err(AnchorError::ScalingOutOfRange { row, channel, .. }) => {
                assert_eq!((row, channel), (3, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn bounds_contain_points_strictly(pts in prop::collection::vec(prop::array::uniform3(-100.0f32..100.0), 2..50)) {
            let mut a = one_anchor(pts[0]);
            for p in &pts[1..] {
                a.locations.push(*p);
                a.features.extend([0.0; 2]);
                a.scalings.extend([0.5; 6]);
                a.offsets.extend([0.0; 3]);
            }
            let b = compute_bounds(&a, 0.01).unwrap();
            for p in &pts {
                for ax in 0..3 {
                    prop_assert!(p[ax] > b.min[ax] && p[ax] < b.max[ax]);
                }
            }
        }

        #[test]
        fn normalize_is_affine(x in prop::array::uniform3(0.0f32..1.0), y in prop::array::uniform3(0.0f32..1.0), t in 0.0f32..1.0) {
            let b = SceneBounds::new([-2.0, 0.5, 10.0], [3.0, 1.5, 20.0]).unwrap();
            let lift = |u: [f32; 3]| -> [f32; 3] {
                [0, 1, 2].map(|a| b.min[a] + u[a] * (b.max[a] - b.min[a]))
            };
            let (px, py) = (lift(x), lift(y));
            let mix = [0, 1, 2].map(|a| t * px[a] + (1.0 - t) * py[a]);
            let lhs = b.normalize(mix);
            let (nx, ny) = (b.normalize(px), b.normalize(py));
            for a in 0..3 {
                prop_assert!((lhs[a] - (t * nx[a] + (1.0 - t) * ny[a])).abs() < 1e-5);
            }
        }
    }
}
