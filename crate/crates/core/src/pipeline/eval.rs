use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorSet, AttributeGroup};
use crate::entropy::{gaussian_prob, rate, RateReport};
use crate::hash_grid::hash_rate_bits;
use crate::location::quantize_locations;
use crate::masking::MaskState;
use crate::scalar::Scalar;
use crate::tensor::binary_rate;

use super::scene::{feature_pass, hac_channel, quantize_group, steps};
use super::{DistortionWeights, Model, PipelineError};

/// Deterministic rate and distortion of a frozen model on a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub d_surr: f64,
    /// Weighted distortion contributed by each group, same normalization.
    pub distortion: [f64; 3],
    /// Estimated attribute bits, masked anchors excluded.
    pub rate: RateReport,
    pub hash_bits: f64,
    pub mask_bits: f64,
    pub anchor_ratio: f64,
    pub gaussian_ratio: f64,
    /// Feature bits per parameter under a per-channel static Gaussian.
    pub static_feature_bits: f64,
}

/// Normalized lattice coordinates of every anchor, in input order.
pub fn lattice_coords<S: Scalar>(anchors: &AnchorSet, model: &Model<S>) -> Vec<[S; 3]> {
    let q = quantize_locations(&anchors.locations, &model.bounds);
    let mut coords = vec![[S::zero(); 3]; anchors.len()];
    for (x, &i) in q.normalized().iter().zip(&q.order) {
        coords[i] = x.map(|v| S::c(v as f64));
    }
    coords
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    anchors: &AnchorSet,
    masks: &MaskState,
    weights: &DistortionWeights,
) -> Result<Evaluation, PipelineError> {
    let layout = model.layout;
    if anchors.layout != layout || masks.len() != anchors.len() {
        return Err(PipelineError::Mismatch(
            "anchors, masks and model disagree".into(),
        ));
    }
    let n = anchors.len();
    let coords = lattice_coords(anchors, model);
    let hac = model.hac(&coords)?;
    let st = steps(model, &hac);
    let mut recon: [Vec<S>; 3] = Default::default();
    let mut raw: [Vec<S>; 3] = Default::default();
    for g in AttributeGroup::ALL {
        let x: Vec<S> = anchors.group(g).iter().map(|&v| S::c(v as f64)).collect();
        let keep = (g == AttributeGroup::Offset).then_some(masks.offset_masks.as_slice());
        recon[g.index()] = quantize_group(layout, g, &x, &st, keep)?.1;
        raw[g.index()] = x;
    }
    let w = weights.as_array();
    let denom = (n * layout.total()).max(1) as f64;
    let distortion = AttributeGroup::ALL.map(|g| {
        let i = g.index();
        w[i] * raw[i]
            .iter()
            .zip(&recon[i])
            .map(|(&a, &b)| (a - b).to_f64_().powi(2))
            .sum::<f64>()
            / denom
    });

    let da = layout.feature_dim;
    let mut probs: [Vec<f64>; 3] = AttributeGroup::ALL.map(|g| vec![1.0; n * layout.dim(g)]);
    if n > 0 {
        feature_pass(model, &hac, |range, models| {
            let w = range.len();
            let mut out = Vec::with_capacity(n * w);
            for (k, m) in models.iter().enumerate() {
                let (i, j) = (k / w, range.start + k % w);
                let v = recon[0][i * da + j];
                probs[0][i * da + j] = m.prob(v.to_f64_(), st[i][0].to_f64_());
                out.push(v);
            }
            Ok(out)
        })?;
    }
    for g in [AttributeGroup::Scaling, AttributeGroup::Offset] {
        let (gi, d, start) = (g.index(), layout.dim(g), layout.start(g));
        for i in 0..n {
            for j in 0..d {
                let v = recon[gi][i * d + j].to_f64_();
                probs[gi][i * d + j] = hac_channel(&hac, i, start + j).prob(v, st[i][gi].to_f64_());
            }
        }
    }
    let report = rate(layout, &probs[0], &probs[1], &probs[2], &masks.offset_masks);

    let valid: Vec<usize> = (0..n).filter(|&i| masks.anchor_valid(i)).collect();
    let k = layout.offsets_per_anchor;
    let ones = valid
        .iter()
        .map(|&i| masks.row(i).iter().filter(|&&b| b).count())
        .sum::<usize>();
    let feature_steps: Vec<f64> = valid.iter().map(|&i| st[i][0].to_f64_()).collect();
    let features: Vec<f64> = valid
        .iter()
        .flat_map(|&i| recon[0][i * da..(i + 1) * da].iter().map(|v| v.to_f64_()))
        .collect();
    Ok(Evaluation {
        d_surr: distortion.iter().sum(),
        distortion,
        rate: report,
        hash_bits: hash_rate_bits(&model.grid.bits(&model.store)),
        mask_bits: binary_rate(ones as f64, (valid.len() * k) as f64),
        anchor_ratio: masks.anchor_ratio(),
        gaussian_ratio: masks.gaussian_ratio(),
        static_feature_bits: static_gaussian_bits(&features, da, &feature_steps),
    })
}

/// Bits per value when each channel of the row-major `rows × dim` quantized
/// `values` is coded with one Gaussian fitted to that channel.
pub fn static_gaussian_bits(values: &[f64], dim: usize, steps: &[f64]) -> f64 {
    let rows = values.len() / dim.max(1);
    if rows == 0 {
        return 0.0;
    }
    let mut bits = 0.0;
    for j in 0..dim {
        let col = (0..rows).map(|i| values[i * dim + j]);
        let mean = col.clone().sum::<f64>() / rows as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        let sigma = var.sqrt().max(1e-9);
        for i in 0..rows {
            bits -= gaussian_prob(values[i * dim + j], steps[i], mean, sigma).log2();
        }
    }
    bits / values.len() as f64
}

/// Anchors and bits falling into one voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelStat {
    pub voxel: [u32; 3],
    pub anchors: usize,
    pub total_bits: f64,
    pub mean_bits: f64,
}

/// Groups per-anchor bits by voxel of a `resolution³` grid over the unit
/// cube; `coords` are normalized locations.
pub fn bit_allocation_stats(coords: &[[f32; 3]], bits: &[f64], resolution: u32) -> Vec<VoxelStat> {
    let res = resolution.max(1);
    let mut cells: BTreeMap<[u32; 3], (usize, f64)> = BTreeMap::new();
    for (x, &b) in coords.iter().zip(bits) {
        let key = x.map(|u| ((u.clamp(0.0, 1.0) * res as f32) as u32).min(res - 1));
        let e = cells.entry(key).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += b;
    }
    cells
        .into_iter()
        .map(|(voxel, (anchors, total_bits))| VoxelStat {
            voxel,
            anchors,
            total_bits,
            mean_bits: total_bits / anchors as f64,
        })
        .collect()
}

pub fn voxel_csv(stats: &[VoxelStat]) -> String {
    let mut s = String::from("ix,iy,iz,anchors,total_bits,mean_bits\n");
    for v in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3},{:.3}",
            v.voxel[0], v.voxel[1], v.voxel[2], v.anchors, v.total_bits, v.mean_bits
        );
    }
    s
}
