use std::ops::Range;

use crate::anchor::{AttributeGroup, AttributeLayout};
use crate::entropy::{ChannelModel, HacOutputs, IntraCursor};
use crate::quantizer::quantize_eval;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Model, PipelineError};

/// Single HAC Gaussian of channel `ch` (attribute-vector index) for row `i`.
pub(crate) fn hac_channel<S: Scalar>(hac: &HacOutputs<S>, i: usize, ch: usize) -> ChannelModel {
    ChannelModel::single(hac.mu.at(i, ch).to_f64_(), hac.sigma.at(i, ch).to_f64_())
}

/// Walks the feature channels in coding order. `resolve` gets the channel
/// range of the current chunk and `rows × width` models, and returns the
/// reconstructed values of that chunk in the same layout.
pub(crate) fn feature_pass<S, F>(
    model: &Model<S>,
    hac: &HacOutputs<S>,
    mut resolve: F,
) -> Result<(), PipelineError>
where
    S: Scalar,
    F: FnMut(Range<usize>, &[ChannelModel]) -> Result<Vec<S>, PipelineError>,
{
    let da = model.layout.feature_dim;
    let rows = hac.mu.rows;
    if !model.context.has_intra() {
        let models: Vec<ChannelModel> = (0..rows)
            .flat_map(|i| (0..da).map(move |j| hac_channel(hac, i, j)))
            .collect();
        resolve(0..da, &models)?;
        return Ok(());
    }
    let c = model.context.chunk_width();
    let mut cursor = IntraCursor::new(&model.context, hac);
    for n in 0..model.context.config.chunks {
        let pred = cursor.predict(&model.store, n)?;
        let mut models = Vec::with_capacity(rows * c);
        for i in 0..rows {
            for jj in 0..c {
                let ch = n * c + jj;
                let f = |t: &Tensor<S>, col: usize| t.at(i, col).to_f64_();
                models.push(ChannelModel::mixture(
                    (f(&hac.mu, ch), f(&hac.sigma, ch), f(&hac.pi, ch)),
                    (f(&pred.mu, jj), f(&pred.sigma, jj), f(&pred.pi, jj)),
                ));
            }
        }
        let recon = resolve(n * c..(n + 1) * c, &models)?;
        cursor.advance(&Tensor::new(rows, c, recon));
    }
    Ok(())
}

/// Per-row steps of every group.
pub(crate) fn steps<S: Scalar>(model: &Model<S>, hac: &HacOutputs<S>) -> Vec<[S; 3]> {
    (0..hac.r.rows)
        .map(|i| AttributeGroup::ALL.map(|g| model.step(hac, i, g)))
        .collect()
}

/// Symbols and reconstructions of one group. Entries with `keep == false`
/// become symbol 0 and value 0.
pub(crate) fn quantize_group<S: Scalar>(
    layout: AttributeLayout,
    g: AttributeGroup,
    values: &[S],
    steps: &[[S; 3]],
    keep: Option<&[bool]>,
) -> Result<(Vec<i32>, Vec<S>), PipelineError> {
    let d = layout.dim(g);
    let mut symbols = Vec::with_capacity(values.len());
    let mut recon = Vec::with_capacity(values.len());
    for (idx, &x) in values.iter().enumerate() {
        let i = idx / d;
        if let Some(k) = keep {
            if !k[idx / 3] {
                symbols.push(0);
                recon.push(S::zero());
                continue;
            }
        }
        let (k, v) = quantize_eval(x, steps[i][g.index()])?;
        symbols.push(k);
        recon.push(v);
    }
    Ok((symbols, recon))
}
