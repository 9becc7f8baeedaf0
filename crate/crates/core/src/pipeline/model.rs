use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{AttributeGroup, AttributeLayout, SceneBounds};
use crate::entropy::{ContextConfig, ContextModel, HacOutputs};
use crate::hash_grid::{GridMode, HashGrid, HashGridConfig};
use crate::masking::MaskState;
use crate::quantizer::{step_size, QuantSpec};
use crate::scalar::Scalar;
use crate::tensor::{DenseNet, ParamStore, Tensor};

use super::PipelineError;

/// Hash grid, context networks and the constants both sides of the codec
/// share.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub layout: AttributeLayout,
    pub quant: QuantSpec,
    pub bounds: SceneBounds,
    pub store: ParamStore<S>,
    pub grid: HashGrid,
    pub context: ContextModel,
}

impl<S: Scalar> Model<S> {
    pub fn new<R: Rng>(
        layout: AttributeLayout,
        grid_config: HashGridConfig,
        context_config: ContextConfig,
        quant: QuantSpec,
        bounds: SceneBounds,
        grid_init: f64,
        rng: &mut R,
    ) -> Result<Self, PipelineError> {
        if context_config.use_intra
            && (context_config.chunks == 0
                || !layout.feature_dim.is_multiple_of(context_config.chunks))
        {
            return Err(PipelineError::Config(format!(
                "feature dim {} is not divisible into {} chunks",
                layout.feature_dim, context_config.chunks
            )));
        }
        let mut store = ParamStore::new();
        let grid = HashGrid::new(grid_config, &mut store, grid_init, rng)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let context = ContextModel::new(&mut store, layout, grid.output_dim(), context_config, rng);
        Ok(Model {
            layout,
            quant,
            bounds,
            store,
            grid,
            context,
        })
    }

    /// Binarized `f^h` at normalized locations, `n × output_dim`.
    pub fn hash_features(&self, coords: &[[S; 3]]) -> Tensor<S> {
        let v = self
            .grid
            .interpolate(&self.store, coords, GridMode::Binarized);
        Tensor::new(coords.len(), self.grid.output_dim(), v)
    }

    pub fn hac(&self, coords: &[[S; 3]]) -> Result<HacOutputs<S>, PipelineError> {
        let fh = self.hash_features(coords);
        Ok(self.context.hac_infer(&self.store, &fh)?)
    }

    /// Step of group `g` for anchor row `i` of `hac`.
    pub fn step(&self, hac: &HacOutputs<S>, i: usize, g: AttributeGroup) -> S {
        step_size(hac.r.at(i, g.index()), S::c(self.quant.q0(g) as f64))
    }

    /// Raw network weights: HAC network, then chunk networks in order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.context.hac.write_weights(&self.store, &mut out);
        for net in &self.context.intra {
            net.write_weights(&self.store, &mut out);
        }
        out
    }

    /// Rebuilds a model from transmitted pieces.
    pub fn from_parts(
        layout: AttributeLayout,
        grid_config: HashGridConfig,
        context_config: ContextConfig,
        quant: QuantSpec,
        bounds: SceneBounds,
        grid_bits: &[bool],
        weights: &[u8],
    ) -> Result<Self, PipelineError> {
        let mut store = ParamStore::new();
        let grid = HashGrid::from_bits(grid_config, &mut store, grid_bits)
            .map_err(|e| PipelineError::Malformed(e.to_string()))?;
        let (hac, mut pos) = DenseNet::read_weights(weights, &mut store, "hac")?;
        let p = layout.total();
        if hac.input_dim() != grid.output_dim() || hac.output_dim() != 3 + 3 * p {
            return Err(PipelineError::Malformed(
                "HAC network shape does not match header".into(),
            ));
        }
        let mut intra = Vec::new();
        if context_config.use_intra {
            let c = layout.feature_dim / context_config.chunks.max(1);
            for n in 0..context_config.chunks {
                let (net, used) =
                    DenseNet::read_weights(&weights[pos..], &mut store, &format!("intra{n}"))?;
                if net.input_dim() != n * c + 3 * layout.feature_dim || net.output_dim() != 3 * c {
                    return Err(PipelineError::Malformed(format!(
                        "chunk network {n} shape does not match header"
                    )));
                }
                pos += used;
                intra.push(net);
            }
        }
        if pos != weights.len() {
            return Err(PipelineError::Malformed(
                "trailing bytes in weight section".into(),
            ));
        }
        Ok(Model {
            layout,
            quant,
            bounds,
            store,
            grid,
            context: ContextModel::from_parts(layout, context_config, hac, intra),
        })
    }

    /// Transmittable form: f32 weights and grid bits.
    pub fn to_record(&self) -> ModelRecord {
        ModelRecord {
            layout: self.layout,
            grid: self.grid.config.clone(),
            context: self.context.config.clone(),
            quant: self.quant,
            bounds: self.bounds,
            grid_bits: self.grid.bits(&self.store),
            weights: self.weight_bytes(),
        }
    }
}

/// Serializable snapshot of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub layout: AttributeLayout,
    pub grid: HashGridConfig,
    pub context: ContextConfig,
    pub quant: QuantSpec,
    pub bounds: SceneBounds,
    pub grid_bits: Vec<bool>,
    pub weights: Vec<u8>,
}

impl ModelRecord {
    pub fn build<S: Scalar>(&self) -> Result<Model<S>, PipelineError> {
        Model::from_parts(
            self.layout,
            self.grid.clone(),
            self.context.clone(),
            self.quant,
            self.bounds,
            &self.grid_bits,
            &self.weights,
        )
    }
}

/// Everything `fit` produces: the frozen model and the learned masks of the
/// training anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedState {
    pub model: ModelRecord,
    pub masks: MaskState,
    pub total_anchors: usize,
    pub config: super::TrainConfig,
}

impl TrainedState {
    pub fn to_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        bincode::serialize(self).map_err(|e| PipelineError::Malformed(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        bincode::deserialize(bytes).map_err(|e| PipelineError::Malformed(e.to_string()))
    }
}
