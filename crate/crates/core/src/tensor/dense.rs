use rand::Rng;

use super::tape::matmul;
use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }

    #[inline]
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Tanh => x.tanh_(),
            Activation::Sigmoid => x.sigmoid_(),
            Activation::None => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `inputs × outputs`, row-major.
    pub weight: ParamId,
    /// `1 × outputs`.
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Stack of fully connected layers whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// Uniform `±1/sqrt(fan_in)` initialization. `dims` has one more entry
    /// than `activations`.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert_eq!(
            dims.len(),
            activations.len() + 1,
            "one activation per layer"
        );
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w: Vec<S> = (0..fan_in * fan_out)
                .map(|_| S::c(rng.gen_range(-bound..bound)))
                .collect();
            let b: Vec<S> = (0..fan_out)
                .map(|_| S::c(rng.gen_range(-bound..bound)))
                .collect();
            let weight = store.add(
                format!("{name}.{i}.weight"),
                Tensor::new(fan_in, fan_out, w),
            );
            let bias = store.add(format!("{name}.{i}.bias"), Tensor::new(1, fan_out, b));
            layers.push(DenseLayer {
                weight,
                bias,
                inputs: fan_in,
                outputs: fan_out,
                activation: act,
            });
        }
        DenseNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Parameter ids in serialization order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let width = tape.shape(h).1;
            if width != layer.inputs {
                return Err(TensorError::LayerInput {
                    layer: i,
                    expected: layer.inputs,
                    actual: width,
                });
            }
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = match layer.activation {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
                Activation::Sigmoid => tape.sigmoid(z),
                Activation::None => z,
            };
        }
        Ok(h)
    }

    /// Tape-free forward pass. Performs the same floating point operations
    /// in the same order as [`DenseNet::forward`].
    pub fn infer<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let mut h = x.values.clone();
        let rows = x.rows;
        let mut width = x.cols;
        for (i, layer) in self.layers.iter().enumerate() {
            if width != layer.inputs {
                return Err(TensorError::LayerInput {
                    layer: i,
                    expected: layer.inputs,
                    actual: width,
                });
            }
            let w = store.value(layer.weight);
            let b = store.value(layer.bias);
            let mut z = matmul(&h, &w.values, rows, layer.inputs, layer.outputs);
            for row in z.chunks_mut(layer.outputs.max(1)) {
                for (v, &bv) in row.iter_mut().zip(&b.values) {
                    *v = layer.activation.apply(*v + bv);
                }
            }
            h = z;
            width = layer.outputs;
        }
        Ok(Tensor::new(rows, width, h))
    }

    /// Layer-shape manifest followed by little-endian f32 weights and biases
    /// in layer order.
    pub fn write_weights<S: Scalar>(&self, store: &ParamStore<S>, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            out.push(l.activation.code());
        }
        for id in self.param_ids() {
            for v in &store.value(id).values {
                let f = v.to_f32().unwrap_or(f32::NAN);
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }

    /// Inverse of [`DenseNet::write_weights`]; registers the weights in
    /// `store` and returns the net plus the number of bytes consumed.
    pub fn read_weights<S: Scalar>(
        bytes: &[u8],
        store: &mut ParamStore<S>,
        name: &str,
    ) -> Result<(Self, usize), TensorError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], TensorError> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| TensorError::Weights(format!("{name}: truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let n_layers = u32_at(take(4)?);
        if n_layers > 64 {
            return Err(TensorError::Weights(format!("{name}: {n_layers} layers")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = u32_at(take(4)?);
            let o = u32_at(take(4)?);
            let a = take(1)?[0];
            let act = Activation::from_code(a)
                .ok_or_else(|| TensorError::Weights(format!("{name}: activation code {a}")))?;
            if i == 0 || o == 0 || i > 1 << 16 || o > 1 << 16 {
                return Err(TensorError::Weights(format!("{name}: layer shape {i}x{o}")));
            }
            shapes.push((i, o, act));
        }
        for pair in shapes.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(TensorError::Weights(format!(
                    "{name}: layer dims do not chain"
                )));
            }
        }
        let mut read_floats = |n: usize| -> Result<Vec<S>, TensorError> {
            let raw = take(4 * n)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| S::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect())
        };
        let mut layers = Vec::with_capacity(n_layers);
        for (idx, &(i, o, act)) in shapes.iter().enumerate() {
            let w = read_floats(i * o)?;
            let b = read_floats(o)?;
            let weight = store.add(format!("{name}.{idx}.weight"), Tensor::new(i, o, w));
            let bias = store.add(format!("{name}.{idx}.bias"), Tensor::new(1, o, b));
            layers.push(DenseLayer {
                weight,
                bias,
                inputs: i,
                outputs: o,
                activation: act,
            });
        }
        Ok((DenseNet { layers }, pos))
    }
}
