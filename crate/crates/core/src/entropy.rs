//! Conditional probability model for quantized anchor attributes.
//!
//! A hash-grid context network predicts, per anchor, step refinements and a
//! Gaussian for every attribute channel. Feature channels are refined chunk
//! by chunk: a separate network per chunk sees the already decoded prefix and
//! the hash-grid prediction, and its Gaussian is mixed with the hash-grid one.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AttributeGroup, AttributeLayout};
use crate::scalar::Scalar;
use crate::tensor::{
    std_normal_interval, Activation, DenseNet, ParamStore, Tape, Tensor, TensorError, Var,
};

pub const SIGMA_FLOOR: f64 = 1e-6;
/// Probability floor; matches the coder's resolution.
pub const P_MIN: f64 = 1.0 / 65536.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("chunk {requested} requested before chunk {expected}")]
    OutOfOrder { expected: usize, requested: usize },
    #[error("chunk {0} is out of range")]
    NoSuchChunk(usize),
    #[error("intra-anchor context is disabled")]
    IntraDisabled,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mass of `N(mu, sigma²)` on `[x - q/2, x + q/2]`, floored at [`P_MIN`].
pub fn gaussian_prob(x: f64, q: f64, mu: f64, sigma: f64) -> f64 {
    interval_mass(x, q, mu, sigma).max(P_MIN)
}

/// Unfloored interval mass.
pub fn interval_mass(x: f64, q: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_FLOOR);
    std_normal_interval((x - 0.5 * q - mu) / s, (x + 0.5 * q - mu) / s)
}

/// Weight of the hash-grid component, `softmax(π_s, π_c)[0]`.
pub fn mixture_weight(pi_s: f64, pi_c: f64) -> f64 {
    (pi_s - pi_c).sigmoid_()
}

/// Interval mass of a two-component mixture, floored at [`P_MIN`].
pub fn gmm_prob(x: f64, q: f64, s: (f64, f64, f64), c: (f64, f64, f64)) -> f64 {
    let w = mixture_weight(s.2, c.2);
    let ps = interval_mass(x, q, s.0, s.1);
    let pc = interval_mass(x, q, c.0, c.1);
    (w * ps + (1.0 - w) * pc).max(P_MIN)
}

/// One or two Gaussians describing a channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    /// Weight of the first component; 1 for a single Gaussian.
    pub weight: f64,
}

impl ChannelModel {
    pub fn single(mu: f64, sigma: f64) -> Self {
        ChannelModel {
            mu: [mu, mu],
            sigma: [sigma, sigma],
            weight: 1.0,
        }
    }

    pub fn mixture(s: (f64, f64, f64), c: (f64, f64, f64)) -> Self {
        ChannelModel {
            mu: [s.0, c.0],
            sigma: [s.1, c.1],
            weight: mixture_weight(s.2, c.2),
        }
    }

    pub fn is_single(&self) -> bool {
        self.weight == 1.0
    }

    /// Mixture CDF at `x`, exact for the two component tails.
    pub fn cdf(&self, x: f64) -> f64 {
        let one = |k: usize| {
            let z = (x - self.mu[k]) / self.sigma[k].max(SIGMA_FLOOR);
            if z < -40.0 {
                0.0
            } else if z > 40.0 {
                1.0
            } else {
                0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
            }
        };
        if self.is_single() {
            one(0)
        } else {
            self.weight * one(0) + (1.0 - self.weight) * one(1)
        }
    }

    /// Floored probability of the bin centred at `x`.
    pub fn prob(&self, x: f64, q: f64) -> f64 {
        if self.is_single() {
            gaussian_prob(x, q, self.mu[0], self.sigma[0])
        } else {
            let ps = interval_mass(x, q, self.mu[0], self.sigma[0]);
            let pc = interval_mass(x, q, self.mu[1], self.sigma[1]);
            (self.weight * ps + (1.0 - self.weight) * pc).max(P_MIN)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    /// Hidden width of the hash-grid network; 0 means twice its input width.
    pub hac_hidden: usize,
    /// Hidden width of each chunk network; 0 means twice its input width.
    pub intra_hidden: usize,
    pub chunks: usize,
    pub use_intra: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            hac_hidden: 0,
            intra_hidden: 64,
            chunks: 5,
            use_intra: true,
        }
    }
}

/// Hash-grid context outputs for a batch, each `B × P` except `r` (`B × 3`).
#[derive(Debug, Clone, PartialEq)]
pub struct HacOutputs<S> {
    pub r: Tensor<S>,
    pub mu: Tensor<S>,
    pub sigma: Tensor<S>,
    pub pi: Tensor<S>,
}

/// Chunk network outputs, each `B × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutputs<S> {
    pub mu: Tensor<S>,
    pub sigma: Tensor<S>,
    pub pi: Tensor<S>,
}

/// Tape handles mirroring [`HacOutputs`].
#[derive(Debug, Clone, Copy)]
pub struct HacVars {
    pub r: Var,
    pub mu: Var,
    pub sigma: Var,
    pub pi: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ChunkVars {
    pub mu: Var,
    pub sigma: Var,
    pub pi: Var,
}

/// Context networks and the layout they predict.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    pub layout: AttributeLayout,
    pub config: ContextConfig,
    pub hac: DenseNet,
    pub intra: Vec<DenseNet>,
}

fn three_layer(input: usize, hidden: usize, output: usize) -> (Vec<usize>, Vec<Activation>) {
    let h = if hidden == 0 { 2 * input } else { hidden };
    (
        vec![input, h, h, output],
        vec![Activation::Relu, Activation::Relu, Activation::None],
    )
}

impl ContextModel {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        layout: AttributeLayout,
        hash_dim: usize,
        config: ContextConfig,
        rng: &mut R,
    ) -> Self {
        let p = layout.total();
        let (dims, acts) = three_layer(hash_dim, config.hac_hidden, 3 + 3 * p);
        let hac = DenseNet::new(store, "hac", &dims, &acts, rng);
        let mut intra = Vec::new();
        if config.use_intra {
            let c = layout.feature_dim / config.chunks;
            for n in 0..config.chunks {
                let (dims, acts) =
                    three_layer(n * c + 3 * layout.feature_dim, config.intra_hidden, 3 * c);
                intra.push(DenseNet::new(
                    store,
                    &format!("intra{n}"),
                    &dims,
                    &acts,
                    rng,
                ));
            }
        }
        ContextModel {
            layout,
            config,
            hac,
            intra,
        }
    }

    /// Rebuilds the model around networks already registered in a store.
    pub fn from_parts(
        layout: AttributeLayout,
        config: ContextConfig,
        hac: DenseNet,
        intra: Vec<DenseNet>,
    ) -> Self {
        ContextModel {
            layout,
            config,
            hac,
            intra,
        }
    }

    pub fn chunk_width(&self) -> usize {
        self.layout.feature_dim / self.config.chunks
    }

    pub fn has_intra(&self) -> bool {
        !self.intra.is_empty()
    }

    /// Seeds the output biases with per-channel data statistics and shrinks
    /// the last-layer weights so predictions start near them.
    pub fn init_output<S: Scalar>(&self, store: &mut ParamStore<S>, mean: &[f64], std: &[f64]) {
        let p = self.layout.total();
        assert_eq!(mean.len(), p);
        let inv_softplus = |s: f64| {
            let s = (s - SIGMA_FLOOR).max(1e-6);
            if s > 20.0 {
                s
            } else {
                s.exp_m1().ln()
            }
        };
        let last = self.hac.layers.last().expect("hac has layers");
        shrink(store, last.weight, 0.1);
        let b = &mut store.value_mut(last.bias).values;
        for j in 0..p {
            b[3 + j] = S::c(mean[j]);
            b[3 + p + j] = S::c(inv_softplus(std[j]));
            b[3 + 2 * p + j] = S::zero();
        }
        let c = self.chunk_width();
        for (n, net) in self.intra.iter().enumerate() {
            let last = net.layers.last().expect("intra has layers");
            shrink(store, last.weight, 0.1);
            let b = &mut store.value_mut(last.bias).values;
            for j in 0..c {
                b[j] = S::c(mean[n * c + j]);
                b[c + j] = S::c(inv_softplus(std[n * c + j]));
                b[2 * c + j] = S::zero();
            }
        }
    }

    pub fn hac_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        fh: Var,
    ) -> Result<HacVars, EntropyError> {
        let p = self.layout.total();
        let out = self.hac.forward(tape, store, fh)?;
        let r = tape.slice_cols(out, 0, 3);
        let mu = tape.slice_cols(out, 3, 3 + p);
        let raw = tape.slice_cols(out, 3 + p, 3 + 2 * p);
        let pi = tape.slice_cols(out, 3 + 2 * p, 3 + 3 * p);
        let sigma = positive_on_tape(tape, raw);
        Ok(HacVars { r, mu, sigma, pi })
    }

    /// Distribution of feature chunk `chunk`; `prefix` holds chunks
    /// `0..chunk` and is `None` for the first chunk.
    pub fn intra_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        prefix: Option<Var>,
        hac: &HacVars,
        chunk: usize,
    ) -> Result<ChunkVars, EntropyError> {
        let net = self.intra.get(chunk).ok_or(if self.has_intra() {
            EntropyError::NoSuchChunk(chunk)
        } else {
            EntropyError::IntraDisabled
        })?;
        let da = self.layout.feature_dim;
        let c = self.chunk_width();
        let width = prefix.map_or(0, |v| tape.shape(v).1);
        if width != chunk * c {
            return Err(EntropyError::OutOfOrder {
                expected: width / c.max(1),
                requested: chunk,
            });
        }
        let mu = tape.slice_cols(hac.mu, 0, da);
        let sigma = tape.slice_cols(hac.sigma, 0, da);
        let pi = tape.slice_cols(hac.pi, 0, da);
        let mut parts: Vec<Var> = prefix.into_iter().collect();
        parts.extend([mu, sigma, pi]);
        let input = tape.concat_cols(&parts);
        let out = net.forward(tape, store, input)?;
        let mu = tape.slice_cols(out, 0, c);
        let raw = tape.slice_cols(out, c, 2 * c);
        let pi = tape.slice_cols(out, 2 * c, 3 * c);
        let sigma = positive_on_tape(tape, raw);
        Ok(ChunkVars { mu, sigma, pi })
    }

    pub fn hac_infer<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        fh: &Tensor<S>,
    ) -> Result<HacOutputs<S>, EntropyError> {
        let p = self.layout.total();
        let out = self.hac.infer(store, fh)?;
        let mut sigma = out.cols_range(3 + p, 3 + 2 * p);
        positive_inplace(&mut sigma);
        Ok(HacOutputs {
            r: out.cols_range(0, 3),
            mu: out.cols_range(3, 3 + p),
            sigma,
            pi: out.cols_range(3 + 2 * p, 3 + 3 * p),
        })
    }

    /// Tape-free counterpart of [`ContextModel::intra_on_tape`]; `prefix` is
    /// `B × chunk·c`.
    pub fn intra_infer<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        prefix: &Tensor<S>,
        hac: &HacOutputs<S>,
        chunk: usize,
    ) -> Result<ChunkOutputs<S>, EntropyError> {
        let net = self.intra.get(chunk).ok_or(if self.has_intra() {
            EntropyError::NoSuchChunk(chunk)
        } else {
            EntropyError::IntraDisabled
        })?;
        let da = self.layout.feature_dim;
        let c = self.chunk_width();
        if prefix.cols != chunk * c {
            return Err(EntropyError::OutOfOrder {
                expected: prefix.cols / c.max(1),
                requested: chunk,
            });
        }
        let rows = hac.mu.rows;
        let width = prefix.cols + 3 * da;
        let mut x = Vec::with_capacity(rows * width);
        for r in 0..rows {
            x.extend_from_slice(prefix.row(r));
            x.extend_from_slice(&hac.mu.row(r)[..da]);
            x.extend_from_slice(&hac.sigma.row(r)[..da]);
            x.extend_from_slice(&hac.pi.row(r)[..da]);
        }
        let out = net.infer(store, &Tensor::new(rows, width, x))?;
        let mut sigma = out.cols_range(c, 2 * c);
        positive_inplace(&mut sigma);
        Ok(ChunkOutputs {
            mu: out.cols_range(0, c),
            sigma,
            pi: out.cols_range(2 * c, 3 * c),
        })
    }
}

fn shrink<S: Scalar>(store: &mut ParamStore<S>, id: crate::tensor::ParamId, by: f64) {
    for v in &mut store.value_mut(id).values {
        *v = *v * S::c(by);
    }
}

/// `softplus(x) + σ_floor`.
pub fn positive_on_tape<S: Scalar>(tape: &mut Tape<S>, raw: Var) -> Var {
    let s = tape.softplus(raw);
    tape.affine(s, S::one(), S::c(SIGMA_FLOOR))
}

fn positive_inplace<S: Scalar>(t: &mut Tensor<S>) {
    for v in &mut t.values {
        *v = S::one() * v.softplus_() + S::c(SIGMA_FLOOR);
    }
}

/// Enforces ascending chunk order while decoding feature chunks.
pub struct IntraCursor<'a, S> {
    model: &'a ContextModel,
    hac: &'a HacOutputs<S>,
    prefix: Tensor<S>,
    next: usize,
}

impl<'a, S: Scalar> IntraCursor<'a, S> {
    pub fn new(model: &'a ContextModel, hac: &'a HacOutputs<S>) -> Self {
        IntraCursor {
            model,
            hac,
            prefix: Tensor::zeros(hac.mu.rows, 0),
            next: 0,
        }
    }

    pub fn next_chunk(&self) -> usize {
        self.next
    }

    pub fn predict(
        &self,
        store: &ParamStore<S>,
        chunk: usize,
    ) -> Result<ChunkOutputs<S>, EntropyError> {
        if chunk != self.next {
            return Err(EntropyError::OutOfOrder {
                expected: self.next,
                requested: chunk,
            });
        }
        self.model.intra_infer(store, &self.prefix, self.hac, chunk)
    }

    /// Appends the reconstructed values of the current chunk.
    pub fn advance(&mut self, values: &Tensor<S>) {
        let c = self.model.chunk_width();
        assert_eq!(values.shape(), (self.prefix.rows, c));
        let rows = self.prefix.rows;
        let w = self.prefix.cols;
        let mut v = Vec::with_capacity(rows * (w + c));
        for r in 0..rows {
            v.extend_from_slice(self.prefix.row(r));
            v.extend_from_slice(values.row(r));
        }
        self.prefix = Tensor::new(rows, w + c, v);
        self.next += 1;
    }
}

/// Floored interval probability on the tape.
pub fn prob_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var, q: Var, mu: Var, sigma: Var) -> Var {
    let p = tape.interval_prob(x, q, mu, sigma);
    tape.lower_bound(p, S::c(P_MIN))
}

/// Floored two-component mixture probability on the tape.
#[allow(clippy::too_many_arguments)]
pub fn gmm_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    q: Var,
    s: (Var, Var, Var),
    c: (Var, Var, Var),
) -> Var {
    let ps = tape.interval_prob(x, q, s.0, s.1);
    let pc = tape.interval_prob(x, q, c.0, c.1);
    let logit = tape.sub(s.2, c.2);
    let w = tape.sigmoid(logit);
    let diff = tape.sub(ps, pc);
    let wd = tape.mul(w, diff);
    let p = tape.add(pc, wd);
    tape.lower_bound(p, S::c(P_MIN))
}

/// Per-anchor bits with mask coupling: `m^a·(bits_f + bits_l) +
/// m^a·Σ_k m_k·bits_o[k]`. Inputs are bit counts per element; `m` is `B × K`
/// and `ma` is `B × 1`. Returns the `B × 1` per-anchor node.
pub fn rate_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bits_f: Var,
    bits_l: Var,
    bits_o: Var,
    m: Var,
    ma: Var,
) -> Var {
    let bf = tape.sum_cols(bits_f);
    let bl = tape.sum_cols(bits_l);
    let m3 = tape.repeat_each(m, 3);
    let mo = tape.mul(bits_o, m3);
    let bo = tape.sum_cols(mo);
    let fl = tape.add(bf, bl);
    let all = tape.add(fl, bo);
    tape.mul(ma, all)
}

/// Estimated bit cost, broken down by anchor and attribute group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub total: f64,
    pub per_anchor: Vec<f64>,
    /// Indexed by [`AttributeGroup::index`].
    pub per_group: [f64; 3],
    /// Number of coded parameters per group.
    pub counts: [usize; 3],
}

impl RateReport {
    pub fn bits_per_param(&self, g: AttributeGroup) -> f64 {
        let n = self.counts[g.index()];
        if n == 0 {
            0.0
        } else {
            self.per_group[g.index()] / n as f64
        }
    }

    /// One row per anchor: index, total bits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("anchor,bits\n");
        for (i, b) in self.per_anchor.iter().enumerate() {
            let _ = writeln!(s, "{i},{b}");
        }
        s
    }
}

/// Mask-coupled bit count from per-element probabilities. `probs_*` are
/// row-major per anchor; `masks` is `N × K`; anchors are valid when any of
/// their masks is set.
pub fn rate(
    layout: AttributeLayout,
    probs_f: &[f64],
    probs_l: &[f64],
    probs_o: &[f64],
    masks: &[bool],
) -> RateReport {
    let k = layout.offsets_per_anchor;
    let n = masks.len() / k.max(1);
    let da = layout.feature_dim;
    let mut per_anchor = vec![0.0; n];
    let mut per_group = [0.0; 3];
    let mut counts = [0usize; 3];
    let bits = |p: f64| -p.log2();
    for i in 0..n {
        let row = &masks[i * k..(i + 1) * k];
        if !row.iter().any(|&b| b) {
            continue;
        }
        let f: f64 = probs_f[i * da..(i + 1) * da].iter().map(|&p| bits(p)).sum();
        let l: f64 = probs_l[i * 6..(i + 1) * 6].iter().map(|&p| bits(p)).sum();
        let mut o = 0.0;
        for (j, &m) in row.iter().enumerate() {
            if m {
                o += probs_o[(i * k + j) * 3..(i * k + j + 1) * 3]
                    .iter()
                    .map(|&p| bits(p))
                    .sum::<f64>();
                counts[2] += 3;
            }
        }
        counts[0] += da;
        counts[1] += 6;
        per_group[0] += f;
        per_group[1] += l;
        per_group[2] += o;
        per_anchor[i] = f + l + o;
    }
    RateReport {
        total: per_anchor.iter().sum(),
        per_anchor,
        per_group,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_bin_at_mean() {
        let p = gaussian_prob(0.0, 1.0, 0.0, 1.0);
        assert!((p - 0.382_924_922_548_026).abs() < 1e-12, "{p}");
        assert!((gaussian_prob(0.0, 1e6, 0.0, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_prob(20.0, 1.0, 0.0, 1.0), P_MIN);
    }

    #[test]
    fn mixture_limits() {
        let s = (0.3, 0.8, 1.2);
        let c = (-0.5, 1.5, 1.2);
        let ps = gaussian_prob(0.1, 0.5, s.0, s.1);
        let pc = gaussian_prob(0.1, 0.5, c.0, c.1);
        assert!((gmm_prob(0.1, 0.5, s, c) - 0.5 * (ps + pc)).abs() < 1e-15);
        let hac_only = gmm_prob(0.1, 0.5, s, (c.0, c.1, -1e3));
        assert!((hac_only - ps).abs() < 1e-15);
        let same = gmm_prob(0.1, 0.5, (0.2, 0.9, 3.0), (0.2, 0.9, -1.0));
        assert!((same - gaussian_prob(0.1, 0.5, 0.2, 0.9)).abs() < 1e-15);
    }

    fn tiny_model(store: &mut ParamStore<f64>, use_intra: bool) -> ContextModel {
        let layout = AttributeLayout {
            feature_dim: 10,
            offsets_per_anchor: 2,
        };
        let cfg = ContextConfig {
            hac_hidden: 0,
            intra_hidden: 8,
            chunks: 5,
            use_intra,
        };
        ContextModel::new(store, layout, 6, cfg, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn zeroed_network_gives_unit_step() {
        let mut store = ParamStore::<f64>::new();
        let m = tiny_model(&mut store, false);
        for p in store.iter_mut() {
            p.tensor.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = m
            .hac_infer(&store, &Tensor::new(2, 6, vec![0.5; 12]))
            .unwrap();
        assert_eq!(out.r.shape(), (2, 3));
        assert_eq!(out.mu.cols, m.layout.total());
        assert!(out.r.values.iter().all(|&v| v == 0.0));
        assert!(out.mu.values.iter().all(|&v| v == 0.0));
        let s = std::f64::consts::LN_2 + SIGMA_FLOOR;
        assert!(out.sigma.values.iter().all(|&v| (v - s).abs() < 1e-15));
        assert_eq!(m.hac.output_dim(), 3 + 3 * m.layout.total());
    }

    #[test]
    fn zero_hash_features_give_constant_outputs() {
        let mut store = ParamStore::<f64>::new();
        let m = tiny_model(&mut store, false);
        let out = m.hac_infer(&store, &Tensor::zeros(4, 6)).unwrap();
        for r in 1..4 {
            assert_eq!(out.mu.row(r), out.mu.row(0));
            assert_eq!(out.sigma.row(r), out.sigma.row(0));
        }
    }

    #[test]
    fn intra_shapes_and_causality() {
        let mut store = ParamStore::<f64>::new();
        let m = tiny_model(&mut store, true);
        assert_eq!(m.chunk_width(), 2);
        assert_eq!(m.intra[0].input_dim(), 30);
        assert_eq!(m.intra[4].input_dim(), 8 + 30);
        let hac = m
            .hac_infer(
                &store,
                &Tensor::new(1, 6, vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0]),
            )
            .unwrap();
        let mut cur = IntraCursor::new(&m, &hac);
        assert!(matches!(
            cur.predict(&store, 1),
            Err(EntropyError::OutOfOrder {
                expected: 0,
                requested: 1
            })
        ));
        let c0 = cur.predict(&store, 0).unwrap();
        assert_eq!(c0.mu.shape(), (1, 2));
        cur.advance(&Tensor::from_row(vec![1.0, 2.0]));
        cur.advance(&Tensor::from_row(vec![3.0, 4.0]));
        let a = cur.predict(&store, 2).unwrap();
        // Chunk 2 ignores anything but chunks 0 and 1.
        let b = m
            .intra_infer(&store, &Tensor::from_row(vec![1.0, 2.0, 3.0, 4.0]), &hac, 2)
            .unwrap();
        assert_eq!(a, b);
        let changed = m
            .intra_infer(&store, &Tensor::from_row(vec![1.0, 2.0, 3.0, 9.0]), &hac, 2)
            .unwrap();
        assert_ne!(a.mu, changed.mu);
        let c0_again = m
            .intra_infer(&store, &Tensor::zeros(1, 0), &hac, 0)
            .unwrap();
        assert_eq!(c0, c0_again);
        assert!(m
            .intra_infer(&store, &Tensor::zeros(1, 2), &hac, 2)
            .is_err());
    }

    #[test]
    fn tape_and_infer_agree() {
        let mut store = ParamStore::<f32>::new();
        let layout = AttributeLayout {
            feature_dim: 10,
            offsets_per_anchor: 2,
        };
        let m = ContextModel::new(
            &mut store,
            layout,
            6,
            ContextConfig {
                intra_hidden: 8,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let fh = Tensor::new(3, 6, (0..18).map(|i| (i as f32 * 0.37).sin()).collect());
        let mut tape = Tape::new();
        let x = tape.leaf(fh.clone());
        let hv = m.hac_on_tape(&mut tape, &store, x).unwrap();
        let hac = m.hac_infer(&store, &fh).unwrap();
        let close = |a: &[f32], b: &[f32]| {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "{x} vs {y}");
            }
        };
        close(&tape.value(hv.sigma).values, &hac.sigma.values);
        let prefix = Tensor::new(3, 4, (0..12).map(|i| i as f32 * 0.1).collect());
        let pv = tape.leaf(prefix.clone());
        let cv = m
            .intra_on_tape(&mut tape, &store, Some(pv), &hv, 2)
            .unwrap();
        let co = m.intra_infer(&store, &prefix, &hac, 2).unwrap();
        close(&tape.value(cv.mu).values, &co.mu.values);
        close(&tape.value(cv.sigma).values, &co.sigma.values);
    }

    fn flat(n: usize, p: f64) -> Vec<f64> {
        vec![p; n]
    }

    #[test]
    fn rate_examples() {
        let layout = AttributeLayout {
            feature_dim: 50,
            offsets_per_anchor: 10,
        };
        let r = rate(
            layout,
            &flat(50, 0.5),
            &flat(6, 0.5),
            &flat(30, 0.5),
            &[true; 10],
        );
        assert!((r.total - 86.0).abs() < 1e-12);
        let r = rate(
            layout,
            &flat(50, 0.5),
            &flat(6, 0.5),
            &flat(30, 0.5),
            &[false; 10],
        );
        assert_eq!(r.total, 0.0);
        let mut m = [false; 10];
        m[..4].iter_mut().for_each(|b| *b = true);
        let r = rate(layout, &flat(50, 0.5), &flat(6, 0.5), &flat(30, 0.5), &m);
        assert!((r.total - (50.0 + 6.0 + 12.0)).abs() < 1e-12);
        assert_eq!(r.counts, [50, 6, 12]);
    }

    #[test]
    fn tape_rate_matches_plain_rate() {
        let layout = AttributeLayout {
            feature_dim: 2,
            offsets_per_anchor: 2,
        };
        let pf = vec![0.5, 0.25, 0.1, 0.9];
        let pl = vec![0.5; 12];
        let po = vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.1, 0.2, 0.3, 0.4];
        let masks = [true, false, false, false];
        let plain = rate(layout, &pf, &pl, &po, &masks);
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, v: &[f64], c: usize| {
            let t = tape.leaf(Tensor::new(2, c, v.to_vec()));
            tape.neg_log2(t)
        };
        let bf = mk(&mut tape, &pf, 2);
        let bl = mk(&mut tape, &pl, 6);
        let bo = mk(&mut tape, &po, 6);
        let m = tape.leaf(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]));
        let ma = tape.leaf(Tensor::new(2, 1, vec![1.0, 0.0]));
        let per = rate_on_tape(&mut tape, bf, bl, bo, m, ma);
        assert!((tape.value(per).values[0] - plain.per_anchor[0]).abs() < 1e-12);
        assert_eq!(tape.value(per).values[1], 0.0);
    }

    proptest! {
        #[test]
        fn bins_sum_to_one(mu in -3.0f64..3.0, sigma in 0.05f64..4.0, q in 0.05f64..2.0) {
            let lo = ((mu - 40.0 * sigma) / q).floor() as i64 - 1;
            let hi = ((mu + 40.0 * sigma) / q).ceil() as i64 + 1;
            let total: f64 = (lo..=hi).map(|k| interval_mass(k as f64 * q, q, mu, sigma)).sum();
            prop_assert!((1.0 - 1e-6..=1.0 + 1e-12).contains(&total), "{}", total);
        }

        #[test]
        fn mixture_lower_bound(x in -5.0f64..5.0, q in 0.01f64..2.0, a in -2.0f64..2.0, b in -2.0f64..2.0,
                               sa in 0.01f64..3.0, sb in 0.01f64..3.0, pa in -5.0f64..5.0, pb in -5.0f64..5.0) {
            let p = gmm_prob(x, q, (a, sa, pa), (b, sb, pb));
            let w = mixture_weight(pa, pb);
            let floor = interval_mass(x, q, a, sa).min(interval_mass(x, q, b, sb)) * w.min(1.0 - w);
            prop_assert!(p >= floor - 1e-15);
            prop_assert!(p >= P_MIN);
        }

        #[test]
        fn rate_is_monotone(ps in prop::collection::vec(0.01f64..0.99, 2 + 6 + 6), idx in 0usize..14, bump in 0.0f64..0.5) {
            let layout = AttributeLayout { feature_dim: 2, offsets_per_anchor: 2 };
            let masks = [true, true];
            let base = rate(layout, &ps[..2], &ps[2..8], &ps[8..], &masks).total;
            let mut up = ps.clone();
            up[idx] = (up[idx] + bump).min(1.0);
            let after = rate(layout, &up[..2], &up[2..8], &up[8..], &masks).total;
            prop_assert!(after <= base + 1e-12);
        }
    }
}
