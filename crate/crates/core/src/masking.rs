//! Learnable offset masks and the anchor masks derived from them.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.01;

/// Hard mask from a logit: `sigmoid(f^m) > ε_m`.
#[inline]
pub fn gaussian_mask_value<S: Scalar>(logit: S, threshold: f64) -> bool {
    logit.sigmoid_().to_f64_() > threshold
}

/// Binary offset masks with the sigmoid as gradient carrier.
pub fn gaussian_mask<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    threshold: f64,
) -> Result<Var, TensorError> {
    let soft = tape.sigmoid(logits);
    let hard = {
        let t = tape.value(soft);
        let mut h = t.clone();
        for v in &mut h.values {
            *v = if v.to_f64_() > threshold {
                S::one()
            } else {
                S::zero()
            };
        }
        tape.leaf(h)
    };
    tape.straight_through(hard, soft)
}

/// Anchor mask `1[mean(m) > 0]` with the mean as gradient carrier; `m` is
/// `B × K`, the result `B × 1`.
pub fn anchor_mask<S: Scalar>(tape: &mut Tape<S>, m: Var) -> Result<Var, TensorError> {
    let ratio = tape.mean_cols(m);
    let hard = {
        let mut h = tape.value(ratio).clone();
        for v in &mut h.values {
            *v = if *v > S::zero() { S::one() } else { S::zero() };
        }
        tape.leaf(h)
    };
    tape.straight_through(hard, ratio)
}

/// Offset triplets scaled by their masks: `o_k · m_k`.
pub fn apply_mask<S: Scalar>(tape: &mut Tape<S>, m: Var, offsets: Var) -> Var {
    let m3 = tape.repeat_each(m, 3);
    tape.mul(offsets, m3)
}

/// Surrogate offset distortion `Σ_k m_k‖ô_k − o_k‖² + (1 − m_k)‖o_k‖²`,
/// per anchor (`B × 1`). Its value equals the squared error of the masked
/// reconstruction; unlike that error it keeps a gradient on kept masks.
pub fn masked_offset_distortion<S: Scalar>(
    tape: &mut Tape<S>,
    m: Var,
    recon: Var,
    original: Var,
) -> Var {
    let m3 = tape.repeat_each(m, 3);
    let d = tape.sub(recon, original);
    let kept = tape.mul(d, d);
    let dropped = tape.mul(original, original);
    // m·kept + (1 − m)·dropped = dropped + m·(kept − dropped)
    let delta = tape.sub(kept, dropped);
    let md = tape.mul(m3, delta);
    let all = tape.add(dropped, md);
    tape.sum_cols(all)
}

/// Frozen masks for a set of anchors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    pub offsets_per_anchor: usize,
    /// `N × K`, row-major.
    pub offset_masks: Vec<bool>,
}

impl MaskState {
    pub fn all_valid(n: usize, k: usize) -> Self {
        MaskState {
            offsets_per_anchor: k,
            offset_masks: vec![true; n * k],
        }
    }

    pub fn from_logits<S: Scalar>(logits: &[S], k: usize, threshold: f64) -> Self {
        MaskState {
            offsets_per_anchor: k,
            offset_masks: logits
                .iter()
                .map(|&l| gaussian_mask_value(l, threshold))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offset_masks.len() / self.offsets_per_anchor.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.offset_masks.is_empty()
    }

    pub fn row(&self, i: usize) -> &[bool] {
        let k = self.offsets_per_anchor;
        &self.offset_masks[i * k..(i + 1) * k]
    }

    pub fn anchor_valid(&self, i: usize) -> bool {
        self.row(i).iter().any(|&b| b)
    }

    pub fn anchor_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.anchor_valid(i)).collect()
    }

    pub fn valid_anchors(&self) -> usize {
        (0..self.len()).filter(|&i| self.anchor_valid(i)).count()
    }

    /// Fraction of anchors kept.
    pub fn anchor_ratio(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.valid_anchors() as f64 / self.len() as f64
    }

    /// Fraction of offsets (Gaussians) kept.
    pub fn gaussian_ratio(&self) -> f64 {
        if self.offset_masks.is_empty() {
            return 0.0;
        }
        self.offset_masks.iter().filter(|&&b| b).count() as f64 / self.offset_masks.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    #[test]
    fn hard_values() {
        assert!(gaussian_mask_value(10.0f32, 0.01));
        assert!(!gaussian_mask_value(-10.0f32, 0.01));
    }

    #[test]
    fn gaussian_mask_gradient_is_sigmoid_slope() {
        let mut store = ParamStore::<f64>::new();
        let x = -4.6;
        let f = store.add("fm", Tensor::from_row(vec![x, 3.0]));
        let mut tape = Tape::new();
        let v = tape.param(&store, f);
        let m = gaussian_mask(&mut tape, v, 0.01).unwrap();
        assert_eq!(tape.value(m).values, vec![0.0, 1.0]);
        let l = tape.sum(m);
        tape.backward(l, &mut store).unwrap();
        let s = 1.0 / (1.0 + (-x).exp());
        let g = store.value(f).grad.as_ref().unwrap()[0];
        assert!((g - s * (1.0 - s)).abs() < 1e-12);
    }

    #[test]
    fn anchor_mask_cases() {
        let mut tape = Tape::<f64>::new();
        let zeros = tape.leaf(Tensor::new(1, 10, vec![0.0; 10]));
        let a = anchor_mask(&mut tape, zeros).unwrap();
        assert_eq!(tape.value(a).values, vec![0.0]);

        let mut store = ParamStore::<f64>::new();
        let mut one = vec![0.0; 10];
        one[3] = 1.0;
        let p = store.add("m", Tensor::new(1, 10, one));
        let mut tape = Tape::new();
        let mv = tape.param(&store, p);
        let a = anchor_mask(&mut tape, mv).unwrap();
        assert_eq!(tape.value(a).values, vec![1.0]);
        let carrier = tape.mean_cols(mv);
        assert!((tape.value(carrier).values[0] - 0.1).abs() < 1e-15);
        tape.backward(a, &mut store).unwrap();
        assert!(store
            .value(p)
            .grad
            .as_ref()
            .unwrap()
            .iter()
            .all(|&g| (g - 0.1).abs() < 1e-15));

        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(Tensor::new(1, 4, vec![1.0; 4]));
        let a = anchor_mask(&mut tape, ones).unwrap();
        let r = tape.mean_cols(ones);
        assert_eq!(
            (tape.value(a).values[0], tape.value(r).values[0]),
            (1.0, 1.0)
        );
    }

    #[test]
    fn masking_offsets() {
        let mut tape = Tape::<f64>::new();
        let o = tape.leaf(Tensor::new(1, 6, vec![1.0, 2.0, 3.0, 0.5, -0.5, 0.25]));
        let all = tape.leaf(Tensor::new(1, 2, vec![1.0, 1.0]));
        let same = apply_mask(&mut tape, all, o);
        assert_eq!(tape.value(same).values, tape.value(o).values);
        let m = tape.leaf(Tensor::new(1, 2, vec![1.0, 0.0]));
        let masked = apply_mask(&mut tape, m, o);
        assert_eq!(
            tape.value(masked).values,
            vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]
        );
        let d = masked_offset_distortion(&mut tape, m, o, o);
        assert!((tape.value(d).values[0] - (0.25 + 0.25 + 0.0625)).abs() < 1e-15);
    }

    #[test]
    fn ratios() {
        let s = MaskState {
            offsets_per_anchor: 2,
            offset_masks: vec![true, false, false, false, true, true, false, false],
        };
        assert_eq!(s.valid_anchors(), 2);
        assert_eq!(s.anchor_ratio(), 0.5);
        assert_eq!(s.gaussian_ratio(), 3.0 / 8.0);
        assert!(s.gaussian_ratio() < s.anchor_ratio());
    }
}
