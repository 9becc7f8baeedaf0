//! Adaptive step sizes, the additive-noise training surrogate, and
//! deterministic rounding for coding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::AttributeGroup;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Largest symbol magnitude the coder accepts.
pub const MAX_SYMBOL: i32 = 32_767;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("symbol for value {value} at step {step} exceeds ±{MAX_SYMBOL}")]
    SymbolOverflow { value: f64, step: f64 },
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
}

/// Base step sizes per attribute group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub q0: [f32; 3],
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            q0: AttributeGroup::ALL.map(|g| g.default_q0()),
        }
    }
}

impl QuantSpec {
    pub fn q0(&self, g: AttributeGroup) -> f32 {
        self.q0[g.index()]
    }
}

/// Bounds `(lo, hi)` keeping the step strictly inside `(ε, 2Q0 − ε)`,
/// `ε = 1e-6·Q0`.
pub fn step_bounds<S: Scalar>(q0: S) -> (S, S) {
    let eps = q0 * S::c(1e-6);
    (eps + eps, q0 + q0 - eps - eps)
}

/// `Q0 (1 + tanh r)`, kept away from 0 and `2Q0`.
pub fn step_size<S: Scalar>(r: S, q0: S) -> S {
    let (lo, hi) = step_bounds(q0);
    (q0 * r.tanh_() + q0).max(lo).min(hi)
}

/// [`step_size`] recorded on the tape, elementwise over `r`.
pub fn step_size_on_tape<S: Scalar>(tape: &mut Tape<S>, r: Var, q0: S) -> Var {
    let t = tape.tanh(r);
    let q = tape.affine(t, q0, q0);
    let (lo, hi) = step_bounds(q0);
    tape.clamp(q, lo, hi)
}

/// `f + u·q` with `u` a leaf of uniform `[-½, ½)` draws of the same shape.
pub fn quantize_train<S: Scalar>(tape: &mut Tape<S>, f: Var, q: Var, u: Var) -> Var {
    let n = tape.mul(u, q);
    tape.add(f, n)
}

/// Round half away from zero.
#[inline]
pub fn round_symbol<S: Scalar>(v: S) -> S {
    v.round()
}

/// Symbol `k = round(f/q)` and reconstruction `k·q`.
pub fn quantize_eval<S: Scalar>(f: S, q: S) -> Result<(i32, S), QuantError> {
    if !(q > S::zero()) || !q.is_finite() {
        return Err(QuantError::BadStep(q.to_f64_()));
    }
    let k = round_symbol(f / q);
    if !(k.abs() <= S::c(MAX_SYMBOL as f64)) {
        return Err(QuantError::SymbolOverflow {
            value: f.to_f64_(),
            step: q.to_f64_(),
        });
    }
    let k = k.to_i32().expect("bounded symbol");
    Ok((k, dequantize(k, q)))
}

#[inline]
pub fn dequantize<S: Scalar>(k: i32, q: S) -> S {
    S::c(k as f64) * q
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one anchor at one iteration; independent of scheduling.
pub fn anchor_rng(seed: u64, iteration: u64, anchor: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ iteration) ^ anchor))
}

/// `count` uniform draws in `[-½, ½)` for each anchor, concatenated.
pub fn uniform_noise<S: Scalar>(
    seed: u64,
    iteration: u64,
    anchors: &[usize],
    count: usize,
) -> Vec<S> {
    let mut out = Vec::with_capacity(anchors.len() * count);
    for &a in anchors {
        let mut rng = anchor_rng(seed, iteration, a as u64);
        out.extend((0..count).map(|_| S::c(rng.gen::<f64>() - 0.5)));
    }
    out
}
