//! Lossless coding of 16-bit quantized anchor locations.
//!
//! Points are sorted along a Morton curve; the gaps between consecutive
//! distinct codes are written as Exp-Golomb words whose prefix and suffix
//! bits go through the range coder with one fixed frequency each.
//! Repeated points are carried as per-code multiplicities.

use thiserror::Error;

use crate::anchor::SceneBounds;
use crate::range_coder::{binary_frequency, CoderError, RangeDecoder, RangeEncoder, PROB_TOTAL};

pub const LATTICE_MAX: u32 = 65_535;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocationError {
    #[error("Morton codes are not sorted at position {0}")]
    Unsorted(usize),
    #[error("location section truncated")]
    Truncated,
    #[error("malformed location section: {0}")]
    Malformed(String),
    #[error(transparent)]
    Coder(#[from] CoderError),
}

/// Interleaves bit `i` of x, y, z into bits `3i`, `3i+1`, `3i+2`.
pub fn morton3(x: u16, y: u16, z: u16) -> u64 {
    fn spread(v: u16) -> u64 {
        let mut v = v as u64;
        v = (v | (v << 32)) & 0x1F_0000_0000_FFFF;
        v = (v | (v << 16)) & 0x1F_0000_FF00_00FF;
        v = (v | (v << 8)) & 0x100F_00F0_0F00_F00F;
        v = (v | (v << 4)) & 0x10C3_0C30_C30C_30C3;
        v = (v | (v << 2)) & 0x1249_2492_4924_9249;
        v
    }
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

pub fn demorton3(code: u64) -> [u16; 3] {
    fn compact(mut v: u64) -> u16 {
        v &= 0x1249_2492_4924_9249;
        v = (v | (v >> 2)) & 0x10C3_0C30_C30C_30C3;
        v = (v | (v >> 4)) & 0x100F_00F0_0F00_F00F;
        v = (v | (v >> 8)) & 0x1F_0000_FF00_00FF;
        v = (v | (v >> 16)) & 0x1F_0000_0000_FFFF;
        v = (v | (v >> 32)) & 0xFFFF;
        v as u16
    }
    [compact(code), compact(code >> 1), compact(code >> 2)]
}

/// Lattice index of one normalized coordinate.
#[inline]
pub fn lattice_index(u: f32) -> u16 {
    ((u.clamp(0.0, 1.0) as f64 * LATTICE_MAX as f64 + 0.5).floor() as u32).min(LATTICE_MAX) as u16
}

/// Normalized coordinate of a lattice index; shared by encoder and decoder.
#[inline]
pub fn lattice_coord(i: u16) -> f32 {
    i as f32 / LATTICE_MAX as f32
}

/// Locations on the 16-bit lattice, in Morton order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLocations {
    pub bounds: SceneBounds,
    /// Lattice points sorted by Morton code (ties by original index).
    pub points: Vec<[u16; 3]>,
    /// `order[i]` is the input index of sorted point `i`.
    pub order: Vec<usize>,
}

impl QuantizedLocations {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn codes(&self) -> Vec<u64> {
        self.points
            .iter()
            .map(|p| morton3(p[0], p[1], p[2]))
            .collect()
    }

    /// Normalized `[0,1]³` coordinates of each sorted point.
    pub fn normalized(&self) -> Vec<[f32; 3]> {
        self.points.iter().map(|p| p.map(lattice_coord)).collect()
    }

    /// Scene-space coordinates of each sorted point.
    pub fn dequantized(&self) -> Vec<[f32; 3]> {
        let b = &self.bounds;
        self.points
            .iter()
            .map(|p| {
                let mut x = [0.0f32; 3];
                for a in 0..3 {
                    x[a] = b.min[a] + lattice_coord(p[a]) * (b.max[a] - b.min[a]);
                }
                x
            })
            .collect()
    }
}

pub fn quantize_locations(points: &[[f32; 3]], bounds: &SceneBounds) -> QuantizedLocations {
    let lattice: Vec<[u16; 3]> = points
        .iter()
        .map(|&x| bounds.normalize(x).map(lattice_index))
        .collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    let codes: Vec<u64> = lattice.iter().map(|p| morton3(p[0], p[1], p[2])).collect();
    order.sort_by_key(|&i| (codes[i], i));
    QuantizedLocations {
        bounds: *bounds,
        points: order.iter().map(|&i| lattice[i]).collect(),
        order,
    }
}

/// Exp-Golomb word of order `k`: `m` prefix ones, a zero, then the low
/// `m + k` bits of `v + 2^k`.
fn eg_parts(v: u64, k: u32) -> (u32, u128, u32) {
    let w = v as u128 + (1u128 << k);
    let nbits = 127 - w.leading_zeros();
    (nbits - k, w, nbits)
}

#[derive(Default)]
struct BitTally {
    ones: u64,
    total: u64,
}

impl BitTally {
    fn cost(&self) -> f64 {
        crate::tensor::binary_rate(self.ones as f64, self.total as f64)
    }

    fn frequency(&self) -> u32 {
        if self.total == 0 {
            PROB_TOTAL / 2
        } else {
            binary_frequency(self.ones as f64 / self.total as f64)
        }
    }
}

fn tally(values: &[u64], k: u32) -> (BitTally, BitTally) {
    let mut prefix = BitTally::default();
    let mut suffix = BitTally::default();
    for &v in values {
        let (m, w, nbits) = eg_parts(v, k);
        prefix.ones += m as u64;
        prefix.total += m as u64 + 1;
        suffix.ones += (w & ((1u128 << nbits) - 1)).count_ones() as u64;
        suffix.total += nbits as u64;
    }
    (prefix, suffix)
}

/// Order and the two frequencies minimizing the estimated cost.
fn choose_order(values: &[u64], max_k: u32) -> (u32, u32, u32) {
    let mut best = (f64::INFINITY, 0, PROB_TOTAL / 2, PROB_TOTAL / 2);
    for k in 0..=max_k {
        let (p, s) = tally(values, k);
        let c = p.cost() + s.cost();
        if c < best.0 {
            best = (c, k, p.frequency(), s.frequency());
        }
    }
    (best.1, best.2, best.3)
}

fn put_eg(enc: &mut RangeEncoder, v: u64, k: u32, fp: u32, fs: u32) {
    let (m, w, nbits) = eg_parts(v, k);
    for _ in 0..m {
        enc.encode_bit(true, fp);
    }
    enc.encode_bit(false, fp);
    for b in (0..nbits).rev() {
        enc.encode_bit((w >> b) & 1 == 1, fs);
    }
}

fn get_eg(dec: &mut RangeDecoder<'_>, k: u32, fp: u32, fs: u32) -> Result<u64, LocationError> {
    let mut m = 0u32;
    while dec.decode_bit(fp) {
        m += 1;
        if m + k > 64 {
            return Err(LocationError::Malformed(
                "Exp-Golomb prefix too long".into(),
            ));
        }
    }
    let nbits = m + k;
    let mut w: u128 = 1;
    for _ in 0..nbits {
        w = (w << 1) | dec.decode_bit(fs) as u128;
    }
    let v = w - (1u128 << k);
    u64::try_from(v).map_err(|_| LocationError::Malformed("gap overflows".into()))
}

/// Section bytes: `[N u32][bounds 6×f32][payload]`.
pub fn encode_locations(q: &QuantizedLocations) -> Result<Vec<u8>, LocationError> {
    let codes = q.codes();
    if let Some(i) = codes.windows(2).position(|w| w[1] < w[0]) {
        return Err(LocationError::Unsorted(i + 1));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&(codes.len() as u32).to_le_bytes());
    for v in q.bounds.min.iter().chain(&q.bounds.max) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if codes.is_empty() {
        return Ok(out);
    }
    let mut unique = Vec::new();
    let mut repeats = Vec::new();
    for &c in &codes {
        if unique.last() == Some(&c) {
            *repeats.last_mut().unwrap() += 1;
        } else {
            unique.push(c);
            repeats.push(0u64);
        }
    }
    let gaps: Vec<u64> = unique.windows(2).map(|w| w[1] - w[0] - 1).collect();
    let (k, fp, fs) = choose_order(&gaps, 48);
    let has_repeats = repeats.iter().any(|&r| r > 0);
    let (rp, rs) = if has_repeats {
        let (p, s) = tally(&repeats, 0);
        (p.frequency(), s.frequency())
    } else {
        (PROB_TOTAL / 2, PROB_TOTAL / 2)
    };
    out.extend_from_slice(&(unique.len() as u32).to_le_bytes());
    out.push(k as u8);
    out.push(has_repeats as u8);
    for f in [fp, fs, rp, rs] {
        out.extend_from_slice(&(f as u16).to_le_bytes());
    }
    let mut enc = RangeEncoder::new();
    for b in (0..48).rev() {
        enc.encode_bit((unique[0] >> b) & 1 == 1, PROB_TOTAL / 2);
    }
    for &g in &gaps {
        put_eg(&mut enc, g, k, fp, fs);
    }
    if has_repeats {
        for &r in &repeats {
            put_eg(&mut enc, r, 0, rp, rs);
        }
    }
    out.extend_from_slice(&enc.finish());
    Ok(out)
}

pub fn decode_locations(data: &[u8]) -> Result<QuantizedLocations, LocationError> {
    let word = |i: usize| -> Result<[u8; 4], LocationError> {
        data.get(i..i + 4)
            .map(|s| s.try_into().unwrap())
            .ok_or(LocationError::Truncated)
    };
    let n = u32::from_le_bytes(word(0)?) as usize;
    let mut b = [0.0f32; 6];
    for (j, v) in b.iter_mut().enumerate() {
        *v = f32::from_le_bytes(word(4 + 4 * j)?);
    }
    let bounds = SceneBounds::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])
        .map_err(|e| LocationError::Malformed(e.to_string()))?;
    if n == 0 {
        return Ok(QuantizedLocations {
            bounds,
            points: Vec::new(),
            order: Vec::new(),
        });
    }
    let m = u32::from_le_bytes(word(28)?) as usize;
    let head = data.get(32..42).ok_or(LocationError::Truncated)?;
    let k = head[0] as u32;
    let has_repeats = head[1] != 0;
    let f = |i: usize| u16::from_le_bytes([head[2 + 2 * i], head[3 + 2 * i]]) as u32;
    let (fp, fs, rp, rs) = (f(0), f(1), f(2), f(3));
    if m == 0 || m > n || k > 48 || [fp, fs, rp, rs].contains(&0) {
        return Err(LocationError::Malformed("bad location header".into()));
    }
    let mut dec = RangeDecoder::new(&data[42..]);
    let mut code = 0u64;
    for _ in 0..48 {
        code = (code << 1) | dec.decode_bit(PROB_TOTAL / 2) as u64;
    }
    let mut unique = Vec::with_capacity(m);
    unique.push(code);
    for _ in 1..m {
        let g = get_eg(&mut dec, k, fp, fs)?;
        code = code
            .checked_add(g + 1)
            .filter(|&c| c < 1 << 48)
            .ok_or_else(|| LocationError::Malformed("code overflow".into()))?;
        unique.push(code);
    }
    let mut points = Vec::with_capacity(n);
    for &c in &unique {
        let r = if has_repeats {
            get_eg(&mut dec, 0, rp, rs)?
        } else {
            0
        };
        if points.len() as u64 + r + 1 > n as u64 {
            return Err(LocationError::Malformed("repeat counts exceed N".into()));
        }
        for _ in 0..=r {
            points.push(demorton3(c));
        }
    }
    if points.len() != n {
        return Err(LocationError::Malformed("point count mismatch".into()));
    }
    Ok(QuantizedLocations {
        bounds,
        order: (0..n).collect(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_morton(x: u16, y: u16, z: u16) -> u64 {
        let mut c = 0u64;
        for i in 0..16 {
            c |= ((x as u64 >> i) & 1) << (3 * i);
            c |= ((y as u64 >> i) & 1) << (3 * i + 1);
            c |= ((z as u64 >> i) & 1) << (3 * i + 2);
        }
        c
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton3(0, 0, 0), 0);
        assert_eq!(morton3(1, 1, 1), 7);
        assert_eq!(morton3(2, 3, 1), 30);
        assert_eq!(morton3(65535, 65535, 65535), (1 << 48) - 1);
    }

    #[test]
    fn corners_quantize_to_lattice_ends() {
        let b = SceneBounds::new([-1.0, 0.0, 5.0], [1.0, 2.0, 6.0]).unwrap();
        let q = quantize_locations(&[b.max, b.min], &b);
        assert_eq!(q.points, vec![[0, 0, 0], [65535, 65535, 65535]]);
        assert_eq!(q.order, vec![1, 0]);
    }

    #[test]
    fn single_point() {
        let b = SceneBounds::unit();
        let q = quantize_locations(&[[0.3, 0.2, 0.9]], &b);
        let bytes = encode_locations(&q).unwrap();
        assert!(bytes.len() <= 28 + 14 + 6);
        let back = decode_locations(&bytes).unwrap();
        assert_eq!(back.points, q.points);
    }

    #[test]
    fn unsorted_is_rejected() {
        let q = QuantizedLocations {
            bounds: SceneBounds::unit(),
            points: vec![[5, 5, 5], [1, 1, 1]],
            order: vec![0, 1],
        };
        assert_eq!(encode_locations(&q), Err(LocationError::Unsorted(1)));
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f32) -> Vec<[f32; 3]> {
        let c: [f32; 3] = [
            (1.0 - spread) * rng.gen::<f32>(),
            (1.0 - spread) * rng.gen::<f32>(),
            (1.0 - spread) * rng.gen::<f32>(),
        ];
        (0..n)
            .map(|_| [0, 1, 2].map(|a| c[a] + rng.gen_range(0.0..spread)))
            .collect()
    }

    fn bits_per_point(points: &[[f32; 3]]) -> f64 {
        let q = quantize_locations(points, &SceneBounds::unit());
        encode_locations(&q).unwrap().len() as f64 * 8.0 / points.len() as f64
    }

    #[test]
    fn uniform_beats_raw_and_clusters_beat_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let uniform = cloud(&mut rng, 10_000, 1.0);
        let clustered = cloud(&mut rng, 10_000, 0.01);
        let (u, c) = (bits_per_point(&uniform), bits_per_point(&clustered));
        assert!(u < 48.0, "{u}");
        assert!(c < u, "{c} vs {u}");
    }

    #[test]
    fn dequantization_error_within_half_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = SceneBounds::new([-3.0, 0.0, 10.0], [5.0, 0.5, 12.0]).unwrap();
        let pts: Vec<[f32; 3]> = (0..1000)
            .map(|_| [0, 1, 2].map(|a| rng.gen_range(b.min[a]..b.max[a])))
            .collect();
        let q = quantize_locations(&pts, &b);
        for (i, x) in q.dequantized().iter().enumerate() {
            let orig = pts[q.order[i]];
            for a in 0..3 {
                let cell = (b.max[a] - b.min[a]) / 65535.0;
                assert!((x[a] - orig[a]).abs() <= 0.5 * cell * 1.001 + 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn morton_matches_naive(x: u16, y: u16, z: u16) {
            let c = morton3(x, y, z);
            prop_assert_eq!(c, naive_morton(x, y, z));
            prop_assert_eq!(demorton3(c), [x, y, z]);
        }

        #[test]
        fn roundtrip_with_duplicates(seed: u64, n in 1usize..400, dup in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spread = rng.gen_range(0.001..1.0);
            let mut pts: Vec<[f32; 3]> = cloud(&mut rng, n, spread);
            for i in 1..n {
                if rng.gen_bool(dup) {
                    pts[i] = pts[rng.gen_range(0..i)];
                }
            }
            let q = quantize_locations(&pts, &SceneBounds::unit());
            let back = decode_locations(&encode_locations(&q).unwrap()).unwrap();
            prop_assert_eq!(&back.points, &q.points);
            prop_assert_eq!(back.bounds, q.bounds);
        }
    }
}
