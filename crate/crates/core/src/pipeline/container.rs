//! The compressed container.
//!
//! Layout: magic `HACP`, `u16` version, `u32` header length, the header, a
//! CRC-32 of the header, then seven framed sections (weights, grid, masks,
//! locations, features, scalings, offsets). Section offsets in the header
//! are relative to the first section. All integers are little-endian.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorSet, AttributeGroup, AttributeLayout, SceneBounds};
use crate::entropy::{rate, ChannelModel, ContextConfig, HacOutputs, RateReport};
use crate::hash_grid::{hash_rate_bits, occurrence_frequency, HashGridConfig};
use crate::location::{decode_locations, encode_locations, quantize_locations, QuantizedLocations};
use crate::masking::MaskState;
use crate::quantizer::{dequantize, QuantSpec};
use crate::range_coder::{
    binary_frequency, decode_binary, encode_binary, read_section, write_section, QuantizedCdf,
    RangeDecoder, RangeEncoder, SectionInfo, PROB_TOTAL,
};
use crate::tensor::binary_rate;

use super::scene::{feature_pass, hac_channel, quantize_group, steps};
use super::{Model, PipelineError};

pub const MAGIC: [u8; 4] = *b"HACP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Weights,
    Grid,
    Masks,
    Locations,
    Features,
    Scalings,
    Offsets,
}

impl Section {
    pub const ALL: [Section; 7] = [
        Section::Weights,
        Section::Grid,
        Section::Masks,
        Section::Locations,
        Section::Features,
        Section::Scalings,
        Section::Offsets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Weights => "mlp",
            Section::Grid => "grid",
            Section::Masks => "masks",
            Section::Locations => "locations",
            Section::Features => "features",
            Section::Scalings => "scalings",
            Section::Offsets => "offsets",
        }
    }

    pub fn of_group(g: AttributeGroup) -> Section {
        match g {
            AttributeGroup::Feature => Section::Features,
            AttributeGroup::Scaling => Section::Scalings,
            AttributeGroup::Offset => Section::Offsets,
        }
    }
}

/// Decoded header fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub total_anchors: u32,
    pub valid_anchors: u32,
    pub layout: AttributeLayout,
    pub context: ContextConfig,
    pub grid: HashGridConfig,
    pub bounds: SceneBounds,
    pub quant: QuantSpec,
    /// Inclusive symbol range of every attribute channel.
    pub symbol_bounds: Vec<(i16, i16)>,
    pub grid_frequency: u16,
    pub mask_frequency: u16,
    pub sections: Vec<SectionInfo>,
}

/// Quantized content of a stream, in coding order.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedScene {
    pub locations: QuantizedLocations,
    pub masks: MaskState,
    /// Row-major per group; pruned offsets hold 0.
    pub symbols: [Vec<i32>; 3],
    pub values: [Vec<f32>; 3],
}

impl CodedScene {
    /// Anchors with dequantized locations and quantized attributes.
    pub fn anchors(&self, layout: AttributeLayout) -> AnchorSet {
        AnchorSet {
            layout,
            locations: self.locations.dequantized(),
            features: self.values[0].clone(),
            scalings: self.values[1].clone(),
            offsets: self.values[2].clone(),
        }
    }

    /// Exact equality of everything the codec promises to preserve.
    pub fn same_content(&self, other: &CodedScene) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.locations.points == other.locations.points
            && self.locations.bounds == other.locations.bounds
            && self.masks == other.masks
            && self.symbols == other.symbols
            && (0..3).all(|g| bits(&self.values[g]) == bits(&other.values[g]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub section: Section,
    pub bytes: usize,
    /// Estimated information content in bits, where the section has one.
    pub estimated_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub total_bytes: usize,
    /// Magic, version, header, header checksum and section framing.
    pub framing_bytes: usize,
    pub sections: Vec<SectionEntry>,
    /// Ideal code lengths under the quantized CDFs actually used.
    pub coded: RateReport,
    /// Code lengths under the continuous model.
    pub estimated: RateReport,
    pub total_anchors: usize,
    pub valid_anchors: usize,
}

impl EncodeReport {
    pub fn section(&self, s: Section) -> &SectionEntry {
        &self.sections[s as usize]
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub report: EncodeReport,
    pub scene: CodedScene,
}

#[derive(Debug, Clone)]
pub struct DecodedScene {
    pub header: StreamHeader,
    pub model: Model<f32>,
    pub scene: CodedScene,
    pub coded: RateReport,
}

impl DecodedScene {
    pub fn anchors(&self) -> AnchorSet {
        self.scene.anchors(self.header.layout)
    }
}

fn symbol_bounds(
    layout: AttributeLayout,
    symbols: &[Vec<i32>; 3],
    masks: &MaskState,
) -> Vec<(i16, i16)> {
    let mut out = Vec::with_capacity(layout.total());
    for g in AttributeGroup::ALL {
        let d = layout.dim(g);
        let v = &symbols[g.index()];
        let rows = v.len() / d.max(1);
        for j in 0..d {
            let (mut lo, mut hi) = (0i32, 0i32);
            for i in 0..rows {
                if g == AttributeGroup::Offset && !masks.offset_masks[(i * d + j) / 3] {
                    continue;
                }
                lo = lo.min(v[i * d + j]);
                hi = hi.max(v[i * d + j]);
            }
            out.push((lo as i16, hi as i16));
        }
    }
    out
}

/// CDFs for `rows × width` models of channels `first..first + width`.
fn build_cdfs(
    models: &[ChannelModel],
    width: usize,
    first: usize,
    steps: &[f64],
    bounds: &[(i16, i16)],
) -> Result<Vec<QuantizedCdf>, PipelineError> {
    models
        .par_iter()
        .enumerate()
        .map(|(idx, m)| {
            let (i, jj) = (idx / width, idx % width);
            let (lo, hi) = bounds[first + jj];
            QuantizedCdf::build(m, steps[i], lo as i32, hi as i32).map_err(PipelineError::from)
        })
        .collect()
}

struct GroupCoding<'a> {
    layout: AttributeLayout,
    hac: &'a HacOutputs<f32>,
    steps: &'a [[f32; 3]],
    bounds: &'a [(i16, i16)],
    masks: &'a MaskState,
}

impl GroupCoding<'_> {
    fn group_steps(&self, g: AttributeGroup) -> Vec<f64> {
        self.steps.iter().map(|s| s[g.index()] as f64).collect()
    }

    /// HAC models of scalings or offsets; pruned offsets are skipped.
    fn plain_models(&self, g: AttributeGroup) -> Vec<(usize, ChannelModel)> {
        let d = self.layout.dim(g);
        let start = self.layout.start(g);
        let rows = self.hac.mu.rows;
        let mut out = Vec::with_capacity(rows * d);
        for i in 0..rows {
            for j in 0..d {
                if g == AttributeGroup::Offset && !self.masks.offset_masks[(i * d + j) / 3] {
                    continue;
                }
                out.push((i * d + j, hac_channel(self.hac, i, start + j)));
            }
        }
        out
    }

    fn plain_cdfs(
        &self,
        g: AttributeGroup,
    ) -> Result<Vec<(usize, QuantizedCdf, ChannelModel)>, PipelineError> {
        let d = self.layout.dim(g);
        let start = self.layout.start(g);
        let st = self.group_steps(g);
        self.plain_models(g)
            .into_par_iter()
            .map(|(idx, m)| {
                let (lo, hi) = self.bounds[start + idx % d];
                let cdf = QuantizedCdf::build(&m, st[idx / d], lo as i32, hi as i32)?;
                Ok((idx, cdf, m))
            })
            .collect()
    }
}

fn prob_of(cdf: &QuantizedCdf, k: i32) -> f64 {
    cdf.count(k) as f64 / PROB_TOTAL as f64
}

/// Entropy-codes a scene with a frozen model. `masks` must cover every
/// anchor; anchors without a kept offset are left out of the stream.
pub fn encode(
    anchors: &AnchorSet,
    model: &Model<f32>,
    masks: &MaskState,
) -> Result<Encoded, PipelineError> {
    let layout = model.layout;
    if anchors.layout != layout {
        return Err(PipelineError::Mismatch(format!(
            "anchor layout {:?} does not match model layout {:?}",
            anchors.layout, layout
        )));
    }
    if masks.len() != anchors.len() || masks.offsets_per_anchor != layout.offsets_per_anchor {
        return Err(PipelineError::Mismatch(format!(
            "{} mask rows for {} anchors",
            masks.len(),
            anchors.len()
        )));
    }
    anchors.validate()?;
    let k = layout.offsets_per_anchor;

    let all = quantize_locations(&anchors.locations, &model.bounds);
    let keep: Vec<usize> = (0..all.len())
        .filter(|&s| masks.anchor_valid(all.order[s]))
        .collect();
    let locations = QuantizedLocations {
        bounds: model.bounds,
        points: keep.iter().map(|&s| all.points[s]).collect(),
        order: keep.iter().map(|&s| all.order[s]).collect(),
    };
    let idx = &locations.order;
    let m = idx.len();
    let coded_masks = MaskState {
        offsets_per_anchor: k,
        offset_masks: idx
            .iter()
            .flat_map(|&i| masks.row(i).iter().copied())
            .collect(),
    };

    let coords: Vec<[f32; 3]> = locations.normalized();
    let hac = model.hac(&coords)?;
    let st = steps(model, &hac);
    let mut symbols: [Vec<i32>; 3] = Default::default();
    let mut values: [Vec<f32>; 3] = Default::default();
    for g in AttributeGroup::ALL {
        let src = anchors.group(g);
        let d = layout.dim(g);
        let rows: Vec<f32> = idx
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let keep = (g == AttributeGroup::Offset).then_some(coded_masks.offset_masks.as_slice());
        let (s, v) = quantize_group(layout, g, &rows, &st, keep)?;
        symbols[g.index()] = s;
        values[g.index()] = v;
    }
    let bounds = symbol_bounds(layout, &symbols, &coded_masks);
    let ctx = GroupCoding {
        layout,
        hac: &hac,
        steps: &st,
        bounds: &bounds,
        masks: &coded_masks,
    };

    let mut est_probs: [Vec<f64>; 3] = AttributeGroup::ALL.map(|g| vec![1.0; m * layout.dim(g)]);
    let mut coded_probs = est_probs.clone();

    // features, chunk by chunk
    let da = layout.feature_dim;
    let fsteps = ctx.group_steps(AttributeGroup::Feature);
    let mut enc = RangeEncoder::new();
    if m > 0 {
        feature_pass(model, &hac, |range, models| {
            let w = range.len();
            let cdfs = build_cdfs(models, w, range.start, &fsteps, &bounds)?;
            let mut recon = Vec::with_capacity(m * w);
            for (n, cdf) in cdfs.iter().enumerate() {
                let (i, j) = (n / w, range.start + n % w);
                let sym = symbols[0][i * da + j];
                enc.encode_symbol(cdf, sym)?;
                let v = values[0][i * da + j];
                est_probs[0][i * da + j] = models[n].prob(v as f64, fsteps[i]);
                coded_probs[0][i * da + j] = prob_of(cdf, sym);
                recon.push(v);
            }
            Ok(recon)
        })?;
    }
    let feature_bytes = enc.finish();

    let mut plain = |g: AttributeGroup| -> Result<Vec<u8>, PipelineError> {
        let gi = g.index();
        let st = ctx.group_steps(g);
        let mut enc = RangeEncoder::new();
        for (idx, cdf, model) in ctx.plain_cdfs(g)? {
            let sym = symbols[gi][idx];
            enc.encode_symbol(&cdf, sym)?;
            let d = layout.dim(g);
            est_probs[gi][idx] = model.prob(values[gi][idx] as f64, st[idx / d]);
            coded_probs[gi][idx] = prob_of(&cdf, sym);
        }
        Ok(enc.finish())
    };
    let scaling_bytes = plain(AttributeGroup::Scaling)?;
    let offset_bytes = plain(AttributeGroup::Offset)?;

    let grid_bits = model.grid.bits(&model.store);
    let hf = binary_frequency(occurrence_frequency(&grid_bits));
    let grid_bytes = encode_binary(&grid_bits, hf)?;
    let ones = coded_masks.offset_masks.iter().filter(|&&b| b).count();
    let mask_h = if m == 0 {
        0.5
    } else {
        crate::tensor::clamp_frequency(ones as f64 / coded_masks.offset_masks.len() as f64)
    };
    let hm = binary_frequency(mask_h);
    let mask_bytes = encode_binary(&coded_masks.offset_masks, hm)?;
    let location_bytes = if m == 0 {
        Vec::new()
    } else {
        encode_locations(&locations)?
    };
    let weight_bytes = model.weight_bytes();

    let payloads: [&[u8]; 7] = [
        &weight_bytes,
        &grid_bytes,
        &mask_bytes,
        &location_bytes,
        &feature_bytes,
        &scaling_bytes,
        &offset_bytes,
    ];
    let mut body = Vec::new();
    let infos: Vec<SectionInfo> = payloads
        .iter()
        .map(|b| write_section(&mut body, b))
        .collect();
    let header = StreamHeader {
        total_anchors: anchors.len() as u32,
        valid_anchors: m as u32,
        layout,
        context: model.context.config.clone(),
        grid: model.grid.config.clone(),
        bounds: model.bounds,
        quant: model.quant,
        symbol_bounds: bounds,
        grid_frequency: hf as u16,
        mask_frequency: hm as u16,
        sections: infos,
    };
    let mut bytes = Vec::with_capacity(body.len() + 256);
    write_header(&mut bytes, &header);
    let framing = bytes.len() + 8 * 7;
    bytes.extend_from_slice(&body);

    let keep_masks = coded_masks.offset_masks.clone();
    let estimated = rate(
        layout,
        &est_probs[0],
        &est_probs[1],
        &est_probs[2],
        &keep_masks,
    );
    let coded = rate(
        layout,
        &coded_probs[0],
        &coded_probs[1],
        &coded_probs[2],
        &keep_masks,
    );
    let grid_est = hash_rate_bits(&grid_bits);
    let mask_est = binary_rate(ones as f64, keep_masks.len() as f64);
    let est_of = |s: Section| match s {
        Section::Grid => Some(grid_est),
        Section::Masks => Some(mask_est),
        Section::Features => Some(estimated.per_group[0]),
        Section::Scalings => Some(estimated.per_group[1]),
        Section::Offsets => Some(estimated.per_group[2]),
        _ => None,
    };
    let sections = Section::ALL
        .iter()
        .zip(payloads)
        .map(|(&s, b)| SectionEntry {
            section: s,
            bytes: b.len(),
            estimated_bits: est_of(s),
        })
        .collect();
    Ok(Encoded {
        report: EncodeReport {
            total_bytes: bytes.len(),
            framing_bytes: framing,
            sections,
            coded,
            estimated,
            total_anchors: anchors.len(),
            valid_anchors: m,
        },
        bytes,
        scene: CodedScene {
            locations,
            masks: coded_masks,
            symbols,
            values,
        },
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_header(out: &mut Vec<u8>, h: &StreamHeader) {
    let mut b = Vec::new();
    put_u32(&mut b, h.total_anchors);
    put_u32(&mut b, h.valid_anchors);
    put_u32(&mut b, h.layout.feature_dim as u32);
    put_u32(&mut b, h.layout.offsets_per_anchor as u32);
    put_u32(&mut b, h.context.chunks as u32);
    put_u32(&mut b, h.grid.feature_dim as u32);
    b.push(h.context.use_intra as u8);
    put_u32(&mut b, h.context.hac_hidden as u32);
    put_u32(&mut b, h.context.intra_hidden as u32);
    let g = &h.grid;
    for v in [
        g.levels_3d as u32,
        g.min_res_3d,
        g.max_res_3d,
        g.table_log2_3d,
        g.levels_2d as u32,
        g.min_res_2d,
        g.max_res_2d,
        g.table_log2_2d,
    ] {
        put_u32(&mut b, v);
    }
    for v in h.bounds.min.iter().chain(&h.bounds.max).chain(&h.quant.q0) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for &(lo, hi) in &h.symbol_bounds {
        b.extend_from_slice(&lo.to_le_bytes());
        b.extend_from_slice(&hi.to_le_bytes());
    }
    b.extend_from_slice(&h.grid_frequency.to_le_bytes());
    b.extend_from_slice(&h.mask_frequency.to_le_bytes());
    for s in &h.sections {
        put_u32(&mut b, s.offset);
        put_u32(&mut b, s.length);
        put_u32(&mut b, s.checksum);
    }
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(out, b.len() as u32);
    let crc = crc32fast::hash(&b);
    out.extend_from_slice(&b);
    put_u32(out, crc);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let s = self.data.get(self.pos..self.pos + n).ok_or_else(|| {
            PipelineError::Malformed(format!("header truncated at byte {}", self.pos))
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16, PipelineError> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, PipelineError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses and checks the header; returns it with the offset of the first
/// section.
pub fn read_header(data: &[u8]) -> Result<(StreamHeader, usize), PipelineError> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4).map_err(|_| PipelineError::Magic)? != MAGIC {
        return Err(PipelineError::Magic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(PipelineError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32()? as usize;
    let body = r.take(len)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(crate::range_coder::CoderError::Checksum { stored, computed }.into());
    }
    let start = r.pos;
    let mut h = Reader { data: body, pos: 0 };
    let total_anchors = h.u32()?;
    let valid_anchors = h.u32()?;
    let layout = AttributeLayout {
        feature_dim: h.u32()? as usize,
        offsets_per_anchor: h.u32()? as usize,
    };
    let chunks = h.u32()? as usize;
    let feature_dim = h.u32()? as usize;
    let use_intra = h.take(1)?[0] != 0;
    let context = ContextConfig {
        hac_hidden: h.u32()? as usize,
        intra_hidden: h.u32()? as usize,
        chunks,
        use_intra,
    };
    let grid = HashGridConfig {
        levels_3d: h.u32()? as usize,
        min_res_3d: h.u32()?,
        max_res_3d: h.u32()?,
        table_log2_3d: h.u32()?,
        levels_2d: h.u32()? as usize,
        min_res_2d: h.u32()?,
        max_res_2d: h.u32()?,
        table_log2_2d: h.u32()?,
        feature_dim,
    };
    grid.validate()
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    if layout.feature_dim == 0
        || layout.offsets_per_anchor == 0
        || layout.total() > 1 << 16
        || valid_anchors > total_anchors
        || (use_intra && (chunks == 0 || !layout.feature_dim.is_multiple_of(chunks)))
    {
        return Err(PipelineError::Malformed(
            "inconsistent header dimensions".into(),
        ));
    }
    let mut f = [0.0f32; 9];
    for v in &mut f {
        *v = h.f32()?;
    }
    let bounds = SceneBounds::new([f[0], f[1], f[2]], [f[3], f[4], f[5]])
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    let quant = QuantSpec {
        q0: [f[6], f[7], f[8]],
    };
    if quant.q0.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
        return Err(PipelineError::Malformed("non-positive base step".into()));
    }
    let mut symbol_bounds = Vec::with_capacity(layout.total());
    for _ in 0..layout.total() {
        let (lo, hi) = (h.i16()?, h.i16()?);
        if lo > 0 || hi < 0 {
            return Err(PipelineError::Malformed(
                "symbol range must contain 0".into(),
            ));
        }
        symbol_bounds.push((lo, hi));
    }
    let grid_frequency = h.u16()?;
    let mask_frequency = h.u16()?;
    if grid_frequency == 0 || mask_frequency == 0 {
        return Err(PipelineError::Malformed("zero binary frequency".into()));
    }
    let mut sections = Vec::with_capacity(7);
    for _ in 0..7 {
        sections.push(SectionInfo {
            offset: h.u32()?,
            length: h.u32()?,
            checksum: h.u32()?,
        });
    }
    if h.pos != body.len() {
        return Err(PipelineError::Malformed("trailing header bytes".into()));
    }
    Ok((
        StreamHeader {
            total_anchors,
            valid_anchors,
            layout,
            context,
            grid,
            bounds,
            quant,
            symbol_bounds,
            grid_frequency,
            mask_frequency,
            sections,
        },
        start,
    ))
}

/// Verifies every checksum and returns the section payloads in order.
fn sections<'a>(
    data: &'a [u8],
    header: &StreamHeader,
    start: usize,
) -> Result<Vec<&'a [u8]>, PipelineError> {
    let body = &data[start..];
    let mut out = Vec::with_capacity(7);
    let mut pos = 0usize;
    for info in &header.sections {
        if info.offset as usize != pos {
            return Err(PipelineError::Malformed(
                "section table out of order".into(),
            ));
        }
        let (payload, next) = read_section(body, pos)?;
        if payload.len() != info.length as usize || crc32fast::hash(payload) != info.checksum {
            return Err(PipelineError::Malformed(
                "section table disagrees with framing".into(),
            ));
        }
        out.push(payload);
        pos = next;
    }
    if pos != body.len() {
        return Err(PipelineError::Malformed(
            "trailing bytes after last section".into(),
        ));
    }
    Ok(out)
}

pub fn decode(data: &[u8]) -> Result<DecodedScene, PipelineError> {
    let (header, start) = read_header(data)?;
    let payload = sections(data, &header, start)?;
    let layout = header.layout;
    let k = layout.offsets_per_anchor;
    let m = header.valid_anchors as usize;

    let grid_bits = decode_binary(
        payload[1],
        header.grid_frequency as u32,
        header.grid.parameter_count(),
    )?;
    let model = Model::<f32>::from_parts(
        layout,
        header.grid.clone(),
        header.context.clone(),
        header.quant,
        header.bounds,
        &grid_bits,
        payload[0],
    )?;

    let masks = MaskState {
        offsets_per_anchor: k,
        offset_masks: decode_binary(payload[2], header.mask_frequency as u32, m * k)?,
    };
    if (0..m).any(|i| !masks.anchor_valid(i)) {
        return Err(PipelineError::Malformed(
            "coded anchor without a kept offset".into(),
        ));
    }
    let mut locations = if m == 0 {
        QuantizedLocations {
            bounds: header.bounds,
            points: Vec::new(),
            order: Vec::new(),
        }
    } else {
        decode_locations(payload[3])?
    };
    if locations.len() != m || locations.bounds != header.bounds {
        return Err(PipelineError::Malformed(
            "location section disagrees with header".into(),
        ));
    }
    locations.order = (0..m).collect();

    let mut symbols: [Vec<i32>; 3] = AttributeGroup::ALL.map(|g| vec![0; m * layout.dim(g)]);
    let mut values: [Vec<f32>; 3] = AttributeGroup::ALL.map(|g| vec![0.0; m * layout.dim(g)]);
    let mut coded_probs: [Vec<f64>; 3] = AttributeGroup::ALL.map(|g| vec![1.0; m * layout.dim(g)]);
    if m > 0 {
        let coords = locations.normalized();
        let hac = model.hac(&coords)?;
        let st = steps(&model, &hac);
        let bounds = &header.symbol_bounds;
        let ctx = GroupCoding {
            layout,
            hac: &hac,
            steps: &st,
            bounds,
            masks: &masks,
        };
        let da = layout.feature_dim;
        let fsteps = ctx.group_steps(AttributeGroup::Feature);
        let mut dec = RangeDecoder::new(payload[4]);
        feature_pass(&model, &hac, |range, models| {
            let w = range.len();
            let cdfs = build_cdfs(models, w, range.start, &fsteps, bounds)?;
            let mut recon = Vec::with_capacity(m * w);
            for (n, cdf) in cdfs.iter().enumerate() {
                let (i, j) = (n / w, range.start + n % w);
                let sym = dec.decode_symbol(cdf);
                let v = dequantize(sym, st[i][0]);
                symbols[0][i * da + j] = sym;
                values[0][i * da + j] = v;
                coded_probs[0][i * da + j] = prob_of(cdf, sym);
                recon.push(v);
            }
            Ok(recon)
        })?;
        for (g, data) in [
            (AttributeGroup::Scaling, payload[5]),
            (AttributeGroup::Offset, payload[6]),
        ] {
            let gi = g.index();
            let d = layout.dim(g);
            let mut dec = RangeDecoder::new(data);
            for (idx, cdf, _) in ctx.plain_cdfs(g)? {
                let sym = dec.decode_symbol(&cdf);
                symbols[gi][idx] = sym;
                values[gi][idx] = dequantize(sym, st[idx / d][gi]);
                coded_probs[gi][idx] = prob_of(&cdf, sym);
            }
        }
    }
    let coded = rate(
        layout,
        &coded_probs[0],
        &coded_probs[1],
        &coded_probs[2],
        &masks.offset_masks,
    );
    Ok(DecodedScene {
        header,
        model,
        scene: CodedScene {
            locations,
            masks,
            symbols,
            values,
        },
        coded,
    })
}

/// Section payload sizes of a stream without decoding it.
pub fn inspect_sections(data: &[u8]) -> Result<(StreamHeader, Vec<SectionEntry>), PipelineError> {
    let (header, start) = read_header(data)?;
    let payload = sections(data, &header, start)?;
    let entries = Section::ALL
        .iter()
        .zip(payload)
        .map(|(&s, p)| SectionEntry {
            section: s,
            bytes: p.len(),
            estimated_bits: None,
        })
        .collect();
    Ok((header, entries))
}
