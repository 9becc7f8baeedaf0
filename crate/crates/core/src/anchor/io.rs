use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnchorError, AnchorSet, AttributeLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorFormat {
    Ply,
    Raw,
}

impl AnchorFormat {
    /// Guesses the format from the file extension; anything but `.ply` is raw.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => AnchorFormat::Ply,
            _ => AnchorFormat::Raw,
        }
    }
}

pub fn load_anchors(path: &Path, format: AnchorFormat) -> Result<AnchorSet, AnchorError> {
    let mut r = BufReader::new(File::open(path)?);
    let set = match format {
        AnchorFormat::Ply => read_ply(&mut r)?.0,
        AnchorFormat::Raw => read_raw(&mut r)?,
    };
    set.validate()?;
    Ok(set)
}

/// Loads a PLY and also returns every column that is not an anchor
/// attribute, by name, in header order.
pub fn load_ply_with_extras(
    path: &Path,
) -> Result<(AnchorSet, Vec<(String, Vec<f32>)>), AnchorError> {
    let (set, extras) = read_ply(&mut BufReader::new(File::open(path)?))?;
    set.validate()?;
    Ok((set, extras))
}

pub fn save_anchors(set: &AnchorSet, path: &Path, format: AnchorFormat) -> Result<(), AnchorError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        AnchorFormat::Ply => write_ply(set, &[], &mut w)?,
        AnchorFormat::Raw => write_raw(set, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn column_names(layout: AttributeLayout) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..layout.feature_dim).map(|i| format!("f_anchor_{i}")));
    names.extend((0..AttributeLayout::SCALING_DIM).map(|i| format!("l_{i}")));
    names.extend((0..3 * layout.offsets_per_anchor).map(|i| format!("o_{i}")));
    names
}

fn row_values(set: &AnchorSet, i: usize) -> impl Iterator<Item = f32> + '_ {
    let l = set.layout;
    set.locations[i]
        .into_iter()
        .chain(
            set.features[i * l.feature_dim..(i + 1) * l.feature_dim]
                .iter()
                .copied(),
        )
        .chain(set.scalings[i * 6..(i + 1) * 6].iter().copied())
        .chain(
            set.offsets[i * 3 * l.offsets_per_anchor..(i + 1) * 3 * l.offsets_per_anchor]
                .iter()
                .copied(),
        )
}

/// Binary little-endian PLY. `extra` appends named per-row float columns
/// (each of length N) after the attribute columns.
pub fn write_ply<W: Write>(
    set: &AnchorSet,
    extra: &[(String, Vec<f32>)],
    w: &mut W,
) -> Result<(), AnchorError> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", set.len())?;
    for name in column_names(set.layout) {
        writeln!(w, "property float {name}")?;
    }
    for (name, _) in extra {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    let mut buf = Vec::new();
    for i in 0..set.len() {
        buf.clear();
        for v in row_values(set, i).chain(extra.iter().map(|(_, col)| col[i])) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn parse_indexed(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

type Columns = Vec<(String, Vec<f32>)>;

fn read_ply<R: BufRead>(r: &mut R) -> Result<(AnchorSet, Columns), AnchorError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, AnchorError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(AnchorError::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(r)? != "ply" {
        return Err(AnchorError::Format("missing `ply` magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => {}
            ["format", f, ..] => {
                return Err(AnchorError::Format(format!("unsupported PLY format `{f}`")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse()
                        .map_err(|_| AnchorError::Format(format!("bad vertex count `{n}`")))?,
                );
                in_vertex = true;
            }
            ["element", other, ..] => {
                return Err(AnchorError::Format(format!(
                    "unsupported element `{other}`"
                )))
            }
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32") {
                    return Err(AnchorError::Format(format!(
                        "property `{name}` has type `{ty}`; only float is supported"
                    )));
                }
                props.push(name.to_string());
            }
            _ => {
                return Err(AnchorError::Format(format!(
                    "unrecognized header line `{l}`"
                )))
            }
        }
    }
    let n = count.ok_or_else(|| AnchorError::Format("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let need = |name: &str| col(name).ok_or_else(|| AnchorError::MissingChannel(name.to_string()));

    let dim_of = |prefix: &str| {
        props
            .iter()
            .filter_map(|p| parse_indexed(p, prefix))
            .max()
            .map_or(0, |m| m + 1)
    };
    let feature_dim = dim_of("f_anchor_");
    let offset_dim = dim_of("o_");
    if feature_dim == 0 {
        return Err(AnchorError::MissingChannel("f_anchor_0".into()));
    }
    if offset_dim == 0 {
        return Err(AnchorError::MissingChannel("o_0".into()));
    }
    if offset_dim % 3 != 0 {
        return Err(AnchorError::MissingChannel(format!("o_{offset_dim}")));
    }
    let layout = AttributeLayout {
        feature_dim,
        offsets_per_anchor: offset_dim / 3,
    };
    let order: Vec<usize> = column_names(layout)
        .iter()
        .map(|c| need(c))
        .collect::<Result<_, _>>()?;
    let extra_cols: Vec<usize> = (0..props.len()).filter(|c| !order.contains(c)).collect();
    let mut extras: Columns = extra_cols
        .iter()
        .map(|&c| (props[c].clone(), Vec::with_capacity(n)))
        .collect();

    let width = props.len();
    let mut raw = vec![0u8; n * width * 4];
    r.read_exact(&mut raw)
        .map_err(|_| AnchorError::Format(format!("payload shorter than {n} rows")))?;
    let mut set = AnchorSet {
        layout,
        locations: Vec::with_capacity(n),
        features: Vec::with_capacity(n * feature_dim),
        scalings: Vec::with_capacity(n * 6),
        offsets: Vec::with_capacity(n * offset_dim),
    };
    for i in 0..n {
        let row = &raw[i * width * 4..(i + 1) * width * 4];
        let at = |c: usize| f32::from_le_bytes(row[c * 4..c * 4 + 4].try_into().unwrap());
        let vals: Vec<f32> = order.iter().map(|&c| at(c)).collect();
        set.locations.push([vals[0], vals[1], vals[2]]);
        set.features.extend_from_slice(&vals[3..3 + feature_dim]);
        set.scalings
            .extend_from_slice(&vals[3 + feature_dim..9 + feature_dim]);
        set.offsets.extend_from_slice(&vals[9 + feature_dim..]);
        for (e, &c) in extras.iter_mut().zip(&extra_cols) {
            e.1.push(at(c));
        }
    }
    Ok((set, extras))
}

fn write_raw<W: Write>(set: &AnchorSet, w: &mut W) -> Result<(), AnchorError> {
    for v in [
        set.len(),
        set.layout.feature_dim,
        set.layout.offsets_per_anchor,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for i in 0..set.len() {
        buf.clear();
        for v in row_values(set, i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_raw<R: Read>(r: &mut R) -> Result<AnchorSet, AnchorError> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| AnchorError::Format("raw header truncated".into()))?;
    let word = |i: usize| u32::from_le_bytes(head[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (n, feature_dim, k) = (word(0), word(1), word(2));
    if feature_dim == 0 || k == 0 || feature_dim > 1 << 16 || k > 1 << 12 {
        return Err(AnchorError::Format(format!(
            "raw header D^a={feature_dim}, K={k}"
        )));
    }
    let layout = AttributeLayout {
        feature_dim,
        offsets_per_anchor: k,
    };
    let width = 3 + layout.total();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * width * 4 {
        return Err(AnchorError::Format(format!(
            "raw payload has {} bytes, expected {}",
            bytes.len(),
            n * width * 4
        )));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut set = AnchorSet {
        layout,
        locations: Vec::with_capacity(n),
        features: Vec::with_capacity(n * feature_dim),
        scalings: Vec::with_capacity(n * 6),
        offsets: Vec::with_capacity(n * 3 * k),
    };
    for row in vals.chunks_exact(width) {
        set.locations.push([row[0], row[1], row[2]]);
        set.features.extend_from_slice(&row[3..3 + feature_dim]);
        set.scalings
            .extend_from_slice(&row[3 + feature_dim..9 + feature_dim]);
        set.offsets.extend_from_slice(&row[9 + feature_dim..]);
    }
    Ok(set)
}
