//! Style vectors (global average pooling of low-resolution activations) and
//! their exact t-SNE embedding, with CSV/SVG export.

mod tsne;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use tsne::{
    conditional_probabilities, joint_probabilities, kl_divergence, kl_gradient, low_dim_affinities,
    pairwise_sq_distances, tsne, Conditionals, TsneConfig, TsneResult,
};

use crate::cvt::ops::{conv2d, ConvSpec, FeatureMap};
use crate::imaging::{write_atomic, ImagingError, RasterImage};

pub const CYTA_MAGIC: &[u8; 4] = b"CYTA";
pub const CYTA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StyleError {
    #[error("empty activation map")]
    EmptyMap,
    #[error("t-SNE needs at least 5 points, got {0}")]
    InsufficientData(usize),
    #[error("invalid t-SNE config: {0}")]
    Config(String),
    #[error("inconsistent style vectors: {0}")]
    Dimension(String),
    #[error("bad feature input {path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

impl From<std::io::Error> for StyleError {
    fn from(e: std::io::Error) -> Self {
        StyleError::Imaging(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    pub values: Vec<f64>,
    pub source_id: String,
    pub group: String,
}

/// Per-channel spatial mean of a channel-major activation map.
pub fn style_vector(map: &FeatureMap) -> Result<Vec<f64>, StyleError> {
    let hw = map.height * map.width;
    if map.channels == 0 || hw == 0 || map.data.len() != map.channels * hw {
        return Err(StyleError::EmptyMap);
    }
    Ok(map
        .data
        .chunks_exact(hw)
        .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
        .collect())
}

/// `.cyta` activation dump: magic, version, height, width, channels (u32
/// little-endian), then one f32 plane per channel.
pub fn encode_cyta(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * map.data.len());
    out.extend_from_slice(CYTA_MAGIC);
    for v in [
        CYTA_VERSION,
        map.height as u32,
        map.width as u32,
        map.channels as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cyta(bytes: &[u8], origin: &Path) -> Result<FeatureMap, StyleError> {
    let fail = |reason: String| StyleError::Input {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..4] != CYTA_MAGIC {
        return Err(fail("not a .cyta container".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != CYTA_VERSION as usize {
        return Err(fail(format!("unsupported version {}", word(4))));
    }
    let (height, width, channels) = (word(8), word(12), word(16));
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| fail("dimension overflow".into()))?;
    if bytes.len() - 20 != 4 * n {
        return Err(fail(format!(
            "payload is {} bytes, expected {}",
            bytes.len() - 20,
            4 * n
        )));
    }
    Ok(FeatureMap {
        channels,
        height,
        width,
        data: bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

pub fn write_cyta(map: &FeatureMap, path: &Path) -> Result<(), StyleError> {
    write_atomic(path, &encode_cyta(map))?;
    Ok(())
}

pub fn read_cyta(path: &Path) -> Result<FeatureMap, StyleError> {
    decode_cyta(&std::fs::read(path)?, path)
}

/// Fallback activations when no trained network is available: three fixed,
/// seeded random 3x3 stride-2 convolutions (16, 32, 64 channels) with ReLU,
/// applied to the image scaled to [0, 1]. The output is the lowest
/// resolution map, at 1/8 of the input size.
pub fn random_projection_features(
    image: &RasterImage,
    seed: u64,
) -> Result<FeatureMap, StyleError> {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut x = FeatureMap::zeros(c, h, w);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                x.data[(ch * h + y) * w + xx] = image.get(xx, y, ch) as f32 / 255.0;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = c;
    for cout in [16, 32, 64] {
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 2,
            padding: 1,
            groups: 1,
        };
        let normal = Normal::new(0.0, (2.0 / (9.0 * cin as f64)).sqrt()).expect("valid sigma");
        let weight: Vec<f32> = (0..spec.weight_len())
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        x = conv2d(&x, &weight, None, &spec).map_err(|e| StyleError::Dimension(e.to_string()))?;
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        cin = cout;
    }
    Ok(x)
}

/// Loads style vectors from a CSV (`id,group,v0,v1,...`, header required)
/// or from a directory of `.cyta` dumps. In a directory, files directly
/// inside belong to group `default`; files in a subdirectory take its name
/// as their group. IDs are file stems.
pub fn load_style_vectors(path: &Path) -> Result<Vec<StyleVector>, StyleError> {
    if path.is_dir() {
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_dir() {
                let group = p
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                for inner in std::fs::read_dir(&p)? {
                    let q = inner?.path();
                    if q.extension().is_some_and(|e| e == "cyta") {
                        files.push((group.clone(), q));
                    }
                }
            } else if p.extension().is_some_and(|e| e == "cyta") {
                files.push(("default".into(), p));
            }
        }
        files.sort();
        files
            .into_iter()
            .map(|(group, p)| {
                Ok(StyleVector {
                    values: style_vector(&read_cyta(&p)?)?,
                    source_id: p
                        .file_stem()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                    group,
                })
            })
            .collect()
    } else {
        let fail = |reason: String| StyleError::Input {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| fail(e.to_string()))?;
        let mut out = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| fail(e.to_string()))?;
            if row.len() < 3 {
                return Err(fail(format!(
                    "row {}: need id, group and at least one value",
                    line + 1
                )));
            }
            let values = row
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| fail(format!("row {}: {e}", line + 1)))?;
            out.push(StyleVector {
                values,
                source_id: row[0].to_string(),
                group: row[1].to_string(),
            });
        }
        Ok(out)
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub const SVG_SIZE: f64 = 600.0;
const SVG_MARGIN: f64 = 20.0;

/// Writes `id,x,y,group` rows.
pub fn embedding_csv(
    ids: &[String],
    points: &[[f64; 2]],
    groups: &[String],
) -> Result<Vec<u8>, StyleError> {
    if ids.len() != points.len() || groups.len() != points.len() {
        return Err(StyleError::Dimension(
            "ids, points and groups differ in length".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| StyleError::Dimension(e.to_string());
    w.write_record(["id", "x", "y", "group"]).map_err(io)?;
    for ((id, p), g) in ids.iter().zip(points).zip(groups) {
        w.write_record([
            id.as_str(),
            &p[0].to_string(),
            &p[1].to_string(),
            g.as_str(),
        ])
        .map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| StyleError::Dimension(e.to_string()))
}

/// Square scatter plot, one colour per group (sorted by name, palette
/// cycling after ten), with a legend.
pub fn embedding_svg(points: &[[f64; 2]], groups: &[String]) -> String {
    let colours: BTreeMap<&str, &str> = {
        let mut names: Vec<&str> = groups.iter().map(String::as_str).collect();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .enumerate()
            .map(|(i, g)| (g, PALETTE[i % PALETTE.len()]))
            .collect()
    };
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (SVG_SIZE - 2.0 * SVG_MARGIN) / span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, g) in points.iter().zip(groups) {
        let cx = SVG_MARGIN + (p[0] - x0) * scale;
        let cy = SVG_SIZE - SVG_MARGIN - (p[1] - y0) * scale;
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="3" fill="{}"/>"#,
            colours[g.as_str()]
        );
    }
    for (i, (g, c)) in colours.iter().enumerate() {
        let y = 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="6" y="{}" width="10" height="10" fill="{c}"/>"#,
            y - 9.0
        );
        let _ = writeln!(
            s,
            r#"<text x="20" y="{y}" font-size="11" font-family="sans-serif">{}</text>"#,
            xml_escape(g)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes the CSV and, when given, the SVG scatter.
pub fn export_embedding(
    ids: &[String],
    points: &[[f64; 2]],
    groups: &[String],
    csv_path: &Path,
    svg_path: Option<&Path>,
) -> Result<(), StyleError> {
    write_atomic(csv_path, &embedding_csv(ids, points, groups)?)?;
    if let Some(p) = svg_path {
        write_atomic(p, embedding_svg(points, groups).as_bytes())?;
    }
    Ok(())
}
