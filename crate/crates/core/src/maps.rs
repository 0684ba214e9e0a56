//! Class-attribute activation maps and PGM export.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{localize, ConvWeights, FeatureMap, NetworkError};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("attribute index {index} out of range (D = {dim})")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("class attribute row has {found} entries, weights have {expected} outputs")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target size {0}x{1} must be positive and no smaller than the source")]
    BadTargetSize(usize, usize),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Row-major grayscale map, values in `[0, 1]` once normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// `(row, col)` of the largest value, first occurrence in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Min-max scaling; a constant map becomes all zeros.
    pub fn normalized(raw: Vec<f64>, width: usize, height: usize) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = if span > 0.0 { raw.iter().map(|v| (v - lo) / span).collect() } else { vec![0.0; raw.len()] };
        HeatMap { width, height, values }
    }
}

/// `L_attr` of the given weights over `s`, min-max normalized.
pub fn attribute_map(s: &FeatureMap, w: &ConvWeights, attr_index: usize) -> Result<HeatMap, MapError> {
    if attr_index >= w.out_channels() {
        return Err(MapError::IndexOutOfRange { index: attr_index, dim: w.out_channels() });
    }
    let maps = localize(s, w)?;
    Ok(HeatMap::normalized(maps.map(attr_index).to_vec(), maps.size(), maps.size()))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax(`class_attr_row`)-weighted sum of all localization maps, normalized.
pub fn average_map(s: &FeatureMap, w: &ConvWeights, class_attr_row: &[f64]) -> Result<HeatMap, MapError> {
    if class_attr_row.len() != w.out_channels() {
        return Err(MapError::DimensionMismatch { expected: w.out_channels(), found: class_attr_row.len() });
    }
    let maps = localize(s, w)?;
    let weights = softmax(class_attr_row);
    let mut raw = vec![0.0; maps.size() * maps.size()];
    for (c, &wc) in weights.iter().enumerate() {
        for (r, &v) in raw.iter_mut().zip(maps.map(c)) {
            *r += wc * v;
        }
    }
    Ok(HeatMap::normalized(raw, maps.size(), maps.size()))
}

/// Corner-aligned bilinear resize.
pub fn upsample(map: &HeatMap, out_w: usize, out_h: usize) -> Result<HeatMap, MapError> {
    if out_w == 0 || out_h == 0 || out_w < map.width || out_h < map.height {
        return Err(MapError::BadTargetSize(out_w, out_h));
    }
    let coord = |i: usize, out: usize, src: usize| {
        if out == 1 {
            (0, 0, 0.0)
        } else {
            let x = i as f64 * (src - 1) as f64 / (out - 1) as f64;
            let x0 = (x.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f64)
        }
    };
    let mut values = Vec::with_capacity(out_w * out_h);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, out_h, map.height);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, out_w, map.width);
            let top = map.at(r0, c0) * (1.0 - fc) + map.at(r0, c1) * fc;
            let bottom = map.at(r1, c0) * (1.0 - fc) + map.at(r1, c1) * fc;
            values.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Ok(HeatMap { width: out_w, height: out_h, values })
}

/// Binary PGM, maxval 255. Values are clamped to `[0, 1]` before scaling.
pub fn render_pgm(map: &HeatMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Reads the output of [`render_pgm`] back into `[0, 1]` values.
pub fn parse_pgm(bytes: &[u8]) -> Result<HeatMap, MapError> {
    let bad = |m: &str| MapError::Pgm(m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(MapError::Pgm(format!("expected {} pixels, found {}", width * height, raster.len())));
    }
    let values = raster.iter().map(|&b| f64::from(b) / maxval as f64).collect();
    Ok(HeatMap { width, height, values })
}
