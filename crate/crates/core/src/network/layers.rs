//! Forward primitives of the head and their local backward rules.

use super::{Conv3x3, ConvWeights, ErasePolarity, FeatureMap, LocalizationMaps, NetworkError};
use crate::attributes::ClassMatrix;

/// Nominal max-pooling window; shrunk to `H` when the map is smaller.
pub const POOL_KERNEL: usize = 5;

/// Pre-activation of the shared 3×3 convolution (stride 1, zero padding 1).
pub(crate) fn conv3x3_linear(s: &FeatureMap, conv: &Conv3x3) -> Result<Vec<f64>, NetworkError> {
    let k = conv.channels();
    if s.channels() != k {
        return Err(NetworkError::Shape { what: "3x3 conv input channels", expected: k, found: s.channels() });
    }
    let h = s.size();
    let mut out = vec![0.0; k * h * h];
    for o in 0..k {
        let plane = &mut out[o * h * h..(o + 1) * h * h];
        plane.iter_mut().for_each(|v| *v = conv.bias()[o]);
        for i in 0..k {
            let src = s.channel(i);
            for dy in 0..3 {
                for dx in 0..3 {
                    let w = conv.tap(o, i, dy, dx);
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let sr = r + dy;
                        if sr < 1 || sr > h {
                            continue;
                        }
                        for c in 0..h {
                            let sc = c + dx;
                            if sc < 1 || sc > h {
                                continue;
                            }
                            plane[r * h + c] += w * src[(sr - 1) * h + sc - 1];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Shared 3×3 convolution followed by ReLU; output has the input's spatial size.
pub fn conv3x3(s: &FeatureMap, conv: &Conv3x3) -> Result<FeatureMap, NetworkError> {
    let mut z = conv3x3_linear(s, conv)?;
    z.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(FeatureMap { channels: conv.channels(), size: s.size(), data: z })
}

/// Kernel and bias gradients given the gradient at the pre-activation.
pub(crate) fn conv3x3_param_grads(s: &FeatureMap, dz: &[f64], d_kernel: &mut [f64], d_bias: &mut [f64]) {
    let k = s.channels();
    let h = s.size();
    for o in 0..k {
        let g = &dz[o * h * h..(o + 1) * h * h];
        d_bias[o] += g.iter().sum::<f64>();
        for i in 0..k {
            let src = s.channel(i);
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..h {
                        let sr = r + dy;
                        if sr < 1 || sr > h {
                            continue;
                        }
                        for c in 0..h {
                            let sc = c + dx;
                            if sc < 1 || sc > h {
                                continue;
                            }
                            acc += g[r * h + c] * src[(sr - 1) * h + sc - 1];
                        }
                    }
                    d_kernel[((o * k + i) * 3 + dy) * 3 + dx] += acc;
                }
            }
        }
    }
}

/// Per-element `θ ∈ {+1, −1}` recorded by [`c_relu`].
#[derive(Debug, Clone, PartialEq)]
pub struct SignMask {
    theta: Vec<i8>,
}

impl SignMask {
    pub fn theta(&self) -> &[i8] {
        &self.theta
    }
}

/// `max(x, 0) · θ_δk(x)` with `δ_k = ξ · max(S_k)` per channel.
pub fn c_relu(s: &FeatureMap, xi: f64, polarity: ErasePolarity) -> (FeatureMap, SignMask) {
    let area = s.size() * s.size();
    let mut out = Vec::with_capacity(s.data().len());
    let mut theta = Vec::with_capacity(s.data().len());
    for k in 0..s.channels() {
        let ch = s.channel(k);
        let delta = xi * ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &x in &ch[..area] {
            let above = x >= delta;
            let t: i8 = match (polarity, above) {
                (ErasePolarity::BelowThreshold, true) | (ErasePolarity::AboveThreshold, false) => 1,
                _ => -1,
            };
            theta.push(t);
            out.push(x.max(0.0) * f64::from(t));
        }
    }
    (FeatureMap { channels: s.channels(), size: s.size(), data: out }, SignMask { theta })
}

/// Straight-through C-ReLU backward: `θ` where `x > 0`, zero elsewhere.
pub(crate) fn c_relu_backward(input: &FeatureMap, mask: &SignMask, upstream: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(&mask.theta)
        .zip(upstream)
        .map(|((&x, &t), &g)| if x > 0.0 { g * f64::from(t) } else { 0.0 })
        .collect()
}

/// `L_c = Σ_k S_k · W[k][c]`, i.e. a 1×1 convolution.
pub fn localize(s: &FeatureMap, w: &ConvWeights) -> Result<LocalizationMaps, NetworkError> {
    if s.channels() != w.in_channels() {
        return Err(NetworkError::Shape {
            what: "1x1 conv input channels",
            expected: w.in_channels(),
            found: s.channels(),
        });
    }
    let area = s.size() * s.size();
    let d = w.out_channels();
    let mut data = vec![0.0; d * area];
    for k in 0..s.channels() {
        let src = s.channel(k);
        for c in 0..d {
            let wkc = w.get(k, c);
            if wkc == 0.0 {
                continue;
            }
            let dst = &mut data[c * area..(c + 1) * area];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o += wkc * x;
            }
        }
    }
    Ok(LocalizationMaps::from_raw(d, s.size(), data))
}

/// Gradients of [`localize`] w.r.t. its input and weights.
pub(crate) fn localize_backward(s: &FeatureMap, w: &ConvWeights, d_maps: &[f64], d_w: &mut [f64]) -> Vec<f64> {
    let area = s.size() * s.size();
    let d = w.out_channels();
    let mut d_s = vec![0.0; s.data().len()];
    for k in 0..s.channels() {
        let src = s.channel(k);
        let ds = &mut d_s[k * area..(k + 1) * area];
        for c in 0..d {
            let g = &d_maps[c * area..(c + 1) * area];
            d_w[k * d + c] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            let wkc = w.get(k, c);
            for (o, &gv) in ds.iter_mut().zip(g) {
                *o += wkc * gv;
            }
        }
    }
    d_s
}

/// Stride-1, unpadded max pooling with window `min(5, H)`.
///
/// Returns the pooled maps and, for every output cell, the flat index into
/// the input of the first (row-major) maximum in its window.
pub fn max_pool5(maps: &LocalizationMaps) -> (LocalizationMaps, Vec<usize>) {
    let h = maps.size();
    let kk = POOL_KERNEL.min(h);
    let oh = h - kk + 1;
    let mut out = Vec::with_capacity(maps.count() * oh * oh);
    let mut argmax = Vec::with_capacity(maps.count() * oh * oh);
    for c in 0..maps.count() {
        let base = c * h * h;
        let m = maps.map(c);
        for r in 0..oh {
            for col in 0..oh {
                let mut best = r * h + col;
                for dr in 0..kk {
                    for dc in 0..kk {
                        let idx = (r + dr) * h + col + dc;
                        if m[idx] > m[best] {
                            best = idx;
                        }
                    }
                }
                out.push(m[best]);
                argmax.push(base + best);
            }
        }
    }
    (LocalizationMaps::from_raw(maps.count(), oh, out), argmax)
}

/// Spatial mean of each map.
pub fn aggregate(maps: &LocalizationMaps) -> Vec<f64> {
    let area = (maps.size() * maps.size()) as f64;
    (0..maps.count()).map(|c| maps.map(c).iter().sum::<f64>() / area).collect()
}

/// `score_y = ⟨embed, row_y⟩` for every class.
pub fn class_scores(embed: &[f64], classes: &ClassMatrix) -> Result<Vec<f64>, NetworkError> {
    if embed.len() != classes.dim() {
        return Err(NetworkError::Shape { what: "embedding", expected: classes.dim(), found: embed.len() });
    }
    Ok((0..classes.num_classes())
        .map(|y| classes.row(y).iter().zip(embed).map(|(a, b)| a * b).sum())
        .collect())
}

/// Highest-scoring class among `candidates`; ties go to the lowest index.
pub fn predict(scores: &[f64], candidates: &[usize]) -> Result<usize, NetworkError> {
    let mut best: Option<usize> = None;
    for &y in candidates {
        if y >= scores.len() {
            return Err(NetworkError::ClassOutOfRange(y));
        }
        best = match best {
            Some(b) if scores[b] > scores[y] || (scores[b] == scores[y] && b < y) => Some(b),
            _ => Some(y),
        };
    }
    best.ok_or(NetworkError::EmptyCandidates)
}
