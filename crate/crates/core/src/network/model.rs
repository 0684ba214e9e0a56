use rand::Rng;

use super::layers::{
    aggregate, c_relu, c_relu_backward, class_scores, conv3x3_linear, conv3x3_param_grads, localize,
    localize_backward, max_pool5, SignMask,
};
use super::{ConvWeights, FeatureMap, NetworkError, NetworkParams};
use crate::attributes::ClassMatrix;

/// A tensor for every learnable buffer of [`NetworkParams`]; used for both
/// gradients and momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub shared_kernel: Vec<f64>,
    pub shared_bias: Vec<f64>,
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
}

impl ParamTensors {
    pub fn zeros_like(p: &NetworkParams) -> Self {
        let [a, b, c, d] = p.learnable();
        Self {
            shared_kernel: vec![0.0; a.len()],
            shared_bias: vec![0.0; b.len()],
            top: vec![0.0; c.len()],
            bottom: vec![0.0; d.len()],
        }
    }

    pub fn buffers(&self) -> [&[f64]; 4] {
        [&self.shared_kernel, &self.shared_bias, &self.top, &self.bottom]
    }

    pub fn buffers_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.shared_kernel, &mut self.shared_bias, &mut self.top, &mut self.bottom]
    }

    pub fn matches(&self, p: &NetworkParams) -> bool {
        self.buffers().iter().zip(p.learnable()).all(|(a, b)| a.len() == b.len())
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, other: &ParamTensors, a: f64) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for buf in self.buffers_mut() {
            buf.iter_mut().for_each(|v| *v *= a);
        }
    }

    pub fn norm(&self) -> f64 {
        self.buffers().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
struct BranchCache {
    input: FeatureMap,
    argmax: Vec<usize>,
    pooled_area: usize,
    dropout: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: FeatureMap,
    shared_pre: Vec<f64>,
    shared_out: FeatureMap,
    theta: SignMask,
    top: BranchCache,
    bottom: BranchCache,
}

/// Scores of both branches, their mean, and what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub scores_top: Vec<f64>,
    pub scores_bottom: Vec<f64>,
    pub scores_avg: Vec<f64>,
    pub embed_top: Vec<f64>,
    pub embed_bottom: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl ForwardOutput {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Frees the intermediates; [`backward`] will then fail.
    pub fn drop_cache(&mut self) {
        self.cache = None;
    }
}

fn branch(
    input: FeatureMap,
    w: &ConvWeights,
    classes: &ClassMatrix,
    dropout: Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>, BranchCache), NetworkError> {
    let maps = localize(&input, w)?;
    let (pooled, argmax) = max_pool5(&maps);
    let embed: Vec<f64> = aggregate(&pooled).iter().zip(&dropout).map(|(e, m)| e * m).collect();
    let scores = class_scores(&embed, classes)?;
    let pooled_area = pooled.size() * pooled.size();
    Ok((scores, embed, BranchCache { input, argmax, pooled_area, dropout }))
}

fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

fn forward_impl(
    s: &FeatureMap,
    p: &NetworkParams,
    masks: Option<(Vec<f64>, Vec<f64>)>,
) -> Result<ForwardOutput, NetworkError> {
    let shared_pre = conv3x3_linear(s, &p.shared)?;
    let shared_out = FeatureMap {
        channels: s.channels(),
        size: s.size(),
        data: shared_pre.iter().map(|v| v.max(0.0)).collect(),
    };
    let d = p.embed_dim();
    let (mask_bottom, mask_top) = masks.unwrap_or_else(|| (vec![1.0; d], vec![1.0; d]));

    let (scores_bottom, embed_bottom, bottom) = branch(shared_out.clone(), &p.bottom, &p.class_matrix, mask_bottom)?;
    let (erased, theta) = c_relu(&shared_out, p.xi, p.polarity);
    let (scores_top, embed_top, top) = branch(erased, &p.top, &p.class_matrix, mask_top)?;

    let scores_avg = scores_top.iter().zip(&scores_bottom).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(ForwardOutput {
        scores_top,
        scores_bottom,
        scores_avg,
        embed_top,
        embed_bottom,
        cache: Some(ForwardCache { input: s.clone(), shared_pre, shared_out, theta, top, bottom }),
    })
}

/// Full forward pass. In training mode each branch embedding gets an
/// inverted-dropout mask drawn from `rng` (bottom first, then top); in
/// evaluation mode `rng` is not touched.
pub fn forward<R: Rng + ?Sized>(
    s: &FeatureMap,
    p: &NetworkParams,
    train_mode: bool,
    rng: &mut R,
) -> Result<ForwardOutput, NetworkError> {
    let masks = train_mode.then(|| {
        let d = p.embed_dim();
        let bottom = dropout_mask(d, p.dropout_rate, rng);
        let top = dropout_mask(d, p.dropout_rate, rng);
        (bottom, top)
    });
    forward_impl(s, p, masks)
}

/// Evaluation-mode forward pass (no dropout, no randomness).
pub fn forward_eval(s: &FeatureMap, p: &NetworkParams) -> Result<ForwardOutput, NetworkError> {
    forward_impl(s, p, None)
}

fn check_label(label: usize, seen: &[usize], num_classes: usize) -> Result<(), NetworkError> {
    if let Some(&bad) = seen.iter().find(|&&y| y >= num_classes) {
        return Err(NetworkError::ClassOutOfRange(bad));
    }
    if !seen.contains(&label) {
        return Err(NetworkError::Label { label, count: seen.len() });
    }
    Ok(())
}

/// Softmax cross-entropy over `seen`, plus its gradient w.r.t. every score.
fn cross_entropy(scores: &[f64], label: usize, seen: &[usize]) -> (f64, Vec<f64>) {
    let max = seen.iter().map(|&y| scores[y]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = seen.iter().map(|&y| (scores[y] - max).exp()).sum();
    let lse = max + z.ln();
    let mut grad = vec![0.0; scores.len()];
    for &y in seen {
        grad[y] = (scores[y] - lse).exp();
    }
    grad[label] -= 1.0;
    (lse - scores[label], grad)
}

/// Sum of the two branches' cross-entropies, softmax restricted to `seen`.
pub fn loss(out: &ForwardOutput, label: usize, seen: &[usize]) -> Result<f64, NetworkError> {
    check_label(label, seen, out.scores_top.len())?;
    let (l1, _) = cross_entropy(&out.scores_top, label, seen);
    let (l2, _) = cross_entropy(&out.scores_bottom, label, seen);
    Ok(l1 + l2)
}

/// Gradients of [`loss`] w.r.t. every learnable parameter.
pub fn backward(
    out: &ForwardOutput,
    label: usize,
    seen: &[usize],
    p: &NetworkParams,
) -> Result<ParamTensors, NetworkError> {
    check_label(label, seen, out.scores_top.len())?;
    let (_, d_top) = cross_entropy(&out.scores_top, label, seen);
    let (_, d_bottom) = cross_entropy(&out.scores_bottom, label, seen);
    backward_from_upstream(out, &d_top, &d_bottom, p)
}

fn branch_backward(
    cache: &BranchCache,
    w: &ConvWeights,
    classes: &ClassMatrix,
    d_scores: &[f64],
    d_w: &mut [f64],
) -> Vec<f64> {
    let d = classes.dim();
    let mut d_embed = vec![0.0; d];
    for (y, &g) in d_scores.iter().enumerate() {
        if g != 0.0 {
            for (de, &phi) in d_embed.iter_mut().zip(classes.row(y)) {
                *de += g * phi;
            }
        }
    }
    let h = cache.input.size();
    let mut d_maps = vec![0.0; d * h * h];
    for (c, (de, keep)) in d_embed.iter().zip(&cache.dropout).enumerate() {
        let g = de * keep / cache.pooled_area as f64;
        for &idx in &cache.argmax[c * cache.pooled_area..(c + 1) * cache.pooled_area] {
            d_maps[idx] += g;
        }
    }
    localize_backward(&cache.input, w, &d_maps, d_w)
}

/// Backward pass from arbitrary upstream gradients on the two score vectors.
pub fn backward_from_upstream(
    out: &ForwardOutput,
    d_scores_top: &[f64],
    d_scores_bottom: &[f64],
    p: &NetworkParams,
) -> Result<ParamTensors, NetworkError> {
    let cache = out.cache.as_ref().ok_or(NetworkError::MissingCache)?;
    let n = p.num_classes();
    for g in [d_scores_top, d_scores_bottom] {
        if g.len() != n {
            return Err(NetworkError::Shape { what: "score gradient", expected: n, found: g.len() });
        }
    }
    if cache.input.channels() != p.channels() || cache.bottom.dropout.len() != p.embed_dim() {
        return Err(NetworkError::Shape {
            what: "cached forward vs params",
            expected: p.channels(),
            found: cache.input.channels(),
        });
    }
    let mut grads = ParamTensors::zeros_like(p);

    let d_x_bottom = branch_backward(&cache.bottom, &p.bottom, &p.class_matrix, d_scores_bottom, &mut grads.bottom);
    let d_erased = branch_backward(&cache.top, &p.top, &p.class_matrix, d_scores_top, &mut grads.top);
    let d_x_top = c_relu_backward(&cache.shared_out, &cache.theta, &d_erased);

    let d_pre: Vec<f64> = d_x_bottom
        .iter()
        .zip(&d_x_top)
        .zip(&cache.shared_pre)
        .map(|((a, b), &z)| if z > 0.0 { a + b } else { 0.0 })
        .collect();
    conv3x3_param_grads(&cache.input, &d_pre, &mut grads.shared_kernel, &mut grads.shared_bias);
    Ok(grads)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::network::{Conv3x3, ErasePolarity};
    use crate::seed;
    use rand::Rng;

    fn random_params(rng: &mut impl Rng, k: usize, d: usize, classes: usize, xi: f64) -> NetworkParams {
        let mut shared = Conv3x3::identity(k);
        for o in 0..k {
            for i in 0..k {
                for dy in 0..3 {
                    for dx in 0..3 {
                        *shared.tap_mut(o, i, dy, dx) += rng.random_range(-0.3..0.3);
                    }
                }
            }
        }
        shared.bias_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        let top = ConvWeights::new(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bottom = ConvWeights::new(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let rows = (0..classes).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        NetworkParams::new(shared, top, bottom, xi, ClassMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_input(rng: &mut impl Rng, k: usize, h: usize) -> FeatureMap {
        FeatureMap::new(k, h, (0..k * h * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tied_branches_with_zero_xi_agree() {
        let mut rng = seed::rng(3);
        let mut p = random_params(&mut rng, 3, 4, 3, 0.0);
        p.top = p.bottom.clone();
        let s = random_input(&mut rng, 3, 6);
        let out = forward_eval(&s, &p).unwrap();
        assert_eq!(out.scores_top, out.scores_bottom);
        let g = backward(&out, 1, &[0, 1, 2], &p).unwrap();
        assert_eq!(g.top, g.bottom);
    }

    #[test]
    fn zero_input_gives_zero_scores() {
        let mut rng = seed::rng(4);
        let mut p = random_params(&mut rng, 2, 3, 2, 0.05);
        p.shared.bias_mut().iter_mut().for_each(|b| *b = 0.0);
        let out = forward_eval(&FeatureMap::zeros(2, 5), &p).unwrap();
        assert!(out.scores_top.iter().chain(&out.scores_bottom).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        // K=2, H=5, D=3, two classes, every stage recomputed with plain loops
        let mut rng = seed::rng(12);
        let (k, h, d) = (2usize, 5usize, 3usize);
        let p = random_params(&mut rng, k, d, 2, 0.3);
        let s = random_input(&mut rng, k, h);
        let out = forward_eval(&s, &p).unwrap();

        let mut x = vec![vec![vec![0.0; h]; h]; k];
        for o in 0..k {
            for r in 0..h {
                for c in 0..h {
                    let mut acc = p.shared.bias()[o];
                    for i in 0..k {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sr, sc) = (r as i64 + dy as i64 - 1, c as i64 + dx as i64 - 1);
                                if sr >= 0 && sc >= 0 && sr < h as i64 && sc < h as i64 {
                                    acc += p.shared.tap(o, i, dy, dx) * s.at(i, sr as usize, sc as usize);
                                }
                            }
                        }
                    }
                    x[o][r][c] = f64::max(acc, 0.0);
                }
            }
        }
        let mut y = x.clone();
        for o in 0..k {
            let mx = x[o].iter().flatten().fold(f64::MIN, |a, &b| a.max(b));
            for r in 0..h {
                for c in 0..h {
                    let v = x[o][r][c];
                    y[o][r][c] = v.max(0.0) * if v >= p.xi * mx { 1.0 } else { -1.0 };
                }
            }
        }
        let branch_scores = |inp: &Vec<Vec<Vec<f64>>>, w: &ConvWeights| -> Vec<f64> {
            let mut embed = vec![0.0; d];
            for cc in 0..d {
                // H = 5 so the pool covers the whole map
                let mut best = f64::MIN;
                for r in 0..h {
                    for c in 0..h {
                        let mut l = 0.0;
                        for kk in 0..k {
                            l += inp[kk][r][c] * w.get(kk, cc);
                        }
                        best = best.max(l);
                    }
                }
                embed[cc] = best;
            }
            (0..2)
                .map(|cls| (0..d).map(|i| embed[i] * p.class_matrix.row(cls)[i]).sum())
                .collect()
        };
        let top = branch_scores(&y, &p.top);
        let bottom = branch_scores(&x, &p.bottom);
        for i in 0..2 {
            assert!((out.scores_top[i] - top[i]).abs() < 1e-10);
            assert!((out.scores_bottom[i] - bottom[i]).abs() < 1e-10);
            assert!((out.scores_avg[i] - 0.5 * (top[i] + bottom[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_examples() {
        let uniform = ForwardOutput {
            scores_top: vec![0.7; 4],
            scores_bottom: vec![-1.0; 4],
            scores_avg: vec![0.0; 4],
            embed_top: vec![],
            embed_bottom: vec![],
            cache: None,
        };
        let l = loss(&uniform, 2, &[0, 1, 2, 3]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(loss(&uniform, 3, &[0, 1]), Err(NetworkError::Label { .. })));
        assert!(matches!(loss(&uniform, 0, &[0, 9]), Err(NetworkError::ClassOutOfRange(9))));

        let confident = ForwardOutput {
            scores_top: vec![0.0, 800.0, 0.0],
            scores_bottom: vec![0.0, 800.0, 0.0],
            ..uniform.clone()
        };
        assert!(loss(&confident, 1, &[0, 1, 2]).unwrap() < 1e-300);

        let mut rng = seed::rng(21);
        for _ in 0..20 {
            let top: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let bottom: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = ForwardOutput { scores_top: top.clone(), scores_bottom: bottom.clone(), ..uniform.clone() };
            let seen = [0, 2, 3];
            let lse = |v: &[f64]| seen.iter().map(|&i| v[i].exp()).sum::<f64>().ln();
            let expected = lse(&top) - top[2] + lse(&bottom) - bottom[2];
            assert!((loss(&out, 2, &seen).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_cache() {
        let mut rng = seed::rng(5);
        let p = random_params(&mut rng, 2, 3, 2, 0.01);
        let mut out = forward_eval(&random_input(&mut rng, 2, 5), &p).unwrap();
        out.drop_cache();
        assert_eq!(backward(&out, 0, &[0, 1], &p), Err(NetworkError::MissingCache));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seed::rng(6);
        let p = random_params(&mut rng, 3, 4, 3, 0.05);
        let out = forward_eval(&random_input(&mut rng, 3, 6), &p).unwrap();
        let g = backward_from_upstream(&out, &[0.0; 3], &[0.0; 3], &p).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let mut rng = seed::rng(7);
        let p = random_params(&mut rng, 3, 4, 3, 0.05);
        let s = random_input(&mut rng, 3, 7);
        let a = forward_eval(&s, &p).unwrap();
        let b = forward(&s, &p, false, &mut seed::rng(99)).unwrap();
        for (x, y) in a.scores_avg.iter().zip(&b.scores_avg) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn train_mode_dropout_is_seeded_and_scaled() {
        let mut rng = seed::rng(8);
        let p = random_params(&mut rng, 2, 6, 3, 0.05);
        let s = random_input(&mut rng, 2, 5);
        let a = forward(&s, &p, true, &mut seed::rng(1)).unwrap();
        let b = forward(&s, &p, true, &mut seed::rng(1)).unwrap();
        assert_eq!(a.scores_avg, b.scores_avg);
        let eval = forward_eval(&s, &p).unwrap();
        for (t, e) in a.embed_bottom.iter().zip(&eval.embed_bottom) {
            assert!(*t == 0.0 || (t - e / 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_polarity_changes_top_branch_only() {
        let mut rng = seed::rng(10);
        let mut p = random_params(&mut rng, 3, 4, 3, 0.05);
        let s = random_input(&mut rng, 3, 6);
        let a = forward_eval(&s, &p).unwrap();
        p.polarity = ErasePolarity::AboveThreshold;
        let b = forward_eval(&s, &p).unwrap();
        assert_eq!(a.scores_bottom, b.scores_bottom);
        assert_ne!(a.scores_top, b.scores_top);
    }
}
