#![allow(dead_code)]

use aeen::attributes::ClassMatrix;
use aeen::network::{self, Conv3x3, ConvWeights, FeatureMap, NetworkParams};
use aeen::seed;
use rand::Rng;

/// A random small head plus one input, label and seen set.
pub struct Instance {
    pub params: NetworkParams,
    pub input: FeatureMap,
    pub label: usize,
    pub seen: Vec<usize>,
}

pub fn random_instance(case: u64) -> Instance {
    let mut rng = seed::rng(seed::derive(0xFD, case));
    let k = rng.random_range(1..=4);
    let h = rng.random_range(1..=7);
    let d = rng.random_range(1..=6);
    let classes = rng.random_range(2..=5);
    let xi = rng.random_range(0.001..0.1);

    let mut shared = Conv3x3::identity(k);
    for o in 0..k {
        for i in 0..k {
            for dy in 0..3 {
                for dx in 0..3 {
                    *shared.tap_mut(o, i, dy, dx) += rng.random_range(-0.4..0.4);
                }
            }
        }
    }
    shared.bias_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
    let mut w = || ConvWeights::new(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (top, bottom) = (w(), w());
    let rows = (0..classes).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut params = NetworkParams::new(shared, top, bottom, xi, ClassMatrix::from_rows(rows).unwrap()).unwrap();
    params.dropout_rate = 0.4;

    let input = FeatureMap::new(k, h, (0..k * h * h).map(|_| rng.random_range(-0.5..1.0)).collect()).unwrap();
    let seen: Vec<usize> = (0..classes).filter(|&c| c <= 1 || rng.random_bool(0.8)).collect();
    let label = seen[rng.random_range(0..seen.len())];
    Instance { params, input, label, seen }
}

/// Loss at `params`; in training mode the dropout stream is re-seeded so the
/// mask is identical across evaluations.
pub fn loss_at(inst: &Instance, params: &NetworkParams, dropout_seed: Option<u64>) -> f64 {
    let out = match dropout_seed {
        Some(s) => network::forward(&inst.input, params, true, &mut seed::rng(s)).unwrap(),
        None => network::forward_eval(&inst.input, params).unwrap(),
    };
    network::loss(&out, inst.label, &inst.seen).unwrap()
}

/// Worst relative error between analytic and central-difference gradients
/// over every learnable entry. Relative error uses `max(|a|, |n|, 1e-6)` as
/// the denominator.
pub fn max_fd_rel_error(inst: &Instance, dropout_seed: Option<u64>, step: f64) -> f64 {
    let out = match dropout_seed {
        Some(s) => network::forward(&inst.input, &inst.params, true, &mut seed::rng(s)).unwrap(),
        None => network::forward_eval(&inst.input, &inst.params).unwrap(),
    };
    let grads = network::backward(&out, inst.label, &inst.seen, &inst.params).unwrap();
    let mut worst: f64 = 0.0;
    for (b, analytic) in grads.buffers().iter().enumerate() {
        for i in 0..analytic.len() {
            let mut plus = inst.params.clone();
            plus.learnable_mut()[b][i] += step;
            let mut minus = inst.params.clone();
            minus.learnable_mut()[b][i] -= step;
            let numeric = (loss_at(inst, &plus, dropout_seed) - loss_at(inst, &minus, dropout_seed)) / (2.0 * step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
