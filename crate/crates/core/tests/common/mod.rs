//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use drlab::encoder::{
    batch_loss, BatchNegative, EncoderConfig, EncoderModel, LossOptions, TrainBatch, TrainExample,
};
use drlab::mining::NegativeSource;
use rand::Rng;

/// Below this magnitude a gradient entry is compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Fourth-order central finite difference for every parameter. The step is
/// a power of two and `random_model` quantizes parameters to a coarser grid,
/// so every shifted f32 value is exact.
pub fn finite_difference(model: &EncoderModel, batch: &TrainBatch, opts: &LossOptions) -> Vec<f64> {
    let step = FD_STEP;
    let mut m = model.clone();
    let n = m.params.len();
    let mut out = Vec::with_capacity(n);
    let at = |m: &mut EncoderModel, i: usize, x: f32| {
        *m.params.get_flat_mut(i).unwrap() = x;
        batch_loss(m, batch, opts).unwrap()
    };
    for i in 0..n {
        let x = *m.params.get_flat(i).unwrap();
        let d1 = at(&mut m, i, x + step) - at(&mut m, i, x - step);
        let d2 = at(&mut m, i, x + 2.0 * step) - at(&mut m, i, x - 2.0 * step);
        at(&mut m, i, x);
        out.push((8.0 * d1 - d2) / (12.0 * f64::from(step)));
    }
    out
}

pub const FD_STEP: f32 = 1.0 / 1024.0;
const PARAM_GRID: f32 = 1.0 / 65536.0;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// A random model with parameters spread over [-scale, scale] so tanh is
/// exercised away from its linear region.
pub fn random_model<R: Rng>(rng: &mut R, max_dim: usize, scale: f32) -> EncoderModel {
    let cfg = EncoderConfig {
        vocab_hash_size: rng.gen_range(4..=max_dim),
        embed_dim: rng.gen_range(1..=max_dim),
        hidden_dim: rng.gen_range(1..=max_dim),
        out_dim: rng.gen_range(1..=max_dim),
    };
    let mut m = EncoderModel::new(cfg, rng.gen()).unwrap();
    for i in 0..m.params.len() {
        let x: f32 = rng.gen_range(-scale..=scale);
        *m.params.get_flat_mut(i).unwrap() = (x / PARAM_GRID).round() * PARAM_GRID;
    }
    m
}

pub fn random_tokens<R: Rng>(rng: &mut R, vocab: usize) -> Vec<u32> {
    (0..rng.gen_range(1..=5))
        .map(|_| rng.gen_range(0..vocab as u32))
        .collect()
}

pub fn random_batch<R: Rng>(rng: &mut R, vocab: usize) -> TrainBatch {
    let b = rng.gen_range(1..=3);
    let n_neg = rng.gen_range(1..=4);
    let examples = (0..b)
        .map(|i| TrainExample {
            query_id: format!("q{i}"),
            query_tokens: random_tokens(rng, vocab),
            positive_id: format!("p{i}"),
            positive_tokens: random_tokens(rng, vocab),
            negatives: (0..n_neg)
                .map(|j| BatchNegative {
                    doc_id: format!("n{i}-{j}"),
                    tokens: random_tokens(rng, vocab),
                    source: NegativeSource::QueryAnn,
                })
                .collect(),
        })
        .collect();
    TrainBatch { examples }
}

/// Brute-force top-k by dot product with id tie-break, skipping nothing.
pub fn brute_topk(
    ids: &[String],
    rows: &[f32],
    dim: usize,
    probe: &[f32],
    k: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = rows[i * dim..(i + 1) * dim]
                .iter()
                .zip(probe)
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            (id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
