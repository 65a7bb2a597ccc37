//! Softmax cross-entropy ranking loss with analytic gradients.
//!
//! Per example: `L = -log(exp(s+/τ) / (exp(s+/τ) + Σ_j exp(s_j/τ)))`,
//! averaged over the batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{dot, EncoderModel, Forward, Gradient};
use crate::error::{Error, Result};
use crate::mining::NegativeSource;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNegative {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub source: NegativeSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub query_id: String,
    pub query_tokens: Vec<u32>,
    pub positive_id: String,
    pub positive_tokens: Vec<u32>,
    pub negatives: Vec<BatchNegative>,
}

/// One `(q, d+, {d-})` tuple per query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    pub fn n_neg(&self) -> usize {
        self.examples.first().map_or(0, |e| e.negatives.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let n = self.n_neg();
        for ex in &self.examples {
            if ex.negatives.len() != n {
                return Err(Error::InvalidInput(format!(
                    "query `{}` has {} negatives, batch expects {n}",
                    ex.query_id,
                    ex.negatives.len()
                )));
            }
            if let Some(neg) = ex.negatives.iter().find(|d| d.doc_id == ex.positive_id) {
                return Err(Error::InvalidInput(format!(
                    "query `{}` lists its positive `{}` as a negative",
                    ex.query_id, neg.doc_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub temperature: f64,
    /// Add the other examples' positives as extra negatives.
    pub in_batch_negatives: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            in_batch_negatives: false,
        }
    }
}

struct ExampleForward {
    query: Forward,
    /// Positive first, then sampled negatives.
    docs: Vec<Forward>,
}

/// Candidate list for example `i`: own docs plus, optionally, other
/// examples' positives, as `(example, doc slot)` references.
fn candidates(batch: &TrainBatch, i: usize, in_batch: bool) -> Vec<(usize, usize)> {
    let ex = &batch.examples[i];
    let mut out: Vec<(usize, usize)> = (0..=ex.negatives.len()).map(|j| (i, j)).collect();
    if in_batch {
        for (k, other) in batch.examples.iter().enumerate() {
            if k != i && other.positive_id != ex.positive_id {
                out.push((k, 0));
            }
        }
    }
    out
}

fn forward_batch(model: &EncoderModel, batch: &TrainBatch) -> Result<Vec<ExampleForward>> {
    batch
        .examples
        .par_iter()
        .map(|ex| {
            let query = model.forward(&ex.query_tokens)?;
            let mut docs = Vec::with_capacity(ex.negatives.len() + 1);
            docs.push(model.forward(&ex.positive_tokens)?);
            for n in &ex.negatives {
                docs.push(model.forward(&n.tokens)?);
            }
            Ok(ExampleForward { query, docs })
        })
        .collect()
}

/// Softmax over logits with max subtraction. Returns `(loss, probs)` where
/// the loss treats index 0 as the target.
fn softmax_xent(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logit".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logits.iter().map(|z| (z - lse).exp()).collect();
    Ok((lse - logits[0], probs))
}

fn check_options(opts: &LossOptions) -> Result<()> {
    if !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be > 0, got {}",
            opts.temperature
        )));
    }
    Ok(())
}

/// Mean batch loss without gradients.
pub fn batch_loss(model: &EncoderModel, batch: &TrainBatch, opts: &LossOptions) -> Result<f64> {
    check_options(opts)?;
    batch.validate()?;
    let fwd = forward_batch(model, batch)?;
    let mut total = 0.0;
    for i in 0..batch.examples.len() {
        let logits: Vec<f64> = candidates(batch, i, opts.in_batch_negatives)
            .into_iter()
            .map(|(k, j)| dot(&fwd[i].query.output, &fwd[k].docs[j].output) / opts.temperature)
            .collect();
        total += softmax_xent(&logits)?.0;
    }
    Ok(total / batch.examples.len() as f64)
}

/// Mean batch loss and its gradient with respect to every parameter.
///
/// Forward passes run in parallel; backpropagation accumulates in example
/// order so the result does not depend on thread scheduling.
pub fn loss_and_grad(
    model: &EncoderModel,
    batch: &TrainBatch,
    opts: &LossOptions,
) -> Result<(f64, Gradient)> {
    check_options(opts)?;
    batch.validate()?;
    let fwd = forward_batch(model, batch)?;
    let b = batch.examples.len() as f64;
    let tau = opts.temperature;
    let h = model.config.out_dim;

    // d loss / d output, per (example, doc slot) and per query.
    let mut d_docs: Vec<Vec<Vec<f64>>> = fwd
        .iter()
        .map(|f| vec![vec![0.0; h]; f.docs.len()])
        .collect();
    let mut d_queries: Vec<Vec<f64>> = vec![vec![0.0; h]; fwd.len()];
    let mut total = 0.0;

    for i in 0..fwd.len() {
        let cands = candidates(batch, i, opts.in_batch_negatives);
        let q = &fwd[i].query.output;
        let logits: Vec<f64> = cands
            .iter()
            .map(|&(k, j)| dot(q, &fwd[k].docs[j].output) / tau)
            .collect();
        let (loss, probs) = softmax_xent(&logits)?;
        total += loss;
        for (c, &(k, j)) in cands.iter().enumerate() {
            let coef = (probs[c] - if c == 0 { 1.0 } else { 0.0 }) / (tau * b);
            let d = &fwd[k].docs[j].output;
            for x in 0..h {
                d_queries[i][x] += coef * d[x];
                d_docs[k][j][x] += coef * q[x];
            }
        }
    }

    let mut grad = Gradient::zeros(&model.config);
    for (i, f) in fwd.iter().enumerate() {
        model.backward(&f.query, &d_queries[i], &mut grad);
        for (j, doc) in f.docs.iter().enumerate() {
            model.backward(doc, &d_docs[i][j], &mut grad);
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::model::EncoderConfig;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_hash_size: 16,
            embed_dim: 4,
            hidden_dim: 5,
            out_dim: 3,
        }
    }

    fn example(q: &[u32], pos: &[u32], negs: &[&[u32]], tag: &str) -> TrainExample {
        TrainExample {
            query_id: format!("q{tag}"),
            query_tokens: q.to_vec(),
            positive_id: format!("p{tag}"),
            positive_tokens: pos.to_vec(),
            negatives: negs
                .iter()
                .enumerate()
                .map(|(j, t)| BatchNegative {
                    doc_id: format!("n{tag}-{j}"),
                    tokens: t.to_vec(),
                    source: NegativeSource::QueryAnn,
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_scores_give_log_one_plus_n() {
        let m = EncoderModel::zeros(cfg()).unwrap();
        let negs: Vec<&[u32]> = vec![&[1], &[2], &[3]];
        let batch = TrainBatch {
            examples: vec![
                example(&[0], &[4], &negs, "a"),
                example(&[5], &[6], &negs, "b"),
            ],
        };
        let (loss, grad) = loss_and_grad(&m, &batch, &LossOptions::default()).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let m = EncoderModel::new(cfg(), 9).unwrap();
        let batch = TrainBatch {
            examples: vec![example(&[0, 1], &[2], &[&[3], &[4, 5]], "a")],
        };
        let (_, grad) = loss_and_grad(&m, &batch, &LossOptions::default()).unwrap();
        let e = cfg().embed_dim;
        for t in 6..16 {
            assert!(grad.embedding[t * e..(t + 1) * e].iter().all(|&g| g == 0.0));
        }
        assert!(grad.embedding[..e].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn rejects_bad_batches() {
        let m = EncoderModel::new(cfg(), 1).unwrap();
        let mut ex = example(&[0], &[1], &[&[2]], "a");
        ex.negatives[0].doc_id = ex.positive_id.clone();
        let batch = TrainBatch { examples: vec![ex] };
        assert!(loss_and_grad(&m, &batch, &LossOptions::default()).is_err());

        let batch = TrainBatch {
            examples: vec![
                example(&[0], &[1], &[&[2]], "a"),
                example(&[0], &[1], &[&[2], &[3]], "b"),
            ],
        };
        assert!(loss_and_grad(&m, &batch, &LossOptions::default()).is_err());

        let batch = TrainBatch {
            examples: vec![example(&[0], &[1], &[&[2]], "a")],
        };
        let opts = LossOptions {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(loss_and_grad(&m, &batch, &opts).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut m = EncoderModel::new(cfg(), 1).unwrap();
        for w in m.params.w2.iter_mut() {
            *w = 1e30;
        }
        for w in m.params.b1.iter_mut() {
            *w = 10.0;
        }
        let batch = TrainBatch {
            examples: vec![example(&[0], &[1], &[&[2]], "a")],
        };
        let opts = LossOptions {
            temperature: 1e-300,
            ..Default::default()
        };
        assert!(matches!(
            loss_and_grad(&m, &batch, &opts),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn loss_shrinks_as_positive_margin_grows() {
        // Zero biases and negatives embedded as the negated positive give
        // g(neg) = -g(pos). Scaling W2 by s scales every score by s^2, so a
        // larger scale means a larger margin and lower loss.
        let mut base = EncoderModel::new(cfg(), 4).unwrap();
        base.params.b1.iter_mut().for_each(|b| *b = 0.0);
        base.params.b2.iter_mut().for_each(|b| *b = 0.0);
        let e = cfg().embed_dim;
        let row: Vec<f32> = base.params.embedding[0..e].to_vec();
        for t in [1usize, 7, 9, 10] {
            let sign = if t == 1 { 1.0 } else { -1.0 };
            for k in 0..e {
                base.params.embedding[t * e + k] = sign * row[k];
            }
        }
        let ex = example(&[0, 1], &[0, 1], &[&[7], &[9, 10]], "a");
        let pos = base.score(&ex.query_tokens, &ex.positive_tokens).unwrap();
        for n in &ex.negatives {
            assert!(pos > base.score(&ex.query_tokens, &n.tokens).unwrap());
        }
        let batch = TrainBatch { examples: vec![ex] };
        let mut prev = f64::INFINITY;
        for scale in [1.0f32, 4.0, 16.0, 64.0] {
            let mut m = base.clone();
            for w in m.params.w2.iter_mut() {
                *w *= scale;
            }
            let l = batch_loss(&m, &batch, &LossOptions::default()).unwrap();
            assert!(l >= 0.0 && l < prev, "scale {scale}: {l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn in_batch_negatives_extend_candidates() {
        let m = EncoderModel::zeros(cfg()).unwrap();
        let batch = TrainBatch {
            examples: vec![
                example(&[0], &[4], &[&[1]], "a"),
                example(&[5], &[6], &[&[2]], "b"),
                example(&[7], &[8], &[&[3]], "c"),
            ],
        };
        let opts = LossOptions {
            in_batch_negatives: true,
            ..Default::default()
        };
        // 1 sampled + 2 in-batch negatives, all equal scores.
        let (loss, _) = loss_and_grad(&m, &batch, &opts).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }
}
