//! Shared two-layer bag-of-hashed-tokens encoder.
//!
//! `g(x) = W2 · tanh(W1 · mean(E[tokens]) + b1) + b2`. Parameters are
//! stored as `f32`; the forward and backward passes run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::util::{fnv1a, fnv1a_extend};

pub const INIT_RANGE: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_hash_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_hash_size: 1 << 16,
            embed_dim: 64,
            hidden_dim: 128,
            out_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_hash_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.out_dim == 0
        {
            return Err(Error::Config(format!(
                "encoder dimensions must be >= 1: {self:?}"
            )));
        }
        if self.vocab_hash_size > u32::MAX as usize {
            return Err(Error::Config("vocab_hash_size must fit in 32 bits".into()));
        }
        Ok(())
    }
}

/// The encoder's parameter arrays, in checkpoint order.
///
/// Matrices are row-major: `embedding` is `V x embed`, `w1` is
/// `hidden x embed`, `w2` is `out x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlocks<T> {
    pub embedding: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

pub type Params = ParamBlocks<f32>;
pub type Gradient = ParamBlocks<f64>;

impl<T: Copy + Default> ParamBlocks<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            embedding: vec![T::default(); cfg.vocab_hash_size * cfg.embed_dim],
            w1: vec![T::default(); cfg.hidden_dim * cfg.embed_dim],
            b1: vec![T::default(); cfg.hidden_dim],
            w2: vec![T::default(); cfg.out_dim * cfg.hidden_dim],
            b2: vec![T::default(); cfg.out_dim],
        }
    }
}

impl<T> ParamBlocks<T> {
    pub fn blocks(&self) -> [&[T]; 5] {
        [&self.embedding, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut [T]; 5] {
        [
            &mut self.embedding,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_lens(&self) -> [usize; 5] {
        self.blocks().map(|b| b.len())
    }

    /// Flat view over all coordinates in block order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.blocks().into_iter().flat_map(|b| b.iter())
    }

    pub fn get_flat(&self, mut i: usize) -> Option<&T> {
        for b in self.blocks() {
            if i < b.len() {
                return Some(&b[i]);
            }
            i -= b.len();
        }
        None
    }

    pub fn get_flat_mut(&mut self, mut i: usize) -> Option<&mut T> {
        for b in self.blocks_mut() {
            if i < b.len() {
                return Some(&mut b[i]);
            }
            i -= b.len();
        }
        None
    }
}

/// Hash one token into `[0, vocab)`.
pub fn hash_token(token: &str, vocab: usize) -> u32 {
    (fnv1a(token.as_bytes()) % vocab as u64) as u32
}

/// Tokenize and hash a text. Empty when the text has no tokens.
pub fn hash_text(text: &str, vocab: usize) -> Vec<u32> {
    tokenize(text)
        .iter()
        .map(|t| hash_token(t, vocab))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: Params,
    pub seed: u64,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Token hashes sorted ascending; fixes the pooling summation order.
    pub tokens: Vec<u32>,
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl EncoderModel {
    /// Parameters drawn uniformly from `(-0.05, 0.05)` by a ChaCha8 stream
    /// seeded with `seed`, in checkpoint block order.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in params.blocks_mut() {
            for p in block.iter_mut() {
                *p = rng.gen_range(-INIT_RANGE..INIT_RANGE);
            }
        }
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: Params::zeros(&config),
            seed: 0,
        })
    }

    /// Hash of dimensions and parameter bytes; ties indexes to the model
    /// that produced them.
    pub fn fingerprint(&self) -> u64 {
        let c = &self.config;
        let mut h = fnv1a(b"drlab-encoder");
        for d in [c.vocab_hash_size, c.embed_dim, c.hidden_dim, c.out_dim] {
            h = fnv1a_extend(h, &(d as u64).to_le_bytes());
        }
        for p in self.params.iter() {
            h = fnv1a_extend(h, &p.to_le_bytes());
        }
        h
    }

    pub fn hash_text(&self, text: &str) -> Vec<u32> {
        hash_text(text, self.config.vocab_hash_size)
    }

    pub fn forward(&self, token_hashes: &[u32]) -> Result<Forward> {
        let c = &self.config;
        if token_hashes.is_empty() {
            return Err(Error::InvalidInput(
                "cannot encode an empty token list".into(),
            ));
        }
        if let Some(&bad) = token_hashes
            .iter()
            .find(|&&t| t as usize >= c.vocab_hash_size)
        {
            return Err(Error::InvalidInput(format!(
                "token hash {bad} outside vocabulary of {}",
                c.vocab_hash_size
            )));
        }
        let mut tokens = token_hashes.to_vec();
        tokens.sort_unstable();

        let e = c.embed_dim;
        let mut pooled = vec![0.0f64; e];
        for &t in &tokens {
            let row = &self.params.embedding[t as usize * e..(t as usize + 1) * e];
            for (acc, &w) in pooled.iter_mut().zip(row) {
                *acc += f64::from(w);
            }
        }
        let n = tokens.len() as f64;
        for v in pooled.iter_mut() {
            *v /= n;
        }

        let hidden: Vec<f64> = (0..c.hidden_dim)
            .map(|j| {
                let row = &self.params.w1[j * e..(j + 1) * e];
                let a = row
                    .iter()
                    .zip(&pooled)
                    .map(|(&w, &x)| f64::from(w) * x)
                    .sum::<f64>()
                    + f64::from(self.params.b1[j]);
                a.tanh()
            })
            .collect();

        let h = c.hidden_dim;
        let output: Vec<f64> = (0..c.out_dim)
            .map(|k| {
                let row = &self.params.w2[k * h..(k + 1) * h];
                row.iter()
                    .zip(&hidden)
                    .map(|(&w, &x)| f64::from(w) * x)
                    .sum::<f64>()
                    + f64::from(self.params.b2[k])
            })
            .collect();

        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite encoder output".into()));
        }
        Ok(Forward {
            tokens,
            pooled,
            hidden,
            output,
        })
    }

    /// Embedding of a token-hash sequence, rounded to `f32`.
    pub fn encode(&self, token_hashes: &[u32]) -> Result<Vec<f32>> {
        Ok(self
            .forward(token_hashes)?
            .output
            .iter()
            .map(|&v| v as f32)
            .collect())
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        self.encode(&self.hash_text(text))
    }

    /// Dot-product relevance `g(q) · g(d)`.
    pub fn score(&self, query_tokens: &[u32], doc_tokens: &[u32]) -> Result<f64> {
        let q = self.forward(query_tokens)?;
        let d = self.forward(doc_tokens)?;
        Ok(dot(&q.output, &d.output))
    }

    /// Accumulate `d_output`'s pullback through the encoder into `grad`.
    pub fn backward(&self, fwd: &Forward, d_output: &[f64], grad: &mut Gradient) {
        let c = &self.config;
        let (e, h) = (c.embed_dim, c.hidden_dim);

        let mut d_hidden = vec![0.0f64; h];
        for (k, &g) in d_output.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[k] += g;
            let wrow = &self.params.w2[k * h..(k + 1) * h];
            let grow = &mut grad.w2[k * h..(k + 1) * h];
            for j in 0..h {
                grow[j] += g * fwd.hidden[j];
                d_hidden[j] += g * f64::from(wrow[j]);
            }
        }

        let mut d_pooled = vec![0.0f64; e];
        for j in 0..h {
            let da = d_hidden[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
            if da == 0.0 {
                continue;
            }
            grad.b1[j] += da;
            let wrow = &self.params.w1[j * e..(j + 1) * e];
            let grow = &mut grad.w1[j * e..(j + 1) * e];
            for i in 0..e {
                grow[i] += da * fwd.pooled[i];
                d_pooled[i] += da * f64::from(wrow[i]);
            }
        }

        let n = fwd.tokens.len() as f64;
        for &t in &fwd.tokens {
            let grow = &mut grad.embedding[t as usize * e..(t as usize + 1) * e];
            for (g, &dp) in grow.iter_mut().zip(&d_pooled) {
                *g += dp / n;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_hash_size: 32,
            embed_dim: 5,
            hidden_dim: 6,
            out_dim: 4,
        }
    }

    /// Straight-line forward pass written independently of `forward`:
    /// no pooling sort, per-coordinate loops over the raw parameter arrays.
    fn oracle_encode(m: &EncoderModel, toks: &[u32]) -> Vec<f64> {
        let c = m.config;
        let p = &m.params;
        let mut x = vec![0.0; c.embed_dim];
        for i in 0..c.embed_dim {
            let mut s = 0.0;
            for &t in toks {
                s += p.embedding[t as usize * c.embed_dim + i] as f64;
            }
            x[i] = s / toks.len() as f64;
        }
        let mut hid = vec![0.0; c.hidden_dim];
        for j in 0..c.hidden_dim {
            let mut a = p.b1[j] as f64;
            for i in 0..c.embed_dim {
                a += p.w1[j * c.embed_dim + i] as f64 * x[i];
            }
            hid[j] = a.tanh();
        }
        let mut out = vec![0.0; c.out_dim];
        for k in 0..c.out_dim {
            let mut a = p.b2[k] as f64;
            for j in 0..c.hidden_dim {
                a += p.w2[k * c.hidden_dim + j] as f64 * hid[j];
            }
            out[k] = a;
        }
        out
    }

    #[test]
    fn zero_model_gives_zero_vector() {
        let m = EncoderModel::zeros(tiny()).unwrap();
        assert!(m.encode(&[1, 2, 3]).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(m.score(&[1], &[2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn repeated_token_is_idempotent() {
        let m = EncoderModel::new(tiny(), 3).unwrap();
        assert_eq!(m.encode(&[7]).unwrap(), m.encode(&[7, 7]).unwrap());
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let a = EncoderModel::new(tiny(), 11).unwrap();
        let b = EncoderModel::new(tiny(), 11).unwrap();
        let x = a.encode(&[4, 9, 1, 30]).unwrap();
        assert_eq!(x, b.encode(&[4, 9, 1, 30]).unwrap());
        assert_eq!(x, a.encode(&[30, 1, 9, 4]).unwrap());
        assert_eq!(x, a.encode(&[1, 30, 4, 9]).unwrap());
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        let m = EncoderModel::new(tiny(), 1).unwrap();
        assert!(matches!(m.encode(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(m.encode(&[32]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn self_score_is_squared_norm() {
        let m = EncoderModel::new(tiny(), 5).unwrap();
        let f = m.forward(&[2, 8]).unwrap();
        let s = m.score(&[2, 8], &[8, 2]).unwrap();
        assert_eq!(s, dot(&f.output, &f.output));
        assert!(s >= 0.0);
    }

    #[test]
    fn score_matches_straight_line_oracle() {
        for seed in 0..5u64 {
            let m = EncoderModel::new(tiny(), seed).unwrap();
            let q = [3u32, 17, 3, 22];
            let d = [5u32, 17, 31];
            let expect: f64 = oracle_encode(&m, &q)
                .iter()
                .zip(oracle_encode(&m, &d))
                .map(|(a, b)| a * b)
                .sum();
            let got = m.score(&q, &d).unwrap();
            assert!(
                (got - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "{got} vs {expect}"
            );
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = EncoderModel::new(tiny(), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.params.b2[0] += 1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn flat_access_spans_blocks() {
        let m = EncoderModel::new(tiny(), 2).unwrap();
        let n = m.params.len();
        assert_eq!(m.params.get_flat(0), Some(&m.params.embedding[0]));
        assert_eq!(m.params.get_flat(n - 1), Some(&m.params.b2[3]));
        assert_eq!(m.params.get_flat(n), None);
    }
}
