//! Okapi BM25 over an in-memory inverted index.
//!
//! Term weight: `idf(t) * tf / (tf + k1 * (1 - b + b * len / avglen))` with
//! `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`, summed over the distinct
//! query terms. Ties are broken by ascending document id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus};
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::Config(format!(
                "bm25 k1 must be >= 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "bm25 b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

/// One posting: internal document number and term frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    /// Document ids in corpus order; a posting's `doc` indexes this list.
    pub doc_ids: Vec<String>,
    /// Token to postings, each list sorted by document number.
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_lengths: Vec<u32>,
    pub avg_doc_length: f64,
    pub params: Bm25Params,
}

const SPARSE_FORMAT: &str = "drlab-sparse-index";
const SPARSE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SparseFile {
    format: String,
    version: u32,
    index: SparseIndex,
}

impl SparseIndex {
    /// Build the inverted index over every document in `corpus`.
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidInput(
                "cannot build a sparse index over an empty corpus".into(),
            ));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (n, doc) in corpus.iter().enumerate() {
            let tokens = tokenize(&doc.text);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, count) in tf {
                postings.entry(t).or_default().push(Posting {
                    doc: n as u32,
                    tf: count,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self {
            doc_ids: corpus.iter().map(|d| d.id.clone()).collect(),
            postings,
            doc_lengths,
            avg_doc_length,
            params,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.n_docs() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = if self.avg_doc_length > 0.0 {
            1.0 - b + b * f64::from(len) / self.avg_doc_length
        } else {
            1.0
        };
        idf * tf / (tf + k1 * norm)
    }

    /// Accumulate scores for the distinct query terms through the postings.
    fn accumulate(&self, query_text: &str) -> HashMap<u32, f64> {
        let terms: BTreeSet<String> = tokenize(query_text).into_iter().collect();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for t in &terms {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let w = self.term_weight(idf, p.tf, self.doc_lengths[p.doc as usize]);
                *scores.entry(p.doc).or_insert(0.0) += w;
            }
        }
        scores
    }

    /// Top-`k` documents with positive score, skipping ids in `exclude`.
    pub fn search(
        &self,
        query_text: &str,
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Vec<(String, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut hits: Vec<(&str, f64)> = self
            .accumulate(query_text)
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(d, s)| (self.doc_ids[d as usize].as_str(), s))
            .filter(|(id, _)| !exclude.contains(*id))
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        hits.truncate(k);
        hits.into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect()
    }

    /// Score of every document in corpus order (zero where no term matches).
    pub fn score_all(&self, query_text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.n_docs()];
        for (d, s) in self.accumulate(query_text) {
            out[d as usize] = s;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SparseFile {
            format: SPARSE_FORMAT.to_string(),
            version: SPARSE_VERSION,
            index: self.clone(),
        };
        let json = serde_json::to_string(&file).expect("sparse index serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SparseFile = serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.format != SPARSE_FORMAT || file.version != SPARSE_VERSION {
            return Err(Error::Format(format!(
                "{}: expected {SPARSE_FORMAT} v{SPARSE_VERSION}, found {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Ok(file.index)
    }
}

/// Convenience wrapper: top-`k` without exclusions.
pub fn bm25_topk(index: &SparseIndex, query_text: &str, k: usize) -> Vec<(String, f64)> {
    index.search(query_text, k, &BTreeSet::new())
}
