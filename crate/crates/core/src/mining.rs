//! Per-query negative pools.
//!
//! Sources:
//! - `query_ann`: nearest neighbors of the query under the mining model,
//! - `lookahead`: nearest neighbors of each positive document,
//! - `bm25`: lexical top hits,
//! - `momentum`: every record of the previous episode's pool, carried over.
//!
//! Momentum accumulates recursively (pool `i` holds pool `i-1` verbatim,
//! which already holds pool `i-2`), so no fixed-length queue is kept. The
//! α/β weights act at sampling time: each slot picks the momentum stratum
//! with probability α, otherwise the lookahead stratum with probability β,
//! otherwise the query stratum.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Qrels, QuerySet};
use crate::dense_index::DenseIndex;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::sparse::SparseIndex;

/// Default ANN candidate depth.
pub const DEFAULT_DEPTH: usize = 200;
/// Default momentum / lookahead sampling weights.
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Bm25,
    QueryAnn,
    Lookahead,
    Momentum,
}

impl NegativeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeSource::Bm25 => "bm25",
            NegativeSource::QueryAnn => "query_ann",
            NegativeSource::Lookahead => "lookahead",
            NegativeSource::Momentum => "momentum",
        }
    }
}

impl fmt::Display for NegativeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegativeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(NegativeSource::Bm25),
            "query_ann" => Ok(NegativeSource::QueryAnn),
            "lookahead" => Ok(NegativeSource::Lookahead),
            "momentum" => Ok(NegativeSource::Momentum),
            other => Err(Error::InvalidInput(format!(
                "unknown negative source `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub doc_id: String,
    pub source: NegativeSource,
    /// Episode whose pool holds this record.
    #[serde(skip)]
    pub episode_introduced: u32,
    /// Episode in which the document first entered any pool.
    pub origin_episode: u32,
}

/// A mined neighbor with its score under the mining model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    pub score: f64,
}

/// Query id to ranked candidates.
pub type CandidateLists = BTreeMap<String, Vec<Candidate>>;

fn to_candidates(hits: Vec<(String, f64)>) -> Vec<Candidate> {
    hits.into_iter()
        .map(|(doc_id, score)| Candidate { doc_id, score })
        .collect()
}

/// Queries that have both text and positives, in query-set order.
fn labeled<'a>(
    queries: &'a QuerySet,
    qrels: &'a Qrels,
) -> impl Iterator<Item = (&'a str, &'a str, &'a BTreeSet<String>)> {
    queries
        .iter()
        .filter_map(move |q| match qrels.positives(&q.id) {
            Some(pos) if !pos.is_empty() => Some((q.id.as_str(), q.text.as_str(), pos)),
            _ => {
                warn!("query `{}` has no positives; skipped", q.id);
                None
            }
        })
}

/// Nearest neighbors of each query, positives removed.
pub fn mine_query_negatives(
    index: &DenseIndex,
    model: &EncoderModel,
    queries: &QuerySet,
    qrels: &Qrels,
    depth: usize,
) -> Result<CandidateLists> {
    index.check_model(model)?;
    if depth == 0 {
        return Err(Error::Config("mining depth must be >= 1".into()));
    }
    let items: Vec<_> = labeled(queries, qrels).collect();
    let lists: Vec<(String, Vec<Candidate>)> = items
        .par_iter()
        .map(|&(qid, text, pos)| {
            let toks = model.hash_text(text);
            if toks.is_empty() {
                return Err(Error::InvalidInput(format!("query `{qid}` has no tokens")));
            }
            let probe = model.encode(&toks)?;
            Ok((
                qid.to_string(),
                to_candidates(index.topk(&probe, depth, pos)?),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(lists.into_iter().collect())
}

/// Nearest neighbors of each query's positives, positives removed. With
/// several positives the lists are merged, keeping each document's best
/// score.
pub fn mine_lookahead_negatives(
    index: &DenseIndex,
    model: &EncoderModel,
    corpus: &Corpus,
    queries: &QuerySet,
    qrels: &Qrels,
    depth: usize,
) -> Result<CandidateLists> {
    index.check_model(model)?;
    if depth == 0 {
        return Err(Error::Config("mining depth must be >= 1".into()));
    }
    let items: Vec<_> = labeled(queries, qrels).collect();
    let lists: Vec<(String, Vec<Candidate>)> = items
        .par_iter()
        .map(|&(qid, _, pos)| {
            let mut best: BTreeMap<String, f64> = BTreeMap::new();
            for d in pos {
                let doc = corpus.get(d).ok_or_else(|| Error::UnknownId(d.clone()))?;
                let probe = model.encode_text(&doc.text)?;
                for (id, s) in index.topk(&probe, depth, pos)? {
                    let e = best.entry(id).or_insert(f64::NEG_INFINITY);
                    *e = e.max(s);
                }
            }
            let mut merged: Vec<Candidate> = best
                .into_iter()
                .map(|(doc_id, score)| Candidate { doc_id, score })
                .collect();
            merged.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.doc_id.cmp(&b.doc_id))
            });
            merged.truncate(depth);
            Ok((qid.to_string(), merged))
        })
        .collect::<Result<_>>()?;
    Ok(lists.into_iter().collect())
}

/// BM25 top hits of each query, positives removed.
pub fn mine_bm25_negatives(
    sparse: &SparseIndex,
    queries: &QuerySet,
    qrels: &Qrels,
    depth: usize,
) -> Result<CandidateLists> {
    if depth == 0 {
        return Err(Error::Config("mining depth must be >= 1".into()));
    }
    Ok(labeled(queries, qrels)
        .map(|(qid, text, pos)| {
            (
                qid.to_string(),
                to_candidates(sparse.search(text, depth, pos)),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativePool {
    pub episode: u32,
    pub alpha: f64,
    pub beta: f64,
    pub negatives: BTreeMap<String, Vec<NegativeRecord>>,
}

/// Inputs to one pool construction. Any source may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct PoolSources<'a> {
    pub query_ann: Option<&'a CandidateLists>,
    pub lookahead: Option<&'a CandidateLists>,
    pub bm25: Option<&'a CandidateLists>,
    pub previous: Option<&'a NegativePool>,
}

impl NegativePool {
    /// Union of the given sources for `episode`. New candidates are tagged
    /// with their source; previous-pool records become momentum with their
    /// origin kept. With `dedup` only the first record of each document
    /// survives (order: query_ann, lookahead, bm25, momentum).
    pub fn build(
        episode: u32,
        sources: PoolSources<'_>,
        alpha: f64,
        beta: f64,
        dedup: bool,
    ) -> Result<Self> {
        if episode == 0 {
            return Err(Error::InvalidInput("episodes are numbered from 1".into()));
        }
        for (name, w) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {w}")));
            }
        }
        let mut negatives: BTreeMap<String, Vec<NegativeRecord>> = BTreeMap::new();
        let fresh = [
            (sources.query_ann, NegativeSource::QueryAnn),
            (sources.lookahead, NegativeSource::Lookahead),
            (sources.bm25, NegativeSource::Bm25),
        ];
        for (lists, source) in fresh {
            for (qid, cands) in lists.into_iter().flatten() {
                let out = negatives.entry(qid.clone()).or_default();
                out.extend(cands.iter().map(|c| NegativeRecord {
                    doc_id: c.doc_id.clone(),
                    source,
                    episode_introduced: episode,
                    origin_episode: episode,
                }));
            }
        }
        if let Some(prev) = sources.previous {
            if prev.episode >= episode {
                return Err(Error::InvalidInput(format!(
                    "previous pool is from episode {}, building episode {episode}",
                    prev.episode
                )));
            }
            for (qid, recs) in &prev.negatives {
                let out = negatives.entry(qid.clone()).or_default();
                out.extend(recs.iter().map(|r| NegativeRecord {
                    doc_id: r.doc_id.clone(),
                    source: NegativeSource::Momentum,
                    episode_introduced: episode,
                    origin_episode: r.origin_episode,
                }));
            }
        }
        if dedup {
            for recs in negatives.values_mut() {
                let mut seen = HashSet::new();
                recs.retain(|r| seen.insert(r.doc_id.clone()));
            }
        }
        Ok(Self {
            episode,
            alpha,
            beta,
            negatives,
        })
    }

    pub fn records(&self, query_id: &str) -> &[NegativeRecord] {
        self.negatives.get(query_id).map_or(&[], Vec::as_slice)
    }

    pub fn total_records(&self) -> usize {
        self.negatives.values().map(Vec::len).sum()
    }

    pub fn count_source(&self, source: NegativeSource) -> usize {
        self.negatives
            .values()
            .flatten()
            .filter(|r| r.source == source)
            .count()
    }

    /// Fails if any query's pool lists one of its own positives.
    pub fn check_no_positives(&self, qrels: &Qrels) -> Result<()> {
        for (qid, recs) in &self.negatives {
            if let Some(r) = recs.iter().find(|r| qrels.is_positive(qid, &r.doc_id)) {
                return Err(Error::InvalidInput(format!(
                    "pool for episode {} lists positive `{}` of `{qid}`",
                    self.episode, r.doc_id
                )));
            }
        }
        Ok(())
    }

    /// Draw `n_neg` records for one query with this pool's α/β.
    pub fn sample(&self, query_id: &str, n_neg: usize, seed: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_training_negatives(
            self.records(query_id),
            n_neg,
            self.alpha,
            self.beta,
            &mut rng,
        )
    }

    /// Write the pool as JSONL: a header object, then one object per query.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut out = Vec::new();
        let header = PoolHeader {
            format: POOL_FORMAT.to_string(),
            version: POOL_VERSION,
            episode: self.episode,
            alpha: self.alpha,
            beta: self.beta,
            config_hash: config_hash.to_string(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .unwrap();
        for (qid, recs) in &self.negatives {
            let line = PoolLine {
                query_id: qid.clone(),
                episode: self.episode,
                negatives: recs.clone(),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&line).expect("pool line serializes")
            )
            .unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = content
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let parse = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: msg,
        };
        let Some((_, first)) = lines.next() else {
            return Err(Error::Format(format!(
                "{}: empty pool file",
                path.display()
            )));
        };
        let header: PoolHeader =
            serde_json::from_str(first).map_err(|e| parse(1, e.to_string()))?;
        if header.format != POOL_FORMAT || header.version != POOL_VERSION {
            return Err(Error::Format(format!(
                "{}: expected {POOL_FORMAT} v{POOL_VERSION}",
                path.display()
            )));
        }
        let mut negatives = BTreeMap::new();
        for (i, l) in lines {
            let mut line: PoolLine =
                serde_json::from_str(l).map_err(|e| parse(i + 1, e.to_string()))?;
            if line.episode != header.episode {
                return Err(parse(
                    i + 1,
                    format!(
                        "episode {} in a pool for episode {}",
                        line.episode, header.episode
                    ),
                ));
            }
            for r in line.negatives.iter_mut() {
                r.episode_introduced = header.episode;
                if r.origin_episode > header.episode || r.origin_episode == 0 {
                    return Err(parse(
                        i + 1,
                        format!("origin_episode {} out of range", r.origin_episode),
                    ));
                }
            }
            if negatives
                .insert(line.query_id.clone(), line.negatives)
                .is_some()
            {
                return Err(Error::DuplicateId(line.query_id));
            }
        }
        Ok(Self {
            episode: header.episode,
            alpha: header.alpha,
            beta: header.beta,
            negatives,
        })
    }
}

const POOL_FORMAT: &str = "drlab-negative-pool";
const POOL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PoolHeader {
    format: String,
    version: u32,
    episode: u32,
    alpha: f64,
    beta: f64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    query_id: String,
    episode: u32,
    negatives: Vec<NegativeRecord>,
}

/// Result of one sampling call.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub records: Vec<NegativeRecord>,
    /// True when the pool was smaller than `n_neg` and draws repeated.
    pub with_replacement: bool,
}

const MOMENTUM: usize = 0;
const LOOKAHEAD: usize = 1;
const QUERY: usize = 2;

fn stratum(source: NegativeSource) -> usize {
    match source {
        NegativeSource::Momentum => MOMENTUM,
        NegativeSource::Lookahead => LOOKAHEAD,
        NegativeSource::QueryAnn | NegativeSource::Bm25 => QUERY,
    }
}

/// Two-stage stratified draw without replacement.
///
/// Each slot picks momentum with probability `alpha`, otherwise lookahead
/// with probability `beta`, otherwise the query stratum (query ANN and BM25
/// records), then takes a uniform record from it. An exhausted stratum falls
/// back to the union of whatever remains. A pool smaller than `n_neg` is
/// sampled uniformly with replacement.
pub fn sample_training_negatives<R: Rng>(
    records: &[NegativeRecord],
    n_neg: usize,
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<Sample> {
    if n_neg == 0 {
        return Err(Error::Config("n_neg must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "cannot sample from an empty pool".into(),
        ));
    }
    if records.len() < n_neg {
        debug!(
            "pool of {} records is smaller than n_neg={n_neg}; sampling with replacement",
            records.len()
        );
        let picks = (0..n_neg)
            .map(|_| records[rng.gen_range(0..records.len())].clone())
            .collect();
        return Ok(Sample {
            records: picks,
            with_replacement: true,
        });
    }

    let mut remaining: [Vec<usize>; 3] = Default::default();
    for (i, r) in records.iter().enumerate() {
        remaining[stratum(r.source)].push(i);
    }
    let mut out = Vec::with_capacity(n_neg);
    for _ in 0..n_neg {
        let s = if rng.gen_bool(alpha) {
            MOMENTUM
        } else if rng.gen_bool(beta) {
            LOOKAHEAD
        } else {
            QUERY
        };
        let (s, pos) = if !remaining[s].is_empty() {
            (s, rng.gen_range(0..remaining[s].len()))
        } else {
            let total: usize = remaining.iter().map(Vec::len).sum();
            let mut j = rng.gen_range(0..total);
            let mut s = 0;
            while j >= remaining[s].len() {
                j -= remaining[s].len();
                s += 1;
            }
            (s, j)
        };
        let idx = remaining[s].swap_remove(pos);
        out.push(records[idx].clone());
    }
    Ok(Sample {
        records: out,
        with_replacement: false,
    })
}
