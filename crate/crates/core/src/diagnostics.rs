//! Retrieval metrics and episode-over-episode training dynamics.
//!
//! Everything here is a pure function of rankings, so a run can be
//! re-analyzed from its report without touching a model.
//!
//! - [`evaluate`]: MRR@10 and Recall@k from a dense index.
//! - [`forgetting`]: share of previously learned queries that stop being
//!   learned (first relevant rank above `k_learn`).
//! - [`composition`]: each hard negative labeled by where it first showed up.
//! - [`swing`]: present, absent, present again across consecutive episodes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_group_tag, Qrels, QuerySet};
use crate::dense_index::DenseIndex;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

pub const MRR_CUTOFF: usize = 10;
pub const DEFAULT_K_LEARN: usize = 10;
pub const DEFAULT_K_EVAL: usize = 100;
pub const DEFAULT_CUTOFFS: [usize; 4] = [5, 10, 20, 100];

/// Query id to a ranked list of document ids.
pub type Rankings = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub episode: u32,
    pub k_eval: usize,
    /// 1-based rank of the first relevant document, if within `k_eval`.
    pub first_rank: BTreeMap<String, Option<usize>>,
    pub mrr_at_10: f64,
    /// Cutoff to Recall@cutoff, in ascending cutoff order.
    pub recall: Vec<(usize, f64)>,
    pub retrieved: Rankings,
}

impl EvalSnapshot {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(c, _)| *c == k).map(|(_, r)| *r)
    }

    pub fn n_queries(&self) -> usize {
        self.first_rank.len()
    }

    pub fn is_learned(&self, query_id: &str, k_learn: usize) -> bool {
        matches!(self.first_rank.get(query_id), Some(Some(r)) if *r <= k_learn)
    }
}

/// Score precomputed rankings. Queries without positives are skipped with a
/// warning; lists are truncated to `k_eval`.
pub fn snapshot_from_rankings(
    episode: u32,
    rankings: &Rankings,
    qrels: &Qrels,
    k_eval: usize,
    cutoffs: &[usize],
) -> Result<EvalSnapshot> {
    if k_eval == 0 {
        return Err(Error::Config("k_eval must be >= 1".into()));
    }
    let mut cutoffs: Vec<usize> = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    if let Some(&c) = cutoffs.iter().find(|&&c| c == 0 || c > k_eval) {
        return Err(Error::Config(format!(
            "recall cutoff {c} must be in 1..={k_eval}"
        )));
    }

    let mut first_rank = BTreeMap::new();
    let mut retrieved = BTreeMap::new();
    for (qid, list) in rankings {
        let Some(pos) = qrels.positives(qid).filter(|p| !p.is_empty()) else {
            warn!("query `{qid}` has no relevance judgments; excluded from evaluation");
            continue;
        };
        let list: Vec<String> = list.iter().take(k_eval).cloned().collect();
        let rank = list.iter().position(|d| pos.contains(d)).map(|i| i + 1);
        first_rank.insert(qid.clone(), rank);
        retrieved.insert(qid.clone(), list);
    }
    let n = first_rank.len();
    let (mrr_at_10, recall) = if n == 0 {
        (0.0, cutoffs.iter().map(|&c| (c, 0.0)).collect())
    } else {
        let rr: f64 = first_rank
            .values()
            .map(|r| match r {
                Some(r) if *r <= MRR_CUTOFF => 1.0 / *r as f64,
                _ => 0.0,
            })
            .sum();
        let recall = cutoffs
            .iter()
            .map(|&c| {
                let hit = first_rank
                    .values()
                    .filter(|r| matches!(r, Some(r) if *r <= c))
                    .count();
                (c, hit as f64 / n as f64)
            })
            .collect();
        (rr / n as f64, recall)
    };
    Ok(EvalSnapshot {
        episode,
        k_eval,
        first_rank,
        mrr_at_10,
        recall,
        retrieved,
    })
}

/// Dense top-`k_eval` for every query.
pub fn retrieve(
    index: &DenseIndex,
    model: &EncoderModel,
    queries: &QuerySet,
    k_eval: usize,
) -> Result<Rankings> {
    index.check_model(model)?;
    let none = BTreeSet::new();
    let lists: Vec<(String, Vec<String>)> = queries
        .queries()
        .par_iter()
        .map(|q| {
            let probe = model.encode_text(&q.text)?;
            let hits = index.topk(&probe, k_eval, &none)?;
            Ok((q.id.clone(), hits.into_iter().map(|(id, _)| id).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(lists.into_iter().collect())
}

pub fn evaluate(
    index: &DenseIndex,
    model: &EncoderModel,
    queries: &QuerySet,
    qrels: &Qrels,
    k_eval: usize,
    cutoffs: &[usize],
    episode: u32,
) -> Result<EvalSnapshot> {
    let rankings = retrieve(index, model, queries, k_eval)?;
    snapshot_from_rankings(episode, &rankings, qrels, k_eval, cutoffs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub episode: u32,
    pub k_learn: usize,
    pub learned_prev: BTreeSet<String>,
    pub forgotten: BTreeSet<String>,
    /// `|forgotten| / |learned_prev|`, 0 when nothing was learned before.
    pub rate: f64,
    pub empty_denominator: bool,
    /// `|forgotten| / |all queries|`.
    pub rate_all_queries: f64,
}

pub fn forgetting(
    prev: &EvalSnapshot,
    cur: &EvalSnapshot,
    k_learn: usize,
) -> Result<ForgettingReport> {
    if k_learn == 0 {
        return Err(Error::Config("k_learn must be >= 1".into()));
    }
    if !prev.first_rank.keys().eq(cur.first_rank.keys()) {
        return Err(Error::InvalidInput(format!(
            "snapshots of episodes {} and {} cover different query sets",
            prev.episode, cur.episode
        )));
    }
    let learned_prev: BTreeSet<String> = prev
        .first_rank
        .keys()
        .filter(|q| prev.is_learned(q, k_learn))
        .cloned()
        .collect();
    let forgotten: BTreeSet<String> = learned_prev
        .iter()
        .filter(|q| !cur.is_learned(q, k_learn))
        .cloned()
        .collect();
    let empty_denominator = learned_prev.is_empty();
    let rate = if empty_denominator {
        0.0
    } else {
        forgotten.len() as f64 / learned_prev.len() as f64
    };
    let total = cur.n_queries();
    let rate_all_queries = if total == 0 {
        0.0
    } else {
        forgotten.len() as f64 / total as f64
    };
    Ok(ForgettingReport {
        episode: cur.episode,
        k_learn,
        learned_prev,
        forgotten,
        rate,
        empty_denominator,
        rate_all_queries,
    })
}

/// One labeled slice of negative history, e.g. `("bm25", lists)` or
/// `("epi-2", lists)`. Entries are given oldest first.
#[derive(Debug, Clone, Copy)]
pub struct HistoryEntry<'a> {
    pub label: &'a str,
    pub lists: &'a Rankings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub episode: u32,
    /// First-encounter label to count, in order of first appearance in history.
    pub histogram: Vec<(String, usize)>,
    pub total: usize,
    pub new_fraction: f64,
    pub lookahead_coverage: f64,
}

impl CompositionReport {
    pub fn count(&self, label: &str) -> usize {
        self.histogram
            .iter()
            .find(|(l, _)| l == label)
            .map_or(0, |(_, c)| *c)
    }

    pub fn share(&self, label: &str) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(label) as f64 / self.total as f64
        }
    }
}

pub fn episode_label(episode: u32) -> String {
    format!("epi-{episode}")
}

/// Label every (query, doc) of `current` by its earliest appearance in
/// `history`; anything unseen is new and gets this episode's label.
/// `lookahead_coverage` is the share of new entries found in
/// `prev_lookahead` for the same query (0 when nothing is new).
pub fn composition(
    episode: u32,
    current: &Rankings,
    history: &[HistoryEntry<'_>],
    prev_lookahead: Option<&Rankings>,
) -> CompositionReport {
    let mut first_seen: HashMap<(&str, &str), usize> = HashMap::new();
    for (h, entry) in history.iter().enumerate() {
        for (q, docs) in entry.lists {
            for d in docs {
                first_seen.entry((q.as_str(), d.as_str())).or_insert(h);
            }
        }
    }
    let new_label = episode_label(episode);
    let mut labels: Vec<String> = Vec::new();
    for entry in history {
        if !labels.iter().any(|l| l == entry.label) {
            labels.push(entry.label.to_string());
        }
    }
    if !labels.contains(&new_label) {
        labels.push(new_label.clone());
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut total, mut new, mut covered) = (0usize, 0usize, 0usize);
    for (q, docs) in current {
        let look: BTreeSet<&str> = prev_lookahead
            .and_then(|l| l.get(q))
            .map(|v| v.iter().map(String::as_str).collect())
            .unwrap_or_default();
        for d in docs {
            total += 1;
            match first_seen.get(&(q.as_str(), d.as_str())) {
                Some(&h) => *counts.entry(history[h].label).or_default() += 1,
                None => {
                    *counts.entry(new_label.as_str()).or_default() += 1;
                    new += 1;
                    if look.contains(d.as_str()) {
                        covered += 1;
                    }
                }
            }
        }
    }
    let histogram = labels
        .iter()
        .map(|l| (l.clone(), counts.get(l.as_str()).copied().unwrap_or(0)))
        .collect();
    CompositionReport {
        episode,
        histogram,
        total,
        new_fraction: if total == 0 {
            0.0
        } else {
            new as f64 / total as f64
        },
        lookahead_coverage: if new == 0 {
            0.0
        } else {
            covered as f64 / new as f64
        },
    }
}

/// Number of overlapping `1, 0, 1` windows.
pub fn count_swings(bits: &[bool]) -> usize {
    bits.windows(3).filter(|w| w[0] && !w[1] && w[2]).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub query_id: String,
    pub doc_id: String,
    pub bits: Vec<bool>,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingReport {
    pub n_episodes: usize,
    pub n_queries: usize,
    pub memberships: Vec<Membership>,
    pub total_events: usize,
    /// Events per query.
    pub swing_rate: f64,
    /// Group suffix (e.g. `g0`) to the mean fraction of that group's
    /// documents present in its own query's hard set, per episode.
    pub group_presence: BTreeMap<String, Vec<f64>>,
}

/// Swing over a per-episode history of hard-negative lists (oldest first).
/// `group_tags` maps document ids to tags of the form `{query}#{group}`.
pub fn swing(
    history: &[Rankings],
    group_tags: Option<&BTreeMap<String, String>>,
) -> Result<SwingReport> {
    let e = history.len();
    if e < 3 {
        return Err(Error::InvalidInput(format!(
            "swing needs at least 3 episodes, got {e}"
        )));
    }
    let mut bits: BTreeMap<(&str, &str), Vec<bool>> = BTreeMap::new();
    let mut queries: BTreeSet<&str> = BTreeSet::new();
    for (t, lists) in history.iter().enumerate() {
        for (q, docs) in lists {
            queries.insert(q);
            for d in docs {
                bits.entry((q.as_str(), d.as_str()))
                    .or_insert_with(|| vec![false; e])[t] = true;
            }
        }
    }
    let memberships: Vec<Membership> = bits
        .into_iter()
        .map(|((q, d), b)| Membership {
            query_id: q.to_string(),
            doc_id: d.to_string(),
            events: count_swings(&b),
            bits: b,
        })
        .collect();
    let total_events = memberships.iter().map(|m| m.events).sum();
    let n_queries = queries.len();

    let mut group_presence = BTreeMap::new();
    if let Some(tags) = group_tags {
        // (query, group) -> member docs
        let mut groups: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
        for (doc, tag) in tags {
            if let Some((q, g)) = parse_group_tag(tag) {
                groups.entry((q, g)).or_default().insert(doc);
            }
        }
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for ((q, g), members) in &groups {
            let entry = sums.entry(g).or_insert_with(|| (vec![0.0; e], 0));
            entry.1 += 1;
            for (t, lists) in history.iter().enumerate() {
                let present = lists.get(*q).map_or(0, |docs| {
                    docs.iter().filter(|d| members.contains(d.as_str())).count()
                });
                entry.0[t] += present as f64 / members.len() as f64;
            }
        }
        for (g, (s, n)) in sums {
            group_presence.insert(g.to_string(), s.into_iter().map(|v| v / n as f64).collect());
        }
    }

    Ok(SwingReport {
        n_episodes: e,
        n_queries,
        memberships,
        total_events,
        swing_rate: if n_queries == 0 {
            0.0
        } else {
            total_events as f64 / n_queries as f64
        },
        group_presence,
    })
}

const EMBEDDINGS_MAGIC: &str = "# drlab-embeddings";

/// Write `id<TAB>v1 v2 ...` rows after a header line recording dimension and
/// model fingerprint. Values print in shortest round-trip form.
pub fn dump_embeddings<'a>(
    model: &EncoderModel,
    items: impl IntoIterator<Item = (&'a str, &'a str)>,
    path: &Path,
) -> Result<()> {
    let mut out = format!(
        "{EMBEDDINGS_MAGIC} dim={} model={:016x}\n",
        model.config.out_dim,
        model.fingerprint()
    );
    for (id, text) in items {
        let v = model.encode_text(text)?;
        out.push_str(id);
        out.push('\t');
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{x:?}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = raw.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse(1, "missing header".into()))?;
    let dim: usize = header
        .strip_prefix(EMBEDDINGS_MAGIC)
        .and_then(|h| h.split_whitespace().find_map(|f| f.strip_prefix("dim=")))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| parse(1, "bad embeddings header".into()))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let (id, vals) = line
            .split_once('\t')
            .ok_or_else(|| parse(i + 2, "expected id<TAB>values".into()))?;
        let v: Vec<f32> = vals
            .split(' ')
            .map(|x| x.parse::<f32>().map_err(|e| parse(i + 2, e.to_string())))
            .collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(parse(
                i + 2,
                format!("expected {dim} values, found {}", v.len()),
            ));
        }
        rows.push((id.to_string(), v));
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_csv(path: &Path, config_hash: &str, header: &str, body: &str) -> Result<()> {
    let content = format!("# config_hash={config_hash}\n{header}\n{body}");
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// `episode,n_queries,mrr@10,recall@k...`
pub fn write_metrics_csv(path: &Path, config_hash: &str, snapshots: &[EvalSnapshot]) -> Result<()> {
    let cutoffs: Vec<usize> = snapshots
        .first()
        .map(|s| s.recall.iter().map(|r| r.0).collect())
        .unwrap_or_default();
    let mut header = String::from("episode,n_queries,mrr@10");
    for c in &cutoffs {
        write!(header, ",recall@{c}").unwrap();
    }
    let mut body = String::new();
    for s in snapshots {
        write!(body, "{},{},{}", s.episode, s.n_queries(), s.mrr_at_10).unwrap();
        for c in &cutoffs {
            write!(body, ",{}", s.recall_at(*c).unwrap_or(f64::NAN)).unwrap();
        }
        body.push('\n');
    }
    write_csv(path, config_hash, &header, &body)
}

/// `query_id,episode,first_rank,rr@10`; an empty rank means not retrieved.
pub fn write_per_query_csv(
    path: &Path,
    config_hash: &str,
    snapshots: &[EvalSnapshot],
) -> Result<()> {
    let mut body = String::new();
    let queries: BTreeSet<&String> = snapshots.iter().flat_map(|s| s.first_rank.keys()).collect();
    for q in queries {
        for s in snapshots {
            let Some(rank) = s.first_rank.get(q) else {
                continue;
            };
            let rr = match rank {
                Some(r) if *r <= MRR_CUTOFF => 1.0 / *r as f64,
                _ => 0.0,
            };
            let rank = rank.map(|r| r.to_string()).unwrap_or_default();
            writeln!(body, "{},{},{rank},{rr}", csv_field(q), s.episode).unwrap();
        }
    }
    write_csv(
        path,
        config_hash,
        "query_id,episode,first_rank,rr@10",
        &body,
    )
}

/// `episode,k_learn,learned_prev,forgotten,rate,empty_denominator,rate_all_queries`
pub fn write_forgetting_csv(
    path: &Path,
    config_hash: &str,
    reports: &[ForgettingReport],
) -> Result<()> {
    let mut body = String::new();
    for r in reports {
        writeln!(
            body,
            "{},{},{},{},{},{},{}",
            r.episode,
            r.k_learn,
            r.learned_prev.len(),
            r.forgotten.len(),
            r.rate,
            r.empty_denominator,
            r.rate_all_queries
        )
        .unwrap();
    }
    write_csv(
        path,
        config_hash,
        "episode,k_learn,learned_prev,forgotten,rate,empty_denominator,rate_all_queries",
        &body,
    )
}

/// Long format `episode,label,count,share`, plus a per-episode summary file
/// `episode,total,new_fraction,lookahead_coverage`.
pub fn write_composition_csv(
    path: &Path,
    summary_path: &Path,
    config_hash: &str,
    reports: &[CompositionReport],
) -> Result<()> {
    let mut body = String::new();
    let mut summary = String::new();
    for r in reports {
        for (label, count) in &r.histogram {
            writeln!(
                body,
                "{},{},{count},{}",
                r.episode,
                csv_field(label),
                r.share(label)
            )
            .unwrap();
        }
        writeln!(
            summary,
            "{},{},{},{}",
            r.episode, r.total, r.new_fraction, r.lookahead_coverage
        )
        .unwrap();
    }
    write_csv(path, config_hash, "episode,label,count,share", &body)?;
    write_csv(
        summary_path,
        config_hash,
        "episode,total,new_fraction,lookahead_coverage",
        &summary,
    )
}

/// `query_id,doc_id,group_tag,membership,events` with membership as a
/// 0/1 string, one character per episode.
pub fn write_swing_csv(
    path: &Path,
    config_hash: &str,
    report: &SwingReport,
    group_tags: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    let mut body = String::new();
    for m in &report.memberships {
        let tag = group_tags
            .and_then(|t| t.get(&m.doc_id))
            .map_or("", String::as_str);
        let bits: String = m.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(
            body,
            "{},{},{},{bits},{}",
            csv_field(&m.query_id),
            csv_field(&m.doc_id),
            csv_field(tag),
            m.events
        )
        .unwrap();
    }
    write_csv(
        path,
        config_hash,
        "query_id,doc_id,group_tag,membership,events",
        &body,
    )
}

/// `group,episode,mean_presence`
pub fn write_group_presence_csv(
    path: &Path,
    config_hash: &str,
    report: &SwingReport,
) -> Result<()> {
    let mut body = String::new();
    for (g, series) in &report.group_presence {
        for (t, v) in series.iter().enumerate() {
            writeln!(body, "{},{},{v}", csv_field(g), t + 1).unwrap();
        }
    }
    write_csv(path, config_hash, "group,episode,mean_presence", &body)
}
