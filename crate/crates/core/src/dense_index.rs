//! Dot-product nearest-neighbor search over document embeddings.
//!
//! Exact mode scans every row. IVF mode partitions rows with seeded k-means
//! (k-means++ init, fixed iterations) and scans only `n_probe` clusters.
//! Clustering runs on rows augmented with one extra coordinate,
//! `sqrt(M^2 - |x|^2)`, which turns inner-product search into Euclidean
//! search; probes go to the clusters nearest the augmented probe `(q, 0)`.
//! Results are ordered by score descending, then document id ascending.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

pub const KMEANS_ITERATIONS: usize = 10;
const INDEX_MAGIC: &[u8; 8] = b"DRLABIDX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexMode {
    Exact,
    Ivf { n_clusters: usize, n_probe: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfTable {
    /// `n_clusters x (dim + 1)` in the augmented space, row-major.
    pub centroids: Vec<f32>,
    /// Cluster of each document row.
    pub assignments: Vec<u32>,
    /// Rows per cluster, ascending.
    pub lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub doc_ids: Vec<String>,
    pub dim: usize,
    /// `n_docs x dim`, row-major.
    pub embeddings: Vec<f32>,
    pub mode: IndexMode,
    pub ivf: Option<IvfTable>,
    pub model_fingerprint: u64,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn nearest_centroid(row: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(c, cen)| (c, sq_dist(row, cen)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one centroid")
}

/// Seeded k-means over `n x dim` rows. Returns `(centroids, assignments)`.
pub fn kmeans(
    rows: &[f32],
    dim: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> (Vec<f32>, Vec<u32>) {
    let n = rows.len() / dim;
    assert!(n > 0 && k > 0 && k <= n, "kmeans needs 1 <= k <= n");
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }

    let mut assign = vec![0u32; n];
    for _ in 0..iterations {
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(row(i), &centroids, dim))
            .collect();
        for (a, &(c, _)) in assign.iter_mut().zip(&assigned) {
            *a = c as u32;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i] as usize;
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += f64::from(x);
            }
        }
        // Empty clusters take the point farthest from its current centroid.
        let mut taken: HashSet<usize> = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..])
                {
                    *dst = (s / counts[c] as f64) as f32;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.insert(far);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
    }
    for i in 0..n {
        assign[i] = nearest_centroid(row(i), &centroids, dim).0 as u32;
    }
    (centroids, assign)
}

impl DenseIndex {
    /// Encode every document of `corpus` and build the index.
    pub fn build(
        model: &EncoderModel,
        corpus: &Corpus,
        mode: IndexMode,
        seed: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty corpus".into()));
        }
        let rows: Vec<Vec<f32>> = corpus
            .docs()
            .par_iter()
            .map(|d| {
                let toks = model.hash_text(&d.text);
                if toks.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "document `{}` has no tokens",
                        d.id
                    )));
                }
                model.encode(&toks)
            })
            .collect::<Result<_>>()?;
        let ids = corpus.iter().map(|d| d.id.clone()).collect();
        Self::from_embeddings(
            ids,
            model.config.out_dim,
            rows.concat(),
            mode,
            model.fingerprint(),
            seed,
        )
    }

    /// Build from precomputed rows.
    pub fn from_embeddings(
        doc_ids: Vec<String>,
        dim: usize,
        embeddings: Vec<f32>,
        mode: IndexMode,
        model_fingerprint: u64,
        seed: u64,
    ) -> Result<Self> {
        if doc_ids.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty corpus".into()));
        }
        if dim == 0 || embeddings.len() != doc_ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids with dim {dim} need {} values, got {}",
                doc_ids.len(),
                doc_ids.len() * dim,
                embeddings.len()
            )));
        }
        let ivf = match mode {
            IndexMode::Exact => None,
            IndexMode::Ivf {
                n_clusters,
                n_probe,
            } => {
                if n_clusters == 0 || n_probe == 0 || n_probe > n_clusters {
                    return Err(Error::Config(format!(
                        "ivf needs 1 <= n_probe <= n_clusters, got n_probe={n_probe} n_clusters={n_clusters}"
                    )));
                }
                if n_clusters > doc_ids.len() {
                    return Err(Error::Config(format!(
                        "ivf n_clusters {n_clusters} exceeds {} documents",
                        doc_ids.len()
                    )));
                }
                let aug = augment(&embeddings, dim);
                let (centroids, assignments) =
                    kmeans(&aug, dim + 1, n_clusters, KMEANS_ITERATIONS, seed);
                Some(IvfTable::new(centroids, assignments, n_clusters))
            }
        };
        Ok(Self {
            doc_ids,
            dim,
            embeddings,
            mode,
            ivf,
            model_fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn check_model(&self, model: &EncoderModel) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.model_fingerprint,
                model: fp,
            });
        }
        Ok(())
    }

    fn rank(
        &self,
        candidates: impl Iterator<Item = usize>,
        probe: &[f32],
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Vec<(String, f64)> {
        let mut scored: Vec<(usize, f64)> = candidates
            .filter(|&i| !exclude.contains(&self.doc_ids[i]))
            .map(|i| (i, dot(probe, self.row(i))))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
            .into_iter()
            .map(|(i, s)| (self.doc_ids[i].clone(), s))
            .collect()
    }

    /// Top-`k` documents by dot product with `probe`, skipping `exclude`.
    pub fn topk(
        &self,
        probe: &[f32],
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<(String, f64)>> {
        if probe.len() != self.dim {
            return Err(Error::Shape(format!(
                "probe has {} dims, index has {}",
                probe.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        Ok(match (&self.mode, &self.ivf) {
            (IndexMode::Ivf { n_probe, .. }, Some(ivf)) => {
                let clusters = ivf.probe_order(probe, self.dim, *n_probe);
                let rows = clusters
                    .into_iter()
                    .flat_map(|c| ivf.lists[c].iter().map(|&r| r as usize));
                self.rank(rows, probe, k, exclude)
            }
            _ => self.rank(0..self.len(), probe, k, exclude),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.embeddings.len() * 4);
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        let (mode, nc, np) = match self.mode {
            IndexMode::Exact => (0u8, 0u64, 0u64),
            IndexMode::Ivf {
                n_clusters,
                n_probe,
            } => (1u8, n_clusters as u64, n_probe as u64),
        };
        buf.push(mode);
        for v in [
            self.dim as u64,
            self.len() as u64,
            self.model_fingerprint,
            nc,
            np,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.doc_ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in &self.embeddings {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(ivf) = &self.ivf {
            for v in &ivf.centroids {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for a in &ivf.assignments {
                buf.extend_from_slice(&a.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_index(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Append `sqrt(M^2 - |x|^2)` to every row, `M` the largest row norm, so
/// that inner-product order for a probe `(q, 0)` equals Euclidean order.
fn augment(rows: &[f32], dim: usize) -> Vec<f32> {
    let norms: Vec<f64> = rows.chunks_exact(dim).map(|r| dot(r, r)).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(rows.len() + norms.len());
    for (r, n) in rows.chunks_exact(dim).zip(&norms) {
        out.extend_from_slice(r);
        out.push((max - n).max(0.0).sqrt() as f32);
    }
    out
}

impl IvfTable {
    fn new(centroids: Vec<f32>, assignments: Vec<u32>, n_clusters: usize) -> Self {
        let mut lists = vec![Vec::new(); n_clusters];
        for (r, &c) in assignments.iter().enumerate() {
            lists[c as usize].push(r as u32);
        }
        Self {
            centroids,
            assignments,
            lists,
        }
    }

    /// Clusters nearest to the augmented probe `(probe, 0)`, i.e. in
    /// decreasing order of `2 probe . c - |c|^2` over the augmented centroid.
    fn probe_order(&self, probe: &[f32], dim: usize, n_probe: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = self
            .centroids
            .chunks_exact(dim + 1)
            .enumerate()
            .map(|(c, cen)| (c, 2.0 * dot(probe, &cen[..dim]) - dot(cen, cen)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(n_probe).map(|(c, _)| c).collect()
    }
}

fn decode_index(bytes: &[u8]) -> Result<DenseIndex> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated index at byte {pos}")));
        };
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != INDEX_MAGIC {
        return Err(Error::Format("bad index magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(Error::Format(format!(
            "index version {version}, expected {INDEX_VERSION}"
        )));
    }
    let mode = take(1)?[0];
    let mut u = [0u64; 5];
    for v in u.iter_mut() {
        *v = u64::from_le_bytes(take(8)?.try_into().unwrap());
    }
    let [dim, n, fingerprint, nc, np] = u.map(|v| v as usize);
    let mut doc_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let id =
            std::str::from_utf8(take(len)?).map_err(|_| Error::Format("non-utf8 doc id".into()))?;
        doc_ids.push(id.to_string());
    }
    let mut floats = |count: usize| -> Result<Vec<f32>> {
        let raw = take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let embeddings = floats(n * dim)?;
    let (mode, ivf) = match mode {
        0 => (IndexMode::Exact, None),
        1 => {
            let centroids = floats(nc * (dim + 1))?;
            let raw = take(n * 4)?;
            let assignments: Vec<u32> = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if assignments.iter().any(|&a| a as usize >= nc) {
                return Err(Error::Format("cluster assignment out of range".into()));
            }
            (
                IndexMode::Ivf {
                    n_clusters: nc,
                    n_probe: np,
                },
                Some(IvfTable::new(centroids, assignments, nc)),
            )
        }
        m => return Err(Error::Format(format!("unknown index mode {m}"))),
    };
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after index".into()));
    }
    Ok(DenseIndex {
        doc_ids,
        dim,
        embeddings,
        mode,
        ivf,
        model_fingerprint: fingerprint as u64,
    })
}

/// Mean over probes of `|approx ∩ exact| / k`. When the exact list is
/// shorter than `k` (tiny corpora) its length is the denominator.
pub fn knn_recall(
    approx: &DenseIndex,
    exact: &DenseIndex,
    probes: &[Vec<f32>],
    k: usize,
) -> Result<f64> {
    if approx.model_fingerprint != exact.model_fingerprint {
        return Err(Error::FingerprintMismatch {
            index: exact.model_fingerprint,
            model: approx.model_fingerprint,
        });
    }
    if approx.doc_ids != exact.doc_ids || approx.dim != exact.dim {
        return Err(Error::InvalidInput(
            "indexes cover different documents".into(),
        ));
    }
    if probes.is_empty() || k == 0 {
        return Err(Error::InvalidInput(
            "knn_recall needs at least one probe and k >= 1".into(),
        ));
    }
    let none = BTreeSet::new();
    let mut total = 0.0;
    for p in probes {
        let truth: HashSet<String> = exact
            .topk(p, k, &none)?
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let got = approx.topk(p, k, &none)?;
        let hit = got.iter().filter(|(id, _)| truth.contains(id)).count();
        total += hit as f64 / truth.len().max(1) as f64;
    }
    Ok(total / probes.len() as f64)
}
