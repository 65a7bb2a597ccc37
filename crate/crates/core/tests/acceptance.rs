//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use drlab::corpus::{
    generate_synthetic, load_corpus, load_qrels, load_queries, save_corpus, save_qrels,
    save_queries, Corpus, CorpusFormat, Document, Qrels, Query, QuerySet, SyntheticSpec,
};
use drlab::dense_index::{knn_recall, DenseIndex, IndexMode};
use drlab::diagnostics::evaluate;
use drlab::encoder::{
    batch_loss, loss_and_grad, BatchNegative, EncoderConfig, EncoderModel, LossOptions, TrainBatch,
    TrainExample,
};
use drlab::mining::{sample_training_negatives, NegativePool, NegativeRecord, NegativeSource};
use drlab::sparse::{bm25_topk, Bm25Params, SparseIndex};
use drlab::trainer::{analyze, run_experiment, write_analysis, RunConfig, Strategy, TrainingData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let instances = 24;
    for _ in 0..instances {
        let model = common::random_model(&mut rng, 16, 1.0);
        let batch = common::random_batch(&mut rng, model.config.vocab_hash_size);
        let opts = LossOptions {
            temperature: rng.gen_range(0.5..2.0),
            in_batch_negatives: rng.gen_bool(0.5),
        };
        let (_, grad) = loss_and_grad(&model, &batch, &opts).map_err(|e| e.to_string())?;
        let fd = common::finite_difference(&model, &batch, &opts);
        for (a, n) in grad.iter().zip(&fd) {
            worst = worst.max(common::relative_error(*a, *n));
        }
    }
    check(
        worst < 1e-4,
        format!("{instances} instances, max relative error {worst:.2e} (< 1e-4)"),
    )
}

fn loss_sanity() -> Outcome {
    let model = EncoderModel::new(
        EncoderConfig {
            vocab_hash_size: 64,
            embed_dim: 8,
            hidden_dim: 8,
            out_dim: 8,
        },
        5,
    )
    .unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for n_neg in [3usize, 11, 31] {
        // Every candidate has the positive's tokens, so all scores tie.
        let doc = vec![3u32, 9, 17];
        let ex = |i: usize| TrainExample {
            query_id: format!("q{i}"),
            query_tokens: vec![1, 2, i as u32],
            positive_id: format!("p{i}"),
            positive_tokens: doc.clone(),
            negatives: (0..n_neg)
                .map(|j| BatchNegative {
                    doc_id: format!("n{i}-{j}"),
                    tokens: doc.clone(),
                    source: NegativeSource::QueryAnn,
                })
                .collect(),
        };
        let batch = TrainBatch {
            examples: (0..4).map(ex).collect(),
        };
        let l = batch_loss(&model, &batch, &LossOptions::default()).unwrap();
        let want = (1.0 + n_neg as f64).ln();
        ok &= (l - want).abs() <= 1e-9;
        details.push(format!(
            "n_neg={n_neg}: |{l:.12} - ln({})| = {:.1e}",
            n_neg + 1,
            (l - want).abs()
        ));
    }
    check(ok, details.join("; "))
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u: f64 = rng.gen_range(1e-12..1.0);
    let v: f64 = rng.gen();
    ((-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()) as f32
}

fn dense_search_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let none = BTreeSet::new();
    let mut mismatches = 0;
    for inst in 0..200 {
        let n = rng.gen_range(1..=2000);
        let dim = rng.gen_range(1..=32);
        let ids: Vec<String> = (0..n).map(|i| format!("d{i:04}")).collect();
        // Coarse values so exact score ties occur and exercise the id tie-break.
        let rows: Vec<f32> = (0..n * dim)
            .map(|_| (rng.gen_range(-4i32..=4) as f32) * 0.5)
            .collect();
        let index =
            DenseIndex::from_embeddings(ids.clone(), dim, rows.clone(), IndexMode::Exact, 0, inst)
                .unwrap();
        let probe: Vec<f32> = (0..dim).map(|_| gauss(&mut rng)).collect();
        for k in [1usize, 10, 100] {
            let got = index.topk(&probe, k, &none).unwrap();
            if got != common::brute_topk(&ids, &rows, dim, &probe, k) {
                mismatches += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..20_000));
    let text = |rng: &mut ChaCha8Rng, len: usize| {
        (0..len).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
    };
    let docs: Vec<Document> = (0..10_000)
        .map(|i| {
            let len = rng.gen_range(5..40);
            Document::new(format!("d{i:05}"), text(&mut rng, len))
        })
        .collect();
    let corpus = Corpus::from_documents(docs).unwrap();
    let model = EncoderModel::new(EncoderConfig::default(), 3).unwrap();
    let exact = DenseIndex::build(&model, &corpus, IndexMode::Exact, 0).unwrap();
    let ivf = DenseIndex::build(
        &model,
        &corpus,
        IndexMode::Ivf {
            n_clusters: 64,
            n_probe: 8,
        },
        0,
    )
    .unwrap();
    let probes: Vec<Vec<f32>> = (0..200)
        .map(|_| {
            let len = rng.gen_range(2..8);
            model.encode_text(&text(&mut rng, len)).unwrap()
        })
        .collect();
    let recall = knn_recall(&ivf, &exact, &probes, 10).unwrap();
    check(
        mismatches == 0 && recall >= 0.95,
        format!("exact vs brute force: {mismatches} mismatches over 600 queries; IVF 64/8 knn_recall@10 = {recall:.4} (>= 0.95)"),
    )
}

fn bm25_oracle() -> Outcome {
    let corpus = Corpus::from_documents(vec![
        Document::new("d1", "cat"),
        Document::new("d2", "cat cat"),
        Document::new("d3", "dog"),
    ])
    .unwrap();
    let index = SparseIndex::build(&corpus, Bm25Params::default()).unwrap();
    let got = bm25_topk(&index, "cat", 10);
    // Straight-line calculation: N = 3, df(cat) = 2, avgdl = 4/3, k1 = 0.9, b = 0.4.
    let idf = (1.0f64 + (3.0 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
    let avgdl = 4.0 / 3.0;
    let w = |tf: f64, len: f64| idf * tf / (tf + 0.9 * (1.0 - 0.4 + 0.4 * len / avgdl));
    let want = [("d2", w(2.0, 2.0)), ("d1", w(1.0, 1.0))];
    let ok = got.len() == 2
        && got
            .iter()
            .zip(&want)
            .all(|((id, s), (wid, ws))| id == wid && (s - ws).abs() <= 1e-9);
    check(ok, format!("got {got:?}, hand-computed {want:?}"))
}

/// Solve the small symmetric system `a x = b` by Gaussian elimination.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn metric_oracle() -> Outcome {
    // Five queries whose positive sits at ranks 1, 2, 11, beyond the cutoff, 4.
    let mut model = EncoderModel::new(
        EncoderConfig {
            vocab_hash_size: 512,
            embed_dim: 16,
            hidden_dim: 16,
            out_dim: 16,
        },
        11,
    )
    .unwrap();
    for i in 0..model.params.len() {
        let x = model.params.get_flat_mut(i).unwrap();
        *x *= 20.0;
    }
    let queries = QuerySet::from_queries(
        [
            "red apple",
            "blue ocean",
            "green forest",
            "yellow sun",
            "purple rain",
        ]
        .iter()
        .enumerate()
        .map(|(i, t)| Query::new(format!("q{i}"), *t))
        .collect(),
    )
    .unwrap();
    let n_docs = 25;
    let doc_ids: Vec<String> = (0..n_docs).map(|d| format!("d{d:02}")).collect();
    let ranks = [Some(1usize), Some(2), Some(11), None, Some(4)];
    let mut qrels = Qrels::new();
    // Desired score of each doc for each query: positive i is doc i; the
    // rest fill the remaining slots in id order.
    let mut target = vec![vec![0.0f64; n_docs]; 5];
    for (qi, rank) in ranks.iter().enumerate() {
        qrels.insert(format!("q{qi}"), doc_ids[qi].clone());
        let slot = rank.unwrap_or(n_docs);
        let mut order: Vec<usize> = (0..n_docs).filter(|&d| d != qi).collect();
        order.insert(slot - 1, qi);
        for (pos, d) in order.iter().enumerate() {
            target[qi][*d] = (n_docs - pos) as f64;
        }
    }
    // Rows r_d = Q^T (Q Q^T)^-1 s_d reproduce the targets as dot products.
    let q: Vec<Vec<f64>> = queries
        .iter()
        .map(|x| {
            model
                .encode_text(&x.text)
                .unwrap()
                .into_iter()
                .map(f64::from)
                .collect()
        })
        .collect();
    let gram: Vec<Vec<f64>> = q
        .iter()
        .map(|a| {
            q.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let dim = model.config.out_dim;
    let mut rows = Vec::with_capacity(n_docs * dim);
    for d in 0..n_docs {
        let coef = solve(gram.clone(), (0..5).map(|i| target[i][d]).collect());
        for k in 0..dim {
            rows.push((0..5).map(|i| coef[i] * q[i][k]).sum::<f64>() as f32);
        }
    }
    let index = DenseIndex::from_embeddings(
        doc_ids.clone(),
        dim,
        rows.clone(),
        IndexMode::Exact,
        model.fingerprint(),
        0,
    )
    .unwrap();
    let cutoffs = [1usize, 5, 10, 20];
    let snap =
        evaluate(&index, &model, &queries, &qrels, 20, &cutoffs, 1).map_err(|e| e.to_string())?;

    // Brute force from the stored rows.
    let mut rr = 0.0;
    let mut hits = [0usize; 4];
    let mut brute_ranks = Vec::new();
    for (qi, query) in queries.iter().enumerate() {
        let probe = model.encode_text(&query.text).unwrap();
        let ranked = common::brute_topk(&doc_ids, &rows, dim, &probe, n_docs);
        let rank = ranked
            .iter()
            .position(|(id, _)| *id == doc_ids[qi])
            .unwrap()
            + 1;
        brute_ranks.push(rank);
        if rank <= 10 {
            rr += 1.0 / rank as f64;
        }
        for (c, cut) in cutoffs.iter().enumerate() {
            if rank <= *cut {
                hits[c] += 1;
            }
        }
    }
    let brute_mrr = rr / 5.0;
    let recall_ok = cutoffs
        .iter()
        .zip(hits)
        .all(|(c, h)| snap.recall_at(*c) == Some(h as f64 / 5.0));
    check(
        brute_ranks == [1, 2, 11, 25, 4]
            && snap.mrr_at_10 == brute_mrr
            && snap.mrr_at_10 == 0.35
            && recall_ok,
        format!(
            "ranks {brute_ranks:?}; evaluate MRR@10 = {}, brute force = {brute_mrr}; recall {:?}",
            snap.mrr_at_10, snap.recall
        ),
    )
}

fn sampling_weights() -> Outcome {
    let mut records = Vec::new();
    for (source, tag) in [
        (NegativeSource::Momentum, "m"),
        (NegativeSource::Lookahead, "l"),
        (NegativeSource::QueryAnn, "q"),
    ] {
        for i in 0..1000 {
            records.push(NegativeRecord {
                doc_id: format!("{tag}{i}"),
                source,
                episode_introduced: 2,
                origin_episode: 1,
            });
        }
    }
    let mut counts: BTreeMap<NegativeSource, usize> = BTreeMap::new();
    let calls = 1000;
    let per_call = 100;
    for seed in 0..calls {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_training_negatives(&records, per_call, 0.5, 0.5, &mut rng).unwrap();
        for r in s.records {
            *counts.entry(r.source).or_default() += 1;
        }
    }
    let total = (calls as usize * per_call) as f64;
    let f = |s| counts.get(&s).copied().unwrap_or(0) as f64 / total;
    let (m, l, q) = (
        f(NegativeSource::Momentum),
        f(NegativeSource::Lookahead),
        f(NegativeSource::QueryAnn),
    );
    check(
        (m - 0.5).abs() <= 0.01 && (l - 0.25).abs() <= 0.01 && (q - 0.25).abs() <= 0.01,
        format!("{total} draws: momentum {m:.4}, lookahead {l:.4}, query_ann {q:.4}"),
    )
}

/// Scaled-down experiment settings shared by the dynamics criteria. The
/// mining depth is cut to 20 for a ~1k-document corpus.
fn phenomenon_config(strategy: Strategy, seed: u64, episodes: u32) -> RunConfig {
    RunConfig {
        episodes,
        strategy,
        epochs_per_episode: 20,
        batch_queries: 8,
        n_neg: 7,
        mining_depth: 20,
        lr: 0.01,
        seed,
        encoder: EncoderConfig {
            vocab_hash_size: 4096,
            embed_dim: 32,
            hidden_dim: 64,
            out_dim: 32,
        },
        ..RunConfig::default()
    }
}

fn synthetic(seed: u64) -> TrainingData {
    let d = generate_synthetic(&SyntheticSpec {
        n_queries: 50,
        groups_per_query: 2,
        docs_per_group: 5,
        n_filler_docs: 500,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    TrainingData::new(d.corpus, d.queries, d.qrels).unwrap()
}

fn pool_invariants() -> Outcome {
    let data = synthetic(1);
    let cfg = phenomenon_config(Strategy::Tele, 1, 3);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &data, dir.path()).map_err(|e| e.to_string())?;
    let pools: Vec<NegativePool> = (1..=3)
        .map(|i| NegativePool::load(&dir.path().join(format!("epi-{i}/pool.jsonl"))).unwrap())
        .collect();
    let first_clean = pools[0].count_source(NegativeSource::Bm25) == 0
        && pools[0].count_source(NegativeSource::Momentum) == 0;
    let mut carried = true;
    for w in pools.windows(2) {
        for (q, recs) in &w[0].negatives {
            let mut want: Vec<(&str, u32)> = recs
                .iter()
                .map(|r| (r.doc_id.as_str(), r.origin_episode))
                .collect();
            let mut have: Vec<(&str, u32)> = w[1]
                .records(q)
                .iter()
                .filter(|r| r.source == NegativeSource::Momentum)
                .map(|r| (r.doc_id.as_str(), r.origin_episode))
                .collect();
            want.sort_unstable();
            have.sort_unstable();
            carried &= want == have;
        }
    }
    let positives = pools
        .iter()
        .flat_map(|p| {
            p.negatives
                .iter()
                .flat_map(|(q, recs)| recs.iter().map(move |r| (q, r)))
        })
        .filter(|(q, r)| data.qrels.is_positive(q, &r.doc_id))
        .count();
    let origins: BTreeSet<u32> = pools[2]
        .negatives
        .values()
        .flatten()
        .map(|r| r.origin_episode)
        .collect();
    check(
        first_clean && carried && positives == 0 && origins == BTreeSet::from([1, 2, 3]),
        format!(
            "episode-1 pool bm25/momentum-free: {first_clean}; pool i-1 carried as momentum: {carried}; positives in pools: {positives}; episode-3 origins {origins:?}"
        ),
    )
}

fn phenomenon_reproduction() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut forgetting: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    let mut swings: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    let mut bm25_shares = Vec::new();
    let mut lookahead = Vec::new();
    for strategy in [Strategy::QnegOnly, Strategy::Tele, Strategy::AnceBm25Warmup] {
        for seed in 1..=5 {
            let data = synthetic(seed);
            let cfg = phenomenon_config(strategy, seed, 4);
            let dir = root.path().join(format!("{strategy}-{seed}"));
            let report = run_experiment(&cfg, &data, &dir).map_err(|e| e.to_string())?;
            let analysis = analyze(&report).map_err(|e| e.to_string())?;
            write_analysis(&analysis, &dir).map_err(|e| e.to_string())?;
            for f in [
                "forgetting.csv",
                "composition.csv",
                "composition_summary.csv",
            ] {
                if !dir.join(f).exists() {
                    return Err(format!("{f} missing"));
                }
            }
            forgetting
                .entry(strategy)
                .or_default()
                .push(analysis.mean_forgetting());
            swings
                .entry(strategy)
                .or_default()
                .push(analysis.swing_rate());
            lookahead.push(analysis.composition[1].lookahead_coverage);
            if strategy == Strategy::AnceBm25Warmup {
                bm25_shares.push((
                    analysis.composition[0].share("bm25"),
                    analysis.composition[1].share("bm25"),
                ));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let q_forget = mean(&forgetting[&Strategy::QnegOnly]);
    let t_forget = mean(&forgetting[&Strategy::Tele]);
    let q_swing = mean(&swings[&Strategy::QnegOnly]);
    let a = q_swing > 0.0 && q_forget > 0.0;
    let b = t_forget <= q_forget;
    let c = bm25_shares.iter().all(|(s1, s2)| *s2 < 0.5 * s1);
    check(
        a && b && c,
        format!(
            "(a) qneg_only swing {q_swing:.3}/query, forgetting {q_forget:.4}: {a}; (b) tele forgetting {t_forget:.4} <= qneg_only {q_forget:.4}: {b}; (c) warm-up bm25 share episode 1 -> 2 {:?}: {c}; mean episode-2 lookahead coverage {:.4}",
            bm25_shares.iter().map(|(x, y)| format!("{x:.2}->{y:.3}")).collect::<Vec<_>>(),
            mean(&lookahead)
        ),
    )
}

/// gen-data -> files -> train -> analyze, returning every produced file.
fn full_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let d = generate_synthetic(&SyntheticSpec {
        n_queries: 20,
        n_filler_docs: 200,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).unwrap();
    save_corpus(
        &d.corpus,
        &data_dir.join("corpus.jsonl"),
        CorpusFormat::Jsonl,
    )
    .unwrap();
    save_queries(&d.queries, &data_dir.join("queries.tsv")).unwrap();
    save_qrels(&d.qrels, &data_dir.join("qrels.txt")).unwrap();
    let data = TrainingData::new(
        load_corpus(&data_dir.join("corpus.jsonl"), CorpusFormat::Jsonl).unwrap(),
        load_queries(&data_dir.join("queries.tsv")).unwrap(),
        load_qrels(&data_dir.join("qrels.txt")).unwrap(),
    )
    .unwrap();
    let mut cfg = phenomenon_config(Strategy::Tele, 9, 3);
    cfg.epochs_per_episode = 5;
    let run = dir.join("run");
    let report = run_experiment(&cfg, &data, &run).unwrap();
    write_analysis(&analyze(&report).unwrap(), &run.join("analysis")).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = full_pipeline(a.path());
    let fb = full_pipeline(b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let checkpoints = names.iter().filter(|n| n.ends_with(".bin")).count();
    let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
    check(
        fa.len() == fb.len() && differing.is_empty() && checkpoints == 6 && csvs >= 8,
        format!("{} files ({checkpoints} checkpoints, {csvs} CSVs) compared byte for byte; differing: {differing:?}", fa.len()),
    )
}

fn descent() -> Outcome {
    let corpus = Corpus::from_documents(
        [
            ("pos", "solar panel efficiency winter output"),
            ("n1", "solar flare activity"),
            ("n2", "panel discussion schedule"),
            ("n3", "winter sports output"),
            ("n4", "efficiency of heat pumps"),
            ("n5", "garden soil moisture"),
            ("n6", "river water levels"),
            ("n7", "solar system planets"),
            ("n8", "panel beating workshop"),
        ]
        .iter()
        .map(|(i, t)| Document::new(*i, *t))
        .collect(),
    )
    .unwrap();
    let queries =
        QuerySet::from_queries(vec![Query::new("q", "solar panel winter efficiency")]).unwrap();
    let mut qrels = Qrels::new();
    qrels.insert("q", "pos");
    let data = TrainingData::new(corpus, queries, qrels).unwrap();
    let cfg = RunConfig {
        episodes: 1,
        strategy: Strategy::QnegOnly,
        epochs_per_episode: 100,
        batch_queries: 1,
        n_neg: 7,
        mining_depth: 20,
        lr: 0.01,
        encoder: EncoderConfig {
            vocab_hash_size: 1024,
            embed_dim: 16,
            hidden_dim: 16,
            out_dim: 16,
        },
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, &data, dir.path()).map_err(|e| e.to_string())?;
    let curve = &report.episodes[0].loss_curve;
    let start = (1.0f64 + 7.0).ln();
    let first = curve[0].1;
    let last = curve.last().unwrap().1;
    check(
        curve.len() == 100 && (first - start).abs() < 1e-2 && last <= 0.5 * start,
        format!(
            "{} steps; loss {first:.4} (ln 8 = {start:.4}) -> {last:.4}, reduction {:.1}%",
            curve.len(),
            100.0 * (1.0 - last / start)
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("loss sanity", loss_sanity),
        ("dense search oracle", dense_search_oracle),
        ("bm25 oracle", bm25_oracle),
        ("metric oracle", metric_oracle),
        ("sampling weights", sampling_weights),
        ("pool structure invariants", pool_invariants),
        ("phenomenon reproduction", phenomenon_reproduction),
        ("determinism", determinism),
        ("descent", descent),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name} [{secs:.1}s]: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} [{secs:.1}s]: {d}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
