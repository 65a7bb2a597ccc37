//! The episodic loop: mine negatives, train, refresh the mining model.
//!
//! Episode `i` builds its pool with the refresh checkpoint of episode
//! `i - 1` (the initial model for `i = 1`), trains for a fixed number of
//! epochs over `(query, positive)` pairs, then evaluates the final model on
//! the training queries. Every random choice is derived from the run seed.

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{RunConfig, Strategy, TrainMode};
pub use report::{analyze, load_report, write_analysis, Analysis, EpisodeRecord, RunReport};

use crate::corpus::{Corpus, Qrels, QuerySet};
use crate::dense_index::{DenseIndex, IndexMode};
use crate::diagnostics::{evaluate, EvalSnapshot, Rankings};
use crate::encoder::{
    loss_and_grad, optimizer_step, save_checkpoint, AdamState, BatchNegative, EncoderModel,
    LossOptions, LrSchedule, TrainBatch, TrainExample,
};
use crate::error::{Error, Result};
use crate::mining::{
    mine_bm25_negatives, mine_lookahead_negatives, mine_query_negatives, sample_training_negatives,
    CandidateLists, NegativePool, NegativeSource, PoolSources,
};
use crate::sparse::SparseIndex;
use crate::util::derive_seed;

// Seed-path tags, so independent streams never share a derivation.
const SEED_INIT: u64 = 0;
const SEED_SHUFFLE: u64 = 1;
const SEED_SAMPLE: u64 = 2;
const SEED_INDEX: u64 = 3;

/// Corpus, queries and judgments, with hashed tokens cached per text.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub corpus: Corpus,
    pub queries: QuerySet,
    pub qrels: Qrels,
}

impl TrainingData {
    pub fn new(corpus: Corpus, queries: QuerySet, qrels: Qrels) -> Result<Self> {
        qrels.validate(&corpus, &queries)?;
        Ok(Self {
            corpus,
            queries,
            qrels,
        })
    }

    /// Document id to group tag, for documents that carry one.
    pub fn group_tags(&self) -> BTreeMap<String, String> {
        self.corpus
            .iter()
            .filter_map(|d| d.group_tag.clone().map(|t| (d.id.clone(), t)))
            .collect()
    }

    /// `(query, positive)` training pairs in query order.
    pub fn units(&self) -> Vec<(String, String)> {
        self.queries
            .iter()
            .flat_map(|q| {
                self.qrels
                    .positives(&q.id)
                    .into_iter()
                    .flatten()
                    .map(move |d| (q.id.clone(), d.clone()))
            })
            .collect()
    }
}

struct TokenCache {
    docs: HashMap<String, Vec<u32>>,
    queries: HashMap<String, Vec<u32>>,
}

impl TokenCache {
    fn build(data: &TrainingData, model: &EncoderModel) -> Result<Self> {
        let docs = data
            .corpus
            .iter()
            .map(|d| (d.id.clone(), model.hash_text(&d.text)))
            .collect();
        let queries: HashMap<String, Vec<u32>> = data
            .queries
            .iter()
            .map(|q| (q.id.clone(), model.hash_text(&q.text)))
            .collect();
        if let Some((id, _)) = queries.iter().find(|(_, t)| t.is_empty()) {
            return Err(Error::InvalidInput(format!("query `{id}` has no tokens")));
        }
        Ok(Self { docs, queries })
    }

    fn doc(&self, id: &str) -> Result<&[u32]> {
        let t = self
            .docs
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if t.is_empty() {
            return Err(Error::InvalidInput(format!(
                "document `{id}` has no tokens"
            )));
        }
        Ok(t)
    }
}

/// Steps one episode takes when no query is dropped.
pub fn steps_per_episode(config: &RunConfig, n_units: usize) -> usize {
    config.epochs_per_episode * n_units.div_ceil(config.batch_queries)
}

/// The learning-rate schedule spanning all episodes.
pub fn run_schedule(config: &RunConfig, n_units: usize) -> LrSchedule {
    let per = steps_per_episode(config, n_units);
    let total = per * config.episodes as usize;
    LrSchedule {
        kind: config.schedule,
        base_lr: config.lr,
        warmup_fraction: config.warmup_fraction,
        total_steps: total,
        episode_boundaries: (1..config.episodes as usize).map(|e| e * per).collect(),
    }
}

pub struct EpisodeInput<'a> {
    pub episode: u32,
    pub init: &'a EncoderModel,
    pub opt_state: AdamState,
    pub pool: &'a NegativePool,
    pub schedule: &'a LrSchedule,
    /// Global step index of this episode's first step.
    pub step_offset: usize,
    /// Where to write the offending batch if the loss turns non-finite.
    pub dump_dir: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub model: EncoderModel,
    pub opt_state: AdamState,
    pub refresh_model: EncoderModel,
    pub refresh_opt_state: AdamState,
    pub refresh_step: usize,
    /// `(step, global_step, lr, loss)`, steps 1-based within the episode.
    pub loss_curve: Vec<(usize, usize, f64, f64)>,
}

#[derive(Serialize)]
struct BadBatch<'a> {
    episode: u32,
    step: usize,
    error: String,
    examples: Vec<BadExample<'a>>,
}

#[derive(Serialize)]
struct BadExample<'a> {
    query_id: &'a str,
    positive_id: &'a str,
    negatives: Vec<&'a str>,
}

fn dump_bad_batch(
    dir: &Path,
    episode: u32,
    step: usize,
    batch: &TrainBatch,
    err: &Error,
) -> Option<PathBuf> {
    let record = BadBatch {
        episode,
        step,
        error: err.to_string(),
        examples: batch
            .examples
            .iter()
            .map(|e| BadExample {
                query_id: &e.query_id,
                positive_id: &e.positive_id,
                negatives: e.negatives.iter().map(|n| n.doc_id.as_str()).collect(),
            })
            .collect(),
    };
    let path = dir.join("bad_batch.json");
    let json = serde_json::to_string_pretty(&record).ok()?;
    fs::write(&path, json).ok()?;
    Some(path)
}

/// Train one episode over the pool. Queries with an empty pool are skipped.
pub fn run_episode(
    config: &RunConfig,
    data: &TrainingData,
    input: EpisodeInput<'_>,
) -> Result<EpisodeOutput> {
    let EpisodeInput {
        episode,
        init,
        mut opt_state,
        pool,
        schedule,
        step_offset,
        dump_dir,
    } = input;
    let tokens = TokenCache::build(data, init)?;
    let opts = LossOptions {
        temperature: config.temperature,
        in_batch_negatives: config.in_batch_negatives,
    };

    let mut units = data.units();
    let before = units.len();
    units.retain(|(q, _)| !pool.records(q).is_empty());
    if units.len() < before {
        warn!(
            "episode {episode}: {} training pairs dropped for empty negative pools",
            before - units.len()
        );
    }
    let total = config.epochs_per_episode * units.len().div_ceil(config.batch_queries);
    let refresh_step = (config.refresh_fraction * total as f64).ceil() as usize;

    let mut model = init.clone();
    let mut refresh = (model.clone(), opt_state.clone());
    let mut curve = Vec::with_capacity(total);
    let mut resampled = 0usize;
    let mut step = 0usize;

    for epoch in 0..config.epochs_per_episode {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[SEED_SHUFFLE, u64::from(episode), epoch as u64],
        ));
        let mut order = units.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_queries) {
            step += 1;
            let global = step_offset + step - 1;
            let mut examples = Vec::with_capacity(chunk.len());
            for (k, (qid, pos)) in chunk.iter().enumerate() {
                let seed = derive_seed(
                    config.seed,
                    &[SEED_SAMPLE, u64::from(episode), step as u64, k as u64],
                );
                let mut srng = ChaCha8Rng::seed_from_u64(seed);
                let sample = sample_training_negatives(
                    pool.records(qid),
                    config.n_neg,
                    pool.alpha,
                    pool.beta,
                    &mut srng,
                )?;
                resampled += usize::from(sample.with_replacement);
                let negatives = sample
                    .records
                    .into_iter()
                    .map(|r| {
                        Ok(BatchNegative {
                            tokens: tokens.doc(&r.doc_id)?.to_vec(),
                            doc_id: r.doc_id,
                            source: r.source,
                        })
                    })
                    .collect::<Result<_>>()?;
                examples.push(TrainExample {
                    query_id: qid.clone(),
                    query_tokens: tokens.queries[qid].clone(),
                    positive_id: pos.clone(),
                    positive_tokens: tokens.doc(pos)?.to_vec(),
                    negatives,
                });
            }
            let batch = TrainBatch { examples };
            let (loss, grad) = match loss_and_grad(&model, &batch, &opts) {
                Ok(v) => v,
                Err(e @ Error::Numerical(_)) => {
                    let dumped =
                        dump_dir.and_then(|d| dump_bad_batch(d, episode, step, &batch, &e));
                    let where_ = dumped
                        .map(|p| format!("; batch written to {}", p.display()))
                        .unwrap_or_default();
                    return Err(Error::Numerical(format!(
                        "episode {episode} step {step}: {e}{where_}"
                    )));
                }
                Err(e) => return Err(e),
            };
            let lr = schedule.lr_at(global)?;
            optimizer_step(&mut model, &grad, &mut opt_state, lr, &config.adam)?;
            curve.push((step, global, lr, loss));
            if step == refresh_step {
                refresh = (model.clone(), opt_state.clone());
            }
        }
    }
    if resampled > 0 {
        warn!("episode {episode}: {resampled} draws sampled with replacement from pools smaller than n_neg={}", config.n_neg);
    }
    Ok(EpisodeOutput {
        model,
        opt_state,
        refresh_model: refresh.0,
        refresh_opt_state: refresh.1,
        refresh_step,
        loss_curve: curve,
    })
}

fn count_sources(pool: &NegativePool) -> BTreeMap<String, usize> {
    [
        NegativeSource::Bm25,
        NegativeSource::QueryAnn,
        NegativeSource::Lookahead,
        NegativeSource::Momentum,
    ]
    .into_iter()
    .map(|s| (s.as_str().to_string(), pool.count_source(s)))
    .collect()
}

fn to_rankings(lists: &CandidateLists) -> Rankings {
    lists
        .iter()
        .map(|(q, c)| (q.clone(), c.iter().map(|c| c.doc_id.clone()).collect()))
        .collect()
}

fn write_loss_csv(
    path: &Path,
    config_hash: &str,
    curve: &[(usize, usize, f64, f64)],
) -> Result<()> {
    let mut out = format!("# config_hash={config_hash}\nstep,global_step,lr,loss\n");
    for (s, g, lr, l) in curve {
        out.push_str(&format!("{s},{g},{lr},{l}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The model every episode starts from in from-scratch mode.
pub fn initial_model(config: &RunConfig) -> Result<EncoderModel> {
    EncoderModel::new(config.encoder, derive_seed(config.seed, &[SEED_INIT]))
}

/// Run every episode, writing artifacts under `run_dir` and returning the
/// full report (also saved as `run_dir/report.json`).
pub fn run_experiment(
    config: &RunConfig,
    data: &TrainingData,
    run_dir: &Path,
) -> Result<RunReport> {
    config.validate()?;
    let hash = config.hash();
    let hash_hex = config.hash_hex();
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let sparse = if config.strategy.needs_sparse() {
        Some(SparseIndex::build(&data.corpus, config.bm25)?)
    } else {
        None
    };
    let bm25_lists = match &sparse {
        Some(s) => Some(mine_bm25_negatives(
            s,
            &data.queries,
            &data.qrels,
            config.mining_depth,
        )?),
        None => None,
    };

    let theta0 = initial_model(config)?;
    let n_units = data.units().len();
    if n_units == 0 {
        return Err(Error::InvalidInput("no query has a judged positive".into()));
    }
    let schedule = run_schedule(config, n_units);
    schedule.validate()?;
    let per_episode = steps_per_episode(config, n_units);
    let (alpha, beta) = config.effective_weights();

    let eval_index = |m: &EncoderModel| DenseIndex::build(m, &data.corpus, IndexMode::Exact, 0);
    let snapshot = |index: &DenseIndex, m: &EncoderModel, episode: u32| -> Result<EvalSnapshot> {
        evaluate(
            index,
            m,
            &data.queries,
            &data.qrels,
            config.k_eval,
            &config.recall_cutoffs,
            episode,
        )
    };

    let theta0_index = eval_index(&theta0)?;
    let initial_snapshot = snapshot(&theta0_index, &theta0, 0)?;
    // (model, exact index over it) of the latest final checkpoint
    let mut last_final: (EncoderModel, DenseIndex) = (theta0.clone(), theta0_index);
    let mut mining_model = theta0.clone();
    let mut prev_final = theta0.clone();
    let mut opt_carry = AdamState::new(&config.encoder);
    let mut prev_pool: Option<NegativePool> = None;
    let mut episodes = Vec::with_capacity(config.episodes as usize);

    for i in 1..=config.episodes {
        let dir = run_dir.join(format!("epi-{i}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mining_index = if config.index == IndexMode::Exact
            && last_final.0.fingerprint() == mining_model.fingerprint()
        {
            last_final.1.clone()
        } else {
            DenseIndex::build(
                &mining_model,
                &data.corpus,
                config.index,
                derive_seed(config.seed, &[SEED_INDEX, u64::from(i)]),
            )?
        };
        let query_lists = if config.strategy.uses_query_ann(i) {
            Some(mine_query_negatives(
                &mining_index,
                &mining_model,
                &data.queries,
                &data.qrels,
                config.mining_depth,
            )?)
        } else {
            None
        };
        // Always mined so lookahead coverage can be measured for every strategy.
        let lookahead_lists = mine_lookahead_negatives(
            &mining_index,
            &mining_model,
            &data.corpus,
            &data.queries,
            &data.qrels,
            config.mining_depth,
        )?;
        let bm25_here = if config.strategy.uses_bm25(i) {
            bm25_lists.as_ref()
        } else {
            None
        };
        let pool = NegativePool::build(
            i,
            PoolSources {
                query_ann: query_lists.as_ref(),
                lookahead: config.strategy.uses_lookahead().then_some(&lookahead_lists),
                bm25: bm25_here,
                previous: if config.strategy.uses_momentum() {
                    prev_pool.as_ref()
                } else {
                    None
                },
            },
            alpha,
            beta,
            config.dedup_pool,
        )?;
        pool.check_no_positives(&data.qrels)?;
        let pool_path = dir.join("pool.jsonl");
        pool.save(&pool_path, &hash_hex)?;

        let init = match config.mode {
            TrainMode::FromScratch => &theta0,
            TrainMode::Continue => &prev_final,
        };
        let opt_state = if config.reset_optimizer || config.mode == TrainMode::FromScratch {
            AdamState::new(&config.encoder)
        } else {
            opt_carry.clone()
        };
        let out = run_episode(
            config,
            data,
            EpisodeInput {
                episode: i,
                init,
                opt_state,
                pool: &pool,
                schedule: &schedule,
                step_offset: (i as usize - 1) * per_episode,
                dump_dir: Some(&dir),
            },
        )?;

        let ckpt = dir.join("checkpoint.bin");
        let refresh = dir.join("refresh.bin");
        let loss_csv = dir.join("loss.csv");
        save_checkpoint(&ckpt, &out.model, &out.opt_state, hash)?;
        save_checkpoint(&refresh, &out.refresh_model, &out.refresh_opt_state, hash)?;
        write_loss_csv(&loss_csv, &hash_hex, &out.loss_curve)?;

        let final_index = eval_index(&out.model)?;
        let snap = snapshot(&final_index, &out.model, i)?;
        info!(
            "episode {i}: {} steps, last loss {:.4}, MRR@10 {:.4}",
            out.loss_curve.len(),
            out.loss_curve.last().map_or(f64::NAN, |c| c.3),
            snap.mrr_at_10
        );

        let hard_negatives = match (&query_lists, bm25_here) {
            (Some(q), _) => to_rankings(q),
            (None, Some(b)) => to_rankings(b),
            (None, None) => Rankings::new(),
        };
        episodes.push(EpisodeRecord {
            episode: i,
            checkpoint: format!("epi-{i}/checkpoint.bin"),
            refresh_checkpoint: format!("epi-{i}/refresh.bin"),
            pool: format!("epi-{i}/pool.jsonl"),
            loss_csv: format!("epi-{i}/loss.csv"),
            steps: out.loss_curve.len(),
            refresh_step: out.refresh_step,
            loss_curve: out.loss_curve.iter().map(|c| (c.0, c.3)).collect(),
            mining_model: format!("{:016x}", mining_model.fingerprint()),
            pool_counts: count_sources(&pool),
            snapshot: snap,
            hard_negatives,
            lookahead: to_rankings(&lookahead_lists),
        });

        mining_model = out.refresh_model;
        prev_final = out.model.clone();
        opt_carry = out.opt_state;
        last_final = (out.model, final_index);
        prev_pool = Some(pool);
    }

    let report = RunReport::new(
        config.clone(),
        initial_snapshot,
        bm25_lists.as_ref().map(to_rankings),
        data.group_tags(),
        episodes,
    );
    report.save(&run_dir.join("report.json"))?;
    Ok(report)
}
