//! Run configuration, loaded from TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense_index::IndexMode;
use crate::diagnostics::{DEFAULT_CUTOFFS, DEFAULT_K_EVAL, DEFAULT_K_LEARN};
use crate::encoder::{AdamConfig, EncoderConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::mining::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DEPTH};
use crate::sparse::Bm25Params;
use crate::util::{fnv1a, hex64};

/// How each episode's negative pool is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// BM25 negatives in episode 1, the previous model's query neighbors after.
    AnceBm25Warmup,
    /// Query neighbors, lookahead neighbors and momentum.
    Tele,
    /// Query neighbors only, from episode 1 on.
    QnegOnly,
    TeleNoMomentum,
    TeleNoLookahead,
    /// Tele plus BM25 negatives every episode.
    TelePlusBm25,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::AnceBm25Warmup,
        Strategy::Tele,
        Strategy::QnegOnly,
        Strategy::TeleNoMomentum,
        Strategy::TeleNoLookahead,
        Strategy::TelePlusBm25,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::AnceBm25Warmup => "ance_bm25_warmup",
            Strategy::Tele => "tele",
            Strategy::QnegOnly => "qneg_only",
            Strategy::TeleNoMomentum => "tele_no_momentum",
            Strategy::TeleNoLookahead => "tele_no_lookahead",
            Strategy::TelePlusBm25 => "tele_plus_bm25",
        }
    }

    pub fn uses_momentum(self) -> bool {
        matches!(
            self,
            Strategy::Tele | Strategy::TeleNoLookahead | Strategy::TelePlusBm25
        )
    }

    pub fn uses_lookahead(self) -> bool {
        matches!(
            self,
            Strategy::Tele | Strategy::TeleNoMomentum | Strategy::TelePlusBm25
        )
    }

    /// Whether episode `episode` draws on BM25.
    pub fn uses_bm25(self, episode: u32) -> bool {
        match self {
            Strategy::AnceBm25Warmup => episode == 1,
            Strategy::TelePlusBm25 => true,
            _ => false,
        }
    }

    /// Whether episode `episode` mines the query's own neighbors.
    pub fn uses_query_ann(self, episode: u32) -> bool {
        !(self == Strategy::AnceBm25Warmup && episode == 1)
    }

    pub fn needs_sparse(self) -> bool {
        self.uses_bm25(1)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Starting point of each episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every episode restarts from the initial model.
    FromScratch,
    /// Episode `i` starts from the end of episode `i - 1`.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub episodes: u32,
    pub strategy: Strategy,
    pub mode: TrainMode,
    /// Fraction of an episode's steps after which the mining checkpoint is taken.
    pub refresh_fraction: f64,
    pub epochs_per_episode: usize,
    pub batch_queries: usize,
    pub n_neg: usize,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub in_batch_negatives: bool,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub warmup_fraction: f64,
    /// Clear Adam moments at every episode boundary.
    pub reset_optimizer: bool,
    pub dedup_pool: bool,
    pub mining_depth: usize,
    pub k_eval: usize,
    pub recall_cutoffs: Vec<usize>,
    pub k_learn: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub index: IndexMode,
    pub bm25: Bm25Params,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            episodes: 3,
            strategy: Strategy::Tele,
            mode: TrainMode::FromScratch,
            refresh_fraction: 1.0,
            epochs_per_episode: 3,
            batch_queries: 8,
            n_neg: 31,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            temperature: 1.0,
            in_batch_negatives: false,
            schedule: ScheduleKind::Constant,
            lr: 1e-3,
            warmup_fraction: 0.1,
            reset_optimizer: true,
            dedup_pool: false,
            mining_depth: DEFAULT_DEPTH,
            k_eval: DEFAULT_K_EVAL,
            recall_cutoffs: DEFAULT_CUTOFFS.to_vec(),
            k_learn: DEFAULT_K_LEARN,
            seed: 1,
            encoder: EncoderConfig::default(),
            adam: AdamConfig::default(),
            index: IndexMode::Exact,
            bm25: Bm25Params::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.episodes == 0 {
            return bad("episodes must be >= 1".into());
        }
        if !(self.refresh_fraction > 0.0 && self.refresh_fraction <= 1.0) {
            return bad(format!(
                "refresh_fraction must be in (0, 1], got {}",
                self.refresh_fraction
            ));
        }
        for (name, v) in [
            ("batch_queries", self.batch_queries),
            ("n_neg", self.n_neg),
            ("mining_depth", self.mining_depth),
            ("k_eval", self.k_eval),
            ("k_learn", self.k_learn),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("warmup_fraction", self.warmup_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if let Some(c) = self
            .recall_cutoffs
            .iter()
            .find(|&&c| c == 0 || c > self.k_eval)
        {
            return bad(format!("recall cutoff {c} must be in 1..={}", self.k_eval));
        }
        if let IndexMode::Ivf {
            n_clusters,
            n_probe,
        } = self.index
        {
            if n_clusters == 0 || n_probe == 0 || n_probe > n_clusters {
                return bad(format!(
                    "ivf needs 1 <= n_probe <= n_clusters, got {n_probe}/{n_clusters}"
                ));
            }
        }
        self.encoder.validate()?;
        self.bm25.validate()
    }

    /// Momentum and lookahead weights with the strategy's unused strata
    /// switched off.
    pub fn effective_weights(&self) -> (f64, f64) {
        let a = if self.strategy.uses_momentum() {
            self.alpha
        } else {
            0.0
        };
        let b = if self.strategy.uses_lookahead() {
            self.beta
        } else {
            0.0
        };
        (a, b)
    }

    pub fn hash(&self) -> u64 {
        fnv1a(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn hash_hex(&self) -> String {
        hex64(self.hash())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&raw).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}
