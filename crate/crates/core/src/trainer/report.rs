//! `report.json` and the analysis derived from it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::diagnostics::{
    composition, episode_label, forgetting, swing, write_composition_csv, write_forgetting_csv,
    write_group_presence_csv, write_metrics_csv, write_per_query_csv, write_swing_csv,
    CompositionReport, EvalSnapshot, ForgettingReport, HistoryEntry, Rankings, SwingReport,
};
use crate::error::{Error, Result};

const REPORT_FORMAT: &str = "drlab-run-report";
const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u32,
    /// Artifact paths, relative to the run directory.
    pub checkpoint: String,
    pub refresh_checkpoint: String,
    pub pool: String,
    pub loss_csv: String,
    pub steps: usize,
    pub refresh_step: usize,
    /// `(step, loss)`, steps 1-based within the episode.
    pub loss_curve: Vec<(usize, f64)>,
    /// Fingerprint of the model the pool was mined with.
    pub mining_model: String,
    pub pool_counts: BTreeMap<String, usize>,
    pub snapshot: EvalSnapshot,
    /// The query-side mined list: BM25 hits in a warm-up episode, the
    /// query's dense neighbors otherwise.
    pub hard_negatives: Rankings,
    /// Dense neighbors of each query's positives under the mining model.
    pub lookahead: Rankings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    /// Evaluation of the initial model, as episode 0.
    pub initial_snapshot: EvalSnapshot,
    /// BM25 lists, present when the strategy used them.
    pub bm25: Option<Rankings>,
    pub group_tags: BTreeMap<String, String>,
    pub episodes: Vec<EpisodeRecord>,
}

impl RunReport {
    pub fn new(
        config: RunConfig,
        initial_snapshot: EvalSnapshot,
        bm25: Option<Rankings>,
        group_tags: BTreeMap<String, String>,
        episodes: Vec<EpisodeRecord>,
    ) -> Self {
        Self {
            format: REPORT_FORMAT.to_string(),
            version: REPORT_VERSION,
            config_hash: config.hash_hex(),
            config,
            initial_snapshot,
            bm25,
            group_tags,
            episodes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("report serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: RunReport = serde_json::from_str(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
        return Err(Error::Format(format!(
            "{}: expected {REPORT_FORMAT} v{REPORT_VERSION}",
            path.display()
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub config_hash: String,
    /// Episode 0 (initial model) first.
    pub snapshots: Vec<EvalSnapshot>,
    /// One report per episode, each against the snapshot before it.
    pub forgetting: Vec<ForgettingReport>,
    pub composition: Vec<CompositionReport>,
    /// Present with at least three episodes.
    pub swing: Option<SwingReport>,
    pub group_tags: BTreeMap<String, String>,
}

impl Analysis {
    /// Mean forgetting rate over episodes 2 and later, where both models
    /// involved were trained. Zero for single-episode runs.
    pub fn mean_forgetting(&self) -> f64 {
        let rates: Vec<f64> = self
            .forgetting
            .iter()
            .filter(|f| f.episode >= 2)
            .map(|f| f.rate)
            .collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }

    pub fn swing_rate(&self) -> f64 {
        self.swing.as_ref().map_or(0.0, |s| s.swing_rate)
    }
}

/// Pure function of the report.
pub fn analyze(report: &RunReport) -> Result<Analysis> {
    let mut snapshots = vec![report.initial_snapshot.clone()];
    snapshots.extend(report.episodes.iter().map(|e| e.snapshot.clone()));
    let k_learn = report.config.k_learn;
    let forgetting_reports = snapshots
        .windows(2)
        .map(|w| forgetting(&w[0], &w[1], k_learn))
        .collect::<Result<Vec<_>>>()?;

    let labels: Vec<String> = report
        .episodes
        .iter()
        .map(|e| episode_label(e.episode))
        .collect();
    let mut composition_reports = Vec::with_capacity(report.episodes.len());
    for (n, ep) in report.episodes.iter().enumerate() {
        let mut history = Vec::new();
        if let Some(b) = &report.bm25 {
            history.push(HistoryEntry {
                label: "bm25",
                lists: b,
            });
        }
        for (prev, label) in report.episodes[..n].iter().zip(&labels) {
            history.push(HistoryEntry {
                label,
                lists: &prev.hard_negatives,
            });
        }
        let prev_lookahead = n.checked_sub(1).map(|p| &report.episodes[p].lookahead);
        composition_reports.push(composition(
            ep.episode,
            &ep.hard_negatives,
            &history,
            prev_lookahead,
        ));
    }

    let swing_report = if report.episodes.len() >= 3 {
        let history: Vec<Rankings> = report
            .episodes
            .iter()
            .map(|e| e.hard_negatives.clone())
            .collect();
        let tags = (!report.group_tags.is_empty()).then_some(&report.group_tags);
        Some(swing(&history, tags)?)
    } else {
        None
    };

    Ok(Analysis {
        config_hash: report.config_hash.clone(),
        snapshots,
        forgetting: forgetting_reports,
        composition: composition_reports,
        swing: swing_report,
        group_tags: report.group_tags.clone(),
    })
}

/// Write the CSV suite into `dir` and return the written paths.
pub fn write_analysis(analysis: &Analysis, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let h = &analysis.config_hash;
    let p = |name: &str| dir.join(name);
    let mut written = vec![
        p("metrics.csv"),
        p("per_query_mrr.csv"),
        p("forgetting.csv"),
        p("composition.csv"),
        p("composition_summary.csv"),
    ];
    write_metrics_csv(&written[0], h, &analysis.snapshots)?;
    write_per_query_csv(&written[1], h, &analysis.snapshots)?;
    write_forgetting_csv(&written[2], h, &analysis.forgetting)?;
    write_composition_csv(&written[3], &written[4], h, &analysis.composition)?;
    let tags = (!analysis.group_tags.is_empty()).then_some(&analysis.group_tags);
    match &analysis.swing {
        Some(s) => {
            write_swing_csv(&p("swing.csv"), h, s, tags)?;
            write_group_presence_csv(&p("group_presence.csv"), h, s)?;
            written.push(p("swing.csv"));
            written.push(p("group_presence.csv"));
        }
        None => {
            // Too few episodes for the pattern; keep the file with its header.
            fs::write(
                p("swing.csv"),
                format!("# config_hash={h}\nquery_id,doc_id,group_tag,membership,events\n"),
            )
            .map_err(|e| Error::io(p("swing.csv"), e))?;
            written.push(p("swing.csv"));
        }
    }
    Ok(written)
}
