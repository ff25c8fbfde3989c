//! Leave-one-out ranking metrics.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{input_row, CandidatePool, CandidateSetting, EvalTarget, SplitView};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::seed::mix;

pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub rank: usize,
    pub num_candidates: usize,
}

/// 1-based rank of `scores[target]` in descending order. Every other
/// candidate scoring at least as high as the target is ranked above it.
pub fn rank_of_target(scores: &[f64], target: usize) -> RankResult {
    assert!(!scores.is_empty() && target < scores.len());
    let t = scores[target];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && (s >= t || t.is_nan()))
        .count();
    RankResult {
        rank: above + 1,
        num_candidates: scores.len(),
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ndcg,
    Mrr,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Self::Ndcg, Self::Mrr, Self::Recall];

    pub fn at(self, rank: usize, k: usize) -> f64 {
        match self {
            Self::Ndcg => ndcg_at_k(rank, k),
            Self::Mrr => mrr_at_k(rank, k),
            Self::Recall => recall_at_k(rank, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ndcg => "ndcg",
            Self::Mrr => "mrr",
            Self::Recall => "recall",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub cutoff: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub setting: CandidateSetting,
    pub users: usize,
    pub values: Vec<MetricValue>,
}

impl MetricReport {
    /// Means over `ranks` for every metric and cutoff.
    pub fn from_ranks(setting: CandidateSetting, ranks: &[usize], cutoffs: &[usize]) -> Self {
        let n = ranks.len() as f64;
        let values = Metric::ALL
            .iter()
            .flat_map(|&metric| {
                cutoffs.iter().map(move |&cutoff| MetricValue {
                    metric,
                    cutoff,
                    value: ranks.iter().map(|&r| metric.at(r, cutoff)).sum::<f64>() / n,
                })
            })
            .collect();
        Self {
            setting,
            users: ranks.len(),
            values,
        }
    }

    pub fn get(&self, metric: Metric, cutoff: usize) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.metric == metric && v.cutoff == cutoff)
            .map(|v| v.value)
    }
}

pub const CSV_HEADER: &str = "setting,metric,cutoff,value";

/// One CSV line per (setting, metric, cutoff), header first.
pub fn write_csv<W: Write>(out: &mut W, reports: &[MetricReport]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        for v in &r.values {
            writeln!(out, "{},{},{},{}", r.setting, v.metric, v.cutoff, v.value)?;
        }
    }
    Ok(())
}

/// Anything that can score candidate items for padded input rows.
pub trait Scorer {
    fn score(&self, rows: &[Vec<usize>], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

impl Scorer for Encoder {
    fn score(&self, rows: &[Vec<usize>], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let reprs = self.encode_matrix(rows, 256)?;
        Ok(candidates
            .iter()
            .enumerate()
            .map(|(r, c)| self.score_items(reprs.row(r), c))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub target: EvalTarget,
    pub cutoffs: Vec<usize>,
    pub num_candidates: usize,
    pub exclude_seen: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            target: EvalTarget::Valid,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            num_candidates: crate::dataset::DEFAULT_CANDIDATES,
            exclude_seen: true,
            seed: 0,
        }
    }
}

/// Per-user ranks of the held-out item.
pub fn user_ranks<S: Scorer + ?Sized>(
    scorer: &S,
    split: &SplitView,
    setting: CandidateSetting,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    if split.users.is_empty() {
        return Err(Error::EmptyDataset(0));
    }
    if opts.cutoffs.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("cutoffs must be at least 1".into()));
    }
    let pool = CandidatePool::for_split(split, opts.exclude_seen);
    let seed = mix(opts.seed, setting as u64);
    let mut ranks = Vec::with_capacity(split.users.len());
    let users: Vec<usize> = (0..split.users.len()).collect();
    for chunk in users.chunks(256) {
        let mut rows = Vec::with_capacity(chunk.len());
        let mut cands = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &u in chunk {
            let (history, target) = split.users[u].eval_case(opts.target);
            let c = pool.candidates(u, &history, target, setting, opts.num_candidates, seed)?;
            targets.push(c.iter().position(|&i| i == target).expect("target among candidates"));
            rows.push(input_row(&history, split.max_len));
            cands.push(c);
        }
        let scores = scorer.score(&rows, &cands)?;
        ranks.extend(
            scores
                .iter()
                .zip(&targets)
                .map(|(s, &t)| rank_of_target(s, t).rank),
        );
    }
    Ok(ranks)
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    split: &SplitView,
    setting: CandidateSetting,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let ranks = user_ranks(scorer, split, setting, opts)?;
    Ok(MetricReport::from_ranks(setting, &ranks, &opts.cutoffs))
}
