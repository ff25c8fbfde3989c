//! Interaction ingestion, per-user chronological sequences, leave-one-out
//! splits, training batches and evaluation candidate sets.
//!
//! Items carry a dense index in `[0, n_items)`. Padded model inputs use
//! *tokens*: token `0` is padding and item `i` is token `i + 1`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::mix;

pub const PADDING: usize = 0;
pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_MIN_SEQ_LEN: usize = 3;
/// Fraction of malformed rows above which ingestion fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[inline]
pub fn token(item: usize) -> usize {
    item + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub rating: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// `user::item::rating::timestamp`
    Ml1m,
    /// `user<TAB>item<TAB>timestamp[<TAB>rating]`
    Tsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml1m" | "ml-1m" => Ok(Format::Ml1m),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Ml1m => "ml1m",
            Format::Tsv => "tsv",
        })
    }
}

fn parse_line(line: &str, format: Format) -> Option<Interaction> {
    let fields: Vec<&str> = match format {
        Format::Ml1m => line.split("::").collect(),
        Format::Tsv => line.split('\t').collect(),
    };
    let (user, item, ts, rating) = match (format, fields.as_slice()) {
        (Format::Ml1m, [u, i, r, t]) => (*u, *i, *t, Some(*r)),
        (Format::Tsv, [u, i, t]) => (*u, *i, *t, None),
        (Format::Tsv, [u, i, t, r]) => (*u, *i, *t, Some(*r)),
        _ => return None,
    };
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let timestamp = ts.trim().parse::<u64>().ok()?;
    let rating = match rating {
        Some(r) => Some(r.trim().parse::<f64>().ok()?),
        None => None,
    };
    Some(Interaction {
        user_id: user.to_string(),
        item_id: item.to_string(),
        timestamp,
        rating,
    })
}

/// Parses newline-delimited records; returns the interactions and the
/// 1-based line numbers of malformed rows. Blank lines are ignored.
pub fn parse_interactions(text: &str, format: Format) -> (Vec<Interaction>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, format) {
            Some(i) => rows.push(i),
            None => bad.push(n + 1),
        }
    }
    (rows, bad)
}

pub fn load_interactions(path: &Path, format: Format) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (rows, bad) = parse_interactions(&text, format);
    let total = rows.len() + bad.len();
    if total == 0 {
        log::warn!("{} contains no interactions", path.display());
        return Ok(rows);
    }
    if bad.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            bad: bad.len(),
            total,
            lines: bad,
        });
    }
    if !bad.is_empty() {
        log::warn!(
            "skipped {} malformed rows in {} (lines {:?})",
            bad.len(),
            path.display(),
            bad
        );
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetOptions {
    pub min_seq_len: usize,
    pub max_len: usize,
    /// Items with fewer interactions are dropped before the user filter;
    /// the two filters are repeated until both hold (k-core style).
    pub min_item_interactions: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            min_seq_len: DEFAULT_MIN_SEQ_LEN,
            max_len: DEFAULT_MAX_LEN,
            min_item_interactions: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceDataset {
    item_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    user_ids: Vec<String>,
    sequences: Vec<Vec<usize>>,
    max_len: usize,
}

impl SequenceDataset {
    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    /// The user's chronological item ids, recovered through the vocabulary.
    pub fn user_item_ids(&self, user: usize) -> Vec<&str> {
        self.sequences[user]
            .iter()
            .map(|&i| self.item_ids[i].as_str())
            .collect()
    }

    /// Stable hash of the vocabulary in index order.
    pub fn vocab_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.item_ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

pub fn build_dataset(
    interactions: &[Interaction],
    min_seq_len: usize,
    max_len: usize,
) -> Result<SequenceDataset> {
    build_dataset_with(
        interactions,
        &DatasetOptions {
            min_seq_len,
            max_len,
            ..DatasetOptions::default()
        },
    )
}

pub fn build_dataset_with(
    interactions: &[Interaction],
    opts: &DatasetOptions,
) -> Result<SequenceDataset> {
    if opts.min_seq_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "min_seq_len must be at least 3, got {}",
            opts.min_seq_len
        )));
    }
    if opts.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }

    // Group by user in first-appearance order, keeping input positions for
    // the stable timestamp tie-break.
    let mut user_slot: HashMap<&str, usize> = HashMap::new();
    let mut users: Vec<(&str, Vec<usize>)> = Vec::new();
    for (pos, it) in interactions.iter().enumerate() {
        let slot = *user_slot.entry(it.user_id.as_str()).or_insert_with(|| {
            users.push((it.user_id.as_str(), Vec::new()));
            users.len() - 1
        });
        users[slot].1.push(pos);
    }
    for (_, rows) in &mut users {
        rows.sort_by_key(|&p| (interactions[p].timestamp, p));
    }

    let mut alive_user = vec![true; users.len()];
    let mut alive_item: HashMap<&str, bool> = HashMap::new();
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (u, (_, rows)) in users.iter().enumerate() {
            if !alive_user[u] {
                continue;
            }
            for &p in rows {
                let id = interactions[p].item_id.as_str();
                if *alive_item.get(id).unwrap_or(&true) {
                    *counts.entry(id).or_default() += 1;
                }
            }
        }
        let mut changed = false;
        for (id, c) in &counts {
            if *c < opts.min_item_interactions {
                alive_item.insert(id, false);
                changed = true;
            }
        }
        for (u, (_, rows)) in users.iter().enumerate() {
            if !alive_user[u] {
                continue;
            }
            let len = rows
                .iter()
                .filter(|&&p| *alive_item.get(interactions[p].item_id.as_str()).unwrap_or(&true))
                .count();
            if len < opts.min_seq_len {
                alive_user[u] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut item_ids = Vec::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut sequences = Vec::new();
    for (u, (uid, rows)) in users.iter().enumerate() {
        if !alive_user[u] {
            continue;
        }
        let mut seq = Vec::with_capacity(rows.len());
        for &p in rows {
            let id = interactions[p].item_id.as_str();
            if !*alive_item.get(id).unwrap_or(&true) {
                continue;
            }
            let idx = match item_index.get(id) {
                Some(&i) => i,
                None => {
                    item_ids.push(id.to_string());
                    item_index.insert(id.to_string(), item_ids.len() - 1);
                    item_ids.len() - 1
                }
            };
            seq.push(idx);
        }
        user_ids.push(uid.to_string());
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(opts.min_seq_len));
    }
    Ok(SequenceDataset {
        item_ids,
        item_index,
        user_ids,
        sequences,
        max_len: opts.max_len,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub train_prefix: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

impl UserSplit {
    /// Model input and target for validation or test scoring.
    pub fn eval_case(&self, target: EvalTarget) -> (Vec<usize>, usize) {
        match target {
            EvalTarget::Valid => (self.train_prefix.clone(), self.valid_target),
            EvalTarget::Test => {
                let mut input = self.train_prefix.clone();
                input.push(self.valid_target);
                (input, self.test_target)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Valid,
    Test,
}

#[derive(Clone, Debug)]
pub struct SplitView {
    pub users: Vec<UserSplit>,
    pub num_items: usize,
    pub max_len: usize,
}

pub fn split(dataset: &SequenceDataset) -> SplitView {
    let users = dataset
        .sequences
        .iter()
        .map(|s| {
            debug_assert!(s.len() >= 3);
            let n = s.len();
            UserSplit {
                train_prefix: s[..n - 2].to_vec(),
                valid_target: s[n - 2],
                test_target: s[n - 1],
            }
        })
        .collect();
    SplitView {
        users,
        num_items: dataset.num_items(),
        max_len: dataset.max_len,
    }
}

impl SplitView {
    /// Users whose training prefix holds at least one (input, target) pair.
    pub fn training_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.train_prefix.len() >= 2)
            .map(|(i, _)| i)
    }

    /// Interaction counts per item over all training prefixes.
    pub fn popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for u in &self.users {
            for &i in &u.train_prefix {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Right-aligns item tokens into a row of `max_len`, keeping the most recent
/// entries and left-padding with [`PADDING`].
pub fn pad_row(tokens: &[usize], max_len: usize) -> Vec<usize> {
    let keep = &tokens[tokens.len().saturating_sub(max_len)..];
    let mut row = vec![PADDING; max_len - keep.len()];
    row.extend_from_slice(keep);
    row
}

/// Padded token row for a sequence of dense item indices.
pub fn input_row(items: &[usize], max_len: usize) -> Vec<usize> {
    let tokens: Vec<usize> = items.iter().map(|&i| token(i)).collect();
    pad_row(&tokens, max_len)
}

/// One training example: the items before a cut point of a user's training
/// prefix and the item at the cut.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `B × max_len` token rows.
    pub items: Vec<Vec<usize>>,
    /// Non-padding length of every row.
    pub lengths: Vec<usize>,
    /// Dense index of every row's target item.
    pub targets: Vec<usize>,
    pub users: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn from_samples(samples: &[TrainSample], max_len: usize) -> Self {
        let mut batch = Batch {
            items: Vec::with_capacity(samples.len()),
            lengths: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
            users: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            batch.items.push(input_row(&s.input, max_len));
            batch.lengths.push(s.input.len().min(max_len));
            batch.targets.push(s.target);
            batch.users.push(s.user);
        }
        batch
    }
}

/// One example per training user: a cut point drawn uniformly from the
/// user's training prefix, seeded by `seed`.
pub fn epoch_samples(split: &SplitView, seed: u64) -> Vec<TrainSample> {
    split
        .training_users()
        .map(|u| {
            let prefix = &split.users[u].train_prefix;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u as u64));
            let cut = rng.gen_range(1..prefix.len());
            TrainSample {
                user: u,
                input: prefix[..cut].to_vec(),
                target: prefix[cut],
            }
        })
        .collect()
}

/// Shuffles the epoch's samples and chunks them into batches. A trailing
/// batch of one row is merged into its predecessor so every batch can form
/// contrastive pairs and no row is dropped.
pub fn make_batches(split: &SplitView, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    Ok(batch_samples(split, batch_size, shuffle_seed)?
        .iter()
        .map(|chunk| Batch::from_samples(chunk, split.max_len))
        .collect())
}

/// Same grouping as [`make_batches`] but returning the raw samples.
pub fn batch_samples(
    split: &SplitView,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Vec<TrainSample>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let mut samples = epoch_samples(split, shuffle_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(shuffle_seed, 0x5348_5546));
    samples.shuffle(&mut rng);
    let mut chunks: Vec<Vec<TrainSample>> = samples.chunks(batch_size).map(<[_]>::to_vec).collect();
    if chunks.len() >= 2 && chunks.last().is_some_and(|c| c.len() == 1) {
        let last = chunks.pop().expect("checked non-empty");
        chunks.last_mut().expect("checked len >= 2").extend(last);
    }
    Ok(chunks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSetting {
    Whole,
    Popular,
    Random,
}

impl CandidateSetting {
    pub const ALL: [CandidateSetting; 3] = [
        CandidateSetting::Whole,
        CandidateSetting::Popular,
        CandidateSetting::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CandidateSetting::Whole => "whole",
            CandidateSetting::Popular => "popular",
            CandidateSetting::Random => "random",
        }
    }
}

impl fmt::Display for CandidateSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CandidateSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "whole" => Ok(CandidateSetting::Whole),
            "popular" => Ok(CandidateSetting::Popular),
            "random" => Ok(CandidateSetting::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown candidate setting `{other}`"
            ))),
        }
    }
}

pub const DEFAULT_CANDIDATES: usize = 100;

/// Everything needed to draw candidate lists for a split.
#[derive(Clone, Debug)]
pub struct CandidatePool {
    num_items: usize,
    /// Items by descending training frequency, ties by ascending index.
    by_popularity: Vec<usize>,
    pub exclude_seen: bool,
}

impl CandidatePool {
    pub fn new(num_items: usize, popularity: &[usize], exclude_seen: bool) -> Self {
        let mut by_popularity: Vec<usize> = (0..num_items).collect();
        by_popularity.sort_by_key(|&i| (std::cmp::Reverse(popularity[i]), i));
        Self {
            num_items,
            by_popularity,
            exclude_seen,
        }
    }

    pub fn for_split(split: &SplitView, exclude_seen: bool) -> Self {
        Self::new(split.num_items, &split.popularity(), exclude_seen)
    }

    /// Candidate item indices for one user. The target appears exactly once;
    /// `history` items are excluded from the other slots.
    pub fn candidates(
        &self,
        user: usize,
        history: &[usize],
        target: usize,
        setting: CandidateSetting,
        size: usize,
        rng_seed: u64,
    ) -> Result<Vec<usize>> {
        if setting != CandidateSetting::Whole && size > self.num_items {
            return Err(Error::InvalidArgument(format!(
                "candidate size {size} exceeds the {} items",
                self.num_items
            )));
        }
        if size == 0 && setting != CandidateSetting::Whole {
            return Err(Error::InvalidArgument("candidate size must be positive".into()));
        }
        let seen: BTreeSet<usize> = history.iter().copied().collect();
        let eligible = |i: usize| i != target && !(self.exclude_seen && seen.contains(&i));
        let out = match setting {
            CandidateSetting::Whole => {
                let mut out: Vec<usize> = (0..self.num_items).filter(|&i| eligible(i)).collect();
                let pos = out.partition_point(|&i| i < target);
                out.insert(pos, target);
                out
            }
            CandidateSetting::Random => {
                let pool: Vec<usize> = (0..self.num_items)
                    .filter(|&i| i != target && !seen.contains(&i))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix(rng_seed, user as u64));
                let take = (size - 1).min(pool.len());
                let mut out = vec![target];
                out.extend(pool.choose_multiple(&mut rng, take).copied());
                out
            }
            CandidateSetting::Popular => {
                let mut out = vec![target];
                out.extend(
                    self.by_popularity
                        .iter()
                        .copied()
                        .filter(|&i| i != target && !seen.contains(&i))
                        .take(size - 1),
                );
                out
            }
        };
        Ok(out)
    }
}

/// Free-function form over a split for a single user.
pub fn candidate_set(
    split: &SplitView,
    user: usize,
    eval: EvalTarget,
    setting: CandidateSetting,
    size: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    let pool = CandidatePool::for_split(split, true);
    let (history, target) = split.users[user].eval_case(eval);
    pool.candidates(user, &history, target, setting, size, rng_seed)
}

/// Synthetic interaction logs with planted item clusters.
pub mod synthetic {
    use super::*;

    #[derive(Clone, Debug, Serialize, Deserialize)]
    pub struct ClusteredSpec {
        pub users: usize,
        pub items: usize,
        pub clusters: usize,
        pub min_len: usize,
        pub max_len: usize,
        /// Probability of stepping to the planted successor within the cluster.
        pub p_successor: f64,
        /// Probability of jumping to a uniformly random item of any cluster.
        pub p_noise: f64,
        pub seed: u64,
    }

    impl Default for ClusteredSpec {
        fn default() -> Self {
            Self {
                users: 500,
                items: 200,
                clusters: 8,
                min_len: 10,
                max_len: 30,
                p_successor: 0.7,
                p_noise: 0.1,
                seed: 7,
            }
        }
    }

    /// Every user belongs to one cluster and walks its items: mostly to the
    /// next item of the cluster's cyclic order, otherwise to a random cluster
    /// member, occasionally to any item.
    pub fn clustered(spec: &ClusteredSpec) -> Vec<Interaction> {
        assert!(spec.clusters >= 1 && spec.items >= spec.clusters);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let per = spec.items / spec.clusters;
        let members = |c: usize| -> Vec<usize> {
            let end = if c + 1 == spec.clusters { spec.items } else { (c + 1) * per };
            (c * per..end).collect()
        };
        let mut out = Vec::new();
        for u in 0..spec.users {
            let cluster = u % spec.clusters;
            let items = members(cluster);
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut pos = rng.gen_range(0..items.len());
            let mut current = items[pos];
            for t in 0..len {
                out.push(Interaction {
                    user_id: format!("u{u}"),
                    item_id: format!("i{current}"),
                    timestamp: 1_000 + t as u64,
                    rating: None,
                });
                let r: f64 = rng.gen();
                if r < spec.p_successor {
                    pos = (pos + 1) % items.len();
                    current = items[pos];
                } else if r < spec.p_successor + spec.p_noise {
                    current = rng.gen_range(0..spec.items);
                } else {
                    pos = rng.gen_range(0..items.len());
                    current = items[pos];
                }
                if let Some(p) = items.iter().position(|&i| i == current) {
                    pos = p;
                }
            }
        }
        out
    }

    pub fn to_tsv(interactions: &[Interaction]) -> String {
        let mut s = String::new();
        for it in interactions {
            s.push_str(&format!("{}\t{}\t{}\n", it.user_id, it.item_id, it.timestamp));
        }
        s
    }
}
