//! Interaction logs: k-core filtering, leave-one-out split, padded batches
//! with sampled negatives.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub type ItemId = usize;

/// One user's chronologically ordered interactions. Item 0 is padding and
/// never appears here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: usize,
    pub items: Vec<ItemId>,
    pub timestamps: Option<Vec<i64>>,
}

impl InteractionSequence {
    pub fn new(user_id: usize, items: Vec<ItemId>) -> Self {
        Self {
            user_id,
            items,
            timestamps: None,
        }
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Validation(format!("user {} has no items", self.user_id)));
        }
        if let Some(&bad) = self.items.iter().find(|&&i| i == 0 || i > n_items) {
            return Err(Error::Validation(format!(
                "user {}: item {bad} outside [1, {n_items}]",
                self.user_id
            )));
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.items.len() || ts.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Validation(format!(
                    "user {}: timestamps misaligned or decreasing",
                    self.user_id
                )));
            }
        }
        Ok(())
    }
}

/// Bijection between raw IDs found in the input file and dense IDs `1..=n`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    to_dense: HashMap<u64, usize>,
    to_raw: Vec<u64>,
}

impl IdMap {
    fn from_sorted(raw: Vec<u64>) -> Self {
        let to_dense = raw.iter().enumerate().map(|(i, &r)| (r, i + 1)).collect();
        Self {
            to_dense,
            to_raw: raw,
        }
    }

    /// Raw ID `i` maps to dense ID `i` for `1..=n`.
    pub fn identity(n: usize) -> Self {
        Self::from_sorted((1..=n as u64).collect())
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<usize> {
        self.to_dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<u64> {
        dense.checked_sub(1).and_then(|i| self.to_raw.get(i)).copied()
    }

    /// Writes `raw_id<TAB>dense_id` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, raw) in self.to_raw.iter().enumerate() {
            out.push_str(&format!("{raw}\t{}\n", i + 1));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let parse = |s: Option<&str>| -> Result<u64> {
                s.and_then(|v| v.trim().parse().ok()).ok_or(Error::Parse {
                    line: n + 1,
                    message: format!("expected raw_id<TAB>dense_id, got {line:?}"),
                })
            };
            let raw = parse(parts.next())?;
            let dense = parse(parts.next())? as usize;
            pairs.push((dense, raw));
        }
        pairs.sort_unstable();
        if pairs.iter().enumerate().any(|(i, &(d, _))| d != i + 1) {
            return Err(Error::Validation("dense ids must be exactly 1..=n".into()));
        }
        Ok(Self::from_sorted(pairs.into_iter().map(|(_, r)| r).collect()))
    }
}

/// Loaded interactions with dense re-indexing.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub n_items: usize,
    pub item_ids: IdMap,
    pub user_ids: IdMap,
}

/// Raw parsed log: `(user, items)` in file order.
pub type RawLog = Vec<(u64, Vec<u64>)>;

pub fn parse_interactions(text: &str) -> Result<RawLog> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: std::result::Result<Vec<u64>, _> =
            line.split_whitespace().map(str::parse::<u64>).collect();
        let tokens = tokens.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let (&user, items) = tokens.split_first().expect("line is non-empty");
        if items.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("user {user} has no items"),
            });
        }
        out.push((user, items.to_vec()));
    }
    Ok(out)
}

/// Removes users and items with fewer than `min_core` interactions, repeating
/// until nothing changes.
pub fn k_core(mut log: RawLog, min_core: usize) -> RawLog {
    loop {
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for (_, items) in &log {
            for &i in items {
                *counts.entry(i).or_default() += 1;
            }
        }
        let before: usize = log.iter().map(|(_, s)| s.len()).sum();
        let users_before = log.len();
        for (_, items) in log.iter_mut() {
            items.retain(|i| counts[i] >= min_core);
        }
        log.retain(|(_, items)| items.len() >= min_core && !items.is_empty());
        let after: usize = log.iter().map(|(_, s)| s.len()).sum();
        if after == before && log.len() == users_before {
            return log;
        }
    }
}

/// Reads an interaction file, applies iterative `min_core` filtering and
/// re-indexes users and items densely from 1.
pub fn load_interactions(path: &Path, min_core: usize) -> Result<Dataset> {
    if min_core == 0 {
        return Err(Error::Config("min_core must be positive".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_log(parse_interactions(&text)?, min_core)
}

pub fn dataset_from_log(log: RawLog, min_core: usize) -> Result<Dataset> {
    let log = k_core(log, min_core);
    if log.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut raw_items: Vec<u64> = log
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    raw_items.sort_unstable();
    let mut raw_users: Vec<u64> = log.iter().map(|(u, _)| *u).collect();
    raw_users.sort_unstable();
    raw_users.dedup();
    let item_ids = IdMap::from_sorted(raw_items);
    let user_ids = IdMap::from_sorted(raw_users);
    let sequences = log
        .into_iter()
        .map(|(u, items)| {
            InteractionSequence::new(
                user_ids.dense(u).expect("user indexed"),
                items.iter().map(|i| item_ids.dense(*i).expect("item indexed")).collect(),
            )
        })
        .collect();
    Ok(Dataset {
        sequences,
        n_items: item_ids.len(),
        item_ids,
        user_ids,
    })
}

/// Writes sequences back in the interaction-file format (dense IDs).
pub fn save_interactions(path: &Path, sequences: &[InteractionSequence]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sequences {
        let items: Vec<String> = s.items.iter().map(|i| i.to_string()).collect();
        writeln!(file, "{} {}", s.user_id, items.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user_id: usize,
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<InteractionSequence>,
    pub eval: Vec<EvalCase>,
    /// Users excluded entirely because their sequence had fewer than 2 items.
    pub skipped: usize,
}

/// Minimum post-split training length.
pub const MIN_TRAIN_LEN: usize = 3;

/// Holds out each user's most recent item.
pub fn split_leave_one_out(data: &[InteractionSequence]) -> Split {
    let mut split = Split::default();
    for seq in data {
        if seq.items.len() < 2 {
            split.skipped += 1;
            continue;
        }
        let (&target, prefix) = seq.items.split_last().expect("len >= 2");
        split.eval.push(EvalCase {
            user_id: seq.user_id,
            prefix: prefix.to_vec(),
            target,
        });
        if prefix.len() >= MIN_TRAIN_LEN {
            split.train.push(InteractionSequence {
                user_id: seq.user_id,
                items: prefix.to_vec(),
                timestamps: seq.timestamps.as_ref().map(|t| t[..prefix.len()].to_vec()),
            });
        }
    }
    if split.skipped > 0 {
        warn!("{} sequences shorter than 2 excluded from the split", split.skipped);
    }
    split
}

/// Keeps the most recent `max_len` items.
pub fn truncate_recent(items: &[ItemId], max_len: usize) -> &[ItemId] {
    &items[items.len().saturating_sub(max_len)..]
}

/// Left-padded training batch. Row `b`, column `j` holds an input item whose
/// next-item positive is `positives[b][j]`; `targets[b]` is the last positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub max_len: usize,
    pub item_matrix: Vec<Vec<ItemId>>,
    pub valid_mask: Vec<Vec<bool>>,
    pub positives: Vec<Vec<ItemId>>,
    pub targets: Vec<ItemId>,
    pub negatives: Vec<Vec<ItemId>>,
    pub user_ids: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Unpadded view of row `b`: (inputs, positives, negatives).
    pub fn row(&self, b: usize) -> (&[ItemId], &[ItemId], &[ItemId]) {
        let start = self.valid_mask[b].iter().position(|&v| v).unwrap_or(self.max_len);
        (
            &self.item_matrix[b][start..],
            &self.positives[b][start..],
            &self.negatives[b][start..],
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub n_items: usize,
    /// Reject negatives that appear anywhere in the user's sequence.
    pub exclude_history: bool,
    pub shuffle: bool,
}

/// Draws a negative uniformly from `1..=n_items` excluding `positive` (and,
/// optionally, `history`).
pub fn sample_negative(
    rng: &mut impl rand::Rng,
    n_items: usize,
    positive: ItemId,
    history: Option<&HashSet<ItemId>>,
) -> ItemId {
    loop {
        let cand = rng.random_range(1..=n_items);
        if cand == positive {
            continue;
        }
        if let Some(h) = history {
            if h.contains(&cand) && h.len() < n_items {
                continue;
            }
        }
        return cand;
    }
}

/// Builds the batch stream for one pass over `train`. The order and the
/// negatives depend only on `opts.seed`.
pub fn batch_and_negatives(
    train: &[InteractionSequence],
    opts: BatchOptions,
) -> Result<impl Iterator<Item = SequenceBatch> + '_> {
    if opts.batch_size == 0 || opts.max_len == 0 {
        return Err(Error::Config("batch_size and max_len must be positive".into()));
    }
    if opts.n_items < 2 {
        return Err(Error::Config("negative sampling needs at least 2 items".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).filter(|&i| train[i].items.len() >= 2).collect();
    if opts.shuffle {
        order.shuffle(&mut rng::stream(opts.seed, &[tag::SHUFFLE]));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(opts.batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().enumerate().map(move |(bi, idx)| {
        let mut rng = rng::stream(opts.seed, &[tag::NEGATIVES, bi as u64]);
        let mut batch = SequenceBatch {
            max_len: opts.max_len,
            item_matrix: Vec::with_capacity(idx.len()),
            valid_mask: Vec::with_capacity(idx.len()),
            positives: Vec::with_capacity(idx.len()),
            targets: Vec::with_capacity(idx.len()),
            negatives: Vec::with_capacity(idx.len()),
            user_ids: Vec::with_capacity(idx.len()),
        };
        for i in idx {
            let seq = &train[i];
            let window = truncate_recent(&seq.items, opts.max_len + 1);
            let inputs = &window[..window.len() - 1];
            let pos = &window[1..];
            let pad = opts.max_len - inputs.len();
            let history: Option<HashSet<ItemId>> =
                opts.exclude_history.then(|| seq.items.iter().copied().collect());
            let mut row = vec![0; opts.max_len];
            let mut prow = vec![0; opts.max_len];
            let mut nrow = vec![0; opts.max_len];
            for j in 0..inputs.len() {
                row[pad + j] = inputs[j];
                prow[pad + j] = pos[j];
                nrow[pad + j] = sample_negative(&mut rng, opts.n_items, pos[j], history.as_ref());
            }
            batch.valid_mask.push(row.iter().map(|&v| v != 0).collect());
            batch.item_matrix.push(row);
            batch.positives.push(prow);
            batch.negatives.push(nrow);
            batch.targets.push(*pos.last().expect("window has >= 2 items"));
            batch.user_ids.push(seq.user_id);
        }
        batch
    }))
}
