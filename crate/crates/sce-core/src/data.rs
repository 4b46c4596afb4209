//! Interaction-log ingestion, p-core filtering, temporal splitting with
//! leave-one-out holdouts, and batch construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const PAD_ITEM: usize = 0;

/// One implicit-feedback record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

/// Raw (user, item, timestamp) triples in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.records.iter().map(|r| r.user).collect::<BTreeSet<_>>().len()
    }

    pub fn n_items(&self) -> usize {
        self.records.iter().map(|r| r.item).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Tsv,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: LogFormat,
    /// None: auto-detect by trying to parse the first row.
    pub has_header: Option<bool>,
    /// Column positions of (user, item, timestamp).
    pub columns: [usize; 3],
    /// Ingestion fails when more lines than this are malformed.
    pub max_malformed: usize,
    /// Drop exact duplicate (user, item, timestamp) rows, keeping the first.
    pub dedup: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            format: LogFormat::Csv,
            has_header: None,
            columns: [0, 1, 2],
            max_malformed: 0,
            dedup: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub log: InteractionLog,
    pub malformed_lines: usize,
    pub deduped_rows: usize,
}

/// Parse a CSV/TSV interaction log. Malformed lines are counted; exceeding
/// `max_malformed` fails the ingestion. An empty file is an empty log.
pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<LoadReport> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    parse_interactions(&raw, opts)
}

pub fn parse_interactions(raw: &str, opts: &LoadOptions) -> Result<LoadReport> {
    let delim = match opts.format {
        LogFormat::Csv => ',',
        LogFormat::Tsv => '\t',
    };
    let max_col = *opts.columns.iter().max().unwrap();
    let parse_line = |line: &str| -> Option<Interaction> {
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if fields.len() <= max_col {
            return None;
        }
        let user = fields[opts.columns[0]].parse::<u64>().ok()?;
        let item = fields[opts.columns[1]].parse::<u64>().ok()?;
        let timestamp = fields[opts.columns[2]].parse::<i64>().ok()?;
        if timestamp < 0 {
            return None;
        }
        Some(Interaction { user, item, timestamp })
    };

    let mut records = Vec::new();
    let mut malformed = 0usize;
    let mut seen = BTreeSet::new();
    let mut deduped = 0usize;
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Some(rec) => {
                if opts.dedup && !seen.insert((rec.user, rec.item, rec.timestamp)) {
                    deduped += 1;
                    continue;
                }
                records.push(rec);
            }
            None => {
                // A non-numeric first row is a header unless told otherwise.
                if lineno == 0 && opts.has_header.unwrap_or(true) {
                    continue;
                }
                malformed += 1;
            }
        }
    }
    if malformed > opts.max_malformed {
        return Err(Error::Ingest(format!(
            "{malformed} malformed lines exceed the allowed {}",
            opts.max_malformed
        )));
    }
    Ok(LoadReport {
        log: InteractionLog { records },
        malformed_lines: malformed,
        deduped_rows: deduped,
    })
}

/// Drop unpopular items (fewer than `min_item_interactions`) and then
/// light users (fewer than `min_user_interactions` remaining records).
/// Single pass each, items first; not iterated to a joint fixpoint.
pub fn p_core_filter(
    log: &InteractionLog,
    min_item_interactions: usize,
    min_user_interactions: usize,
) -> InteractionLog {
    let mut item_counts: HashMap<u64, usize> = HashMap::new();
    for r in &log.records {
        *item_counts.entry(r.item).or_default() += 1;
    }
    let after_items: Vec<Interaction> = log
        .records
        .iter()
        .filter(|r| item_counts[&r.item] >= min_item_interactions)
        .copied()
        .collect();

    let mut user_counts: HashMap<u64, usize> = HashMap::new();
    for r in &after_items {
        *user_counts.entry(r.user).or_default() += 1;
    }
    let records = after_items
        .into_iter()
        .filter(|r| user_counts[&r.user] >= min_user_interactions)
        .collect();
    InteractionLog { records }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "protocol")]
pub enum SplitProtocol {
    /// Global-timestamp split: users active at or after the quantile
    /// timestamp become test users and are removed from training.
    Temporal { quantile: f64 },
    /// Classic per-user leave-one-out; every eligible user trains on all
    /// but their last two interactions.
    LeaveOneOut,
}

/// One evaluation user: chronological history plus held-out targets
/// (second-to-last interaction for validation, last for test).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HoldoutUser {
    pub user: u64,
    pub history: Vec<usize>,
    pub val_target: usize,
    pub test_target: usize,
}

/// Sequences and holdouts after filtering, splitting, and remapping item
/// ids to dense indices 1..=C (0 is padding).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SequenceDataset {
    pub version: u32,
    pub protocol: SplitProtocol,
    pub catalog_size: usize,
    pub split_timestamp: Option<i64>,
    /// raw item id -> dense index, ascending raw order.
    pub remap: BTreeMap<u64, usize>,
    pub train_users: Vec<u64>,
    pub train: Vec<Vec<usize>>,
    pub holdout: Vec<HoldoutUser>,
    /// Average training-sequence length (the dataset's mean interactions
    /// per user as seen by the trainer).
    pub avg_train_len: f64,
    /// Evaluation users dropped for having fewer than 3 interactions.
    pub dropped_short_holdouts: usize,
}

pub const DATASET_VERSION: u32 = 1;

/// Group records per user, chronologically (stable on timestamp ties).
fn user_sequences(log: &InteractionLog) -> BTreeMap<u64, Vec<Interaction>> {
    let mut map: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
    for r in &log.records {
        map.entry(r.user).or_default().push(*r);
    }
    for seq in map.values_mut() {
        seq.sort_by_key(|r| r.timestamp);
    }
    map
}

/// Nearest-rank (ceiling) quantile of the timestamp multiset.
fn quantile_timestamp(log: &InteractionLog, q: f64) -> i64 {
    let mut ts: Vec<i64> = log.records.iter().map(|r| r.timestamp).collect();
    ts.sort_unstable();
    let n = ts.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    ts[rank - 1]
}

/// Split an interaction log into training sequences and holdout users.
pub fn temporal_split(log: &InteractionLog, protocol: SplitProtocol) -> Result<SequenceDataset> {
    if log.is_empty() {
        return Err(Error::Split("empty interaction log".into()));
    }
    let sequences = user_sequences(log);

    let (split_timestamp, test_user_set): (Option<i64>, BTreeSet<u64>) = match protocol {
        SplitProtocol::Temporal { quantile } => {
            if !(0.0 < quantile && quantile <= 1.0) {
                return Err(Error::Split(format!("quantile {quantile} outside (0, 1]")));
            }
            let t = quantile_timestamp(log, quantile);
            let test: BTreeSet<u64> = sequences
                .iter()
                .filter(|(_, seq)| seq.iter().any(|r| r.timestamp >= t))
                .map(|(&u, _)| u)
                .collect();
            (Some(t), test)
        }
        SplitProtocol::LeaveOneOut => (None, sequences.keys().copied().collect()),
    };

    let mut dropped_short = 0usize;
    let mut holdout_raw: Vec<(u64, Vec<Interaction>)> = Vec::new();
    let mut train_raw: Vec<(u64, Vec<Interaction>)> = Vec::new();
    for (user, seq) in &sequences {
        if test_user_set.contains(user) {
            if seq.len() >= 3 {
                holdout_raw.push((*user, seq.clone()));
                if matches!(protocol, SplitProtocol::LeaveOneOut) {
                    // Leave-one-out users also train on all but the last two.
                    train_raw.push((*user, seq[..seq.len() - 2].to_vec()));
                }
            } else {
                dropped_short += 1;
            }
        } else {
            train_raw.push((*user, seq.clone()));
        }
    }

    if holdout_raw.is_empty() {
        return Err(Error::Split(
            "no usable test users (need at least one user with 3+ interactions in the test \
             region); lower the quantile or provide more data"
                .into(),
        ));
    }
    if train_raw.is_empty() {
        return Err(Error::Split(
            "training set is empty after the split; every user fell into the test region \
             (all timestamps at or above the split point). Lower the quantile or check the \
             timestamp column"
                .into(),
        ));
    }

    // Dense item remap over retained interactions only, ascending raw id.
    let mut items: BTreeSet<u64> = BTreeSet::new();
    for (_, seq) in train_raw.iter().chain(holdout_raw.iter()) {
        for r in seq {
            items.insert(r.item);
        }
    }
    let remap: BTreeMap<u64, usize> =
        items.iter().enumerate().map(|(i, &raw)| (raw, i + 1)).collect();
    let catalog_size = remap.len();

    let train_users: Vec<u64> = train_raw.iter().map(|(u, _)| *u).collect();
    let train: Vec<Vec<usize>> = train_raw
        .iter()
        .map(|(_, seq)| seq.iter().map(|r| remap[&r.item]).collect())
        .collect();
    let holdout: Vec<HoldoutUser> = holdout_raw
        .iter()
        .map(|(user, seq)| {
            let dense: Vec<usize> = seq.iter().map(|r| remap[&r.item]).collect();
            let n = dense.len();
            HoldoutUser {
                user: *user,
                history: dense[..n - 2].to_vec(),
                val_target: dense[n - 2],
                test_target: dense[n - 1],
            }
        })
        .collect();

    let avg_train_len =
        train.iter().map(|s| s.len()).sum::<usize>() as f64 / train.len().max(1) as f64;

    Ok(SequenceDataset {
        version: DATASET_VERSION,
        protocol,
        catalog_size,
        split_timestamp,
        remap,
        train_users,
        train,
        holdout,
        avg_train_len,
        dropped_short_holdouts: dropped_short,
    })
}

impl SequenceDataset {
    /// Serialize to the sidecar cache format (versioned JSON).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let body = serde_json::to_string(self)?;
        f.write_all(body.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SequenceDataset> {
        let raw = std::fs::read_to_string(path)?;
        let ds: SequenceDataset = serde_json::from_str(&raw)?;
        if ds.version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "dataset cache version {} unsupported (expected {DATASET_VERSION})",
                ds.version
            )));
        }
        Ok(ds)
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let body = serde_json::to_string(self)?;
        let mut h = Sha256::new();
        h.update(body.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

/// A left-padded training batch: `targets[p]` is the successor of
/// `inputs[p]`, `mask[p]` marks real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: usize,
    pub l: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn positions(&self) -> usize {
        self.s * self.l
    }

    pub fn active_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Catalog-row targets (0-based into the C x d catalog), with padded
    /// positions marked `INACTIVE`.
    pub fn target_rows(&self) -> Vec<usize> {
        self.targets
            .iter()
            .zip(&self.mask)
            .map(|(&t, &m)| if m { t - 1 } else { crate::tape::INACTIVE })
            .collect()
    }

    /// Per-position averaging weights: 1/active at real positions.
    pub fn mean_weights(&self) -> Vec<f64> {
        let active = self.active_positions().max(1) as f64;
        self.mask.iter().map(|&m| if m { 1.0 / active } else { 0.0 }).collect()
    }
}

/// Build one row of a batch from a sequence: keep the most recent l+1
/// items, shift for next-item targets, left-pad to length l.
fn fill_row(
    seq: &[usize],
    l: usize,
    inputs: &mut [usize],
    targets: &mut [usize],
    mask: &mut [bool],
) {
    let window: &[usize] = if seq.len() > l + 1 { &seq[seq.len() - (l + 1)..] } else { seq };
    let pairs = window.len() - 1; // consecutive (input, target) pairs
    let pad = l - pairs;
    for p in 0..pairs {
        inputs[pad + p] = window[p];
        targets[pad + p] = window[p + 1];
        mask[pad + p] = true;
    }
}

/// One epoch of batches: users shuffled under `rng`, sequences shorter than
/// two items skipped (no next-item pair exists).
pub fn make_batches(train: &[Vec<usize>], s: usize, l: usize, rng: &mut RngState) -> Vec<Batch> {
    assert!(s >= 1 && l >= 1);
    let mut order: Vec<usize> = (0..train.len()).filter(|&i| train[i].len() >= 2).collect();
    rng.shuffle(&mut order);
    order
        .chunks(s)
        .map(|chunk| {
            let rows = chunk.len();
            let mut batch = Batch {
                s: rows,
                l,
                inputs: vec![PAD_ITEM; rows * l],
                targets: vec![PAD_ITEM; rows * l],
                mask: vec![false; rows * l],
            };
            for (row, &ui) in chunk.iter().enumerate() {
                let (i0, i1) = (row * l, (row + 1) * l);
                fill_row(
                    &train[ui],
                    l,
                    &mut batch.inputs[i0..i1],
                    &mut batch.targets[i0..i1],
                    &mut batch.mask[i0..i1],
                );
            }
            batch
        })
        .collect()
}

/// Inference-time batch: the last `l` items of each history, left-padded.
/// Targets stay empty; the caller reads the output at each row's final
/// position. Histories must be non-empty.
pub fn batch_for_inference(histories: &[&[usize]], l: usize) -> Batch {
    let rows = histories.len();
    let mut batch = Batch {
        s: rows,
        l,
        inputs: vec![PAD_ITEM; rows * l],
        targets: vec![PAD_ITEM; rows * l],
        mask: vec![false; rows * l],
    };
    for (row, hist) in histories.iter().enumerate() {
        let tail: &[usize] = if hist.len() > l { &hist[hist.len() - l..] } else { hist };
        let pad = l - tail.len();
        for (p, &it) in tail.iter().enumerate() {
            batch.inputs[row * l + pad + p] = it;
            batch.mask[row * l + pad + p] = true;
        }
    }
    batch
}
