//! Interaction-log ingestion, filtering, per-user sequences, leave-one-out
//! splits and sliding-window samples.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pmsa::{self, PmsaError, ShiftBucketizer};

/// Item index reserved for left padding; never scored.
pub const PAD: usize = 0;

/// Category assigned to items whose raw category set is empty.
pub const EMPTY_CATEGORY: &str = "⊥";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty input")]
    EmptyInput,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("filtering emptied dataset")]
    FilteredEmpty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Pmsa(#[from] PmsaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Tsv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(CorpusError::InvalidArgument(format!("unknown format {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
    pub categories: Vec<String>,
}

/// Item vocabulary (index 0 is padding), category vocabulary, and each item's
/// sorted category ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    item_names: Vec<String>,
    category_names: Vec<String>,
    item_categories: Vec<Vec<u32>>,
}

impl Catalog {
    /// Builds a catalog from per-item category names. Items are numbered
    /// `1..=n` in the given order; empty sets receive [`EMPTY_CATEGORY`].
    pub fn from_items<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = (String, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut cat_index: HashMap<String, u32> = HashMap::new();
        let mut category_names = Vec::new();
        let mut item_names = vec!["<pad>".to_string()];
        let mut item_categories = vec![Vec::new()];
        for (name, cats) in items {
            let mut ids: Vec<u32> = cats
                .iter()
                .map(|c| c.as_ref())
                .chain(cats.is_empty().then_some(EMPTY_CATEGORY))
                .map(|c| {
                    *cat_index.entry(c.to_string()).or_insert_with(|| {
                        category_names.push(c.to_string());
                        (category_names.len() - 1) as u32
                    })
                })
                .collect();
            ids.sort_unstable();
            ids.dedup();
            item_names.push(name);
            item_categories.push(ids);
        }
        Self {
            item_names,
            category_names,
            item_categories,
        }
    }

    /// Number of real items (padding excluded).
    pub fn num_items(&self) -> usize {
        self.item_names.len() - 1
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn categories(&self, item: usize) -> &[u32] {
        &self.item_categories[item]
    }

    pub fn item_name(&self, item: usize) -> &str {
        &self.item_names[item]
    }

    pub fn category_name(&self, id: u32) -> &str {
        &self.category_names[id as usize]
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.item_names.iter().skip(1).position(|n| n == name).map(|i| i + 1)
    }

    pub fn total_labels(&self) -> usize {
        self.item_categories.iter().map(Vec::len).sum()
    }
}

/// One training or evaluation unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user: usize,
    /// Real history items, most recent last, at most `o` long (unpadded).
    pub history: Vec<usize>,
    pub target: usize,
    /// Shift level in `1..=V`.
    pub level: usize,
}

impl Sample {
    /// History left-padded with [`PAD`] to exactly `len` positions.
    pub fn padded(&self, len: usize) -> Vec<usize> {
        let keep = self.history.len().min(len);
        let mut out = vec![PAD; len - keep];
        out.extend_from_slice(&self.history[self.history.len() - keep..]);
        out
    }
}

fn parse_tsv_line(line: &str, lineno: usize) -> Result<Interaction, CorpusError> {
    let bad = |msg: &str| CorpusError::Malformed {
        line: lineno,
        msg: msg.to_string(),
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(bad("expected user, item, timestamp and categories"));
    }
    let (user, item) = (fields[0].trim(), fields[1].trim());
    if user.is_empty() || item.is_empty() {
        return Err(bad("empty user or item"));
    }
    let timestamp = fields[2]
        .trim()
        .parse::<u64>()
        .map_err(|_| bad("timestamp must be a non-negative integer"))?;
    let categories = fields
        .get(3)
        .map(|c| {
            c.split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();
    Ok(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        timestamp,
        categories,
    })
}

fn json_id(v: Option<&serde_json::Value>, key: &str, lineno: usize) -> Result<String, CorpusError> {
    match v {
        Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
        _ => Err(CorpusError::Malformed {
            line: lineno,
            msg: format!("missing or invalid \"{key}\""),
        }),
    }
}

fn parse_json_line(line: &str, lineno: usize) -> Result<Interaction, CorpusError> {
    let bad = |msg: String| CorpusError::Malformed { line: lineno, msg };
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("expected a JSON object".into()))?;
    let user = json_id(obj.get("user"), "user", lineno)?;
    let item = json_id(obj.get("item"), "item", lineno)?;
    let timestamp = obj
        .get("ts")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| bad("missing or invalid \"ts\"".into()))?;
    let categories = match obj.get("categories") {
        None | Some(serde_json::Value::Null) => Vec::new(),
        Some(serde_json::Value::Array(a)) => a
            .iter()
            .map(|c| match c {
                serde_json::Value::String(s) => Ok(s.clone()),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                _ => Err(bad("category must be a string".into())),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(bad("\"categories\" must be an array".into())),
    };
    Ok(Interaction {
        user,
        item,
        timestamp,
        categories,
    })
}

/// Parses one record per line. Blank lines and lines starting with `#` are skipped.
pub fn read_interactions<R: BufRead>(reader: R, format: Format) -> Result<Vec<Interaction>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = match format {
            Format::Tsv => parse_tsv_line(&line, i + 1)?,
            Format::Jsonl => parse_json_line(&line, i + 1)?,
        };
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, format: Format) -> Result<Vec<Interaction>, CorpusError> {
    read_interactions(BufReader::new(File::open(path)?), format)
}

/// Drops users and items with fewer than `k` interactions, repeating until
/// no more records are removed.
pub fn filter_min_count(interactions: Vec<Interaction>, k: usize) -> Result<Vec<Interaction>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidArgument("k must be at least 1".into()));
    }
    let mut current = interactions;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        current = current
            .into_iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then_some(r))
            .collect();
    }
    if current.is_empty() {
        return Err(CorpusError::FilteredEmpty);
    }
    Ok(current)
}

/// Users with their chronological item sequences over a shared catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub catalog: Catalog,
    pub users: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
}

/// Builds the catalog and one timestamp-ordered sequence per user. Ties keep
/// file order. Users and items are numbered by first appearance; an item's
/// category set is the union over its records.
pub fn build_sequences(interactions: &[Interaction]) -> Dataset {
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_cats: Vec<(String, Vec<String>)> = Vec::new();
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut users = Vec::new();
    let mut events: Vec<Vec<(u64, usize, usize)>> = Vec::new();
    for (pos, r) in interactions.iter().enumerate() {
        let item = *item_ids.entry(&r.item).or_insert_with(|| {
            item_cats.push((r.item.clone(), Vec::new()));
            item_cats.len()
        });
        let cats = &mut item_cats[item - 1].1;
        for c in &r.categories {
            if !cats.contains(c) {
                cats.push(c.clone());
            }
        }
        let user = *user_ids.entry(&r.user).or_insert_with(|| {
            users.push(r.user.clone());
            events.push(Vec::new());
            users.len() - 1
        });
        events[user].push((r.timestamp, pos, item));
    }
    let sequences = events
        .into_iter()
        .map(|mut ev| {
            ev.sort_by_key(|&(ts, pos, _)| (ts, pos));
            ev.into_iter().map(|(_, _, item)| item).collect()
        })
        .collect();
    Dataset {
        catalog: Catalog::from_items(item_cats),
        users,
        sequences,
    }
}

/// Leave-one-out partition of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOneOut<'a> {
    /// Everything before the test target.
    pub train_region: &'a [usize],
    pub val_input: &'a [usize],
    pub val_target: usize,
    pub test_input: &'a [usize],
    pub test_target: usize,
}

/// `None` for sequences shorter than 3.
pub fn split_leave_one_out(seq: &[usize]) -> Option<LeaveOneOut<'_>> {
    let n = seq.len();
    if n < 3 {
        return None;
    }
    Some(LeaveOneOut {
        train_region: &seq[..n - 1],
        val_input: &seq[..n - 2],
        val_target: seq[n - 2],
        test_input: &seq[..n - 1],
        test_target: seq[n - 1],
    })
}

fn tail(items: &[usize], o: usize) -> Vec<usize> {
    items[items.len().saturating_sub(o)..].to_vec()
}

/// One sample per position `t ≥ 2` of the region: the up-to-`o` preceding
/// items predict the item at `t`.
pub fn sliding_window_samples(
    user: usize,
    region: &[usize],
    o: usize,
    catalog: &Catalog,
    bucketizer: &ShiftBucketizer,
) -> Result<Vec<Sample>, CorpusError> {
    if o == 0 {
        return Err(CorpusError::InvalidArgument("window length must be at least 1".into()));
    }
    (1..region.len())
        .map(|t| {
            let history = tail(&region[..t], o);
            let level = pmsa::pmsa(&history, region[t], catalog, bucketizer)?;
            Ok(Sample {
                user,
                history,
                target: region[t],
                level,
            })
        })
        .collect()
}

pub fn eval_sample(
    user: usize,
    input: &[usize],
    target: usize,
    o: usize,
    catalog: &Catalog,
    bucketizer: &ShiftBucketizer,
) -> Result<Sample, CorpusError> {
    let history = tail(input, o);
    let level = pmsa::pmsa(&history, target, catalog, bucketizer)?;
    Ok(Sample {
        user,
        history,
        target,
        level,
    })
}

/// Training, validation and test samples for a whole dataset.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Users whose sequences were too short to split.
    pub excluded_users: usize,
}

/// Splits every user and labels every sample with its shift level under
/// `catalog` (which may differ from `dataset.catalog`, e.g. after label
/// dropout).
pub fn build_splits(
    dataset: &Dataset,
    catalog: &Catalog,
    o: usize,
    bucketizer: &ShiftBucketizer,
) -> Result<Splits, CorpusError> {
    let mut splits = Splits::default();
    for (user, seq) in dataset.sequences.iter().enumerate() {
        let Some(loo) = split_leave_one_out(seq) else {
            splits.excluded_users += 1;
            continue;
        };
        splits
            .train
            .extend(sliding_window_samples(user, loo.train_region, o, catalog, bucketizer)?);
        splits.val.push(eval_sample(user, loo.val_input, loo.val_target, o, catalog, bucketizer)?);
        splits
            .test
            .push(eval_sample(user, loo.test_input, loo.test_target, o, catalog, bucketizer)?);
    }
    Ok(splits)
}

/// Removes each item label independently with probability `rho`; an item
/// that loses all labels keeps one of its original labels chosen uniformly.
pub fn label_dropout(catalog: &Catalog, rho: f64, seed: u64) -> Result<Catalog, CorpusError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CorpusError::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = catalog.clone();
    for cats in out.item_categories.iter_mut().skip(1) {
        let original = cats.clone();
        cats.retain(|_| !rng.gen_bool(rho));
        if cats.is_empty() {
            if let Some(&keep) = original.choose(&mut rng) {
                cats.push(keep);
            }
        }
    }
    Ok(out)
}

/// Dataset statistics in the usual users/items/categories/interactions/sparsity layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub interactions: usize,
    /// `1 − interactions / (users · items)`.
    pub sparsity: f64,
    pub excluded_users: usize,
}

impl DatasetReport {
    pub fn new(dataset: &Dataset) -> Self {
        let users = dataset.users.len();
        let items = dataset.catalog.num_items();
        let interactions: usize = dataset.sequences.iter().map(Vec::len).sum();
        let excluded_users = dataset.sequences.iter().filter(|s| s.len() < 3).count();
        Self {
            users,
            items,
            categories: dataset.catalog.num_categories(),
            interactions,
            sparsity: 1.0 - interactions as f64 / (users as f64 * items as f64).max(1.0),
            excluded_users,
        }
    }
}
