//! Full-ranking metrics and the shift-level analyses built on a trained model.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::diffcore::DiffError;
use crate::matching::MatchIndex;
use crate::model::Model;

/// Cut-offs reported by default.
pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Recall@k and NDCG@k averaged over `count` single-target samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub count: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl MetricsTable {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// 1-based rank of column `target` among `scores`, descending. Ties go to the
/// lower column index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Metrics from 1-based ranks: a hit at `k` when `rank ≤ k`, with gain
/// `1 / log2(rank + 1)`.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> MetricsTable {
    let n = ranks.len().max(1) as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        let gain: f64 = ranks
            .iter()
            .filter(|&&r| r <= k)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        recall.insert(k, hits as f64 / n);
        ndcg.insert(k, gain / n);
    }
    MetricsTable {
        count: ranks.len(),
        recall,
        ndcg,
    }
}

/// Rank of each sample's target over the full item vocabulary.
pub fn sample_ranks(model: &Model, samples: &[Sample], batch: usize) -> Result<Vec<usize>, DiffError> {
    let chunks: Vec<Vec<usize>> = samples
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let hs: Vec<&[usize]> = chunk.iter().map(|s| s.history.as_slice()).collect();
            let scores = model.score_items(&hs)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, s)| rank_of(scores.row(i), s.target - 1))
                .collect())
        })
        .collect::<Result<_, DiffError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn rank_metrics(model: &Model, samples: &[Sample], ks: &[usize], batch: usize) -> Result<MetricsTable, DiffError> {
    Ok(metrics_from_ranks(&sample_ranks(model, samples, batch)?, ks))
}

/// Metrics per shift level; levels without samples are absent.
pub fn subgroup_by_shift(samples: &[Sample], ranks: &[usize], ks: &[usize]) -> BTreeMap<usize, MetricsTable> {
    let mut by_level: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, &r) in samples.iter().zip(ranks) {
        by_level.entry(s.level).or_default().push(r);
    }
    by_level
        .into_iter()
        .map(|(l, rs)| (l, metrics_from_ranks(&rs, ks)))
        .collect()
}

/// Row `b − 1` is the mean shift distribution at the true target over samples
/// of level `b`; `None` marks levels without samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl Heatmap {
    /// Mean diagonal and mean off-diagonal entry over non-empty rows.
    pub fn diagonal_contrast(&self) -> (f64, f64) {
        let (mut diag, mut nd, mut off, mut no) = (0.0, 0, 0.0, 0);
        for (b, row) in self.rows.iter().enumerate() {
            let Some(row) = row else { continue };
            for (v, &x) in row.iter().enumerate() {
                if v == b {
                    diag += x;
                    nd += 1;
                } else {
                    off += x;
                    no += 1;
                }
            }
        }
        (diag / nd.max(1) as f64, off / no.max(1) as f64)
    }
}

pub fn shift_heatmap(model: &Model, samples: &[Sample], levels: usize, batch: usize) -> Result<Heatmap, DiffError> {
    let v = model.num_branches();
    let parts: Vec<Vec<f64>> = samples
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let hs: Vec<&[usize]> = chunk.iter().map(|s| s.history.as_slice()).collect();
            let ts: Vec<usize> = chunk.iter().map(|s| s.target).collect();
            Ok(model.target_distribution(&hs, &ts)?.into_data())
        })
        .collect::<Result<_, DiffError>>()?;
    let mut sums = vec![vec![0.0; v]; levels];
    let mut counts = vec![0usize; levels];
    for (s, f) in samples.iter().zip(parts.iter().flat_map(|p| p.chunks(v))) {
        let row = s.level - 1;
        counts[row] += 1;
        for (acc, x) in sums[row].iter_mut().zip(f) {
            *acc += x;
        }
    }
    let rows = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &c)| (c > 0).then(|| row.into_iter().map(|x| x / c as f64).collect()))
        .collect();
    Ok(Heatmap { rows, counts })
}

/// Euclidean distances between basic views of sample pairs sharing a target,
/// split by whether their shift levels agree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairDistances {
    pub same_level: Vec<f64>,
    pub different_level: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl PairDistances {
    pub fn mean_same(&self) -> f64 {
        mean(&self.same_level)
    }

    pub fn mean_different(&self) -> f64 {
        mean(&self.different_level)
    }

    /// `mean(different) − mean(same)`.
    pub fn gap(&self) -> f64 {
        self.mean_different() - self.mean_same()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "distance,pair_kind")?;
        for d in &self.same_level {
            writeln!(w, "{d},same_level")?;
        }
        for d in &self.different_level {
            writeln!(w, "{d},different_level")?;
        }
        Ok(())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Samples up to `max_pairs` pairs of each kind uniformly and measures them.
pub fn pair_distance_analysis<R: Rng>(
    model: &Model,
    samples: &[Sample],
    max_pairs: usize,
    batch: usize,
    rng: &mut R,
) -> Result<PairDistances, DiffError> {
    let index = MatchIndex::build(samples, None);
    let mut same = index.same_level_pairs(usize::MAX);
    let mut by_target: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_target.entry(s.target).or_default().push(i);
    }
    let mut different = Vec::new();
    for members in by_target.values() {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                if samples[a].level != samples[b].level {
                    different.push((a, b));
                }
            }
        }
    }
    for pairs in [&mut same, &mut different] {
        if pairs.len() > max_pairs {
            pairs.shuffle(rng);
            pairs.truncate(max_pairs);
            pairs.sort_unstable();
        }
    }
    let mut needed: Vec<usize> = same.iter().chain(&different).flat_map(|&(a, b)| [a, b]).collect();
    needed.sort_unstable();
    needed.dedup();
    let views: Vec<Vec<f64>> = needed
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let hs: Vec<&[usize]> = chunk.iter().map(|&i| samples[i].history.as_slice()).collect();
            let t = model.basic_views(&hs)?;
            Ok((0..chunk.len()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, DiffError>>()?
        .into_iter()
        .flatten()
        .collect();
    let view = |i: usize| &views[needed.binary_search(&i).expect("computed")];
    let dist = |pairs: &[(usize, usize)]| pairs.iter().map(|&(a, b)| euclidean(view(a), view(b))).collect();
    Ok(PairDistances {
        same_level: dist(&same),
        different_level: dist(&different),
    })
}

/// Writes per-level metrics as `level,count,recall@k...,ndcg@k...`.
pub fn write_subgroup_csv<W: Write>(
    mut w: W,
    groups: &BTreeMap<usize, MetricsTable>,
    ks: &[usize],
) -> std::io::Result<()> {
    let mut header = vec!["level".to_string(), "count".to_string()];
    header.extend(ks.iter().map(|k| format!("recall@{k}")));
    header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    writeln!(w, "{}", header.join(","))?;
    for (level, m) in groups {
        let mut row = vec![level.to_string(), m.count.to_string()];
        row.extend(ks.iter().map(|&k| m.recall_at(k).to_string()));
        row.extend(ks.iter().map(|&k| m.ndcg_at(k).to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the heatmap as `level,count,f1..fV`; empty rows have blank cells.
pub fn write_heatmap_csv<W: Write>(mut w: W, heatmap: &Heatmap) -> std::io::Result<()> {
    let v = heatmap.rows.iter().flatten().map(Vec::len).next().unwrap_or(heatmap.rows.len());
    let cols: Vec<String> = (1..=v).map(|i| format!("f{i}")).collect();
    writeln!(w, "level,count,{}", cols.join(","))?;
    for (b, (row, c)) in heatmap.rows.iter().zip(&heatmap.counts).enumerate() {
        let cells = match row {
            Some(r) => r.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            None => vec![""; v].join(","),
        };
        writeln!(w, "{},{},{}", b + 1, c, cells)?;
    }
    Ok(())
}
