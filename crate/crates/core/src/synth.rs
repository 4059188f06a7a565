//! Synthetic interaction logs with planted shift levels.
//!
//! Categories sit on a ring. Each item has a primary category plus extras
//! taken from the categories just after it. A user tracks a focus category;
//! at every step a shift level is drawn from the profile, and the next item is
//! drawn among items whose shift level against the recent window equals it,
//! weighted by popularity and by closeness to an anchor that moves further
//! from the focus as the level grows.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Catalog, Format, Interaction};
use crate::pmsa::{self, ShiftBucketizer, ShiftDegree};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("infeasible shift profile: level {level} has mass {mass} but no item can realize it")]
    Infeasible { level: usize, mass: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Inclusive range of category counts per item.
    pub categories_per_item: [usize; 2],
    /// Inclusive range of sequence lengths.
    pub sequence_length: [usize; 2],
    /// Number of shift levels V.
    pub levels: usize,
    /// Probability of each level `1..=V`.
    pub shift_profile: Vec<f64>,
    /// Trailing items whose categories form the history union.
    pub window: usize,
    pub zipf_exponent: f64,
    /// Decay of candidate weight per ring step away from the anchor.
    pub affinity: f64,
    /// Ring distance between the focus and the anchor at the top level.
    pub jump: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_categories: 20,
            categories_per_item: [1, 4],
            sequence_length: [8, 16],
            levels: 5,
            shift_profile: vec![0.4, 0.2, 0.2, 0.1, 0.1],
            window: 10,
            zipf_exponent: 1.0,
            affinity: 1.0,
            jump: 7,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_categories == 0 {
            return bad("n_users, n_items and n_categories must be positive".into());
        }
        let [clo, chi] = self.categories_per_item;
        if clo == 0 || clo > chi || chi > self.n_categories {
            return bad(format!("categories_per_item {clo}..={chi} invalid for {} categories", self.n_categories));
        }
        let [llo, lhi] = self.sequence_length;
        if llo < 2 || llo > lhi {
            return bad(format!("sequence_length {llo}..={lhi} must satisfy 2 ≤ lo ≤ hi"));
        }
        if self.levels < 3 {
            return bad(format!("levels must be ≥ 3, got {}", self.levels));
        }
        if self.shift_profile.len() != self.levels {
            return bad(format!(
                "shift_profile has {} entries for {} levels",
                self.shift_profile.len(),
                self.levels
            ));
        }
        if self.shift_profile.iter().any(|&p| p.is_nan() || p < 0.0) {
            return bad("shift_profile entries must be non-negative".into());
        }
        let total: f64 = self.shift_profile.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("shift_profile sums to {total}, not 1"));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if [self.affinity, self.zipf_exponent].iter().any(|x| x.is_nan() || *x < 0.0) {
            return bad("affinity and zipf_exponent must be non-negative".into());
        }
        Ok(())
    }
}

/// Intended and realized level of one generated `(history, next item)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub user: usize,
    /// 0-based position of the next item in the user's sequence.
    pub position: usize,
    pub item: usize,
    pub intended_level: usize,
    pub realized_level: usize,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    pub truth: Vec<TruthRow>,
}

impl SynthOutput {
    /// Pairs whose realized level differs from the intended one.
    pub fn mismatches(&self) -> usize {
        self.truth.iter().filter(|r| r.intended_level != r.realized_level).count()
    }

    pub fn write_interactions<W: Write>(&self, mut w: W, format: Format) -> std::io::Result<()> {
        for r in &self.interactions {
            match format {
                Format::Tsv => writeln!(w, "{}\t{}\t{}\t{}", r.user, r.item, r.timestamp, r.categories.join("|"))?,
                Format::Jsonl => {
                    let v = serde_json::json!({
                        "user": r.user,
                        "item": r.item,
                        "ts": r.timestamp,
                        "categories": r.categories,
                    });
                    writeln!(w, "{v}")?
                }
            }
        }
        Ok(())
    }

    pub fn write_truth_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,position,item,intended_level,realized_level")?;
        for r in &self.truth {
            writeln!(
                w,
                "u{},{},{},{},{}",
                r.user,
                r.position,
                self.catalog.item_name(r.item),
                r.intended_level,
                r.realized_level
            )?;
        }
        Ok(())
    }
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

struct World {
    catalog: Catalog,
    primary: Vec<usize>,
    popularity: Vec<f64>,
}

fn build_world(cfg: &SynthConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nc = cfg.n_categories;
    let [clo, chi] = cfg.categories_per_item;
    let mut primary = Vec::with_capacity(cfg.n_items);
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let c = i % nc;
        let k = rng.gen_range(clo..=chi);
        // Extras come from the next `chi` categories on the ring.
        let mut arc: Vec<usize> = (1..=chi.min(nc - 1)).map(|s| (c + s) % nc).collect();
        arc.shuffle(&mut rng);
        let mut cats: Vec<String> = std::iter::once(c)
            .chain(arc.into_iter().take(k - 1))
            .map(|c| format!("c{c}"))
            .collect();
        cats.sort();
        primary.push(c);
        items.push((format!("i{i}"), cats));
    }
    let mut ranks: Vec<usize> = (1..=cfg.n_items).collect();
    ranks.shuffle(&mut rng);
    let popularity = ranks.iter().map(|&r| (r as f64).powf(-cfg.zipf_exponent)).collect();
    let catalog = Catalog::from_items(items);
    World {
        catalog,
        primary,
        popularity,
    }
}

/// Fails when some level with positive mass cannot be produced by any item.
fn check_profile(cfg: &SynthConfig, catalog: &Catalog, bucketizer: &ShiftBucketizer) -> Result<(), SynthError> {
    let mut sizes: Vec<usize> = (1..=catalog.num_items()).map(|i| catalog.categories(i).len()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    for (b, &mass) in (1..).zip(&cfg.shift_profile) {
        if mass == 0.0 || b == 1 || b == cfg.levels {
            continue;
        }
        let reachable = sizes.iter().any(|&t| {
            (1..t).any(|s| {
                bucketizer.bucket_exact(ShiftDegree {
                    shifted: s,
                    target_size: t,
                }) == b
            })
        });
        if !reachable {
            return Err(SynthError::Infeasible { level: b, mass });
        }
    }
    Ok(())
}

fn generate_user(
    cfg: &SynthConfig,
    world: &World,
    bucketizer: &ShiftBucketizer,
    profile: &WeightedIndex<f64>,
    user: usize,
) -> (Vec<usize>, Vec<TruthRow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(user as u64 + 1);
    let nc = cfg.n_categories;
    let n = cfg.n_items;
    let len = rng.gen_range(cfg.sequence_length[0]..=cfg.sequence_length[1]);
    let mut focus = rng.gen_range(0..nc);
    let weight = |item: usize, anchor: usize| {
        world.popularity[item - 1] * (-cfg.affinity * ring_distance(world.primary[item - 1], anchor, nc) as f64).exp()
    };
    // Opening with a widest item gives the history union enough categories
    // for every interior level to be reachable from the next step on.
    let widest = (1..=n).map(|i| world.catalog.categories(i).len()).max().unwrap_or(1);
    let first_w: Vec<f64> = (1..=n)
        .map(|i| {
            if world.catalog.categories(i).len() == widest {
                weight(i, focus)
            } else {
                0.0
            }
        })
        .collect();
    let first = 1 + WeightedIndex::new(&first_w).expect("positive weights").sample(&mut rng);
    let mut seq = vec![first];
    focus = world.primary[first - 1];
    let mut truth = Vec::with_capacity(len - 1);
    let mut levels = vec![0usize; n + 1];
    for position in 1..len {
        let intended = 1 + profile.sample(&mut rng);
        let window = &seq[seq.len().saturating_sub(cfg.window)..];
        let union = pmsa::history_union(window, &world.catalog);
        for (i, l) in levels.iter_mut().enumerate().skip(1) {
            let degree = pmsa::pmsd(&union, world.catalog.categories(i)).expect("items have categories");
            *l = bucketizer.bucket_exact(degree);
        }
        // Nearest realizable level, preferring the lower one on ties.
        let realized = (0..cfg.levels)
            .flat_map(|off| [intended.checked_sub(off), Some(intended + off)])
            .flatten()
            .find(|&b| (1..=cfg.levels).contains(&b) && levels.contains(&b))
            .expect("every item has some level");
        let shift = (cfg.jump * (realized - 1) + (cfg.levels - 1) / 2) / (cfg.levels - 1);
        let anchor = (focus + shift) % nc;
        let cands: Vec<usize> = (1..=n).filter(|&i| levels[i] == realized).collect();
        let w: Vec<f64> = cands.iter().map(|&i| weight(i, anchor)).collect();
        let item = match WeightedIndex::new(&w) {
            Ok(dist) => cands[dist.sample(&mut rng)],
            Err(_) => cands[rng.gen_range(0..cands.len())],
        };
        truth.push(TruthRow {
            user,
            position,
            item,
            intended_level: intended,
            realized_level: realized,
        });
        seq.push(item);
        focus = world.primary[item - 1];
    }
    (seq, truth)
}

/// Generates the log; the output is a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let bucketizer = ShiftBucketizer::new(cfg.levels).map_err(|e| SynthError::Config(e.to_string()))?;
    let world = build_world(cfg);
    check_profile(cfg, &world.catalog, &bucketizer)?;
    let profile = WeightedIndex::new(&cfg.shift_profile).map_err(|e| SynthError::Config(e.to_string()))?;
    let users: Vec<(Vec<usize>, Vec<TruthRow>)> = (0..cfg.n_users)
        .into_par_iter()
        .map(|u| generate_user(cfg, &world, &bucketizer, &profile, u))
        .collect();
    let mut interactions = Vec::new();
    let mut truth = Vec::new();
    for (u, (seq, rows)) in users.into_iter().enumerate() {
        for (t, &item) in seq.iter().enumerate() {
            interactions.push(Interaction {
                user: format!("u{u}"),
                item: world.catalog.item_name(item).to_string(),
                timestamp: t as u64,
                categories: world
                    .catalog
                    .categories(item)
                    .iter()
                    .map(|&c| world.catalog.category_name(c).to_string())
                    .collect(),
            });
        }
        truth.extend(rows);
    }
    Ok(SynthOutput {
        catalog: world.catalog,
        interactions,
        truth,
    })
}
