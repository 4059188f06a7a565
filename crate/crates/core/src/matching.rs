//! Groups of training samples sharing both target item and shift level.

use std::collections::HashMap;

use rand::Rng;

use crate::corpus::Sample;

#[derive(Debug, Clone, Default)]
pub struct MatchIndex {
    groups: HashMap<(usize, usize), Vec<usize>>,
    keys: Vec<(usize, usize)>,
}

impl MatchIndex {
    /// Indexes samples by `(target, level)`; `level_override` replaces every
    /// sample's level when set.
    pub fn build(samples: &[Sample], level_override: Option<usize>) -> Self {
        let mut groups: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let keys: Vec<(usize, usize)> = samples
            .iter()
            .map(|s| (s.target, level_override.unwrap_or(s.level)))
            .collect();
        for (i, &k) in keys.iter().enumerate() {
            groups.entry(k).or_default().push(i);
        }
        Self { groups, keys }
    }

    /// Members of the `(target, level)` group, in sample order.
    pub fn group(&self, target: usize, level: usize) -> &[usize] {
        self.groups.get(&(target, level)).map_or(&[], Vec::as_slice)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// A uniformly drawn other member of sample `id`'s group, or `None` when
    /// the sample is alone.
    pub fn partner<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> Option<usize> {
        let (t, l) = self.keys[id];
        let g = self.group(t, l);
        if g.len() < 2 {
            return None;
        }
        let pos = g.binary_search(&id).expect("member of its own group");
        let r = rng.gen_range(0..g.len() - 1);
        Some(g[if r >= pos { r + 1 } else { r }])
    }

    /// All unordered pairs within groups, truncated to `limit`.
    pub fn same_level_pairs(&self, limit: usize) -> Vec<(usize, usize)> {
        let mut keys: Vec<_> = self.groups.keys().copied().collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for k in keys {
            let g = &self.groups[&k];
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    if out.len() == limit {
                        return out;
                    }
                    out.push((a, b));
                }
            }
        }
        out
    }
}
