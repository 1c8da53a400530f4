//! Negative sampling for next-item pre-training.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category id → sorted, distinct item ids. Every item belongs to exactly one
/// category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryItemTable {
    map: BTreeMap<u32, Vec<u32>>,
    item_category: BTreeMap<u32, u32>,
    all_items: Vec<u32>,
}

impl CategoryItemTable {
    /// Builds the table from `(item, category)` observations. Duplicates are
    /// merged; an item seen under two categories is an error.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut item_category = BTreeMap::new();
        for (item, cat) in pairs {
            if let Some(&prev) = item_category.get(&item) {
                if prev != cat {
                    return Err(Error::Data(format!("item {item} appears under categories {prev} and {cat}")));
                }
            } else {
                item_category.insert(item, cat);
            }
        }
        let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&item, &cat) in &item_category {
            // BTreeMap iteration is ordered, so each list comes out sorted
            map.entry(cat).or_default().push(item);
        }
        let all_items = item_category.keys().copied().collect();
        Ok(Self { map, item_category, all_items })
    }

    pub fn items(&self, category: u32) -> Option<&[u32]> {
        self.map.get(&category).map(Vec::as_slice)
    }

    pub fn category_of(&self, item: u32) -> Option<u32> {
        self.item_category.get(&item).copied()
    }

    /// Every item in the table, ascending.
    pub fn all_items(&self) -> &[u32] {
        &self.all_items
    }

    pub fn n_categories(&self) -> usize {
        self.map.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.map.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// `k` items drawn uniformly from `table[category] \ {true_item}`, without
/// replacement when at least `k` candidates exist and with replacement
/// otherwise. `Ok(None)` means the category holds only the true item and the
/// caller must fall back to random sampling.
pub fn sample_negatives_cs(
    table: &CategoryItemTable,
    category: u32,
    true_item: u32,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Option<Vec<u32>>> {
    let items = table
        .items(category)
        .ok_or_else(|| Error::Sampling(format!("category {category} is not in the sampling table")))?;
    let pos = items
        .binary_search(&true_item)
        .map_err(|_| Error::Sampling(format!("item {true_item} is not listed under category {category}")))?;
    let n = items.len() - 1;
    if n == 0 {
        return Ok(None);
    }
    // candidate j skips over the true item's slot
    let pick = |j: usize| items[if j >= pos { j + 1 } else { j }];
    let out = if n >= k {
        index::sample(rng, n, k).into_iter().map(pick).collect()
    } else {
        (0..k).map(|_| pick(rng.random_range(0..n))).collect()
    };
    Ok(Some(out))
}

/// `k` items drawn uniformly (with replacement) from `vocab \ {true_item}`.
pub fn sample_negatives_rs(vocab: &[u32], true_item: u32, k: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let candidates = vocab.iter().filter(|&&i| i != true_item).count();
    if candidates == 0 {
        return Err(Error::Sampling(format!("random sampling needs an item other than {true_item}")));
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let item = vocab[rng.random_range(0..vocab.len())];
        if item != true_item {
            out.push(item);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    /// Negatives share the true item's category.
    Conditional,
    /// Negatives are uniform over all observed items.
    Random,
}

/// Applies a [`SamplingStrategy`] and counts conditional-sampling fallbacks.
pub struct NegativeSampler<'a> {
    strategy: SamplingStrategy,
    table: &'a CategoryItemTable,
    k: usize,
    fallbacks: u64,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(strategy: SamplingStrategy, table: &'a CategoryItemTable, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("number of negatives must be at least 1".into()));
        }
        if table.all_items().len() < 2 {
            return Err(Error::Sampling("sampling table must contain at least two items".into()));
        }
        Ok(Self { strategy, table, k, fallbacks: 0 })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    pub fn reset_fallbacks(&mut self) {
        self.fallbacks = 0;
    }

    pub fn sample(&mut self, category: u32, true_item: u32, rng: &mut impl Rng) -> Result<Vec<u32>> {
        if self.strategy == SamplingStrategy::Conditional {
            if let Some(neg) = sample_negatives_cs(self.table, category, true_item, self.k, rng)? {
                return Ok(neg);
            }
            self.fallbacks += 1;
        }
        sample_negatives_rs(self.table.all_items(), true_item, self.k, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    const A: u32 = 0;
    const B: u32 = 1;

    #[test]
    fn table_is_sorted_and_deduplicated() {
        let t = CategoryItemTable::from_pairs([(2, A), (1, A), (2, A), (4, B)]).unwrap();
        assert_eq!(t.items(A).unwrap(), &[1, 2]);
        assert_eq!(t.items(B).unwrap(), &[4]);
        assert_eq!(t.all_items(), &[1, 2, 4]);
        assert!(CategoryItemTable::from_pairs([(1, A), (1, B)]).is_err());
    }

    #[test]
    fn cs_subset_example() {
        let t = CategoryItemTable::from_pairs([(1, A), (2, A), (3, A)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut neg = sample_negatives_cs(&t, A, 2, 2, &mut rng).unwrap().unwrap();
            neg.sort();
            assert_eq!(neg, vec![1, 3]);
        }
    }

    #[test]
    fn cs_singleton_falls_back() {
        let t = CategoryItemTable::from_pairs([(4, B), (7, A)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_negatives_cs(&t, B, 4, 3, &mut rng).unwrap(), None);
        let mut sampler = NegativeSampler::new(SamplingStrategy::Conditional, &t, 3).unwrap();
        assert_eq!(sampler.sample(B, 4, &mut rng).unwrap(), vec![7, 7, 7]);
        assert_eq!(sampler.fallbacks(), 1);
    }

    #[test]
    fn cs_rejects_unknown_category_or_item() {
        let t = CategoryItemTable::from_pairs([(1, A), (2, A)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_negatives_cs(&t, B, 1, 1, &mut rng).is_err());
        assert!(sample_negatives_cs(&t, A, 9, 1, &mut rng).is_err());
    }

    #[test]
    fn cs_frequencies_are_balanced() {
        let t = CategoryItemTable::from_pairs([(1, A), (2, A), (3, A)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 10_000;
        let ones = (0..draws)
            .map(|_| sample_negatives_cs(&t, A, 2, 1, &mut rng).unwrap().unwrap()[0])
            .filter(|&i| i == 1)
            .count();
        let f = ones as f64 / draws as f64;
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn cs_exhaustive_property() {
        // categories of size 1..=15 so both sampling regimes are exercised
        let pairs: Vec<(u32, u32)> = (0..15u32).flat_map(|c| (0..=c).map(move |j| (c * 100 + j, c))).collect();
        let t = CategoryItemTable::from_pairs(pairs.iter().copied()).unwrap();
        let mut sampler = NegativeSampler::new(SamplingStrategy::Conditional, &t, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 10_000 {
            let (item, cat) = pairs[rng.random_range(0..pairs.len())];
            if cat == 0 {
                continue;
            }
            let neg = sampler.sample(cat, item, &mut rng).unwrap();
            assert_eq!(neg.len(), 10);
            for n in &neg {
                assert_eq!(t.category_of(*n), Some(cat));
                assert_ne!(*n, item);
            }
            if t.items(cat).unwrap().len() > 10 {
                let mut uniq = neg.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), 10, "expected sampling without replacement");
            }
            checked += neg.len();
        }
        assert_eq!(sampler.fallbacks(), 0);
    }

    #[test]
    fn rs_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_negatives_rs(&[1, 2], 1, 3, &mut rng).unwrap(), vec![2, 2, 2]);
        let vocab: Vec<u32> = (0..10).collect();
        for _ in 0..10_000 {
            assert_ne!(sample_negatives_rs(&vocab, 5, 1, &mut rng).unwrap()[0], 5);
        }
        assert!(sample_negatives_rs(&[3], 3, 1, &mut rng).is_err());
    }

    #[test]
    fn rs_is_uniform_by_chi_square() {
        let vocab: Vec<u32> = (0..100).collect();
        let true_item = 42;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0u64; 100];
        let draws = 100_000;
        for i in sample_negatives_rs(&vocab, true_item, draws, &mut rng).unwrap() {
            counts[i as usize] += 1;
        }
        assert_eq!(counts[true_item as usize], 0);
        let expected = draws as f64 / 99.0;
        let stat: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != true_item as usize)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new(98.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi-square {stat}, p {p}");
    }
}
