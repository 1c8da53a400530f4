//! Synthetic CTR bundle with planted structure.
//!
//! * Categories have latent centers `μ_c ~ N(0, I_D)`; items are assigned to
//!   categories round-robin after a shuffle and get `v_i = μ_c + σ·ε_i`.
//! * Users have latents `u ~ N(0, I_D)`. Each user feature is a noisy linear
//!   projection of `u`, bucketized by rank into equal-frequency buckets.
//! * Behavior timelines follow a category Markov chain with transition
//!   logits `sharpness·cos(μ_c, μ_c') + preference·⟨u, μ_c'⟩/√D`; the item
//!   within a category is drawn with logits `affinity·⟨u, v_i⟩/√D`.
//! * An impression on day `d` sees the timeline up to the start of day `d`.
//!   Its target category is usually one Markov step from the last behavior
//!   category, and the target item is uniform within that category.
//! * The click logit is
//!   `bias + α·⟨u, v⟩/√D + β·mean_j cos(v_j, v) + κ·sin(2π·hour/24)`
//!   over the last `recency_window` behavior items `v_j`, plus Gaussian noise
//!   before the Bernoulli draw.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Behavior, BehaviorSequence, DatasetBundle, Example};
use crate::autodiff::sigmoid;
use crate::embed::VocabSpec;
use crate::error::{Error, Result};
use crate::metrics::{auc, records};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Train impressions fall on days `0..train_days`; test on day `train_days`.
    pub train_days: u32,
    pub history_min: usize,
    pub history_max: usize,
    pub daily_events_min: usize,
    pub daily_events_max: usize,
    /// Spread `σ` of item latents around their category center.
    pub category_spread: f64,
    /// Scale of the category centers.
    pub center_scale: f64,
    /// When positive, category centers live in the first `category_dims`
    /// latent dimensions and within-category offsets in the rest; 0 lets both
    /// use every dimension.
    pub category_dims: usize,
    pub transition_sharpness: f64,
    pub category_preference: f64,
    pub item_affinity: f64,
    /// Pull of the next behavior item toward the style (offset from its
    /// category center) of the last `recency_window` items.
    pub style_momentum: f64,
    pub n_user_features: usize,
    pub user_feature_buckets: usize,
    pub user_feature_noise: f64,
    pub context_cardinality: usize,
    pub context_effect: f64,
    /// Probability that the target category is a Markov step from the last
    /// behavior category rather than uniform.
    pub target_markov_prob: f64,
    pub label_bias: f64,
    pub alpha: f64,
    /// Weight of the category-center part of the target latent in the
    /// `alpha` term; 1 uses the full latent, 0 only the within-category offset.
    pub label_center_weight: f64,
    pub beta: f64,
    pub recency_window: usize,
    pub label_noise: f64,
    pub max_seq_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 2000,
            n_items: 1000,
            n_categories: 50,
            latent_dim: 8,
            n_train: 50_000,
            n_test: 10_000,
            train_days: 3,
            history_min: 20,
            history_max: 60,
            daily_events_min: 2,
            daily_events_max: 6,
            category_spread: 1.0,
            center_scale: 1.0,
            category_dims: 0,
            transition_sharpness: 2.0,
            category_preference: 1.0,
            item_affinity: 2.0,
            style_momentum: 0.0,
            n_user_features: 4,
            user_feature_buckets: 8,
            user_feature_noise: 1.0,
            context_cardinality: 24,
            context_effect: 0.3,
            target_markov_prob: 0.8,
            label_bias: -1.0,
            alpha: 2.0,
            label_center_weight: 1.0,
            beta: 1.0,
            recency_window: 5,
            label_noise: 0.5,
            max_seq_len: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_categories == 0 || self.n_items < self.n_categories {
            return bad(format!("need n_items ≥ n_categories ≥ 1 (got {} and {})", self.n_items, self.n_categories));
        }
        if self.n_users == 0 || self.n_train == 0 || self.n_test == 0 || self.train_days == 0 {
            return bad("n_users, n_train, n_test and train_days must be positive".into());
        }
        if self.latent_dim == 0 || self.user_feature_buckets == 0 || self.context_cardinality == 0 {
            return bad("latent_dim, user_feature_buckets and context_cardinality must be positive".into());
        }
        if self.history_min > self.history_max || self.daily_events_min > self.daily_events_max {
            return bad("history and daily event ranges must have min ≤ max".into());
        }
        if self.category_dims >= self.latent_dim {
            return bad(format!("category_dims {} must be below latent_dim {}", self.category_dims, self.latent_dim));
        }
        if self.max_seq_len == 0 || self.recency_window == 0 {
            return bad("max_seq_len and recency_window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.target_markov_prob) {
            return bad(format!("target_markov_prob {} outside [0, 1]", self.target_markov_prob));
        }
        let reals = [
            self.category_spread,
            self.center_scale,
            self.transition_sharpness,
            self.category_preference,
            self.item_affinity,
            self.style_momentum,
            self.user_feature_noise,
            self.context_effect,
            self.label_bias,
            self.alpha,
            self.label_center_weight,
            self.beta,
            self.label_noise,
        ];
        if reals.iter().any(|v| !v.is_finite()) || self.label_noise < 0.0 || self.user_feature_noise < 0.0 {
            return bad("generator coefficients must be finite and noise levels nonnegative".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabSpec {
        VocabSpec {
            n_items: self.n_items,
            n_categories: self.n_categories,
            user_feature_cards: vec![self.user_feature_buckets; self.n_user_features],
            context_feature_cards: vec![self.context_cardinality],
            max_seq_len: self.max_seq_len,
        }
    }
}

/// A generated bundle plus the noiseless generator logits of every example.
#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub bundle: DatasetBundle,
    pub train_logits: Vec<f64>,
    pub test_logits: Vec<f64>,
    /// AUC of the true logit on the test split.
    pub oracle_test_auc: f64,
    pub oracle_train_auc: f64,
}

struct World {
    d: usize,
    item_category: Vec<u32>,
    category_items: Vec<Vec<u32>>,
    item_latent: Vec<Vec<f64>>,
    /// Norm of each item's offset from its category center.
    offset_norm: Vec<f64>,
    center: Vec<Vec<f64>>,
    center_cos: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Index drawn with probability ∝ `exp(logits)`.
fn sample_logits(rng: &mut impl Rng, logits: &[f64], scratch: &mut Vec<f64>) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scratch.clear();
    let mut total = 0.0;
    for &l in logits {
        total += (l - max).exp();
        scratch.push(total);
    }
    let r = rng.random::<f64>() * total;
    scratch.iter().position(|&c| r < c).unwrap_or(logits.len() - 1)
}

impl World {
    fn new(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.latent_dim;
        let k = cfg.category_dims;
        let in_center = |j: usize| k == 0 || j < k;
        let in_offset = |j: usize| k == 0 || j >= k;
        let center: Vec<Vec<f64>> = (0..cfg.n_categories)
            .map(|_| {
                let v = normal_vec(rng, d);
                v.into_iter().enumerate().map(|(j, x)| if in_center(j) { cfg.center_scale * x } else { 0.0 }).collect()
            })
            .collect();
        let mut perm: Vec<usize> = (0..cfg.n_items).collect();
        perm.shuffle(rng);
        let mut item_category = vec![0u32; cfg.n_items];
        for (j, &item) in perm.iter().enumerate() {
            item_category[item] = (j % cfg.n_categories) as u32;
        }
        let mut category_items = vec![Vec::new(); cfg.n_categories];
        for (item, &c) in item_category.iter().enumerate() {
            category_items[c as usize].push(item as u32);
        }
        let item_latent: Vec<Vec<f64>> = item_category
            .iter()
            .map(|&c| {
                let eps = normal_vec(rng, d);
                center[c as usize]
                    .iter()
                    .zip(eps)
                    .enumerate()
                    .map(|(j, (m, e))| if in_offset(j) { m + cfg.category_spread * e } else { *m })
                    .collect()
            })
            .collect();
        let offset_norm = item_latent
            .iter()
            .zip(&item_category)
            .map(|(v, &c)| v.iter().zip(&center[c as usize]).map(|(x, m)| (x - m).powi(2)).sum::<f64>().sqrt())
            .collect();
        let norms: Vec<f64> = center.iter().map(|c| dot(c, c).sqrt()).collect();
        let center_cos = (0..cfg.n_categories)
            .map(|a| (0..cfg.n_categories).map(|b| dot(&center[a], &center[b]) / (norms[a] * norms[b])).collect())
            .collect();
        Self { d, item_category, category_items, item_latent, offset_norm, center, center_cos }
    }

    /// Cosine between two items' offsets from their category centers: how
    /// alike they are beyond sharing a category.
    fn offset_cos(&self, a: usize, b: usize) -> f64 {
        let off = |i: usize| {
            let c = self.item_category[i] as usize;
            self.item_latent[i].iter().zip(&self.center[c]).map(|(x, m)| x - m)
        };
        let num: f64 = off(a).zip(off(b)).map(|(x, y)| x * y).sum();
        let den = self.offset_norm[a] * self.offset_norm[b];
        if den > 0.0 { num / den } else { 0.0 }
    }

    /// `⟨u, w·μ_c + (v − μ_c)⟩` for item `v` in category `c`.
    fn weighted_match(&self, user: &[f64], item: usize, w: f64) -> f64 {
        let center = &self.center[self.item_category[item] as usize];
        user.iter().zip(&self.item_latent[item]).zip(center).map(|((u, v), m)| u * (v - m + w * m)).sum()
    }

    /// Mean offset cosine between `item` and the `recent` events; 0 when empty.
    fn style_match(&self, recent: &[Behavior], item: usize) -> f64 {
        if recent.is_empty() {
            return 0.0;
        }
        recent.iter().map(|b| self.offset_cos(b.item as usize, item)).sum::<f64>() / recent.len() as f64
    }
}

struct User {
    latent: Vec<f64>,
    features: Vec<u32>,
    /// `preference·⟨u, μ_c⟩/√D` per category.
    category_pref: Vec<f64>,
    timeline: Vec<Behavior>,
    /// Timeline length visible at the start of each day.
    visible: Vec<usize>,
}

fn build_users(cfg: &GeneratorConfig, world: &World, rng: &mut impl Rng) -> Vec<User> {
    let d = world.d;
    let sqrt_d = (d as f64).sqrt();
    let projections: Vec<Vec<f64>> =
        (0..cfg.n_user_features).map(|_| normal_vec(rng, d).into_iter().map(|x| x / sqrt_d).collect()).collect();
    let latents: Vec<Vec<f64>> = (0..cfg.n_users).map(|_| normal_vec(rng, d)).collect();
    // noisy projections, bucketized by rank so every bucket is equally full
    let mut features = vec![vec![0u32; cfg.n_user_features]; cfg.n_users];
    for (f, w) in projections.iter().enumerate() {
        let raw: Vec<f64> = latents
            .iter()
            .map(|u| dot(w, u) + cfg.user_feature_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut order: Vec<usize> = (0..cfg.n_users).collect();
        order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
        for (rank, &u) in order.iter().enumerate() {
            features[u][f] = (rank * cfg.user_feature_buckets / cfg.n_users) as u32;
        }
    }
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut logits = vec![0.0; cfg.n_categories];
    let mut scratch = Vec::new();
    for (latent, features) in latents.into_iter().zip(features) {
        let category_pref: Vec<f64> =
            world.center.iter().map(|m| cfg.category_preference * dot(&latent, m) / sqrt_d).collect();
        let item_logit: Vec<f64> =
            world.item_latent.iter().map(|v| cfg.item_affinity * dot(&latent, v) / sqrt_d).collect();
        let mut visible = Vec::with_capacity(cfg.train_days as usize + 1);
        let mut len = rng.random_range(cfg.history_min..=cfg.history_max);
        for _ in 0..=cfg.train_days {
            visible.push(len);
            len += rng.random_range(cfg.daily_events_min..=cfg.daily_events_max);
        }
        let mut timeline = Vec::with_capacity(len);
        let mut item_logits = Vec::new();
        let mut prev: Option<usize> = None;
        for _ in 0..len {
            for (c, l) in logits.iter_mut().enumerate() {
                *l = category_pref[c] + prev.map_or(0.0, |p| cfg.transition_sharpness * world.center_cos[p][c]);
            }
            let c = sample_logits(rng, &logits, &mut scratch);
            let items = &world.category_items[c];
            item_logits.clear();
            let recent = &timeline[timeline.len().saturating_sub(cfg.recency_window)..];
            item_logits.extend(items.iter().map(|&i| {
                item_logit[i as usize] + cfg.style_momentum * world.style_match(recent, i as usize)
            }));
            let item = items[sample_logits(rng, &item_logits, &mut scratch)];
            timeline.push(Behavior { item, category: c as u32 });
            prev = Some(c);
        }
        users.push(User { latent, features, category_pref, timeline, visible });
    }
    users
}

struct Impressions {
    examples: Vec<Example>,
    logits: Vec<f64>,
}

fn impressions(
    cfg: &GeneratorConfig,
    world: &World,
    users: &[User],
    n: usize,
    days: std::ops::Range<u32>,
    rng: &mut impl Rng,
) -> Impressions {
    let sqrt_d = (world.d as f64).sqrt();
    let mut drawn: Vec<(u32, u32, usize)> = (0..n)
        .map(|i| (rng.random_range(days.clone()), rng.random_range(0..cfg.n_users) as u32, i))
        .collect();
    drawn.sort();
    let mut examples = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    let mut cat_logits = vec![0.0; cfg.n_categories];
    let mut scratch = Vec::new();
    for (day, user_id, _) in drawn {
        let user = &users[user_id as usize];
        let visible = &user.timeline[..user.visible[day as usize]];
        let history = &visible[visible.len().saturating_sub(cfg.max_seq_len)..];
        let hour = rng.random_range(0..cfg.context_cardinality);
        let category = if rng.random_bool(cfg.target_markov_prob) {
            let prev = history.last().map(|b| b.category as usize);
            for (c, l) in cat_logits.iter_mut().enumerate() {
                *l = user.category_pref[c] + prev.map_or(0.0, |p| cfg.transition_sharpness * world.center_cos[p][c]);
            }
            sample_logits(rng, &cat_logits, &mut scratch)
        } else {
            rng.random_range(0..cfg.n_categories)
        };
        let items = &world.category_items[category];
        let target = items[rng.random_range(0..items.len())] as usize;
        let recency = world.style_match(&history[history.len().saturating_sub(cfg.recency_window)..], target);
        let logit = cfg.label_bias
            + cfg.alpha * world.weighted_match(&user.latent, target, cfg.label_center_weight) / sqrt_d
            + cfg.beta * recency
            + cfg.context_effect * (2.0 * PI * hour as f64 / cfg.context_cardinality as f64).sin();
        let noisy = logit + cfg.label_noise * rng.sample::<f64, _>(StandardNormal);
        let label = rng.random::<f64>() < sigmoid(noisy);
        debug_assert_eq!(world.item_category[target] as usize, category);
        examples.push(Example {
            user_id,
            day,
            user_features: user.features.clone(),
            context_features: vec![hour as u32],
            target_item: target as u32,
            target_category: category as u32,
            behavior: BehaviorSequence(history.to_vec()),
            label,
        });
        logits.push(logit);
    }
    Impressions { examples, logits }
}

fn oracle_auc(examples: &[Example], logits: &[f64]) -> f64 {
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    auc(&records(logits, &labels)).unwrap_or(0.5)
}

/// Deterministic for a given configuration.
pub fn generate(cfg: &GeneratorConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(k);
        r
    };
    let world = World::new(cfg, &mut stream(0));
    let users = build_users(cfg, &world, &mut stream(1));
    let mut rng = stream(2);
    let train = impressions(cfg, &world, &users, cfg.n_train, 0..cfg.train_days, &mut rng);
    let test = impressions(cfg, &world, &users, cfg.n_test, cfg.train_days..cfg.train_days + 1, &mut rng);
    let oracle_train_auc = oracle_auc(&train.examples, &train.logits);
    let oracle_test_auc = oracle_auc(&test.examples, &test.logits);
    let bundle = DatasetBundle::from_splits(cfg.vocab(), train.examples, test.examples)?;
    Ok(GeneratedData { bundle, train_logits: train.logits, test_logits: test.logits, oracle_test_auc, oracle_train_auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_pretrain_set, save_bundle};

    fn small() -> GeneratorConfig {
        GeneratorConfig { n_users: 200, n_items: 120, n_categories: 12, n_train: 3000, n_test: 800, ..Default::default() }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_bundle(&generate(&small()).unwrap().bundle, a.path()).unwrap();
        save_bundle(&generate(&small()).unwrap().bundle, b.path()).unwrap();
        for f in [super::super::TRAIN_FILE, super::super::TEST_FILE, super::super::PRETRAIN_FILE, super::super::TABLE_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = GeneratorConfig { seed: 8, ..small() };
        assert_ne!(generate(&other).unwrap().bundle, generate(&small()).unwrap().bundle);
    }

    #[test]
    fn structural_invariants() {
        let cfg = GeneratorConfig { history_min: 190, history_max: 230, ..small() };
        let data = generate(&cfg).unwrap();
        let b = &data.bundle;
        assert!(b.train.iter().chain(&b.test).all(|e| e.behavior.len() <= 200));
        assert!(b.train.iter().any(|e| e.behavior.len() == 200));
        assert!(b.train.iter().all(|e| e.day < 3) && b.test.iter().all(|e| e.day == 3));
        let users: std::collections::BTreeSet<u32> = b.train.iter().map(|e| e.user_id).collect();
        assert_eq!(b.pretrain.len(), users.len());
        assert_eq!(b.pretrain, build_pretrain_set(&b.train).unwrap());
        // every target and behavior item sits in its own category
        for e in b.train.iter().chain(&b.test) {
            assert_eq!(b.table.category_of(e.target_item).unwrap_or(e.target_category), e.target_category);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&GeneratorConfig { n_items: 3, n_categories: 5, ..small() }).is_err());
        assert!(generate(&GeneratorConfig { history_min: 9, history_max: 2, ..small() }).is_err());
        assert!(generate(&GeneratorConfig { target_markov_prob: 1.5, ..small() }).is_err());
    }

    #[test]
    fn planted_signal_beats_random() {
        let data = generate(&small()).unwrap();
        assert!(data.oracle_test_auc > 0.7, "{}", data.oracle_test_auc);
    }
}
