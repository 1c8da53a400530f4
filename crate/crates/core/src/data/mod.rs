//! Dataset schema, the category-item sampling table, the pre-training corpus
//! builder, text IO and a synthetic generator with planted structure.

mod generator;
mod io;

pub use generator::{generate, GeneratedData, GeneratorConfig};
pub use io::{load_bundle, save_bundle, DATA_MAGIC, DATA_VERSION, PRETRAIN_FILE, TABLE_FILE, TEST_FILE, TRAIN_FILE};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embed::VocabSpec;
use crate::error::{Error, Result};
pub use crate::gendec::{Behavior, BehaviorSequence};
pub use crate::pretrain::CategoryItemTable;

/// One impression: features `x`, behavior `s`, target category `c`, click `y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user_id: u32,
    /// Logical day of the impression; test days follow train days.
    pub day: u32,
    pub user_features: Vec<u32>,
    pub context_features: Vec<u32>,
    pub target_item: u32,
    pub target_category: u32,
    pub behavior: BehaviorSequence,
    pub label: bool,
}

/// One deduplicated user of the training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub user_id: u32,
    pub user_features: Vec<u32>,
    pub behavior: BehaviorSequence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetBundle {
    pub vocab: VocabSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub pretrain: Vec<PretrainRecord>,
    pub table: CategoryItemTable,
}

impl DatasetBundle {
    /// Assembles a bundle, deriving the pre-training set and sampling table
    /// from `train`.
    pub fn from_splits(vocab: VocabSpec, train: Vec<Example>, test: Vec<Example>) -> Result<Self> {
        let table = build_category_item_table(&train)?;
        let pretrain = build_pretrain_set(&train)?;
        let bundle = Self { vocab, train, test, pretrain, table };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn pretrain_sequences(&self) -> Vec<BehaviorSequence> {
        self.pretrain.iter().map(|r| r.behavior.clone()).collect()
    }

    /// Checks ids against the vocabulary, sequence lengths, the day split and
    /// the sampling table.
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        for (split, set) in [("train", &self.train), ("test", &self.test)] {
            for (i, ex) in set.iter().enumerate() {
                self.check_example(ex).map_err(|m| Error::Data(format!("{split} example {i}: {m}")))?;
            }
        }
        for r in &self.pretrain {
            self.check_sequence(&r.behavior).map_err(|m| Error::Data(format!("pretrain user {}: {m}", r.user_id)))?;
        }
        if let (Some(last_train), Some(first_test)) =
            (self.train.iter().map(|e| e.day).max(), self.test.iter().map(|e| e.day).min())
        {
            if first_test <= last_train {
                return Err(Error::Data(format!(
                    "test day {first_test} does not follow the last train day {last_train}"
                )));
            }
        }
        for (c, items) in self.table.iter() {
            if c as usize >= self.vocab.n_categories || items.iter().any(|&i| i as usize >= self.vocab.n_items) {
                return Err(Error::Data(format!("sampling table entry for category {c} is out of vocabulary")));
            }
        }
        Ok(())
    }

    fn check_sequence(&self, s: &BehaviorSequence) -> std::result::Result<(), String> {
        if s.len() > self.vocab.max_seq_len {
            return Err(format!("behavior length {} exceeds {}", s.len(), self.vocab.max_seq_len));
        }
        for b in s.events() {
            if b.item as usize >= self.vocab.n_items || b.category as usize >= self.vocab.n_categories {
                return Err(format!("behavior event {}:{} out of vocabulary", b.item, b.category));
            }
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example) -> std::result::Result<(), String> {
        let v = &self.vocab;
        if ex.target_item as usize >= v.n_items || ex.target_category as usize >= v.n_categories {
            return Err(format!("target {}:{} out of vocabulary", ex.target_item, ex.target_category));
        }
        check_features("user", &ex.user_features, &v.user_feature_cards)?;
        check_features("context", &ex.context_features, &v.context_feature_cards)?;
        self.check_sequence(&ex.behavior)
    }
}

fn check_features(kind: &str, values: &[u32], cards: &[usize]) -> std::result::Result<(), String> {
    if values.len() != cards.len() {
        return Err(format!("{} {kind} features, expected {}", values.len(), cards.len()));
    }
    for (i, (&v, &card)) in values.iter().zip(cards).enumerate() {
        if v as usize >= card {
            return Err(format!("{kind} feature {i} value {v} ≥ cardinality {card}"));
        }
    }
    Ok(())
}

/// Category → items observed in the training set (targets and behaviors).
pub fn build_category_item_table(train: &[Example]) -> Result<CategoryItemTable> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let pairs = train.iter().flat_map(|ex| {
        std::iter::once((ex.target_item, ex.target_category)).chain(ex.behavior.events().iter().map(|b| (b.item, b.category)))
    });
    CategoryItemTable::from_pairs(pairs)
}

/// One record per distinct training user holding that user's longest
/// history (ties go to the later day). Sorted by user id.
pub fn build_pretrain_set(train: &[Example]) -> Result<Vec<PretrainRecord>> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut best: BTreeMap<u32, &Example> = BTreeMap::new();
    for ex in train {
        let replace = match best.get(&ex.user_id) {
            None => true,
            Some(cur) => (ex.behavior.len(), ex.day) > (cur.behavior.len(), cur.day),
        };
        if replace {
            best.insert(ex.user_id, ex);
        }
    }
    Ok(best
        .into_values()
        .map(|ex| PretrainRecord { user_id: ex.user_id, user_features: ex.user_features.clone(), behavior: ex.behavior.clone() })
        .collect())
}
