//! Embedding tables for items, categories, positions and user/context features.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 16;
pub const MAX_SEQ_LEN: usize = 200;

pub const ITEM_TABLE: &str = "emb.item";
pub const CATEGORY_TABLE: &str = "emb.category";
pub const POSITION_TABLE: &str = "emb.position";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_items: usize,
    pub n_categories: usize,
    pub user_feature_cards: Vec<usize>,
    pub context_feature_cards: Vec<usize>,
    pub max_seq_len: usize,
}

impl VocabSpec {
    pub fn validate(&self) -> Result<()> {
        let cards = [self.n_items, self.n_categories, self.max_seq_len];
        if cards.contains(&0)
            || self.user_feature_cards.contains(&0)
            || self.context_feature_cards.contains(&0)
        {
            return Err(Error::Config(format!("every cardinality must be at least 1: {self:?}")));
        }
        Ok(())
    }

    /// Describes how `other` differs in the item/category cardinalities.
    pub fn shared_mismatch(&self, other: &VocabSpec) -> Option<String> {
        let mut diffs = Vec::new();
        if self.n_items != other.n_items {
            diffs.push(format!("n_items {} vs {}", self.n_items, other.n_items));
        }
        if self.n_categories != other.n_categories {
            diffs.push(format!("n_categories {} vs {}", self.n_categories, other.n_categories));
        }
        if self.max_seq_len != other.max_seq_len {
            diffs.push(format!("max_seq_len {} vs {}", self.max_seq_len, other.max_seq_len));
        }
        (!diffs.is_empty()).then(|| diffs.join(", "))
    }
}

/// Handle to an embedding matrix living in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    name: String,
    id: ParamId,
    rows: usize,
    dim: usize,
}

impl EmbeddingTable {
    /// Registers a `rows × dim` table with entries drawn from `N(0, 1/dim)`.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Config(format!("table `{name}` needs rows ≥ 1 and dim ≥ 1")));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive scale");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        let id = store.add(name, Tensor::matrix(rows, dim, data)?)?;
        Ok(Self { name: name.to_string(), id, rows, dim })
    }

    /// Binds to a table already present in `store`.
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let id = store.id(name).ok_or_else(|| Error::Config(format!("missing table `{name}`")))?;
        let t = store.get(id);
        if t.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("`{name}` has shape {:?}", t.shape())));
        }
        Ok(Self { name: name.to_string(), id, rows: t.rows(), dim: t.cols() })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One row as a `1 × dim` node.
    pub fn lookup(&self, g: &mut Graph, id: usize) -> Result<Var> {
        self.lookup_many(g, &[Some(id)])
    }

    /// Rows for a batch of ids; `None` yields a zero row.
    pub fn lookup_many(&self, g: &mut Graph, ids: &[Option<usize>]) -> Result<Var> {
        if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= self.rows) {
            return Err(Error::Index { table: self.name.clone(), id: bad, rows: self.rows });
        }
        let table = g.param(self.id);
        g.gather(table, ids)
    }
}

/// All tables a CTR model can use.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub item: EmbeddingTable,
    pub category: EmbeddingTable,
    pub position: EmbeddingTable,
    pub user: Vec<EmbeddingTable>,
    pub context: Vec<EmbeddingTable>,
}

pub fn user_table_name(i: usize) -> String {
    format!("emb.user.{i}")
}

pub fn context_table_name(i: usize) -> String {
    format!("emb.context.{i}")
}

/// Creates every table described by `spec` in a fixed order, so the same
/// seed always yields bit-identical tables.
pub fn init_tables(store: &mut ParamStore, spec: &VocabSpec, dim: usize, rng: &mut impl Rng) -> Result<EmbeddingSet> {
    spec.validate()?;
    let item = EmbeddingTable::register(store, ITEM_TABLE, spec.n_items, dim, rng)?;
    let category = EmbeddingTable::register(store, CATEGORY_TABLE, spec.n_categories, dim, rng)?;
    let position = EmbeddingTable::register(store, POSITION_TABLE, spec.max_seq_len, dim, rng)?;
    let user = spec
        .user_feature_cards
        .iter()
        .enumerate()
        .map(|(i, &card)| EmbeddingTable::register(store, &user_table_name(i), card, dim, rng))
        .collect::<Result<_>>()?;
    let context = spec
        .context_feature_cards
        .iter()
        .enumerate()
        .map(|(i, &card)| EmbeddingTable::register(store, &context_table_name(i), card, dim, rng))
        .collect::<Result<_>>()?;
    Ok(EmbeddingSet { item, category, position, user, context })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> VocabSpec {
        VocabSpec {
            n_items: 30,
            n_categories: 5,
            user_feature_cards: vec![4, 7],
            context_feature_cards: vec![24],
            max_seq_len: MAX_SEQ_LEN,
        }
    }

    #[test]
    fn same_seed_gives_identical_tables() {
        let build = || {
            let mut store = ParamStore::new();
            init_tables(&mut store, &spec(), DEFAULT_DIM, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            store
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn widths_and_position_rows() {
        let mut store = ParamStore::new();
        let set = init_tables(&mut store, &spec(), DEFAULT_DIM, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in [&set.item, &set.category, &set.position].into_iter().chain(&set.user).chain(&set.context) {
            assert_eq!(t.dim(), 16);
        }
        assert_eq!(set.position.rows(), 200);
        assert_eq!(set.user[1].rows(), 7);
    }

    #[test]
    fn init_scale_is_inverse_sqrt_dim() {
        let mut store = ParamStore::new();
        let t = EmbeddingTable::register(&mut store, "big", 4000, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let data = store.get(t.id()).data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var.sqrt() - 0.25).abs() < 0.01);
    }

    #[test]
    fn lookup_gradients() {
        let mut store = ParamStore::new();
        let t = EmbeddingTable::register(&mut store, "emb.item", 5, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new(&store);
        let row = t.lookup(&mut g, 2).unwrap();
        assert_eq!(g.value(row).data(), store.get(t.id()).row(2));
        let loss = g.sum(row);
        let grads = g.backward(loss).unwrap();
        let gt = grads.param(t.id()).unwrap();
        for r in 0..5 {
            let expect = if r == 2 { 1.0 } else { 0.0 };
            assert!(gt.row(r).iter().all(|&v| v == expect));
        }

        let mut g = Graph::new(&store);
        let a = t.lookup(&mut g, 4).unwrap();
        let b = t.lookup(&mut g, 4).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(t.id()).unwrap().row(4), &[2.0; 3]);
    }

    #[test]
    fn lookup_out_of_range_names_table() {
        let mut store = ParamStore::new();
        let t = EmbeddingTable::register(&mut store, "emb.category", 5, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new(&store);
        let err = t.lookup(&mut g, 5).unwrap_err();
        assert!(err.to_string().contains("emb.category"), "{err}");
    }

    #[test]
    fn zero_cardinality_is_invalid() {
        let mut s = spec();
        s.user_feature_cards[0] = 0;
        assert!(s.validate().is_err());
    }
}
