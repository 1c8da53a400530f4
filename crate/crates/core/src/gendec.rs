//! Generative next-item decoder over behavior sequences.
//!
//! Two attention modes share one set of weights:
//!
//! * [`DecoderMode::Conditional`]: the query for position `t` is built from the
//!   category of item `t` plus its position embedding; keys and values come
//!   from the begin-of-sequence token and items `1..t-1`. The item id at `t`
//!   never enters row `t`.
//! * [`DecoderMode::Unconditional`]: ordinary causal self-attention; the query
//!   for position `t` is token `t-1` (or the begin-of-sequence token for `t = 1`).
//!
//! Tokens are `item + category + position` embeddings. Positions count back
//! from the end of the sequence being predicted, so the item about to be
//! predicted sits at position 0 and the most recent observed item at 1.
//! Each layer is pre-norm: `x + Attn(LN₁ x)` followed by `x + FFN(LN₂ x)`.
//! The attention output projection and the second feed-forward matrix start
//! at zero, so a fresh decoder returns its input stream and initial
//! next-item logits are close to uniform.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Behavior {
    pub item: u32,
    pub category: u32,
}

/// Chronological `(item, category)` interactions, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BehaviorSequence(pub Vec<Behavior>);

impl BehaviorSequence {
    pub fn new(events: Vec<Behavior>) -> Self {
        Self(events)
    }

    pub fn from_pairs(pairs: &[(u32, u32)]) -> Self {
        Self(pairs.iter().map(|&(item, category)| Behavior { item, category }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn events(&self) -> &[Behavior] {
        &self.0
    }

    /// The most recent `n` events.
    pub fn last_n(&self, n: usize) -> &[Behavior] {
        &self.0[self.0.len().saturating_sub(n)..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderMode {
    Conditional,
    Unconditional,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_layers: 1, n_heads: 2, model_dim: 16, ffn_dim: 64 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 || self.model_dim == 0 {
            return Err(Error::Config(format!("decoder sizes must be positive: {self:?}")));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const BOS_PARAM: &str = "dec.bos";

fn layer_param_names(l: usize) -> [String; 12] {
    [
        "ln1.gamma", "ln1.beta", "wq", "wk", "wv", "wo", "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2",
        "ffn.b2",
    ]
    .map(|n| format!("dec.layer{l}.{n}"))
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    mode: DecoderMode,
    item: EmbeddingTable,
    category: EmbeddingTable,
    position: EmbeddingTable,
    bos: ParamId,
    layers: Vec<LayerParams>,
}

/// One row of the context matrix: the begin-of-sequence token or an event.
#[derive(Clone, Copy)]
enum ContextRow {
    Bos,
    Event { item: usize, category: usize, position: usize },
}

impl Decoder {
    /// Registers fresh decoder weights in `store`. The embedding tables must
    /// already live there.
    pub fn register(
        store: &mut ParamStore,
        config: DecoderConfig,
        mode: DecoderMode,
        item: EmbeddingTable,
        category: EmbeddingTable,
        position: EmbeddingTable,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        for t in [&item, &category, &position] {
            if t.dim() != d {
                return Err(Error::Config(format!("table `{}` has width {}, decoder expects {d}", t.name(), t.dim())));
            }
        }
        let mut normal = |rows: usize, cols: usize, fan_in: usize| -> Result<Tensor> {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive scale");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        };
        let bos = store.add(BOS_PARAM, normal(1, d, d)?)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let names = layer_param_names(l);
            let f = config.ffn_dim;
            let tensors = [
                Tensor::filled(&[d], 1.0),
                Tensor::zeros(&[d]),
                normal(d, d, d)?,
                normal(d, d, d)?,
                normal(d, d, d)?,
                Tensor::zeros(&[d, d]),
                Tensor::filled(&[d], 1.0),
                Tensor::zeros(&[d]),
                normal(d, f, d)?,
                Tensor::zeros(&[f]),
                Tensor::zeros(&[f, d]),
                Tensor::zeros(&[d]),
            ];
            let mut ids = Vec::with_capacity(12);
            for (name, t) in names.iter().zip(tensors) {
                ids.push(store.add(name.clone(), t)?);
            }
            layers.push(Self::layer_from_ids(&ids));
        }
        Ok(Self { config, mode, item, category, position, bos, layers })
    }

    /// Binds to decoder weights already present in `store`.
    pub fn attach(
        store: &ParamStore,
        config: DecoderConfig,
        mode: DecoderMode,
        item: EmbeddingTable,
        category: EmbeddingTable,
        position: EmbeddingTable,
    ) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| store.id(name).ok_or_else(|| Error::Config(format!("missing decoder param `{name}`")));
        let bos = find(BOS_PARAM)?;
        let layers = (0..config.n_layers)
            .map(|l| {
                let ids = layer_param_names(l).iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
                Ok(Self::layer_from_ids(&ids))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, mode, item, category, position, bos, layers })
    }

    fn layer_from_ids(ids: &[ParamId]) -> LayerParams {
        LayerParams {
            ln1_gamma: ids[0],
            ln1_beta: ids[1],
            wq: ids[2],
            wk: ids[3],
            wv: ids[4],
            wo: ids[5],
            ln2_gamma: ids[6],
            ln2_beta: ids[7],
            w1: ids[8],
            b1: ids[9],
            w2: ids[10],
            b2: ids[11],
        }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn item_table(&self) -> &EmbeddingTable {
        &self.item
    }

    pub fn category_table(&self) -> &EmbeddingTable {
        &self.category
    }

    pub fn position_table(&self) -> &EmbeddingTable {
        &self.position
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Parameters owned by the decoder itself (not the shared item/category
    /// tables): position table, begin-of-sequence token and layer weights.
    pub fn owned_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.position.id(), self.bos];
        for l in &self.layers {
            ids.extend([
                l.ln1_gamma, l.ln1_beta, l.wq, l.wk, l.wv, l.wo, l.ln2_gamma, l.ln2_beta, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        ids
    }

    /// Longest history usable as context by [`Decoder::predict_next`]
    /// (one position is reserved for the predicted item).
    pub fn max_context(&self) -> usize {
        self.position.rows() - 1
    }

    /// `item + category + position` for a single event.
    pub fn token_repr(&self, g: &mut Graph, item: usize, category: usize, position: usize) -> Result<Var> {
        let rows = [ContextRow::Event { item, category, position }];
        self.context_tokens(g, &rows)
    }

    fn context_tokens(&self, g: &mut Graph, rows: &[ContextRow]) -> Result<Var> {
        let mut items = Vec::with_capacity(rows.len());
        let mut cats = Vec::with_capacity(rows.len());
        let mut pos = Vec::with_capacity(rows.len());
        let mut bos = Vec::with_capacity(rows.len());
        for r in rows {
            match *r {
                ContextRow::Bos => {
                    items.push(None);
                    cats.push(None);
                    pos.push(None);
                    bos.push(Some(0));
                }
                ContextRow::Event { item, category, position } => {
                    items.push(Some(item));
                    cats.push(Some(category));
                    pos.push(Some(position));
                    bos.push(None);
                }
            }
        }
        let e_item = self.item.lookup_many(g, &items)?;
        let e_cat = self.category.lookup_many(g, &cats)?;
        let e_pos = self.position.lookup_many(g, &pos)?;
        let bos_table = g.param(self.bos);
        let e_bos = g.gather(bos_table, &bos)?;
        let s = g.add(e_item, e_cat)?;
        let s = g.add(s, e_pos)?;
        g.add(s, e_bos)
    }

    /// Conditioning query `category + position` per row.
    fn condition_queries(&self, g: &mut Graph, conds: &[(usize, usize)]) -> Result<Var> {
        let cats: Vec<_> = conds.iter().map(|&(c, _)| Some(c)).collect();
        let pos: Vec<_> = conds.iter().map(|&(_, p)| Some(p)).collect();
        let e_cat = self.category.lookup_many(g, &cats)?;
        let e_pos = self.position.lookup_many(g, &pos)?;
        g.add(e_cat, e_pos)
    }

    /// Predictions for every position of every sequence, in the decoder's own mode.
    pub fn decode(&self, g: &mut Graph, seqs: &[&BehaviorSequence]) -> Result<Var> {
        self.decode_with(g, seqs, self.mode)
    }

    /// Rows `ĥ_1..ĥ_L` (stacked over all sequences) with category-conditioned queries.
    pub fn conditional_decode(&self, g: &mut Graph, seqs: &[&BehaviorSequence]) -> Result<Var> {
        self.decode_with(g, seqs, DecoderMode::Conditional)
    }

    /// Rows `ĥ_1..ĥ_L` from plain causal self-attention.
    pub fn unconditional_decode(&self, g: &mut Graph, seqs: &[&BehaviorSequence]) -> Result<Var> {
        self.decode_with(g, seqs, DecoderMode::Unconditional)
    }

    fn decode_with(&self, g: &mut Graph, seqs: &[&BehaviorSequence], mode: DecoderMode) -> Result<Var> {
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Ok(g.input(Tensor::zeros(&[0, self.config.model_dim])));
        }
        let mut rows = Vec::with_capacity(total);
        let mut ranges = Vec::with_capacity(total);
        let mut conds = Vec::with_capacity(total);
        for s in seqs {
            let len = s.len();
            if len > self.position.rows() {
                return Err(Error::Config(format!(
                    "sequence length {len} exceeds {} positions",
                    self.position.rows()
                )));
            }
            let off = rows.len();
            for (t, ev) in s.events().iter().enumerate() {
                // row t holds the context entry preceding event t
                if t == 0 {
                    rows.push(ContextRow::Bos);
                } else {
                    let prev = s.events()[t - 1];
                    rows.push(ContextRow::Event {
                        item: prev.item as usize,
                        category: prev.category as usize,
                        position: len - t,
                    });
                }
                ranges.push((off, off + t + 1));
                conds.push((ev.category as usize, len - 1 - t));
            }
        }
        let ctx = self.context_tokens(g, &rows)?;
        let query = match mode {
            DecoderMode::Conditional => Query::Separate(self.condition_queries(g, &conds)?),
            DecoderMode::Unconditional => Query::Rows((0..total).collect()),
        };
        self.run_layers(g, ctx, &ranges, query, &ranges)
    }

    /// `g(s, c)` for a batch: the next-item embedding given the full history
    /// and the next item's category. Histories longer than
    /// [`Decoder::max_context`] keep only their most recent events.
    pub fn predict_next(&self, g: &mut Graph, batch: &[(&BehaviorSequence, u32)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("predict_next"));
        }
        let mut rows = Vec::new();
        let mut ctx_ranges = Vec::new();
        let mut q_ranges = Vec::with_capacity(batch.len());
        let mut last_rows = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        for (s, c) in batch {
            let events = s.last_n(self.max_context());
            let len = events.len();
            let off = rows.len();
            rows.push(ContextRow::Bos);
            ctx_ranges.push((off, off + 1));
            for (j, ev) in events.iter().enumerate() {
                rows.push(ContextRow::Event {
                    item: ev.item as usize,
                    category: ev.category as usize,
                    position: len - j,
                });
                ctx_ranges.push((off, off + j + 2));
            }
            q_ranges.push((off, off + len + 1));
            last_rows.push(off + len);
            conds.push((*c as usize, 0));
        }
        let ctx = self.context_tokens(g, &rows)?;
        let query = match self.mode {
            DecoderMode::Conditional => Query::Separate(self.condition_queries(g, &conds)?),
            DecoderMode::Unconditional => Query::Rows(last_rows),
        };
        self.run_layers(g, ctx, &ctx_ranges, query, &q_ranges)
    }

    fn run_layers(
        &self,
        g: &mut Graph,
        ctx: Var,
        ctx_ranges: &[(usize, usize)],
        query: Query,
        q_ranges: &[(usize, usize)],
    ) -> Result<Var> {
        let mut tokens = ctx;
        let mut z = match &query {
            Query::Separate(q0) => Some(*q0),
            Query::Rows(_) => None,
        };
        let n = self.layers.len();
        for (l, lp) in self.layers.iter().enumerate() {
            let last = l + 1 == n;
            let ln_t = {
                let (gm, bt) = (g.param(lp.ln1_gamma), g.param(lp.ln1_beta));
                g.layer_norm(tokens, gm, bt)?
            };
            let k = {
                let w = g.param(lp.wk);
                g.matmul(ln_t, w)?
            };
            let v = {
                let w = g.param(lp.wv);
                g.matmul(ln_t, w)?
            };
            match &query {
                Query::Separate(_) => {
                    let zin = z.expect("query stream");
                    let ln_z = {
                        let (gm, bt) = (g.param(lp.ln1_gamma), g.param(lp.ln1_beta));
                        g.layer_norm(zin, gm, bt)?
                    };
                    z = Some(self.block(g, lp, zin, ln_z, k, v, q_ranges)?);
                    if !last {
                        tokens = self.block(g, lp, tokens, ln_t, k, v, ctx_ranges)?;
                    }
                }
                Query::Rows(rows) => {
                    if last {
                        let zin = g.select_rows(tokens, rows)?;
                        let ln_z = g.select_rows(ln_t, rows)?;
                        z = Some(self.block(g, lp, zin, ln_z, k, v, q_ranges)?);
                    } else {
                        tokens = self.block(g, lp, tokens, ln_t, k, v, ctx_ranges)?;
                    }
                }
            }
        }
        Ok(z.expect("at least one layer"))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        lp: &LayerParams,
        x: Var,
        ln_x: Var,
        k: Var,
        v: Var,
        ranges: &[(usize, usize)],
    ) -> Result<Var> {
        let q = {
            let w = g.param(lp.wq);
            g.matmul(ln_x, w)?
        };
        let att = g.attention(q, k, v, self.config.n_heads, ranges)?;
        let proj = {
            let w = g.param(lp.wo);
            g.matmul(att, w)?
        };
        let r = g.add(x, proj)?;
        let ln_r = {
            let (gm, bt) = (g.param(lp.ln2_gamma), g.param(lp.ln2_beta));
            g.layer_norm(r, gm, bt)?
        };
        let h = {
            let (w, b) = (g.param(lp.w1), g.param(lp.b1));
            let m = g.matmul(ln_r, w)?;
            g.add_bias(m, b)?
        };
        let h = g.relu(h);
        let f = {
            let (w, b) = (g.param(lp.w2), g.param(lp.b2));
            let m = g.matmul(h, w)?;
            g.add_bias(m, b)?
        };
        g.add(r, f)
    }
}

enum Query {
    /// Conditioning queries with their own residual stream.
    Separate(Var),
    /// Queries are these rows of the token stream.
    Rows(Vec<usize>),
}
