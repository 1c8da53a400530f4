//! Stage-1 pre-training: next-item prediction at every position of a behavior
//! sequence, scored against sampled negatives with a softmax cross-entropy.

mod sampling;

pub use sampling::{sample_negatives_cs, sample_negatives_rs, CategoryItemTable, NegativeSampler, SamplingStrategy};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::embed::{EmbeddingTable, VocabSpec, CATEGORY_TABLE, ITEM_TABLE, POSITION_TABLE};
use crate::error::{Error, Result};
use crate::gendec::{BehaviorSequence, Decoder, DecoderConfig, DecoderMode};

/// Sampling strategy × decoder mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PretrainMode {
    CsCd,
    CsSd,
    RsCd,
    RsSd,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 4] = [Self::CsCd, Self::CsSd, Self::RsCd, Self::RsSd];

    pub fn sampling(self) -> SamplingStrategy {
        match self {
            Self::CsCd | Self::CsSd => SamplingStrategy::Conditional,
            Self::RsCd | Self::RsSd => SamplingStrategy::Random,
        }
    }

    pub fn decoder_mode(self) -> DecoderMode {
        match self {
            Self::CsCd | Self::RsCd => DecoderMode::Conditional,
            Self::CsSd | Self::RsSd => DecoderMode::Unconditional,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CsCd => "cs+cd",
            Self::CsSd => "cs+sd",
            Self::RsCd => "rs+cd",
            Self::RsSd => "rs+sd",
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown pretrain mode `{s}` (expected cs+cd, cs+sd, rs+cd or rs+sd)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub decoder: DecoderConfig,
    pub negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::CsCd,
            decoder: DecoderConfig::default(),
            negatives: 10,
            batch_size: 32,
            epochs: 3,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.negatives == 0 || self.batch_size == 0 {
            return Err(Error::Config("negatives and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// One line of the pre-training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub cs_fallback_count: u64,
}

/// Decoder weights plus the item, category and position tables they were
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedModel {
    pub mode: PretrainMode,
    pub vocab: VocabSpec,
    pub decoder_config: DecoderConfig,
    pub store: ParamStore,
}

impl PretrainedModel {
    /// Fresh, untrained weights.
    pub fn init(mode: PretrainMode, vocab: &VocabSpec, decoder_config: DecoderConfig, seed: u64) -> Result<Self> {
        let vocab = VocabSpec { user_feature_cards: vec![], context_feature_cards: vec![], ..vocab.clone() };
        vocab.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = decoder_config.model_dim;
        let item = EmbeddingTable::register(&mut store, ITEM_TABLE, vocab.n_items, d, &mut rng)?;
        let cat = EmbeddingTable::register(&mut store, CATEGORY_TABLE, vocab.n_categories, d, &mut rng)?;
        let pos = EmbeddingTable::register(&mut store, POSITION_TABLE, vocab.max_seq_len, d, &mut rng)?;
        Decoder::register(&mut store, decoder_config.clone(), mode.decoder_mode(), item, cat, pos, &mut rng)?;
        Ok(Self { mode, vocab, decoder_config, store })
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Decoder::attach(
            &self.store,
            self.decoder_config.clone(),
            self.mode.decoder_mode(),
            EmbeddingTable::attach(&self.store, ITEM_TABLE)?,
            EmbeddingTable::attach(&self.store, CATEGORY_TABLE)?,
            EmbeddingTable::attach(&self.store, POSITION_TABLE)?,
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint { params: self.store.clone(), ..Default::default() };
        let meta = [
            ("kind", "pretrained".to_string()),
            ("mode", self.mode.to_string()),
            ("n_items", self.vocab.n_items.to_string()),
            ("n_categories", self.vocab.n_categories.to_string()),
            ("max_seq_len", self.vocab.max_seq_len.to_string()),
            ("n_layers", self.decoder_config.n_layers.to_string()),
            ("n_heads", self.decoder_config.n_heads.to_string()),
            ("model_dim", self.decoder_config.model_dim.to_string()),
            ("ffn_dim", self.decoder_config.ffn_dim.to_string()),
        ];
        for (k, v) in meta {
            ckpt.meta.insert(k.into(), v);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            ckpt.meta.get(k).map(String::as_str).ok_or_else(|| Error::Config(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Config(format!("checkpoint field `{k}`: {e}")))
        };
        if get("kind")? != "pretrained" {
            return Err(Error::Config(format!("checkpoint kind `{}` is not a pre-trained model", get("kind")?)));
        }
        let model = Self {
            mode: get("mode")?.parse()?,
            vocab: VocabSpec {
                n_items: num("n_items")?,
                n_categories: num("n_categories")?,
                user_feature_cards: vec![],
                context_feature_cards: vec![],
                max_seq_len: num("max_seq_len")?,
            },
            decoder_config: DecoderConfig {
                n_layers: num("n_layers")?,
                n_heads: num("n_heads")?,
                model_dim: num("model_dim")?,
                ffn_dim: num("ffn_dim")?,
            },
            store: ckpt.params.clone(),
        };
        model.decoder()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sampled-softmax loss for a batch of predictions.
///
/// Row `p` of `h` is scored against `[true_items[p], negatives[p]...]` using
/// the item table; the loss is `Σ_p weights[p] · CE(logits_p, 0)`.
pub fn position_loss(
    g: &mut Graph,
    h: Var,
    items: &EmbeddingTable,
    true_items: &[u32],
    negatives: &[Vec<u32>],
    weights: &[f64],
) -> Result<Var> {
    let p = true_items.len();
    if negatives.len() != p || weights.len() != p {
        return Err(Error::shape("position_loss", format!("{p} targets, {} negative lists", negatives.len())));
    }
    let k = negatives.first().map_or(0, Vec::len);
    if k == 0 || negatives.iter().any(|n| n.len() != k) {
        return Err(Error::Config("every position needs the same positive number of negatives".into()));
    }
    let mut ids = Vec::with_capacity(p * (k + 1));
    for (t, neg) in true_items.iter().zip(negatives) {
        ids.push(Some(*t as usize));
        ids.extend(neg.iter().map(|&n| Some(n as usize)));
    }
    let e = items.lookup_many(g, &ids)?;
    let logits = g.row_dots(h, e, k + 1)?;
    g.cross_entropy(logits, &vec![0; p], weights)
}

/// Negatives for every position of every sequence, in decode order.
pub fn sample_batch_negatives(
    seqs: &[&BehaviorSequence],
    sampler: &mut NegativeSampler,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for s in seqs {
        for ev in s.events() {
            out.push(sampler.sample(ev.category, ev.item, rng)?);
        }
    }
    Ok(out)
}

/// Mean over non-empty sequences of each sequence's mean position loss.
/// Returns `None` when every sequence is empty.
pub fn batch_loss(
    g: &mut Graph,
    decoder: &Decoder,
    seqs: &[&BehaviorSequence],
    negatives: &[Vec<u32>],
) -> Result<Option<Var>> {
    let nonempty = seqs.iter().filter(|s| !s.is_empty()).count();
    if nonempty == 0 {
        return Ok(None);
    }
    let mut true_items = Vec::new();
    let mut weights = Vec::new();
    for s in seqs {
        let w = 1.0 / (s.len() * nonempty) as f64;
        for ev in s.events() {
            true_items.push(ev.item);
            weights.push(w);
        }
    }
    let h = decoder.decode(g, seqs)?;
    position_loss(g, h, decoder.item_table(), &true_items, negatives, &weights).map(Some)
}

/// Keeps at most the last `max_len` events.
fn clip(seq: &BehaviorSequence, max_len: usize) -> BehaviorSequence {
    BehaviorSequence(seq.last_n(max_len).to_vec())
}

pub struct PretrainOutput {
    pub model: PretrainedModel,
    pub log: Vec<EpochLog>,
}

pub fn pretrain(
    corpus: &[BehaviorSequence],
    table: &CategoryItemTable,
    vocab: &VocabSpec,
    config: &PretrainConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    let corpus: Vec<BehaviorSequence> =
        corpus.iter().filter(|s| !s.is_empty()).map(|s| clip(s, vocab.max_seq_len)).collect();
    if corpus.is_empty() {
        return Err(Error::Empty("pretrain corpus"));
    }
    let mut model = PretrainedModel::init(config.mode, vocab, config.decoder.clone(), config.seed)?;
    let decoder = model.decoder()?;
    let mut sampler = NegativeSampler::new(config.mode.sampling(), table, config.negatives)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        sampler.reset_fallbacks();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&BehaviorSequence> = chunk.iter().map(|&i| &corpus[i]).collect();
            let negatives = sample_batch_negatives(&seqs, &mut sampler, &mut rng)?;
            let grads = {
                let mut g = Graph::new(&model.store);
                let loss = batch_loss(&mut g, &decoder, &seqs, &negatives)?.expect("corpus has no empty sequences");
                loss_sum += g.value(loss).item() * seqs.len() as f64;
                g.backward(loss)?
            };
            adam.step(&mut model.store, &grads)?;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / corpus.len() as f64,
            cs_fallback_count: sampler.fallbacks(),
        });
    }
    Ok(PretrainOutput { model, log })
}

/// Mean per-sequence loss of `model` on `corpus` with freshly sampled negatives.
pub fn evaluate_loss(
    model: &PretrainedModel,
    corpus: &[BehaviorSequence],
    table: &CategoryItemTable,
    negatives: usize,
    seed: u64,
) -> Result<f64> {
    let decoder = model.decoder()?;
    let mut sampler = NegativeSampler::new(model.mode.sampling(), table, negatives)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<BehaviorSequence> =
        corpus.iter().filter(|s| !s.is_empty()).map(|s| clip(s, model.vocab.max_seq_len)).collect();
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let mut total = 0.0;
    for chunk in seqs.chunks(64) {
        let refs: Vec<&BehaviorSequence> = chunk.iter().collect();
        let neg = sample_batch_negatives(&refs, &mut sampler, &mut rng)?;
        let mut g = Graph::new(&model.store);
        let loss = batch_loss(&mut g, &decoder, &refs, &neg)?.expect("non-empty chunk");
        total += g.value(loss).item() * refs.len() as f64;
    }
    Ok(total / seqs.len() as f64)
}
