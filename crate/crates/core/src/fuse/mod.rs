//! Second stage: parameter sharing (PS), model inheritance (MI), end-to-end
//! CTR training of the integrated model and the ablation matrix runner.

mod ablation;
mod train;

pub use ablation::{
    render_table, run_ablation, write_tsv, AblationCell, AblationResult, AblationSpec, AblationSummary, PretrainRun,
    TSV_HEADER,
};
pub use train::{evaluate, predict, train_integrated, EvalMetrics, TrainConfig, TrainReport};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneKind, TargetAttention};
use crate::checkpoint::Checkpoint;
use crate::data::Example;
use crate::embed::{
    context_table_name, user_table_name, EmbeddingTable, VocabSpec, CATEGORY_TABLE, ITEM_TABLE, POSITION_TABLE,
};
use crate::error::{Error, Result};
use crate::gendec::{Decoder, DecoderConfig, DecoderMode};
use crate::pretrain::{PretrainMode, PretrainedModel};

pub const BACKBONE_PREFIX: &str = "bb";
pub const TA_PREFIX: &str = "ta";

/// Which stage-1 artifacts a CTR model uses and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub ps: bool,
    pub mi: bool,
    /// A decoder is attached and its output `g(s, c)` feeds the backbone.
    pub decoder_attached: bool,
    pub pretrain_mode: Option<PretrainMode>,
    pub backbone: BackboneKind,
    /// Keep transferred parameters fixed during CTR training.
    pub freeze_transferred: bool,
}

/// Number of configurations in the ablation matrix.
pub const TABLE_ROWS: usize = 8;

impl IntegrationConfig {
    pub fn backbone_only(backbone: BackboneKind) -> Self {
        Self { ps: false, mi: false, decoder_attached: false, pretrain_mode: None, backbone, freeze_transferred: false }
    }

    /// Row `1..=8` of the ablation matrix.
    pub fn table_row(row: usize, backbone: BackboneKind) -> Result<Self> {
        let base = Self::backbone_only(backbone);
        let cfg = match row {
            1 => base,
            2 => Self { ps: true, pretrain_mode: Some(PretrainMode::CsCd), ..base },
            3 => Self { decoder_attached: true, ..base },
            4 => Self { ps: true, decoder_attached: true, pretrain_mode: Some(PretrainMode::CsCd), ..base },
            5..=8 => {
                let mode = [PretrainMode::CsCd, PretrainMode::CsSd, PretrainMode::RsCd, PretrainMode::RsSd][row - 5];
                Self { ps: true, mi: true, decoder_attached: true, pretrain_mode: Some(mode), ..base }
            }
            _ => return Err(Error::Config(format!("ablation rows are 1..={TABLE_ROWS}, got {row}"))),
        };
        Ok(cfg)
    }

    pub fn row_label(row: usize) -> &'static str {
        match row {
            1 => "Backbone",
            2 => "PS (CS+CD)",
            3 => "+decoder",
            4 => "+decoder, PS (CS+CD)",
            5 => "PS+MI (CS+CD)",
            6 => "PS+MI (CS+SD)",
            7 => "PS+MI (RS+CD)",
            8 => "PS+MI (RS+SD)",
            _ => "?",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mi && !self.decoder_attached {
            return Err(Error::Config("model inheritance requires an attached decoder".into()));
        }
        if (self.ps || self.mi) && self.pretrain_mode.is_none() {
            return Err(Error::Config("parameter sharing and model inheritance need a pre-training mode".into()));
        }
        Ok(())
    }

    pub fn needs_pretrained(&self) -> bool {
        self.ps || self.mi
    }

    /// Mode of the attached decoder: the pre-training mode's, or conditional
    /// for a fresh decoder without one.
    pub fn decoder_mode(&self) -> DecoderMode {
        self.pretrain_mode.map_or(DecoderMode::Conditional, PretrainMode::decoder_mode)
    }
}

impl fmt::Display for IntegrationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = vec![self.backbone.to_string()];
        if self.decoder_attached && !self.mi {
            parts.push("+decoder".into());
        }
        match (self.ps, self.mi) {
            (true, true) => parts.push("PS+MI".into()),
            (true, false) => parts.push("PS".into()),
            (false, true) => parts.push("MI".into()),
            (false, false) => {}
        }
        if let Some(m) = self.pretrain_mode {
            parts.push(format!("({})", m.as_str().to_uppercase()));
        }
        if self.freeze_transferred {
            parts.push("frozen".into());
        }
        f.write_str(&parts.join(" "))
    }
}

/// Architecture hyper-parameters shared by every configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Decoder shape; `model_dim` is also the width of every embedding slot.
    pub decoder: DecoderConfig,
    pub hidden: Vec<usize>,
    pub n_experts: usize,
    pub cross_depth: usize,
    pub cross_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let bb = BackboneConfig::new(BackboneKind::Dnn);
        Self {
            decoder: DecoderConfig::default(),
            hidden: bb.hidden,
            n_experts: bb.n_experts,
            cross_depth: bb.cross_depth,
            cross_rank: bb.cross_rank,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self, kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            kind,
            hidden: self.hidden.clone(),
            n_experts: self.n_experts,
            cross_depth: self.cross_depth,
            cross_rank: self.cross_rank,
        }
    }

    pub fn dim(&self) -> usize {
        self.decoder.model_dim
    }
}

/// A CTR model: embedding tables, optional decoder and target attention, and
/// a backbone, all in one parameter store.
#[derive(Clone, Debug)]
pub struct CtrModel {
    integration: IntegrationConfig,
    model: ModelConfig,
    vocab: VocabSpec,
    store: ParamStore,
    item: EmbeddingTable,
    category: EmbeddingTable,
    user: Vec<EmbeddingTable>,
    context: Vec<EmbeddingTable>,
    decoder: Option<Decoder>,
    ta: Option<TargetAttention>,
    backbone: Backbone,
}

impl CtrModel {
    /// Fresh weights drawn from `seed`. No transfer is applied.
    pub fn new(integration: IntegrationConfig, model: ModelConfig, vocab: &VocabSpec, seed: u64) -> Result<Self> {
        integration.validate()?;
        vocab.validate()?;
        model.decoder.validate()?;
        let d = model.dim();
        // one stream per component, so configurations sharing a seed also
        // share the initial weights of the parts they have in common
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let mut rng = stream(0);
        let mut store = ParamStore::new();
        let item = EmbeddingTable::register(&mut store, ITEM_TABLE, vocab.n_items, d, &mut rng)?;
        let category = EmbeddingTable::register(&mut store, CATEGORY_TABLE, vocab.n_categories, d, &mut rng)?;
        let user = (0..vocab.user_feature_cards.len())
            .map(|i| EmbeddingTable::register(&mut store, &user_table_name(i), vocab.user_feature_cards[i], d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let context = (0..vocab.context_feature_cards.len())
            .map(|i| {
                EmbeddingTable::register(&mut store, &context_table_name(i), vocab.context_feature_cards[i], d, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = if integration.decoder_attached {
            let mut rng = stream(1);
            let pos = EmbeddingTable::register(&mut store, POSITION_TABLE, vocab.max_seq_len, d, &mut rng)?;
            Some(Decoder::register(
                &mut store,
                model.decoder.clone(),
                integration.decoder_mode(),
                item.clone(),
                category.clone(),
                pos,
                &mut rng,
            )?)
        } else {
            None
        };
        let ta = if integration.backbone.uses_target_attention() {
            Some(TargetAttention::register(&mut store, TA_PREFIX, d, &mut stream(2))?)
        } else {
            None
        };
        let layout = Self::layout_for(&integration, vocab);
        let extra = if integration.decoder_attached { d } else { 0 };
        let backbone = Backbone::register(
            &mut store,
            BACKBONE_PREFIX,
            model.backbone(integration.backbone),
            layout.clone(),
            layout.len() * d,
            extra,
            &mut stream(3),
        )?;
        Ok(Self { integration, model, vocab: vocab.clone(), store, item, category, user, context, decoder, ta, backbone })
    }

    /// Fresh model with PS and MI applied from `pretrained` as configured.
    pub fn build(
        integration: IntegrationConfig,
        model: ModelConfig,
        vocab: &VocabSpec,
        pretrained: Option<&PretrainedModel>,
        seed: u64,
    ) -> Result<Self> {
        let mut m = Self::new(integration, model, vocab, seed)?;
        if integration.needs_pretrained() {
            let pre = pretrained.ok_or_else(|| {
                Error::Config(format!("configuration `{integration}` needs a pre-trained checkpoint"))
            })?;
            if integration.ps {
                m.apply_parameter_sharing(pre)?;
            }
            if integration.mi {
                m.apply_model_inheritance(pre)?;
            }
        }
        Ok(m)
    }

    /// Slot names of the feature vector `x0`, in order. The decoder output,
    /// when attached, is a late slot `g` outside `x0`.
    fn layout_for(integration: &IntegrationConfig, vocab: &VocabSpec) -> Vec<String> {
        let mut slots: Vec<String> = (0..vocab.user_feature_cards.len()).map(user_table_name).collect();
        slots.push(ITEM_TABLE.into());
        slots.push(CATEGORY_TABLE.into());
        slots.extend((0..vocab.context_feature_cards.len()).map(context_table_name));
        if integration.backbone.uses_target_attention() {
            slots.push(TA_PREFIX.into());
        }
        slots
    }

    pub fn layout(&self) -> &[String] {
        self.backbone.layout()
    }

    pub fn integration(&self) -> &IntegrationConfig {
        &self.integration
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn item_table(&self) -> &EmbeddingTable {
        &self.item
    }

    pub fn category_table(&self) -> &EmbeddingTable {
        &self.category
    }

    fn check_transfer(&self, pre: &PretrainedModel) -> Result<()> {
        if let Some(diff) = self.vocab.shared_mismatch(&pre.vocab) {
            return Err(Error::VocabMismatch(diff));
        }
        if pre.decoder_config.model_dim != self.model.dim() {
            return Err(Error::Config(format!(
                "pre-trained embedding width {} differs from the model's {}",
                pre.decoder_config.model_dim,
                self.model.dim()
            )));
        }
        Ok(())
    }

    fn copy_from(&mut self, pre: &PretrainedModel, names: &[String]) -> Result<()> {
        for name in names {
            let src = pre
                .store
                .by_name(name)
                .ok_or_else(|| Error::Config(format!("pre-trained checkpoint lacks `{name}`")))?;
            let id = self.store.id(name).ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))?;
            self.store.assign(id, src)?;
            if self.integration.freeze_transferred {
                self.store.set_trainable(id, false);
            }
        }
        Ok(())
    }

    /// PS: copies the pre-trained item and category tables into this model.
    pub fn apply_parameter_sharing(&mut self, pre: &PretrainedModel) -> Result<()> {
        self.check_transfer(pre)?;
        self.copy_from(pre, &[ITEM_TABLE.to_string(), CATEGORY_TABLE.to_string()])
    }

    /// MI: copies the pre-trained decoder (position table, begin token and
    /// layers) into the attached decoder.
    pub fn apply_model_inheritance(&mut self, pre: &PretrainedModel) -> Result<()> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model inheritance requires an attached decoder".into()))?;
        self.check_transfer(pre)?;
        let ours = &self.model.decoder;
        let theirs = &pre.decoder_config;
        if ours != theirs {
            return Err(Error::Config(format!(
                "decoder shape mismatch: model has layers={} heads={} dim={} ffn={}, checkpoint has layers={} heads={} dim={} ffn={}",
                ours.n_layers, ours.n_heads, ours.model_dim, ours.ffn_dim,
                theirs.n_layers, theirs.n_heads, theirs.model_dim, theirs.ffn_dim
            )));
        }
        if pre.mode.decoder_mode() != decoder.mode() {
            return Err(Error::Config(format!(
                "checkpoint decoder was trained as {:?}, model expects {:?}",
                pre.mode.decoder_mode(),
                decoder.mode()
            )));
        }
        let names: Vec<String> = decoder.owned_params().iter().map(|&id| self.store.name(id).to_string()).collect();
        self.copy_from(pre, &names)
    }

    /// Logits `B × 1` for a batch. With `zero_generative_slot` the decoder
    /// output slot is replaced by zeros.
    pub fn forward(&self, g: &mut Graph, batch: &[&Example], zero_generative_slot: bool) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("ctr forward"));
        }
        let x0 = self.feature_vector(g, batch)?;
        let extra = match &self.decoder {
            None => None,
            Some(_) if zero_generative_slot => Some(g.input(Tensor::zeros(&[batch.len(), self.model.dim()]))),
            Some(dec) => {
                let pairs: Vec<_> = batch.iter().map(|ex| (&ex.behavior, ex.target_category)).collect();
                Some(dec.predict_next(g, &pairs)?)
            }
        };
        self.backbone.forward(g, x0, extra)
    }

    fn feature_vector(&self, g: &mut Graph, batch: &[&Example]) -> Result<Var> {
        let mut slots = Vec::with_capacity(self.layout().len());
        for (i, table) in self.user.iter().enumerate() {
            let ids = feature_ids(batch, "user", i, |ex| &ex.user_features)?;
            slots.push(table.lookup_many(g, &ids)?);
        }
        let items: Vec<_> = batch.iter().map(|ex| Some(ex.target_item as usize)).collect();
        let cats: Vec<_> = batch.iter().map(|ex| Some(ex.target_category as usize)).collect();
        let item = self.item.lookup_many(g, &items)?;
        let cat = self.category.lookup_many(g, &cats)?;
        slots.extend([item, cat]);
        for (i, table) in self.context.iter().enumerate() {
            let ids = feature_ids(batch, "context", i, |ex| &ex.context_features)?;
            slots.push(table.lookup_many(g, &ids)?);
        }
        if let Some(ta) = &self.ta {
            let target = g.add(item, cat)?;
            let mut tok_items = Vec::new();
            let mut tok_cats = Vec::new();
            let mut ranges = Vec::with_capacity(batch.len());
            for ex in batch {
                let start = tok_items.len();
                for b in ex.behavior.last_n(self.vocab.max_seq_len) {
                    tok_items.push(Some(b.item as usize));
                    tok_cats.push(Some(b.category as usize));
                }
                ranges.push((start, tok_items.len()));
            }
            let pooled = if tok_items.is_empty() {
                g.input(Tensor::zeros(&[batch.len(), self.model.dim()]))
            } else {
                let ti = self.item.lookup_many(g, &tok_items)?;
                let tc = self.category.lookup_many(g, &tok_cats)?;
                let tokens = g.add(ti, tc)?;
                ta.forward(g, target, tokens, &ranges)?
            };
            slots.push(pooled);
        }
        g.concat(&slots)
    }

    /// The same model without the decoder slot: decoder and its late-slot
    /// weights are dropped, every other weight is copied unchanged.
    pub fn without_generative_slot(&self) -> Result<Self> {
        let integration =
            IntegrationConfig { decoder_attached: false, mi: false, ..self.integration };
        let mut reduced = Self::new(integration, self.model.clone(), &self.vocab, 0)?;
        let ids: Vec<ParamId> = reduced.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = reduced.store.name(id).to_string();
            let src = self
                .store
                .by_name(&name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from source model")))?;
            let want = reduced.store.get(id).shape().to_vec();
            let value = if src.shape() == want.as_slice() {
                src.clone()
            } else {
                // the late slot occupies the trailing input rows of this matrix
                let (rows, cols) = (want[0], want[1]);
                Tensor::matrix(rows, cols, src.data()[..rows * cols].to_vec())?
            };
            reduced.store.assign(id, &value)?;
            let trainable = self.store.id(&name).is_some_and(|sid| self.store.is_trainable(sid));
            reduced.store.set_trainable(id, trainable);
        }
        Ok(reduced)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "ctr".to_string());
        meta.insert("integration".to_string(), to_json(&self.integration)?);
        meta.insert("model".to_string(), to_json(&self.model)?);
        meta.insert("vocab".to_string(), to_json(&self.vocab)?);
        meta.insert("layout".to_string(), self.layout().join(","));
        Ok(Checkpoint { meta, params: self.store.clone() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.meta.get(k).ok_or_else(|| Error::Config(format!("checkpoint meta lacks `{k}`")))
        };
        if get("kind")? != "ctr" {
            return Err(Error::Config(format!("checkpoint kind `{}` is not a CTR model", get("kind")?)));
        }
        let parse_err = |k: &str, e: serde_json::Error| Error::Config(format!("checkpoint meta `{k}`: {e}"));
        let integration: IntegrationConfig =
            serde_json::from_str(get("integration")?).map_err(|e| parse_err("integration", e))?;
        let model: ModelConfig = serde_json::from_str(get("model")?).map_err(|e| parse_err("model", e))?;
        let vocab: VocabSpec = serde_json::from_str(get("vocab")?).map_err(|e| parse_err("vocab", e))?;
        let mut m = Self::new(integration, model, &vocab, 0)?;
        if m.layout().join(",") != *get("layout")? {
            return Err(Error::Config(format!(
                "checkpoint layout `{}` differs from the rebuilt layout `{}`",
                get("layout")?,
                m.layout().join(",")
            )));
        }
        if m.store.len() != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                m.store.len()
            )));
        }
        for (_, p) in ckpt.params.iter() {
            let id = m.store.id(&p.name).ok_or_else(|| Error::Config(format!("unexpected parameter `{}`", p.name)))?;
            m.store.assign(id, &p.value)?;
            m.store.set_trainable(id, p.trainable);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Config(format!("serializing checkpoint meta: {e}")))
}

fn feature_ids<'a>(
    batch: &[&'a Example],
    kind: &str,
    i: usize,
    field: impl Fn(&'a Example) -> &'a Vec<u32>,
) -> Result<Vec<Option<usize>>> {
    batch
        .iter()
        .map(|ex| {
            field(ex)
                .get(i)
                .map(|&v| Some(v as usize))
                .ok_or_else(|| Error::Data(format!("example lacks {kind} feature {i}")))
        })
        .collect()
}

#[cfg(test)]
mod tests;
