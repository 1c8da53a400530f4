use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::testutil::check_params;
use crate::data::{generate, GeneratorConfig};
use crate::gendec::BehaviorSequence;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig { n_layers: 1, n_heads: 2, model_dim: 4, ffn_dim: 6 },
        hidden: vec![6, 4],
        n_experts: 2,
        cross_depth: 2,
        cross_rank: 2,
    }
}

fn tiny_vocab() -> VocabSpec {
    VocabSpec { n_items: 12, n_categories: 3, user_feature_cards: vec![2, 3], context_feature_cards: vec![4], max_seq_len: 8 }
}

fn random_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(0..7);
            let behavior = BehaviorSequence::from_pairs(
                &(0..len).map(|_| rng.random_range(0..12u32)).map(|it| (it, it % 3)).collect::<Vec<_>>(),
            );
            let item = rng.random_range(0..12u32);
            Example {
                user_id: i as u32,
                day: 0,
                user_features: vec![rng.random_range(0..2), rng.random_range(0..3)],
                context_features: vec![rng.random_range(0..4)],
                target_item: item,
                target_category: item % 3,
                behavior,
                label: rng.random_bool(0.5),
            }
        })
        .collect()
}

fn pretrained(mode: PretrainMode, seed: u64) -> PretrainedModel {
    PretrainedModel::init(mode, &tiny_vocab(), tiny_model().decoder, seed).unwrap()
}

fn logits(model: &CtrModel, batch: &[Example], zero_slot: bool) -> Vec<f64> {
    let refs: Vec<&Example> = batch.iter().collect();
    let mut g = Graph::new(model.store());
    let z = model.forward(&mut g, &refs, zero_slot).unwrap();
    g.value(z).data().to_vec()
}

/// Random nonzero weights everywhere, so no test passes by a zero head.
fn scramble(model: &mut CtrModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.store_mut();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

#[test]
fn table_rows_map_injectively() {
    let mut seen = HashSet::new();
    for backbone in BackboneKind::ALL {
        for row in 1..=TABLE_ROWS {
            let cfg = IntegrationConfig::table_row(row, backbone).unwrap();
            cfg.validate().unwrap();
            assert!(seen.insert(cfg), "row {row} {backbone} collides");
            assert_eq!(cfg.backbone, backbone);
        }
        let row = |r| IntegrationConfig::table_row(r, backbone).unwrap();
        assert!(!row(1).needs_pretrained() && !row(1).decoder_attached);
        assert!(row(2).ps && !row(2).decoder_attached);
        assert!(row(3).decoder_attached && !row(3).needs_pretrained());
        assert!(row(4).decoder_attached && row(4).ps && !row(4).mi);
        let modes: Vec<_> = (5..=8).map(|r| row(r).pretrain_mode.unwrap()).collect();
        assert_eq!(modes, vec![PretrainMode::CsCd, PretrainMode::CsSd, PretrainMode::RsCd, PretrainMode::RsSd]);
        assert!((5..=8).all(|r| row(r).ps && row(r).mi));
    }
    assert!(IntegrationConfig::table_row(0, BackboneKind::Dnn).is_err());
    assert!(IntegrationConfig::table_row(9, BackboneKind::Dnn).is_err());
}

#[test]
fn config_invariants_are_enforced() {
    let base = IntegrationConfig::backbone_only(BackboneKind::Dnn);
    let mi_only = IntegrationConfig { mi: true, pretrain_mode: Some(PretrainMode::CsCd), ..base };
    assert!(matches!(mi_only.validate(), Err(Error::Config(_))));
    assert!(CtrModel::new(mi_only, tiny_model(), &tiny_vocab(), 0).is_err());
    assert!(IntegrationConfig { ps: true, ..base }.validate().is_err());
}

#[test]
fn layout_lists_active_slots() {
    let vocab = tiny_vocab();
    let m = CtrModel::new(IntegrationConfig::table_row(5, BackboneKind::Dcnv2Ta).unwrap(), tiny_model(), &vocab, 0)
        .unwrap();
    assert_eq!(m.layout(), ["emb.user.0", "emb.user.1", "emb.item", "emb.category", "emb.context.0", "ta"]);
    assert_eq!(m.backbone().input_width(), 6 * 4);
    assert_eq!(m.backbone().extra_width(), 4);
    let plain = CtrModel::new(IntegrationConfig::backbone_only(BackboneKind::Dnn), tiny_model(), &vocab, 0).unwrap();
    assert_eq!(plain.layout().len(), 5);
    assert!(plain.decoder().is_none());
}

#[test]
fn parameter_sharing_copies_tables_bit_exactly() {
    let pre = pretrained(PretrainMode::CsCd, 3);
    let cfg = IntegrationConfig::table_row(2, BackboneKind::Dnn).unwrap();
    let m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 9).unwrap();
    for name in [ITEM_TABLE, CATEGORY_TABLE] {
        let ours = m.store().by_name(name).unwrap();
        let theirs = pre.store.by_name(name).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ours), bits(theirs), "{name}");
        assert!(m.store().is_trainable(m.store().id(name).unwrap()));
    }
    // only one registry holds each table
    assert_eq!(m.store().iter().filter(|(_, p)| p.name == ITEM_TABLE).count(), 1);
    let fresh = CtrModel::new(cfg, tiny_model(), &tiny_vocab(), 9).unwrap();
    assert_ne!(fresh.store().by_name(ITEM_TABLE), m.store().by_name(ITEM_TABLE));
}

#[test]
fn parameter_sharing_errors() {
    let cfg = IntegrationConfig::table_row(2, BackboneKind::Dnn).unwrap();
    let err = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), None, 0).unwrap_err();
    assert!(err.to_string().contains("pre-trained checkpoint"), "{err}");

    let other = VocabSpec { n_items: 13, n_categories: 4, ..tiny_vocab() };
    let pre = PretrainedModel::init(PretrainMode::CsCd, &other, tiny_model().decoder, 0).unwrap();
    match CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 0) {
        Err(Error::VocabMismatch(msg)) => {
            assert!(msg.contains("n_items 12 vs 13") && msg.contains("n_categories 3 vs 4"), "{msg}")
        }
        other => panic!("expected vocab mismatch, got {other:?}"),
    }
}

#[test]
fn model_inheritance_copies_decoder_and_checks_shape() {
    let pre = pretrained(PretrainMode::CsSd, 4);
    let cfg = IntegrationConfig::table_row(6, BackboneKind::Dcnv2).unwrap();
    let m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 1).unwrap();
    let dec = m.decoder().unwrap();
    assert_eq!(dec.mode(), DecoderMode::Unconditional);
    for id in dec.owned_params() {
        let name = m.store().name(id);
        assert_eq!(m.store().get(id), pre.store.by_name(name).unwrap(), "{name}");
        assert!(m.store().is_trainable(id));
    }

    let wide = ModelConfig { decoder: DecoderConfig { n_heads: 1, ..tiny_model().decoder }, ..tiny_model() };
    let err = CtrModel::build(cfg, wide, &tiny_vocab(), Some(&pre), 1).unwrap_err().to_string();
    assert!(err.contains("heads=1") && err.contains("heads=2"), "{err}");

    let cd = pretrained(PretrainMode::CsCd, 4);
    assert!(CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&cd), 1).is_err());
}

#[test]
fn freeze_flag_keeps_transferred_weights() {
    let pre = pretrained(PretrainMode::CsCd, 5);
    let cfg = IntegrationConfig { freeze_transferred: true, ..IntegrationConfig::table_row(5, BackboneKind::Dnn).unwrap() };
    let mut m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 2).unwrap();
    scramble(&mut m, 0);
    let before = m.store().clone();
    let data = random_examples(16, 1);
    train_integrated(&mut m, &data, &TrainConfig { batch_size: 16, ..TrainConfig::default() }).unwrap();
    let transferred: Vec<String> = m
        .decoder()
        .unwrap()
        .owned_params()
        .iter()
        .map(|&id| m.store().name(id).to_string())
        .chain([ITEM_TABLE.to_string(), CATEGORY_TABLE.to_string()])
        .collect();
    for (_, p) in m.store().iter() {
        let old = before.by_name(&p.name).unwrap();
        if transferred.contains(&p.name) {
            assert_eq!(&p.value, old, "{} moved", p.name);
        }
    }
    assert_ne!(m.store().by_name("bb.head.w"), before.by_name("bb.head.w"));
}

#[test]
fn one_step_moves_shared_rows() {
    let pre = pretrained(PretrainMode::CsCd, 6);
    let cfg = IntegrationConfig::table_row(5, BackboneKind::Dcnv2).unwrap();
    let mut m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 3).unwrap();
    scramble(&mut m, 1);
    // keep the shared tables equal to the checkpoint
    m.apply_parameter_sharing(&pre).unwrap();
    let data = random_examples(8, 2);
    train_integrated(&mut m, &data, &TrainConfig { batch_size: 8, ..TrainConfig::default() }).unwrap();
    let moved = |name: &str| {
        let (a, b) = (m.store().by_name(name).unwrap(), pre.store.by_name(name).unwrap());
        (0..a.rows()).any(|r| a.row(r) != b.row(r))
    };
    assert!(moved(ITEM_TABLE) && moved(CATEGORY_TABLE));
}

#[test]
fn zero_generative_slot_matches_model_without_it() {
    let data = random_examples(9, 3);
    for backbone in BackboneKind::ALL {
        for row in [3, 5, 6] {
            let pre = pretrained(IntegrationConfig::table_row(row, backbone).unwrap().decoder_mode_pretrain(), 7);
            let cfg = IntegrationConfig::table_row(row, backbone).unwrap();
            let mut m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 4).unwrap();
            scramble(&mut m, 2);
            let reduced = m.without_generative_slot().unwrap();
            assert!(reduced.decoder().is_none());
            let a = logits(&m, &data, true);
            let b = logits(&reduced, &data, false);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{backbone} row {row}");
            // the real slot does change the output
            assert_ne!(logits(&m, &data, false), a);
        }
    }
}

impl IntegrationConfig {
    /// Any pre-training mode whose decoder matches this configuration.
    fn decoder_mode_pretrain(&self) -> PretrainMode {
        self.pretrain_mode.unwrap_or(PretrainMode::CsCd)
    }
}

#[test]
fn sequence_reaches_the_output_only_through_sequence_slots() {
    let mut data = random_examples(6, 4);
    for ex in &mut data {
        ex.behavior = BehaviorSequence::from_pairs(&[(1, 1), (5, 2), (7, 1)]);
    }
    let mut changed = data.clone();
    for ex in &mut changed {
        ex.behavior = BehaviorSequence::from_pairs(&[(2, 2), (3, 0)]);
    }
    for backbone in BackboneKind::ALL {
        let mut m = CtrModel::new(IntegrationConfig::backbone_only(backbone), tiny_model(), &tiny_vocab(), 5).unwrap();
        scramble(&mut m, 3);
        let same = logits(&m, &data, false) == logits(&m, &changed, false);
        assert_eq!(same, !backbone.uses_target_attention(), "{backbone}");
    }
}

#[test]
fn probabilities_are_strictly_inside_unit_interval() {
    let mut m = CtrModel::new(IntegrationConfig::table_row(3, BackboneKind::Dcnv2Ta).unwrap(), tiny_model(), &tiny_vocab(), 6)
        .unwrap();
    scramble(&mut m, 4);
    let head = m.backbone().head().w;
    m.store_mut().get_mut(head).data_mut().iter_mut().for_each(|w| *w *= 1e4);
    let p = predict(&m, &random_examples(40, 5)).unwrap();
    assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    assert!(p.iter().any(|&x| !(1e-6..=1.0 - 1e-6).contains(&x)), "clamp range was not exercised");
}

#[test]
fn gradients_reach_the_decoder() {
    let pre = pretrained(PretrainMode::CsCd, 8);
    let cfg = IntegrationConfig::table_row(5, BackboneKind::Dnn).unwrap();
    let mut m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 7).unwrap();
    scramble(&mut m, 5);
    let data = random_examples(10, 6);
    let refs: Vec<&Example> = data.iter().collect();
    let labels: Vec<f64> = data.iter().map(|e| f64::from(u8::from(e.label))).collect();
    let mut g = Graph::new(m.store());
    let z = m.forward(&mut g, &refs, false).unwrap();
    let loss = g.bce_with_logits(z, &labels, &[0.1; 10]).unwrap();
    let grads = g.backward(loss).unwrap();
    let dec = m.decoder().unwrap();
    let nonzero = dec
        .owned_params()
        .into_iter()
        .filter(|&id| grads.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)))
        .count();
    assert!(nonzero >= 1);
    let wq = dec.layers()[0].wq;
    assert!(grads.param(wq).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn integrated_gradients_match_finite_differences() {
    let data = random_examples(5, 7);
    let refs: Vec<&Example> = data.iter().collect();
    let labels: Vec<f64> = data.iter().map(|e| f64::from(u8::from(e.label))).collect();
    for (i, backbone) in BackboneKind::ALL.into_iter().enumerate() {
        for row in [1, 5, 6] {
            let pre = pretrained(IntegrationConfig::table_row(row, backbone).unwrap().decoder_mode_pretrain(), 9);
            let cfg = IntegrationConfig::table_row(row, backbone).unwrap();
            let mut m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 8).unwrap();
            scramble(&mut m, 6 + i as u64);
            let loss_of = |store: &ParamStore| {
                let mut g = Graph::new(store);
                let z = m.forward(&mut g, &refs, false).unwrap();
                let loss = g.bce_with_logits(z, &labels, &[0.2; 5]).unwrap();
                (g.value(loss).item(), g.backward(loss).unwrap())
            };
            let (_, grads) = loss_of(m.store());
            let analytic: Vec<Option<Vec<f64>>> =
                m.store().iter().map(|(id, _)| grads.param(id).map(|t| t.data().to_vec())).collect();
            let mut store = m.store().clone();
            check_params(&mut store, 20, 30 + i as u64, |s| loss_of(s).0, |id| analytic[id.index()].clone());
        }
    }
}

#[test]
fn zero_head_starts_at_ln_two() {
    let data = random_examples(32, 8);
    for backbone in BackboneKind::ALL {
        let mut m = CtrModel::new(IntegrationConfig::table_row(3, backbone).unwrap(), tiny_model(), &tiny_vocab(), 9)
            .unwrap();
        let report = train_integrated(&mut m, &data, &TrainConfig::default()).unwrap();
        assert!((report.first_batch_loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(report.steps, 1);
    }
}

#[test]
fn training_is_deterministic_and_rejects_empty_sets() {
    let data = random_examples(70, 9);
    let run = || {
        let mut m = CtrModel::new(IntegrationConfig::table_row(3, BackboneKind::Dcnv2Ta).unwrap(), tiny_model(), &tiny_vocab(), 1)
            .unwrap();
        let rep = train_integrated(&mut m, &data, &TrainConfig { batch_size: 8, seed: 3, ..TrainConfig::default() }).unwrap();
        let ev = evaluate(&m, &data).unwrap();
        (rep, ev.auc.to_bits(), ev.logloss.to_bits(), m.to_checkpoint().unwrap().to_text())
    };
    assert_eq!(run(), run());
    let mut m = CtrModel::new(IntegrationConfig::backbone_only(BackboneKind::Dnn), tiny_model(), &tiny_vocab(), 1).unwrap();
    assert!(matches!(train_integrated(&mut m, &[], &TrainConfig::default()), Err(Error::Empty(_))));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let pre = pretrained(PretrainMode::RsCd, 10);
    let cfg = IntegrationConfig { freeze_transferred: true, ..IntegrationConfig::table_row(7, BackboneKind::Dcnv2Ta).unwrap() };
    let mut m = CtrModel::build(cfg, tiny_model(), &tiny_vocab(), Some(&pre), 2).unwrap();
    scramble(&mut m, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = CtrModel::load(&path).unwrap();
    assert_eq!(back.integration(), m.integration());
    assert_eq!(back.store(), m.store());
    let data = random_examples(12, 10);
    assert_eq!(predict(&back, &data).unwrap(), predict(&m, &data).unwrap());
    let mut bad = m.to_checkpoint().unwrap();
    bad.meta.insert("layout".into(), "emb.item".into());
    assert!(CtrModel::from_checkpoint(&bad).is_err());
}

fn small_bundle() -> crate::data::DatasetBundle {
    let cfg = GeneratorConfig {
        n_users: 120,
        n_items: 60,
        n_categories: 6,
        n_train: 1500,
        n_test: 400,
        history_min: 5,
        history_max: 15,
        ..GeneratorConfig::default()
    };
    generate(&cfg).unwrap().bundle
}

#[test]
fn training_reduces_logloss_on_planted_data() {
    let bundle = small_bundle();
    let model = ModelConfig { hidden: vec![32, 16], ..ModelConfig::default() };
    for backbone in BackboneKind::ALL {
        let mut m = CtrModel::new(IntegrationConfig::backbone_only(backbone), model.clone(), &bundle.vocab, 0).unwrap();
        let before = evaluate(&m, &bundle.train).unwrap().logloss;
        train_integrated(&mut m, &bundle.train, &TrainConfig { epochs: 8, ..TrainConfig::default() }).unwrap();
        let after = evaluate(&m, &bundle.train).unwrap().logloss;
        assert!(after < 0.95 * before, "{backbone}: {before} -> {after}");
    }
}

fn small_spec() -> AblationSpec {
    AblationSpec {
        backbones: vec![BackboneKind::Dnn],
        seeds: vec![0, 1],
        model: ModelConfig { hidden: vec![8, 4], n_experts: 2, cross_depth: 1, cross_rank: 4, ..ModelConfig::default() },
        pretrain: crate::pretrain::PretrainConfig { epochs: 1, ..Default::default() },
        ..AblationSpec::default()
    }
}

#[test]
fn ablation_is_complete_and_deterministic() {
    let bundle = small_bundle();
    let spec = small_spec();
    let seen = std::sync::Mutex::new(0usize);
    let a = run_ablation(&bundle, &spec, &|_| *seen.lock().unwrap() += 1).unwrap();
    assert_eq!(*seen.lock().unwrap(), 8 * 2);
    assert_eq!(a.cells.len(), 8);
    assert_eq!(a.pretrain.len(), 4 * 2);
    assert!(a.runs.iter().all(|r| r.error.is_none()));
    for c in &a.cells {
        assert!((0.0..=1.0).contains(&c.auc_mean) && c.logloss_mean >= 0.0 && c.n_ok == 2);
    }
    let b = run_ablation(&bundle, &spec, &|_| {}).unwrap();
    let metrics = |s: &AblationSummary| {
        s.runs.iter().map(|r| (r.row, r.seed, r.auc.map(f64::to_bits), r.logloss.map(f64::to_bits))).collect::<Vec<_>>()
    };
    assert_eq!(metrics(&a), metrics(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cells.tsv");
    write_tsv(&a.cells, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.starts_with("row_no\tconfig\tbackbone\tauc_mean\tauc_std\tlogloss_mean\tlogloss_std"));
}

#[test]
fn backbone_row_uses_no_pretraining_and_failures_are_recorded() {
    let mut bundle = small_bundle();
    let spec = AblationSpec { rows: vec![1], ..small_spec() };
    let out = run_ablation(&bundle, &spec, &|_| {}).unwrap();
    assert!(out.pretrain.is_empty());
    assert!(out.runs.iter().all(|r| r.error.is_none()));

    // a single-class test set makes AUC undefined: runs fail, the matrix completes
    bundle.test.iter_mut().for_each(|e| e.label = true);
    let out = run_ablation(&bundle, &AblationSpec { rows: vec![1, 2], ..small_spec() }, &|_| {}).unwrap();
    assert_eq!(out.runs.len(), 4);
    assert!(out.runs.iter().all(|r| r.error.as_deref().is_some_and(|e| e.contains("metric"))));
    assert!(out.cells.iter().all(|c| c.n_failed == 2 && c.auc_mean.is_nan()));
    assert!(render_table(&out.cells).contains("failed"));
}
