use std::rc::Rc;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use countpp::autograd::{focal_term, Graph};
use countpp::backbone::{encode_image, encode_text, word_vector, ExemplarStreams};
use countpp::data::{generate_scene, Scene, SceneConfig};
use countpp::filtering::{filter_queries, select_pseudo_exemplars, sigmoid, SimilarityPair};
use countpp::geometry::BBox;
use countpp::matching::{match_queries, MatchCost};
use countpp::metrics::{evaluate, EvalMode, ImagePrediction, ImageTruth};
use countpp::model::{build_prompt, decode, enhance, reference_boxes, select_queries, Model, ModelConfig, QueryBatch};
use countpp::nn::{layer_norm, mha, AdamConfig, Binder};
use countpp::prompts::{
    assign_groups, feature_mask, serialize_text, tokenize, ClassPrompt, ExemplarRef, MaskMode, Polarity, PromptSpec, TokenGroupMap,
};
use countpp::training::{build_targets, train, validation_mae, TrainConfig};
use countpp::{ImageTensor, MemoryImageStore};

fn mini() -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, ffn_mult: 2, enhancer_blocks: 2, decoder_blocks: 2, num_queries: 8, ..Default::default() }
}

fn groups_of(spec: &PromptSpec) -> TokenGroupMap {
    let t = tokenize(&serialize_text(spec)).unwrap();
    assign_groups(spec, &t.spans).unwrap()
}

fn sim_from(vals: &[f64], k: usize, mp: usize, mn: usize) -> SimilarityPair {
    let pos = Array2::from_shape_vec((k, mp), vals[..k * mp].to_vec()).unwrap();
    let neg = Array2::from_shape_vec((k, mn), vals[k * mp..k * (mp + mn)].to_vec()).unwrap();
    SimilarityPair::new(pos, neg).unwrap()
}

fn batch(k: usize) -> QueryBatch {
    QueryBatch {
        queries: Array2::zeros((k, 1)),
        boxes: (0..k).map(|i| BBox::new(0.5, 0.5, 0.01 + 0.01 * i as f64, 0.1).unwrap()).collect(),
        provenance: (0..k).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raising_sigma_only_removes_queries(vals in prop::collection::vec(-5.0f64..5.0, 12 * 5), s1 in 0.01f64..0.98, ds in 0.0f64..0.5) {
        let sim = sim_from(&vals, 12, 3, 2);
        let s2 = (s1 + ds).min(0.99);
        let lo = filter_queries(&sim, s1).unwrap().kept;
        let hi = filter_queries(&sim, s2).unwrap().kept;
        prop_assert!(hi.iter().all(|i| lo.contains(i)));
        prop_assert!(lo.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn extra_negative_columns_only_remove_queries(vals in prop::collection::vec(-5.0f64..5.0, 10 * 6), extra in 1usize..=3) {
        let base = sim_from(&vals, 10, 2, 1);
        let cols = Array2::from_shape_vec((10, 3), vals[30..60].to_vec()).unwrap();
        let neg = ndarray::concatenate![ndarray::Axis(1), base.neg, cols.slice(ndarray::s![.., ..extra])];
        let more = SimilarityPair::new(base.pos.clone(), neg).unwrap();
        let a = filter_queries(&base, 0.23).unwrap().kept;
        let b = filter_queries(&more, 0.23).unwrap().kept;
        prop_assert!(b.iter().all(|i| a.contains(i)));
    }

    #[test]
    fn kept_queries_satisfy_both_conditions(vals in prop::collection::vec(-5.0f64..5.0, 9 * 4), sigma in 0.05f64..0.95) {
        let sim = sim_from(&vals, 9, 2, 2);
        let d = filter_queries(&sim, sigma).unwrap();
        for i in 0..9 {
            let ok = sigmoid(sim.max_pos(i)) > sigma && sim.max_pos(i) > sim.max_neg(i);
            prop_assert_eq!(d.kept.contains(&i), ok);
        }
    }

    #[test]
    fn pseudo_exemplars_match_sort_oracle(vals in prop::collection::vec(-4.0f64..4.0, 10 * 3), n in 1usize..=5) {
        let sim = sim_from(&vals, 10, 2, 1);
        let got = select_pseudo_exemplars(&batch(10), &sim, 0.23, n, Polarity::Positive).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..10)
            .filter(|&i| sigmoid(sim.max_pos(i)) > 0.23 && sim.max_pos(i) > sim.max_neg(i))
            .map(|i| (sigmoid(sim.max_pos(i)), i))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<BBox> = oracle.iter().take(n).map(|&(_, i)| batch(10).boxes[i]).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn select_queries_matches_sort_oracle(img in prop::collection::vec(-2.0f64..2.0, 20 * 4), pr in prop::collection::vec(-2.0f64..2.0, 3 * 4), k in 1usize..=20) {
        let x = Array2::from_shape_vec((20, 4), img).unwrap();
        let p = Array2::from_shape_vec((3, 4), pr).unwrap();
        let got = select_queries(&x, &p, k).unwrap();
        let scores: Vec<f64> = (0..20).map(|i| (0..3).map(|j| x.row(i).dot(&p.row(j))).fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut idx: Vec<usize> = (0..20).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        prop_assert_eq!(got, idx[..k].to_vec());
    }

    #[test]
    fn match_cost_is_invariant_to_ground_truth_order(
        raw in prop::collection::vec(0.05f64..0.95, 6 * 4),
        logits in prop::collection::vec(-3.0f64..3.0, 6 * 3),
        centres in prop::collection::vec(0.2f64..0.8, 8),
        rot in 0usize..4,
    ) {
        let spec = PromptSpec::text_only("red circle", &["blue"]);
        let groups = groups_of(&spec);
        let boxes = Array2::from_shape_vec((6, 4), raw).unwrap();
        let logits = Array2::from_shape_vec((6, 3), logits).unwrap();
        let gt: Vec<(BBox, usize)> = (0..4).map(|i| (BBox::new(centres[2 * i], centres[2 * i + 1], 0.1, 0.1).unwrap(), i % 2)).collect();
        let mut perm: Vec<usize> = (0..4).collect();
        perm.rotate_left(rot);
        let shuffled: Vec<(BBox, usize)> = perm.iter().map(|&i| gt[i]).collect();
        let a = match_queries(&boxes, &logits, &gt, &groups, MatchCost::default()).unwrap();
        let b = match_queries(&boxes, &logits, &shuffled, &groups, MatchCost::default()).unwrap();
        prop_assert!((a.total_cost - b.total_cost).abs() < 1e-9);
        prop_assert_eq!(a.pairs.len(), 4);
        let classes: Vec<usize> = gt.iter().map(|g| g.1).collect();
        let y = build_targets(&a, &groups, &classes, 6).unwrap();
        let fg = groups.feature_groups();
        for q in 0..6 {
            let on: Vec<usize> = (0..fg.len()).filter(|&j| y[[q, j]] == 1.0).map(|j| fg[j]).collect();
            prop_assert!(on.windows(2).all(|w| w[0] == w[1]), "query {q} spans groups {on:?}");
            prop_assert_eq!(on.is_empty(), a.unmatched.contains(&q));
        }
    }

    #[test]
    fn focal_term_is_non_negative(x in -30.0f64..30.0, y in prop::sample::select(vec![0.0, 1.0])) {
        let f = focal_term(x, y, 0.25, 2.0);
        prop_assert!(f >= 0.0 && f.is_finite());
    }

    #[test]
    fn rmse_never_below_mae(pairs in prop::collection::vec((0usize..50, 0usize..50), 1..30)) {
        let preds: Vec<ImagePrediction> = pairs.iter().map(|p| ImagePrediction { count: p.0, ..Default::default() }).collect();
        let gts: Vec<ImageTruth> = pairs.iter().map(|p| ImageTruth { count: p.1, ..Default::default() }).collect();
        let r = evaluate(&preds, &gts, EvalMode::Counting, None).unwrap();
        prop_assert!(r.rmse >= r.mae - 1e-12 && r.mae >= 0.0);
    }
}

#[test]
fn focal_term_vanishes_only_when_saturated() {
    assert!(focal_term(40.0, 1.0, 0.25, 2.0) < 1e-12);
    assert!(focal_term(-40.0, 0.0, 0.25, 2.0) < 1e-12);
    assert!(focal_term(0.0, 1.0, 0.25, 2.0) > 0.01);
}

#[test]
fn constant_image_gives_equal_features_and_expected_token_count() {
    let cfg = ModelConfig { d_model: 16, ..mini() };
    let model = Model::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let img = ImageTensor::filled(128, 128, [0.3, 0.6, 0.1]);
    let enc = encode_image(&cfg, &mut g, &mut b, &img).unwrap();
    assert_eq!(enc.token_count(), 256);
    assert_eq!(g.shape(enc.tokens), (256, 16));
    let grid = g.value(enc.grid);
    for r in grid.rows() {
        assert_eq!(r, grid.row(0));
    }
    let again = encode_image(&cfg, &mut g, &mut b, &img).unwrap();
    assert_eq!(g.value(again.tokens), g.value(enc.tokens));
    assert!(encode_image(&cfg, &mut g, &mut b, &ImageTensor::filled(8, 8, [0.0; 3])).is_err());
}

#[test]
fn shared_words_share_embeddings_across_classes() {
    assert_eq!(word_vector("cell", 7, 16), word_vector("cell", 7, 16));
    assert_ne!(word_vector("cell", 7, 16), word_vector("blood", 7, 16));
    let cfg = mini();
    let model = Model::new(cfg.clone()).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let (v, toks) = encode_text(&cfg, &mut g, &mut b, "red blood cell . white blood cell .").unwrap();
    assert_eq!(toks.spans, vec![0..3, 3..6]);
    let m = g.value(v.unwrap());
    assert_eq!(m.row(1), m.row(4));
    assert_eq!(m.row(2), m.row(5));
    assert!(encode_text(&cfg, &mut g, &mut b, "").is_err());
}

#[test]
fn one_external_image_is_encoded_once() {
    let cfg = mini();
    let model = Model::new(cfg.clone()).unwrap();
    let mut store = MemoryImageStore::new();
    store.insert("ext", ImageTensor::filled(32, 32, [0.5, 0.5, 0.5]));
    let mut streams = ExemplarStreams::new(&store);
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let refs = vec![
        ExemplarRef::new("ext", BBox::new(0.3, 0.3, 0.2, 0.2).unwrap()),
        ExemplarRef::new("ext", BBox::new(0.7, 0.6, 0.3, 0.2).unwrap()),
    ];
    let toks = streams.extract(&cfg, &mut g, &mut b, &refs).unwrap().unwrap();
    assert_eq!(streams.encoder_calls(), 1);
    // Constant image: every box pools the same vector.
    let t = g.value(toks);
    assert!((&t.row(0) - &t.row(1)).iter().all(|v| v.abs() < 1e-12));
}

fn prompt_and_image(model: &Model, spec: &PromptSpec, g: &mut Graph, b: &mut Binder) -> (countpp::autograd::Var, countpp::autograd::Var, TokenGroupMap) {
    let img = generate_scene(3, &SceneConfig::default()).unwrap().image;
    let mut streams = ExemplarStreams::new(&countpp::EmptyStore);
    let enc = streams.encode(&model.config, g, b, "input", &img).unwrap();
    let p = build_prompt(&model.config, g, b, spec, &mut streams).unwrap();
    (enc.tokens, p.tokens, p.groups)
}

#[test]
fn zero_weight_enhancer_is_identity() {
    let mut model = Model::new(mini()).unwrap();
    model.params.zero_matching("enhancer.");
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let spec = PromptSpec::text_only("red circle", &["blue square"]);
    let (x, p, groups) = prompt_and_image(&model, &spec, &mut g, &mut b);
    let (x2, p2) = enhance(&model.config, &mut g, &mut b, x, p, &feature_mask(&groups, MaskMode::OptionB)).unwrap();
    assert_eq!(g.value(x2), g.value(x));
    assert_eq!(g.value(p2), g.value(p));
    let bad = Array2::from_elem((1, 1), true);
    assert!(enhance(&model.config, &mut g, &mut b, x, p, &bad).is_err());
}

#[test]
fn zero_weight_decoder_blocks_keep_queries() {
    let mut model = Model::new(mini()).unwrap();
    for blk in 0..model.config.decoder_blocks {
        model.params.zero_matching(&format!("decoder.{blk}."));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let spec = PromptSpec::text_only("red circle", &[]);
    let (x, p, _) = prompt_and_image(&model, &spec, &mut g, &mut b);
    let sel = select_queries(g.value(x), g.value(p), 8).unwrap();
    let q0 = g.gather_rows(x, &sel);
    let refs = reference_boxes(&model.config, &sel, 8, 8);
    let out = decode(&model.config, &mut g, &mut b, q0, x, p, refs).unwrap();
    assert_eq!(g.value(out.queries), g.value(q0));
    assert_eq!(g.shape(out.boxes), (8, 4));
}

#[test]
fn single_token_attention_is_the_value_path() {
    let model = Model::new(mini()).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let x = g.constant(Array2::from_shape_fn((1, 16), |(_, j)| (j as f64 * 0.3).sin()));
    let out = mha(&mut g, &mut b, x, x, 2, None, "enhancer.0.sa_p");
    let p = |n: &str| model.params.get(&format!("enhancer.0.sa_p.{n}")).unwrap().clone();
    let v = g.value(x).dot(&p("v.w")) + p("v.b");
    let want = v.dot(&p("o.w")) + p("o.b");
    assert!((g.value(out) - &want).iter().all(|d| d.abs() < 1e-12));
}

/// Per-class rows of the first masked prompt self-attention output.
fn first_prompt_attention(model: &Model, spec: &PromptSpec) -> Vec<Array2<f64>> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, false);
    let (_, p, groups) = prompt_and_image(model, spec, &mut g, &mut b);
    let mask = Rc::new(feature_mask(&groups, MaskMode::OptionB));
    let pn = layer_norm(&mut g, &mut b, p, "enhancer.0.ln_p_sa");
    let d = mha(&mut g, &mut b, pn, pn, model.config.heads, Some(mask), "enhancer.0.sa_p");
    let out = g.add(p, d);
    let fg = groups.feature_groups();
    (0..groups.num_groups)
        .map(|c| {
            let rows: Vec<usize> = (0..fg.len()).filter(|&j| fg[j] == c).collect();
            g.value(out).select(ndarray::Axis(0), &rows)
        })
        .collect()
}

#[test]
fn negative_order_permutes_groups_only() {
    let model = Model::new(mini()).unwrap();
    let a = first_prompt_attention(&model, &PromptSpec::text_only("red circle", &["blue square", "green"]));
    let b = first_prompt_attention(&model, &PromptSpec::text_only("red circle", &["green", "blue square"]));
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[2]);
    assert_eq!(a[2], b[1]);
}

#[test]
fn box_head_stays_in_unit_square_for_random_inputs() {
    let model = Model::new(mini()).unwrap();
    let mut rng_state = 1u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0
    };
    for _ in 0..125 {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.params, false);
        let x = g.constant(Array2::from_shape_fn((64, 16), |_| next()));
        let p = g.constant(Array2::from_shape_fn((3, 16), |_| next()));
        let sel = select_queries(g.value(x), g.value(p), 8).unwrap();
        let q0 = g.gather_rows(x, &sel);
        let refs = reference_boxes(&model.config, &sel, 8, 8);
        let out = decode(&model.config, &mut g, &mut b, q0, x, p, refs).unwrap();
        assert!(g.value(out.boxes).iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

fn overfit_scenes() -> Vec<Scene> {
    let cfg = SceneConfig {
        classes: vec!["red circle".into()],
        classes_per_scene: [1, 1],
        count_range: [1, 4],
        size_range: [8.0, 12.0],
        ..Default::default()
    };
    (0..5).map(|s| generate_scene(100 + s, &cfg).unwrap()).collect()
}

fn quiet_train_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { init_seed: 4, ..mini() },
        optimizer: AdamConfig { lr, warmup_steps: 5, ..Default::default() },
        epochs,
        batch_size: 5,
        seed: 9,
        mosaic_fraction: 0.0,
        vocabulary: vec!["red circle".into(), "blue square".into()],
        exemplar_prob: 0.0,
        drop_exemplars: 0.0,
        drop_text: 0.0,
        val_every: epochs,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let scenes = overfit_scenes();
    let cfg = TrainConfig { epochs: 1, batch_size: 1, ..quiet_train_config(1, 0.0) };
    let out = train(&cfg, &scenes[..1], &[], None).unwrap();
    assert_eq!(out.model.params, Model::new(cfg.model.clone()).unwrap().params);
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let scenes = overfit_scenes();
    let cfg = quiet_train_config(3, 1e-3);
    let a = train(&cfg, &scenes, &scenes, None).unwrap();
    let b = train(&cfg, &scenes, &scenes, None).unwrap();
    let rows = |h: &[countpp::training::EpochLog]| h.iter().map(|e| e.csv_row()).collect::<Vec<_>>();
    assert_eq!(rows(&a.history), rows(&b.history));
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn overfits_five_scenes() {
    let scenes = overfit_scenes();
    let cfg = quiet_train_config(200, 3e-3);
    let out = train(&cfg, &scenes, &[], None).unwrap();
    let mae = validation_mae(&out.model, &scenes, cfg.sigma).unwrap();
    assert!(mae <= 0.2, "training MAE {mae}");
}

#[test]
fn internal_exemplars_on_the_input_match_text_shapes() {
    // Exemplar-only prompts are valid and produce K queries.
    let model = Model::new(mini()).unwrap();
    let s = generate_scene(5, &SceneConfig::default()).unwrap();
    let b = s.instances[0].bbox;
    let spec = PromptSpec::new(ClassPrompt::default().with_exemplars(vec![ExemplarRef::new("input", b)]), vec![]);
    let inf = model.infer(&s.image, "input", &spec, &countpp::EmptyStore).unwrap();
    assert_eq!(inf.batch.boxes.len(), 8);
    assert_eq!(inf.logits.ncols(), 1);
    let _: Array1<f64> = inf.logits.column(0).to_owned();
}
