//! Acceptance suite: one pass/fail line per criterion; exits non-zero if any fail.

use std::process::ExitCode;
use std::rc::Rc;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use countpp::autograd::Graph;
use countpp::backbone::ExemplarStreams;
use countpp::data::{generate_scene, generate_video, grid_scene, SceneConfig};
use countpp::desk;
use countpp::filtering::{filter_queries, SimilarityPair};
use countpp::geometry::{iou, BBox};
use countpp::matching::hungarian;
use countpp::metrics::{average_precision, evaluate, mae, rmse, EvalMode, ImagePrediction, ImageTruth};
use countpp::model::{build_prompt, Model, ModelConfig};
use countpp::nn::{layer_norm, mha, Binder};
use countpp::pipelines::{AdaptiveConfig, Bilinear, Counter, DEFAULT_MAX_ITER, DEFAULT_PSEUDO_EXEMPLARS, DEFAULT_VIDEO_EXEMPLARS};
use countpp::prompts::{build_attention_mask, feature_mask, ClassPrompt, ExemplarRef, MaskMode, PromptSpec};
use countpp::training::{build_sample, sample_gradients, train, LossWeights, TrainConfig};
use countpp::EmptyStore;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_sim(rng: &mut ChaCha8Rng, k: usize, mp: usize, mn: usize) -> (Array2<f64>, Array2<f64>) {
    let pos = Array2::from_shape_fn((k, mp), |_| rng.random_range(-6.0..6.0));
    let mut neg = Array2::from_shape_fn((k, mn), |_| rng.random_range(-6.0..6.0));
    // Exact ties between the best positive and negative logits.
    if mn > 0 {
        for i in 0..k {
            if rng.random::<f64>() < 0.1 {
                let best = pos.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                neg[[i, rng.random_range(0..mn)]] = best;
            }
        }
    }
    (pos, neg)
}

fn p1_filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut kept_total = 0;
    for case in 0..1000 {
        let (mp, mn) = (rng.random_range(1..=8), rng.random_range(0..=8));
        let sigma = rng.random_range(0.01..0.99);
        let (pos, neg) = random_sim(&mut rng, 64, mp, mn);
        let got = filter_queries(&SimilarityPair::new(pos.clone(), neg.clone()).unwrap(), sigma).unwrap();
        let mut want = Vec::new();
        for i in 0..64 {
            let mut best_pos = f64::NEG_INFINITY;
            for j in 0..mp {
                best_pos = best_pos.max(pos[[i, j]]);
            }
            let mut best_neg = f64::NEG_INFINITY;
            for j in 0..mn {
                best_neg = best_neg.max(neg[[i, j]]);
            }
            if sigmoid(best_pos) > sigma && best_pos > best_neg {
                want.push(i);
            }
        }
        if got.kept != want {
            return Err(format!("instance {case}: kept {:?}, oracle {:?}", got.kept, want));
        }
        kept_total += want.len();
    }
    Ok(format!("1000 instances agree ({kept_total} kept queries)"))
}

fn exhaustive(cost: &Array2<f64>) -> (f64, Vec<(usize, usize)>) {
    let (r, c) = cost.dim();
    let t = r > c;
    let (rows, cols) = if t { (c, r) } else { (r, c) };
    let at = |i: usize, j: usize| if t { cost[[j, i]] } else { cost[[i, j]] };
    let mut best = (f64::INFINITY, vec![]);
    let mut perm: Vec<usize> = (0..cols).collect();
    fn rec(k: usize, rows: usize, perm: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if k == rows {
            visit(&perm[..rows]);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            rec(k + 1, rows, perm, visit);
            perm.swap(k, i);
        }
    }
    rec(0, rows, &mut perm, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| at(i, j)).sum();
        if total < best.0 {
            let mut pairs: Vec<(usize, usize)> = p.iter().enumerate().map(|(i, &j)| if t { (j, i) } else { (i, j) }).collect();
            pairs.sort();
            best = (total, pairs);
        }
    });
    best
}

fn p2_hungarian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut same_assignment = 0;
    for case in 0..500 {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        // Half the matrices hold small integers, so ties are common and sums exact.
        let integral = case % 2 == 0;
        let cost = Array2::from_shape_fn((r, c), |_| if integral { rng.random_range(0..6) as f64 } else { rng.random_range(0.0..10.0) });
        let (pairs, _) = hungarian(&cost).unwrap();
        let (best, best_pairs) = exhaustive(&cost);
        let mut sorted = pairs.clone();
        sorted.sort();
        let total: f64 = sorted.iter().map(|&(i, j)| cost[[i, j]]).sum();
        let recomputed: f64 = best_pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
        if pairs.len() != r.min(c) || total != recomputed {
            return Err(format!("matrix {case} ({r}x{c}): cost {total} vs exhaustive {best}"));
        }
        if sorted == best_pairs {
            same_assignment += 1;
        } else if integral {
            // A different assignment is only acceptable as a cost tie.
        } else {
            return Err(format!("matrix {case}: assignment {sorted:?} vs {best_pairs:?} without a tie"));
        }
    }
    Ok(format!("500 matrices optimal, {same_assignment} identical assignments, the rest cost ties"))
}

/// Relative error with a floor on the denominator, below which the two
/// values are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

fn p3_gradients() -> Outcome {
    let cfg = ModelConfig { d_model: 8, heads: 2, ffn_mult: 2, enhancer_blocks: 2, decoder_blocks: 2, num_queries: 8, init_seed: 3, ..Default::default() };
    let model = Model::new(cfg.clone()).unwrap();
    let scene_cfg = SceneConfig {
        height: 32,
        width: 32,
        classes: vec!["red circle".into(), "blue square".into()],
        classes_per_scene: [2, 2],
        count_range: [1, 2],
        size_range: [5.0, 9.0],
        ..Default::default()
    };
    let scene = generate_scene(17, &scene_cfg).unwrap();
    let tc = TrainConfig {
        model: cfg,
        vocabulary: vec!["red circle".into(), "blue square".into(), "green triangle".into()],
        exemplar_prob: 1.0,
        drop_exemplars: 0.0,
        drop_text: 0.0,
        absent_classes: 1,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sample = build_sample(&scene, &tc, &mut rng).unwrap();
    let w = LossWeights::default();
    let (_, grads) = sample_gradients(&model, &scene, &sample, &w).unwrap();
    let loss_at = |m: &Model| sample_gradients(m, &scene, &sample, &w).unwrap().0.total;
    let h = 1e-5;
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0);
    for (bi, g) in grads.iter().enumerate() {
        let name = model.params.name_at(bi).to_string();
        let n = g.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &flat in idx.iter().take(3) {
            let (r, c) = (flat / g.ncols(), flat % g.ncols());
            let mut plus = model.clone();
            plus.params.get_mut(&name).unwrap()[[r, c]] += h;
            let mut minus = model.clone();
            minus.params.get_mut(&name).unwrap()[[r, c]] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = g[[r, c]];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            checked += 1;
            if err > worst {
                worst = err;
                worst_at = format!("{name}[{r},{c}] analytic {analytic:.6e} numeric {numeric:.6e}");
            }
        }
    }
    check(
        worst <= 1e-4,
        format!("{checked} entries over {} blocks, max relative error {worst:.2e} at {worst_at}", grads.len()),
    )
}

fn p4_masks() -> Outcome {
    let model = Model::new(ModelConfig { d_model: 16, heads: 2, ffn_mult: 2, enhancer_blocks: 1, decoder_blocks: 1, num_queries: 8, ..Default::default() }).unwrap();
    let image = generate_scene(4, &SceneConfig::default()).unwrap().image;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words = ["red", "blue", "circle", "square", "big", "dot", "ring", "cell"];
    let (mut worst_b, mut least_a) = (0.0f64, f64::INFINITY);
    for case in 0..50 {
        let class = |tag: usize, rng: &mut ChaCha8Rng| {
            let n = rng.random_range(1..=3);
            let text = (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ") + &format!(" c{tag}");
            let exs = (0..rng.random_range(0..=2)).map(|e| ExemplarRef::new("input", BBox::new(0.3 + 0.2 * e as f64, 0.5, 0.2, 0.2).unwrap())).collect();
            ClassPrompt::text(text).with_exemplars(exs)
        };
        let pos = class(0, &mut rng);
        let negs = (1..=rng.random_range(1..=3)).map(|t| class(t, &mut rng)).collect();
        let spec = PromptSpec::new(pos, negs);

        let mut g = Graph::new();
        let mut b = Binder::new(&model.params, false);
        let mut streams = ExemplarStreams::new(&EmptyStore);
        streams.encode(&model.config, &mut g, &mut b, "input", &image).unwrap();
        let prompt = build_prompt(&model.config, &mut g, &mut b, &spec, &mut streams).unwrap();
        let ma = build_attention_mask(&prompt.groups, MaskMode::OptionA);
        let mb = build_attention_mask(&prompt.groups, MaskMode::OptionB);
        if ma.iter().zip(mb.iter()).any(|(a, b)| *b && !*a) {
            return Err(format!("spec {case}: option_b mask not contained in option_a"));
        }
        let fg = prompt.groups.feature_groups();
        let class0: Vec<usize> = (0..fg.len()).filter(|&j| fg[j] == 0).collect();
        let base = g.value(prompt.tokens).clone();
        let mut perturbed = base.clone();
        for j in (0..fg.len()).filter(|&j| fg[j] == 1) {
            for v in perturbed.row_mut(j) {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        for (mode, slot) in [(MaskMode::OptionB, &mut worst_b), (MaskMode::OptionA, &mut least_a)] {
            let mask = Rc::new(feature_mask(&prompt.groups, mode));
            let sa = |g: &mut Graph, b: &mut Binder, p: Array2<f64>| {
                let p = g.constant(p);
                let pn = layer_norm(g, b, p, "enhancer.0.ln_p_sa");
                let d = mha(g, b, pn, pn, model.config.heads, Some(mask.clone()), "enhancer.0.sa_p");
                let out = g.add(p, d);
                g.value(out).select(Axis(0), &class0)
            };
            let diff = (&sa(&mut g, &mut b, base.clone()) - &sa(&mut g, &mut b, perturbed.clone())).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if mode == MaskMode::OptionB {
                *slot = slot.max(diff);
            } else {
                *slot = slot.min(diff);
            }
        }
    }
    check(
        worst_b <= 1e-9,
        format!("50 prompts: option_b ⊆ option_a; class-0 change under option_b {worst_b:.1e}, under option_a at least {least_a:.1e}"),
    )
}

struct Trained {
    seed: u64,
    model: Model,
}

const SEEDS: [u64; 3] = [1, 2, 3];
const TRAIN_SCENES: usize = 3000;
const TRAIN_EPOCHS: usize = 10;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn train_models() -> Vec<Trained> {
    let val = desk::corpus(900_000_000, 40).unwrap();
    SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let data = desk::corpus(seed * 1_000_000, TRAIN_SCENES).unwrap();
            let out = train(&desk::train_config(seed, TRAIN_EPOCHS), &data, &val, None).unwrap();
            let cal = out.calibration.unwrap();
            println!(
                "    seed {seed}: trained in {:.0?}, validation MAE {:.3} -> {:.3} after bias shift {:+.2}",
                t.elapsed(),
                cal.val_mae_before,
                cal.val_mae_after,
                cal.shift
            );
            Trained { seed, model: out.model }
        })
        .collect()
}

fn p5_negative_prompts(models: &[Trained]) -> Outcome {
    let split = desk::confusable_split(50_000_000, 40).unwrap();
    let mut ratios = Vec::new();
    let mut lines = Vec::new();
    for m in models {
        let c = Counter::new(&m.model, &EmptyStore);
        let (mut pos, mut both) = (0.0, 0.0);
        for (s, p, q) in &split {
            let gt = s.count_of(p) as f64;
            pos += (c.count_image(&s.image, "input", &PromptSpec::text_only(p, &[])).unwrap().count as f64 - gt).abs();
            both += (c.count_image(&s.image, "input", &PromptSpec::text_only(p, &[q])).unwrap().count as f64 - gt).abs();
        }
        let n = split.len() as f64;
        ratios.push((both / n) / (pos / n).max(1e-12));
        lines.push(format!("seed {}: {:.3} -> {:.3}", m.seed, pos / n, both / n));
    }
    let r = median(ratios);
    check(r <= 0.7, format!("median MAE ratio {r:.3} (limit 0.7); {}", lines.join(", ")))
}

fn p6_pseudo_exemplars(models: &[Trained]) -> Outcome {
    let split = desk::novel_split(70_000_000, 60).unwrap();
    let mut ratios = Vec::new();
    let mut lines = Vec::new();
    for m in models {
        let c = Counter::new(&m.model, &EmptyStore);
        let (mut single, mut iter) = (0.0, 0.0);
        for s in &split {
            let class = s.classes()[0].clone();
            let gt = s.count_of(&class) as f64;
            let spec = PromptSpec::text_only(&class, &[]);
            single += (c.count_image(&s.image, "input", &spec).unwrap().count as f64 - gt).abs();
            let r = c.iterative_count(&s.image, "input", &spec, DEFAULT_PSEUDO_EXEMPLARS, DEFAULT_MAX_ITER).unwrap();
            iter += (r.result.count as f64 - gt).abs();
        }
        let n = split.len() as f64;
        ratios.push((iter / n) / (single / n).max(1e-12));
        lines.push(format!("seed {}: {:.3} -> {:.3}", m.seed, single / n, iter / n));
    }
    let r = median(ratios);
    check(r <= 0.9, format!("median MAE ratio {r:.3} (limit 0.9) on unseen classes; {}", lines.join(", ")))
}

/// Ground-truth boxes matched one-to-one at IoU >= 0.5, greedily by IoU.
fn recall(pred: &[BBox], gt: &[BBox]) -> f64 {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in gt.iter().enumerate() {
            let v = iou(p, t).unwrap();
            if v >= 0.5 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut up, mut ug) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut hit = 0;
    for (_, i, j) in pairs {
        if !up[i] && !ug[j] {
            up[i] = true;
            ug[j] = true;
            hit += 1;
        }
    }
    hit as f64 / gt.len() as f64
}

fn p7_adaptive(models: &[Trained]) -> Outcome {
    let cfg = AdaptiveConfig::default();
    let (rows, cols) = (6, 8);
    let grid = grid_scene(192, 192, rows, cols, 4.0, desk::DOT_CLASS, 7).unwrap();
    let gt: Vec<BBox> = grid.instances.iter().map(|i| i.bbox).collect();
    let spec = PromptSpec::text_only(desk::DOT_CLASS, &[]);
    let sparse = desk::corpus(60_000_000, 10).unwrap();
    let (mut recalls, mut lines, mut saturated) = (Vec::new(), Vec::new(), true);
    for m in models {
        let k = m.model.config.num_queries;
        assert_eq!(rows * cols * 2, 3 * k);
        let c = Counter::new(&m.model, &EmptyStore);
        let single = c.count_image(&grid.image, "grid", &spec).unwrap();
        let adaptive = c.adaptive_count(&grid.image, "grid", &spec, &cfg, &Bilinear).unwrap();
        let rec = recall(&adaptive.boxes, &gt);
        saturated &= single.count <= k;
        recalls.push(rec);

        let mut identical = 0;
        for (i, s) in sparse.iter().enumerate() {
            let spec = PromptSpec::text_only(&s.classes()[0], &[]);
            let id = format!("sparse{i}");
            let a = c.count_image(&s.image, &id, &spec).unwrap();
            let b = c.adaptive_count(&s.image, &id, &spec, &cfg, &Bilinear).unwrap();
            if a.count < countpp::pipelines::default_trigger(k) {
                if serde_json::to_string(&a).unwrap() != serde_json::to_string(&b).unwrap() {
                    return Err(format!("seed {}: below-trigger scene {i} differs between paths", m.seed));
                }
                identical += 1;
            }
        }
        if identical == 0 {
            return Err(format!("seed {}: no below-trigger scenes", m.seed));
        }
        lines.push(format!("seed {}: single {} -> adaptive {} ({:.0}% recalled)", m.seed, single.count, adaptive.count, 100.0 * rec));
    }
    let r = median(recalls);
    check(
        saturated && r >= 0.95,
        format!(
            "{} dots, K = {}; median recall {:.0}% at IoU 0.5; {}; below-trigger scenes bit-identical",
            gt.len(),
            models[0].model.config.num_queries,
            100.0 * r,
            lines.join(", ")
        ),
    )
}

fn p8_video(models: &[Trained]) -> Outcome {
    let vcfg = desk::video_config();
    let videos: Vec<_> = (0..5).map(|i| generate_video(80_000_000 + i, &vcfg).unwrap()).collect();
    let mut lines = Vec::new();
    let mut ok = 0;
    for m in models {
        let c = Counter::new(&m.model, &EmptyStore);
        let (mut dynamic, mut frozen) = (0.0, 0.0);
        for v in &videos {
            let spec = PromptSpec::text_only(&vcfg.class, &[]);
            let gt = v.unique_count as f64;
            dynamic += (c.count_video(&v.frames, &spec, DEFAULT_VIDEO_EXEMPLARS).unwrap().unique_count as f64 - gt).abs();
            frozen += (c.count_video_frozen(&v.frames, &spec, DEFAULT_VIDEO_EXEMPLARS).unwrap().unique_count as f64 - gt).abs();
        }
        let n = videos.len() as f64;
        if dynamic < frozen {
            ok += 1;
        }
        lines.push(format!("seed {}: dynamic {:.2} vs frozen {:.2}", m.seed, dynamic / n, frozen / n));
    }
    check(ok * 2 > models.len(), format!("{ok}/{} seeds with dynamic MAE below frozen; {}", models.len(), lines.join(", ")))
}

fn p9_metrics() -> Outcome {
    let b = |x0, y0, x1, y1| BBox::from_corners(x0, y0, x1, y1).unwrap();
    let perfect_boxes = vec![b(0.1, 0.1, 0.3, 0.3), b(0.5, 0.5, 0.9, 0.8)];
    let preds = vec![ImagePrediction { count: 2, boxes: perfect_boxes.clone(), scores: vec![0.9, 0.8] }];
    let gts = vec![ImageTruth { count: 2, boxes: perfect_boxes }];
    let r = evaluate(&preds, &gts, EvalMode::Detection, None).unwrap();
    if (r.mae, r.rmse, r.ap, r.ap50) != (0.0, 0.0, Some(1.0), Some(1.0)) {
        return Err(format!("perfect predictions give {r:?}"));
    }
    let (m, s) = (mae(&[3.0, 5.0], &[4.0, 4.0]), rmse(&[3.0, 5.0], &[4.0, 4.0]));
    if (m, s) != (1.0, 1.0) {
        return Err(format!("[3,5] vs [4,4]: MAE {m}, RMSE {s}"));
    }
    let one = vec![ImagePrediction { count: 1, boxes: vec![b(0.0, 0.0, 0.6, 1.0)], scores: vec![0.9] }];
    let truth = vec![ImageTruth { count: 1, boxes: vec![b(0.0, 0.0, 1.0, 1.0)] }];
    let r = evaluate(&one, &truth, EvalMode::Detection, None).unwrap();
    if (r.ap50, r.ap) != (Some(1.0), Some(0.3)) || average_precision(&one, &truth, 0.65) != 0.0 {
        return Err(format!("IoU 0.6 example: AP50 {:?}, AP {:?}", r.ap50, r.ap));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let n = rng.random_range(1..=20);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..100)).collect();
        let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..100)).collect();
        let preds: Vec<ImagePrediction> = p.iter().map(|&c| ImagePrediction { count: c, ..Default::default() }).collect();
        let gts: Vec<ImageTruth> = g.iter().map(|&c| ImageTruth { count: c, ..Default::default() }).collect();
        let r = evaluate(&preds, &gts, EvalMode::Counting, None).unwrap();
        if r.rmse < r.mae {
            return Err(format!("report {case}: RMSE {} below MAE {}", r.rmse, r.mae));
        }
    }
    Ok("fixtures match (MAE/RMSE 1.0, AP 3/10 at IoU 0.6, perfect = 1); RMSE >= MAE on 1000 random reports".into())
}

fn p10_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..1000 {
        let k = rng.random_range(1..=64);
        let (mp, mn) = (rng.random_range(1..=8), rng.random_range(0..=8));
        let (pos, neg) = random_sim(&mut rng, k, mp, mn);
        let s1: f64 = rng.random_range(0.01..0.99);
        let s2: f64 = rng.random_range(s1..0.995);
        let sim = SimilarityPair::new(pos.clone(), neg.clone()).unwrap();
        let lo = filter_queries(&sim, s1).unwrap().kept;
        let hi = filter_queries(&sim, s2).unwrap().kept;
        if !hi.iter().all(|i| lo.contains(i)) {
            return Err(format!("instance {case}: raising sigma {s1} -> {s2} added queries"));
        }
        let extra = Array2::from_shape_fn((k, rng.random_range(1..=4)), |_| rng.random_range(-6.0..6.0));
        let wider = ndarray::concatenate(Axis(1), &[neg.view(), extra.view()]).unwrap();
        let more = filter_queries(&SimilarityPair::new(pos, wider).unwrap(), s1).unwrap().kept;
        if !more.iter().all(|i| lo.contains(i)) {
            return Err(format!("instance {case}: extra negatives added queries"));
        }
    }
    Ok("1000 instances: kept sets shrink with sigma and with added negatives".into())
}

fn run(name: &str, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = f();
    let el = t.elapsed();
    let in_time = el <= budget;
    let (status, detail) = match (&r, in_time) {
        (Ok(d), true) => ("PASS", d.clone()),
        (Ok(d), false) => ("FAIL", format!("{d}; over time budget")),
        (Err(d), _) => ("FAIL", d.clone()),
    };
    println!("{name} {status} {title}: {detail} [{:.1}s / {}s]", el.as_secs_f64(), budget.as_secs());
    status == "PASS"
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let mut ok = true;
    ok &= run("P1", "filter oracle", s(5), p1_filter_oracle);
    ok &= run("P2", "hungarian exactness", s(10), p2_hungarian);
    ok &= run("P3", "gradient check", s(60), p3_gradients);
    ok &= run("P4", "mask law", s(5), p4_masks);
    let t = Instant::now();
    let models = train_models();
    let training = t.elapsed();
    ok &= run("P5", "negative prompts", s(20 * 60).saturating_sub(training), || p5_negative_prompts(&models));
    ok &= run("P6", "pseudo-exemplars", s(10 * 60), || p6_pseudo_exemplars(&models));
    ok &= run("P7", "adaptive cropping", s(2 * 60), || p7_adaptive(&models));
    ok &= run("P8", "video exemplars", s(10 * 60), || p8_video(&models));
    ok &= run("P9", "metric suite", s(5), p9_metrics);
    ok &= run("P10", "filter monotonicity", s(5), p10_monotonicity);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
