//! Targets, losses, prompt dropout, mosaics and the optimisation loop.

use std::io::Write;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::EmptyStore;
use crate::data::{Instance, Scene};
use crate::error::{Error, Result};
use crate::filtering::{check_sigma, count, filter_queries, DEFAULT_SIGMA};
use crate::geometry::{giou, BBox};
use crate::matching::{match_queries, MatchCost, MatchResult};
use crate::model::{forward, DecoderOutput, Model, ModelConfig};
use crate::nn::{Adam, AdamConfig, Binder};
use crate::prompts::{ClassPrompt, ExemplarRef, PromptSpec, TokenGroupMap};

/// Image id internal exemplars use during training and counting.
pub const INPUT_ID: &str = "input";

/// `K x M` target matrix: a matched query gets ones on the prompt columns of
/// its ground truth's class; everything else is zero.
pub fn build_targets(mr: &MatchResult, groups: &TokenGroupMap, gt_classes: &[usize], queries: usize) -> Result<Array2<f64>> {
    let fg = groups.feature_groups();
    let mut y = Array2::zeros((queries, fg.len()));
    for &(q, t) in &mr.pairs {
        let class = *gt_classes
            .get(t)
            .ok_or_else(|| Error::Shape(format!("match refers to missing ground truth {t}")))?;
        let mut any = false;
        for (j, &g) in fg.iter().enumerate() {
            if g == class {
                y[[q, j]] = 1.0;
                any = true;
            }
        }
        if !any {
            return Err(Error::InvalidPrompt(format!("ground-truth class {class} has no prompt tokens")));
        }
    }
    Ok(y)
}

/// `(l_center, l_hw, l_giou)` over matched pairs, each divided by the number
/// of matches; all zero without matches.
pub fn localization_losses(mr: &MatchResult, pred: &[BBox], gt: &[BBox]) -> Result<(f64, f64, f64)> {
    if mr.pairs.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let (mut c, mut s, mut gi) = (0.0, 0.0, 0.0);
    for &(q, t) in &mr.pairs {
        let (p, g) = (&pred[q], &gt[t]);
        c += (p.cx - g.cx).abs() + (p.cy - g.cy).abs();
        s += (p.w - g.w).abs() + (p.h - g.h).abs();
        gi += 1.0 - giou(p, g)?;
    }
    let n = mr.pairs.len() as f64;
    Ok((c / n, s / n, gi / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_giou: f64,
    pub lambda_cls: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    #[serde(default)]
    pub focal_norm: FocalNorm,
}

/// Normaliser of the summed focal terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalNorm {
    /// Mean over all `K x T` logit entries.
    Entries,
    /// Sum over all entries divided by the number of ground-truth boxes
    /// (at least 1).
    #[default]
    Matches,
}

impl FocalNorm {
    /// Factor turning the per-entry mean into this normalisation.
    pub fn factor(self, entries: usize, matches: usize) -> f64 {
        match self {
            FocalNorm::Entries => 1.0,
            FocalNorm::Matches => entries as f64 / matches.max(1) as f64,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_loc: 5.0, lambda_giou: 2.0, lambda_cls: 2.0, focal_alpha: 0.25, focal_gamma: 2.0, focal_norm: FocalNorm::default() }
    }
}

impl LossWeights {
    pub fn match_cost(&self) -> MatchCost {
        MatchCost { lambda_cls: self.lambda_cls, lambda_loc: self.lambda_loc, alpha: self.focal_alpha, gamma: self.focal_gamma }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_center: f64,
    pub l_hw: f64,
    pub l_giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_cls: f64, l_center: f64, l_hw: f64, l_giou: f64, w: &LossWeights) -> Self {
        let total = w.lambda_loc * (l_hw + l_center) + w.lambda_giou * l_giou + w.lambda_cls * l_cls;
        Self { l_cls, l_center, l_hw, l_giou, total }
    }

    fn is_finite(&self) -> bool {
        [self.l_cls, self.l_center, self.l_hw, self.l_giou, self.total].iter().all(|v| v.is_finite())
    }
}

/// Sum over rows of GIoU between predicted `(cx, cy, w, h)` rows and
/// constant ground-truth rows, built from differentiable primitives.
fn giou_sum(g: &mut Graph, pred: Var, gt: &Array2<f64>) -> Var {
    let col = |g: &mut Graph, v: Var, i: usize| g.slice_cols(v, i, i + 1);
    let corners = |g: &mut Graph, cx: Var, cy: Var, w: Var, h: Var| {
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        (g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh))
    };
    let (pcx, pcy, pw, ph) = (col(g, pred, 0), col(g, pred, 1), col(g, pred, 2), col(g, pred, 3));
    let t = g.constant(gt.clone());
    let (tcx, tcy, tw, th) = (col(g, t, 0), col(g, t, 1), col(g, t, 2), col(g, t, 3));
    let (px0, py0, px1, py1) = corners(g, pcx, pcy, pw, ph);
    let (tx0, ty0, tx1, ty1) = corners(g, tcx, tcy, tw, th);

    let ix0 = g.maximum(px0, tx0);
    let iy0 = g.maximum(py0, ty0);
    let ix1 = g.minimum(px1, tx1);
    let iy1 = g.minimum(py1, ty1);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let ap = g.mul(pw, ph);
    let at = g.mul(tw, th);
    let union = g.add(ap, at);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let hx0 = g.minimum(px0, tx0);
    let hy0 = g.minimum(py0, ty0);
    let hx1 = g.maximum(px1, tx1);
    let hy1 = g.maximum(py1, ty1);
    let hw = g.sub(hx1, hx0);
    let hh = g.sub(hy1, hy0);
    let hull = g.mul(hw, hh);
    let slack = g.sub(hull, union);
    let slack = g.div(slack, hull);
    let gi = g.sub(iou, slack);
    g.sum(gi)
}

/// Builds the total loss for one forward pass. Returns the scalar loss
/// variable, its breakdown and the match used.
pub fn loss_on_graph(
    g: &mut Graph,
    out: &DecoderOutput,
    groups: &TokenGroupMap,
    gt: &[(BBox, usize)],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown, MatchResult)> {
    let boxes = g.value(out.boxes).clone();
    let logits = g.value(out.logits).clone();
    let k = boxes.nrows();
    let mr = match_queries(&boxes, &logits, gt, groups, w.match_cost())?;
    let gt_classes: Vec<usize> = gt.iter().map(|(_, c)| *c).collect();
    let y = build_targets(&mr, groups, &gt_classes, k)?;
    let entries = y.len();
    let l_cls = g.focal_loss(out.logits, Rc::new(y), w.focal_alpha, w.focal_gamma);
    let l_cls = g.scale(l_cls, w.focal_norm.factor(entries, gt.len()));
    let mut total = g.scale(l_cls, w.lambda_cls);
    let (mut vc, mut vs, mut vg) = (0.0, 0.0, 0.0);
    if !mr.pairs.is_empty() {
        let n = mr.pairs.len() as f64;
        let q: Vec<usize> = mr.pairs.iter().map(|p| p.0).collect();
        let tgt = Array2::from_shape_fn((q.len(), 4), |(i, j)| {
            let b = &gt[mr.pairs[i].1].0;
            [b.cx, b.cy, b.w, b.h][j]
        });
        let p = g.gather_rows(out.boxes, &q);
        let tv = g.constant(tgt.clone());
        let diff = g.sub(p, tv);
        let ad = g.abs(diff);
        let c = g.slice_cols(ad, 0, 2);
        let c = g.sum(c);
        let c = g.scale(c, 1.0 / n);
        let s = g.slice_cols(ad, 2, 4);
        let s = g.sum(s);
        let s = g.scale(s, 1.0 / n);
        let gs = giou_sum(g, p, &tgt);
        // l_giou = (n - sum giou) / n
        let gl = g.scale(gs, -1.0 / n);
        let loc = g.add(c, s);
        let loc = g.scale(loc, w.lambda_loc);
        let gl_w = g.scale(gl, w.lambda_giou);
        total = g.add(total, loc);
        total = g.add(total, gl_w);
        vc = g.scalar(c);
        vs = g.scalar(s);
        vg = 1.0 + g.scalar(gl);
    }
    let vcls = g.scalar(l_cls);
    let breakdown = LossBreakdown::combine(vcls, vc, vs, vg, w);
    // The constant 1 inside l_giou is added to the reported value only; it has
    // no gradient.
    Ok((total, breakdown, mr))
}

/// Removes all exemplars with probability `p_exemplar`; otherwise removes
/// all text with probability `p_text`. Classes that would be left empty keep
/// their other modality.
pub fn prompt_dropout(spec: &PromptSpec, rng: &mut ChaCha8Rng, p_exemplar: f64, p_text: f64) -> PromptSpec {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let mut out = spec.clone();
    if u1 < p_exemplar {
        for c in out.classes_mut() {
            if c.has_text() {
                c.exemplars.clear();
            }
        }
    } else if u2 < p_text {
        for c in out.classes_mut() {
            if !c.exemplars.is_empty() {
                c.text.clear();
            }
        }
    }
    out
}

/// 2x2 mosaic at the size of the first scene; tiles are assigned to
/// quadrants in random order.
pub fn make_mosaic(scenes: [&Scene; 4], rng: &mut ChaCha8Rng) -> Result<Scene> {
    let (h, w) = (scenes[0].image.height(), scenes[0].image.width());
    if h < 2 || w < 2 {
        return Err(Error::Shape("mosaic needs at least 2x2 pixels".into()));
    }
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let (th, tw) = (h / 2, w / 2);
    let mut img = crate::image_tensor::ImageTensor::filled(h, w, [0.0; 3]);
    let mut instances = Vec::new();
    for (quad, &si) in order.iter().enumerate() {
        let (qx, qy) = (quad % 2, quad / 2);
        let s = scenes[si];
        let tile = s.image.resize_bilinear(th, tw);
        img.paste(&tile, qx * tw, qy * th);
        let (sx, sy) = (tw as f64 / w as f64, th as f64 / h as f64);
        let (ox, oy) = (qx as f64 * sx, qy as f64 * sy);
        for inst in &s.instances {
            let b = &inst.bbox;
            instances.push(Instance {
                class: inst.class.clone(),
                bbox: BBox::new_unchecked(ox + b.cx * sx, oy + b.cy * sy, b.w * sx, b.h * sy),
            });
        }
    }
    let seed = scenes.iter().fold(0u64, |a, s| a.rotate_left(13) ^ s.seed);
    Ok(Scene { image: img, instances, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Mosaics added per base scene.
    pub mosaic_fraction: f64,
    /// Classes that may appear in prompts as absent distractors.
    pub vocabulary: Vec<String>,
    /// Up to this many absent classes are added to each prompt.
    pub absent_classes: usize,
    /// Probability that a present class other than the first is left out of
    /// the prompt; its instances then count as background.
    pub unprompted_prob: f64,
    /// Probability a present class is given internal exemplars.
    pub exemplar_prob: f64,
    pub max_exemplars: usize,
    pub drop_exemplars: f64,
    pub drop_text: f64,
    pub sigma: f64,
    /// Validation runs every this many epochs (and after the last).
    pub val_every: usize,
    /// Fit the similarity bias to the validation set after training.
    pub calibrate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            epochs: 10,
            batch_size: 8,
            seed: 0,
            mosaic_fraction: 0.2,
            vocabulary: vec![],
            absent_classes: 1,
            unprompted_prob: 0.0,
            exemplar_prob: 0.5,
            max_exemplars: 3,
            drop_exemplars: 0.1,
            drop_text: 0.1,
            sigma: DEFAULT_SIGMA,
            val_every: 1,
            calibrate: true,
        }
    }
}

/// Prompt and ground truth for one training image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub spec: PromptSpec,
    pub gt: Vec<(BBox, usize)>,
}

/// Prompt with every present class plus a few absent ones, in random order;
/// some present classes carry internal exemplars; then prompt dropout.
pub fn build_sample(scene: &Scene, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let mut present = scene.classes();
    present.shuffle(rng);
    let keep: Vec<bool> = (0..present.len()).map(|i| i == 0 || rng.random::<f64>() >= cfg.unprompted_prob).collect();
    let unprompted: Vec<String> = present.iter().zip(&keep).filter(|(_, k)| !**k).map(|(c, _)| c.clone()).collect();
    let present: Vec<String> = present.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c).collect();
    let mut absent: Vec<&String> = cfg.vocabulary.iter().filter(|c| !present.contains(c) && !unprompted.contains(c)).collect();
    absent.shuffle(rng);
    let n_absent = if cfg.absent_classes > 0 { rng.random_range(0..=cfg.absent_classes) } else { 0 };
    let mut classes: Vec<(String, bool)> = present.iter().map(|c| (c.clone(), true)).collect();
    classes.extend(absent.into_iter().take(n_absent).map(|c| (c.clone(), false)));
    if classes.is_empty() {
        let fallback = cfg.vocabulary.first().cloned().unwrap_or_else(|| "circle".into());
        classes.push((fallback, false));
    }
    classes.shuffle(rng);

    let mut prompts = Vec::new();
    for (name, is_present) in &classes {
        let mut cp = ClassPrompt::text(name.clone());
        if *is_present && cfg.max_exemplars > 0 && rng.random::<f64>() < cfg.exemplar_prob {
            let mut boxes = scene.boxes_of(name);
            boxes.shuffle(rng);
            let k = rng.random_range(1..=cfg.max_exemplars).min(boxes.len());
            cp.exemplars = boxes[..k].iter().map(|b| ExemplarRef::new(INPUT_ID, *b)).collect();
        }
        prompts.push(cp);
    }
    let positive = prompts.remove(0);
    let spec = prompt_dropout(&PromptSpec::new(positive, prompts), rng, cfg.drop_exemplars, cfg.drop_text);
    let gt = scene
        .instances
        .iter()
        .filter(|i| !unprompted.contains(&i.class))
        .map(|i| (i.bbox, classes.iter().position(|(c, _)| *c == i.class).expect("present class")))
        .collect();
    Ok(TrainSample { spec, gt })
}

/// Loss and gradients of one sample, gradients in parameter-store order.
pub fn sample_gradients(model: &Model, scene: &Scene, sample: &TrainSample, w: &LossWeights) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, true);
    let fp = forward(&model.config, &mut g, &mut b, &scene.image, INPUT_ID, &sample.spec, &EmptyStore)?;
    let (loss, breakdown, _) = loss_on_graph(&mut g, &fp.out, &fp.groups, &sample.gt, w)?;
    if !breakdown.is_finite() {
        return Ok((breakdown, vec![]));
    }
    let mut grads = g.backward(loss);
    Ok((breakdown, b.collect(&mut grads)))
}

/// Text-only count of `class` in `scene`.
pub fn count_text(model: &Model, scene: &Scene, class: &str, sigma: f64) -> Result<usize> {
    let spec = PromptSpec::text_only(class, &[]);
    let inf = model.infer(&scene.image, INPUT_ID, &spec, &EmptyStore)?;
    Ok(count(&filter_queries(&inf.similarity()?, sigma)?))
}

/// Mean absolute count error over scenes, counting the first class of each
/// (scenes without instances are skipped).
pub fn validation_mae(model: &Model, scenes: &[Scene], sigma: f64) -> Result<f64> {
    let mut err = 0.0;
    let mut n = 0;
    for s in scenes {
        let Some(class) = s.classes().into_iter().next() else { continue };
        let pred = count_text(model, s, &class, sigma)?;
        err += (pred as f64 - s.count_of(&class) as f64).abs();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { err / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_center: f64,
    pub l_hw: f64,
    pub l_giou: f64,
    pub total: f64,
    /// `NaN` on epochs without validation.
    pub val_mae: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,l_cls,l_center,l_hw,l_giou,total,val_mae";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.l_cls, self.l_center, self.l_hw, self.l_giou, self.total, self.val_mae
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub calibration: Option<Calibration>,
}

/// Constant added to the similarity bias after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub shift: f64,
    pub val_mae_before: f64,
    pub val_mae_after: f64,
}

/// Bias shifts searched by [`calibrate_bias`].
pub const CALIBRATION_RANGE: f64 = 3.0;
pub const CALIBRATION_STEP: f64 = 0.05;

/// Shifts `head.logit_bias` by the amount that minimises text-only validation
/// MAE at `sigma` (smallest shift on ties). A common shift moves every
/// similarity logit equally, so positive/negative comparisons are unchanged.
pub fn calibrate_bias(model: &mut Model, val_set: &[Scene], sigma: f64) -> Result<Calibration> {
    check_sigma(sigma)?;
    let threshold = (sigma / (1.0 - sigma)).ln();
    let mut cases: Vec<(Vec<f64>, f64)> = Vec::new();
    for s in val_set {
        let Some(class) = s.classes().into_iter().next() else { continue };
        let inf = model.infer(&s.image, INPUT_ID, &PromptSpec::text_only(&class, &[]), &EmptyStore)?;
        let sim = inf.similarity()?;
        let best: Vec<f64> = (0..sim.queries()).map(|i| sim.max_pos(i)).collect();
        cases.push((best, s.count_of(&class) as f64));
    }
    if cases.is_empty() {
        return Err(Error::Config("calibration needs labelled validation scenes".into()));
    }
    let mae_at = |shift: f64| {
        cases.iter().map(|(best, gt)| (best.iter().filter(|&&m| m + shift > threshold).count() as f64 - gt).abs()).sum::<f64>()
            / cases.len() as f64
    };
    let steps = (CALIBRATION_RANGE / CALIBRATION_STEP).round() as i64;
    let mut shifts: Vec<f64> = (-steps..=steps).map(|i| i as f64 * CALIBRATION_STEP).collect();
    shifts.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let before = mae_at(0.0);
    let (shift, after) = shifts.iter().fold((0.0, before), |(bs, bm), &s| {
        let m = mae_at(s);
        if m < bm { (s, m) } else { (bs, bm) }
    });
    model.params.get_mut("head.logit_bias").expect("bias parameter")[[0, 0]] += shift;
    Ok(Calibration { shift, val_mae_before: before, val_mae_after: after })
}

/// Mosaics built from random quadruples of `scenes`.
pub fn mosaics(scenes: &[Scene], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Scene>> {
    if scenes.is_empty() {
        return Ok(vec![]);
    }
    (0..n)
        .map(|_| {
            let pick: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..scenes.len()));
            make_mosaic(pick.map(|i| &scenes[i]), rng)
        })
        .collect()
}

/// Trains a fresh model from `cfg.model`.
pub fn train(cfg: &TrainConfig, train_set: &[Scene], val_set: &[Scene], log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone())?;
    train_model(model, cfg, train_set, val_set, log)
}

/// Continues training `model`. Deterministic for a fixed seed.
pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_mosaic = (cfg.mosaic_fraction * train_set.len() as f64).round() as usize;
    let mut data: Vec<Scene> = train_set.to_vec();
    data.extend(mosaics(train_set, n_mosaic, &mut rng)?);
    // Exemplar boxes and targets must resolve on the encoded image.
    let multiple = model.config.size_multiple();
    for s in &mut data {
        s.image = s.image.fit_to_multiple(multiple);
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg.optimizer.clone(), &model.params, cfg.epochs * steps_per_epoch);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
    }
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Array2<f64>> = model.params.iter().map(|(_, v)| Array2::zeros(v.dim())).collect();
            for &i in chunk {
                let sample = build_sample(&data[i], cfg, &mut rng)?;
                let (bd, grads) = sample_gradients(&model, &data[i], &sample, &cfg.loss)?;
                if grads.is_empty() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, step {step}: cls {} center {} hw {} giou {}",
                        bd.l_cls, bd.l_center, bd.l_hw, bd.l_giou
                    )));
                }
                for (a, g) in acc.iter_mut().zip(&grads) {
                    *a += g;
                }
                sums.l_cls += bd.l_cls;
                sums.l_center += bd.l_center;
                sums.l_hw += bd.l_hw;
                sums.l_giou += bd.l_giou;
                sums.total += bd.total;
            }
            let scale = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|a| a.mapv_inplace(|v| v * scale));
            opt.step(&mut model.params, &mut acc);
        }
        let n = data.len() as f64;
        let is_val = !val_set.is_empty() && ((epoch + 1) % cfg.val_every.max(1) == 0 || epoch + 1 == cfg.epochs);
        let val_mae = if is_val { validation_mae(&model, val_set, cfg.sigma)? } else { f64::NAN };
        let entry = EpochLog {
            epoch,
            l_cls: sums.l_cls / n,
            l_center: sums.l_center / n,
            l_hw: sums.l_hw / n,
            l_giou: sums.l_giou / n,
            total: sums.total / n,
            val_mae,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", entry.csv_row())?;
        }
        history.push(entry);
    }
    let calibration = if cfg.calibrate && !val_set.is_empty() { Some(calibrate_bias(&mut model, val_set, cfg.sigma)?) } else { None };
    Ok(TrainOutcome { model, history, calibration })
}
