//! Counting pipelines built on a trained model: single pass, iterative
//! pseudo-exemplar refinement, adaptive cropping and video counting.

use serde::{Deserialize, Serialize};

use crate::backbone::{ImageStore, MemoryImageStore};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::filtering::{filter_queries, select_pseudo_exemplars, CountResult, SimilarityPair, DEFAULT_SIGMA};
use crate::geometry::{iou_unchecked, BBox};
use crate::image_tensor::ImageTensor;
use crate::metrics::{evaluate, CountPair, EvalMode, EvalReport, ImagePrediction, ImageTruth, PromptTrials};
use crate::model::{Inference, Model};
use crate::prompts::{ExemplarRef, Polarity, PromptSpec};

/// Model, exemplar image store and threshold shared by all pipelines.
#[derive(Clone, Copy)]
pub struct Counter<'a> {
    pub model: &'a Model,
    pub store: &'a dyn ImageStore,
    pub sigma: f64,
}

impl<'a> Counter<'a> {
    pub fn new(model: &'a Model, store: &'a dyn ImageStore) -> Self {
        Self { model, store, sigma: DEFAULT_SIGMA }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn infer(&self, image: &ImageTensor, image_id: &str, spec: &PromptSpec) -> Result<Inference> {
        spec.validate()?;
        self.model.infer(image, image_id, spec, self.store)
    }

    /// One full forward pass followed by the two-condition filter.
    pub fn count_image(&self, image: &ImageTensor, image_id: &str, spec: &PromptSpec) -> Result<CountResult> {
        let inf = self.infer(image, image_id, spec)?;
        result_of(&inf, self.sigma)
    }
}

pub fn result_of(inf: &Inference, sigma: f64) -> Result<CountResult> {
    let d = filter_queries(&inf.similarity()?, sigma)?;
    Ok(CountResult::from_decision(&d, &inf.batch.boxes))
}

/// One pass of `iterative_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub count: usize,
    /// Positive pseudo-exemplars fed into this pass.
    pub exemplars: Vec<BBox>,
    /// Negative pseudo-exemplars fed into this pass, per negative class.
    pub negative_exemplars: Vec<Vec<BBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeResult {
    pub result: CountResult,
    pub trace: Vec<IterationRecord>,
}

pub const DEFAULT_PSEUDO_EXEMPLARS: usize = 3;
pub const DEFAULT_MAX_ITER: usize = 5;

fn with_pseudo_exemplars(spec: &PromptSpec, image_id: &str, pos: &[BBox], neg: &[Vec<BBox>]) -> PromptSpec {
    let refs = |bs: &[BBox]| bs.iter().map(|b| ExemplarRef::new(image_id, *b)).collect::<Vec<_>>();
    let mut out = spec.clone();
    out.positive.exemplars = refs(pos);
    for (c, bs) in out.negatives.iter_mut().zip(neg) {
        c.exemplars = refs(bs);
    }
    out
}

/// Negative pseudo-exemplars per negative class: queries more similar to that
/// class than to the positive prompt.
fn negative_pseudo(inf: &Inference, sigma: f64, n: usize) -> Result<Vec<Vec<BBox>>> {
    (1..inf.groups.num_groups)
        .map(|g| {
            let sim = SimilarityPair::from_logits(&inf.logits, &inf.groups, Some(&[g]))?;
            select_pseudo_exemplars(&inf.batch, &sim, sigma, n, Polarity::Negative)
        })
        .collect()
}

impl Counter<'_> {
    /// Text-only pass, then repeated passes with the top-`n` pseudo-exemplars
    /// of the previous pass until the count repeats or `max_iter` passes
    /// have run.
    pub fn iterative_count(&self, image: &ImageTensor, image_id: &str, spec: &PromptSpec, n: usize, max_iter: usize) -> Result<IterativeResult> {
        if max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !spec.classes().all(|c| c.has_text()) {
            return Err(Error::InvalidPrompt("iterative counting needs text for every class".into()));
        }
        let base = with_pseudo_exemplars(spec, image_id, &[], &vec![vec![]; spec.negatives.len()]);
        let mut inf = self.infer(image, image_id, &base)?;
        let mut result = result_of(&inf, self.sigma)?;
        let mut trace = vec![IterationRecord { iteration: 0, count: result.count, exemplars: vec![], negative_exemplars: vec![] }];
        for it in 1..max_iter {
            let sim = inf.similarity()?;
            let pos = if result.count == 0 {
                vec![]
            } else {
                select_pseudo_exemplars(&inf.batch, &sim, self.sigma, n, Polarity::Positive)?
            };
            if pos.is_empty() {
                break;
            }
            let neg = negative_pseudo(&inf, self.sigma, n)?;
            let next = with_pseudo_exemplars(spec, image_id, &pos, &neg);
            inf = self.infer(image, image_id, &next)?;
            let prev = result.count;
            result = result_of(&inf, self.sigma)?;
            trace.push(IterationRecord { iteration: it, count: result.count, exemplars: pos, negative_exemplars: neg });
            if result.count == prev {
                break;
            }
        }
        Ok(IterativeResult { result, trace })
    }
}

/// Resamples an image crop to a larger size.
pub trait Upscaler {
    fn upscale(&self, image: &ImageTensor, factor: usize) -> ImageTensor;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bilinear;

#[derive(Debug, Clone, Copy, Default)]
pub struct Nearest;

impl Upscaler for Bilinear {
    fn upscale(&self, image: &ImageTensor, factor: usize) -> ImageTensor {
        image.resize_bilinear(image.height() * factor, image.width() * factor)
    }
}

impl Upscaler for Nearest {
    fn upscale(&self, image: &ImageTensor, factor: usize) -> ImageTensor {
        image.resize_nearest(image.height() * factor, image.width() * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Count at which cropping starts; `None` means `ceil(0.89 K)`.
    pub trigger: Option<usize>,
    /// Crop side in units of the smallest predicted box side.
    pub crop_factor: usize,
    pub upscale: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { trigger: None, crop_factor: 25, upscale: 4 }
    }
}

pub fn default_trigger(num_queries: usize) -> usize {
    (0.89 * num_queries as f64).ceil() as usize
}

/// Pixel rectangle `(x0, y0, w, h)`.
pub type Tile = (usize, usize, usize, usize);

/// Fewest non-overlapping tiles of at most `tile_h x tile_w` covering the
/// image, split as evenly as possible so no edge tile is a thin sliver.
pub fn tile_image(height: usize, width: usize, tile_h: usize, tile_w: usize) -> Vec<Tile> {
    let cuts = |len: usize, tile: usize| {
        let n = len.div_ceil(tile.max(1)).max(1);
        (0..=n).map(|i| i * len / n).collect::<Vec<_>>()
    };
    let (ys, xs) = (cuts(height, tile_h), cuts(width, tile_w));
    let mut out = Vec::new();
    for y in ys.windows(2) {
        for x in xs.windows(2) {
            out.push((x[0], y[0], x[1] - x[0], y[1] - y[0]));
        }
    }
    out
}

/// Store that answers one extra id before deferring to a base store.
struct Layered<'a> {
    base: &'a dyn ImageStore,
    extra: MemoryImageStore,
}

impl ImageStore for Layered<'_> {
    fn fetch(&self, id: &str) -> Result<ImageTensor> {
        match self.extra.get(id) {
            Some(img) => Ok(img.clone()),
            None => self.base.fetch(id),
        }
    }
}

impl Counter<'_> {
    /// Single pass; when the count reaches the trigger the image is tiled into
    /// crops sized from the smallest predicted box, each crop is upscaled and
    /// counted, and the crop counts are summed.
    pub fn adaptive_count(
        &self,
        image: &ImageTensor,
        image_id: &str,
        spec: &PromptSpec,
        cfg: &AdaptiveConfig,
        upscaler: &dyn Upscaler,
    ) -> Result<CountResult> {
        if cfg.crop_factor == 0 || cfg.upscale == 0 {
            return Err(Error::Config("crop factor and upscale factor must be positive".into()));
        }
        let full = self.count_image(image, image_id, spec)?;
        let trigger = cfg.trigger.unwrap_or_else(|| default_trigger(self.model.config.num_queries));
        if full.count < trigger || full.boxes.is_empty() {
            return Ok(full);
        }
        let (h, w) = (image.height(), image.width());
        let mut min_h = full.boxes.iter().map(|b| b.h * h as f64).fold(f64::INFINITY, f64::min);
        let mut min_w = full.boxes.iter().map(|b| b.w * w as f64).fold(f64::INFINITY, f64::min);
        if min_h <= 1.0 || min_w <= 1.0 {
            log::warn!("smallest predicted box is {min_w:.2}x{min_h:.2} px; using a 1 px floor");
            min_h = min_h.max(1.0);
            min_w = min_w.max(1.0);
        }
        let th = (cfg.crop_factor as f64 * min_h).round() as usize;
        let tw = (cfg.crop_factor as f64 * min_w).round() as usize;

        // Internal exemplars now live in a different image; keep them
        // reachable under the original id.
        let store = Layered { base: self.store, extra: MemoryImageStore::new() };
        let mut store = store;
        store.extra.insert(image_id, image.clone());
        let sub = Counter { model: self.model, store: &store, sigma: self.sigma };

        let mut out = CountResult::empty();
        for (i, (x0, y0, cw, ch)) in tile_image(h, w, th, tw).into_iter().enumerate() {
            let crop = upscaler.upscale(&image.crop(x0, y0, cw, ch)?, cfg.upscale);
            let frame = BBox::from_corners(
                x0 as f64 / w as f64,
                y0 as f64 / h as f64,
                (x0 + cw) as f64 / w as f64,
                (y0 + ch) as f64 / h as f64,
            )?;
            let r = sub.count_image(&crop, &format!("{image_id}#crop{i}"), spec)?;
            out.count += r.count;
            out.boxes.extend(r.boxes.iter().map(|b| b.to_parent(&frame)));
            out.scores.extend(r.scores);
            out.rejected.below_threshold += r.rejected.below_threshold;
            out.rejected.negative_dominates += r.rejected.negative_dominates;
        }
        Ok(out)
    }
}

/// Per-frame output of a video run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub frames: Vec<CountResult>,
    /// Track id of each kept box, aligned with `frames[t].boxes`.
    pub tracks: Vec<Vec<usize>>,
    pub unique_count: usize,
}

pub const DEFAULT_VIDEO_EXEMPLARS: usize = 10;
pub const TRACK_IOU: f64 = 0.3;
/// Frames a track may go undetected and still be resumed.
pub const TRACK_MEMORY: usize = 3;

/// Greedy association against the latest box of every track seen within the
/// last `memory` frames: pairs with IoU at least `threshold` are linked in
/// order of decreasing IoU; unlinked boxes start new tracks. `memory = 1`
/// links consecutive frames only.
pub fn associate(frames: &[Vec<BBox>], threshold: f64, memory: usize) -> (Vec<Vec<usize>>, usize) {
    // (latest box, frame last seen) per track id.
    let mut live: Vec<(BBox, usize)> = Vec::new();
    let mut tracks: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    for (t, boxes) in frames.iter().enumerate() {
        let mut ids = vec![usize::MAX; boxes.len()];
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            for (j, (p, seen)) in live.iter().enumerate() {
                if t - seen > memory {
                    continue;
                }
                let v = iou_unchecked(b, p);
                if v >= threshold {
                    pairs.push((v, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used = vec![false; live.len()];
        for (_, i, j) in pairs {
            if ids[i] == usize::MAX && !used[j] {
                ids[i] = j;
                used[j] = true;
            }
        }
        for (i, id) in ids.iter_mut().enumerate() {
            if *id == usize::MAX {
                *id = live.len();
                live.push((boxes[i], t));
            } else {
                live[*id] = (boxes[i], t);
            }
        }
        tracks.push(ids);
    }
    (tracks, live.len())
}

fn frame_id(t: usize) -> String {
    format!("frame_{t:04}")
}

fn frame_store<'a>(base: &'a dyn ImageStore, frames: &[ImageTensor]) -> Layered<'a> {
    let mut extra = MemoryImageStore::new();
    for (t, f) in frames.iter().enumerate() {
        extra.insert(frame_id(t), f.clone());
    }
    Layered { base, extra }
}

fn top_boxes(r: &CountResult, n: usize) -> Vec<BBox> {
    r.ranked_boxes().into_iter().take(n).collect()
}

fn exemplar_spec(spec: &PromptSpec, id: &str, boxes: &[BBox]) -> PromptSpec {
    let mut s = spec.clone();
    s.positive.exemplars.extend(boxes.iter().map(|b| ExemplarRef::new(id, *b)));
    s
}

impl Counter<'_> {
    fn check_video(frames: &[ImageTensor], spec: &PromptSpec, n: usize) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Config("video has no frames".into()));
        }
        if n == 0 {
            return Err(Error::Config("pseudo-exemplar budget must be at least 1".into()));
        }
        if !spec.positive.has_text() {
            return Err(Error::InvalidPrompt("video counting needs positive text".into()));
        }
        spec.validate()
    }

    /// Two passes per frame. Pass 1 uses the text plus the previous frame's
    /// top-`n` boxes (text only on frame 0); pass 2 uses the text plus the
    /// top-`n` boxes of pass 1 on the same frame. Pass-2 results are kept and
    /// carried forward.
    pub fn count_video(&self, frames: &[ImageTensor], spec: &PromptSpec, n: usize) -> Result<VideoResult> {
        Self::check_video(frames, spec, n)?;
        let store = frame_store(self.store, frames);
        let sub = Counter { model: self.model, store: &store, sigma: self.sigma };
        let mut results: Vec<CountResult> = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let id = frame_id(t);
            let first = match results.last() {
                None => spec.clone(),
                Some(prev) => exemplar_spec(spec, &frame_id(t - 1), &top_boxes(prev, n)),
            };
            let p1 = sub.count_image(frame, &id, &first)?;
            let second = exemplar_spec(spec, &id, &top_boxes(&p1, n));
            let p2 = if p1.count == 0 { p1 } else { sub.count_image(frame, &id, &second)? };
            results.push(p2);
        }
        Ok(finish_video(results))
    }

    /// Baseline: frame 0 is counted as in `count_video`; every later frame
    /// reuses frame 0's pseudo-exemplars in a single pass.
    pub fn count_video_frozen(&self, frames: &[ImageTensor], spec: &PromptSpec, n: usize) -> Result<VideoResult> {
        Self::check_video(frames, spec, n)?;
        let store = frame_store(self.store, frames);
        let sub = Counter { model: self.model, store: &store, sigma: self.sigma };
        let id0 = frame_id(0);
        let p1 = sub.count_image(&frames[0], &id0, spec)?;
        let frozen = top_boxes(&p1, n);
        let with = exemplar_spec(spec, &id0, &frozen);
        let mut results = Vec::with_capacity(frames.len());
        results.push(if p1.count == 0 { p1 } else { sub.count_image(&frames[0], &id0, &with)? });
        for (t, frame) in frames.iter().enumerate().skip(1) {
            results.push(sub.count_image(frame, &frame_id(t), &with)?);
        }
        Ok(finish_video(results))
    }
}

fn finish_video(frames: Vec<CountResult>) -> VideoResult {
    let boxes: Vec<Vec<BBox>> = frames.iter().map(|r| r.boxes.clone()).collect();
    let (tracks, unique_count) = associate(&boxes, TRACK_IOU, TRACK_MEMORY);
    VideoResult { frames, tracks, unique_count }
}

/// How `evaluate_scenes` runs the counter on each scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    #[default]
    Single,
    Iterative,
    Adaptive,
}

impl Counter<'_> {
    pub fn count_with_mode(&self, image: &ImageTensor, image_id: &str, spec: &PromptSpec, mode: CountMode) -> Result<CountResult> {
        match mode {
            CountMode::Single => self.count_image(image, image_id, spec),
            CountMode::Iterative => Ok(self.iterative_count(image, image_id, spec, DEFAULT_PSEUDO_EXEMPLARS, DEFAULT_MAX_ITER)?.result),
            CountMode::Adaptive => self.adaptive_count(image, image_id, spec, &AdaptiveConfig::default(), &Bilinear),
        }
    }

    /// Text-prompted evaluation over labelled scenes. Every class present in a
    /// scene is counted with a positive-only text prompt; one class of the
    /// scene vocabulary absent from the scene, if any, is counted as well
    /// for the negative-prediction metric.
    pub fn evaluate_scenes(&self, scenes: &[Scene], count_mode: CountMode, eval_mode: EvalMode) -> Result<EvalReport> {
        let mut vocab: Vec<String> = scenes.iter().flat_map(|s| s.classes()).collect();
        vocab.sort();
        vocab.dedup();
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut trials = PromptTrials::default();
        for (i, s) in scenes.iter().enumerate() {
            let id = format!("eval_{i}");
            let classes = s.classes();
            let mut per_class = Vec::new();
            for class in &classes {
                let r = self.count_with_mode(&s.image, &id, &PromptSpec::text_only(class, &[]), count_mode)?;
                let gt = s.boxes_of(class);
                per_class.push(CountPair { pred: r.count, gt: gt.len() });
                preds.push(ImagePrediction { count: r.count, boxes: r.boxes, scores: r.scores });
                truths.push(ImageTruth { count: gt.len(), boxes: gt });
            }
            if let (Some(absent), Some(first)) = (vocab.iter().find(|c| !classes.contains(c)), per_class.first()) {
                let r = self.count_with_mode(&s.image, &id, &PromptSpec::text_only(absent, &[]), count_mode)?;
                trials.absent.push(CountPair { pred: r.count, gt: first.gt });
            }
            trials.present.extend(per_class.iter().copied());
            if per_class.len() > 1 {
                trials.multi_class.push(per_class);
            }
        }
        evaluate(&preds, &truths, eval_mode, Some(&trials))
    }
}
