//! Feature enhancer, query selection, decoder and box head.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{encode_text, ExemplarStreams, ImageStore};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ROI_OUT_SIZE};
use crate::image_tensor::ImageTensor;
use crate::nn::{self, ffn, glorot, layer_norm, linear, mha, Binder, ParamStore};
use crate::prompts::{assign_groups, feature_mask, serialize_text, MaskMode, PromptSpec, TokenGroupMap, TokenKind};

/// Architecture hyper-parameters. Serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub enhancer_blocks: usize,
    pub decoder_blocks: usize,
    /// Query budget K.
    pub num_queries: usize,
    /// Patch size of the fine pyramid level; the coarse level is twice this.
    pub fine_stride: usize,
    pub roi_out_size: usize,
    pub mask_mode: MaskMode,
    pub text_seed: u64,
    pub init_seed: u64,
    /// Side of the reference box each query starts from, in grid cells.
    pub ref_box_cells: f64,
    /// Grid cells per unit of positional-encoding coordinate.
    pub pos_unit_cells: f64,
    /// Initial value of the scalar added to every similarity logit.
    pub logit_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_mult: 4,
            enhancer_blocks: 6,
            decoder_blocks: 6,
            num_queries: 100,
            fine_stride: 8,
            roi_out_size: ROI_OUT_SIZE,
            mask_mode: MaskMode::OptionB,
            text_seed: 0x5eed_7e47,
            init_seed: 0,
            ref_box_cells: 2.0,
            pos_unit_cells: 8.0,
            logit_bias_init: -(99f64.ln()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_model % 4 != 0 {
            return bad("d_model must be a multiple of 4 (positional encoding)");
        }
        if self.enhancer_blocks == 0 || self.decoder_blocks == 0 {
            return bad("block counts must be at least 1");
        }
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1");
        }
        if self.fine_stride == 0 || self.ffn_mult == 0 || self.roi_out_size == 0 {
            return bad("strides, ffn_mult and roi_out_size must be positive");
        }
        if !(self.ref_box_cells > 0.0) || !(self.pos_unit_cells > 0.0) || !self.logit_bias_init.is_finite() {
            return bad("ref_box_cells and pos_unit_cells must be positive and logit_bias_init finite");
        }
        Ok(())
    }

    /// Side length every encoded image must be a multiple of.
    pub fn size_multiple(&self) -> usize {
        2 * self.fine_stride
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    let d = cfg.d_model;
    let s = cfg.fine_stride;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut p = ParamStore::new();
    let r = &mut rng;

    nn::init_linear(&mut p, r, "encoder.patch1", s * s * 3, d);
    nn::init_linear(&mut p, r, "encoder.patch2", 4 * d, d);
    nn::init_linear(&mut p, r, "encoder.proj1", d, d);
    nn::init_linear(&mut p, r, "encoder.proj2", d, d);
    nn::init_linear(&mut p, r, "encoder.fuse", 2 * d, d);
    nn::init_layer_norm(&mut p, "encoder.norm", d);

    nn::init_linear(&mut p, r, "text.l1", d, d);
    nn::init_linear(&mut p, r, "text.l2", d, d);
    nn::init_linear(&mut p, r, "prompt.exemplar_proj", d, d);
    p.insert("prompt.text_type", glorot(r, 1, d).mapv(|v| 0.1 * v));
    p.insert("prompt.exemplar_type", glorot(r, 1, d).mapv(|v| 0.1 * v));

    for blk in 0..cfg.enhancer_blocks {
        let pre = format!("enhancer.{blk}");
        for ln in ["ln_p_sa", "ln_x_sa", "ln_x_ca", "ln_p_mem", "ln_p_ca", "ln_x_mem", "ln_x_ffn", "ln_p_ffn"] {
            nn::init_layer_norm(&mut p, &format!("{pre}.{ln}"), d);
        }
        for att in ["sa_p", "sa_x", "ca_x", "ca_p"] {
            nn::init_mha(&mut p, r, &format!("{pre}.{att}"), d);
        }
        nn::init_ffn(&mut p, r, &format!("{pre}.ffn_x"), d, cfg.hidden());
        nn::init_ffn(&mut p, r, &format!("{pre}.ffn_p"), d, cfg.hidden());
    }

    nn::init_layer_norm(&mut p, "decoder.ln_x_mem", d);
    nn::init_layer_norm(&mut p, "decoder.ln_p_mem", d);
    for blk in 0..cfg.decoder_blocks {
        let pre = format!("decoder.{blk}");
        for ln in ["ln_sa", "ln_cx", "ln_cp", "ln_ffn"] {
            nn::init_layer_norm(&mut p, &format!("{pre}.{ln}"), d);
        }
        for att in ["sa", "cx", "cp"] {
            nn::init_mha(&mut p, r, &format!("{pre}.{att}"), d);
        }
        nn::init_ffn(&mut p, r, &format!("{pre}.ffn"), d, cfg.hidden());
    }
    nn::init_layer_norm(&mut p, "decoder.final_norm", d);
    nn::init_layer_norm(&mut p, "head.prompt_norm", d);
    p.insert("head.logit_bias", Array2::from_elem((1, 1), cfg.logit_bias_init));

    nn::init_linear(&mut p, r, "box.l1", d, d);
    nn::init_linear(&mut p, r, "box.l2", d, d);
    nn::init_linear(&mut p, r, "box.l3", d, 4);
    // Boxes start at their reference boxes.
    p.get_mut("box.l3.w").expect("just inserted").fill(0.0);
    p
}

/// Prompt features (separators excluded) and their group layout.
pub struct PromptFeatures {
    pub tokens: Var,
    pub groups: TokenGroupMap,
}

/// Serializes, tokenizes and embeds `spec`, placing each class's text tokens
/// followed by its exemplar tokens.
pub fn build_prompt(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &mut Binder,
    spec: &PromptSpec,
    streams: &mut ExemplarStreams,
) -> Result<PromptFeatures> {
    spec.validate()?;
    let text = serialize_text(spec);
    let (text_tokens, toks) = encode_text(cfg, g, b, &text)?;
    let groups = assign_groups(spec, &toks.spans)?;
    let refs: Vec<_> = spec.classes().flat_map(|c| c.exemplars.iter().cloned()).collect();
    let ex_tokens = streams.extract(cfg, g, b, &refs)?;

    let n_words = toks.words.len();
    let mut class_offset = Vec::new();
    let mut acc = 0;
    for c in spec.classes() {
        class_offset.push(acc);
        acc += c.exemplars.len();
    }
    let idx: Vec<usize> = groups
        .features()
        .map(|r| match r.kind {
            TokenKind::Text(w) => w,
            TokenKind::Exemplar { class, index } => n_words + class_offset[class] + index,
            TokenKind::Separator => unreachable!("features() skips separators"),
        })
        .collect();
    let pool = match (text_tokens, ex_tokens) {
        (Some(t), Some(e)) => g.concat_rows(&[t, e]),
        (Some(t), None) => t,
        (None, Some(e)) => e,
        (None, None) => return Err(Error::InvalidPrompt("prompt has no tokens".into())),
    };
    let tokens = g.gather_rows(pool, &idx);
    Ok(PromptFeatures { tokens, groups })
}

/// One enhancer block: masked prompt self-attention, image self-attention,
/// image-from-prompt and prompt-from-image cross-attention, feed-forwards.
pub fn enhancer_block(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &mut Binder,
    x: Var,
    p: Var,
    mask: &Rc<Array2<bool>>,
    blk: usize,
) -> (Var, Var) {
    let pre = format!("enhancer.{blk}");
    let h = cfg.heads;
    let n = |g: &mut Graph, b: &mut Binder, v: Var, name: &str| layer_norm(g, b, v, &format!("{pre}.{name}"));

    let pn = n(g, b, p, "ln_p_sa");
    let d = mha(g, b, pn, pn, h, Some(mask.clone()), &format!("{pre}.sa_p"));
    let p = g.add(p, d);

    let xn = n(g, b, x, "ln_x_sa");
    let d = mha(g, b, xn, xn, h, None, &format!("{pre}.sa_x"));
    let x = g.add(x, d);

    let xn = n(g, b, x, "ln_x_ca");
    let pm = n(g, b, p, "ln_p_mem");
    let d = mha(g, b, xn, pm, h, None, &format!("{pre}.ca_x"));
    let x = g.add(x, d);

    let pn = n(g, b, p, "ln_p_ca");
    let xm = n(g, b, x, "ln_x_mem");
    let d = mha(g, b, pn, xm, h, None, &format!("{pre}.ca_p"));
    let p = g.add(p, d);

    let xn = n(g, b, x, "ln_x_ffn");
    let d = ffn(g, b, xn, &format!("{pre}.ffn_x"));
    let x = g.add(x, d);
    let pn = n(g, b, p, "ln_p_ffn");
    let d = ffn(g, b, pn, &format!("{pre}.ffn_p"));
    let p = g.add(p, d);
    (x, p)
}

/// Runs all enhancer blocks. `mask` is over prompt features.
pub fn enhance(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &mut Binder,
    image_tokens: Var,
    prompt_tokens: Var,
    mask: &Array2<bool>,
) -> Result<(Var, Var)> {
    let m = g.shape(prompt_tokens).0;
    if mask.dim() != (m, m) {
        return Err(Error::Shape(format!("mask {:?} does not match {m} prompt tokens", mask.dim())));
    }
    let mask = Rc::new(mask.clone());
    let (mut x, mut p) = (image_tokens, prompt_tokens);
    for blk in 0..cfg.enhancer_blocks {
        (x, p) = enhancer_block(cfg, g, b, x, p, &mask, blk);
    }
    Ok((x, p))
}

/// Indices of the `k` image tokens with the largest max inner product against
/// any prompt feature, highest first; ties go to the lower index.
pub fn select_queries(image: &Array2<f64>, prompt: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    let n = image.nrows();
    if k > n {
        return Err(Error::Shape(format!(
            "only {n} image tokens for {k} queries; use a smaller query budget or a larger image"
        )));
    }
    if prompt.nrows() == 0 {
        return Err(Error::Shape("no prompt features to select against".into()));
    }
    let sims = image.dot(&prompt.t());
    let scores: Vec<f64> = sims
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("selection scores".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn decoder_block(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, q: Var, xm: Var, pm: Var, blk: usize) -> Var {
    let pre = format!("decoder.{blk}");
    let h = cfg.heads;
    let qn = layer_norm(g, b, q, &format!("{pre}.ln_sa"));
    let d = mha(g, b, qn, qn, h, None, &format!("{pre}.sa"));
    let q = g.add(q, d);
    let qn = layer_norm(g, b, q, &format!("{pre}.ln_cx"));
    let d = mha(g, b, qn, xm, h, None, &format!("{pre}.cx"));
    let q = g.add(q, d);
    let qn = layer_norm(g, b, q, &format!("{pre}.ln_cp"));
    let d = mha(g, b, qn, pm, h, None, &format!("{pre}.cp"));
    let q = g.add(q, d);
    let qn = layer_norm(g, b, q, &format!("{pre}.ln_ffn"));
    let d = ffn(g, b, qn, &format!("{pre}.ffn"));
    g.add(q, d)
}

/// Where each query's box starts and how its raw offsets are scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    /// Inverse-sigmoid `(cx, cy, w, h)` of the reference boxes, `K x 4`.
    pub logits: Array2<f64>,
    /// Multiplier on each raw offset, `K x 4`. Centre offsets are scaled so
    /// one unit moves the centre by about one grid cell at any image size;
    /// size offsets act on the logit directly, which for small boxes is
    /// already a relative change.
    pub scales: Array2<f64>,
}

/// Reference boxes for queries seeded at `selected` cells.
pub fn reference_boxes(cfg: &ModelConfig, selected: &[usize], grid_h: usize, grid_w: usize) -> References {
    let logit = |v: f64| {
        let v = v.clamp(1e-4, 1.0 - 1e-4);
        (v / (1.0 - v)).ln()
    };
    let mut logits = Array2::zeros((selected.len(), 4));
    let mut scales = Array2::ones((selected.len(), 4));
    for (i, &t) in selected.iter().enumerate() {
        let (r, c) = (t / grid_w, t % grid_w);
        let (x, y) = ((c as f64 + 0.5) / grid_w as f64, (r as f64 + 0.5) / grid_h as f64);
        logits[[i, 0]] = logit(x);
        logits[[i, 1]] = logit(y);
        logits[[i, 2]] = logit(cfg.ref_box_cells / grid_w as f64);
        logits[[i, 3]] = logit(cfg.ref_box_cells / grid_h as f64);
        scales[[i, 0]] = 1.0 / (grid_w as f64 * x * (1.0 - x));
        scales[[i, 1]] = 1.0 / (grid_h as f64 * y * (1.0 - y));
    }
    References { logits, scales }
}

/// Graph outputs of the decoder.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// Final query vectors, `K x D`.
    pub queries: Var,
    /// Query/prompt-feature similarity logits, `K x M`.
    pub logits: Var,
    /// Raw `(cx, cy, w, h)` box predictions in `(0, 1)`, `K x 4`.
    pub boxes: Var,
    /// Normalised query and prompt features entering the similarity head.
    pub query_features: Var,
    pub prompt_features: Var,
}

pub fn decode(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &mut Binder,
    queries: Var,
    image: Var,
    prompt: Var,
    refs: References,
) -> Result<DecoderOutput> {
    let (k, d) = g.shape(queries);
    if refs.logits.dim() != (k, 4) || refs.scales.dim() != (k, 4) || g.shape(image).1 != d || g.shape(prompt).1 != d {
        return Err(Error::Shape("decoder input shapes disagree".into()));
    }
    let xm = layer_norm(g, b, image, "decoder.ln_x_mem");
    let pm = layer_norm(g, b, prompt, "decoder.ln_p_mem");
    let mut q = queries;
    for blk in 0..cfg.decoder_blocks {
        q = decoder_block(cfg, g, b, q, xm, pm, blk);
    }
    let qf = layer_norm(g, b, q, "decoder.final_norm");
    let pf = layer_norm(g, b, prompt, "head.prompt_norm");
    let sim = g.matmul_nt(qf, pf);
    let sim = g.scale(sim, 1.0 / (d as f64).sqrt());
    let bias = b.get(g, "head.logit_bias");
    let logits = g.add_broadcast(sim, bias);

    let h = linear(g, b, qf, "box.l1");
    let h = g.relu(h);
    let h = linear(g, b, h, "box.l2");
    let h = g.relu(h);
    let o = linear(g, b, h, "box.l3");
    let sc = g.constant(refs.scales);
    let o = g.mul(o, sc);
    let r = g.constant(refs.logits);
    let o = g.add(o, r);
    let boxes = g.sigmoid(o);
    Ok(DecoderOutput { queries: q, logits, boxes, query_features: qf, prompt_features: pf })
}

/// Everything a single forward pass leaves on the graph.
pub struct ForwardPass {
    pub groups: TokenGroupMap,
    pub selected: Vec<usize>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub prompt: Var,
    pub image: Var,
    pub out: DecoderOutput,
    pub encoder_calls: usize,
}

/// Encode, enhance, select and decode. `image` must already have sides that
/// are multiples of [`ModelConfig::size_multiple`].
#[allow(clippy::too_many_arguments)]
pub fn forward(
    cfg: &ModelConfig,
    g: &mut Graph,
    b: &mut Binder,
    image: &ImageTensor,
    image_id: &str,
    spec: &PromptSpec,
    store: &dyn ImageStore,
) -> Result<ForwardPass> {
    let mut streams = ExemplarStreams::new(store);
    let enc = streams.encode(cfg, g, b, image_id, image)?;
    let prompt = build_prompt(cfg, g, b, spec, &mut streams)?;
    let mask = feature_mask(&prompt.groups, cfg.mask_mode);
    let (x, p) = enhance(cfg, g, b, enc.tokens, prompt.tokens, &mask)?;
    let selected = select_queries(g.value(x), g.value(p), cfg.num_queries)?;
    let q0 = g.gather_rows(x, &selected);
    let refs = reference_boxes(cfg, &selected, enc.grid_h, enc.grid_w);
    let out = decode(cfg, g, b, q0, x, p, refs)?;
    Ok(ForwardPass {
        groups: prompt.groups,
        selected,
        grid_h: enc.grid_h,
        grid_w: enc.grid_w,
        prompt: p,
        image: x,
        out,
        encoder_calls: streams.encoder_calls(),
    })
}

/// K decoded queries with valid boxes and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub queries: Array2<f64>,
    pub boxes: Vec<BBox>,
    /// Image-token index each query was seeded from.
    pub provenance: Vec<usize>,
}

/// Minimum side of reported boxes.
pub const MIN_BOX_SIDE: f64 = 1e-4;

/// Maps raw head outputs onto valid boxes inside the frame.
pub fn boxes_from_raw(raw: &Array2<f64>) -> Vec<BBox> {
    raw.rows()
        .into_iter()
        .map(|r| BBox::clamped(r[0], r[1], r[2], r[3], MIN_BOX_SIDE))
        .collect()
}

/// Result of an inference-only forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub batch: QueryBatch,
    /// `K x D` normalised query features.
    pub query_features: Array2<f64>,
    /// `M x D` normalised prompt features.
    pub prompt_features: Array2<f64>,
    /// `K x M` similarity logits.
    pub logits: Array2<f64>,
    pub groups: TokenGroupMap,
    pub encoder_calls: usize,
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Self { config, params })
    }

    /// Resizes `image` so the encoder accepts it.
    pub fn prepare_image(&self, image: &ImageTensor) -> ImageTensor {
        image.fit_to_multiple(self.config.size_multiple())
    }

    /// Forward pass without gradient bookkeeping. The image is resized to a
    /// valid size first; boxes are normalised so they are unaffected.
    pub fn infer(&self, image: &ImageTensor, image_id: &str, spec: &PromptSpec, store: &dyn ImageStore) -> Result<Inference> {
        let image = self.prepare_image(image);
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let fp = forward(&self.config, &mut g, &mut b, &image, image_id, spec, store)?;
        let logits = g.value(fp.out.logits).clone();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity logits".into()));
        }
        let batch = QueryBatch {
            queries: g.value(fp.out.queries).clone(),
            boxes: boxes_from_raw(g.value(fp.out.boxes)),
            provenance: fp.selected,
        };
        Ok(Inference {
            batch,
            query_features: g.value(fp.out.query_features).clone(),
            prompt_features: g.value(fp.out.prompt_features).clone(),
            logits,
            groups: fp.groups,
            encoder_calls: fp.encoder_calls,
        })
    }

    /// Similarity logits between normalised query features and normalised
    /// prompt features, as computed by the head.
    pub fn score(&self, query_features: &Array2<f64>, prompt_features: &Array2<f64>) -> Result<Array2<f64>> {
        let d = self.config.d_model;
        if query_features.ncols() != d || prompt_features.ncols() != d {
            return Err(Error::Shape("feature width differs from d_model".into()));
        }
        let bias = self.params.get("head.logit_bias").expect("bias parameter")[[0, 0]];
        Ok(query_features.dot(&prompt_features.t()) / (d as f64).sqrt() + bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{EmptyStore, MemoryImageStore};
    use crate::prompts::{ClassPrompt, ExemplarRef};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            ffn_mult: 2,
            enhancer_blocks: 2,
            decoder_blocks: 2,
            num_queries: 8,
            ..Default::default()
        }
    }

    fn test_image(h: usize, w: usize) -> ImageTensor {
        let mut img = ImageTensor::filled(h, w, [0.2, 0.3, 0.4]);
        for y in 8..20 {
            for x in 10..22 {
                img.set_pixel(y, x, [0.9, 0.1, 0.1]);
            }
        }
        img
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { num_queries: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn select_queries_prefers_matching_token_and_breaks_ties_low() {
        let mut image = Array2::zeros((5, 3));
        image[[3, 0]] = 1.0;
        image[[1, 1]] = 1.0;
        let prompt = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(select_queries(&image, &prompt, 2).unwrap(), vec![3, 0]);
        let flat = Array2::zeros((6, 3));
        assert_eq!(select_queries(&flat, &prompt, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(select_queries(&flat, &prompt, 7).is_err());
    }

    #[test]
    fn inference_shapes_and_determinism() {
        let model = Model::new(tiny()).unwrap();
        let img = test_image(32, 48);
        let spec = PromptSpec::text_only("red square", &["blue circle"]);
        let a = model.infer(&img, "in", &spec, &EmptyStore).unwrap();
        let b = model.infer(&img, "in", &spec, &EmptyStore).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.batch.boxes.len(), 8);
        assert_eq!(a.logits.dim(), (8, 4));
        assert!(a.batch.boxes.iter().all(|b| b.validate().is_ok()));
        let re = model.score(&a.query_features, &a.prompt_features).unwrap();
        assert!(re.iter().zip(a.logits.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn decoded_boxes_stay_inside_the_frame() {
        let model = Model::new(ModelConfig { init_seed: 3, ..tiny() }).unwrap();
        let spec = PromptSpec::text_only("blob", &[]);
        // 125 images x 8 queries = 1000 decoded boxes
        for seed in 0..125 {
            let img = crate::data::generate_scene(seed, &Default::default()).unwrap().image;
            let inf = model.infer(&img, "in", &spec, &EmptyStore).unwrap();
            for b in &inf.batch.boxes {
                let [x0, y0, x1, y1] = b.corners();
                assert!(x0 >= -1e-12 && y0 >= -1e-12 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
                assert!(b.w >= MIN_BOX_SIDE - 1e-12 && b.h >= MIN_BOX_SIDE - 1e-12);
            }
        }
    }

    #[test]
    fn internal_and_external_exemplars_match_on_equal_pixels() {
        let model = Model::new(tiny()).unwrap();
        let img = test_image(32, 32);
        let mut store = MemoryImageStore::new();
        store.insert("copy", img.clone());
        let bx = BBox::new(0.5, 0.45, 0.4, 0.4).unwrap();
        let mk = |r: &str| PromptSpec::new(ClassPrompt::text("").with_exemplars(vec![ExemplarRef::new(r, bx)]), vec![]);
        let internal = model.infer(&img, "input", &mk("input"), &store).unwrap();
        let external = model.infer(&img, "input", &mk("copy"), &store).unwrap();
        assert_eq!(internal.logits, external.logits);
        assert_eq!(internal.encoder_calls, 1);
        assert_eq!(external.encoder_calls, 2);
    }

    #[test]
    fn unknown_exemplar_image_is_named() {
        let model = Model::new(tiny()).unwrap();
        let bx = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let spec = PromptSpec::new(ClassPrompt::text("x").with_exemplars(vec![ExemplarRef::new("nope", bx)]), vec![]);
        let err = model.infer(&test_image(32, 32), "in", &spec, &EmptyStore).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
