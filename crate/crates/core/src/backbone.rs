//! Toy image encoder, hashed text embeddings and exemplar-token extraction.
//!
//! The image encoder is a two-level strided patch pyramid. Level one embeds
//! `s x s` pixel patches (`s = fine_stride`), level two merges 2x2 blocks of
//! level-one cells. Both are projected to `D`, the coarse level is upsampled
//! to the fine grid by nearest neighbour, and the concatenation is projected
//! back to `D` and layer-normalised. Image tokens are the fused grid plus a
//! fixed sinusoidal encoding of each cell centre.

use std::collections::HashMap;
use std::path::PathBuf;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{roi_weights, FeatureGrid};
use crate::image_tensor::ImageTensor;
use crate::model::ModelConfig;
use crate::nn::{layer_norm, linear, Binder};
use crate::prompts::{tokenize, ExemplarRef, TextTokens};

/// Source of images referenced by exemplars.
pub trait ImageStore {
    fn fetch(&self, id: &str) -> Result<ImageTensor>;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryImageStore {
    images: HashMap<String, ImageTensor>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: ImageTensor) {
        self.images.insert(id.into(), image);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.images.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&ImageTensor> {
        self.images.get(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageStore for MemoryImageStore {
    fn fetch(&self, id: &str) -> Result<ImageTensor> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }
}

/// Resolves `id` to `<root>/<id>` or `<root>/<id>.png`.
#[derive(Debug, Clone)]
pub struct DirImageStore {
    root: PathBuf,
}

impl DirImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageStore for DirImageStore {
    fn fetch(&self, id: &str) -> Result<ImageTensor> {
        if id.is_empty() || id.contains("..") || id.starts_with('/') {
            return Err(Error::UnknownImage(id.to_string()));
        }
        let direct = self.root.join(id);
        let path = if direct.is_file() { direct } else { self.root.join(format!("{id}.png")) };
        if !path.is_file() {
            return Err(Error::UnknownImage(id.to_string()));
        }
        ImageTensor::load_png(path)
    }
}

/// Store with no images; every lookup fails.
pub struct EmptyStore;

impl ImageStore for EmptyStore {
    fn fetch(&self, id: &str) -> Result<ImageTensor> {
        Err(Error::UnknownImage(id.to_string()))
    }
}

/// Grid cell an image token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPosition {
    pub row: usize,
    pub col: usize,
    pub stride: usize,
}

/// Graph handles produced by [`encode_image`].
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    /// Fused fine-grid features, `N x D`. Exemplars are pooled from here.
    pub grid: Var,
    /// `grid` plus positional encoding: the image tokens.
    pub tokens: Var,
    /// Per-level projected features before fusion (fine, coarse).
    pub levels: [Var; 2],
    pub positions: Vec<TokenPosition>,
}

impl ImageEncoding {
    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pyramid as plain feature grids: fine level, coarse level, fused grid.
    pub fn feature_grids(&self, g: &Graph) -> Result<Vec<FeatureGrid>> {
        let s = self.stride;
        Ok(vec![
            FeatureGrid::new(self.grid_h, self.grid_w, s, g.value(self.levels[0]).clone())?,
            FeatureGrid::new(self.grid_h / 2, self.grid_w / 2, 2 * s, g.value(self.levels[1]).clone())?,
            FeatureGrid::new(self.grid_h, self.grid_w, s, g.value(self.grid).clone())?,
        ])
    }
}

/// `(H/s * W/s) x (s*s*3)` matrix of centred pixel patches.
fn patches(image: &ImageTensor, s: usize) -> Array2<f64> {
    let (gh, gw) = (image.height() / s, image.width() / s);
    let mut out = Array2::zeros((gh * gw, s * s * 3));
    for r in 0..gh {
        for c in 0..gw {
            let mut row = out.row_mut(r * gw + c);
            let mut k = 0;
            for y in 0..s {
                for x in 0..s {
                    let p = image.pixel(r * s + y, c * s + x);
                    for ch in p {
                        row[k] = ch as f64 - 0.5;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Sinusoidal encoding of cell centres measured in units of `unit_cells`
/// cells; first half encodes x, second half y. Neighbouring cells get the
/// same phase difference at every image size.
pub fn positional_encoding(grid_h: usize, grid_w: usize, d: usize, unit_cells: f64) -> Array2<f64> {
    let half = d / 2;
    let freqs = half / 2;
    let mut out = Array2::zeros((grid_h * grid_w, d));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let coords = [(c as f64 + 0.5) / unit_cells, (r as f64 + 0.5) / unit_cells];
            let mut row = out.row_mut(r * grid_w + c);
            for (axis, &v) in coords.iter().enumerate() {
                for i in 0..freqs {
                    let f = 64f64.powf(i as f64 / freqs.max(1) as f64);
                    let angle = std::f64::consts::PI * v * f;
                    row[axis * half + 2 * i] = angle.sin();
                    row[axis * half + 2 * i + 1] = angle.cos();
                }
            }
        }
    }
    out
}

pub fn encode_image(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, image: &ImageTensor) -> Result<ImageEncoding> {
    let s = cfg.fine_stride;
    let coarse = 2 * s;
    if image.height() < coarse || image.width() < coarse {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than the coarsest stride {coarse}",
            image.width(),
            image.height()
        )));
    }
    if image.height() % coarse != 0 || image.width() % coarse != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} is not a multiple of the coarsest stride {coarse}",
            image.width(),
            image.height()
        )));
    }
    let (gh, gw) = (image.height() / s, image.width() / s);
    let (ch, cw) = (gh / 2, gw / 2);

    let px = g.constant(patches(image, s));
    let l1 = linear(g, b, px, "encoder.patch1");
    let l1 = g.relu(l1);

    let mut quads: [Vec<usize>; 4] = Default::default();
    for r in 0..ch {
        for c in 0..cw {
            for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                quads[q].push((2 * r + dr) * gw + 2 * c + dc);
            }
        }
    }
    let parts: Vec<Var> = quads.iter().map(|idx| g.gather_rows(l1, idx)).collect();
    let merged = g.concat_cols(&parts);
    let l2 = linear(g, b, merged, "encoder.patch2");
    let l2 = g.relu(l2);

    let fine = linear(g, b, l1, "encoder.proj1");
    let coarse_proj = linear(g, b, l2, "encoder.proj2");
    let up_idx: Vec<usize> = (0..gh * gw).map(|i| (i / gw / 2) * cw + (i % gw) / 2).collect();
    let up = g.gather_rows(coarse_proj, &up_idx);
    let cat = g.concat_cols(&[fine, up]);
    let fused = linear(g, b, cat, "encoder.fuse");
    let grid = layer_norm(g, b, fused, "encoder.norm");
    let pe = g.constant(positional_encoding(gh, gw, cfg.d_model, cfg.pos_unit_cells));
    let tokens = g.add(grid, pe);

    let positions = (0..gh * gw)
        .map(|i| TokenPosition { row: i / gw, col: i % gw, stride: s })
        .collect();
    Ok(ImageEncoding { grid_h: gh, grid_w: gw, stride: s, grid, tokens, levels: [fine, coarse_proj], positions })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Fixed `N(0, 1)` vector for a word, keyed by its hash and the table seed.
pub fn word_vector(word: &str, seed: u64, d: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ seed);
    Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng))
}

/// Raw table rows for `words`, `W x D`.
pub fn word_table(words: &[String], seed: u64, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((words.len(), d));
    for (i, w) in words.iter().enumerate() {
        out.row_mut(i).assign(&word_vector(w, seed, d));
    }
    out
}

/// Text tokens (`None` when the text has no words) and class spans.
pub fn encode_text(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, text: &str) -> Result<(Option<Var>, TextTokens)> {
    let toks = tokenize(text)?;
    if toks.words.is_empty() {
        return Ok((None, toks));
    }
    let raw = g.constant(word_table(&toks.words, cfg.text_seed, cfg.d_model));
    let h = linear(g, b, raw, "text.l1");
    let h = g.relu(h);
    let h = linear(g, b, h, "text.l2");
    let x = g.add(raw, h);
    let ty = b.get(g, "prompt.text_type");
    Ok((Some(g.add_broadcast(x, ty)), toks))
}

/// Per-call image cache for exemplar extraction. Every image goes through
/// the same [`encode_image`] path; the input image is registered up front so
/// internal exemplars reuse its encoding.
pub struct ExemplarStreams<'s> {
    store: &'s dyn ImageStore,
    cache: HashMap<String, Rc<ImageEncoding>>,
    encoder_calls: usize,
}

impl<'s> ExemplarStreams<'s> {
    pub fn new(store: &'s dyn ImageStore) -> Self {
        Self { store, cache: HashMap::new(), encoder_calls: 0 }
    }

    /// Number of times the image encoder ran through this cache.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls
    }

    pub fn register(&mut self, id: &str, encoding: ImageEncoding) -> Rc<ImageEncoding> {
        let enc = Rc::new(encoding);
        self.cache.insert(id.to_string(), enc.clone());
        enc
    }

    pub fn encode(
        &mut self,
        cfg: &ModelConfig,
        g: &mut Graph,
        b: &mut Binder,
        id: &str,
        image: &ImageTensor,
    ) -> Result<Rc<ImageEncoding>> {
        let enc = encode_image(cfg, g, b, image)?;
        self.encoder_calls += 1;
        Ok(self.register(id, enc))
    }

    pub fn resolve(&mut self, cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, id: &str) -> Result<Rc<ImageEncoding>> {
        if let Some(enc) = self.cache.get(id) {
            return Ok(enc.clone());
        }
        let image = self.store.fetch(id)?.fit_to_multiple(2 * cfg.fine_stride);
        self.encode(cfg, g, b, id, &image)
    }

    /// One token per exemplar, `E x D`, in `refs` order. `None` if `refs`
    /// is empty.
    pub fn extract(&mut self, cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, refs: &[ExemplarRef]) -> Result<Option<Var>> {
        if refs.is_empty() {
            return Ok(None);
        }
        let mut pooled = Vec::with_capacity(refs.len());
        let mut order: Vec<&str> = Vec::new();
        let mut rows: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, r) in refs.iter().enumerate() {
            r.bbox.validate()?;
            if !rows.contains_key(r.image_ref.as_str()) {
                order.push(&r.image_ref);
            }
            rows.entry(&r.image_ref).or_default().push(i);
        }
        let mut slot = vec![0usize; refs.len()];
        let mut offset = 0;
        for id in order {
            let enc = self.resolve(cfg, g, b, id)?;
            let members = &rows[id];
            let mut w = Array2::zeros((members.len(), enc.token_count()));
            for (k, &i) in members.iter().enumerate() {
                for (cell, weight) in roi_weights(enc.grid_h, enc.grid_w, &refs[i].bbox, cfg.roi_out_size) {
                    w[[k, cell]] = weight;
                }
                slot[i] = offset + k;
            }
            offset += members.len();
            let wv = g.constant(w);
            pooled.push(g.matmul(wv, enc.grid));
        }
        let all = g.concat_rows(&pooled);
        let all = g.gather_rows(all, &slot);
        let x = linear(g, b, all, "prompt.exemplar_proj");
        let ty = b.get(g, "prompt.exemplar_type");
        Ok(Some(g.add_broadcast(x, ty)))
    }
}
