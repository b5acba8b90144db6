//! Shape-world: rendered scenes of coloured shapes with exhaustive boxes,
//! single-instance exemplar images, dot grids and growing-blob videos.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::image_tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ellipse,
    Ring,
    Blob,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ellipse, Shape::Ring, Shape::Blob];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ellipse => "ellipse",
            Shape::Ring => "ring",
            Shape::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|sh| sh.name() == s)
    }

    /// Width over height of the shape's box.
    pub fn aspect(self) -> f64 {
        match self {
            Shape::Ellipse => 1.8,
            _ => 1.0,
        }
    }

    /// Whether `(u, v)` in `[-1, 1]^2` box coordinates is inside the shape.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Circle | Shape::Ellipse | Shape::Blob => r2 <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::Ring => (0.36..=1.0).contains(&r2),
        }
    }
}

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.3, 0.85]),
    ("yellow", [0.9, 0.85, 0.15]),
    ("purple", [0.6, 0.2, 0.75]),
    ("orange", [0.95, 0.55, 0.1]),
    ("cyan", [0.1, 0.8, 0.85]),
    ("white", [0.95, 0.95, 0.95]),
];

pub fn color_by_name(name: &str) -> Option<[f32; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// A class name resolved to how it is drawn. `"red circle"` fixes the
/// colour; a bare `"circle"` takes a random palette colour per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStyle {
    pub name: String,
    pub shape: Shape,
    pub color: Option<[f32; 3]>,
}

impl ClassStyle {
    pub fn parse(name: &str) -> Result<Self> {
        let words: Vec<&str> = name.split_whitespace().collect();
        let unknown = || Error::Generation(format!("unknown class `{name}`"));
        let (shape, color) = match words.as_slice() {
            [s] => (Shape::parse(s).ok_or_else(unknown)?, None),
            [c, s] => (Shape::parse(s).ok_or_else(unknown)?, Some(color_by_name(c).ok_or_else(unknown)?)),
            _ => return Err(unknown()),
        };
        Ok(Self { name: words.join(" "), shape, color })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Rendered image with every object labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

impl Scene {
    pub fn count_of(&self, class: &str) -> usize {
        self.instances.iter().filter(|i| i.class == class).count()
    }

    /// Distinct classes in first-appearance order.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for i in &self.instances {
            if !out.contains(&i.class) {
                out.push(i.class.clone());
            }
        }
        out
    }

    pub fn boxes_of(&self, class: &str) -> Vec<BBox> {
        self.instances.iter().filter(|i| i.class == class).map(|i| i.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Class pool; each scene draws `classes_per_scene` of these.
    pub classes: Vec<String>,
    pub classes_per_scene: [usize; 2],
    /// Instances per chosen class, inclusive range.
    pub count_range: [usize; 2],
    /// Box height in pixels, inclusive range.
    pub size_range: [f64; 2],
    /// Maximum IoU between any two instance boxes.
    pub overlap_cap: f64,
    pub background: [f32; 3],
    /// Per-scene uniform jitter of the background colour.
    pub background_jitter: f32,
    /// Per-pixel texture amplitude.
    pub noise: f32,
    /// Per-instance colour jitter.
    pub color_jitter: f32,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: vec!["red circle".into(), "blue square".into(), "green triangle".into()],
            classes_per_scene: [1, 2],
            count_range: [1, 6],
            size_range: [6.0, 12.0],
            overlap_cap: 0.0,
            background: [0.45, 0.45, 0.45],
            background_jitter: 0.1,
            noise: 0.03,
            color_jitter: 0.05,
            max_retries: 400,
        }
    }
}

/// Canvas with a jittered, lightly textured background.
pub fn background(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> ImageTensor {
    let j = cfg.background_jitter;
    let base: Vec<f32> = cfg
        .background
        .iter()
        .map(|c| (c + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }).clamp(0.0, 1.0))
        .collect();
    let mut img = ImageTensor::filled(cfg.height, cfg.width, [base[0], base[1], base[2]]);
    if cfg.noise > 0.0 {
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let n = rng.random_range(-cfg.noise..=cfg.noise);
                let p = img.pixel(y, x);
                img.set_pixel(y, x, [(p[0] + n).clamp(0.0, 1.0), (p[1] + n).clamp(0.0, 1.0), (p[2] + n).clamp(0.0, 1.0)]);
            }
        }
    }
    img
}

/// Draws `shape` filling `bbox` (normalised) with 4x4 supersampled coverage.
pub fn draw_shape(img: &mut ImageTensor, shape: Shape, bbox: &BBox, color: [f32; 3]) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let [x0, y0, x1, y1] = bbox.corners();
    let (px0, py0) = ((x0 * w).floor().max(0.0) as usize, (y0 * h).floor().max(0.0) as usize);
    let (px1, py1) = (((x1 * w).ceil() as usize).min(img.width()), ((y1 * h).ceil() as usize).min(img.height()));
    let (cx, cy, hw, hh) = (bbox.cx * w, bbox.cy * h, bbox.w * w / 2.0, bbox.h * h / 2.0);
    const SS: usize = 4;
    for py in py0..py1 {
        for px in px0..px1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    if shape.contains((x - cx) / hw, (y - cy) / hh) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                img.blend_pixel(py, px, color, hits as f32 / (SS * SS) as f32);
            }
        }
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, c: [f32; 3], j: f32) -> [f32; 3] {
    if j <= 0.0 {
        return c;
    }
    c.map(|v| (v + rng.random_range(-j..=j)).clamp(0.0, 1.0))
}

fn pick_color(rng: &mut ChaCha8Rng, style: &ClassStyle) -> [f32; 3] {
    style.color.unwrap_or_else(|| COLORS[rng.random_range(0..COLORS.len())].1)
}

/// Samples a box of the given pixel height for `shape` inside the frame.
fn sample_box(rng: &mut ChaCha8Rng, cfg: &SceneConfig, shape: Shape) -> BBox {
    let hpx = if cfg.size_range[1] > cfg.size_range[0] {
        rng.random_range(cfg.size_range[0]..=cfg.size_range[1])
    } else {
        cfg.size_range[0]
    };
    let bw = (hpx * shape.aspect() / cfg.width as f64).min(0.98);
    let bh = (hpx / cfg.height as f64).min(0.98);
    let cx = rng.random_range(bw / 2.0..=1.0 - bw / 2.0);
    let cy = rng.random_range(bh / 2.0..=1.0 - bh / 2.0);
    BBox::new_unchecked(cx, cy, bw, bh)
}

fn range_pick(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Places boxes one by one, rejecting any that overlap an earlier box by
/// more than `overlap_cap`.
fn place(rng: &mut ChaCha8Rng, cfg: &SceneConfig, shape: Shape, taken: &[BBox]) -> Result<BBox> {
    for _ in 0..cfg.max_retries.max(1) {
        let b = sample_box(rng, cfg, shape);
        let ok = taken.iter().all(|t| {
            let v = iou_unchecked(&b, t);
            if cfg.overlap_cap <= 0.0 {
                v == 0.0
            } else {
                v <= cfg.overlap_cap
            }
        });
        if ok {
            return Ok(b);
        }
    }
    Err(Error::Generation(format!(
        "could not place instance after {} retries under overlap cap {}",
        cfg.max_retries, cfg.overlap_cap
    )))
}

fn validate_config(cfg: &SceneConfig) -> Result<Vec<ClassStyle>> {
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config("scene size must be positive".into()));
    }
    if cfg.classes.is_empty() || cfg.classes_per_scene[0] == 0 || cfg.classes_per_scene[0] > cfg.classes_per_scene[1] {
        return Err(Error::Config("bad class selection ranges".into()));
    }
    if cfg.count_range[0] > cfg.count_range[1] || !(cfg.size_range[0] > 0.0) || cfg.size_range[0] > cfg.size_range[1] {
        return Err(Error::Config("bad count or size range".into()));
    }
    cfg.classes.iter().map(|c| ClassStyle::parse(c)).collect()
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    let styles = validate_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(&mut rng, cfg);
    let n_classes = range_pick(&mut rng, cfg.classes_per_scene).min(styles.len());
    let mut pool: Vec<usize> = (0..styles.len()).collect();
    let mut chosen = Vec::new();
    for _ in 0..n_classes {
        chosen.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    let mut jobs: Vec<usize> = Vec::new();
    for &c in &chosen {
        let n = range_pick(&mut rng, cfg.count_range);
        jobs.extend(std::iter::repeat_n(c, n));
    }
    // Interleave classes so no class is systematically drawn on top.
    for i in (1..jobs.len()).rev() {
        let j = rng.random_range(0..=i);
        jobs.swap(i, j);
    }
    let mut boxes = Vec::new();
    let mut instances = Vec::new();
    for c in jobs {
        let style = &styles[c];
        let b = place(&mut rng, cfg, style.shape, &boxes)?;
        let base = pick_color(&mut rng, style);
        let color = jitter_color(&mut rng, base, cfg.color_jitter);
        draw_shape(&mut img, style.shape, &b, color);
        boxes.push(b);
        instances.push(Instance { class: style.name.clone(), bbox: b });
    }
    Ok(Scene { image: img, instances, seed })
}

/// Side of the square canvas used for synthetic exemplar images.
pub const EXEMPLAR_CANVAS: usize = 64;

/// One centred instance of `class` on a plain background, with its box.
pub fn synth_exemplar(class: &str, style_seed: u64) -> Result<(ImageTensor, BBox)> {
    let style = ClassStyle::parse(class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let grey = rng.random_range(0.35f32..0.55);
    let mut img = ImageTensor::filled(EXEMPLAR_CANVAS, EXEMPLAR_CANVAS, [grey; 3]);
    let hpx = rng.random_range(10.0..14.0f64);
    let s = EXEMPLAR_CANVAS as f64;
    let b = BBox::new(0.5, 0.5, hpx * style.shape.aspect() / s, hpx / s)?;
    draw_shape(&mut img, style.shape, &b, pick_color(&mut rng, &style));
    Ok((img, b))
}

/// Regular `rows x cols` lattice of identical shapes, centred in cells.
pub fn grid_scene(height: usize, width: usize, rows: usize, cols: usize, dot_px: f64, class: &str, seed: u64) -> Result<Scene> {
    let style = ClassStyle::parse(class)?;
    let cfg = SceneConfig { height, width, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(&mut rng, &cfg);
    let color = pick_color(&mut rng, &style);
    let mut instances = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let b = BBox::new(
                (c as f64 + 0.5) / cols as f64,
                (r as f64 + 0.5) / rows as f64,
                dot_px * style.shape.aspect() / width as f64,
                dot_px / height as f64,
            )?;
            draw_shape(&mut img, style.shape, &b, color);
            instances.push(Instance { class: style.name.clone(), bbox: b });
        }
    }
    Ok(Scene { image: img, instances, seed })
}

/// Frames plus per-frame labels. Instances keep their identity across frames
/// through `track` ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<ImageTensor>,
    pub instances: Vec<Vec<TrackedInstance>>,
    pub unique_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedInstance {
    pub track: usize,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub class: String,
    /// Objects present from the first frame.
    pub initial: [usize; 2],
    /// Objects appearing later, at uniformly random frames.
    pub late: [usize; 2],
    /// Box height at birth and growth per frame, pixels.
    pub birth_px: [f64; 2],
    pub growth_px: f64,
    pub max_px: f64,
    /// Colour at birth and the colour objects drift to by the last frame.
    pub color_start: [f32; 3],
    pub color_end: [f32; 3],
    pub background: [f32; 3],
    pub noise: f32,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            class: "blob".into(),
            initial: [2, 4],
            late: [2, 4],
            birth_px: [4.0, 6.0],
            growth_px: 1.0,
            max_px: 14.0,
            color_start: [0.9, 0.85, 0.2],
            color_end: [0.6, 0.15, 0.75],
            background: [0.35, 0.35, 0.4],
            noise: 0.02,
        }
    }
}

/// Growing, colour-drifting objects; some appear after the first frame.
pub fn generate_video(seed: u64, cfg: &VideoConfig) -> Result<VideoSequence> {
    if cfg.frames == 0 {
        return Err(Error::Config("video needs at least one frame".into()));
    }
    let style = ClassStyle::parse(&cfg.class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = range_pick(&mut rng, cfg.initial);
    let nl = if cfg.frames > 1 { range_pick(&mut rng, cfg.late) } else { 0 };
    // (birth frame, centre, birth size) with centres far enough apart that
    // fully grown objects never overlap.
    let mut tracks: Vec<(usize, f64, f64, f64)> = Vec::new();
    let min_gap = cfg.max_px * style.shape.aspect() * 1.1;
    for t in 0..n0 + nl {
        let birth = if t < n0 { 0 } else { rng.random_range(1..cfg.frames) };
        let size = rng.random_range(cfg.birth_px[0]..=cfg.birth_px[1]);
        let margin_x = cfg.max_px * style.shape.aspect() / 2.0 + 1.0;
        let margin_y = cfg.max_px / 2.0 + 1.0;
        let mut placed = None;
        for _ in 0..1000 {
            let cx = rng.random_range(margin_x..cfg.width as f64 - margin_x);
            let cy = rng.random_range(margin_y..cfg.height as f64 - margin_y);
            if tracks.iter().all(|&(_, x, y, _)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() > min_gap) {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed.ok_or_else(|| Error::Generation("could not place video object".into()))?;
        tracks.push((birth, cx, cy, size));
    }
    let vcfg = SceneConfig {
        height: cfg.height,
        width: cfg.width,
        background: cfg.background,
        background_jitter: 0.0,
        noise: cfg.noise,
        ..Default::default()
    };
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for f in 0..cfg.frames {
        let mut img = background(&mut rng, &vcfg);
        let s = if cfg.frames > 1 { f as f32 / (cfg.frames - 1) as f32 } else { 0.0 };
        let color: [f32; 3] = std::array::from_fn(|c| cfg.color_start[c] * (1.0 - s) + cfg.color_end[c] * s);
        let mut inst = Vec::new();
        for (id, &(birth, cx, cy, size)) in tracks.iter().enumerate() {
            if f < birth {
                continue;
            }
            let px = (size + cfg.growth_px * (f - birth) as f64).min(cfg.max_px);
            let b = BBox::new(
                cx / cfg.width as f64,
                cy / cfg.height as f64,
                px * style.shape.aspect() / cfg.width as f64,
                px / cfg.height as f64,
            )?;
            draw_shape(&mut img, style.shape, &b, color);
            inst.push(TrackedInstance { track: id, class: style.name.clone(), bbox: b });
        }
        frames.push(img);
        labels.push(inst);
    }
    Ok(VideoSequence { frames, instances: labels, unique_count: tracks.len(), seed })
}

/// One line of `scenes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image: String,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

/// Writes PNGs plus `scenes.jsonl` under `dir`.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("scenes.jsonl"))?);
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.png");
        s.image.save_png(dir.join(&name))?;
        let rec = SceneRecord { image: name, instances: s.instances.clone(), seed: s.seed };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let f = fs::File::open(dir.join("scenes.jsonl"))?;
    let mut scenes = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)?;
        let image = ImageTensor::load_png(dir.join(&rec.image))?;
        for i in &rec.instances {
            i.bbox.validate()?;
        }
        scenes.push(Scene { image, instances: rec.instances, seed: rec.seed });
    }
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub frames: Vec<String>,
    pub instances: Vec<Vec<TrackedInstance>>,
    pub unique_count: usize,
    pub seed: u64,
}

/// Writes `frames/frame_XXXX.png` and `video.json` under `dir`.
pub fn save_video(dir: &Path, video: &VideoSequence) -> Result<()> {
    let fdir = dir.join("frames");
    fs::create_dir_all(&fdir)?;
    let mut names = Vec::new();
    for (i, f) in video.frames.iter().enumerate() {
        let name = format!("frames/frame_{i:04}.png");
        f.save_png(dir.join(&name))?;
        names.push(name);
    }
    let rec = VideoRecord {
        frames: names,
        instances: video.instances.clone(),
        unique_count: video.unique_count,
        seed: video.seed,
    };
    fs::write(dir.join("video.json"), serde_json::to_vec_pretty(&rec)?)?;
    Ok(())
}

pub fn load_video(dir: &Path) -> Result<VideoSequence> {
    let rec: VideoRecord = serde_json::from_slice(&fs::read(dir.join("video.json"))?)?;
    let frames = rec
        .frames
        .iter()
        .map(|f| ImageTensor::load_png(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if frames.windows(2).any(|w| w[0].height() != w[1].height() || w[0].width() != w[1].width()) {
        return Err(Error::Shape("video frames differ in size".into()));
    }
    Ok(VideoSequence { frames, instances: rec.instances, unique_count: rec.unique_count, seed: rec.seed })
}

/// Loads every PNG in `dir` (sorted by name) as a frame sequence without labels.
pub fn load_frames(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(ImageTensor::load_png).collect()
}
