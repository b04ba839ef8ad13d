//! Deterministic synthetic scenes with panoptic ground truth.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concepts::normalize_label;
use crate::error::{Error, Result};

pub use io::{read_dataset, read_png_gray16, read_png_rgb8, write_dataset, write_png_gray16, write_png_indexed, write_png_rgb8, DatasetSummary, MANIFEST_FILE, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub label: String,
    pub is_thing: bool,
    pub is_seen: bool,
}

/// Ordered category list with a seen/unseen split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    categories: Vec<Category>,
}

impl Vocabulary {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let v = Vocabulary { categories };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        let mut labels = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::invalid(format!("category ids must be contiguous from 0; position {i} has id {}", c.id)));
            }
            let norm = normalize_label(&c.label);
            if norm.is_empty() {
                return Err(Error::invalid(format!("category {i} has a blank label")));
            }
            if !labels.insert(norm) {
                return Err(Error::invalid(format!("duplicate category label `{}`", c.label)));
            }
        }
        if !self.categories.iter().any(|c| c.is_thing) {
            return Err(Error::invalid("vocabulary needs at least one thing category"));
        }
        if !self.categories.iter().any(|c| !c.is_thing) {
            return Err(Error::invalid("vocabulary needs at least one stuff category"));
        }
        if !self.categories.iter().any(|c| c.is_seen) {
            return Err(Error::invalid("vocabulary needs at least one seen category"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, id: usize) -> Option<&Category> {
        self.categories.get(id)
    }

    pub fn labels(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.label.clone()).collect()
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        self.categories.iter().filter(|c| c.is_seen).map(|c| c.id).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        self.categories.iter().filter(|c| !c.is_seen).map(|c| c.id).collect()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.categories.len()).collect()
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        let n = normalize_label(label);
        self.categories.iter().find(|c| normalize_label(&c.label) == n).map(|c| c.id)
    }

    /// Stable digest of ids, labels and flags.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in &self.categories {
            h.update(format!("{}|{}|{}|{}\n", c.id, c.label, c.is_thing, c.is_seen).as_bytes());
        }
        hex_string(&h.finalize())
    }

    /// Nine-category demo vocabulary: six seen (four things, two stuff) and
    /// three unseen (two things, one stuff).
    pub fn demo() -> Self {
        let spec: [(&str, bool, bool); 9] = [
            ("red disc", true, true),
            ("green block", true, true),
            ("blue wedge", true, true),
            ("yellow disc", true, true),
            ("sand stripes", false, true),
            ("sky gradient", false, true),
            ("violet block", true, false),
            ("orange wedge", true, false),
            ("moss field", false, false),
        ];
        let categories = spec
            .iter()
            .enumerate()
            .map(|(id, &(label, is_thing, is_seen))| Category { id, label: label.to_string(), is_thing, is_seen })
            .collect();
        Vocabulary::new(categories).expect("demo vocabulary is valid")
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Circle,
    Rectangle,
    Triangle,
    StripedBackground,
    GradientBackground,
    UniformBackground,
}

impl ShapeFamily {
    pub fn is_background(self) -> bool {
        matches!(self, ShapeFamily::StripedBackground | ShapeFamily::GradientBackground | ShapeFamily::UniformBackground)
    }
}

/// How one category is drawn: a shape family and a base colour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecipe {
    pub family: ShapeFamily,
    pub color: [f64; 3],
}

pub type ShapePalette = BTreeMap<usize, ShapeRecipe>;

/// Palette for [`Vocabulary::demo`].
pub fn demo_palette() -> ShapePalette {
    use ShapeFamily::*;
    let recipes = [
        (Circle, [0.85, 0.15, 0.15]),
        (Rectangle, [0.15, 0.70, 0.20]),
        (Triangle, [0.15, 0.25, 0.85]),
        (Circle, [0.90, 0.85, 0.10]),
        (StripedBackground, [0.80, 0.70, 0.50]),
        (GradientBackground, [0.40, 0.60, 0.95]),
        (Rectangle, [0.60, 0.20, 0.80]),
        (Triangle, [0.95, 0.55, 0.10]),
        (UniformBackground, [0.35, 0.45, 0.20]),
    ];
    recipes.iter().enumerate().map(|(i, &(family, color))| (i, ShapeRecipe { family, color })).collect()
}

/// Evenly spaced hues; things cycle circle/rectangle/triangle, stuff cycles
/// the three background families.
pub fn default_palette(vocab: &Vocabulary) -> ShapePalette {
    let n = vocab.len().max(1) as f64;
    let things = [ShapeFamily::Circle, ShapeFamily::Rectangle, ShapeFamily::Triangle];
    let stuff = [ShapeFamily::StripedBackground, ShapeFamily::GradientBackground, ShapeFamily::UniformBackground];
    let (mut ti, mut si) = (0, 0);
    vocab
        .categories()
        .iter()
        .map(|c| {
            let family = if c.is_thing {
                ti += 1;
                things[(ti - 1) % 3]
            } else {
                si += 1;
                stuff[(si - 1) % 3]
            };
            let value = if c.is_thing { 0.9 } else { 0.6 };
            (c.id, ShapeRecipe { family, color: hsv_to_rgb(c.id as f64 / n, 0.8, value) })
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Which categories a scene may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SceneSplit {
    /// Seen categories only.
    Train,
    /// Every category.
    #[default]
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    pub shape_palette: ShapePalette,
    pub noise_std: f64,
    pub seed: u64,
    /// Object half-extent range as a fraction of the shorter image side.
    pub min_object_frac: f64,
    pub max_object_frac: f64,
    /// Draw each thing category at most once per scene.
    pub distinct_things: bool,
    pub split: SceneSplit,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, shape_palette: ShapePalette, seed: u64) -> Self {
        SceneConfig {
            height,
            width,
            max_objects: 3,
            shape_palette,
            noise_std: 0.02,
            seed,
            min_object_frac: 0.16,
            max_object_frac: 0.28,
            distinct_things: true,
            split: SceneSplit::Eval,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("scene.size", format!("image must be at least 8x8, got {}x{}", self.height, self.width)));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::config("scene.size", "image side exceeds 65535"));
        }
        if self.max_objects < 1 {
            return Err(Error::config("scene.max_objects", "must be at least 1"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("scene.noise_std", "must be finite and non-negative"));
        }
        if !(0.0 < self.min_object_frac && self.min_object_frac <= self.max_object_frac && self.max_object_frac < 0.5) {
            return Err(Error::config("scene.object_frac", "need 0 < min <= max < 0.5"));
        }
        for c in vocab.categories() {
            let Some(r) = self.shape_palette.get(&c.id) else {
                return Err(Error::config("scene.shape_palette", format!("no recipe for category {} ({})", c.id, c.label)));
            };
            if r.family.is_background() == c.is_thing {
                return Err(Error::config(
                    "scene.shape_palette",
                    format!("category {} is {} but drawn as {:?}", c.id, if c.is_thing { "a thing" } else { "stuff" }, r.family),
                ));
            }
            if r.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("scene.shape_palette", format!("colour of category {} outside [0,1]", c.id)));
            }
        }
        let pool = self.pool(vocab);
        if !pool.iter().any(|&i| vocab.categories()[i].is_thing) || !pool.iter().any(|&i| !vocab.categories()[i].is_thing) {
            return Err(Error::config("scene.split", "split leaves no thing or no stuff category to draw"));
        }
        Ok(())
    }

    fn pool(&self, vocab: &Vocabulary) -> Vec<usize> {
        match self.split {
            SceneSplit::Train => vocab.seen_ids(),
            SceneSplit::Eval => vocab.all_ids(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!("image {} smaller than 8x8", self.image_id)));
        }
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::invalid(format!("image {} pixel buffer has wrong length", self.image_id)));
        }
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid(format!("image {} has values outside [0,1]", self.image_id)));
        }
        Ok(())
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub category_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Per-pixel segment ids (0 = unassigned) plus the segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticSegmentation {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub id_map: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl PanopticSegmentation {
    pub fn empty(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        PanopticSegmentation { image_id: image_id.into(), height, width, id_map: vec![0; height * width], segments: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_map.len() != self.height * self.width {
            return Err(Error::invalid(format!("id map of {} has wrong length", self.image_id)));
        }
        let mut ids = BTreeSet::new();
        for s in &self.segments {
            if s.id == 0 {
                return Err(Error::invalid(format!("segment id 0 is reserved (image {})", self.image_id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::invalid(format!("duplicate segment id {} in {}", s.id, self.image_id)));
            }
        }
        for &v in &self.id_map {
            if v != 0 && !ids.contains(&v) {
                return Err(Error::invalid(format!("id map of {} references unknown segment {v}", self.image_id)));
            }
        }
        Ok(())
    }

    pub fn validate_against(&self, vocab: &Vocabulary) -> Result<()> {
        self.validate()?;
        for s in &self.segments {
            if vocab.get(s.category_id).is_none() {
                return Err(Error::invalid(format!("segment {} of {} has unknown category {}", s.id, self.image_id, s.category_id)));
            }
        }
        Ok(())
    }

    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn area(&self, id: u32) -> usize {
        self.id_map.iter().filter(|&&v| v == id).count()
    }

    /// Categories present with at least one pixel, ascending.
    pub fn categories_present(&self) -> Vec<usize> {
        let present: BTreeSet<u32> = self.id_map.iter().copied().filter(|&v| v != 0).collect();
        let cats: BTreeSet<usize> = self.segments.iter().filter(|s| present.contains(&s.id)).map(|s| s.category_id).collect();
        cats.into_iter().collect()
    }
}

/// Render one scene. Pure in `(config, vocab)`.
pub fn generate_scene(config: &SceneConfig, vocab: &Vocabulary) -> Result<(Image, PanopticSegmentation)> {
    vocab.validate()?;
    config.validate(vocab)?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = config.pool(vocab);
    let stuff: Vec<usize> = pool.iter().copied().filter(|&i| !vocab.categories()[i].is_thing).collect();
    let mut things: Vec<usize> = pool.iter().copied().filter(|&i| vocab.categories()[i].is_thing).collect();

    let mut rgb = vec![0.0; h * w * 3];
    let mut ids = vec![1u32; h * w];
    let mut segments = vec![Segment { id: 1, category_id: stuff[rng.random_range(0..stuff.len())], score: None }];
    let bg = config.shape_palette[&segments[0].category_id];
    for y in 0..h {
        for x in 0..w {
            let c = background_color(&bg, y, x, h, w);
            rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }

    let count = rng.random_range(1..=config.max_objects);
    if config.distinct_things {
        things.shuffle(&mut rng);
    }
    let side = h.min(w) as f64;
    for k in 0..count {
        let cat = if config.distinct_things {
            match things.get(k) {
                Some(&c) => c,
                None => break,
            }
        } else {
            things[rng.random_range(0..things.len())]
        };
        let recipe = config.shape_palette[&cat];
        let r = side * rng.random_range(config.min_object_frac..=config.max_object_frac);
        let cy = rng.random_range(r..=(h as f64 - r));
        let cx = rng.random_range(r..=(w as f64 - r));
        let aspect = rng.random_range(0.6..=1.0);
        let seg_id = segments.len() as u32 + 1;
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if covers(recipe.family, py - cy, px - cx, r, aspect) {
                    ids[y * w + x] = seg_id;
                    rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&recipe.color);
                }
            }
        }
        segments.push(Segment { id: seg_id, category_id: cat, score: None });
    }

    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).map_err(|e| Error::config("scene.noise_std", e.to_string()))?;
        for v in rgb.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in rgb.iter_mut() {
        *v = quantize(*v);
    }

    let visible: BTreeSet<u32> = ids.iter().copied().collect();
    segments.retain(|s| visible.contains(&s.id));
    let image_id = format!("scene_{:08}", config.seed);
    let image = Image { image_id: image_id.clone(), height: h, width: w, pixels: rgb };
    let seg = PanopticSegmentation { image_id, height: h, width: w, id_map: ids, segments };
    Ok((image, seg))
}

/// `count` scenes with seeds `config.seed, config.seed + 1, ...`.
pub fn generate_scenes(config: &SceneConfig, vocab: &Vocabulary, count: usize) -> Result<Vec<(Image, PanopticSegmentation)>> {
    (0..count)
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(i as u64);
            generate_scene(&c, vocab)
        })
        .collect()
}

/// Snap to the 8-bit grid so PNG storage is lossless.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn background_color(recipe: &ShapeRecipe, y: usize, x: usize, _h: usize, w: usize) -> [f64; 3] {
    let c = recipe.color;
    match recipe.family {
        ShapeFamily::StripedBackground => {
            if (y / 4) % 2 == 0 {
                c
            } else {
                [c[0] * 0.6, c[1] * 0.6, c[2] * 0.6]
            }
        }
        ShapeFamily::GradientBackground => {
            let t = 0.65 + 0.35 * x as f64 / (w.max(2) - 1) as f64;
            [c[0] * t, c[1] * t, c[2] * t]
        }
        _ => c,
    }
}

/// Prototype render of a category's appearance on its own, used to build
/// appearance-aligned text embeddings.
pub fn render_swatch(recipe: &ShapeRecipe, height: usize, width: usize) -> Image {
    let mut pixels = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let c = if recipe.family.is_background() { background_color(recipe, y, x, height, width) } else { recipe.color };
            pixels.extend(c.iter().map(|&v| quantize(v)));
        }
    }
    Image { image_id: "swatch".into(), height, width, pixels }
}

fn covers(family: ShapeFamily, dy: f64, dx: f64, r: f64, aspect: f64) -> bool {
    match family {
        ShapeFamily::Circle => dy * dy + dx * dx <= r * r,
        ShapeFamily::Rectangle => dx.abs() <= r && dy.abs() <= r * aspect,
        ShapeFamily::Triangle => {
            // apex up, base at dy = r
            if dy < -r || dy > r {
                return false;
            }
            let half = r * (dy + r) / (2.0 * r);
            dx.abs() <= half
        }
        _ => false,
    }
}
