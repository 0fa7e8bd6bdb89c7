//! Synthetic glyph meals.
//!
//! Each visible ingredient owns a unique (color, shape) glyph; invisible
//! ingredients render nothing. A recipe image draws the glyphs of its
//! visible ingredients on a plain background, one per grid cell with
//! positional jitter, so ingredient presence can be read back exactly with a
//! color mask.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use ::image::{Rgb, RgbImage};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rescale_image, variant_path, DatasetManifest, ImageSample, Partition, Recipe, MAX_IMAGES, MAX_INGREDIENTS};
use crate::error::{Error, Result};
use crate::vocab::{RawCorpus, RawRecipe};

pub const BACKGROUND: [u8; 3] = [96, 96, 96];

/// File name of the serialized [`SyntheticSpec`] inside a generated dataset.
pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_ingredients: usize,
    pub n_visible: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_ingredients: usize,
    pub max_ingredients: usize,
    pub min_images: usize,
    pub max_images: usize,
    pub canvas_size: usize,
    /// The canvas is divided into `grid x grid` cells, one glyph per cell.
    pub grid: usize,
    pub glyph_size: usize,
    /// Maximum absolute offset of a glyph center from its cell center.
    pub jitter: usize,
    /// Number of distinct shapes (1..=4); hues are spread evenly over the
    /// remaining factor.
    pub n_shapes: usize,
    /// Pre-scaled variants written next to each full-size image.
    pub variant_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_ingredients: 30,
            n_visible: 24,
            n_train: 200,
            n_val: 50,
            n_test: 100,
            min_ingredients: 2,
            max_ingredients: 6,
            min_images: 1,
            max_images: 3,
            canvas_size: 256,
            grid: 3,
            glyph_size: 60,
            jitter: 10,
            n_shapes: 3,
            variant_sizes: vec![64, 128],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Reads the spec stored in a generated dataset directory.
    pub fn load(dataset_dir: &Path) -> Result<Self> {
        let p = dataset_dir.join(SPEC_FILE);
        let text = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn n_recipes(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_visible > self.n_ingredients {
            return bad(format!("n_visible {} > n_ingredients {}", self.n_visible, self.n_ingredients));
        }
        if !(1..=4).contains(&self.n_shapes) {
            return bad(format!("n_shapes {} outside 1..=4", self.n_shapes));
        }
        if self.min_ingredients == 0
            || self.min_ingredients > self.max_ingredients
            || self.max_ingredients > self.n_ingredients.min(MAX_INGREDIENTS)
        {
            return bad(format!(
                "ingredients per recipe {}..={} invalid for {} ingredients",
                self.min_ingredients, self.max_ingredients, self.n_ingredients
            ));
        }
        if self.min_images == 0 || self.min_images > self.max_images || self.max_images > MAX_IMAGES {
            return bad(format!("images per recipe {}..={} invalid", self.min_images, self.max_images));
        }
        if self.grid == 0 || self.glyph_size == 0 {
            return bad("grid and glyph_size must be positive".into());
        }
        let cell = self.canvas_size / self.grid;
        if self.glyph_size + 2 * self.jitter > cell {
            return Err(Error::LayoutOverflow(format!(
                "glyph {} with jitter {} does not fit a {cell}px cell",
                self.glyph_size, self.jitter
            )));
        }
        let max_visible = self.max_ingredients.min(self.n_visible);
        if max_visible > self.grid * self.grid {
            return Err(Error::LayoutOverflow(format!(
                "{max_visible} glyphs do not fit a {0}x{0} grid",
                self.grid
            )));
        }
        Ok(())
    }

    pub fn palette(&self) -> GlyphPalette {
        GlyphPalette::new(self.n_ingredients, self.n_visible, self.n_shapes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    /// Whether the pixel center offset `(dx, dy)` lies inside a glyph of
    /// half-size `r`.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub rgb: [u8; 3],
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphPalette {
    /// Indexed by ingredient id; `None` for invisible ingredients.
    pub glyphs: Vec<Option<Glyph>>,
    pub names: Vec<String>,
}

const INVISIBLE_NAMES: [&str; 8] = ["salt", "oil", "water", "sugar", "pepper", "vinegar", "butter", "yeast"];

fn hsv_to_rgb(hue_deg: f64) -> [u8; 3] {
    let h = (hue_deg % 360.0) / 60.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

impl GlyphPalette {
    pub fn new(n_ingredients: usize, n_visible: usize, n_shapes: usize) -> Self {
        let n_shapes = n_shapes.clamp(1, 4);
        let n_hues = n_visible.div_ceil(n_shapes).max(1);
        let mut glyphs = Vec::with_capacity(n_ingredients);
        let mut names = Vec::with_capacity(n_ingredients);
        for id in 0..n_ingredients {
            if id < n_visible {
                let hue_idx = id / n_shapes;
                let hue = 360.0 * hue_idx as f64 / n_hues as f64;
                let shape = Shape::ALL[id % n_shapes];
                glyphs.push(Some(Glyph {
                    rgb: hsv_to_rgb(hue),
                    shape,
                }));
                names.push(format!("hue{:03} {}", hue.round() as u32, shape.name()));
            } else {
                let k = id - n_visible;
                glyphs.push(None);
                names.push(match INVISIBLE_NAMES.get(k) {
                    Some(n) => n.to_string(),
                    None => format!("seasoning {k}"),
                });
            }
        }
        Self { glyphs, names }
    }

    pub fn visible_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.glyphs.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|_| i))
    }

    pub fn is_visible(&self, id: usize) -> bool {
        matches!(self.glyphs.get(id), Some(Some(_)))
    }
}

/// Draws one glyph-meal image at `spec.canvas_size`.
pub fn render_recipe(spec: &SyntheticSpec, palette: &GlyphPalette, ingredient_ids: &[usize], rng: &mut impl Rng) -> Result<RgbImage> {
    let size = spec.canvas_size as u32;
    let mut img = RgbImage::from_pixel(size, size, Rgb(BACKGROUND));
    let mut visible: Vec<usize> = Vec::new();
    for &id in ingredient_ids {
        if palette.is_visible(id) && !visible.contains(&id) {
            visible.push(id);
        }
    }
    let cells = spec.grid * spec.grid;
    if visible.len() > cells {
        return Err(Error::LayoutOverflow(format!("{} glyphs for {cells} cells", visible.len())));
    }
    let cell = spec.canvas_size / spec.grid;
    let mut slots: Vec<usize> = (0..cells).collect();
    slots.shuffle(rng);
    let jitter = spec.jitter as i64;
    for (&id, &slot) in visible.iter().zip(&slots) {
        let glyph = palette.glyphs[id].as_ref().expect("visible");
        let (gy, gx) = (slot / spec.grid, slot % spec.grid);
        let cx = (gx * cell + cell / 2) as i64 + rng.random_range(-jitter..=jitter);
        let cy = (gy * cell + cell / 2) as i64 + rng.random_range(-jitter..=jitter);
        draw_glyph(&mut img, glyph, cx as f32, cy as f32, spec.glyph_size as f32 / 2.0);
    }
    Ok(img)
}

fn draw_glyph(img: &mut RgbImage, glyph: &Glyph, cx: f32, cy: f32, r: f32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x_lo = ((cx - r - 1.0).floor() as i64).max(0);
    let x_hi = ((cx + r + 1.0).ceil() as i64).min(w - 1);
    let y_lo = ((cy - r - 1.0).floor() as i64).max(0);
    let y_hi = ((cy + r + 1.0).ceil() as i64).min(h - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if glyph.shape.contains(dx, dy, r) {
                img.put_pixel(x as u32, y as u32, Rgb(glyph.rgb));
            }
        }
    }
}

/// Generates recipes, renders their images and writes the dataset under
/// `out_dir`: `manifest.jsonl`, `corpus.jsonl`, `palette.json`, `spec.json`,
/// `ingredients.txt` and `images/`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let palette = spec.palette();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(Error::io(&images_dir))?;

    let mut recipes = Vec::with_capacity(spec.n_recipes());
    for i in 0..spec.n_recipes() {
        let partition = if i < spec.n_train {
            Partition::Train
        } else if i < spec.n_train + spec.n_val {
            Partition::Val
        } else {
            Partition::Test
        };
        let k = rng.random_range(spec.min_ingredients..=spec.max_ingredients);
        let ingredient_ids: Vec<usize> = index::sample(&mut rng, spec.n_ingredients, k).into_vec();
        let n_images = rng.random_range(spec.min_images..=spec.max_images);
        let id = format!("s{i:05}");
        let mut image_refs = Vec::with_capacity(n_images);
        for j in 0..n_images {
            let rel = format!("images/{id}_{j}.png");
            let path = out_dir.join(&rel);
            let img = render_recipe(spec, &palette, &ingredient_ids, &mut rng)?;
            img.save(&path)?;
            let sample = ImageSample::from_rgb(&img);
            for &s in &spec.variant_sizes {
                rescale_image(&sample, s)?.save(&variant_path(&path, s))?;
            }
            image_refs.push(rel);
        }
        recipes.push(Recipe {
            id,
            ingredient_ids,
            image_refs,
            partition,
            category: Some("glyph".into()),
        });
    }

    let manifest = DatasetManifest::new(out_dir, recipes)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    let corpus = RawCorpus::new(
        manifest
            .recipes()
            .iter()
            .map(|r| RawRecipe {
                id: r.id.clone(),
                ingredients: r.ingredient_ids.iter().map(|&i| palette.names[i].clone()).collect(),
                n_instructions: 1,
                image_paths: r.image_refs.clone(),
            })
            .collect(),
    )?;
    corpus.save(&out_dir.join("corpus.jsonl"))?;
    let p = out_dir.join("palette.json");
    std::fs::write(&p, serde_json::to_string_pretty(&palette)? + "\n").map_err(Error::io(&p))?;
    let p = out_dir.join(SPEC_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(spec)? + "\n").map_err(Error::io(&p))?;
    let p = out_dir.join("ingredients.txt");
    std::fs::write(&p, palette.names.join("\n") + "\n").map_err(Error::io(&p))?;
    Ok(manifest)
}

fn to_u8(img: &ImageSample) -> Vec<[u8; 3]> {
    let rgb = img.to_rgb();
    rgb.pixels().map(|p| p.0).collect()
}

/// Pixels whose color is within `tolerance` (per channel, 0-255 units) of
/// `rgb`.
pub fn color_mask_count(img: &ImageSample, rgb: [u8; 3], tolerance: u8) -> usize {
    to_u8(img)
        .iter()
        .filter(|p| p.iter().zip(rgb).all(|(a, b)| a.abs_diff(b) <= tolerance))
        .count()
}

/// Recovers the set of visible ingredient ids drawn in an image.
///
/// Exact-color connected components are matched against every glyph of that
/// color by rendering the candidate shape over the component's bounding box
/// and keeping the best intersection-over-union. Components smaller than
/// `min_fraction` of the expected glyph area are ignored.
pub fn detect_visible(img: &ImageSample, palette: &GlyphPalette, glyph_size: f32, min_fraction: f32) -> BTreeSet<usize> {
    let (h, w) = (img.height(), img.width());
    let px = to_u8(img);
    let expected_area = glyph_size * glyph_size * 0.5;
    let mut seen = vec![false; h * w];
    let mut found = BTreeSet::new();
    for start in 0..h * w {
        if seen[start] || px[start] == BACKGROUND {
            continue;
        }
        let color = px[start];
        let candidates: Vec<(usize, Shape)> = palette
            .glyphs
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().filter(|g| g.rgb == color).map(|g| (i, g.shape)))
            .collect();
        let mut component = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && px[q] == color {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        if candidates.is_empty() || (component.len() as f32) < min_fraction * expected_area {
            continue;
        }
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for &p in &component {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        let cx = (x0 + x1 + 1) as f32 / 2.0;
        let cy = (y0 + y1 + 1) as f32 / 2.0;
        let r = ((x1 - x0 + 1).max(y1 - y0 + 1)) as f32 / 2.0;
        let members: std::collections::HashSet<usize> = component.iter().copied().collect();
        let best = candidates
            .iter()
            .map(|&(id, shape)| {
                let (mut inter, mut union) = (0usize, 0usize);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let inside = shape.contains(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
                        let member = members.contains(&(y * w + x));
                        inter += (inside && member) as usize;
                        union += (inside || member) as usize;
                    }
                }
                (inter as f32 / union.max(1) as f32, id)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, id)) = best {
            found.insert(id);
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_train: 6,
            n_val: 2,
            n_test: 2,
            variant_sizes: vec![64],
            ..Default::default()
        }
    }

    #[test]
    fn palette_glyphs_are_unique() {
        let p = GlyphPalette::new(30, 24, 3);
        let glyphs: Vec<&Glyph> = p.glyphs.iter().flatten().collect();
        assert_eq!(glyphs.len(), 24);
        for (i, a) in glyphs.iter().enumerate() {
            assert_ne!(a.rgb, BACKGROUND);
            for b in &glyphs[i + 1..] {
                assert!(a.rgb != b.rgb || a.shape != b.shape);
            }
        }
        assert_eq!(p.visible_ids().count(), 24);
        let uniq: std::collections::HashSet<&String> = p.names.iter().collect();
        assert_eq!(uniq.len(), 30);
    }

    #[test]
    fn two_glyphs_are_counted_by_color_mask() {
        let spec = SyntheticSpec {
            n_shapes: 2,
            ..Default::default()
        };
        let palette = spec.palette();
        // id 0: first hue (red), circle; id 3: second hue, square.
        let (a, b) = (0usize, 3usize);
        let ga = palette.glyphs[a].clone().unwrap();
        let gb = palette.glyphs[b].clone().unwrap();
        assert_eq!((ga.shape, gb.shape), (Shape::Circle, Shape::Square));
        assert_eq!(ga.rgb, [255, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageSample::from_rgb(&render_recipe(&spec, &palette, &[a, b, 25], &mut rng).unwrap());
        let r = spec.glyph_size as f64 / 2.0;
        let circle = color_mask_count(&img, ga.rgb, 0) as f64;
        let square = color_mask_count(&img, gb.rgb, 0) as f64;
        assert!((circle - std::f64::consts::PI * r * r).abs() < 0.05 * circle, "circle {circle}");
        assert!((square - (2.0 * r + 1.0).powi(2)).abs() <= 2.0 * (2.0 * r + 1.0) + 1.0, "square {square}");
        let total = (spec.canvas_size * spec.canvas_size) as f64;
        let bg = color_mask_count(&img, BACKGROUND, 0) as f64;
        assert_eq!(bg + circle + square, total);
        assert_eq!(detect_visible(&img, &palette, spec.glyph_size as f32, 0.2), BTreeSet::from([a, b]));
    }

    #[test]
    fn invisible_only_recipe_is_blank() {
        let spec = SyntheticSpec::default();
        let palette = spec.palette();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = render_recipe(&spec, &palette, &[24, 25, 29], &mut rng).unwrap();
        assert!(img.pixels().all(|p| p.0 == BACKGROUND));
    }

    #[test]
    fn visible_sets_are_recoverable() {
        let spec = SyntheticSpec {
            n_shapes: 4,
            ..Default::default()
        };
        let palette = spec.palette();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let k = rng.random_range(1..=6);
            let ids = index::sample(&mut rng, spec.n_ingredients, k).into_vec();
            let img = ImageSample::from_rgb(&render_recipe(&spec, &palette, &ids, &mut rng).unwrap());
            let want: BTreeSet<usize> = ids.iter().copied().filter(|&i| palette.is_visible(i)).collect();
            assert_eq!(detect_visible(&img, &palette, spec.glyph_size as f32, 0.2), want);
        }
    }

    #[test]
    fn layout_overflow_is_reported() {
        let too_big = SyntheticSpec {
            glyph_size: 90,
            ..Default::default()
        };
        assert!(matches!(too_big.validate(), Err(Error::LayoutOverflow(_))));
        let too_many = SyntheticSpec {
            grid: 2,
            ..Default::default()
        };
        assert!(matches!(too_many.validate(), Err(Error::LayoutOverflow(_))));
        assert!(SyntheticSpec::default().validate().is_ok());
    }

    #[test]
    fn generation_is_pixel_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let ma = generate_synthetic_dataset(&spec, a.path()).unwrap();
        generate_synthetic_dataset(&spec, b.path()).unwrap();
        assert_eq!(ma.recipes().len(), 10);
        for name in ["manifest.jsonl", "corpus.jsonl", "palette.json", SPEC_FILE] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        for r in ma.recipes() {
            for img in &r.image_refs {
                let pa = a.path().join(img);
                assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(b.path().join(img)).unwrap());
                assert!(variant_path(&pa, 64).exists());
                assert_eq!(ma.load_image(img, 64).unwrap().size().unwrap(), 64);
            }
        }
        let counts: Vec<usize> = Partition::ALL.iter().map(|p| ma.partition(*p).len()).collect();
        assert_eq!(counts, vec![6, 2, 2]);
        let reloaded = DatasetManifest::load(&a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.recipes(), ma.recipes());
        reloaded.check_integrity().unwrap();
    }
}
