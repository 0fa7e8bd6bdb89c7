//! Evaluations that need a trained generator: image grids, retrieval with
//! synthesized queries, the cycle gap and interpolation strips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assoc::AssociationModel;
use crate::data::synth::color_mask_count;
use crate::data::{compose_grid, images_to_tensor, rescale_image, DatasetManifest, GlyphPalette, ImageSample, Partition, Recipe, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gan::{interpolate_encodings, GanModel};
use crate::retrieval::{evaluate_retrieval, Direction, RetrievalReport};

/// Per-channel tolerance when counting glyph-colored pixels in generated
/// images.
pub const MASK_TOLERANCE: u8 = 48;

const GRID_PAD: usize = 2;

/// Noise vector seeded by the recipe id, so a recipe always gets the same
/// z for a given base seed.
pub fn recipe_noise(gan: &GanModel, seed: u64, recipe_id: &str) -> Vec<f32> {
    let digest = Sha256::digest(recipe_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes));
    gan.sample_noise(&mut rng)
}

/// Highest-resolution image for one encoding and noise vector.
pub fn generate_final(gan: &GanModel, p: &[f32], z: &[f32]) -> Result<ImageSample> {
    gan.generate_one(p, z)?
        .pop()
        .ok_or_else(|| Error::Config("generator has no branches".into()))
}

/// One column per recipe, one row per scale, all with the same z. Smaller
/// scales are upsampled to the largest for display.
pub fn run_fixed_noise_grid(gan: &GanModel, encodings: &[Vec<f32>], z: &[f32]) -> Result<ImageSample> {
    let cell = *gan.config.sizes().last().unwrap_or(&gan.config.base_size);
    let columns: Vec<Vec<ImageSample>> = encodings.iter().map(|p| gan.generate_one(p, z)).collect::<Result<_>>()?;
    let rows: Vec<Vec<ImageSample>> = (0..gan.config.branches)
        .map(|s| columns.iter().map(|col| rescale_image(&col[s], cell)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    compose_grid(&rows, cell, GRID_PAD)
}

/// Highest-resolution images for one recipe under several noise vectors,
/// arranged four per row.
pub fn run_fixed_recipe_grid(gan: &GanModel, encoding: &[f32], noises: &[Vec<f32>]) -> Result<(ImageSample, Vec<ImageSample>)> {
    let images: Vec<ImageSample> = noises.iter().map(|z| generate_final(gan, encoding, z)).collect::<Result<_>>()?;
    let cell = *gan.config.sizes().last().unwrap_or(&gan.config.base_size);
    let rows: Vec<Vec<ImageSample>> = images.chunks(4).map(<[ImageSample]>::to_vec).collect();
    Ok((compose_grid(&rows, cell, GRID_PAD)?, images))
}

/// Aligned FoodSpace embeddings for one partition: ingredient encodings,
/// encodings of one generated image per recipe and of the recipe's first
/// real image.
pub struct GeneratedEmbeddings {
    pub recipes: Vec<Vec<f32>>,
    pub generated: Vec<Vec<f32>>,
    pub real: Vec<Vec<f32>>,
}

pub fn generated_embeddings(gan: &GanModel, assoc: &AssociationModel, manifest: &DatasetManifest, partition: Partition, seed: u64) -> Result<GeneratedEmbeddings> {
    let recipes = manifest.partition(partition);
    let mut out = GeneratedEmbeddings {
        recipes: Vec::with_capacity(recipes.len()),
        generated: Vec::with_capacity(recipes.len()),
        real: Vec::with_capacity(recipes.len()),
    };
    for r in recipes {
        let p = assoc.encode_recipe(&r.ingredient_ids)?;
        let img = generate_final(gan, &p, &recipe_noise(gan, seed, &r.id))?;
        let x = images_to_tensor(&[img], assoc.params.dtype())?;
        let q = assoc.images.encode_generated(&x)?.squeeze(0)?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
        let real = manifest.load_image(&r.image_refs[0], assoc.config.image_size)?;
        out.real.push(assoc.encode_image(&real)?);
        out.recipes.push(p);
        out.generated.push(q);
    }
    Ok(out)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleGap {
    /// Mean cosine between each generated image's embedding and its own
    /// recipe's target embedding.
    pub paired: f64,
    /// Mean cosine to the target embeddings of all other recipes.
    pub mismatched: f64,
}

impl CycleGap {
    pub fn gap(&self) -> f64 {
        self.paired - self.mismatched
    }
}

/// Paired versus mismatched cosine between generated-image embeddings and
/// aligned `targets` (recipe encodings or real-image embeddings).
pub fn cycle_gap(generated: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<CycleGap> {
    let n = generated.len();
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} generated vs {} target embeddings", targets.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} recipes cannot form mismatched pairs")));
    }
    let (mut paired, mut mismatched) = (0.0, 0.0);
    for (i, g) in generated.iter().enumerate() {
        for (j, q) in targets.iter().enumerate() {
            if i == j {
                paired += cosine(g, q);
            } else {
                mismatched += cosine(g, q);
            }
        }
    }
    Ok(CycleGap {
        paired: paired / n as f64,
        mismatched: mismatched / (n * (n - 1)) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRetrieval {
    pub random: RetrievalReport,
    pub generated: RetrievalReport,
    pub real: RetrievalReport,
}

impl SynthRetrieval {
    pub fn rows(&self) -> Vec<(String, RetrievalReport)> {
        vec![
            ("random".into(), self.random.clone()),
            ("generated".into(), self.generated.clone()),
            ("real".into(), self.real.clone()),
        ]
    }
}

/// Image-to-recipe retrieval with synthesized queries, with random and
/// real-image baselines over the same pools.
pub fn eval_synth_retrieval(e: &GeneratedEmbeddings, pool_size: usize, repeats: usize, seed: u64) -> Result<SynthRetrieval> {
    let n = e.recipes.len();
    if pool_size > n {
        return Err(Error::InsufficientData(format!("pool of {pool_size} exceeds {n} recipes")));
    }
    let d = e.recipes.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = || -> Vec<Vec<f32>> { (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect() };
    let (rp, rq) = (random(), random());
    let run = |p: &[Vec<f32>], q: &[Vec<f32>]| evaluate_retrieval(p, q, pool_size, repeats, Direction::Im2Recipe, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SynthRetrieval {
        random: run(&rp, &rq)?,
        generated: run(&e.recipes, &e.generated)?,
        real: run(&e.recipes, &e.real)?,
    })
}

/// Glyph-colored pixel count a visible glyph of `spec` leaves at `size`,
/// scaled by `fraction`.
fn min_glyph_pixels(spec: &SyntheticSpec, size: usize, fraction: f64) -> usize {
    let side = spec.glyph_size as f64 * size as f64 / spec.canvas_size as f64;
    (side * side * fraction).ceil() as usize
}

fn glyph_pixels(img: &ImageSample, palette: &GlyphPalette, ids: &[usize]) -> usize {
    ids.iter()
        .filter_map(|&id| palette.glyphs.get(id).and_then(Option::as_ref))
        .map(|g| color_mask_count(img, g.rgb, MASK_TOLERANCE))
        .sum()
}

/// Fraction of recipes for which removing one visible glyph from the
/// ingredient list visibly removes that glyph's color from the generated
/// image (same z), judged by a color mask.
pub fn differing_glyph_rate(
    gan: &GanModel,
    assoc: &AssociationModel,
    spec: &SyntheticSpec,
    recipes: &[&Recipe],
    seed: u64,
) -> Result<Option<f64>> {
    let palette = spec.palette();
    let size = *gan.config.sizes().last().unwrap_or(&gan.config.base_size);
    let threshold = min_glyph_pixels(spec, size, 0.25);
    let (mut tried, mut detected) = (0usize, 0usize);
    for r in recipes {
        let Some(&glyph) = r.ingredient_ids.iter().find(|&&id| palette.is_visible(id)) else {
            continue;
        };
        let without: Vec<usize> = r.ingredient_ids.iter().copied().filter(|&id| id != glyph).collect();
        if without.is_empty() {
            continue;
        }
        let z = recipe_noise(gan, seed, &r.id);
        let with_img = generate_final(gan, &assoc.encode_recipe(&r.ingredient_ids)?, &z)?;
        let without_img = generate_final(gan, &assoc.encode_recipe(&without)?, &z)?;
        let a = glyph_pixels(&with_img, &palette, &[glyph]);
        let b = glyph_pixels(&without_img, &palette, &[glyph]);
        tried += 1;
        if a >= threshold && a >= 2 * b.max(1) {
            detected += 1;
        }
    }
    Ok((tried > 0).then(|| detected as f64 / tried as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadeRow {
    pub step: usize,
    pub lambda: f64,
    /// Pixels matching glyphs only the source recipe has.
    pub from_pixels: usize,
    /// Pixels matching glyphs only the target recipe has.
    pub to_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub from: String,
    pub to: String,
    pub rows: Vec<FadeRow>,
    /// Source-glyph pixels never increase and target-glyph pixels never
    /// decrease along the strip.
    pub monotone: bool,
}

impl InterpolationReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("interpolation {} -> {}\n{:>4} {:>6} {:>10} {:>10}\n", self.from, self.to, "step", "lambda", "from_px", "to_px");
        for r in &self.rows {
            s.push_str(&format!("{:>4} {:>6.2} {:>10} {:>10}\n", r.step, r.lambda, r.from_pixels, r.to_pixels));
        }
        s.push_str(&format!("monotone = {}\n", self.monotone));
        s
    }
}

/// Interpolates between two recipes with a shared z and measures how the
/// glyphs exclusive to each endpoint fade in and out.
pub fn interpolation_fade(
    gan: &GanModel,
    assoc: &AssociationModel,
    palette: &GlyphPalette,
    from: &Recipe,
    to: &Recipe,
    steps: usize,
    z: &[f32],
) -> Result<(ImageSample, InterpolationReport)> {
    let p_from = assoc.encode_recipe(&from.ingredient_ids)?;
    let p_to = assoc.encode_recipe(&to.ingredient_ids)?;
    let strip = interpolate_encodings(gan, &p_from, &p_to, steps, z)?;
    let only = |a: &Recipe, b: &Recipe| -> Vec<usize> {
        a.ingredient_ids
            .iter()
            .copied()
            .filter(|id| palette.is_visible(*id) && !b.ingredient_ids.contains(id))
            .collect()
    };
    let (from_ids, to_ids) = (only(from, to), only(to, from));
    let finals: Vec<ImageSample> = strip
        .into_iter()
        .map(|mut pyramid| pyramid.pop().ok_or_else(|| Error::Config("generator has no branches".into())))
        .collect::<Result<_>>()?;
    let rows: Vec<FadeRow> = finals
        .iter()
        .enumerate()
        .map(|(t, img)| FadeRow {
            step: t,
            lambda: t as f64 / (steps - 1) as f64,
            from_pixels: glyph_pixels(img, palette, &from_ids),
            to_pixels: glyph_pixels(img, palette, &to_ids),
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].from_pixels <= w[0].from_pixels && w[1].to_pixels >= w[0].to_pixels);
    let cell = finals[0].height();
    let grid = compose_grid(&[finals], cell, GRID_PAD)?;
    Ok((
        grid,
        InterpolationReport {
            from: from.id.clone(),
            to: to.id.clone(),
            rows,
            monotone,
        },
    ))
}

/// Picks the first pair of recipes in `recipes` whose visible glyph sets
/// are disjoint and non-empty.
pub fn disjoint_pair<'a>(recipes: &[&'a Recipe], palette: &GlyphPalette) -> Option<(&'a Recipe, &'a Recipe)> {
    let visible = |r: &Recipe| -> Vec<usize> { r.ingredient_ids.iter().copied().filter(|id| palette.is_visible(*id)).collect() };
    for (i, a) in recipes.iter().enumerate() {
        let va = visible(a);
        if va.is_empty() {
            continue;
        }
        for b in &recipes[i + 1..] {
            let vb = visible(b);
            if !vb.is_empty() && vb.iter().all(|id| !va.contains(id)) {
                return Some((a, b));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use candle_core::DType;

    fn tiny_gan() -> GanModel {
        GanModel::new(
            GanConfig {
                foodspace_dim: 6,
                c_dim: 4,
                z_dim: 4,
                base_size: 8,
                branches: 2,
                gen_width: 2,
                disc_width: 2,
                ..Default::default()
            },
            DType::F32,
        )
        .unwrap()
    }

    #[test]
    fn fixed_noise_grid_has_one_column_per_recipe() {
        let gan = tiny_gan();
        let z = recipe_noise(&gan, 0, "a");
        let enc = vec![vec![0.1; 6], vec![-0.2; 6]];
        let grid = run_fixed_noise_grid(&gan, &enc, &z).unwrap();
        // Two columns and two rows of 16-pixel cells with padding.
        assert_eq!((grid.width(), grid.height()), (2 * 16 + 3 * GRID_PAD, 2 * 16 + 3 * GRID_PAD));
        assert_eq!(run_fixed_noise_grid(&gan, &enc, &z).unwrap(), grid);
    }

    #[test]
    fn fixed_recipe_grid_varies_noise() {
        let gan = tiny_gan();
        let p = vec![0.3; 6];
        let noises: Vec<Vec<f32>> = (0..16).map(|i| recipe_noise(&gan, 0, &i.to_string())).collect();
        let (_, images) = run_fixed_recipe_grid(&gan, &p, &noises).unwrap();
        assert_eq!(images.len(), 16);
        let (_, one) = run_fixed_recipe_grid(&gan, &p, &noises[..1]).unwrap();
        assert_eq!(one[0], generate_final(&gan, &p, &noises[0]).unwrap());
    }

    #[test]
    fn recipe_noise_depends_on_id_and_seed() {
        let gan = tiny_gan();
        assert_eq!(recipe_noise(&gan, 1, "x"), recipe_noise(&gan, 1, "x"));
        assert_ne!(recipe_noise(&gan, 1, "x"), recipe_noise(&gan, 1, "y"));
        assert_ne!(recipe_noise(&gan, 1, "x"), recipe_noise(&gan, 2, "x"));
    }

    #[test]
    fn cycle_gap_on_hand_set_embeddings() {
        let generated = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let g = cycle_gap(&generated, &[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!((g.paired, g.mismatched), (1.0, 0.0));
        let g = cycle_gap(&generated, &[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let h = 0.5f64.sqrt();
        assert!((g.paired - h / 2.0).abs() < 1e-6, "{g:?}");
        assert!((g.mismatched - (1.0 + h) / 2.0).abs() < 1e-6, "{g:?}");
        assert!(matches!(cycle_gap(&generated[..1], &generated[..1]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn synth_retrieval_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows = |n: usize| -> Vec<Vec<f32>> { (0..n).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect() };
        let recipes = rows(40);
        let e = GeneratedEmbeddings {
            generated: recipes.clone(),
            real: recipes.clone(),
            recipes,
        };
        let r = eval_synth_retrieval(&e, 20, 5, 1).unwrap();
        assert_eq!(r.generated.med_r, 1.0);
        assert_eq!(r.real.med_r, 1.0);
        assert!(r.random.med_r > 3.0);
        assert!(matches!(eval_synth_retrieval(&e, 41, 1, 1), Err(Error::InsufficientData(_))));
    }
}
