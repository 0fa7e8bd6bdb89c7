//! Recipe manifests, filtering and splitting, triplet sampling, image IO and
//! the synthetic glyph-meal generator.

mod image;
pub mod synth;

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{encode_recipe, CanonicalVocabulary, RawCorpus};

pub use self::image::{
    compose_grid, encoder_to_generator, generator_to_encoder, images_to_tensor, rescale_image, tensor_to_images,
    ImageSample, Scale, ValueDomain, ENCODER_MEAN, ENCODER_STD,
};
pub(crate) use self::image::bilinear_taps;
pub use synth::{generate_synthetic_dataset, GlyphPalette, SyntheticSpec, SPEC_FILE};

pub const MAX_INGREDIENTS: usize = 20;
pub const MAX_INSTRUCTIONS: usize = 20;
pub const MAX_IMAGES: usize = 5;

/// Size of the filtered reference corpus (recipes with at least one image,
/// 1-20 ingredients and 1-20 instructions). Informational only.
pub const REFERENCE_FILTERED_RECIPES: usize = 402_760;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub ingredient_ids: Vec<usize>,
    /// Paths relative to the manifest directory.
    pub image_refs: Vec<String>,
    pub partition: Partition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Recipe {
    fn validate(&self) -> Result<()> {
        let n = self.ingredient_ids.len();
        if !(1..=MAX_INGREDIENTS).contains(&n) {
            return Err(Error::InvalidParameter(format!(
                "recipe {:?} has {n} ingredients (allowed 1..={MAX_INGREDIENTS})",
                self.id
            )));
        }
        let m = self.image_refs.len();
        if !(1..=MAX_IMAGES).contains(&m) {
            return Err(Error::InvalidParameter(format!(
                "recipe {:?} has {m} images (allowed 1..={MAX_IMAGES})",
                self.id
            )));
        }
        Ok(())
    }
}

/// Immutable list of recipes plus the directory image paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    recipes: Vec<Recipe>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, recipes: Vec<Recipe>) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &recipes {
            r.validate()?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate recipe id {:?}", r.id)));
            }
        }
        Ok(Self {
            root: root.into(),
            recipes,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn recipes(&self) -> &[Recipe] {
        &self.recipes
    }

    pub fn partition(&self, p: Partition) -> Vec<&Recipe> {
        self.recipes.iter().filter(|r| r.partition == p).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Recipe> {
        self.recipes.iter().find(|r| r.id == id)
    }

    /// Number of canonical ids the manifest needs (max id + 1).
    pub fn id_space(&self) -> usize {
        self.recipes
            .iter()
            .flat_map(|r| r.ingredient_ids.iter().copied())
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn image_path(&self, image_ref: &str) -> PathBuf {
        self.root.join(image_ref)
    }

    /// Loads an image at `size`, preferring a pre-scaled `name@SIZE.png`
    /// sibling and falling back to bilinear rescaling of the original.
    pub fn load_image(&self, image_ref: &str, size: usize) -> Result<ImageSample> {
        let full = self.image_path(image_ref);
        let variant = variant_path(&full, size);
        let img = if variant.exists() {
            ImageSample::load(&variant)?
        } else {
            rescale_image(&ImageSample::load(&full)?, size)?
        };
        if img.size()? != size {
            return rescale_image(&img, size);
        }
        Ok(img)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        let mut recipes = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            recipes.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, recipes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.recipes {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(Error::io(path))
    }

    /// Checks structural invariants and that every image file exists.
    pub fn check_integrity(&self) -> Result<()> {
        for r in &self.recipes {
            r.validate()?;
            for img in &r.image_refs {
                let p = self.image_path(img);
                if !p.exists() {
                    return Err(Error::Io {
                        path: p,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "image missing"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `dir/name.png` -> `dir/name@64.png`.
pub fn variant_path(path: &Path, size: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("png");
    path.with_file_name(format!("{stem}@{size}.{ext}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    /// Partition sizes by the largest-remainder method. Leftover units go to
    /// the largest fractional parts; ties favour train, then val, then test.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("split fractions {f:?} must sum to 1")));
        }
        let quotas: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut left = n.saturating_sub(counts.iter().sum());
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        Ok([counts[0], counts[1], counts[2]])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub no_image: usize,
    pub ingredient_count: usize,
    pub instruction_count: usize,
    pub empty_encoding: usize,
    pub dropped_ingredients: usize,
    pub retained: usize,
}

/// Applies the corpus filters, encodes ingredients and assigns partitions by
/// recipe. Recipes keep corpus order; partition membership comes from a
/// seeded shuffle.
pub fn filter_and_split(
    corpus: &RawCorpus,
    vocab: &CanonicalVocabulary,
    fractions: SplitFractions,
    seed: u64,
    root: impl Into<PathBuf>,
) -> Result<(DatasetManifest, FilterStats)> {
    let mut stats = FilterStats {
        input: corpus.recipes.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for r in &corpus.recipes {
        if r.image_paths.is_empty() {
            stats.no_image += 1;
            continue;
        }
        if !(1..=MAX_INGREDIENTS).contains(&r.ingredients.len()) {
            stats.ingredient_count += 1;
            continue;
        }
        if !(1..=MAX_INSTRUCTIONS).contains(&r.n_instructions) {
            stats.instruction_count += 1;
            continue;
        }
        let encoded = match encode_recipe(&r.ingredients, vocab) {
            Ok(e) => e,
            Err(Error::EmptyEncoding) => {
                stats.empty_encoding += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        stats.dropped_ingredients += encoded.dropped;
        kept.push(Recipe {
            id: r.id.clone(),
            ingredient_ids: encoded.ids,
            image_refs: r.image_paths.iter().take(MAX_IMAGES).cloned().collect(),
            partition: Partition::Train,
            category: None,
        });
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    stats.retained = kept.len();
    assign_partitions(&mut kept, fractions, seed)?;
    Ok((DatasetManifest::new(root, kept)?, stats))
}

pub(crate) fn assign_partitions(recipes: &mut [Recipe], fractions: SplitFractions, seed: u64) -> Result<()> {
    let [n_train, n_val, _] = fractions.counts(recipes.len())?;
    let mut order: Vec<usize> = (0..recipes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        recipes[i].partition = if rank < n_train {
            Partition::Train
        } else if rank < n_train + n_val {
            Partition::Val
        } else {
            Partition::Test
        };
    }
    Ok(())
}

/// A recipe, one of its images, and an image of a different recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet<'a> {
    pub recipe: &'a Recipe,
    pub positive_image: &'a str,
    pub negative_recipe: &'a Recipe,
    pub negative_image: &'a str,
}

/// Samples triplets from one partition. The positive recipe is uniform, its
/// image uniform among its images; the negative recipe is uniform among the
/// other recipes, its image uniform among that recipe's images.
#[derive(Debug, Clone)]
pub struct TripletSampler<'a> {
    recipes: Vec<&'a Recipe>,
}

impl<'a> TripletSampler<'a> {
    pub fn new(manifest: &'a DatasetManifest, partition: Partition) -> Result<Self> {
        let recipes = manifest.partition(partition);
        if recipes.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "partition {partition} has {} recipes, need at least 2",
                recipes.len()
            )));
        }
        Ok(Self { recipes })
    }

    pub fn recipes(&self) -> &[&'a Recipe] {
        &self.recipes
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Triplet<'a> {
        let n = self.recipes.len();
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let (r, neg) = (self.recipes[i], self.recipes[j]);
        Triplet {
            recipe: r,
            positive_image: &r.image_refs[rng.random_range(0..r.image_refs.len())],
            negative_recipe: neg,
            negative_image: &neg.image_refs[rng.random_range(0..neg.image_refs.len())],
        }
    }
}

pub fn sample_triplet<'a>(
    manifest: &'a DatasetManifest,
    partition: Partition,
    rng: &mut impl Rng,
) -> Result<Triplet<'a>> {
    Ok(TripletSampler::new(manifest, partition)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabulary, RawRecipe};
    use proptest::prelude::*;

    fn recipe(id: &str, n_images: usize, partition: Partition) -> Recipe {
        Recipe {
            id: id.into(),
            ingredient_ids: vec![0, 1],
            image_refs: (0..n_images).map(|k| format!("{id}_{k}.png")).collect(),
            partition,
            category: None,
        }
    }

    fn raw(id: usize, ings: &[&str], n_inst: usize, n_img: usize) -> RawRecipe {
        RawRecipe {
            id: format!("r{id}"),
            ingredients: ings.iter().map(|s| s.to_string()).collect(),
            n_instructions: n_inst,
            image_paths: (0..n_img).map(|k| format!("img/{id}_{k}.jpg")).collect(),
        }
    }

    #[test]
    fn ten_recipes_split_by_largest_remainder() {
        let counts = SplitFractions::default().counts(10).unwrap();
        assert_eq!(counts, [7, 2, 1]);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert!(SplitFractions { train: 0.5, val: 0.5, test: 0.5 }.counts(3).is_err());
    }

    #[test]
    fn filters_apply_and_partitions_are_disjoint() {
        let mut recipes: Vec<RawRecipe> = (0..12).map(|i| raw(i, &["salt", "egg"], 3, 2)).collect();
        recipes.push(raw(100, &["salt"], 3, 0));
        recipes.push(raw(101, &[], 3, 1));
        recipes.push(raw(102, &["salt"], 0, 1));
        recipes.push(raw(103, &["salt"], 21, 1));
        recipes.push(raw(104, &["unobtainium"], 1, 1));
        recipes.push(raw(105, &["egg"; 21], 1, 1));
        recipes.push(raw(106, &["egg"], 1, 9));
        let corpus = RawCorpus::new(recipes).unwrap();
        let vocab = build_vocabulary(&corpus, 2, &[]).unwrap();
        let (m, stats) = filter_and_split(&corpus, &vocab, SplitFractions::default(), 1, "").unwrap();
        assert_eq!(stats.no_image, 1);
        assert_eq!(stats.ingredient_count, 2);
        assert_eq!(stats.instruction_count, 2);
        assert_eq!(stats.empty_encoding, 1);
        assert_eq!(m.recipes().len(), 13);
        assert_eq!(m.get("r106").unwrap().image_refs.len(), MAX_IMAGES);
        let sizes: Vec<usize> = Partition::ALL.iter().map(|p| m.partition(*p).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 13);
        assert_eq!(sizes, SplitFractions::default().counts(13).unwrap().to_vec());
    }

    #[test]
    fn empty_after_filtering_is_an_error() {
        let corpus = RawCorpus::new(vec![raw(0, &["salt"], 1, 0)]).unwrap();
        let vocab = build_vocabulary(&corpus, 2, &[]).unwrap();
        assert!(matches!(
            filter_and_split(&corpus, &vocab, SplitFractions::default(), 0, ""),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let corpus = RawCorpus::new((0..30).map(|i| raw(i, &["salt"], 1, 1)).collect()).unwrap();
        let vocab = build_vocabulary(&corpus, 2, &[]).unwrap();
        let a = filter_and_split(&corpus, &vocab, SplitFractions::default(), 5, "").unwrap();
        let b = filter_and_split(&corpus, &vocab, SplitFractions::default(), 5, "").unwrap();
        let c = filter_and_split(&corpus, &vocab, SplitFractions::default(), 6, "").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn two_recipe_partition_always_uses_other_negative() {
        let m = DatasetManifest::new("", vec![recipe("a", 2, Partition::Train), recipe("b", 3, Partition::Train)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = sample_triplet(&m, Partition::Train, &mut rng).unwrap();
            assert_ne!(t.recipe.id, t.negative_recipe.id);
            assert!(t.recipe.image_refs.iter().any(|i| i == t.positive_image));
            assert!(t.negative_recipe.image_refs.iter().any(|i| i == t.negative_image));
        }
    }

    #[test]
    fn tiny_partition_is_insufficient() {
        let m = DatasetManifest::new("", vec![recipe("a", 1, Partition::Train), recipe("b", 1, Partition::Test)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_triplet(&m, Partition::Train, &mut rng), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn positive_frequencies_within_binomial_bound() {
        let recipes = (0..10).map(|i| recipe(&format!("r{i}"), 2, Partition::Train)).collect();
        let m = DatasetManifest::new("", recipes).unwrap();
        let sampler = TripletSampler::new(&m, Partition::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..10_000 {
            *counts.entry(sampler.sample(&mut rng).recipe.id.clone()).or_insert(0usize) += 1;
        }
        // Binomial(10000, 0.1): mean 1000, sd sqrt(900) = 30.
        let bound = 3.0 * (1000.0f64 * 0.9).sqrt();
        for (id, c) in counts {
            assert!(((c as f64) - 1000.0).abs() <= bound, "{id}: {c}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let recipes = (0..5).map(|i| recipe(&format!("r{i}"), 3, Partition::Val)).collect();
        let m = DatasetManifest::new("", recipes).unwrap();
        let s = TripletSampler::new(&m, Partition::Val).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| {
                    let t = s.sample(&mut rng);
                    (t.positive_image.to_string(), t.negative_image.to_string())
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn manifest_rejects_invalid_recipes() {
        let mut r = recipe("a", 0, Partition::Train);
        assert!(DatasetManifest::new("", vec![r.clone()]).is_err());
        r.image_refs = vec!["x".into()];
        r.ingredient_ids = vec![0; 21];
        assert!(DatasetManifest::new("", vec![r]).is_err());
        let d = recipe("a", 1, Partition::Train);
        assert!(DatasetManifest::new("", vec![d.clone(), d]).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = recipe("a", 2, Partition::Test);
        r.category = Some("salad".into());
        let m = DatasetManifest::new(dir.path(), vec![r, recipe("b", 1, Partition::Train)]).unwrap();
        let p = dir.path().join("manifest.jsonl");
        m.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn counts_sum_to_n(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
            let f = SplitFractions { train: a, val: b, test: 1.0 - a - b };
            let c = f.counts(n).unwrap();
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for (k, q) in c.iter().zip([a, b, 1.0 - a - b]) {
                prop_assert!((*k as f64 - q * n as f64).abs() < 1.0 + 1e-6);
            }
        }
    }
}
