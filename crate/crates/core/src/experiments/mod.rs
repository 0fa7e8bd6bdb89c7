//! End-to-end experiment runs: data, association, generator, metrics and
//! the report tables.

mod eval;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assoc::{embed_manifest, train_association, write_history_table, AssocConfig, AssociationModel};
use crate::config::{config_hash, to_text};
use crate::data::{generate_synthetic_dataset, rescale_image, DatasetManifest, ImageSample, Partition, SplitFractions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gan::{train_gan, GanConfig, GanModel};
use crate::metrics::{
    extract_features, frechet_report, inception_score, train_extractor, ExtractorConfig, ExtractorReport, FeatureSource, FrechetReport, GlyphClassifier,
};
use crate::retrieval::{evaluate_retrieval, format_reports, Direction, RetrievalReport};
use crate::vocab::VocabConfig;

pub use eval::{
    cycle_gap, differing_glyph_rate, disjoint_pair, eval_synth_retrieval, generate_final, generated_embeddings, interpolation_fade, recipe_noise,
    run_fixed_noise_grid, run_fixed_recipe_grid, CycleGap, FadeRow, GeneratedEmbeddings, InterpolationReport, SynthRetrieval, MASK_TOLERANCE,
};

pub const LOCK_FILE: &str = ".lock";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub repeats: usize,
    /// Generated and real images per scale for IS and FID.
    pub n_samples: usize,
    pub n_splits: usize,
    /// Recipes in the fixed-noise grid.
    pub grid_recipes: usize,
    /// Noise vectors in the fixed-recipe grid.
    pub grid_noise: usize,
    pub interp_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_size: 100,
            repeats: 10,
            n_samples: 900,
            n_splits: 10,
            grid_recipes: 4,
            grid_noise: 16,
            interp_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seeds every stage.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Existing dataset directory; empty generates a synthetic one under
    /// `out_dir/data`.
    pub data_dir: String,
    pub vocab: VocabConfig,
    pub split: SplitFractions,
    pub synth: SyntheticSpec,
    pub assoc: AssocConfig,
    pub gan: GanConfig,
    pub extractor: ExtractorConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/experiment"),
            data_dir: String::new(),
            vocab: VocabConfig::default(),
            split: SplitFractions::default(),
            synth: SyntheticSpec::default(),
            assoc: AssocConfig::desk(),
            gan: GanConfig::desk(),
            extractor: ExtractorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copy with the top-level seed pushed into every stage.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.vocab.embedding.seed = c.seed;
        c.synth.seed = c.seed;
        c.assoc.seed = c.seed;
        c.gan.seed = c.seed;
        c.extractor.seed = c.seed;
        c
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Config(format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(Error::io(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// IS of generated and real images and FID between them at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub size: usize,
    pub is_mean: f64,
    pub is_std: f64,
    pub real_is_mean: f64,
    pub real_is_std: f64,
    pub fid: FrechetReport,
}

pub fn format_generation_rows(rows: &[GenerationRow]) -> String {
    let mut s = format!("{:<10} {:>16} {:>16} {:>10}\n", "scale", "IS", "IS (real)", "FID");
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>16} {:>16} {:>10.3}\n",
            format!("{0}x{0}", r.size),
            format!("{:.3} ± {:.3}", r.is_mean, r.is_std),
            format!("{:.3} ± {:.3}", r.real_is_mean, r.real_is_std),
            r.fid.distance
        ));
    }
    s
}

/// Evaluates every generator scale on the `partition` recipes. Sample k
/// uses recipe `k mod n` with noise seeded by its id and `k / n`; the real
/// set cycles through the same recipes' images.
pub fn generation_metrics(
    gan: &GanModel,
    assoc: &AssociationModel,
    manifest: &DatasetManifest,
    partition: Partition,
    extractor: &GlyphClassifier,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<GenerationRow>> {
    let recipes = manifest.partition(partition);
    if recipes.is_empty() {
        return Err(Error::InsufficientData(format!("no {partition} recipes")));
    }
    let sizes = gan.config.sizes();
    let input = extractor.config.input_size;
    let n = eval.n_samples;
    let mut generated: Vec<Vec<ImageSample>> = vec![Vec::with_capacity(n); sizes.len()];
    let mut real: Vec<Vec<ImageSample>> = vec![Vec::with_capacity(n); sizes.len()];
    let encodings: Vec<Vec<f32>> = recipes.iter().map(|r| assoc.encode_recipe(&r.ingredient_ids)).collect::<Result<_>>()?;
    for k in 0..n {
        let (i, round) = (k % recipes.len(), k / recipes.len());
        let r = recipes[i];
        let z = recipe_noise(gan, seed.wrapping_add(round as u64), &r.id);
        for (s, img) in gan.generate_one(&encodings[i], &z)?.iter().enumerate() {
            generated[s].push(rescale_image(img, input)?);
        }
        let image_ref = &r.image_refs[round % r.image_refs.len()];
        for (s, &size) in sizes.iter().enumerate() {
            real[s].push(rescale_image(&manifest.load_image(image_ref, size)?, input)?);
        }
    }
    sizes
        .iter()
        .enumerate()
        .map(|(s, &size)| {
            let (gf, gp) = extract_features(&generated[s], extractor, FeatureSource::Generated)?;
            let (rf, rp) = extract_features(&real[s], extractor, FeatureSource::Real)?;
            let (is_mean, is_std) = inception_score(&gp, eval.n_splits)?;
            let (real_is_mean, real_is_std) = inception_score(&rp, eval.n_splits)?;
            Ok(GenerationRow {
                size,
                is_mean,
                is_std,
                real_is_mean,
                real_is_std,
                fid: frechet_report(&rf, &gf)?,
            })
        })
        .collect()
}

fn random_embeddings(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Retrieval in both directions for learned and random embeddings.
pub fn retrieval_table(recipes: &[Vec<f32>], images: &[Vec<f32>], pool_size: usize, repeats: usize, seed: u64) -> Result<Vec<(String, RetrievalReport)>> {
    let d = recipes.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rp = random_embeddings(recipes.len(), d, &mut rng);
    let rq = random_embeddings(images.len(), d, &mut rng);
    let mut rows = Vec::new();
    for direction in [Direction::Im2Recipe, Direction::Recipe2Im] {
        let run = |p: &[Vec<f32>], q: &[Vec<f32>]| evaluate_retrieval(p, q, pool_size, repeats, direction, &mut ChaCha8Rng::seed_from_u64(seed));
        rows.push(("random".to_string(), run(&rp, &rq)?));
        rows.push(("foodspace".to_string(), run(recipes, images)?));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub n_recipes: [usize; 3],
    pub retrieval: Vec<(String, RetrievalReport)>,
    pub extractor: ExtractorReport,
    pub generation: Vec<GenerationRow>,
    pub synth_retrieval: Vec<(String, RetrievalReport)>,
    /// Generated-image embeddings against recipe encodings.
    pub cycle_recipe: CycleGap,
    /// Generated-image embeddings against real-image embeddings.
    pub cycle_image: CycleGap,
    /// Fraction of one-glyph edits whose color the generator drops.
    pub glyph_edit_rate: Option<f64>,
    pub interpolation: Option<InterpolationReport>,
    /// Files written under the output directory.
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("config_hash = {}\n", self.config_hash);
        s.push_str(&format!(
            "recipes (train/val/test) = {}/{}/{}\n\n",
            self.n_recipes[0], self.n_recipes[1], self.n_recipes[2]
        ));
        s.push_str("[retrieval]\n");
        s.push_str(&format_reports(&self.retrieval));
        s.push_str(&format!(
            "\n[extractor]\ntrain_accuracy = {:.4}\ntest_accuracy = {:.4}\nclasses = {}\n",
            self.extractor.train_accuracy, self.extractor.test_accuracy, self.extractor.n_classes
        ));
        s.push_str("\n[generation]\n");
        s.push_str(&format_generation_rows(&self.generation));
        for r in &self.generation {
            if r.fid.n_real < r.fid.dim || r.fid.n_fake < r.fid.dim {
                s.push_str(&format!("warning: {0}x{0} FID uses fewer samples than feature dimensions\n", r.size));
            }
        }
        s.push_str("\n[synthesized queries]\n");
        s.push_str(&format_reports(&self.synth_retrieval));
        s.push_str("\n[cycle]\n");
        for (name, g) in [("recipe", &self.cycle_recipe), ("image", &self.cycle_image)] {
            s.push_str(&format!(
                "{name}: paired = {:.4} mismatched = {:.4} gap = {:.4}\n",
                g.paired,
                g.mismatched,
                g.gap()
            ));
        }
        if let Some(rate) = self.glyph_edit_rate {
            s.push_str(&format!("glyph_edit_rate = {rate:.4}\n"));
        }
        if let Some(interp) = &self.interpolation {
            s.push('\n');
            s.push_str(&interp.to_text());
        }
        s.push_str("\n[artifacts]\n");
        for a in &self.artifacts {
            s.push_str(a);
            s.push('\n');
        }
        s
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Wall-clock seconds per stage; kept apart from the report so reruns with
/// the same seed produce identical reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
    pub total_seconds: f64,
}

impl Timing {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TIMING_FILE);
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, secs) in &self.stages {
            s.push_str(&format!("{name} = {secs:.1}s\n"));
        }
        s.push_str(&format!("total = {:.1}s\n", self.total_seconds));
        s
    }
}

struct Stopwatch {
    started: Instant,
    last: Instant,
    timing: Timing,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            started: now,
            last: now,
            timing: Timing::default(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        let secs = (now - self.last).as_secs_f64();
        log::info!("{name} finished in {secs:.1}s");
        self.timing.stages.push((name.to_string(), secs));
        self.last = now;
    }

    fn finish(mut self) -> Timing {
        self.timing.total_seconds = self.started.elapsed().as_secs_f64();
        self.timing
    }
}

fn write_text(out: &Path, name: &str, text: &str, artifacts: &mut Vec<String>) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, text).map_err(Error::io(&path))?;
    artifacts.push(name.to_string());
    Ok(())
}

fn save_image(out: &Path, name: &str, img: &ImageSample, artifacts: &mut Vec<String>) -> Result<()> {
    img.save(&out.join(name))?;
    artifacts.push(name.to_string());
    Ok(())
}

/// Loads the dataset named by the config or generates the synthetic one.
/// Returns the spec when the dataset is synthetic.
fn prepare_data(cfg: &ExperimentConfig) -> Result<(DatasetManifest, Option<SyntheticSpec>)> {
    if cfg.data_dir.is_empty() {
        let dir = cfg.out_dir.join("data");
        let manifest = generate_synthetic_dataset(&cfg.synth, &dir)?;
        return Ok((manifest, Some(cfg.synth.clone())));
    }
    let dir = Path::new(&cfg.data_dir);
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    Ok((manifest, SyntheticSpec::load(dir).ok()))
}

/// Runs every stage into `config.out_dir` and writes the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ExperimentReport, Timing)> {
    let cfg = config.seeded();
    let out = cfg.out_dir.clone();
    let _lock = RunLock::acquire(&out)?;
    let mut clock = Stopwatch::new();
    let mut artifacts = Vec::new();
    let seed = cfg.seed;
    write_text(&out, "config.txt", &to_text(&cfg)?, &mut artifacts)?;

    let (manifest, spec) = prepare_data(&cfg)?;
    let counts = Partition::ALL.map(|p| manifest.partition(p).len());
    clock.lap("data");

    let assoc_dir = out.join("assoc");
    let (_, history) = train_association(&manifest, &cfg.assoc, Some(&assoc_dir))?;
    write_history_table(&history, &assoc_dir.join("history.txt"))?;
    let assoc = AssociationModel::load_frozen(&assoc_dir, DType::F32)?;
    let embeddings = embed_manifest(&assoc, &manifest)?;
    embeddings.save(&out.join("embeddings.jsonl"))?;
    artifacts.push("embeddings.jsonl".into());
    let (p_test, q_test) = embeddings.partition(Partition::Test);
    let retrieval = retrieval_table(&p_test, &q_test, cfg.eval.pool_size, cfg.eval.repeats, seed)?;
    write_text(&out, "table1.txt", &format_reports(&retrieval), &mut artifacts)?;
    clock.lap("association");

    let (gan, _) = train_gan(&manifest, &assoc, &cfg.gan, Some(&out.join("gan")))?;
    clock.lap("generator");

    let extractor_cfg = ExtractorConfig {
        synth: spec.clone().unwrap_or_else(|| cfg.synth.clone()),
        ..cfg.extractor.clone()
    };
    let (extractor, extractor_report) = train_extractor(&extractor_cfg)?;
    extractor.save(&out.join("extractor"))?;
    clock.lap("extractor");

    let generation = generation_metrics(&gan, &assoc, &manifest, Partition::Test, &extractor, &cfg.eval, seed)?;
    write_text(&out, "table2.txt", &format_generation_rows(&generation), &mut artifacts)?;
    let generated = generated_embeddings(&gan, &assoc, &manifest, Partition::Test, seed)?;
    let synth = eval_synth_retrieval(&generated, cfg.eval.pool_size, cfg.eval.repeats, seed)?;
    write_text(&out, "table2b.txt", &format_reports(&synth.rows()), &mut artifacts)?;
    let cycle_recipe = cycle_gap(&generated.generated, &generated.recipes)?;
    let cycle_image = cycle_gap(&generated.generated, &generated.real)?;
    clock.lap("metrics");

    let test = manifest.partition(Partition::Test);
    let grid_p: Vec<Vec<f32>> = test
        .iter()
        .take(cfg.eval.grid_recipes)
        .map(|r| assoc.encode_recipe(&r.ingredient_ids))
        .collect::<Result<_>>()?;
    let shared_z = recipe_noise(&gan, seed, "fixed-noise");
    save_image(&out, "grid_fixed_noise.png", &run_fixed_noise_grid(&gan, &grid_p, &shared_z)?, &mut artifacts)?;
    if let Some(p) = grid_p.first() {
        let noises: Vec<Vec<f32>> = (0..cfg.eval.grid_noise).map(|i| recipe_noise(&gan, seed, &format!("fixed-recipe-{i}"))).collect();
        let (grid, _) = run_fixed_recipe_grid(&gan, p, &noises)?;
        save_image(&out, "grid_fixed_recipe.png", &grid, &mut artifacts)?;
    }
    let (glyph_edit_rate, interpolation) = match &spec {
        Some(spec) => {
            let palette = spec.palette();
            let rate = differing_glyph_rate(&gan, &assoc, spec, &test, seed)?;
            let interp = match disjoint_pair(&test, &palette) {
                Some((a, b)) => {
                    let (strip, report) = interpolation_fade(&gan, &assoc, &palette, a, b, cfg.eval.interp_steps, &shared_z)?;
                    save_image(&out, "interpolation.png", &strip, &mut artifacts)?;
                    Some(report)
                }
                None => None,
            };
            (rate, interp)
        }
        None => (None, None),
    };
    clock.lap("figures");

    let report = ExperimentReport {
        config_hash: config_hash(&cfg)?,
        n_recipes: counts,
        retrieval,
        extractor: extractor_report,
        generation,
        synth_retrieval: synth.rows(),
        cycle_recipe,
        cycle_image,
        glyph_edit_rate,
        interpolation,
        artifacts: {
            artifacts.push(REPORT_TEXT.into());
            artifacts.push(REPORT_JSON.into());
            artifacts.clone()
        },
    };
    write_text(&out, REPORT_TEXT, &report.to_text(), &mut Vec::new())?;
    let json = serde_json::to_string_pretty(&report)?;
    write_text(&out, REPORT_JSON, &json, &mut Vec::new())?;
    let timing = clock.finish();
    write_text(&out, TIMING_FILE, &serde_json::to_string_pretty(&timing)?, &mut Vec::new())?;
    Ok((report, timing))
}
