//! Subcommand implementations. Each resolves the layered configuration,
//! does its work and lists the files it wrote.

use std::path::{Path, PathBuf};

use foodspace_core::assoc::{embed_manifest, train_association, write_history_table};
use foodspace_core::config::{config_hash, layered_with_env, KvConfig};
use foodspace_core::data::{filter_and_split, generate_synthetic_dataset, rescale_image, SPEC_FILE};
use foodspace_core::experiments::{
    interpolation_fade, recipe_noise, retrieval_table, run_experiment, run_fixed_noise_grid, run_fixed_recipe_grid, generate_final, ExperimentConfig,
    ExperimentReport, Timing, MANIFEST_FILE,
};
use foodspace_core::metrics::{
    extract_features, frechet_report, inception_report_text, inception_score, train_extractor, ExtractorConfig, FeatureExtractor, FeatureSource,
    GlyphClassifier,
};
use foodspace_core::retrieval::{format_reports, RecipeEmbeddings};
use foodspace_core::vocab::{
    build_vocabulary, propose_merges, read_decisions, token_frequencies, train_embeddings, write_decisions, RawCorpus,
};
use foodspace_core::{AssociationModel, DatasetManifest, Error, GanModel, ImageSample, Partition, Result, SyntheticSpec};
use serde::Serialize;

use crate::{AssocCommand, Cli, Command, DataCommand, ExpCommand, GanCommand, MetricsCommand, RetrievalCommand, VocabCommand};

pub const RUN_STAMP: &str = "run.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

/// Outcome of one subcommand.
#[derive(Debug)]
pub struct CommandResult {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct RunStamp<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_hash: String,
}

/// Flag-level overrides: `--set` pairs, then `--seed` and `--out`.
fn flag_overrides(cli: &Cli) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    for pair in &cli.global.overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = cli.global.seed {
        kv.set("seed", seed.to_string());
    }
    if let Some(out) = &cli.global.out {
        kv.set("out_dir", out.display().to_string());
    }
    Ok(kv)
}

fn resolve(cli: &Cli, extra: &[(&str, String)]) -> Result<ExperimentConfig> {
    let mut flags = KvConfig::new();
    for (k, v) in extra {
        flags.set(*k, v.clone());
    }
    flags.merge(&flag_overrides(cli)?);
    if let Some(path) = cli.global.config.as_deref() {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
    }
    Ok(layered_with_env::<ExperimentConfig>(cli.global.config.as_deref(), &KvConfig::from_env(), &flags)?.seeded())
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Vocab(VocabCommand::Build { .. }) => "vocab build",
        Command::Vocab(VocabCommand::Propose { .. }) => "vocab propose",
        Command::Data(DataCommand::Synth) => "data synth",
        Command::Data(DataCommand::Split { .. }) => "data split",
        Command::Assoc(AssocCommand::Train { .. }) => "assoc train",
        Command::Assoc(AssocCommand::Embed { .. }) => "assoc embed",
        Command::Retrieval(RetrievalCommand::Eval { .. }) => "retrieval eval",
        Command::Gan(GanCommand::Train { .. }) => "gan train",
        Command::Gan(GanCommand::Sample { .. }) => "gan sample",
        Command::Gan(GanCommand::Interpolate { .. }) => "gan interpolate",
        Command::Metrics(MetricsCommand::Is { .. }) => "metrics is",
        Command::Metrics(MetricsCommand::Fid { .. }) => "metrics fid",
        Command::Metrics(MetricsCommand::TrainExtractor { .. }) => "metrics train-extractor",
        Command::Exp(ExpCommand::Run { .. }) => "exp run",
        Command::Exp(ExpCommand::Report { .. }) => "exp report",
        Command::Doctor { .. } => "doctor",
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(path.to_path_buf())
}

/// Writes the version and config-hash stamp into the output directory.
fn stamp(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    create_dir(&cfg.out_dir)?;
    let hash = config_hash(cfg)?;
    log::info!("foodspace {} {name} (config {hash})", env!("CARGO_PKG_VERSION"));
    let stamp = RunStamp {
        tool: "foodspace",
        version: env!("CARGO_PKG_VERSION"),
        command: name,
        config_hash: hash,
    };
    write_file(&cfg.out_dir.join(RUN_STAMP), &serde_json::to_string_pretty(&stamp)?)
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&dir.join(MANIFEST_FILE))
}

fn parse_partition(s: &str) -> Result<Partition> {
    s.parse()
}

/// PNG files in `dir` in name order, skipping pre-scaled `name@SIZE.png`
/// variants.
fn load_image_dir(dir: &Path, size: usize) -> Result<Vec<ImageSample>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png") && !p.file_stem().is_some_and(|s| s.to_string_lossy().contains('@')))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!("no PNG images in {}", dir.display())));
    }
    paths.iter().map(|p| rescale_image(&ImageSample::load(p)?, size)).collect()
}

pub fn dispatch(cli: &Cli) -> Result<CommandResult> {
    let name = command_name(&cli.command);
    match &cli.command {
        Command::Exp(ExpCommand::Report { dir }) => return exp_report(dir),
        Command::Doctor { data } => return doctor(cli, data.as_deref()),
        _ => {}
    }
    let extra: Vec<(&str, String)> = match &cli.command {
        Command::Vocab(VocabCommand::Build { top_k: Some(k), .. }) => vec![("vocab.top_k", k.to_string())],
        Command::Vocab(VocabCommand::Propose { threshold: Some(t), .. }) => vec![("vocab.threshold", t.to_string())],
        Command::Assoc(AssocCommand::Train { epochs: Some(e), .. }) => vec![("assoc.epochs", e.to_string())],
        Command::Retrieval(RetrievalCommand::Eval { pool_size, repeats, .. }) => {
            let mut v = Vec::new();
            if let Some(p) = pool_size {
                v.push(("eval.pool_size", p.to_string()));
            }
            if let Some(r) = repeats {
                v.push(("eval.repeats", r.to_string()));
            }
            v
        }
        Command::Gan(GanCommand::Train { steps, literal_paper_loss, .. }) => {
            let mut v = Vec::new();
            if let Some(s) = steps {
                v.push(("gan.steps", s.to_string()));
            }
            if *literal_paper_loss {
                v.push(("gan.literal_paper_loss", "true".to_string()));
            }
            v
        }
        Command::Gan(GanCommand::Interpolate { steps: Some(s), .. }) => vec![("eval.interp_steps", s.to_string())],
        Command::Metrics(MetricsCommand::Is { splits: Some(s), .. }) => vec![("eval.n_splits", s.to_string())],
        Command::Exp(ExpCommand::Run { data: Some(d) }) => vec![("data_dir", d.display().to_string())],
        _ => Vec::new(),
    };
    let cfg = resolve(cli, &extra)?;
    let run_stamp = stamp(&cfg, name)?;
    let mut result = match &cli.command {
        Command::Vocab(VocabCommand::Build { corpus, decisions, .. }) => vocab_build(&cfg, corpus, decisions.as_deref()),
        Command::Vocab(VocabCommand::Propose { corpus, .. }) => vocab_propose(&cfg, corpus),
        Command::Data(DataCommand::Synth) => data_synth(&cfg),
        Command::Data(DataCommand::Split { corpus, vocab, images_root }) => data_split(&cfg, corpus, vocab, images_root.as_deref()),
        Command::Assoc(AssocCommand::Train { data, .. }) => assoc_train(&cfg, data),
        Command::Assoc(AssocCommand::Embed { model, data }) => assoc_embed(&cfg, model, data),
        Command::Retrieval(RetrievalCommand::Eval { embeddings, partition, .. }) => retrieval_eval(&cfg, embeddings, partition),
        Command::Gan(GanCommand::Train { data, assoc, .. }) => gan_train(&cfg, data, assoc),
        Command::Gan(GanCommand::Sample { model, data, partition, recipe }) => gan_sample(&cfg, model, data, partition, recipe.as_deref()),
        Command::Gan(GanCommand::Interpolate { model, data, from, to, .. }) => gan_interpolate(&cfg, model, data, from, to),
        Command::Metrics(MetricsCommand::Is { images, extractor, .. }) => metrics_is(&cfg, images, extractor),
        Command::Metrics(MetricsCommand::Fid { real, fake, extractor }) => metrics_fid(&cfg, real, fake, extractor),
        Command::Metrics(MetricsCommand::TrainExtractor { data }) => metrics_train_extractor(&cfg, data.as_deref()),
        Command::Exp(ExpCommand::Run { .. }) => exp_run(&cfg),
        Command::Exp(ExpCommand::Report { .. }) | Command::Doctor { .. } => unreachable!("handled above"),
    }?;
    result.artifacts.push(run_stamp);
    Ok(result)
}

fn vocab_build(cfg: &ExperimentConfig, corpus: &Path, decisions: Option<&Path>) -> Result<CommandResult> {
    let corpus = RawCorpus::load(corpus)?;
    let decisions = match decisions {
        Some(p) => read_decisions(p)?,
        None => Vec::new(),
    };
    let vocab = build_vocabulary(&corpus, cfg.vocab.top_k, &decisions)?;
    vocab.save(&cfg.out_dir)?;
    Ok(CommandResult {
        summary: format!("vocabulary: {} entries, coverage {:.4}", vocab.len(), vocab.coverage()),
        artifacts: vec![cfg.out_dir.clone()],
    })
}

fn vocab_propose(cfg: &ExperimentConfig, corpus: &Path) -> Result<CommandResult> {
    let corpus = RawCorpus::load(corpus)?;
    let table = train_embeddings(&corpus, &cfg.vocab.embedding)?;
    let candidates: Vec<String> = token_frequencies(&corpus).into_iter().map(|(t, _)| t).filter(|t| table.get(t).is_some()).collect();
    let proposals = propose_merges(&table, &candidates, cfg.vocab.threshold)?;
    let table_path = cfg.out_dir.join("embeddings.tsv");
    let proposals_path = cfg.out_dir.join("proposals.tsv");
    table.save(&table_path)?;
    write_decisions(&proposals_path, &proposals)?;
    Ok(CommandResult {
        summary: format!("{} merge proposals over {} tokens", proposals.len(), table.len()),
        artifacts: vec![table_path, proposals_path],
    })
}

fn data_synth(cfg: &ExperimentConfig) -> Result<CommandResult> {
    let manifest = generate_synthetic_dataset(&cfg.synth, &cfg.out_dir)?;
    let counts = Partition::ALL.map(|p| manifest.partition(p).len());
    Ok(CommandResult {
        summary: format!("synthetic dataset: {}/{}/{} train/val/test recipes", counts[0], counts[1], counts[2]),
        artifacts: vec![cfg.out_dir.join(MANIFEST_FILE), cfg.out_dir.join(SPEC_FILE)],
    })
}

fn data_split(cfg: &ExperimentConfig, corpus_path: &Path, vocab_dir: &Path, images_root: Option<&Path>) -> Result<CommandResult> {
    let corpus = RawCorpus::load(corpus_path)?;
    let vocab = foodspace_core::CanonicalVocabulary::load(vocab_dir)?;
    let root = images_root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| corpus_path.parent().map(Path::to_path_buf).unwrap_or_default());
    let (manifest, stats) = filter_and_split(&corpus, &vocab, cfg.split, cfg.seed, &root)?;
    // Image references are rewritten against the output directory, which
    // becomes the manifest root on load.
    let manifest = if same_dir(&root, &cfg.out_dir) {
        manifest
    } else {
        let abs = std::path::absolute(&root).map_err(|source| Error::Io { path: root.clone(), source })?;
        let recipes = manifest
            .recipes()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.image_refs = r.image_refs.iter().map(|i| abs.join(i).display().to_string()).collect();
                r
            })
            .collect();
        DatasetManifest::new(&cfg.out_dir, recipes)?
    };
    let manifest_path = cfg.out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    let stats_path = write_file(&cfg.out_dir.join("split_stats.json"), &serde_json::to_string_pretty(&stats)?)?;
    let counts = Partition::ALL.map(|p| manifest.partition(p).len());
    Ok(CommandResult {
        summary: format!(
            "kept {} of {} recipes: {}/{}/{} train/val/test",
            stats.retained, stats.input, counts[0], counts[1], counts[2]
        ),
        artifacts: vec![manifest_path, stats_path],
    })
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn assoc_train(cfg: &ExperimentConfig, data: &Path) -> Result<CommandResult> {
    let manifest = load_manifest(data)?;
    let (_, history) = train_association(&manifest, &cfg.assoc, Some(&cfg.out_dir))?;
    let table = cfg.out_dir.join("history.txt");
    write_history_table(&history, &table)?;
    let last = history.records.last();
    Ok(CommandResult {
        summary: match last {
            Some(r) => format!("association trained: {} epochs, final loss {:.4}", history.records.len(), r.loss),
            None => "association model initialized without training".to_string(),
        },
        artifacts: vec![cfg.out_dir.clone(), table],
    })
}

fn assoc_embed(cfg: &ExperimentConfig, model: &Path, data: &Path) -> Result<CommandResult> {
    let manifest = load_manifest(data)?;
    let model = AssociationModel::load(model)?;
    let embeddings = embed_manifest(&model, &manifest)?;
    let path = cfg.out_dir.join(EMBEDDINGS_FILE);
    embeddings.save(&path)?;
    Ok(CommandResult {
        summary: format!("embedded {} recipes", embeddings.records.len()),
        artifacts: vec![path],
    })
}

fn retrieval_eval(cfg: &ExperimentConfig, embeddings: &Path, partition: &str) -> Result<CommandResult> {
    let partition = parse_partition(partition)?;
    let (p, q) = RecipeEmbeddings::load(embeddings)?.partition(partition);
    let rows = retrieval_table(&p, &q, cfg.eval.pool_size, cfg.eval.repeats, cfg.seed)?;
    let text = format_reports(&rows);
    let path = write_file(&cfg.out_dir.join("retrieval.txt"), &text)?;
    Ok(CommandResult {
        summary: text.trim_end().to_string(),
        artifacts: vec![path],
    })
}

fn gan_train(cfg: &ExperimentConfig, data: &Path, assoc_dir: &Path) -> Result<CommandResult> {
    let manifest = load_manifest(data)?;
    let assoc = AssociationModel::load(assoc_dir)?;
    let (_, history) = foodspace_core::gan::train_gan(&manifest, &assoc, &cfg.gan, Some(&cfg.out_dir))?;
    Ok(CommandResult {
        summary: match history.records.last() {
            Some(r) => format!("generator trained: step {} D {:.4} G {:.4}", r.step, r.d_loss, r.g_loss),
            None => "generator initialized without training".to_string(),
        },
        artifacts: vec![cfg.out_dir.clone()],
    })
}

fn gan_sample(cfg: &ExperimentConfig, model: &Path, data: &Path, partition: &str, recipe: Option<&str>) -> Result<CommandResult> {
    let (gan, assoc) = GanModel::load_with_assoc(model)?;
    let manifest = load_manifest(data)?;
    let recipes = manifest.partition(parse_partition(partition)?);
    if recipes.is_empty() {
        return Err(Error::InsufficientData(format!("no {partition} recipes")));
    }
    let mut artifacts = Vec::new();
    let images_dir = cfg.out_dir.join("images");
    create_dir(&images_dir)?;
    for r in &recipes {
        let p = assoc.encode_recipe(&r.ingredient_ids)?;
        let path = images_dir.join(format!("{}.png", r.id));
        generate_final(&gan, &p, &recipe_noise(&gan, cfg.seed, &r.id))?.save(&path)?;
    }
    artifacts.push(images_dir);

    let grid_p: Vec<Vec<f32>> = recipes
        .iter()
        .take(cfg.eval.grid_recipes)
        .map(|r| assoc.encode_recipe(&r.ingredient_ids))
        .collect::<Result<_>>()?;
    let path = cfg.out_dir.join("grid_fixed_noise.png");
    run_fixed_noise_grid(&gan, &grid_p, &recipe_noise(&gan, cfg.seed, "fixed-noise"))?.save(&path)?;
    artifacts.push(path);

    let target = match recipe {
        Some(id) => manifest.get(id).ok_or_else(|| Error::InsufficientData(format!("unknown recipe {id:?}")))?,
        None => recipes[0],
    };
    let noises: Vec<Vec<f32>> = (0..cfg.eval.grid_noise).map(|i| recipe_noise(&gan, cfg.seed, &format!("fixed-recipe-{i}"))).collect();
    let (grid, _) = run_fixed_recipe_grid(&gan, &assoc.encode_recipe(&target.ingredient_ids)?, &noises)?;
    let path = cfg.out_dir.join("grid_fixed_recipe.png");
    grid.save(&path)?;
    artifacts.push(path);
    Ok(CommandResult {
        summary: format!("generated {} images and two grids", recipes.len()),
        artifacts,
    })
}

fn gan_interpolate(cfg: &ExperimentConfig, model: &Path, data: &Path, from: &str, to: &str) -> Result<CommandResult> {
    let (gan, assoc) = GanModel::load_with_assoc(model)?;
    let manifest = load_manifest(data)?;
    let get = |id: &str| manifest.get(id).ok_or_else(|| Error::InsufficientData(format!("unknown recipe {id:?}")));
    let (a, b) = (get(from)?, get(to)?);
    let spec = SyntheticSpec::load(data).unwrap_or_else(|_| cfg.synth.clone());
    let z = recipe_noise(&gan, cfg.seed, "interpolation");
    let (strip, report) = interpolation_fade(&gan, &assoc, &spec.palette(), a, b, cfg.eval.interp_steps, &z)?;
    let image = cfg.out_dir.join("interpolation.png");
    strip.save(&image)?;
    let text = report.to_text();
    let table = write_file(&cfg.out_dir.join("interpolation.txt"), &text)?;
    Ok(CommandResult {
        summary: text.trim_end().to_string(),
        artifacts: vec![image, table],
    })
}

fn metrics_is(cfg: &ExperimentConfig, images: &Path, extractor_dir: &Path) -> Result<CommandResult> {
    let extractor = GlyphClassifier::load(extractor_dir)?;
    let images = load_image_dir(images, extractor.input_size())?;
    let (_, probs) = extract_features(&images, &extractor, FeatureSource::Generated)?;
    let (mean, std) = inception_score(&probs, cfg.eval.n_splits)?;
    let text = inception_report_text(mean, std, images.len(), extractor.n_classes(), cfg.eval.n_splits);
    let path = write_file(&cfg.out_dir.join("inception.txt"), &text)?;
    Ok(CommandResult {
        summary: text.trim_end().to_string(),
        artifacts: vec![path],
    })
}

fn metrics_fid(cfg: &ExperimentConfig, real: &Path, fake: &Path, extractor_dir: &Path) -> Result<CommandResult> {
    let extractor = GlyphClassifier::load(extractor_dir)?;
    let (rf, _) = extract_features(&load_image_dir(real, extractor.input_size())?, &extractor, FeatureSource::Real)?;
    let (ff, _) = extract_features(&load_image_dir(fake, extractor.input_size())?, &extractor, FeatureSource::Generated)?;
    let text = frechet_report(&rf, &ff)?.to_text();
    let path = write_file(&cfg.out_dir.join("frechet.txt"), &text)?;
    Ok(CommandResult {
        summary: text.trim_end().to_string(),
        artifacts: vec![path],
    })
}

fn metrics_train_extractor(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<CommandResult> {
    let synth = match data {
        Some(d) => SyntheticSpec::load(d)?,
        None => cfg.synth.clone(),
    };
    let config = ExtractorConfig {
        synth,
        ..cfg.extractor.clone()
    };
    let (model, report) = train_extractor(&config)?;
    model.save(&cfg.out_dir)?;
    let path = write_file(&cfg.out_dir.join("extractor_report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(CommandResult {
        summary: format!(
            "extractor: {} classes, train accuracy {:.4}, held-out accuracy {:.4}",
            report.n_classes, report.train_accuracy, report.test_accuracy
        ),
        artifacts: vec![cfg.out_dir.clone(), path],
    })
}

fn exp_run(cfg: &ExperimentConfig) -> Result<CommandResult> {
    let (report, timing) = run_experiment(cfg)?;
    Ok(CommandResult {
        summary: format!("{}\n{}", report.to_text().trim_end(), timing.to_text().trim_end()),
        artifacts: report.artifacts.iter().map(|a| cfg.out_dir.join(a)).collect(),
    })
}

fn exp_report(dir: &Path) -> Result<CommandResult> {
    let report = ExperimentReport::load(dir)?;
    let mut summary = report.to_text();
    if let Ok(timing) = Timing::load(dir) {
        summary.push_str("\n[wall clock]\n");
        summary.push_str(&timing.to_text());
    }
    Ok(CommandResult {
        summary: summary.trim_end().to_string(),
        artifacts: Vec::new(),
    })
}

fn doctor(cli: &Cli, data: Option<&Path>) -> Result<CommandResult> {
    let mut lines = vec![
        format!("foodspace {}", env!("CARGO_PKG_VERSION")),
        format!("threads: {}", std::thread::available_parallelism().map_or(1, |n| n.get())),
    ];
    let cfg = resolve(cli, &[])?;
    lines.push(format!("config: ok (hash {})", config_hash(&cfg)?));
    cfg.assoc.validate()?;
    cfg.synth.validate()?;
    lines.push("settings: ok".to_string());
    if let Some(dir) = data {
        let manifest = load_manifest(dir)?;
        manifest.check_integrity()?;
        let counts = Partition::ALL.map(|p| manifest.partition(p).len());
        lines.push(format!(
            "dataset: ok ({}/{}/{} train/val/test recipes, all images present)",
            counts[0], counts[1], counts[2]
        ));
        match SyntheticSpec::load(dir) {
            Ok(_) => lines.push("dataset kind: synthetic glyph meals".to_string()),
            Err(_) => lines.push("dataset kind: external".to_string()),
        }
    }
    Ok(CommandResult {
        summary: lines.join("\n"),
        artifacts: Vec::new(),
    })
}
