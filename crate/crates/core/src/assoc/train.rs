//! Association training loop and embedding export.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{in_batch_loss, AssocConfig, AssociationModel, CROP_FACTOR};
use crate::data::{images_to_tensor, DatasetManifest, ImageSample, Partition, Recipe, ValueDomain};
use crate::error::{Error, Result};
use crate::nn::{adam, scalar};
use crate::retrieval::{evaluate_retrieval, Direction, EmbeddingRecord, RecipeEmbeddings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_medr: Option<f64>,
    pub val_r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(Error::io(path))
    }
}

/// Every image of every recipe, loaded once at the encoder resolution.
struct ImageCache {
    images: Vec<Vec<ImageSample>>,
}

impl ImageCache {
    fn load(manifest: &DatasetManifest, recipes: &[&Recipe], size: usize) -> Result<Self> {
        let images = recipes
            .iter()
            .map(|r| {
                r.image_refs
                    .iter()
                    .map(|i| Ok(manifest.load_image(i, size)?.to_domain(ValueDomain::Encoder)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images })
    }
}

fn encode_images_batched(model: &AssociationModel, images: &[ImageSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let x = images_to_tensor(chunk, model.params.dtype())?;
        out.extend(model.images.encode(&x)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

fn encode_recipes_batched(model: &AssociationModel, recipes: &[&Recipe]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(recipes.len());
    for chunk in recipes.chunks(64) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|r| r.ingredient_ids.clone()).collect();
        out.extend(model.encode_ingredients(&ids)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

fn abort(model: &AssociationModel, last_good: &std::collections::HashMap<String, Tensor>, out_dir: Option<&Path>, step: usize, what: String) -> Error {
    if let Err(e) = model.params.restore(last_good) {
        return e;
    }
    let checkpoint = out_dir.map(|dir| dir.join("diverged"));
    if let Some(dir) = &checkpoint {
        if let Err(e) = model.save(dir, step) {
            return e;
        }
    }
    Error::Diverged { what, checkpoint }
}

/// Trains both encoders with in-batch negatives. When `out_dir` is given, a
/// checkpoint and `history.jsonl` are written there after every epoch.
pub fn train_association(manifest: &DatasetManifest, config: &AssocConfig, out_dir: Option<&Path>) -> Result<(AssociationModel, TrainHistory)> {
    let mut config = config.clone();
    if config.vocab_size == 0 {
        config.vocab_size = manifest.id_space();
    }
    config.validate()?;
    let train = manifest.partition(Partition::Train);
    if train.len() < 2 {
        return Err(Error::InsufficientData(format!("{} training recipes", train.len())));
    }
    let val = manifest.partition(Partition::Val);
    let train_images = ImageCache::load(manifest, &train, config.image_size)?;
    let val_images: Vec<ImageSample> = val
        .iter()
        .map(|r| Ok(manifest.load_image(&r.image_refs[0], config.image_size)?.to_domain(ValueDomain::Encoder)))
        .collect::<Result<_>>()?;

    let model = AssociationModel::new(config.clone(), DType::F32)?;
    let mut opt = adam(model.params.vars(), config.learning_rate, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0f64, 0usize);
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|&i| train[i].ingredient_ids.clone()).collect();
            let images: Vec<ImageSample> = chunk
                .iter()
                .map(|&i| {
                    let choices = &train_images.images[i];
                    let img = &choices[rng.random_range(0..choices.len())];
                    let img = if config.augment_flip && rng.random_bool(0.5) {
                        img.flip_horizontal()
                    } else {
                        img.clone()
                    };
                    if config.augment_crop {
                        img.random_crop(CROP_FACTOR, &mut rng)
                    } else {
                        Ok(img)
                    }
                })
                .collect::<Result<_>>()?;
            let last_good = model.params.snapshot()?;
            let p = model.encode_ingredients(&ids)?;
            let q = model.images.encode(&images_to_tensor(&images, DType::F32)?)?;
            let loss = match in_batch_loss(&p, &q, config.margin) {
                Ok(l) => l,
                Err(Error::DegenerateEmbedding) => {
                    return Err(abort(&model, &last_good, out_dir, step, "zero-norm embedding".into()));
                }
                Err(e) => return Err(e),
            };
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(abort(&model, &last_good, out_dir, step, format!("association loss {value} at step {step}")));
            }
            opt.backward_step(&loss)?;
            if !model.params.all_finite()? {
                return Err(abort(&model, &last_good, out_dir, step, format!("non-finite parameters after step {step}")));
            }
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let loss = loss_sum / batches.max(1) as f64;
        let (val_medr, val_r1) = if val.len() >= 2 {
            let p = encode_recipes_batched(&model, &val)?;
            let q = encode_images_batched(&model, &val_images)?;
            let pool = config.val_pool.min(val.len());
            let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
            let report = evaluate_retrieval(&p, &q, pool, config.val_repeats.max(1), Direction::Im2Recipe, &mut eval_rng)?;
            (Some(report.med_r), Some(report.recall_at[&1]))
        } else {
            (None, None)
        };
        log::info!(
            "assoc epoch {epoch}/{}: loss {loss:.4} val MedR {} ({:.1}s)",
            config.epochs,
            val_medr.map_or("-".into(), |m| format!("{m:.1}")),
            started.elapsed().as_secs_f64()
        );
        history.records.push(EpochRecord {
            epoch,
            loss,
            val_medr,
            val_r1,
        });
        if let Some(dir) = out_dir {
            model.save(dir, epoch)?;
            history.save(&dir.join("history.jsonl"))?;
        }
    }
    Ok((model, history))
}

/// Embeds every recipe of the manifest: the ingredient encoding and the
/// encoding of the recipe's first image.
pub fn embed_manifest(model: &AssociationModel, manifest: &DatasetManifest) -> Result<RecipeEmbeddings> {
    let recipes: Vec<&Recipe> = manifest.recipes().iter().collect();
    let size = model.config.image_size;
    let images: Vec<ImageSample> = recipes
        .iter()
        .map(|r| Ok(manifest.load_image(&r.image_refs[0], size)?.to_domain(ValueDomain::Encoder)))
        .collect::<Result<_>>()?;
    let p = encode_recipes_batched(model, &recipes)?;
    let q = encode_images_batched(model, &images)?;
    let records = recipes
        .iter()
        .zip(p.into_iter().zip(q))
        .map(|(r, (recipe, image))| EmbeddingRecord {
            id: r.id.clone(),
            partition: r.partition,
            recipe,
            image,
        })
        .collect();
    Ok(RecipeEmbeddings { records })
}

/// Writes a history as a small plain-text table.
pub fn write_history_table(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    writeln!(f, "{:>5} {:>10} {:>8} {:>6}", "epoch", "loss", "valMedR", "R@1").map_err(Error::io(path))?;
    for r in &history.records {
        writeln!(
            f,
            "{:>5} {:>10.5} {:>8} {:>6}",
            r.epoch,
            r.loss,
            r.val_medr.map_or("-".into(), |m| format!("{m:.1}")),
            r.val_r1.map_or("-".into(), |m| format!("{m:.2}"))
        )
        .map_err(Error::io(path))?;
    }
    Ok(())
}
