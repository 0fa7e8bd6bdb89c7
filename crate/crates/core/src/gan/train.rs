//! Alternating discriminator/generator training.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{cycle_similarity, discriminator_objective, generator_objective, kl_divergence, DiscriminatorProbs};
use super::{cond_augment, mean_scalar, GanConfig, GanModel, ASSOC_DIR};
use crate::assoc::{AssociationModel, ImageEncoder};
use crate::data::{compose_grid, images_to_tensor, rescale_image, tensor_to_images, DatasetManifest, ImageSample, Partition, Recipe, ValueDomain};
use crate::error::{Error, Result};
use crate::nn::{adam, randn, scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub kl: f64,
    /// Mean cycle cosine per active scale.
    pub cycle: Vec<f64>,
    pub d_real: f64,
    pub d_fake: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GanHistory {
    pub records: Vec<GanRecord>,
}

impl GanHistory {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(Error::io(path))
    }
}

/// Real images and their frozen FoodSpace embeddings.
struct TrainingSet<'a> {
    manifest: &'a DatasetManifest,
    recipes: Vec<&'a Recipe>,
    p: Tensor,
    /// Per recipe, per image.
    q: Vec<Vec<Vec<f32>>>,
    /// Base-resolution images, per recipe, per image.
    base: Vec<Vec<ImageSample>>,
}

impl<'a> TrainingSet<'a> {
    fn new(manifest: &'a DatasetManifest, assoc: &AssociationModel, base_size: usize) -> Result<Self> {
        let recipes = manifest.partition(Partition::Train);
        if recipes.len() < 2 {
            return Err(Error::InsufficientData(format!("{} training recipes", recipes.len())));
        }
        let mut p_rows = Vec::with_capacity(recipes.len());
        for chunk in recipes.chunks(64) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|r| r.ingredient_ids.clone()).collect();
            p_rows.push(assoc.encode_ingredients(&ids)?.to_dtype(DType::F32)?);
        }
        let p = Tensor::cat(&p_rows, 0)?;
        let enc_size = assoc.config.image_size;
        let mut q = Vec::with_capacity(recipes.len());
        let mut base = Vec::with_capacity(recipes.len());
        for r in &recipes {
            let enc: Vec<ImageSample> = r
                .image_refs
                .iter()
                .map(|i| Ok(manifest.load_image(i, enc_size)?.to_domain(ValueDomain::Encoder)))
                .collect::<Result<_>>()?;
            let x = images_to_tensor(&enc, assoc.params.dtype())?;
            q.push(assoc.images.encode(&x)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
            base.push(r.image_refs.iter().map(|i| manifest.load_image(i, base_size)).collect::<Result<_>>()?);
        }
        Ok(Self {
            manifest,
            recipes,
            p,
            q,
            base,
        })
    }

    fn real_images(&self, picks: &[(usize, usize)], scale: usize, size: usize) -> Result<Tensor> {
        let images: Vec<ImageSample> = picks
            .iter()
            .map(|&(r, i)| {
                if scale == 0 {
                    Ok(self.base[r][i].clone())
                } else {
                    self.manifest.load_image(&self.recipes[r].image_refs[i], size)
                }
            })
            .collect::<Result<_>>()?;
        images_to_tensor(&images, DType::F32)
    }
}

fn abort(model: &GanModel, last_good: &HashMap<String, Tensor>, out_dir: Option<&Path>, step: usize, what: String) -> Error {
    if let Err(e) = model.params.restore(last_good) {
        return e;
    }
    let checkpoint = out_dir.map(|d| d.to_path_buf());
    if let Some(dir) = &checkpoint {
        if let Err(e) = model.save(dir, step) {
            return e;
        }
    }
    Error::Diverged { what, checkpoint }
}

/// Discriminator objective summed over scales, with the mean conditional
/// probabilities of the first scale for logging.
pub struct DiscriminatorLoss {
    pub loss: Tensor,
    pub real_prob: f64,
    pub fake_prob: f64,
}

/// Joint discriminator loss for matched real images, the real images
/// reordered by `roll` as mismatches, and fakes, all conditioned on `c`.
/// `reals` and `fakes` hold one (B, 3, S, S) batch per scale.
pub fn discriminator_loss(model: &GanModel, reals: &[Tensor], fakes: &[Tensor], c: &Tensor, roll: &Tensor, literal: bool) -> Result<DiscriminatorLoss> {
    if reals.len() != model.discriminators.len() || fakes.len() != reals.len() {
        return Err(Error::Shape("discriminator loss needs one real and one fake batch per scale".into()));
    }
    let batch = c.dim(0)?;
    let c3 = Tensor::cat(&[c, c, c], 0)?;
    let mut total = Tensor::new(0f64, c.device())?.to_dtype(c.dtype())?;
    let (mut real_prob, mut fake_prob) = (0.0, 0.0);
    for (s, disc) in model.discriminators.iter().enumerate() {
        let mismatched = reals[s].index_select(roll, 0)?;
        let x = Tensor::cat(&[&reals[s], &mismatched, &fakes[s]], 0)?;
        let (cond, uncond) = disc.probabilities(&x, &c3)?;
        let probs = DiscriminatorProbs {
            real_cond: cond.narrow(0, 0, batch)?,
            mismatched_cond: cond.narrow(0, batch, batch)?,
            fake_cond: cond.narrow(0, 2 * batch, batch)?,
            real_uncond: uncond.narrow(0, 0, batch)?,
            mismatched_uncond: uncond.narrow(0, batch, batch)?,
            fake_uncond: uncond.narrow(0, 2 * batch, batch)?,
        };
        if s == 0 {
            real_prob = mean_scalar(&probs.real_cond)?;
            fake_prob = mean_scalar(&probs.fake_cond)?;
        }
        total = (total + discriminator_objective(&probs, &model.config.weights, literal)?)?;
    }
    Ok(DiscriminatorLoss {
        loss: total,
        real_prob,
        fake_prob,
    })
}

/// Generator objective with its KL term and per-scale cycle cosines.
pub struct GeneratorLoss {
    pub loss: Tensor,
    pub kl: Tensor,
    pub cycle: Vec<Tensor>,
}

/// Generator loss for `fakes` (one batch per scale) generated from the
/// appearance factor `c ~ N(mu, exp(log_sigma)^2)`, with the cycle term
/// against the paired real-image embeddings `q_real`. The cycle term is
/// skipped when its weight is zero.
pub fn generator_loss(
    model: &GanModel,
    fakes: &[Tensor],
    c: &Tensor,
    mu: &Tensor,
    log_sigma: &Tensor,
    q_real: &Tensor,
    encoder: &ImageEncoder,
) -> Result<GeneratorLoss> {
    let weights = &model.config.weights;
    let (mut fake_cond, mut fake_uncond, mut cycle) = (Vec::new(), Vec::new(), Vec::new());
    for (s, disc) in model.discriminators.iter().enumerate() {
        let (cond, uncond) = disc.probabilities(&fakes[s], c)?;
        fake_cond.push(cond);
        fake_uncond.push(uncond);
        if weights.cycle > 0.0 {
            cycle.push(cycle_similarity(q_real, &fakes[s], encoder)?);
        }
    }
    let kl = kl_divergence(mu, log_sigma)?;
    let loss = generator_objective(&fake_cond, &fake_uncond, &cycle, &kl, weights)?;
    Ok(GeneratorLoss { loss, kl, cycle })
}

/// Writes a grid with one row per preview recipe and one column per scale.
fn write_samples(model: &GanModel, p: &Tensor, z: &Tensor, path: &Path) -> Result<()> {
    let pyramid = model.generate_deterministic(p, z)?;
    let cell = *model.config.sizes().last().unwrap_or(&model.config.base_size);
    let per_scale: Vec<Vec<ImageSample>> = pyramid
        .iter()
        .map(|t| tensor_to_images(t, ValueDomain::Generator))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<ImageSample>> = (0..p.dim(0)?)
        .map(|r| per_scale.iter().map(|s| rescale_image(&s[r], cell)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    compose_grid(&rows, cell, 2)?.save(path)
}

/// Trains generator and discriminators against a frozen association model.
/// With `out_dir`, writes checkpoints (including a copy of the association
/// model), `history.jsonl` and periodic sample grids.
pub fn train_gan(manifest: &DatasetManifest, assoc: &AssociationModel, config: &GanConfig, out_dir: Option<&Path>) -> Result<(GanModel, GanHistory)> {
    let mut config = config.clone();
    if config.foodspace_dim == 0 {
        config.foodspace_dim = assoc.config.foodspace_dim;
    }
    if config.foodspace_dim != assoc.config.foodspace_dim {
        return Err(Error::Config(format!(
            "GAN expects {}-dimensional FoodSpace, association model has {}",
            config.foodspace_dim, assoc.config.foodspace_dim
        )));
    }
    let model = GanModel::new(config.clone(), DType::F32)?;
    let data = TrainingSet::new(manifest, assoc, config.base_size)?;
    let batch = config.batch_size.min(data.recipes.len());
    let sizes = config.sizes();
    let mut opt_g = adam(model.params.vars_with_prefix("g."), config.lr_generator, config.beta1, config.beta2)?;
    let mut opt_d = adam(model.params.vars_with_prefix("d"), config.lr_discriminator, config.beta1, config.beta2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let n_preview = data.recipes.len().min(4);
    let preview_p = data.p.narrow(0, 0, n_preview)?;
    let preview_z = randn(&mut rng, &[n_preview, config.z_dim], DType::F32)?;
    if let Some(dir) = out_dir {
        assoc.save(&dir.join(ASSOC_DIR), 0)?;
        std::fs::create_dir_all(dir.join("samples")).map_err(Error::io(dir))?;
    }

    // Batch element k is shown the image of element k+1 as its mismatch.
    let roll: Vec<u32> = (0..batch).map(|k| ((k + 1) % batch) as u32).collect();
    let roll = Tensor::from_vec(roll, batch, &Device::Cpu)?;
    let mut history = GanHistory::default();
    let started = Instant::now();
    for step in 1..=config.steps {
        let picks: Vec<(usize, usize)> = index::sample(&mut rng, data.recipes.len(), batch)
            .into_iter()
            .map(|r| (r, rng.random_range(0..data.recipes[r].image_refs.len())))
            .collect();
        let idx = Tensor::from_vec(picks.iter().map(|&(r, _)| r as u32).collect::<Vec<_>>(), batch, &Device::Cpu)?;
        let p = data.p.index_select(&idx, 0)?;
        let q_rows: Vec<f32> = picks.iter().flat_map(|&(r, i)| data.q[r][i].clone()).collect();
        let q_real = Tensor::from_vec(q_rows, (batch, assoc.config.foodspace_dim), &Device::Cpu)?;
        let reals = sizes
            .iter()
            .enumerate()
            .map(|(s, &size)| data.real_images(&picks, s, size))
            .collect::<Result<Vec<_>>>()?;

        let last_good = model.params.snapshot()?;
        let (mu, log_sigma) = model.generator.condition(&p)?;
        let factor = cond_augment(&mu, &log_sigma, &mut rng)?;
        let z = randn(&mut rng, &[batch, config.z_dim], DType::F32)?;
        let fakes = model.generator.generate(&z, &factor.c)?;

        // Discriminator update on detached fakes.
        let detached: Vec<Tensor> = fakes.iter().map(Tensor::detach).collect();
        let d_out = discriminator_loss(&model, &reals, &detached, &factor.c.detach(), &roll, config.literal_paper_loss)?;
        let (d_loss, d_real, d_fake) = (d_out.loss, d_out.real_prob, d_out.fake_prob);
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(abort(&model, &last_good, out_dir, step - 1, format!("discriminator loss {d_value} at step {step}")));
        }
        opt_d.backward_step(&d_loss)?;

        // Generator update through the refreshed discriminators.
        let g_out = generator_loss(&model, &fakes, &factor.c, &factor.mu, &factor.log_sigma, &q_real, &assoc.images)?;
        let (g_loss, kl, cycle) = (g_out.loss, g_out.kl, g_out.cycle);
        let g_value = scalar(&g_loss)?;
        if !g_value.is_finite() {
            return Err(abort(&model, &last_good, out_dir, step - 1, format!("generator loss {g_value} at step {step}")));
        }
        opt_g.backward_step(&g_loss)?;
        if !model.params.all_finite()? {
            return Err(abort(&model, &last_good, out_dir, step - 1, format!("non-finite parameters after step {step}")));
        }

        if step == 1 || step % config.log_every.max(1) == 0 || step == config.steps {
            let record = GanRecord {
                step,
                d_loss: d_value,
                g_loss: g_value,
                kl: scalar(&kl)?,
                cycle: cycle.iter().map(mean_scalar).collect::<Result<_>>()?,
                d_real,
                d_fake,
            };
            log::info!(
                "gan step {step}/{}: D {:.3} G {:.3} KL {:.3} cycle {:?} ({:.0}s)",
                config.steps,
                record.d_loss,
                record.g_loss,
                record.kl,
                record.cycle,
                started.elapsed().as_secs_f64()
            );
            history.records.push(record);
        }
        if let Some(dir) = out_dir {
            if step % config.sample_every.max(1) == 0 || step == config.steps {
                write_samples(&model, &preview_p, &preview_z, &dir.join("samples").join(format!("step_{step:06}.png")))?;
                model.save(dir, step)?;
                history.save(&dir.join("history.jsonl"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        if config.steps == 0 {
            model.save(dir, 0)?;
            history.save(&dir.join("history.jsonl"))?;
        }
    }
    Ok((model, history))
}
