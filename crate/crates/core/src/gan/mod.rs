//! Three-branch conditional generator with conditioning augmentation, one
//! discriminator per resolution, and the cycle-consistency regularizer.

mod loss;
mod train;

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::AssociationModel;
use crate::config::config_hash;
use crate::data::{tensor_to_images, ImageSample, ValueDomain};
use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, randn, upsample_conv, CheckpointMeta, Conv, ParamStore, SampleNorm, UpConv};

pub use loss::{
    clamp_probability, cycle_similarity, discriminator_objective, generator_objective, kl_divergence, kl_loss, DiscriminatorProbs,
    PROB_EPS,
};
pub use train::{discriminator_loss, generator_loss, train_gan, DiscriminatorLoss, GanHistory, GanRecord, GeneratorLoss};

/// Full-scale reference numbers. Informational only.
pub const REFERENCE_IS: f64 = 5.03;
pub const REFERENCE_FID: f64 = 30.78;

const PARAMS_FILE: &str = "gan.safetensors";
const META_FILE: &str = "gan.json";
const ASSOC_DIR: &str = "assoc";
const LOG_SIGMA_MIN: f64 = -10.0;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub uncond: f64,
    pub ca: f64,
    pub cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            uncond: 0.5,
            ca: 0.02,
            cycle: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.uncond, self.ca, self.cycle].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// FoodSpace dimension of the conditioning embeddings; 0 means "take it
    /// from the association checkpoint".
    pub foodspace_dim: usize,
    pub c_dim: usize,
    pub z_dim: usize,
    /// Resolution of the first branch; each further branch doubles it.
    pub base_size: usize,
    /// Number of active branches (1 to 3).
    pub branches: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Use the literal `+log D` terms for fake and mismatched items instead of
    /// `-log(1 - D)`. Expected to be unstable.
    pub literal_paper_loss: bool,
    pub log_every: usize,
    pub sample_every: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            foodspace_dim: 0,
            c_dim: 128,
            z_dim: 100,
            base_size: 64,
            branches: 3,
            gen_width: 32,
            disc_width: 32,
            batch_size: 16,
            steps: 2000,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            literal_paper_loss: false,
            log_every: 50,
            sample_every: 500,
            seed: 0,
        }
    }
}

impl GanConfig {
    /// Single-branch preset sized for a CPU run in tens of minutes.
    pub fn desk() -> Self {
        Self {
            branches: 1,
            disc_width: 16,
            batch_size: 8,
            lr_generator: 5e-4,
            weights: LossWeights {
                cycle: 5.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        self.weights.validate()?;
        if !(1..=3).contains(&self.branches) {
            return bad(format!("branches {} outside 1..=3", self.branches));
        }
        if self.base_size < 8 || !self.base_size.is_power_of_two() {
            return bad(format!("base_size {} must be a power of two >= 8", self.base_size));
        }
        if self.c_dim == 0 || self.z_dim == 0 || self.gen_width == 0 || self.disc_width == 0 || self.foodspace_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for mismatched pairs".into());
        }
        for lr in [self.lr_generator, self.lr_discriminator] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr}"));
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.branches).map(|i| self.base_size << i).collect()
    }
}

/// Conditioning augmentation output: `c = mu + sigma * xi`.
#[derive(Debug, Clone)]
pub struct AppearanceFactor {
    pub c: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl AppearanceFactor {
    pub fn sigma(&self) -> Result<Tensor> {
        Ok(self.log_sigma.exp()?)
    }
}

/// Reparameterized sample `c = mu + exp(log_sigma) * xi`, `xi ~ N(0, I)`.
pub fn cond_augment(mu: &Tensor, log_sigma: &Tensor, rng: &mut impl Rng) -> Result<AppearanceFactor> {
    let xi = randn(rng, mu.dims(), mu.dtype())?;
    let c = (mu + (log_sigma.exp()? * xi)?)?;
    Ok(AppearanceFactor {
        c,
        mu: mu.clone(),
        log_sigma: log_sigma.clone(),
    })
}

fn broadcast_concat(h: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (b, _, hh, ww) = h.dims4()?;
    let c_dim = c.dim(1)?;
    let tiled = c.reshape((b, c_dim, 1, 1))?.broadcast_as((b, c_dim, hh, ww))?.contiguous()?;
    Ok(Tensor::cat(&[h, &tiled], 1)?)
}

struct UpBlock {
    up: UpConv,
    norm: SampleNorm,
}

impl UpBlock {
    fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            up: upsample_conv(ps, &format!("{name}.up"), inp, out)?,
            norm: SampleNorm::new(ps, &format!("{name}.norm"), out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.up.forward(x)?)?.relu()?)
    }
}

struct ConvNormRelu {
    conv: Conv,
    norm: SampleNorm,
}

impl ConvNormRelu {
    fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            conv: conv2d(ps, &format!("{name}.conv"), inp, out, 3, 1, 1)?,
            norm: SampleNorm::new(ps, &format!("{name}.norm"), out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Image head: 2x upsampling and a 3x3 convolution to RGB with a tanh, so
/// hidden states run at half the output resolution.
struct ToImage(UpConv);

impl ToImage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?.tanh()?)
    }
}

/// Later branch: joins the previous hidden state with c, refines it and
/// doubles its resolution.
struct Branch {
    join: ConvNormRelu,
    refine: ConvNormRelu,
    up: UpBlock,
    head: ToImage,
}

pub struct Generator {
    ca: Linear,
    fc: Linear,
    fc_norm: SampleNorm,
    start_channels: usize,
    ups: Vec<UpBlock>,
    head0: ToImage,
    branches: Vec<Branch>,
    c_dim: usize,
}

impl Generator {
    fn new(ps: &mut ParamStore, cfg: &GanConfig) -> Result<Self> {
        let g = cfg.gen_width;
        let n_up = (cfg.base_size / 8).trailing_zeros() as usize;
        let width = |k: usize| g * (4usize >> k.min(2)).max(1);
        let start_channels = width(0);
        let ca = linear(ps, "g.ca", cfg.foodspace_dim, 2 * cfg.c_dim, true)?;
        let fc = linear(ps, "g.f0.fc", cfg.z_dim + cfg.c_dim, start_channels * 16, true)?;
        let fc_norm = SampleNorm::new(ps, "g.f0.fc_norm", start_channels)?;
        let mut ups = Vec::with_capacity(n_up);
        for k in 0..n_up {
            ups.push(UpBlock::new(ps, &format!("g.f0.up{k}"), width(k), width(k + 1))?);
        }
        let last = width(n_up);
        let head0 = ToImage(upsample_conv(ps, "g.t0", last, 3)?);
        let mut branches = Vec::new();
        for i in 1..cfg.branches {
            branches.push(Branch {
                join: ConvNormRelu::new(ps, &format!("g.f{i}.join"), last + cfg.c_dim, last)?,
                refine: ConvNormRelu::new(ps, &format!("g.f{i}.refine"), last, last)?,
                up: UpBlock::new(ps, &format!("g.f{i}.up"), last, last)?,
                head: ToImage(upsample_conv(ps, &format!("g.t{i}"), last, 3)?),
            });
        }
        Ok(Self {
            ca,
            fc,
            fc_norm,
            start_channels,
            ups,
            head0,
            branches,
            c_dim: cfg.c_dim,
        })
    }

    /// Conditioning parameters `(mu, log_sigma)` for FoodSpace inputs (B, d_f).
    pub fn condition(&self, p: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.ca.forward(p)?;
        let mu = out.narrow(1, 0, self.c_dim)?;
        let log_sigma = out.narrow(1, self.c_dim, self.c_dim)?.clamp(LOG_SIGMA_MIN, f64::MAX)?;
        Ok((mu, log_sigma))
    }

    /// Generates one image per active branch, smallest first, each (B, 3, S, S)
    /// in [-1, 1].
    pub fn generate(&self, z: &Tensor, c: &Tensor) -> Result<Vec<Tensor>> {
        let b = z.dim(0)?;
        let x = Tensor::cat(&[z, c], 1)?;
        let mut h = self.fc.forward(&x)?.reshape((b, self.start_channels, 4, 4))?;
        h = self.fc_norm.forward(&h)?.relu()?;
        for up in &self.ups {
            h = up.forward(&h)?;
        }
        let mut images = vec![self.head0.forward(&h)?];
        for branch in &self.branches {
            h = branch.join.forward(&broadcast_concat(&h, c)?)?;
            h = (branch.refine.forward(&h)? + &h)?;
            h = branch.up.forward(&h)?;
            images.push(branch.head.forward(&h)?);
        }
        Ok(images)
    }
}

/// Per-resolution discriminator with an unconditional and a conditional
/// probability head over shared convolutional features.
pub struct Discriminator {
    downs: Vec<Conv>,
    uncond: Conv,
    cond_join: Conv,
    cond_out: Conv,
}

impl Discriminator {
    fn new(ps: &mut ParamStore, name: &str, size: usize, cfg: &GanConfig) -> Result<Self> {
        let n_down = (size / 4).trailing_zeros() as usize;
        let mut downs = Vec::with_capacity(n_down);
        let mut inp = 3;
        let mut out = cfg.disc_width;
        for k in 0..n_down {
            downs.push(conv2d(ps, &format!("{name}.down{k}"), inp, out, 4, 2, 1)?);
            inp = out;
            out = (out * 2).min(cfg.disc_width * 4);
        }
        Ok(Self {
            downs,
            uncond: conv2d(ps, &format!("{name}.uncond"), inp, 1, 4, 1, 0)?,
            cond_join: conv2d(ps, &format!("{name}.cond_join"), inp + cfg.c_dim, inp, 3, 1, 1)?,
            cond_out: conv2d(ps, &format!("{name}.cond_out"), inp, 1, 4, 1, 0)?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.downs {
            h = candle_nn::ops::leaky_relu(&conv.forward(&h)?, LEAK)?;
        }
        Ok(h)
    }

    /// Returns `(conditional, unconditional)` probabilities, each (B).
    pub fn probabilities(&self, x: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.features(x)?;
        let uncond = candle_nn::ops::sigmoid(&self.uncond.forward(&h)?.flatten_all()?)?;
        let joined = candle_nn::ops::leaky_relu(&self.cond_join.forward(&broadcast_concat(&h, c)?)?, LEAK)?;
        let cond = candle_nn::ops::sigmoid(&self.cond_out.forward(&joined)?.flatten_all()?)?;
        Ok((cond, uncond))
    }
}

/// Generator and discriminators with their parameters.
pub struct GanModel {
    pub config: GanConfig,
    pub params: ParamStore,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
}

impl GanModel {
    pub fn new(config: GanConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, config.seed);
        let generator = Generator::new(&mut ps, &config)?;
        let discriminators = config
            .sizes()
            .iter()
            .enumerate()
            .map(|(i, &s)| Discriminator::new(&mut ps, &format!("d{i}"), s, &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: ps,
            generator,
            discriminators,
        })
    }

    /// Deterministic generation with `c = mu(p)`. Returns one image list per
    /// branch.
    pub fn generate_deterministic(&self, p: &Tensor, z: &Tensor) -> Result<Vec<Tensor>> {
        let (mu, _) = self.generator.condition(p)?;
        self.generator.generate(z, &mu)
    }

    /// Generates the image pyramid for one FoodSpace vector and one noise
    /// vector, with deterministic c.
    pub fn generate_one(&self, p: &[f32], z: &[f32]) -> Result<Vec<ImageSample>> {
        let dtype = self.params.dtype();
        let p = Tensor::from_slice(p, (1, p.len()), &Device::Cpu)?.to_dtype(dtype)?;
        let z = Tensor::from_slice(z, (1, z.len()), &Device::Cpu)?.to_dtype(dtype)?;
        self.generate_deterministic(&p, &z)?
            .iter()
            .map(|t| Ok(tensor_to_images(t, ValueDomain::Generator)?.remove(0)))
            .collect()
    }

    pub fn sample_noise(&self, rng: &mut impl Rng) -> Vec<f32> {
        (0..self.config.z_dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
    }

    pub fn save(&self, dir: &Path, step: usize) -> Result<()> {
        self.params.save(&dir.join(PARAMS_FILE))?;
        CheckpointMeta {
            kind: "gan".into(),
            config_hash: config_hash(&self.config)?,
            step,
            config: serde_json::to_value(&self.config)?,
        }
        .save(&dir.join(META_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = CheckpointMeta::load(&dir.join(META_FILE))?;
        if meta.kind != "gan" {
            return Err(Error::Config(format!("{} holds a {} checkpoint", dir.display(), meta.kind)));
        }
        let config: GanConfig = serde_json::from_value(meta.config).map_err(|e| Error::Config(e.to_string()))?;
        let model = Self::new(config, DType::F32)?;
        model.params.load(&dir.join(PARAMS_FILE))?;
        Ok(model)
    }

    /// Loads a GAN checkpoint together with the frozen association model
    /// stored alongside it.
    pub fn load_with_assoc(dir: &Path) -> Result<(Self, AssociationModel)> {
        let gan = Self::load(dir)?;
        let assoc = AssociationModel::load_frozen(&dir.join(ASSOC_DIR), DType::F32)?;
        Ok((gan, assoc))
    }
}

/// Generates along the straight line between two FoodSpace vectors with a
/// shared noise vector and deterministic c. Step t uses weight t/(steps-1)
/// on `p_to`.
pub fn interpolate_encodings(model: &GanModel, p_from: &[f32], p_to: &[f32], steps: usize, z: &[f32]) -> Result<Vec<Vec<ImageSample>>> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!("interpolation needs >= 2 steps, got {steps}")));
    }
    if p_from.len() != p_to.len() {
        return Err(Error::Shape("interpolation endpoints differ in dimension".into()));
    }
    (0..steps)
        .map(|t| {
            let lambda = t as f32 / (steps - 1) as f32;
            let p: Vec<f32> = if t == 0 {
                p_from.to_vec()
            } else if t == steps - 1 {
                p_to.to_vec()
            } else {
                p_from.iter().zip(p_to).map(|(a, b)| a + lambda * (b - a)).collect()
            };
            model.generate_one(&p, z)
        })
        .collect()
}

/// Mean of a (B) tensor as f64.
pub(crate) fn mean_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.mean(D::Minus1)?.to_scalar::<f64>()?)
}
