//! Cross-modal association model.
//!
//! The ingredient encoder embeds canonical ids, runs a bidirectional LSTM,
//! pools the hidden states with a learned attention context and projects the
//! result into FoodSpace. The image encoder projects pooled backbone features
//! into the same space. Both are trained with a bidirectional hinge on
//! cosine similarity.

mod loss;
mod train;

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::data::{images_to_tensor, ImageSample, ValueDomain};
use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, resize_bilinear, CheckpointMeta, Conv, LstmCell, ParamStore};

pub use loss::{association_loss, cosine, cosine_rows, in_batch_loss};
pub use train::{embed_manifest, train_association, write_history_table, EpochRecord, TrainHistory};

/// FoodSpace dimension of the full-scale model.
pub const REFERENCE_FOODSPACE_DIM: usize = 1024;
/// Validation MedR reported at full scale on 5K pools. Informational only.
pub const REFERENCE_MEDR_5K: f64 = 24.0;
/// Upscale factor before the random training crop.
pub const CROP_FACTOR: f32 = 1.14;

const PARAMS_FILE: &str = "assoc.safetensors";
const META_FILE: &str = "assoc.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssocConfig {
    /// Size of the canonical id space; 0 means "take it from the manifest".
    pub vocab_size: usize,
    pub token_dim: usize,
    /// Total hidden size of the bidirectional LSTM (split evenly between
    /// directions).
    pub hidden: usize,
    pub foodspace_dim: usize,
    /// Square input resolution of the image backbone.
    pub image_size: usize,
    /// Output channels of the stride-2 convolution blocks; the last entry is
    /// the pooled feature dimension.
    pub backbone_channels: Vec<usize>,
    pub projection_tanh: bool,
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment_flip: bool,
    /// Random crop after upscaling by [`CROP_FACTOR`].
    pub augment_crop: bool,
    pub val_pool: usize,
    pub val_repeats: usize,
    pub seed: u64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            token_dim: 300,
            hidden: 300,
            foodspace_dim: REFERENCE_FOODSPACE_DIM,
            image_size: 64,
            backbone_channels: vec![32, 64, 128, 128],
            projection_tanh: true,
            margin: 0.3,
            epochs: 25,
            batch_size: 32,
            learning_rate: 1e-3,
            augment_flip: false,
            augment_crop: false,
            val_pool: 100,
            val_repeats: 1,
            seed: 0,
        }
    }
}

impl AssocConfig {
    /// Desk-scale preset: 128-dimensional FoodSpace.
    pub fn desk() -> Self {
        Self {
            foodspace_dim: 128,
            epochs: 30,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return bad(format!("margin {} outside (0, 2)", self.margin));
        }
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return bad(format!("hidden {} must be even and >= 2", self.hidden));
        }
        if self.token_dim == 0 || self.foodspace_dim == 0 || self.backbone_channels.is_empty() {
            return bad("dimensions must be positive".into());
        }
        let stride = 1usize << self.backbone_channels.len();
        if self.image_size < stride || self.image_size % stride != 0 {
            return bad(format!(
                "image_size {} is not divisible by {stride} for {} blocks",
                self.image_size,
                self.backbone_channels.len()
            ));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for in-batch negatives".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Softmax attention over hidden states: weights `softmax(u . h_i)` and the
/// weighted sum of the states. `hidden` is (N, H), `u` is (H).
pub fn attention_pool(hidden: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, h) = hidden.dims2()?;
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if u.dims1()? != h {
        return Err(Error::Shape(format!("context dim {} != hidden dim {h}", u.dims1()?)));
    }
    let scores = hidden.matmul(&u.unsqueeze(1)?)?.squeeze(1)?;
    let weights = candle_nn::ops::softmax(&scores, 0)?;
    let pooled = weights.unsqueeze(0)?.matmul(hidden)?.squeeze(0)?;
    Ok((pooled, weights))
}

/// Batched masked attention: `hidden` (B, T, H), `mask` (B, T) with 1 on
/// real steps. Padded steps get zero weight.
fn masked_attention(hidden: &Tensor, u: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let scores = hidden.broadcast_matmul(&u.unsqueeze(1)?)?.squeeze(2)?;
    let penalty = mask.affine(1e9, -1e9)?;
    let weights = candle_nn::ops::softmax(&(scores + penalty)?, D::Minus1)?;
    let pooled = weights.unsqueeze(1)?.matmul(hidden)?.squeeze(1)?;
    Ok((pooled, weights))
}

pub struct IngredientEncoder {
    table: Tensor,
    forward: LstmCell,
    backward: LstmCell,
    context: Tensor,
    projection: Linear,
    tanh: bool,
    vocab_size: usize,
}

impl IngredientEncoder {
    fn new(ps: &mut ParamStore, cfg: &AssocConfig) -> Result<Self> {
        let half = cfg.hidden / 2;
        Ok(Self {
            table: ps.normal("ingredient.embedding", &[cfg.vocab_size, cfg.token_dim], 1.0)?,
            forward: LstmCell::new(ps, "ingredient.lstm_fwd", cfg.token_dim, half)?,
            backward: LstmCell::new(ps, "ingredient.lstm_bwd", cfg.token_dim, half)?,
            context: ps.uniform("ingredient.context", &[cfg.hidden], 1.0 / (cfg.hidden as f64).sqrt())?,
            projection: linear(ps, "ingredient.projection", cfg.hidden, cfg.foodspace_dim, true)?,
            tanh: cfg.projection_tanh,
            vocab_size: cfg.vocab_size,
        })
    }

    /// Encodes a batch of id sequences to (B, d_f). Also returns the attention
    /// weights (B, T_max), zero on padding.
    pub fn encode(&self, batch: &[Vec<usize>]) -> Result<(Tensor, Tensor)> {
        let t_max = batch.iter().map(Vec::len).max().unwrap_or(0);
        if batch.is_empty() || batch.iter().any(Vec::is_empty) {
            return Err(Error::EmptySequence);
        }
        let b = batch.len();
        let mut fwd_ids = Vec::with_capacity(b * t_max);
        let mut bwd_ids = Vec::with_capacity(b * t_max);
        let mut mask = Vec::with_capacity(b * t_max);
        let mut unreverse = Vec::with_capacity(b * t_max);
        for (row, ids) in batch.iter().enumerate() {
            for &id in ids {
                if id >= self.vocab_size {
                    return Err(Error::InvalidId {
                        id,
                        vocab_size: self.vocab_size,
                    });
                }
            }
            let n = ids.len();
            for t in 0..t_max {
                fwd_ids.push(*ids.get(t).unwrap_or(&0) as u32);
                bwd_ids.push(if t < n { ids[n - 1 - t] as u32 } else { 0 });
                mask.push(if t < n { 1f32 } else { 0f32 });
                unreverse.push((row * t_max + if t < n { n - 1 - t } else { t }) as u32);
            }
        }
        let dev = Device::Cpu;
        let dtype = self.table.dtype();
        let mask = Tensor::from_vec(mask, (b, t_max), &dev)?.to_dtype(dtype)?;
        let embed = |ids: Vec<u32>| -> Result<Tensor> {
            let idx = Tensor::from_vec(ids, b * t_max, &dev)?;
            Ok(self.table.index_select(&idx, 0)?.reshape((b, t_max, ()))?)
        };
        let h_fwd = self.forward.run(&embed(fwd_ids)?, &mask)?;
        let h_bwd_rev = self.backward.run(&embed(bwd_ids)?, &mask)?;
        let half = self.backward.hidden();
        let idx = Tensor::from_vec(unreverse, b * t_max, &dev)?;
        let h_bwd = h_bwd_rev
            .reshape((b * t_max, half))?
            .index_select(&idx, 0)?
            .reshape((b, t_max, half))?;
        let hidden = Tensor::cat(&[h_fwd, h_bwd], 2)?;
        let (pooled, weights) = masked_attention(&hidden, &self.context, &mask)?;
        let mut out = self.projection.forward(&pooled)?;
        if self.tanh {
            out = out.tanh()?;
        }
        Ok((out, weights))
    }
}

/// A feature extractor feeding the image encoder's projection.
pub trait Backbone {
    fn feature_dim(&self) -> usize;
    fn input_size(&self) -> usize;
    /// Maps (B, 3, S, S) encoder-domain images to (B, feature_dim).
    fn features(&self, x: &Tensor) -> Result<Tensor>;
}

/// Stack of 3x3 stride-2 convolutions with ReLU, then global average
/// pooling.
pub struct ConvBackbone {
    blocks: Vec<Conv>,
    input_size: usize,
}

impl ConvBackbone {
    pub fn new(ps: &mut ParamStore, name: &str, channels: &[usize], input_size: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut inp = 3;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(conv2d(ps, &format!("{name}.block{i}"), inp, c, 3, 2, 1)?);
            inp = c;
        }
        Ok(Self { blocks, input_size })
    }
}

impl Backbone for ConvBackbone {
    fn feature_dim(&self) -> usize {
        self.blocks.last().map(|c| c.weight().dims()[0]).unwrap_or(3)
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?.relu()?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

pub struct ImageEncoder {
    backbone: Box<dyn Backbone>,
    projection: Linear,
    tanh: bool,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, backbone: Box<dyn Backbone>, foodspace_dim: usize, tanh: bool) -> Result<Self> {
        let projection = linear(ps, "image.projection", backbone.feature_dim(), foodspace_dim, true)?;
        Ok(Self {
            backbone,
            projection,
            tanh,
        })
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size()
    }

    /// Encodes (B, 3, S, S) encoder-domain images at the backbone resolution.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.input_size();
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!("image encoder expects (3, {s}, {s}), got ({c}, {h}, {w})")));
        }
        let mut out = self.projection.forward(&self.backbone.features(x)?)?;
        if self.tanh {
            out = out.tanh()?;
        }
        Ok(out)
    }

    /// Encodes generator-domain images of any square size: rescales to the
    /// backbone resolution, then maps [-1, 1] to the encoder domain.
    pub fn encode_generated(&self, x: &Tensor) -> Result<Tensor> {
        let resized = resize_bilinear(x, self.input_size())?;
        self.encode(&resized.affine(2.0, 0.0)?)
    }
}

/// Ingredient and image encoders with their parameters.
pub struct AssociationModel {
    pub config: AssocConfig,
    pub params: ParamStore,
    pub ingredients: IngredientEncoder,
    pub images: ImageEncoder,
}

impl AssociationModel {
    pub fn new(config: AssocConfig, dtype: DType) -> Result<Self> {
        Self::build(config, dtype, false)
    }

    pub(crate) fn build(config: AssocConfig, dtype: DType, frozen: bool) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::InvalidParameter("vocab_size must be set".into()));
        }
        let mut ps = if frozen {
            ParamStore::new_frozen(dtype, config.seed)
        } else {
            ParamStore::new(dtype, config.seed)
        };
        let ingredients = IngredientEncoder::new(&mut ps, &config)?;
        let backbone = ConvBackbone::new(&mut ps, "image.backbone", &config.backbone_channels, config.image_size)?;
        let images = ImageEncoder::new(&mut ps, Box::new(backbone), config.foodspace_dim, config.projection_tanh)?;
        Ok(Self {
            config,
            params: ps,
            ingredients,
            images,
        })
    }

    pub fn encode_ingredients(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.ingredients.encode(batch)?.0)
    }

    pub fn encode_image_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.images.encode(x)
    }

    /// Encodes one image given at the backbone resolution.
    pub fn encode_image(&self, image: &ImageSample) -> Result<Vec<f32>> {
        let x = images_to_tensor(&[image.to_domain(ValueDomain::Encoder)], self.params.dtype())?;
        Ok(self.images.encode(&x)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }

    pub fn encode_recipe(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let t = self.encode_ingredients(&[ids.to_vec()])?;
        Ok(t.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }

    pub fn save(&self, dir: &Path, step: usize) -> Result<()> {
        self.params.save(&dir.join(PARAMS_FILE))?;
        CheckpointMeta {
            kind: "assoc".into(),
            config_hash: config_hash(&self.config)?,
            step,
            config: serde_json::to_value(&self.config)?,
        }
        .save(&dir.join(META_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with(dir, DType::F32, false)
    }

    /// Loads a checkpoint whose parameters take no part in gradient
    /// computation.
    pub fn load_frozen(dir: &Path, dtype: DType) -> Result<Self> {
        Self::load_with(dir, dtype, true)
    }

    fn load_with(dir: &Path, dtype: DType, frozen: bool) -> Result<Self> {
        let meta = CheckpointMeta::load(&dir.join(META_FILE))?;
        if meta.kind != "assoc" {
            return Err(Error::Config(format!("{} holds a {} checkpoint", dir.display(), meta.kind)));
        }
        let config: AssocConfig = serde_json::from_value(meta.config).map_err(|e| Error::Config(e.to_string()))?;
        let model = Self::build(config, dtype, frozen)?;
        model.params.load(&dir.join(PARAMS_FILE))?;
        Ok(model)
    }

    /// Copies the checkpoint files of `src` into `dst`.
    pub fn copy_checkpoint(src: &Path, dst: &Path) -> Result<()> {
        std::fs::create_dir_all(dst).map_err(Error::io(dst))?;
        for name in [PARAMS_FILE, META_FILE] {
            let from = src.join(name);
            std::fs::copy(&from, dst.join(name)).map_err(|_| Error::Config(format!("checkpoint file {} not found", from.display())))?;
        }
        Ok(())
    }
}
