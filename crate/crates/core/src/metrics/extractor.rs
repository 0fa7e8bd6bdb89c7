//! Feature extractors for the metrics, including the glyph classifier used
//! as the desk-scale backbone.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Linear, Optimizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassProbabilities, FeatureBatch, FeatureSource};
use crate::assoc::{Backbone, ConvBackbone};
use crate::config::config_hash;
use crate::data::synth::render_recipe;
use crate::data::{images_to_tensor, rescale_image, ImageSample, SyntheticSpec, ValueDomain};
use crate::error::{Error, Result};
use crate::nn::{adam, linear, scalar, CheckpointMeta, ParamStore};

const PARAMS_FILE: &str = "extractor.safetensors";
const META_FILE: &str = "extractor.json";
const BATCH: usize = 64;

/// A frozen network mapping images to features and class posteriors.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn input_size(&self) -> usize;
    /// `(features (B, feature_dim), probabilities (B, n_classes))` for
    /// encoder-domain images (B, 3, S, S).
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Runs `extractor` over `images` in batches. Images must already be at the
/// extractor's input size.
pub fn extract_features(images: &[ImageSample], extractor: &dyn FeatureExtractor, source: FeatureSource) -> Result<(FeatureBatch, ClassProbabilities)> {
    let size = extractor.input_size();
    for img in images {
        if img.height() != size || img.width() != size {
            return Err(Error::Shape(format!("extractor expects {size}x{size} images, got {}x{}", img.height(), img.width())));
        }
    }
    let (mut features, mut probs) = (Vec::with_capacity(images.len()), Vec::with_capacity(images.len()));
    for chunk in images.chunks(BATCH) {
        let enc: Vec<ImageSample> = chunk.iter().map(|i| i.to_domain(ValueDomain::Encoder)).collect();
        let (f, p) = extractor.forward(&images_to_tensor(&enc, DType::F32)?)?;
        features.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        for mut row in p.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            // Renormalize in f64 so rows meet the simplex tolerance.
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            probs.push(row);
        }
    }
    Ok((FeatureBatch::new(&features, source)?, ClassProbabilities::new(&probs)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Dataset spec whose glyphs define the classes.
    pub synth: SyntheticSpec,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            synth: SyntheticSpec::default(),
            input_size: 64,
            channels: vec![32, 64, 64, 64],
            train_per_class: 60,
            test_per_class: 20,
            epochs: 24,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    /// One class per visible glyph plus a final "no glyph" class.
    pub fn n_classes(&self) -> usize {
        self.synth.palette().visible_ids().count() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

/// Glyph-class classifier: the association backbone with a softmax head.
/// Features are the pooled backbone activations.
pub struct GlyphClassifier {
    pub config: ExtractorConfig,
    pub params: ParamStore,
    backbone: ConvBackbone,
    head: Linear,
}

impl GlyphClassifier {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        let mut params = ParamStore::new(DType::F32, config.seed);
        let backbone = ConvBackbone::new(&mut params, "backbone", &config.channels, config.input_size)?;
        let head = linear(&mut params, "head", backbone.feature_dim(), config.n_classes(), true)?;
        Ok(Self {
            config,
            params,
            backbone,
            head,
        })
    }

    fn logits(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.backbone.features(x)?;
        let logits = self.head.forward(&f)?;
        Ok((f, logits))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(&dir.join(PARAMS_FILE))?;
        CheckpointMeta {
            kind: "extractor".into(),
            config_hash: config_hash(&self.config)?,
            step: self.config.epochs,
            config: serde_json::to_value(&self.config)?,
        }
        .save(&dir.join(META_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = CheckpointMeta::load(&dir.join(META_FILE))?;
        if meta.kind != "extractor" {
            return Err(Error::Config(format!("{} holds a {} checkpoint", dir.display(), meta.kind)));
        }
        let config: ExtractorConfig = serde_json::from_value(meta.config).map_err(|e| Error::Config(e.to_string()))?;
        let model = Self::new(config)?;
        model.params.load(&dir.join(PARAMS_FILE))?;
        Ok(model)
    }
}

impl FeatureExtractor for GlyphClassifier {
    fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    fn n_classes(&self) -> usize {
        self.config.n_classes()
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (f, logits) = self.logits(x)?;
        Ok((f, candle_nn::ops::softmax(&logits, D::Minus1)?))
    }
}

/// Single-glyph images with their class labels, `per_class` per class.
fn labelled_images(config: &ExtractorConfig, per_class: usize, seed: u64) -> Result<(Vec<ImageSample>, Vec<u32>)> {
    let palette = config.synth.palette();
    let ids: Vec<usize> = palette.visible_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for class in 0..=ids.len() {
        let content: Vec<usize> = ids.get(class).map(|&id| vec![id]).unwrap_or_default();
        for _ in 0..per_class {
            let img = ImageSample::from_rgb(&render_recipe(&config.synth, &palette, &content, &mut rng)?);
            images.push(rescale_image(&img, config.input_size)?.to_domain(ValueDomain::Encoder));
            labels.push(class as u32);
        }
    }
    Ok((images, labels))
}

fn accuracy(model: &GlyphClassifier, images: &[ImageSample], labels: &[u32]) -> Result<f64> {
    let mut correct = 0;
    for (chunk, lab) in images.chunks(BATCH).zip(labels.chunks(BATCH)) {
        let (_, logits) = model.logits(&images_to_tensor(chunk, DType::F32)?)?;
        let pred: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
        correct += pred.iter().zip(lab).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / images.len().max(1) as f64)
}

/// Trains the glyph classifier on freshly rendered single-glyph images and
/// reports accuracy on an independently rendered held-out set.
pub fn train_extractor(config: &ExtractorConfig) -> Result<(GlyphClassifier, ExtractorReport)> {
    config.synth.validate()?;
    if config.batch_size == 0 || !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidParameter("extractor needs a positive batch size and learning rate".into()));
    }
    let model = GlyphClassifier::new(config.clone())?;
    let (train_x, train_y) = labelled_images(config, config.train_per_class, config.seed.wrapping_add(1))?;
    let (test_x, test_y) = labelled_images(config, config.test_per_class, config.seed.wrapping_add(2))?;
    let mut opt = adam(model.params.vars(), config.learning_rate, 0.9, 0.999)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x: Vec<ImageSample> = chunk.iter().map(|&i| train_x[i].clone()).collect();
            let y = Tensor::from_vec(chunk.iter().map(|&i| train_y[i]).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let (_, logits) = model.logits(&images_to_tensor(&x, DType::F32)?)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            total += scalar(&loss)? * chunk.len() as f64;
            opt.backward_step(&loss)?;
        }
        log::info!("extractor epoch {epoch}: loss {:.4}", total / train_x.len() as f64);
    }
    let report = ExtractorReport {
        train_accuracy: accuracy(&model, &train_x, &train_y)?,
        test_accuracy: accuracy(&model, &test_x, &test_y)?,
        n_train: train_x.len(),
        n_test: test_x.len(),
        n_classes: config.n_classes(),
    };
    Ok((model, report))
}
