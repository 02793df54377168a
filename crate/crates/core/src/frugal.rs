//! Per-pixel classifier trained from sparsely labeled rasters.
//!
//! Each optimisation step draws a fresh random subset of *labeled* pixels
//! from one image; unlabeled pixels are never sampled and therefore never
//! reach the loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_volume_with, ExtractorConfig, FeatureVolume};
use crate::mlp::{argmax, batch_cross_entropy, MlpError, MlpModel, SgdConfig};
use crate::raster::{
    ConfusionCounts, ImageRaster, LabelPalette, Metrics, RasterError, SemanticRaster, SparseLabelRaster,
};
use crate::rng::SplitMix64;

const ORDER_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const TRUNCATE_STREAM: u64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum FrugalError {
    #[error("label raster has no labeled pixels")]
    EmptyLabels,
    #[error("training diverged at epoch {epoch} (learning rate {learning_rate}): non-finite loss")]
    Divergence { epoch: usize, learning_rate: f64 },
    #[error("image has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fraction {0} leaves no labeled pixels")]
    FractionTooSmall(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

#[derive(Debug, Clone)]
pub struct FrugalDataset {
    palette: LabelPalette,
    items: Vec<(ImageRaster, SparseLabelRaster)>,
}

impl FrugalDataset {
    pub fn new(palette: LabelPalette, items: Vec<(ImageRaster, SparseLabelRaster)>) -> Result<Self, FrugalError> {
        if items.is_empty() {
            return Err(FrugalError::Dataset("no images".into()));
        }
        let channels = items[0].0.channels();
        for (i, (image, labels)) in items.iter().enumerate() {
            if image.dims() != labels.dims() {
                return Err(FrugalError::Dataset(format!(
                    "item {i}: image {:?} vs labels {:?}",
                    image.dims(),
                    labels.dims()
                )));
            }
            if image.channels() != channels {
                return Err(FrugalError::Dataset(format!("item {i}: mixed channel counts")));
            }
            labels.validate(&palette)?;
        }
        if items.iter().all(|(_, l)| l.labeled_count() == 0) {
            return Err(FrugalError::EmptyLabels);
        }
        Ok(Self { palette, items })
    }

    pub fn palette(&self) -> &LabelPalette {
        &self.palette
    }
    pub fn items(&self) -> &[(ImageRaster, SparseLabelRaster)] {
        &self.items
    }
    pub fn channels(&self) -> usize {
        self.items[0].0.channels()
    }

    /// Extracts every image's feature volume once.
    pub fn prepare(&self, extractor: &ExtractorConfig) -> PreparedDataset {
        PreparedDataset {
            palette: self.palette.clone(),
            channels: self.channels(),
            extractor: extractor.clone(),
            items: self
                .items
                .iter()
                .map(|(image, labels)| (extract_volume_with(image, extractor), labels.clone()))
                .collect(),
        }
    }
}

/// Dataset with cached feature volumes.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    palette: LabelPalette,
    channels: usize,
    extractor: ExtractorConfig,
    items: Vec<(FeatureVolume, SparseLabelRaster)>,
}

impl PreparedDataset {
    pub fn items(&self) -> &[(FeatureVolume, SparseLabelRaster)] {
        &self.items
    }

    /// Same features with labels replaced (dimensions must match).
    pub fn with_labels(&self, labels: Vec<SparseLabelRaster>) -> Self {
        assert_eq!(labels.len(), self.items.len());
        let items = self
            .items
            .iter()
            .zip(labels)
            .map(|((v, _), l)| {
                assert_eq!(v.dims(), l.dims());
                (v.clone(), l)
            })
            .collect();
        Self {
            items,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrugalConfig {
    /// Fraction of each image's pixels sampled per step (capped by the
    /// number of labeled pixels).
    pub pixel_fraction: f64,
    pub hidden_layers: Vec<usize>,
    pub sgd: SgdConfig,
}

impl Default for FrugalConfig {
    fn default() -> Self {
        Self {
            pixel_fraction: 0.04,
            hidden_layers: vec![64, 64],
            sgd: SgdConfig::default(),
        }
    }
}

impl FrugalConfig {
    fn validate(&self) -> Result<(), FrugalError> {
        if !(self.pixel_fraction > 0.0 && self.pixel_fraction <= 1.0) {
            return Err(FrugalError::Config(format!(
                "pixel_fraction {} not in (0, 1]",
                self.pixel_fraction
            )));
        }
        self.sgd.validate().map_err(FrugalError::Config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub extractor: ExtractorConfig,
    pub channels: usize,
    pub head: MlpModel,
    pub palette: LabelPalette,
}

impl SegModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FrugalError> {
        let model: Self = serde_json::from_str(text).map_err(|e| FrugalError::Dataset(e.to_string()))?;
        if model.head.output_dim() != model.palette.len()
            || model.head.input_dim() != model.extractor.dim(model.channels)
        {
            return Err(FrugalError::Dataset("model head shape does not match palette/extractor".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: SegModel,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Draws `min(n, labeled)` distinct labeled pixel indices uniformly without
/// replacement (partial Fisher-Yates over the ascending labeled indices).
pub fn sample_labeled_pixels(
    labels: &SparseLabelRaster,
    n: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>, FrugalError> {
    let labeled = labels.labeled_indices();
    if labeled.is_empty() {
        return Err(FrugalError::EmptyLabels);
    }
    Ok(rng.sample_without_replacement(&labeled, n))
}

fn gather(volume: &FeatureVolume, pixels: &[usize]) -> Array2<f64> {
    let dim = volume.dim();
    let mut batch = Array2::zeros((pixels.len(), dim));
    for (row, &p) in batch.rows_mut().into_iter().zip(pixels) {
        row.into_slice().expect("contiguous").copy_from_slice(volume.pixel(p));
    }
    batch
}

pub fn train(dataset: &FrugalDataset, config: &FrugalConfig) -> Result<TrainOutcome, FrugalError> {
    config.validate()?;
    train_prepared(&dataset.prepare(&ExtractorConfig::default()), config)
}

pub fn train_prepared(data: &PreparedDataset, config: &FrugalConfig) -> Result<TrainOutcome, FrugalError> {
    config.validate()?;
    if data.items.iter().all(|(_, l)| l.labeled_count() == 0) {
        return Err(FrugalError::EmptyLabels);
    }
    let input = data.extractor.dim(data.channels);
    let mut sizes = vec![input];
    sizes.extend(&config.hidden_layers);
    sizes.push(data.palette.len());
    let mut head = MlpModel::new(&sizes, config.sgd.seed)?;

    let mut order_rng = SplitMix64::derive(config.sgd.seed, ORDER_STREAM);
    let mut sample_rng = SplitMix64::derive(config.sgd.seed, SAMPLE_STREAM);
    let mut order: Vec<usize> = (0..data.items.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.sgd.epochs);

    for epoch in 1..=config.sgd.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let (volume, labels) = &data.items[i];
            if labels.labeled_count() == 0 {
                continue;
            }
            let n = (config.pixel_fraction * volume.len() as f64).ceil() as usize;
            let mut pixels = sample_labeled_pixels(labels, n.max(1), &mut sample_rng)?;
            // Raster order inside the batch; the sampled set is what matters.
            pixels.sort_unstable();
            let targets: Vec<usize> = pixels
                .iter()
                .map(|&p| labels.get_index(p).expect("sampled pixels are labeled") as usize)
                .collect();
            let batch = gather(volume, &pixels);
            let cache = head.forward_batch(batch.view())?;
            let (loss, upstream) = batch_cross_entropy(cache.logits(), &targets)?;
            if !loss.is_finite() {
                return Err(FrugalError::Divergence {
                    epoch,
                    learning_rate: config.sgd.learning_rate,
                });
            }
            let grads = head.backward_batch(&cache, &upstream)?;
            head.sgd_step(&grads, config.sgd.learning_rate, config.sgd.l2);
            epoch_loss += loss;
            steps += 1;
        }
        let mean = epoch_loss / steps as f64;
        if !mean.is_finite() || !head.is_finite() {
            return Err(FrugalError::Divergence {
                epoch,
                learning_rate: config.sgd.learning_rate,
            });
        }
        loss_trace.push(mean);
    }

    Ok(TrainOutcome {
        model: SegModel {
            extractor: data.extractor.clone(),
            channels: data.channels,
            head,
            palette: data.palette.clone(),
        },
        loss_trace,
    })
}

pub fn predict(model: &SegModel, image: &ImageRaster) -> Result<SemanticRaster, FrugalError> {
    if image.channels() != model.channels {
        return Err(FrugalError::ChannelMismatch {
            expected: model.channels,
            found: image.channels(),
        });
    }
    predict_volume(model, &extract_volume_with(image, &model.extractor))
}

/// Per-pixel argmax of the head's logits; ties go to the smallest class id.
pub fn predict_volume(model: &SegModel, volume: &FeatureVolume) -> Result<SemanticRaster, FrugalError> {
    let batch = ndarray::ArrayView2::from_shape((volume.len(), volume.dim()), volume.data())
        .expect("volume layout");
    let cache = model.head.forward_batch(batch)?;
    let classes = cache
        .logits()
        .rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("contiguous")) as u8)
        .collect();
    Ok(SemanticRaster::new(volume.width(), volume.height(), classes)?)
}

/// Keeps a seeded uniform subset of `round(fraction * labeled)` labels.
pub fn truncate_labels(labels: &SparseLabelRaster, fraction: f64, rng: &mut SplitMix64) -> SparseLabelRaster {
    let labeled = labels.labeled_indices();
    let keep = (fraction * labeled.len() as f64).round() as usize;
    let chosen = rng.sample_without_replacement(&labeled, keep);
    labels.retain_indices(&chosen)
}

/// Scores a model on fully (or partially) labeled held-out pairs.
pub fn evaluate(model: &SegModel, volumes: &[(FeatureVolume, SparseLabelRaster)]) -> Result<Metrics, FrugalError> {
    let mut counts = ConfusionCounts::default();
    for (volume, truth) in volumes {
        counts.add(&predict_volume(model, volume)?, truth)?;
    }
    Ok(counts.finish()?)
}

/// Trains one fresh model per label fraction and evaluates each on `eval`.
pub fn label_fraction_curve(
    train_set: &PreparedDataset,
    eval: &[(FeatureVolume, SparseLabelRaster)],
    fractions: &[f64],
    config: &FrugalConfig,
) -> Result<Vec<(f64, Metrics)>, FrugalError> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(FrugalError::Config("fractions must be sorted ascending".into()));
    }
    let mut curve = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(FrugalError::Config(format!("fraction {fraction} not in (0, 1]")));
        }
        let mut rng = SplitMix64::derive(config.sgd.seed, TRUNCATE_STREAM);
        let labels: Vec<SparseLabelRaster> = train_set
            .items
            .iter()
            .map(|(_, l)| truncate_labels(l, fraction, &mut rng))
            .collect();
        if labels.iter().all(|l| l.labeled_count() == 0) {
            return Err(FrugalError::FractionTooSmall(fraction));
        }
        let outcome = train_prepared(&train_set.with_labels(labels), config)?;
        curve.push((fraction, evaluate(&outcome.model, eval)?));
    }
    Ok(curve)
}
