//! Few-shot segmentation of a new class from K masked support examples.
//!
//! Support and query images go through the same feature extractor. Each
//! support's feature volume is masked by its ground-truth map (the masking
//! happens on features, never on input pixels), the masked maps are combined
//! with softmax weights over their cosine similarity to the query, and a
//! binary head classifies every query pixel from `[q ; c ; |q - c|]`, where
//! `q` is the query feature and `c` the fused conditioning feature. The
//! elementwise distance term lets the head generalize to classes it never
//! saw during episodes.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_volume_with, global_pool, ExtractorConfig, FeatureError, FeatureVolume};
use crate::mlp::{argmax, batch_cross_entropy, MlpError, MlpModel, SgdConfig};
use crate::raster::{BinaryMask, ImageRaster, SemanticRaster};
use crate::rng::SplitMix64;

/// Softmax temperature applied to support/query cosine similarities.
pub const TEMPERATURE: f64 = 0.1;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FewshotError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("support mask has no foreground pixels")]
    EmptySupportMask,
    #[error("support set is empty")]
    EmptySupport,
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("head is untrained (all parameters are zero)")]
    UntrainedHead,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot build episodes: {0}")]
    EpisodeConstruction(String),
    #[error("training diverged at episode {episode}: non-finite loss")]
    Divergence { episode: usize },
    #[error("invalid head: {0}")]
    InvalidHead(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportExample {
    image: ImageRaster,
    mask: BinaryMask,
}

impl SupportExample {
    pub fn new(image: ImageRaster, mask: BinaryMask) -> Result<Self, FewshotError> {
        if image.dims() != mask.dims() {
            return Err(FewshotError::DimensionMismatch(format!(
                "support image {:?} vs mask {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        if mask.count() == 0 {
            return Err(FewshotError::EmptySupportMask);
        }
        Ok(Self { image, mask })
    }

    pub fn image(&self) -> &ImageRaster {
        &self.image
    }
    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    examples: Vec<SupportExample>,
}

impl SupportSet {
    pub fn new(examples: Vec<SupportExample>) -> Result<Self, FewshotError> {
        let first = examples.first().ok_or(FewshotError::EmptySupport)?;
        let channels = first.image.channels();
        if let Some(bad) = examples.iter().find(|e| e.image.channels() != channels) {
            return Err(FewshotError::ChannelMismatch {
                expected: channels,
                found: bad.image.channels(),
            });
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[SupportExample] {
        &self.examples
    }
    pub fn k(&self) -> usize {
        self.examples.len()
    }
}

/// A support feature volume with background features zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMap {
    volume: FeatureVolume,
    mask: BinaryMask,
}

impl ConditioningMap {
    pub fn volume(&self) -> &FeatureVolume {
        &self.volume
    }
    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    /// Mean feature over the map's own foreground.
    pub fn pooled(&self) -> Result<Vec<f64>, FeatureError> {
        global_pool(&self.volume, Some(&self.mask))
    }
}

/// Multiplies each pixel's features by its mask bit.
pub fn fusion_module(features: &FeatureVolume, mask: &BinaryMask) -> Result<ConditioningMap, FewshotError> {
    if features.dims() != mask.dims() {
        return Err(FewshotError::DimensionMismatch(format!(
            "features {:?} vs mask {:?}",
            features.dims(),
            mask.dims()
        )));
    }
    let dim = features.dim();
    let mut volume = features.clone();
    for (chunk, &bit) in volume.data_mut().chunks_mut(dim).zip(mask.data()) {
        if !bit {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(ConditioningMap {
        volume,
        mask: mask.clone(),
    })
}

/// `a.b / (|a| |b|)`, or 0 when either norm is below 1e-12.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, FewshotError> {
    if a.len() != b.len() {
        return Err(FewshotError::DimensionMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `scores / temperature`.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedConditioning {
    /// `sum_k weights[k] * maps[k]`, elementwise.
    pub fused: FeatureVolume,
    pub weights: Vec<f64>,
    /// `sum_k weights[k] * mean_{foreground k}(maps[k])`, the vector the head
    /// sees next to every query feature.
    pub conditioning: Vec<f64>,
}

pub fn fuse_supports(
    maps: &[ConditioningMap],
    support_globals: &[Vec<f64>],
    query_global: &[f64],
) -> Result<FusedConditioning, FewshotError> {
    let first = maps.first().ok_or(FewshotError::EmptySupport)?;
    if support_globals.len() != maps.len() {
        return Err(FewshotError::DimensionMismatch(format!(
            "{} maps but {} support globals",
            maps.len(),
            support_globals.len()
        )));
    }
    let (dims, dim) = (first.volume.dims(), first.volume.dim());
    if let Some(bad) = maps.iter().find(|m| m.volume.dims() != dims || m.volume.dim() != dim) {
        return Err(FewshotError::DimensionMismatch(format!(
            "conditioning maps {:?}x{} vs {:?}x{}",
            dims,
            dim,
            bad.volume.dims(),
            bad.volume.dim()
        )));
    }
    let pooled = maps.iter().map(|m| m.pooled()).collect::<Result<Vec<_>, _>>()?;
    let (weights, conditioning) = conditioning_from_pools(&pooled, support_globals, query_global)?;
    let mut fused = vec![0.0; first.volume.data().len()];
    for (map, &w) in maps.iter().zip(&weights) {
        for (f, v) in fused.iter_mut().zip(map.volume.data()) {
            *f += w * v;
        }
    }
    Ok(FusedConditioning {
        fused: FeatureVolume::new(dims.0, dims.1, dim, fused),
        weights,
        conditioning,
    })
}

/// Softmax weights from `cosine(support_globals[k], query_global)` and the
/// weighted sum of the per-support foreground means `pooled[k]`.
pub fn conditioning_from_pools(
    pooled: &[Vec<f64>],
    support_globals: &[Vec<f64>],
    query_global: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), FewshotError> {
    let dim = pooled.first().ok_or(FewshotError::EmptySupport)?.len();
    if pooled.len() != support_globals.len() || pooled.iter().any(|p| p.len() != dim) {
        return Err(FewshotError::DimensionMismatch("pooled supports".into()));
    }
    let scores = support_globals
        .iter()
        .map(|g| cosine_similarity(g, query_global))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = softmax_weights(&scores, TEMPERATURE);
    let mut conditioning = vec![0.0; dim];
    for (p, &w) in pooled.iter().zip(&weights) {
        for (c, v) in conditioning.iter_mut().zip(p) {
            *c += w * v;
        }
    }
    Ok((weights, conditioning))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotHead {
    pub extractor: ExtractorConfig,
    pub channels: usize,
    /// Per-feature standardization `(x - shift) * scale`, applied to both the
    /// query and the conditioning half of the head input.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Input `3 * D`, output `[background, foreground]` logits.
    pub model: MlpModel,
}

impl FewshotHead {
    pub fn new(extractor: ExtractorConfig, channels: usize, hidden: &[usize], seed: u64) -> Result<Self, FewshotError> {
        let d = extractor.dim(channels);
        let mut sizes = vec![HEAD_BLOCKS * d];
        sizes.extend(hidden);
        sizes.push(2);
        Ok(Self {
            model: MlpModel::new(&sizes, seed)?,
            input_shift: vec![0.0; d],
            input_scale: vec![1.0; d],
            extractor,
            channels,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.dim(self.channels)
    }

    fn check(&self) -> Result<(), FewshotError> {
        let d = self.feature_dim();
        if self.model.input_dim() != HEAD_BLOCKS * d || self.model.output_dim() != 2 {
            return Err(FewshotError::InvalidHead("head shape does not match extractor".into()));
        }
        if self.input_shift.len() != d || self.input_scale.len() != d {
            return Err(FewshotError::InvalidHead("standardization length does not match extractor".into()));
        }
        if self.input_shift.iter().chain(&self.input_scale).any(|v| !v.is_finite()) {
            return Err(FewshotError::InvalidHead("non-finite standardization".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("head serializes")
    }

    /// Rejects malformed heads and heads whose parameters are all zero.
    pub fn from_json(text: &str) -> Result<Self, FewshotError> {
        let head: Self = serde_json::from_str(text).map_err(|e| FewshotError::InvalidHead(e.to_string()))?;
        head.check()?;
        if head.model.is_all_zero() {
            return Err(FewshotError::UntrainedHead);
        }
        Ok(head)
    }
}

/// Number of `D`-wide blocks in a head input row.
pub const HEAD_BLOCKS: usize = 3;

/// Builds the standardized `[q ; c ; |q - c|]` rows for `pixels`.
fn head_inputs(head: &FewshotHead, query: &FeatureVolume, pixels: &[usize], conditioning: &[f64]) -> Array2<f64> {
    let d = query.dim();
    let standardize = |out: &mut [f64], x: &[f64]| {
        for (((o, v), s), k) in out.iter_mut().zip(x).zip(&head.input_shift).zip(&head.input_scale) {
            *o = (v - s) * k;
        }
    };
    let mut cond = vec![0.0; d];
    standardize(&mut cond, conditioning);
    let mut batch = Array2::zeros((pixels.len(), HEAD_BLOCKS * d));
    for (mut row, &p) in batch.rows_mut().into_iter().zip(pixels) {
        let row = row.as_slice_mut().expect("contiguous");
        standardize(&mut row[..d], query.pixel(p));
        row[d..2 * d].copy_from_slice(&cond);
        for i in 0..d {
            row[2 * d + i] = (row[i] - cond[i]).abs();
        }
    }
    batch
}

/// Conditioning for a query from already extracted support volumes.
pub fn condition(
    supports: &[(&FeatureVolume, &BinaryMask)],
    query: &FeatureVolume,
) -> Result<FusedConditioning, FewshotError> {
    let mut maps = Vec::with_capacity(supports.len());
    let mut globals = Vec::with_capacity(supports.len());
    for (volume, mask) in supports {
        let map = fusion_module(volume, mask)?;
        globals.push(map.pooled()?);
        maps.push(map);
    }
    let query_global = global_pool(query, None)?;
    fuse_supports(&maps, &globals, &query_global)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    pub weights: Vec<f64>,
}

pub fn segment_volume(
    head: &FewshotHead,
    conditioning: &[f64],
    query: &FeatureVolume,
) -> Result<BinaryMask, FewshotError> {
    head.check()?;
    if query.dim() != head.feature_dim() {
        return Err(FewshotError::DimensionMismatch(format!(
            "query features {} vs head {}",
            query.dim(),
            head.feature_dim()
        )));
    }
    let pixels: Vec<usize> = (0..query.len()).collect();
    let cache = head.model.forward_batch(head_inputs(head, query, &pixels, conditioning).view())?;
    let bits = cache
        .logits()
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous")) == 1)
        .collect();
    Ok(BinaryMask::new(query.width(), query.height(), bits).expect("query layout"))
}

pub fn segment_query(head: &FewshotHead, support: &SupportSet, query: &ImageRaster) -> Result<Segmentation, FewshotError> {
    for e in support.examples() {
        if e.image.channels() != head.channels {
            return Err(FewshotError::ChannelMismatch {
                expected: head.channels,
                found: e.image.channels(),
            });
        }
    }
    if query.channels() != head.channels {
        return Err(FewshotError::ChannelMismatch {
            expected: head.channels,
            found: query.channels(),
        });
    }
    let query_volume = extract_volume_with(query, &head.extractor);
    let volumes: Vec<FeatureVolume> = support
        .examples()
        .iter()
        .map(|e| extract_volume_with(&e.image, &head.extractor))
        .collect();
    let pairs: Vec<(&FeatureVolume, &BinaryMask)> = volumes.iter().zip(support.examples().iter().map(|e| &e.mask)).collect();
    let fused = condition(&pairs, &query_volume)?;
    let mask = segment_volume(head, &fused.conditioning, &query_volume)?;
    Ok(Segmentation {
        mask,
        weights: fused.weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodicConfig {
    /// `sgd.epochs` is the number of episodes; `sgd.batch_pixels` query
    /// pixels are sampled per episode.
    pub sgd: SgdConfig,
    pub k: usize,
    pub hidden_layers: Vec<usize>,
    /// Draw half of each batch from foreground and half from background.
    pub balanced: bool,
}

impl Default for EpisodicConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                learning_rate: 0.05,
                epochs: 1500,
                batch_pixels: 256,
                seed: 0,
                l2: 1e-5,
            },
            k: 1,
            hidden_layers: vec![64, 64],
            balanced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub class: u8,
    pub supports: Vec<usize>,
    pub query: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicOutcome {
    pub head: FewshotHead,
    pub loss_trace: Vec<f64>,
    pub episodes: Vec<EpisodeRecord>,
    /// Indices of dataset images that contain a test class.
    pub excluded: Vec<usize>,
}

impl EpisodicOutcome {
    /// Every image index used by any episode.
    pub fn touched(&self) -> BTreeSet<usize> {
        self.episodes
            .iter()
            .flat_map(|e| e.supports.iter().copied().chain([e.query]))
            .collect()
    }
}

/// Dataset images with cached features.
pub struct EpisodeData {
    extractor: ExtractorConfig,
    channels: usize,
    items: Vec<(FeatureVolume, SemanticRaster)>,
    /// Unmasked mean feature per item.
    globals: Vec<Vec<f64>>,
}

impl EpisodeData {
    pub fn new(images: &[(ImageRaster, SemanticRaster)], extractor: &ExtractorConfig) -> Result<Self, FewshotError> {
        let channels = images
            .first()
            .ok_or_else(|| FewshotError::EpisodeConstruction("empty dataset".into()))?
            .0
            .channels();
        let mut items = Vec::with_capacity(images.len());
        for (i, (image, truth)) in images.iter().enumerate() {
            if image.channels() != channels {
                return Err(FewshotError::ChannelMismatch {
                    expected: channels,
                    found: image.channels(),
                });
            }
            if image.dims() != truth.dims() {
                return Err(FewshotError::DimensionMismatch(format!("item {i}: image vs semantic raster")));
            }
            items.push((extract_volume_with(image, extractor), truth.clone()));
        }
        let globals = items
            .iter()
            .map(|(v, _)| global_pool(v, None))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            extractor: extractor.clone(),
            channels,
            items,
            globals,
        })
    }

    pub fn items(&self) -> &[(FeatureVolume, SemanticRaster)] {
        &self.items
    }
}

pub fn episodic_train(
    dataset: &[(ImageRaster, SemanticRaster)],
    train_classes: &[u8],
    test_classes: &[u8],
    config: &EpisodicConfig,
) -> Result<EpisodicOutcome, FewshotError> {
    let data = EpisodeData::new(dataset, &ExtractorConfig::default())?;
    episodic_train_prepared(&data, train_classes, test_classes, config)
}

pub fn episodic_train_prepared(
    data: &EpisodeData,
    train_classes: &[u8],
    test_classes: &[u8],
    config: &EpisodicConfig,
) -> Result<EpisodicOutcome, FewshotError> {
    config.sgd.validate().map_err(FewshotError::Contract)?;
    if config.k == 0 {
        return Err(FewshotError::Contract("k must be >= 1".into()));
    }
    if let Some(c) = train_classes.iter().find(|c| test_classes.contains(c)) {
        return Err(FewshotError::Contract(format!("class {c} is both a train and a test class")));
    }
    if train_classes.is_empty() {
        return Err(FewshotError::Contract("no train classes".into()));
    }

    let excluded: Vec<usize> = data
        .items
        .iter()
        .enumerate()
        .filter(|(_, (_, truth))| test_classes.iter().any(|&c| truth.contains_class(c)))
        .map(|(i, _)| i)
        .collect();
    let eligible_for = |class: u8| -> Vec<usize> {
        (0..data.items.len())
            .filter(|i| !excluded.contains(i) && data.items[*i].1.contains_class(class))
            .collect()
    };
    let pools: Vec<(u8, Vec<usize>)> = train_classes
        .iter()
        .map(|&c| (c, eligible_for(c)))
        .filter(|(_, pool)| pool.len() > config.k)
        .collect();
    if pools.is_empty() {
        return Err(FewshotError::EpisodeConstruction(format!(
            "no train class has {} eligible images",
            config.k + 1
        )));
    }

    let mut head = FewshotHead::new(data.extractor.clone(), data.channels, &config.hidden_layers, config.sgd.seed)?;
    let eligible: Vec<usize> = (0..data.items.len()).filter(|i| !excluded.contains(i)).collect();
    (head.input_shift, head.input_scale) = feature_statistics(data, &eligible);
    let mut rng = SplitMix64::derive(config.sgd.seed, 0x4550_4953);
    let mut loss_trace = Vec::with_capacity(config.sgd.epochs);
    let mut episodes = Vec::with_capacity(config.sgd.epochs);

    for episode in 1..=config.sgd.epochs {
        let (class, pool) = &pools[rng.below_usize(pools.len())];
        let chosen = rng.sample_without_replacement(pool, config.k + 1);
        let (supports, query) = (&chosen[..config.k], chosen[config.k]);
        for &i in &chosen {
            assert!(
                test_classes.iter().all(|&t| !data.items[i].1.contains_class(t)),
                "episode touched an image containing a test class"
            );
        }

        let masks: Vec<BinaryMask> = supports.iter().map(|&i| data.items[i].1.mask_of(*class)).collect();
        let pooled = supports
            .iter()
            .zip(&masks)
            .map(|(&i, m)| global_pool(&data.items[i].0, Some(m)))
            .collect::<Result<Vec<_>, _>>()?;
        let support_globals: Vec<Vec<f64>> = supports.iter().map(|&i| data.globals[i].clone()).collect();
        let (_, conditioning) = conditioning_from_pools(&pooled, &support_globals, &data.globals[query])?;
        let (query_volume, query_truth) = &data.items[query];

        let truth = query_truth.mask_of(*class);
        let pixels = sample_query_pixels(&truth, config.sgd.batch_pixels, config.balanced, &mut rng);
        let targets: Vec<usize> = pixels.iter().map(|&p| truth.data()[p] as usize).collect();
        let batch = head_inputs(&head, query_volume, &pixels, &conditioning);
        let cache = head.model.forward_batch(batch.view())?;
        let (loss, upstream) = batch_cross_entropy(cache.logits(), &targets)?;
        if !loss.is_finite() {
            return Err(FewshotError::Divergence { episode });
        }
        let grads = head.model.backward_batch(&cache, &upstream)?;
        head.model.sgd_step(&grads, config.sgd.learning_rate, config.sgd.l2);
        loss_trace.push(loss);
        episodes.push(EpisodeRecord {
            class: *class,
            supports: supports.to_vec(),
            query,
        });
    }

    Ok(EpisodicOutcome {
        head,
        loss_trace,
        episodes,
        excluded,
    })
}

/// Per-feature mean and inverse standard deviation over every pixel of the
/// given items.
fn feature_statistics(data: &EpisodeData, items: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = data.extractor.dim(data.channels);
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for &i in items {
        let volume = &data.items[i].0;
        for p in 0..volume.len() {
            for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(volume.pixel(p)) {
                *s += v;
                *q += v * v;
            }
        }
        n += volume.len();
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| 1.0 / (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    (mean, scale)
}

fn sample_query_pixels(truth: &BinaryMask, n: usize, balanced: bool, rng: &mut SplitMix64) -> Vec<usize> {
    let all: Vec<usize> = (0..truth.data().len()).collect();
    if !balanced {
        return rng.sample_without_replacement(&all, n);
    }
    let (fg, bg): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&p| truth.data()[p]);
    if fg.is_empty() || bg.is_empty() {
        return rng.sample_without_replacement(if fg.is_empty() { &bg } else { &fg }, n);
    }
    let half = n.div_ceil(2);
    let mut pixels = rng.sample_without_replacement(&fg, half);
    pixels.extend(rng.sample_without_replacement(&bg, n - half));
    pixels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(w: usize, h: usize, d: usize, rng: &mut SplitMix64) -> FeatureVolume {
        FeatureVolume::new(w, h, d, (0..w * h * d).map(|_| rng.next_f64()).collect())
    }

    fn random_mask(w: usize, h: usize, rng: &mut SplitMix64) -> BinaryMask {
        let mut m = BinaryMask::new(w, h, (0..w * h).map(|_| rng.next_f64() < 0.4).collect()).unwrap();
        m.set(0, 0, true);
        m
    }

    #[test]
    fn fusion_identity_and_single_pixel() {
        let mut rng = SplitMix64::new(1);
        let v = random_volume(4, 3, 5, &mut rng);
        assert_eq!(fusion_module(&v, &BinaryMask::full(4, 3)).unwrap().volume(), &v);
        let mut single = BinaryMask::empty(4, 3);
        single.set(2, 1, true);
        let map = fusion_module(&v, &single).unwrap();
        let nonzero: Vec<usize> = (0..12).filter(|&p| map.volume().pixel(p).iter().any(|&x| x != 0.0)).collect();
        assert_eq!(nonzero, vec![6]);
    }

    #[test]
    fn fusion_elementwise() {
        let mut rng = SplitMix64::new(2);
        let v = random_volume(6, 5, 4, &mut rng);
        let m = random_mask(6, 5, &mut rng);
        let map = fusion_module(&v, &m).unwrap();
        for p in 0..30 {
            let bit = if m.data()[p] { 1.0 } else { 0.0 };
            for (o, i) in map.volume().pixel(p).iter().zip(v.pixel(p)) {
                assert_eq!(*o, i * bit);
            }
        }
        assert!(fusion_module(&v, &BinaryMask::full(5, 6)).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.2, -0.7], &[0.6, -2.1]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weights_for_stated_similarities() {
        // softmax([0.9, 0.1] / 0.1) = softmax([9, 1]) = [1, e^-8] / (1 + e^-8)
        let w = softmax_weights(&[0.9, 0.1], TEMPERATURE);
        let e = (-8.0f64).exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((w[0] - 0.99966).abs() < 5e-6);
    }

    #[test]
    fn singleton_fusion_is_identity() {
        let mut rng = SplitMix64::new(3);
        let v = random_volume(5, 4, 3, &mut rng);
        let m = random_mask(5, 4, &mut rng);
        let map = fusion_module(&v, &m).unwrap();
        let g = map.pooled().unwrap();
        let q: Vec<f64> = (0..3).map(|_| rng.next_f64()).collect();
        let fused = fuse_supports(std::slice::from_ref(&map), &[g.clone()], &q).unwrap();
        assert_eq!(fused.weights, vec![1.0]);
        assert_eq!(&fused.fused, map.volume());
        assert_eq!(fused.conditioning, g);
    }

    #[test]
    fn identical_supports_split_evenly() {
        let mut rng = SplitMix64::new(4);
        let v = random_volume(5, 4, 3, &mut rng);
        let m = random_mask(5, 4, &mut rng);
        let map = fusion_module(&v, &m).unwrap();
        let g = map.pooled().unwrap();
        let fused = fuse_supports(&[map.clone(), map], &[g.clone(), g], &[0.3, 0.2, 0.9]).unwrap();
        assert_eq!(fused.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn fusion_linearity_and_simplex() {
        let mut rng = SplitMix64::new(5);
        for k in 1..6 {
            let maps: Vec<ConditioningMap> = (0..k)
                .map(|_| {
                    let v = random_volume(4, 4, 3, &mut rng);
                    let m = random_mask(4, 4, &mut rng);
                    fusion_module(&v, &m).unwrap()
                })
                .collect();
            let globals: Vec<Vec<f64>> = maps.iter().map(|m| m.pooled().unwrap()).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.next_f64()).collect();
            let fused = fuse_supports(&maps, &globals, &q).unwrap();
            assert!(fused.weights.iter().all(|&w| w >= 0.0));
            assert!((fused.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..fused.fused.data().len() {
                let expected: f64 = maps.iter().zip(&fused.weights).map(|(m, w)| w * m.volume().data()[i]).sum();
                assert!((fused.fused.data()[i] - expected).abs() < 1e-12);
            }
            // Positive rescaling of a support global leaves the weights unchanged.
            let mut scaled = globals.clone();
            scaled[0].iter_mut().for_each(|v| *v *= 3.7);
            let again = fuse_supports(&maps, &scaled, &q).unwrap();
            for (a, b) in again.weights.iter().zip(&fused.weights) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_maps_rejected() {
        let mut rng = SplitMix64::new(6);
        let a = fusion_module(&random_volume(4, 4, 3, &mut rng), &BinaryMask::full(4, 4)).unwrap();
        let b = fusion_module(&random_volume(3, 4, 3, &mut rng), &BinaryMask::full(3, 4)).unwrap();
        let g = vec![0.5; 3];
        assert!(matches!(
            fuse_supports(&[a, b], &[g.clone(), g.clone()], &g),
            Err(FewshotError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn support_example_validation() {
        let img = ImageRaster::filled(3, 3, 3, 0.5);
        assert_eq!(
            SupportExample::new(img.clone(), BinaryMask::empty(3, 3)),
            Err(FewshotError::EmptySupportMask)
        );
        assert!(SupportExample::new(img, BinaryMask::full(2, 3)).is_err());
        assert_eq!(SupportSet::new(vec![]), Err(FewshotError::EmptySupport));
    }

    #[test]
    fn zero_head_is_all_background_and_rejected_at_load() {
        let extractor = ExtractorConfig::default();
        let d = extractor.dim(3);
        let head = FewshotHead {
            model: MlpModel::zeros(&[HEAD_BLOCKS * d, 8, 2]).unwrap(),
            input_shift: vec![0.0; d],
            input_scale: vec![1.0; d],
            extractor,
            channels: 3,
        };
        let img = ImageRaster::filled(6, 6, 3, 0.4);
        let support = SupportSet::new(vec![SupportExample::new(img.clone(), BinaryMask::full(6, 6)).unwrap()]).unwrap();
        let seg = segment_query(&head, &support, &img).unwrap();
        assert_eq!(seg.mask.count(), 0);
        assert_eq!(FewshotHead::from_json(&head.to_json()), Err(FewshotError::UntrainedHead));
    }

    #[test]
    fn test_class_as_train_class_is_contract_violation() {
        let img = ImageRaster::filled(4, 4, 3, 0.4);
        let sem = SemanticRaster::filled(4, 4, 0);
        let r = episodic_train(&[(img, sem)], &[0, 1], &[1], &EpisodicConfig::default());
        assert!(matches!(r, Err(FewshotError::Contract(_))));
    }

    #[test]
    fn too_few_images_is_construction_error() {
        let img = ImageRaster::filled(4, 4, 3, 0.4);
        let sem = SemanticRaster::filled(4, 4, 0);
        let r = episodic_train(&[(img, sem)], &[0], &[1], &EpisodicConfig::default());
        assert!(matches!(r, Err(FewshotError::EpisodeConstruction(_))));
    }
}
