//! Raster types shared by every stage of the pipeline, their PGM/PPM
//! serialization, and segmentation metrics.

mod metrics;
pub mod pnm;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{compute_metrics, ConfusionCounts, Metrics};

/// Sentinel for pixels without a ground-truth label.
pub const UNLABELED: u8 = 255;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("truncated input at byte {offset}: {detail}")]
    Truncated { offset: usize, detail: String },
    #[error("label value {value} at pixel {pixel} is neither a palette class nor {UNLABELED}")]
    LabelDomain { value: u8, pixel: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("ground truth has no labeled pixels")]
    EmptyGroundTruth,
    #[error("invalid palette: {0}")]
    Palette(String),
    #[error("invalid raster: {0}")]
    Invalid(String),
}

/// Row-major, channel-interleaved intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::Invalid(format!("{channels} channels (must be 1 or 3)")));
        }
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid("zero-sized raster".into()));
        }
        if data.len() != width * height * channels {
            return Err(RasterError::Invalid(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(RasterError::Invalid(format!("value {} at index {i} outside [0,1]", data[i])));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid fill")
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Decodes a PGM/PPM file with maxval 255; intensities become `v / 255`.
    pub fn load(bytes: &[u8]) -> Result<Self, RasterError> {
        let pnm = pnm::decode(bytes)?;
        let data = pnm.samples.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(pnm.width, pnm.height, pnm.channels, data)
    }

    /// Encodes as P5/P6 with `round(v * 255)`, halves rounded up.
    pub fn save(&self) -> Vec<u8> {
        let samples: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        pnm::encode(self.width, self.height, self.channels, &samples)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_image(bytes: &[u8]) -> Result<ImageRaster, RasterError> {
    ImageRaster::load(bytes)
}

pub fn save_image(raster: &ImageRaster) -> Vec<u8> {
    raster.save()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteClass {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class list; ids are exactly `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PaletteDoc", into = "PaletteDoc")]
pub struct LabelPalette {
    classes: Vec<PaletteClass>,
}

#[derive(Serialize, Deserialize)]
struct PaletteDoc {
    classes: Vec<PaletteClass>,
}

impl TryFrom<PaletteDoc> for LabelPalette {
    type Error = RasterError;
    fn try_from(doc: PaletteDoc) -> Result<Self, Self::Error> {
        LabelPalette::new(doc.classes)
    }
}

impl From<LabelPalette> for PaletteDoc {
    fn from(p: LabelPalette) -> Self {
        PaletteDoc { classes: p.classes }
    }
}

impl LabelPalette {
    pub fn new(classes: Vec<PaletteClass>) -> Result<Self, RasterError> {
        if classes.is_empty() {
            return Err(RasterError::Palette("no classes".into()));
        }
        let mut names = HashSet::new();
        for (i, class) in classes.iter().enumerate() {
            if class.id == UNLABELED {
                return Err(RasterError::Palette(format!("class id {UNLABELED} is reserved")));
            }
            if class.id as usize != i {
                return Err(RasterError::Palette(format!(
                    "class ids must be 0..{} in order; found {} at position {i}",
                    classes.len(),
                    class.id
                )));
            }
            if !names.insert(class.name.as_str()) {
                return Err(RasterError::Palette(format!("duplicate class name '{}'", class.name)));
            }
        }
        Ok(Self { classes })
    }

    pub fn from_names(names: &[(&str, [u8; 3])]) -> Result<Self, RasterError> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, (n, c))| PaletteClass {
                    id: i as u8,
                    name: n.to_string(),
                    color: *c,
                })
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, RasterError> {
        serde_json::from_str(text).map_err(|e| RasterError::Palette(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("palette serializes")
    }

    pub fn classes(&self) -> &[PaletteClass] {
        &self.classes
    }
    pub fn len(&self) -> usize {
        self.classes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.classes.len()
    }
    pub fn name(&self, id: u8) -> Option<&str> {
        self.classes.get(id as usize).map(|c| c.name.as_str())
    }
    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }
    pub fn color(&self, id: u8) -> Option<[u8; 3]> {
        self.classes.get(id as usize).map(|c| c.color)
    }

    /// Appends a class with the next free id.
    pub fn with_class(&self, name: &str, color: [u8; 3]) -> Result<Self, RasterError> {
        let mut classes = self.classes.clone();
        if classes.len() >= UNLABELED as usize {
            return Err(RasterError::Palette("palette is full".into()));
        }
        classes.push(PaletteClass {
            id: classes.len() as u8,
            name: name.to_string(),
            color,
        });
        Self::new(classes)
    }
}

/// Dense class map; every value is a valid palette id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SemanticRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!("data length {} != {width}x{height}", data.len())));
        }
        if let Some(p) = data.iter().position(|&v| v == UNLABELED) {
            return Err(RasterError::LabelDomain { value: UNLABELED, pixel: p });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self::new(width, height, vec![class; width * height]).expect("valid fill")
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        assert_ne!(class, UNLABELED);
        self.data[y * self.width + x] = class;
    }

    pub fn validate(&self, palette: &LabelPalette) -> Result<(), RasterError> {
        match self.data.iter().position(|&v| !palette.contains(v)) {
            Some(p) => Err(RasterError::LabelDomain {
                value: self.data[p],
                pixel: p,
            }),
            None => Ok(()),
        }
    }

    pub fn load(bytes: &[u8], palette: &LabelPalette) -> Result<Self, RasterError> {
        let pnm = decode_gray(bytes)?;
        let raster = Self::new(pnm.width, pnm.height, pnm.samples)?;
        raster.validate(palette)?;
        Ok(raster)
    }

    pub fn save(&self) -> Vec<u8> {
        pnm::encode(self.width, self.height, 1, &self.data)
    }

    /// Fully labeled view for metric computation.
    pub fn to_sparse(&self) -> SparseLabelRaster {
        SparseLabelRaster {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }

    pub fn mask_of(&self, class: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.data.contains(&class)
    }
}

/// Class ids or [`UNLABELED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLabelRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SparseLabelRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!("data length {} != {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn unlabeled(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![UNLABELED; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get_index(&self, i: usize) -> Option<u8> {
        let v = self.data[i];
        (v != UNLABELED).then_some(v)
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_count() as f64 / self.data.len() as f64
    }

    /// Row-major indices of labeled pixels, ascending.
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != UNLABELED)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self, palette: &LabelPalette) -> Result<(), RasterError> {
        match self
            .data
            .iter()
            .position(|&v| v != UNLABELED && !palette.contains(v))
        {
            Some(p) => Err(RasterError::LabelDomain {
                value: self.data[p],
                pixel: p,
            }),
            None => Ok(()),
        }
    }

    /// Keeps only the labels at `keep` (row-major indices).
    pub fn retain_indices(&self, keep: &[usize]) -> Self {
        let mut data = vec![UNLABELED; self.data.len()];
        for &i in keep {
            data[i] = self.data[i];
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn save(&self) -> Vec<u8> {
        pnm::encode(self.width, self.height, 1, &self.data)
    }
}

pub fn load_sparse_labels(bytes: &[u8], palette: &LabelPalette) -> Result<SparseLabelRaster, RasterError> {
    let pnm = decode_gray(bytes)?;
    let raster = SparseLabelRaster::new(pnm.width, pnm.height, pnm.samples)?;
    raster.validate(palette)?;
    Ok(raster)
}

fn decode_gray(bytes: &[u8]) -> Result<pnm::Pnm, RasterError> {
    let pnm = pnm::decode(bytes)?;
    if pnm.channels != 1 {
        return Err(RasterError::Format {
            offset: 0,
            detail: "label rasters must be PGM (P2/P5)".into(),
        });
    }
    Ok(pnm)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::Invalid(format!("data length {} != {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Foreground/background IoU; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// PGM with foreground 255 and background 0.
    pub fn save(&self) -> Vec<u8> {
        let samples: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pnm::encode(self.width, self.height, 1, &samples)
    }

    /// Any nonzero sample is foreground.
    pub fn load(bytes: &[u8]) -> Result<Self, RasterError> {
        let pnm = decode_gray(bytes)?;
        Self::new(pnm.width, pnm.height, pnm.samples.iter().map(|&v| v != 0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loads_plain_endpoints() {
        let r = load_image(b"P2\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(r.channels(), 1);
        assert_eq!(r.data(), &[0.0, 1.0]);
    }

    #[test]
    fn p6_short_payload_is_truncation() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(vec![0u8; 2 * 2 * 3 - 1]);
        assert!(matches!(load_image(&bytes), Err(RasterError::Truncated { .. })));
    }

    #[test]
    fn zero_raster_saves_zero_payload() {
        let r = ImageRaster::filled(3, 2, 1, 0.0);
        let bytes = save_image(&r);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert!(bytes[bytes.len() - 6..].iter().all(|&b| b == 0));
    }

    #[test]
    fn half_rounds_up() {
        let r = ImageRaster::filled(1, 1, 1, 0.5);
        assert_eq!(*save_image(&r).last().unwrap(), 128);
    }

    #[test]
    fn sparse_all_unlabeled() {
        let palette = LabelPalette::from_names(&[("a", [0, 0, 0])]).unwrap();
        let bytes = pnm::encode(4, 4, 1, &[255; 16]);
        let labels = load_sparse_labels(&bytes, &palette).unwrap();
        assert_eq!(labels.labeled_fraction(), 0.0);
    }

    #[test]
    fn sparse_label_domain_error() {
        let palette = LabelPalette::from_names(&[("a", [0, 0, 0]), ("b", [1, 1, 1])]).unwrap();
        let bytes = pnm::encode(3, 1, 1, &[0, 7, 255]);
        assert_eq!(
            load_sparse_labels(&bytes, &palette),
            Err(RasterError::LabelDomain { value: 7, pixel: 1 })
        );
    }

    #[test]
    fn sparse_half_labeled() {
        let palette = LabelPalette::from_names(&[("a", [0, 0, 0])]).unwrap();
        let bytes = pnm::encode(2, 2, 1, &[0, 255, 255, 0]);
        assert_eq!(load_sparse_labels(&bytes, &palette).unwrap().labeled_fraction(), 0.5);
    }

    #[test]
    fn palette_json_round_trip_and_validation() {
        let text = r#"{"classes":[{"id":0,"name":"road","color":[128,128,128]},{"id":1,"name":"grass","color":[0,160,0]}]}"#;
        let p = LabelPalette::from_json(text).unwrap();
        assert_eq!(p.id_of("grass"), Some(1));
        assert_eq!(LabelPalette::from_json(&p.to_json()).unwrap(), p);

        let gap = r#"{"classes":[{"id":0,"name":"a","color":[0,0,0]},{"id":2,"name":"b","color":[0,0,0]}]}"#;
        assert!(LabelPalette::from_json(gap).is_err());
        let dup = r#"{"classes":[{"id":0,"name":"a","color":[0,0,0]},{"id":1,"name":"a","color":[0,0,0]}]}"#;
        assert!(LabelPalette::from_json(dup).is_err());
        let sentinel = r#"{"classes":[{"id":255,"name":"a","color":[0,0,0]}]}"#;
        assert!(LabelPalette::from_json(sentinel).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = BinaryMask::new(3, 1, vec![true, false, true]).unwrap();
        assert_eq!(BinaryMask::load(&m.save()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let channels = if rgb { 3 } else { 1 };
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f64> = (0..w * h * channels).map(|_| rng.below(256) as f64 / 255.0).collect();
            let r = ImageRaster::new(w, h, channels, data).unwrap();
            let back = load_image(&save_image(&r)).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
