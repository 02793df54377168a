use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RasterError, SemanticRaster, SparseLabelRaster, UNLABELED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Every class seen in the prediction or the ground truth on labeled pixels.
    pub per_class_iou: BTreeMap<u8, f64>,
    /// Mean over the classes present in the ground truth.
    pub mean_iou: f64,
}

/// Scores `pred` against `truth`, ignoring unlabeled ground-truth pixels.
pub fn compute_metrics(pred: &SemanticRaster, truth: &SparseLabelRaster) -> Result<Metrics, RasterError> {
    let mut counts = ConfusionCounts::default();
    counts.add(pred, truth)?;
    counts.finish()
}

/// Running per-class counts, for scoring a whole split as one population.
#[derive(Debug, Clone)]
pub struct ConfusionCounts {
    intersection: [usize; 256],
    pred: [usize; 256],
    truth: [usize; 256],
    labeled: usize,
    correct: usize,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        Self {
            intersection: [0; 256],
            pred: [0; 256],
            truth: [0; 256],
            labeled: 0,
            correct: 0,
        }
    }
}

impl ConfusionCounts {
    pub fn add(&mut self, pred: &SemanticRaster, truth: &SparseLabelRaster) -> Result<(), RasterError> {
        if pred.dims() != truth.dims() {
            return Err(RasterError::DimensionMismatch {
                expected: truth.dims(),
                found: pred.dims(),
            });
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == UNLABELED {
                continue;
            }
            self.labeled += 1;
            self.pred[p as usize] += 1;
            self.truth[t as usize] += 1;
            if p == t {
                self.correct += 1;
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics, RasterError> {
        if self.labeled == 0 {
            return Err(RasterError::EmptyGroundTruth);
        }
        let mut per_class_iou = BTreeMap::new();
        let mut present_sum = 0.0;
        let mut present = 0usize;
        for c in 0..UNLABELED as usize {
            let union = self.pred[c] + self.truth[c] - self.intersection[c];
            if union == 0 {
                continue;
            }
            let iou = self.intersection[c] as f64 / union as f64;
            per_class_iou.insert(c as u8, iou);
            if self.truth[c] > 0 {
                present_sum += iou;
                present += 1;
            }
        }
        Ok(Metrics {
            overall_accuracy: self.correct as f64 / self.labeled as f64,
            per_class_iou,
            mean_iou: present_sum / present as f64,
        })
    }
}
