//! Evaluation of a global model against clean ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccl::{label_components, Connectivity};
use crate::grid::{Grid, Mask};
use crate::model::{ModelParams, SegNet};
use crate::synth::LabeledVolume;

/// Probabilities strictly above this are foreground.
pub const PREDICTION_THRESHOLD: f64 = 0.5;

/// `2|P∧G| / (|P|+|G|)`, with empty-empty scored as 1.
pub fn dice_coeff(pred: &Mask, gt: &Mask) -> f64 {
    let (inter, p, g) = overlap(pred, gt);
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// `|P∧G| / |P∨G|`, with empty-empty scored as 1.
pub fn iou(pred: &Mask, gt: &Mask) -> f64 {
    let (inter, p, g) = overlap(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub(crate) fn overlap_raw(pred: &[u8], gt: &[u8]) -> (usize, usize, usize) {
    assert_eq!(pred.len(), gt.len(), "mask size mismatch");
    pred.iter().zip(gt).fold((0, 0, 0), |(i, p, g), (&a, &b)| {
        let (a, b) = (a != 0, b != 0);
        (i + usize::from(a && b), p + usize::from(a), g + usize::from(b))
    })
}

fn overlap(pred: &Mask, gt: &Mask) -> (usize, usize, usize) {
    assert_eq!(pred.dims(), gt.dims(), "mask shape mismatch");
    overlap_raw(pred.as_slice(), gt.as_slice())
}

/// Fraction of ground-truth components touched by at least one predicted
/// voxel. An empty ground truth scores 1.
pub fn lesion_recall(pred: &Mask, gt: &Mask, connectivity: Connectivity) -> f64 {
    assert_eq!(pred.dims(), gt.dims(), "mask shape mismatch");
    let map = label_components(gt, connectivity);
    if map.count == 0 {
        return 1.0;
    }
    let mut hit = vec![false; map.count + 1];
    for (&label, &p) in map.labels.as_slice().iter().zip(pred.as_slice()) {
        if label != 0 && p != 0 {
            hit[label as usize] = true;
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / map.count as f64
}

pub fn binarize(prob: &[f64]) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p > PREDICTION_THRESHOLD)).collect()
}

/// Thresholded prediction for a whole volume, slice by slice.
pub fn predict_volume(net: &SegNet, params: &ModelParams, image: &Grid<f32>) -> Mask {
    let dims = image.dims();
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.depth {
        out.extend(binarize(&net.forward_raw(params, image.slice(z))));
    }
    Grid::from_vec(dims, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub per_volume: Vec<VolumeMetrics>,
}

pub fn volume_metrics(pred: &Mask, gt: &Mask) -> VolumeMetrics {
    let (intersection, predicted, truth) = overlap(pred, gt);
    VolumeMetrics {
        dice: dice_coeff(pred, gt),
        iou: iou(pred, gt),
        recall: lesion_recall(pred, gt, Connectivity::Face),
        intersection,
        predicted,
        truth,
    }
}

/// Scores `params` on the test volumes. Averages are per volume unless
/// `pooled`, in which case Dice and IoU come from summed voxel counts.
pub fn evaluate(net: &SegNet, params: &ModelParams, test_set: &[LabeledVolume], pooled: bool) -> EvalReport {
    let per_volume: Vec<VolumeMetrics> = test_set
        .par_iter()
        .map(|v| volume_metrics(&predict_volume(net, params, &v.image), &v.gt_mask))
        .collect();
    let n = per_volume.len().max(1) as f64;
    let recall = per_volume.iter().map(|m| m.recall).sum::<f64>() / n;
    let (dice, iou) = if pooled {
        let (i, p, t) = per_volume.iter().fold((0, 0, 0), |(i, p, t), m| {
            (i + m.intersection, p + m.predicted, t + m.truth)
        });
        if p + t == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * i as f64 / (p + t) as f64, i as f64 / (p + t - i) as f64)
        }
    } else {
        (
            per_volume.iter().map(|m| m.dice).sum::<f64>() / n,
            per_volume.iter().map(|m| m.iou).sum::<f64>() / n,
        )
    };
    EvalReport {
        dice,
        iou,
        recall,
        per_volume,
    }
}
