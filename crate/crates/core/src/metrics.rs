//! Overlap metrics on thresholded predictions.

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Counts over binary masks (nonzero = foreground).
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    /// Probabilities thresholded at 0.5 against a {0,1} target.
    pub fn from_probs(probs: &[f64], target: &[f64]) -> Result<Self> {
        let p: Vec<bool> = probs.iter().map(|&v| v >= THRESHOLD).collect();
        let g: Vec<bool> = target.iter().map(|&v| v >= THRESHOLD).collect();
        Self::from_masks(&p, &g)
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `TP / (TP + FP + FN)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

/// `(Dice, IoU)` of two binary masks.
pub fn dice_iou(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    let c = Confusion::from_masks(pred, gt)?;
    Ok((c.dice(), c.iou()))
}

/// Running per-image means.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanMetrics {
    pub dice_sum: f64,
    pub iou_sum: f64,
    pub count: usize,
}

impl MeanMetrics {
    pub fn push(&mut self, c: &Confusion) {
        self.dice_sum += c.dice();
        self.iou_sum += c.iou();
        self.count += 1;
    }

    pub fn dice(&self) -> f64 {
        self.dice_sum / self.count.max(1) as f64
    }

    pub fn iou(&self) -> f64 {
        self.iou_sum / self.count.max(1) as f64
    }
}
