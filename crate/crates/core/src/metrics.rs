//! Depth error metrics and confusion-matrix segmentation metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{DepthMap, LabelMap, IGNORE_LABEL};
use crate::math;

pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DepthReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub sqr_rel: f64,
    pub rmse_lin: f64,
    pub rmse_log: f64,
    pub rmse_silog: f64,
    /// Jointly valid pixels the report covers.
    pub count: usize,
}

impl DepthReport {
    pub const LABELS: [&'static str; 8] = [
        "threshold δ < 1.25",
        "threshold δ < 1.25^2",
        "threshold δ < 1.25^3",
        "abs relative distance",
        "sqr relative distance",
        "RMSE (linear)",
        "RMSE (log)",
        "RMSE (log. scale invariant)",
    ];

    /// Rows in table order, paired with [`DepthReport::LABELS`].
    pub fn values(&self) -> [f64; 8] {
        [
            self.delta1,
            self.delta2,
            self.delta3,
            self.abs_rel,
            self.sqr_rel,
            self.rmse_lin,
            self.rmse_log,
            self.rmse_silog,
        ]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::LABELS.into_iter().zip(self.values())
    }
}

/// Depth metrics over pixels valid in both maps.
pub fn eval_depth(d: &DepthMap, d_star: &DepthMap) -> Result<DepthReport> {
    if (d.height, d.width) != (d_star.height, d_star.width) {
        return Err(Error::shape(
            "eval_depth",
            format!("{}x{} vs {}x{}", d.height, d.width, d_star.height, d_star.width),
        ));
    }
    let mut n = 0usize;
    let (mut hits, mut abs_rel, mut sqr_rel, mut lin2, mut log2, mut gsum) =
        ([0usize; 3], 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut logs = Vec::new();
    for p in 0..d.pixels() {
        if !(d.valid[p] && d_star.valid[p]) {
            continue;
        }
        let (a, b) = (d.depth[p], d_star.depth[p]);
        for v in [a, b] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidDepth { op: "eval_depth", pixel: p, value: v });
            }
        }
        n += 1;
        let ratio = (a / b).max(b / a);
        let mut t = DELTA_BASE;
        for h in &mut hits {
            if ratio < t {
                *h += 1;
            }
            t *= DELTA_BASE;
        }
        let diff = a - b;
        abs_rel += diff.abs() / b;
        sqr_rel += diff * diff / b;
        lin2 += diff * diff;
        let g = math::ln(a) - math::ln(b);
        log2 += g * g;
        gsum += g;
        logs.push(g);
    }
    if n == 0 {
        return Err(Error::Empty { op: "eval_depth" });
    }
    let t = n as f64;
    let mean = gsum / t;
    let si2 = logs.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / t;
    Ok(DepthReport {
        delta1: hits[0] as f64 / t,
        delta2: hits[1] as f64 / t,
        delta3: hits[2] as f64 / t,
        abs_rel: abs_rel / t,
        sqr_rel: sqr_rel / t,
        rmse_lin: math::sqrt(lin2 / t),
        rmse_log: math::sqrt(log2 / t),
        rmse_silog: math::sqrt(si2),
        count: n,
    })
}

/// `C x C` counts, `counts[truth * C + pred]`, ignore pixels skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::shape(
                "eval_seg",
                format!("{}x{} vs {}x{}", pred.height, pred.width, truth.height, truth.width),
            ));
        }
        let c = self.num_classes;
        for (p, (&a, &t)) in pred.labels.iter().zip(&truth.labels).enumerate() {
            if t == IGNORE_LABEL {
                continue;
            }
            for l in [a, t] {
                if l as usize >= c {
                    return Err(Error::InvalidLabel { op: "eval_seg", pixel: p, label: l, num_classes: c });
                }
            }
            self.counts[t as usize * c + a as usize] += 1;
        }
        Ok(())
    }

    fn truth_total(&self, k: usize) -> u64 {
        self.counts[k * self.num_classes..(k + 1) * self.num_classes].iter().sum()
    }

    fn pred_total(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|t| self.counts[t * self.num_classes + k]).sum()
    }

    pub fn report(&self) -> Result<SegReport> {
        let c = self.num_classes;
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty { op: "eval_seg" });
        }
        let mut per_class_iou = vec![None; c];
        let mut per_class_accuracy = vec![None; c];
        let mut correct = 0;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            correct += tp;
            let (t, p) = (self.truth_total(k), self.pred_total(k));
            let union = t + p - tp;
            if union > 0 {
                per_class_iou[k] = Some(tp as f64 / union as f64);
            }
            if t > 0 {
                per_class_accuracy[k] = Some(tp as f64 / t as f64);
            }
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(SegReport {
            mean_iou: mean(&per_class_iou),
            mean_accuracy: mean(&per_class_accuracy),
            pixel_accuracy: correct as f64 / total as f64,
            per_class_iou,
            per_class_accuracy,
            count: total,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` for classes absent from truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU.
    pub mean_iou: f64,
    /// Mean over classes present in truth.
    pub mean_accuracy: f64,
    pub pixel_accuracy: f64,
    /// Non-ignored pixels the report covers.
    pub count: u64,
}

impl SegReport {
    pub const LABELS: [&'static str; 3] = ["Mean IoU", "Mean Accuracy", "Pixel Accuracy"];

    pub fn values(&self) -> [f64; 3] {
        [self.mean_iou, self.mean_accuracy, self.pixel_accuracy]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::LABELS.into_iter().zip(self.values())
    }
}

pub fn eval_seg(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<SegReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, truth)?;
    cm.report()
}
