//! Semantic and depth losses, their joint objective, and depth decoding.
//!
//! Depth is predicted as a softmax over `N_d` bins of length `l`; the continuous depth
//! is the expectation `d = sum_b b * l * p(b)`. It is trained only through the
//! scale-invariant log loss on that expectation, never with a classification loss on
//! the bins.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{self, DepthMap, Grid, LabelMap, IGNORE_LABEL};
use crate::math;

/// Tolerance on probability rows handed to [`depth_expectation`].
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DepthBinning {
    pub num_bins: usize,
    /// Bin length in meters.
    pub bin_length: f64,
}

impl DepthBinning {
    pub fn new(num_bins: usize, bin_length: f64) -> Result<Self> {
        let b = DepthBinning { num_bins, bin_length };
        b.validate()?;
        Ok(b)
    }

    /// 50 bins of 0.14 m.
    pub fn full() -> Self {
        DepthBinning { num_bins: 50, bin_length: 0.14 }
    }

    /// 10 bins of 0.7 m; same 7 m ceiling as [`DepthBinning::full`].
    pub fn desk() -> Self {
        DepthBinning { num_bins: 10, bin_length: 0.7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::config("depth binning needs at least 2 bins"));
        }
        if !(self.bin_length > 0.0 && self.bin_length.is_finite()) {
            return Err(Error::config("bin length must be positive"));
        }
        Ok(())
    }

    /// Depth represented by bin `b` (1-based), i.e. `b * l`.
    #[inline]
    pub fn bin_value(&self, b: usize) -> f64 {
        b as f64 * self.bin_length
    }

    /// Deepest representable depth `N_d * l`; ground truth is clipped here.
    pub fn ceiling(&self) -> f64 {
        self.bin_value(self.num_bins)
    }

    pub fn floor(&self) -> f64 {
        self.bin_value(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct JointLossConfig {
    /// Weight on the semantic term.
    pub lambda: f64,
}

impl JointLossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(JointLossConfig { lambda })
    }

    pub fn full() -> Self {
        JointLossConfig { lambda: 1e-6 }
    }
}

/// `lambda * l_sem + l_depth`.
pub fn joint_loss(l_sem: f64, l_depth: f64, cfg: JointLossConfig) -> f64 {
    cfg.lambda * l_sem + l_depth
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLoss {
    /// Accumulated negative log-likelihood over counted pixels.
    pub sum: f64,
    /// `sum / count` (0 when nothing is counted).
    pub mean: f64,
    /// Number of non-IGNORE pixels.
    pub count: usize,
    /// Gradient of `sum` with respect to the logits: `softmax - onehot`, zero at IGNORE.
    pub grad: Grid,
}

/// Per-pixel multinomial logistic loss, accumulated over labelled pixels.
pub fn semantic_loss(seg_logits: &Grid, truth: &LabelMap) -> Result<SemanticLoss> {
    let c = seg_logits.channels();
    if seg_logits.height() != truth.height || seg_logits.width() != truth.width {
        return Err(Error::shape(
            "semantic_loss",
            format!("logits {:?} vs labels {}x{}", seg_logits.dims(), truth.height, truth.width),
        ));
    }
    truth.validate(c, "semantic_loss")?;
    let probs = grid::softmax_channels(seg_logits)?;
    let mut grad = Grid::zeros(seg_logits.height(), seg_logits.width(), c);
    let mut sum = 0.0;
    let mut count = 0;
    for (p, &label) in truth.labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let z = seg_logits.pixel(p);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(z.iter().map(|&v| math::exp(v - max)).sum::<f64>());
        sum += lse - z[label as usize];
        count += 1;
        let g = grad.pixel_mut(p);
        g.copy_from_slice(probs.pixel(p));
        g[label as usize] -= 1.0;
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    Ok(SemanticLoss { sum, mean, count, grad })
}

/// Negative log-likelihood of already-normalized class probabilities, with the
/// gradient with respect to those probabilities (`-1/q` at the true class).
pub fn nll_from_probs(probs: &Grid, truth: &LabelMap) -> Result<(f64, Grid)> {
    if probs.height() != truth.height || probs.width() != truth.width {
        return Err(Error::shape(
            "nll_from_probs",
            format!("probs {:?} vs labels {}x{}", probs.dims(), truth.height, truth.width),
        ));
    }
    truth.validate(probs.channels(), "nll_from_probs")?;
    let mut grad = Grid::zeros(probs.height(), probs.width(), probs.channels());
    let mut loss = 0.0;
    for (p, &label) in truth.labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let q = probs.pixel(p)[label as usize].max(f64::MIN_POSITIVE);
        loss -= math::ln(q);
        grad.pixel_mut(p)[label as usize] = -1.0 / q;
    }
    Ok((loss, grad))
}

/// Expected depth under per-pixel bin probabilities. Every output pixel is valid.
pub fn depth_expectation(depth_probs: &Grid, binning: &DepthBinning) -> Result<DepthMap> {
    binning.validate()?;
    if depth_probs.channels() != binning.num_bins {
        return Err(Error::shape(
            "depth_expectation",
            format!("{} channels for {} bins", depth_probs.channels(), binning.num_bins),
        ));
    }
    let mut depth = Vec::with_capacity(depth_probs.pixels());
    for p in 0..depth_probs.pixels() {
        let row = depth_probs.pixel(p);
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= PROB_SUM_TOL) || row.iter().any(|&v| v < 0.0) {
            return Err(Error::NotNormalized { op: "depth_expectation", pixel: p, sum });
        }
        depth.push(row.iter().enumerate().map(|(b, &q)| binning.bin_value(b + 1) * q).sum());
    }
    DepthMap::dense(depth_probs.height(), depth_probs.width(), depth)
}

/// Softmax over bins followed by [`depth_expectation`].
pub fn decode_depth(depth_logits: &Grid, binning: &DepthBinning) -> Result<(Grid, DepthMap)> {
    let probs = grid::softmax_channels(depth_logits)?;
    let depth = depth_expectation(&probs, binning)?;
    Ok((probs, depth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleInvariantLoss {
    pub loss: f64,
    /// `dL/dlog(d_i)` per pixel; zero outside the joint validity mask.
    pub grad_log_d: Vec<f64>,
    /// Number of jointly valid pixels.
    pub n: usize,
}

fn log_residuals(d: &DepthMap, d_star: &DepthMap, op: &'static str) -> Result<Vec<Option<f64>>> {
    if d.height != d_star.height || d.width != d_star.width {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", d.height, d.width, d_star.height, d_star.width),
        ));
    }
    let mut g = Vec::with_capacity(d.pixels());
    for p in 0..d.pixels() {
        if !(d.valid[p] && d_star.valid[p]) {
            g.push(None);
            continue;
        }
        for value in [d.depth[p], d_star.depth[p]] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidDepth { op, pixel: p, value });
            }
        }
        g.push(Some(math::ln(d.depth[p]) - math::ln(d_star.depth[p])));
    }
    Ok(g)
}

/// Scale-invariant log loss `(1/n^2) sum_{i,j} ((log d_i - log d_j) - (log d*_i - log d*_j))^2`
/// over ordered pairs of jointly valid pixels, evaluated in O(n) as
/// `(2/n) sum_i (g_i - mean(g))^2` with `g_i = log d_i - log d*_i`.
pub fn scale_invariant_loss(d: &DepthMap, d_star: &DepthMap) -> Result<ScaleInvariantLoss> {
    let g = log_residuals(d, d_star, "scale_invariant_loss")?;
    let n = g.iter().flatten().count();
    if n < 2 {
        return Err(Error::Empty { op: "scale_invariant_loss" });
    }
    let nf = n as f64;
    let mean = g.iter().flatten().sum::<f64>() / nf;
    let loss = 2.0 * g.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let grad_log_d = g
        .iter()
        .map(|v| match v {
            Some(v) => 4.0 / nf * (v - mean),
            None => 0.0,
        })
        .collect();
    Ok(ScaleInvariantLoss { loss, grad_log_d, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub loss: f64,
    /// Gradient of the loss with respect to the depth-bin logits.
    pub grad: Grid,
    /// Decoded depth the loss was evaluated on.
    pub depth: DepthMap,
}

/// Scale-invariant loss of the decoded depth and its gradient on the bin logits,
/// chained through softmax, expectation and log.
pub fn depth_loss_backward(
    depth_logits: &Grid,
    d_star: &DepthMap,
    binning: &DepthBinning,
) -> Result<DepthLoss> {
    let (probs, depth) = decode_depth(depth_logits, binning)?;
    let si = scale_invariant_loss(&depth, d_star)?;
    let mut grad = Grid::zeros(depth_logits.height(), depth_logits.width(), depth_logits.channels());
    for p in 0..depth.pixels() {
        let g_log = si.grad_log_d[p];
        if g_log == 0.0 {
            continue;
        }
        let d = depth.depth[p];
        let s = g_log / d;
        let q = probs.pixel(p);
        for (b, (out, &qb)) in grad.pixel_mut(p).iter_mut().zip(q).enumerate() {
            *out = s * qb * (binning.bin_value(b + 1) - d);
        }
    }
    Ok(DepthLoss { loss: si.loss, grad, depth })
}

/// Zero-filled helper for callers that skip a task.
pub fn zero_grad_like(g: &Grid) -> Grid {
    Grid::zeros(g.height(), g.width(), g.channels())
}

/// Brute-force pair sum of the scale-invariant loss (quadratic in `n`).
pub fn scale_invariant_loss_pairwise(d: &DepthMap, d_star: &DepthMap) -> Result<f64> {
    let g: Vec<f64> = log_residuals(d, d_star, "scale_invariant_loss_pairwise")?
        .into_iter()
        .flatten()
        .collect();
    if g.len() < 2 {
        return Err(Error::Empty { op: "scale_invariant_loss_pairwise" });
    }
    let n = g.len() as f64;
    let mut acc = 0.0;
    for gi in &g {
        for gj in &g {
            acc += (gi - gj) * (gi - gj);
        }
    }
    Ok(acc / (n * n))
}

/// Convenience for tests and CLI: a one-hot bin-probability grid.
pub fn one_hot_bins(h: usize, w: usize, binning: &DepthBinning, bin: usize) -> Grid {
    let mut g = Grid::zeros(h, w, binning.num_bins);
    for p in 0..h * w {
        g.pixel_mut(p)[bin - 1] = 1.0;
    }
    g
}
