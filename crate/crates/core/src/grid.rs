//! Dense row-major, channel-last containers.
//!
//! Element `(y, x, c)` of a [`Grid`] lives at `(y * width + x) * channels + c`. The same
//! layout is used for images, logits, probability maps and feature maps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Ground-truth sentinel excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Grid { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Grid::from_vec",
                format!("{} values for {height}x{width}x{channels}", data.len()),
            ));
        }
        Ok(Grid { height, width, channels, data })
    }

    /// Builds a grid by evaluating `f(y, x, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Grid { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Channel vector of pixel `p` (flat pixel index `y * width + x`).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.first_non_finite() {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err("Grid::add_scaled", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Per-pixel argmax over channels; ties go to the lowest channel.
    pub fn argmax_channels(&self) -> LabelMap {
        let labels = (0..self.pixels())
            .map(|p| {
                let row = self.pixel(p);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap { height: self.height, width: self.width, labels }
    }

    /// Mirror along the vertical axis (flip columns).
    pub fn mirror_horizontal(&self) -> Grid {
        Grid::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Copy of the window with top-left `(y0, x0)` and size `h x w`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Grid> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(
                "Grid::crop",
                format!("window {h}x{w}+{y0}+{x0} outside {}x{}", self.height, self.width),
            ));
        }
        Ok(Grid::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }
}

fn shape_err(op: &'static str, a: &Grid, b: &Grid) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims()))
}

/// Per-pixel class ids with [`IGNORE_LABEL`] marking unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap { height, width, labels: vec![label; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks every non-IGNORE label is below `num_classes`.
    pub fn validate(&self, num_classes: usize, op: &'static str) -> Result<()> {
        for (pixel, &label) in self.labels.iter().enumerate() {
            if label != IGNORE_LABEL && label as usize >= num_classes {
                return Err(Error::InvalidLabel { op, pixel, label, num_classes });
            }
        }
        Ok(())
    }

    pub fn mirror_horizontal(&self) -> LabelMap {
        let mut labels = Vec::with_capacity(self.labels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                labels.push(self.get(y, x));
            }
        }
        LabelMap { height: self.height, width: self.width, labels }
    }
}

/// Metric depth in meters with a validity mask (`false` = sensor missing).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != height * width {
            return Err(Error::shape(
                "DepthMap::new",
                format!("{} depths / {} mask for {height}x{width}", depth.len(), valid.len()),
            ));
        }
        Ok(DepthMap { height, width, depth, valid })
    }

    /// All pixels valid.
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depth.len()];
        Self::new(height, width, depth, valid)
    }

    /// Marks pixels with `depth <= 0` as invalid.
    pub fn from_raw(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = depth.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Self::new(height, width, depth, valid)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn scaled(&self, factor: f64) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            depth: self.depth.iter().map(|d| d * factor).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn mirror_horizontal(&self) -> DepthMap {
        let mut depth = Vec::with_capacity(self.depth.len());
        let mut valid = Vec::with_capacity(self.valid.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                depth.push(self.depth[y * self.width + x]);
                valid.push(self.valid[y * self.width + x]);
            }
        }
        DepthMap { height: self.height, width: self.width, depth, valid }
    }
}

/// Numerically stable softmax over the channel axis of every pixel.
pub fn softmax_channels(g: &Grid) -> Result<Grid> {
    if g.channels == 0 {
        return Err(Error::Empty { op: "softmax_channels" });
    }
    if let Some(i) = g.first_non_finite() {
        return Err(Error::NonFinite { op: "softmax_channels", index: i / g.channels });
    }
    let mut out = g.clone();
    for p in 0..g.pixels() {
        softmax_in_place(out.pixel_mut(p));
    }
    Ok(out)
}

/// Softmax of one row with max-subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of a per-pixel softmax: given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub fn softmax_backward(probs: &Grid, grad_probs: &Grid) -> Result<Grid> {
    if !probs.same_shape(grad_probs) {
        return Err(shape_err("softmax_backward", probs, grad_probs));
    }
    let mut out = Grid::zeros(probs.height, probs.width, probs.channels);
    for p in 0..probs.pixels() {
        let q = probs.pixel(p);
        let g = grad_probs.pixel(p);
        let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (qi, gi)) in out.pixel_mut(p).iter_mut().zip(q.iter().zip(g)) {
            *o = qi * (gi - dot);
        }
    }
    Ok(out)
}

/// One output coordinate's two source taps along an axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Source coordinate for output index `o` under the half-pixel-centre
/// (align-corners = false) convention, clamped to the input range.
pub fn resize_source_coord(o: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    src.clamp(0.0, (in_len - 1) as f64)
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    (0..out_len)
        .map(|o| {
            let src = resize_source_coord(o, in_len, out_len);
            let lo = math::floor(src) as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Precomputed bilinear resampling operator; it is linear, so the backward pass is
/// the transpose scatter with the same weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 {
            return Err(Error::Empty { op: "bilinear_resize" });
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", format!("output {out_h}x{out_w}")));
        }
        Ok(BilinearPlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        })
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn apply(&self, g: &Grid) -> Result<Grid> {
        if g.height != self.in_h || g.width != self.in_w {
            return Err(Error::shape(
                "bilinear_resize",
                format!("plan for {}x{}, got {:?}", self.in_h, self.in_w, g.dims()),
            ));
        }
        let ch = g.channels;
        let mut out = Grid::zeros(self.out_h, self.out_w, ch);
        for (oy, ty) in self.rows.iter().enumerate() {
            for (ox, tx) in self.cols.iter().enumerate() {
                let taps = [
                    (ty.lo, tx.lo, (1.0 - ty.frac) * (1.0 - tx.frac)),
                    (ty.lo, tx.hi, (1.0 - ty.frac) * tx.frac),
                    (ty.hi, tx.lo, ty.frac * (1.0 - tx.frac)),
                    (ty.hi, tx.hi, ty.frac * tx.frac),
                ];
                let o = (oy * self.out_w + ox) * ch;
                for (sy, sx, w) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    let s = (sy * self.in_w + sx) * ch;
                    for c in 0..ch {
                        out.data[o + c] += w * g.data[s + c];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`BilinearPlan::apply`]: maps an output-space gradient back to the input.
    pub fn backward(&self, grad_out: &Grid) -> Result<Grid> {
        if grad_out.height != self.out_h || grad_out.width != self.out_w {
            return Err(Error::shape(
                "bilinear_resize backward",
                format!("plan output {}x{}, got {:?}", self.out_h, self.out_w, grad_out.dims()),
            ));
        }
        let ch = grad_out.channels;
        let mut out = Grid::zeros(self.in_h, self.in_w, ch);
        for (oy, ty) in self.rows.iter().enumerate() {
            for (ox, tx) in self.cols.iter().enumerate() {
                let taps = [
                    (ty.lo, tx.lo, (1.0 - ty.frac) * (1.0 - tx.frac)),
                    (ty.lo, tx.hi, (1.0 - ty.frac) * tx.frac),
                    (ty.hi, tx.lo, ty.frac * (1.0 - tx.frac)),
                    (ty.hi, tx.hi, ty.frac * tx.frac),
                ];
                let o = (oy * self.out_w + ox) * ch;
                for (sy, sx, w) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    let s = (sy * self.in_w + sx) * ch;
                    for c in 0..ch {
                        out.data[s + c] += w * grad_out.data[o + c];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear resize with half-pixel centres (align-corners = false) and edge clamping.
pub fn bilinear_resize(g: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if g.height == out_h && g.width == out_w && !g.is_empty() {
        return Ok(g.clone());
    }
    BilinearPlan::new(g.height, g.width, out_h, out_w)?.apply(g)
}

/// Stacks grids along the channel axis.
pub fn channel_concat(gs: &[Grid]) -> Result<Grid> {
    let first = gs.first().ok_or(Error::Empty { op: "channel_concat" })?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = gs.iter().find(|g| g.height != h || g.width != w) {
        return Err(shape_err("channel_concat", first, bad));
    }
    let total: usize = gs.iter().map(|g| g.channels).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for p in 0..h * w {
        for g in gs {
            data.extend_from_slice(g.pixel(p));
        }
    }
    Ok(Grid { height: h, width: w, channels: total, data })
}

/// Splits a grid along channels into pieces of the given widths (inverse of concat).
pub fn channel_split(g: &Grid, widths: &[usize]) -> Result<Vec<Grid>> {
    if widths.iter().sum::<usize>() != g.channels {
        return Err(Error::shape(
            "channel_split",
            format!("widths {widths:?} for {} channels", g.channels),
        ));
    }
    let mut out: Vec<Grid> = widths.iter().map(|&c| Grid::zeros(g.height, g.width, c)).collect();
    for p in 0..g.pixels() {
        let row = g.pixel(p);
        let mut off = 0;
        for piece in out.iter_mut() {
            let c = piece.channels;
            piece.pixel_mut(p).copy_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    Ok(out)
}

/// Elementwise sum of equally shaped grids.
pub fn channel_sum(gs: &[Grid]) -> Result<Grid> {
    let first = gs.first().ok_or(Error::Empty { op: "channel_sum" })?;
    let mut out = first.clone();
    for g in &gs[1..] {
        if !g.same_shape(first) {
            return Err(shape_err("channel_sum", first, g));
        }
        for (a, b) in out.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }
    Ok(out)
}
