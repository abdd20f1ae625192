//! Samples, ground-truth depth preprocessing, augmentation and a synthetic
//! block-world scene generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::grid::{self, DepthMap, Grid, LabelMap};
use crate::losses::DepthBinning;
use crate::math;
use crate::rng;

/// RGB image (0..=255), per-pixel labels and depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Grid,
    pub labels: LabelMap,
    pub depth: DepthMap,
}

impl Sample {
    pub fn new(image: Grid, labels: LabelMap, depth: DepthMap) -> Result<Self> {
        let s = Sample { image, labels, depth };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dims();
        if c != 3 {
            return Err(Error::shape("Sample", format!("image has {c} channels")));
        }
        if (self.labels.height, self.labels.width) != (h, w)
            || (self.depth.height, self.depth.width) != (h, w)
        {
            return Err(Error::shape(
                "Sample",
                format!(
                    "image {h}x{w}, labels {}x{}, depth {}x{}",
                    self.labels.height, self.labels.width, self.depth.height, self.depth.width
                ),
            ));
        }
        self.image.check_finite("Sample")
    }

    pub fn mirror_horizontal(&self) -> Sample {
        Sample {
            image: self.image.mirror_horizontal(),
            labels: self.labels.mirror_horizontal(),
            depth: self.depth.mirror_horizontal(),
        }
    }
}

/// Network input: `x / 255 - 0.5` per channel.
pub fn normalize_image(image: &Grid) -> Grid {
    let mut g = image.clone();
    g.data_mut().iter_mut().for_each(|v| *v = *v / 255.0 - 0.5);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

/// Clips valid depths to `[l, N_d * l]` and rounds them to the nearest multiple of
/// `l`. Invalid pixels are left untouched.
pub fn preprocess_depth(d: &DepthMap, binning: &DepthBinning) -> Result<DepthMap> {
    binning.validate()?;
    let mut out = d.clone();
    for (v, &ok) in out.depth.iter_mut().zip(&d.valid) {
        if ok {
            *v = binning.bin_value(nearest_bin(*v, binning));
        }
    }
    Ok(out)
}

/// 1-based bin whose value `b * l` is nearest to `v`, clamped to `1..=N_d`.
pub fn nearest_bin(v: f64, binning: &DepthBinning) -> usize {
    let b = math::round(v / binning.bin_length);
    if !(b >= 1.0) {
        1
    } else if b >= binning.num_bins as f64 {
        binning.num_bins
    } else {
        b as usize
    }
}

/// Preprocesses the depth of a training sample. Evaluation samples keep their raw
/// depth, so asking for one is an error.
pub fn prepare_training_sample(s: &Sample, split: Split, binning: &DepthBinning) -> Result<Sample> {
    if split != Split::Train {
        return Err(Error::config("evaluation depths are never preprocessed"));
    }
    Ok(Sample { depth: preprocess_depth(&s.depth, binning)?, ..s.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AugmentConfig {
    pub num_crops: usize,
    /// Crop side is the image side divided by a factor drawn from this range.
    pub min_zoom: f64,
    pub max_zoom: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { num_crops: 4, min_zoom: 1.0, max_zoom: 1.5 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_zoom >= 1.0 && self.max_zoom >= self.min_zoom && self.max_zoom.is_finite()) {
            return Err(Error::config(format!(
                "zoom range [{}, {}] must satisfy 1 <= min <= max",
                self.min_zoom, self.max_zoom
            )));
        }
        Ok(())
    }
}

fn nearest_source(o: usize, in_len: usize, out_len: usize) -> usize {
    let s = math::floor((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize;
    s.min(in_len - 1)
}

/// Crops `(y0, x0, h, w)` and resizes back to the sample size: bilinear for the
/// image, nearest for labels and depth. Depth is divided by the zoom factor
/// (geometric mean of the two axes), as objects that look larger are closer.
pub fn crop_resize(s: &Sample, y0: usize, x0: usize, h: usize, w: usize) -> Result<Sample> {
    let (out_h, out_w) = (s.height(), s.width());
    if h == 0 || w == 0 || y0 + h > out_h || x0 + w > out_w {
        return Err(Error::shape(
            "crop_resize",
            format!("crop ({y0},{x0}) {h}x{w} outside {out_h}x{out_w}"),
        ));
    }
    let image = grid::bilinear_resize(&s.image.crop(y0, x0, h, w)?, out_h, out_w)?;
    let zoom = math::sqrt((out_h as f64 / h as f64) * (out_w as f64 / w as f64));
    let n = out_h * out_w;
    let mut labels = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for oy in 0..out_h {
        let sy = y0 + nearest_source(oy, h, out_h);
        for ox in 0..out_w {
            let sx = x0 + nearest_source(ox, w, out_w);
            let p = sy * out_w + sx;
            labels.push(s.labels.labels[p]);
            valid.push(s.depth.valid[p]);
            depth.push(if s.depth.valid[p] { s.depth.depth[p] / zoom } else { s.depth.depth[p] });
        }
    }
    Sample::new(image, LabelMap::new(out_h, out_w, labels)?, DepthMap::new(out_h, out_w, depth, valid)?)
}

/// Original, horizontal mirror, then `num_crops` random zoomed crops.
pub fn augment(s: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    s.validate()?;
    let mut r = rng::seeded(seed);
    let mut out = vec![s.clone(), s.mirror_horizontal()];
    let (h, w) = (s.height(), s.width());
    for _ in 0..cfg.num_crops {
        let zoom = rng::uniform(&mut r, cfg.min_zoom, cfg.max_zoom);
        let ch = (math::round(h as f64 / zoom) as usize).clamp(1, h);
        let cw = (math::round(w as f64 / zoom) as usize).clamp(1, w);
        let y0 = rng::index(&mut r, 0, h - ch + 1);
        let x0 = rng::index(&mut r, 0, w - cw + 1);
        out.push(crop_resize(s, y0, x0, ch, cw)?);
    }
    Ok(out)
}

/// Augments every sample and shuffles the result once.
pub fn augment_dataset(samples: &[Sample], cfg: &AugmentConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * (2 + cfg.num_crops));
    for (i, s) in samples.iter().enumerate() {
        out.extend(augment(s, cfg, seed.wrapping_add(i as u64 + 1))?);
    }
    out.shuffle(&mut rng::seeded(seed));
    Ok(out)
}

/// How rectangle depths are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case", deny_unknown_fields))]
pub enum DepthLayout {
    /// Stratified draws over the whole depth range, independent of class.
    Random,
    /// Each class owns an equal slice of the depth range; a rectangle sits at its
    /// class's slice centre plus uniform jitter in `[-jitter, jitter]`.
    ClassBanded { jitter: f64 },
}

/// Block-world scene: axis-aligned rectangles of palette classes at distinct depths
/// in front of a background plane (class 0).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_rectangles: usize,
    /// Color of each class; class 0 is the background.
    pub palette: Vec<[u8; 3]>,
    /// Rectangle depths are drawn from this range, in meters.
    pub depth_range: (f64, f64),
    pub depth_layout: DepthLayout,
    pub background_depth: f64,
    /// Standard deviation of per-pixel Gaussian color noise.
    pub noise: f64,
    /// Rectangle side lengths are drawn from this range, in pixels.
    pub size_range: (usize, usize),
}

impl SceneSpec {
    /// 33x33 scene with four classes; class depth bands are centred on 0.7 m bin values.
    pub fn desk(seed: u64) -> Self {
        SceneSpec {
            seed,
            height: 33,
            width: 33,
            num_rectangles: 3,
            palette: vec![[90, 90, 90], [200, 40, 40], [40, 180, 60], [50, 70, 210]],
            depth_range: (0.7, 4.9),
            depth_layout: DepthLayout::ClassBanded { jitter: 0.15 },
            background_depth: 6.3,
            noise: 6.0,
            size_range: (8, 20),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d0, d1) = self.depth_range;
        let (s0, s1) = self.size_range;
        let checks = [
            (self.height > 0 && self.width > 0, "image must be non-empty"),
            (!self.palette.is_empty() && self.palette.len() <= 255, "palette needs 1..=255 classes"),
            (self.num_rectangles == 0 || self.palette.len() >= 2, "rectangles need a non-background class"),
            (d0 > 0.0 && d1 > d0 && d1.is_finite(), "depth range must be positive and increasing"),
            (self.background_depth > d1 && self.background_depth.is_finite(), "background must lie behind every rectangle"),
            (self.noise >= 0.0 && self.noise.is_finite(), "noise must be non-negative"),
            (self.jitter_ok(), "class-banded jitter must be positive and stay inside the class slice"),
            (s0 >= 1 && s1 >= s0 && s1 <= self.height.min(self.width), "rectangle sizes must fit the image"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }

    fn jitter_ok(&self) -> bool {
        match self.depth_layout {
            DepthLayout::Random => true,
            DepthLayout::ClassBanded { jitter } => {
                let classes = self.palette.len().saturating_sub(1).max(1) as f64;
                let half_slice = (self.depth_range.1 - self.depth_range.0) / classes / 2.0;
                jitter > 0.0 && jitter < half_slice
            }
        }
    }
}

/// One rectangle of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedRect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub class: u8,
    pub depth: f64,
}

impl PlacedRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.height).contains(&y) && (self.x0..self.x0 + self.width).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sample: Sample,
    /// Far to near, in painting order.
    pub rects: Vec<PlacedRect>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let (d0, d1) = spec.depth_range;
    // Stratified draws keep rectangle depths distinct.
    let slot = (d1 - d0) / spec.num_rectangles.max(1) as f64;
    let mut depths: Vec<f64> = (0..spec.num_rectangles)
        .map(|k| d0 + slot * (k as f64 + rng::uniform(&mut r, 0.1, 0.9)))
        .collect();
    depths.shuffle(&mut r);
    let band = (d1 - d0) / (spec.palette.len().saturating_sub(1).max(1)) as f64;
    let mut rects: Vec<PlacedRect> = depths
        .into_iter()
        .map(|depth| {
            let rh = rng::index(&mut r, spec.size_range.0, spec.size_range.1 + 1);
            let rw = rng::index(&mut r, spec.size_range.0, spec.size_range.1 + 1);
            let class = rng::index(&mut r, 1, spec.palette.len());
            let depth = match spec.depth_layout {
                DepthLayout::Random => depth,
                DepthLayout::ClassBanded { jitter } => {
                    d0 + band * (class as f64 - 0.5) + rng::uniform(&mut r, -jitter, jitter)
                }
            };
            PlacedRect {
                y0: rng::index(&mut r, 0, h - rh + 1),
                x0: rng::index(&mut r, 0, w - rw + 1),
                height: rh,
                width: rw,
                class: class as u8,
                depth,
            }
        })
        .collect();
    rects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut labels = vec![0u8; h * w];
    let mut depth = vec![spec.background_depth; h * w];
    for rect in &rects {
        for y in rect.y0..rect.y0 + rect.height {
            for x in rect.x0..rect.x0 + rect.width {
                labels[y * w + x] = rect.class;
                depth[y * w + x] = rect.depth;
            }
        }
    }
    let mut image = Grid::zeros(h, w, 3);
    for (p, &l) in labels.iter().enumerate() {
        let color = spec.palette[l as usize];
        for (c, v) in image.pixel_mut(p).iter_mut().enumerate() {
            let noise = if spec.noise > 0.0 { spec.noise * rng::normal(&mut r) } else { 0.0 };
            *v = math::round(color[c] as f64 + noise).clamp(0.0, 255.0);
        }
    }
    let sample = Sample::new(image, LabelMap::new(h, w, labels)?, DepthMap::dense(h, w, depth)?)?;
    Ok(Scene { sample, rects })
}
