//! Dataset directories.
//!
//! ```text
//! <dir>/images/<id>.png   8-bit RGB
//! <dir>/labels/<id>.png   8-bit class ids (palette PNG), 255 = ignore
//! <dir>/depths/<id>.png   16-bit depth in millimeters, 0 = invalid
//! <dir>/manifest.csv      id,split  (split is train or test)
//! ```
//!
//! Label PNGs are written as indexed images whose indices are the class ids and
//! whose palette is [`palette`], so they are both exact and viewable. Plain 8-bit
//! grayscale label files are accepted on read.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use jointseg_core::data::{Sample, Split};
use jointseg_core::{DepthMap, Grid, LabelMap, IGNORE_LABEL};
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";
pub const DEPTHS: &str = "depths";
pub const MANIFEST: &str = "manifest.csv";

/// Largest depth a 16-bit millimeter PNG can hold.
pub const MAX_DEPTH_M: f64 = 65.535;

/// Color of each label index: the bit-interleaved colormap used by the common
/// segmentation benchmarks, with 255 (ignore) drawn white.
pub fn palette() -> [[u8; 3]; 256] {
    let mut p = [[0u8; 3]; 256];
    for (k, c) in p.iter_mut().enumerate() {
        let mut id = k;
        for shift in (0..8).rev() {
            for (ch, v) in c.iter_mut().enumerate() {
                *v |= (((id >> ch) & 1) as u8) << shift;
            }
            id >>= 3;
        }
    }
    p[IGNORE_LABEL as usize] = [255, 255, 255];
    p
}

fn encoder(path: &Path, width: usize, height: usize) -> Result<png::Encoder<'static, BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let w = u32::try_from(width).map_err(|_| Error::format(path, "image too wide"))?;
    let h = u32::try_from(height).map_err(|_| Error::format(path, "image too tall"))?;
    Ok(png::Encoder::new(BufWriter::new(file), w, h))
}

fn finish(path: &Path, mut enc: png::Encoder<'static, BufWriter<File>>, data: &[u8]) -> Result<()> {
    enc.set_compression(png::Compression::Balanced);
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(data).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut data = vec![0u8; size];
    let info = reader.next_frame(&mut data).map_err(|e| Error::format(path, e.to_string()))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Values are rounded and clamped to `[0, 255]`.
pub fn write_rgb_png(path: &Path, image: &Grid) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Invalid(format!("{}: RGB image needs 3 channels, got {}", path.display(), image.channels())));
    }
    let data: Vec<u8> = image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let mut enc = encoder(path, image.width(), image.height())?;
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    finish(path, enc, &data)
}

pub fn read_rgb_png(path: &Path) -> Result<Grid> {
    let d = decode(path)?;
    if d.depth != BitDepth::Eight {
        return Err(Error::format(path, "expected an 8-bit image"));
    }
    let data: Vec<f64> = match d.color {
        ColorType::Rgb => d.data.iter().map(|&v| f64::from(v)).collect(),
        ColorType::Rgba => d.data.chunks_exact(4).flat_map(|p| p[..3].iter().map(|&v| f64::from(v))).collect(),
        ColorType::Grayscale => d.data.iter().flat_map(|&v| [f64::from(v); 3]).collect(),
        c => return Err(Error::format(path, format!("unsupported color type {c:?}"))),
    };
    Grid::from_vec(d.height, d.width, 3, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut enc = encoder(path, labels.width, labels.height)?;
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    enc.set_palette(palette().concat());
    finish(path, enc, &labels.labels)
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let d = decode(path)?;
    if d.depth != BitDepth::Eight || !matches!(d.color, ColorType::Grayscale | ColorType::Indexed) {
        return Err(Error::format(path, "labels must be 8-bit grayscale or indexed"));
    }
    LabelMap::new(d.height, d.width, d.data).map_err(|e| Error::format(path, e.to_string()))
}

/// Valid depths are rounded to whole millimeters; invalid pixels are stored as 0.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut data = Vec::with_capacity(depth.pixels() * 2);
    for (p, (&d, &v)) in depth.depth.iter().zip(&depth.valid).enumerate() {
        let mm = if v && d > 0.0 {
            if !(d <= MAX_DEPTH_M) {
                return Err(Error::Invalid(format!(
                    "{}: depth {d} m at pixel {p} does not fit 16-bit millimeters",
                    path.display()
                )));
            }
            (d * 1000.0).round().max(1.0) as u16
        } else {
            0
        };
        data.extend_from_slice(&mm.to_be_bytes());
    }
    let mut enc = encoder(path, depth.width, depth.height)?;
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(BitDepth::Sixteen);
    finish(path, enc, &data)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let d = decode(path)?;
    if d.depth != BitDepth::Sixteen || d.color != ColorType::Grayscale {
        return Err(Error::format(path, "depth must be 16-bit grayscale"));
    }
    let mm: Vec<u16> = d.data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    let valid = mm.iter().map(|&v| v > 0).collect();
    let depth = mm.iter().map(|&v| f64::from(v) / 1000.0).collect();
    DepthMap::new(d.height, d.width, depth, valid).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub split: Split,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES).join(format!("{id}.png"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(LABELS).join(format!("{id}.png"))
}

pub fn depth_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(DEPTHS).join(format!("{id}.png"))
}

/// Four-digit zero-padded id of the `k`-th sample.
pub fn sample_id(k: usize) -> String {
    format!("{k:04}")
}

pub fn write_manifest(dir: &Path, entries: &[Entry]) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    w.write_record(["id", "split"]).map_err(csv_err)?;
    for e in entries {
        w.write_record([e.id.as_str(), split_name(e.split)]).map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(&path))
}

/// Entries sorted by id. Without a manifest, every image in `images/` is a
/// training sample.
pub fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(MANIFEST);
    let mut entries = if path.exists() {
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let headers = r.headers().map_err(|e| Error::format(&path, e.to_string()))?;
        if headers != vec!["id", "split"] {
            return Err(Error::format(&path, "header must be id,split"));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
            let split = match &rec[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(Error::format(&path, format!("unknown split {s:?} for {}", &rec[0]))),
            };
            out.push(Entry { id: rec[0].to_string(), split });
        }
        out
    } else {
        list_ids(&dir.join(IMAGES))?.into_iter().map(|id| Entry { id, split: Split::Train }).collect()
    };
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::format(&path, format!("duplicate id {}", w[0].id)));
    }
    Ok(entries)
}

/// Stems of the `.png` files in `dir`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for e in fs::read_dir(dir).map_err(Error::io(dir))? {
        let p = e.map_err(Error::io(dir))?.path();
        if p.extension().is_some_and(|x| x == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn save_sample(dir: &Path, id: &str, s: &Sample) -> Result<()> {
    write_rgb_png(&image_path(dir, id), &s.image)?;
    write_label_png(&label_path(dir, id), &s.labels)?;
    write_depth_png(&depth_path(dir, id), &s.depth)
}

/// A missing depth file yields an all-invalid depth map.
pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = read_rgb_png(&image_path(dir, id))?;
    let labels = read_label_png(&label_path(dir, id))?;
    let dpath = depth_path(dir, id);
    let depth = if dpath.exists() {
        read_depth_png(&dpath)?
    } else {
        let n = labels.pixels();
        DepthMap::new(labels.height, labels.width, vec![0.0; n], vec![false; n])?
    };
    Sample::new(image, labels, depth).map_err(|e| Error::format(image_path(dir, id), e.to_string()))
}

/// Samples of `split` (all when `None`) in id order.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<(Entry, Sample)>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| load_sample(dir, &e.id).map(|s| (e, s)))
        .collect()
}
