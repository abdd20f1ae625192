//! Metric reports, loss logs and marginal dumps.
//!
//! Reports are `metric,value` CSV files whose metric names are the table row labels
//! of [`DepthReport::LABELS`] and [`SegReport::LABELS`], values printed with six
//! decimals. Segmentation reports add one `IoU <class>` row per class (empty when
//! the class appears in neither prediction nor truth).

use std::fs;
use std::io::Write;
use std::path::Path;

use jointseg_core::metrics::{DepthReport, SegReport};
use jointseg_core::train::IterationLog;
use jointseg_core::Grid;

use crate::error::{Error, Result};

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn rows_csv(rows: &[(String, Option<f64>)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let v = v.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{v}\n", csv_escape(k)));
    }
    out
}

fn rows_text(title: &str, rows: &[(String, Option<f64>)]) -> String {
    let w = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    let mut out = format!("{title}\n");
    for (k, v) in rows {
        let v = v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let pad = w - k.chars().count();
        out.push_str(&format!("  {k}{}  {v:>8}\n", " ".repeat(pad)));
    }
    out
}

fn depth_rows(r: &DepthReport) -> Vec<(String, Option<f64>)> {
    r.rows().map(|(k, v)| (k.to_string(), Some(v))).collect()
}

fn seg_rows(r: &SegReport, class_names: &[String]) -> Vec<(String, Option<f64>)> {
    let mut rows: Vec<_> = r.rows().map(|(k, v)| (k.to_string(), Some(v))).collect();
    for (k, iou) in r.per_class_iou.iter().enumerate() {
        let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        rows.push((format!("IoU {name}"), *iou));
    }
    rows
}

pub fn depth_csv(r: &DepthReport) -> String {
    rows_csv(&depth_rows(r))
}

pub fn depth_text(r: &DepthReport) -> String {
    rows_text(&format!("Depth ({} pixels)", r.count), &depth_rows(r))
}

pub fn seg_csv(r: &SegReport, class_names: &[String]) -> String {
    rows_csv(&seg_rows(r, class_names))
}

pub fn seg_text(r: &SegReport, class_names: &[String]) -> String {
    rows_text(&format!("Segmentation ({} pixels)", r.count), &seg_rows(r, class_names))
}

pub const LOSS_HEADER: &str = "iteration,stage,l_sem,l_depth,l_total";

pub fn loss_row(l: &IterationLog) -> String {
    format!("{},{},{:e},{:e},{:e}", l.iteration, l.stage, l.l_sem, l.l_depth, l.l_total)
}

/// Appends loss rows, writing the header when the file is new.
pub struct LossLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let fresh = !append || !path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(path)
            .map_err(Error::io(path))?;
        if fresh {
            writeln!(file, "{LOSS_HEADER}").map_err(Error::io(path))?;
        }
        Ok(LossLog { file, path: path.to_path_buf() })
    }

    pub fn push(&mut self, l: &IterationLog) -> Result<()> {
        writeln!(self.file, "{}", loss_row(l)).map_err(Error::io(&self.path))
    }
}

/// Marginal dump: `"JSEGQMAP"`, version u32 = 1, height, width, channels (u32 each),
/// then row-major channel-last f32 values, all little-endian.
pub const QMAP_MAGIC: &[u8; 8] = b"JSEGQMAP";

pub fn encode_marginals(q: &Grid) -> Vec<u8> {
    let mut b = Vec::with_capacity(24 + q.data().len() * 4);
    b.extend_from_slice(QMAP_MAGIC);
    for v in [1, q.height(), q.width(), q.channels()] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in q.data() {
        b.extend_from_slice(&(v as f32).to_le_bytes());
    }
    b
}

pub fn decode_marginals(bytes: &[u8]) -> std::result::Result<Grid, String> {
    if bytes.len() < 24 || &bytes[..8] != QMAP_MAGIC {
        return Err("not a marginal dump".into());
    }
    let u = |k: usize| u32::from_le_bytes([bytes[8 + 4 * k], bytes[9 + 4 * k], bytes[10 + 4 * k], bytes[11 + 4 * k]]) as usize;
    if u(0) != 1 {
        return Err(format!("unsupported marginal dump version {}", u(0)));
    }
    let (h, w, c) = (u(1), u(2), u(3));
    let payload = &bytes[24..];
    if Some(payload.len()) != h.checked_mul(w).and_then(|n| n.checked_mul(c)).and_then(|n| n.checked_mul(4)) {
        return Err("payload size does not match the header".into());
    }
    let data = payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    Grid::from_vec(h, w, c, data).map_err(|e| e.to_string())
}

pub fn write_marginals(path: &Path, q: &Grid) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, encode_marginals(q)).map_err(Error::io(path))
}

pub fn read_marginals(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_marginals(&bytes).map_err(|d| Error::format(path, d))
}
