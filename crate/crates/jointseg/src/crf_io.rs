//! CRF parameter files and weight export.
//!
//! A parameter file is TOML holding the class names, the five bandwidths and the
//! paths (relative to the file) of four CSV matrices:
//!
//! ```toml
//! version = 1
//! class_names = ["background", "red"]
//! theta_alpha = 160.0
//! theta_beta = 3.0
//! theta_gamma = 50.0
//! theta_zeta = 0.2
//! theta_tau = 3.0
//! mu = "mu.csv"
//! w1 = "w1.csv"
//! w2 = "w2.csv"
//! w3 = "w3.csv"
//! ```
//!
//! Each matrix is a labeled CSV block: the header row is the matrix name followed by
//! the class names, and each row starts with its class name. The combined export
//! is the four blocks in the order mu, w1, w2, w3 separated by blank lines.

use std::fs;
use std::path::Path;

use jointseg_core::crf::{CrfParams, NUM_KERNELS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FILE_VERSION: u32 = 1;
pub const MATRIX_NAMES: [&str; 1 + NUM_KERNELS] = ["mu", "w1", "w2", "w3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrfFile {
    version: u32,
    class_names: Vec<String>,
    theta_alpha: f64,
    theta_beta: f64,
    theta_gamma: f64,
    theta_zeta: f64,
    theta_tau: f64,
    mu: String,
    w1: String,
    w2: String,
    w3: String,
}

/// `class0`, `class1`, ...
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|k| format!("class{k}")).collect()
}

fn check_names(params: &CrfParams, names: &[String]) -> Result<()> {
    if names.len() != params.num_classes {
        return Err(Error::Invalid(format!(
            "{} class names for {} classes",
            names.len(),
            params.num_classes
        )));
    }
    Ok(())
}

fn matrices(params: &CrfParams) -> [&[f64]; 1 + NUM_KERNELS] {
    [&params.mu, &params.w[0], &params.w[1], &params.w[2]]
}

/// One labeled `C x C` block.
pub fn matrix_csv(name: &str, values: &[f64], names: &[String]) -> Result<String> {
    let c = names.len();
    if values.len() != c * c {
        return Err(Error::Invalid(format!("{name}: {} values for {c} classes", values.len())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invalid(format!("{name}: {e}"));
    w.write_record(std::iter::once(name).chain(names.iter().map(String::as_str))).map_err(err)?;
    for (l, row) in values.chunks(c).enumerate() {
        let cells = std::iter::once(names[l].clone()).chain(row.iter().map(|v| v.to_string()));
        w.write_record(cells).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("{name}: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

/// The four labeled blocks of μ, w1, w2, w3.
pub fn export_crf_weights(params: &CrfParams, names: &[String]) -> Result<String> {
    params.validate()?;
    check_names(params, names)?;
    let blocks = MATRIX_NAMES
        .iter()
        .zip(matrices(params))
        .map(|(n, m)| matrix_csv(n, m, names))
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.join("\n"))
}

type Blocks = (Vec<String>, [Vec<f64>; 1 + NUM_KERNELS]);

fn parse_blocks(text: &str, expect: &[&str], origin: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |d: String| Error::format(origin, d);
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect::<Vec<String>>()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    let rows: Vec<Vec<String>> = rows.into_iter().filter(|r| !(r.len() == 1 && r[0].is_empty())).collect();
    let mut names: Option<Vec<String>> = None;
    let mut out = Vec::new();
    let mut k = 0;
    for &m in expect {
        let header = rows.get(k).ok_or_else(|| bad(format!("missing block {m}")))?;
        if header.first().map(String::as_str) != Some(m) {
            return Err(bad(format!("expected block {m}, found {:?}", header.first())));
        }
        let block_names = header[1..].to_vec();
        let c = block_names.len();
        match &names {
            Some(n) if *n != block_names => return Err(bad(format!("block {m} has different class names"))),
            _ => names = Some(block_names.clone()),
        }
        let mut values = Vec::with_capacity(c * c);
        for l in 0..c {
            let row = rows.get(k + 1 + l).ok_or_else(|| bad(format!("block {m} has fewer than {c} rows")))?;
            if row.len() != c + 1 || row[0] != block_names[l] {
                return Err(bad(format!("block {m} row {} does not match class {}", l + 1, block_names[l])));
            }
            for cell in &row[1..] {
                let v: f64 = cell.trim().parse().map_err(|_| bad(format!("block {m}: bad number {cell:?}")))?;
                values.push(v);
            }
        }
        out.push(values);
        k += 1 + c;
    }
    if k != rows.len() {
        return Err(bad(format!("{} unexpected rows after the last block", rows.len() - k)));
    }
    Ok((names.unwrap_or_default(), out))
}

/// Inverse of [`export_crf_weights`]: class names and the μ, w1, w2, w3 matrices.
pub fn import_crf_weights(text: &str) -> Result<Blocks> {
    let (names, mut m) = parse_blocks(text, &MATRIX_NAMES, Path::new("<weights>"))?;
    let w3 = m.pop().unwrap_or_default();
    let w2 = m.pop().unwrap_or_default();
    let w1 = m.pop().unwrap_or_default();
    let mu = m.pop().unwrap_or_default();
    Ok((names, [mu, w1, w2, w3]))
}

/// Writes `crf.toml` and the four CSV matrices into `dir`; returns the TOML path.
pub fn write_crf_dir(dir: &Path, params: &CrfParams, names: &[String]) -> Result<std::path::PathBuf> {
    params.validate()?;
    check_names(params, names)?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (n, m) in MATRIX_NAMES.iter().zip(matrices(params)) {
        let p = dir.join(format!("{n}.csv"));
        fs::write(&p, matrix_csv(n, m, names)?).map_err(Error::io(&p))?;
    }
    let file = CrfFile {
        version: FILE_VERSION,
        class_names: names.to_vec(),
        theta_alpha: params.theta_alpha,
        theta_beta: params.theta_beta,
        theta_gamma: params.theta_gamma,
        theta_zeta: params.theta_zeta,
        theta_tau: params.theta_tau,
        mu: "mu.csv".into(),
        w1: "w1.csv".into(),
        w2: "w2.csv".into(),
        w3: "w3.csv".into(),
    };
    let path = dir.join("crf.toml");
    let text = toml::to_string(&file).map_err(|e| Error::config(&path, e.to_string()))?;
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(path)
}

/// Reads a parameter file and its matrices; returns the parameters and class names.
pub fn read_crf_file(path: &Path) -> Result<(CrfParams, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let f: CrfFile = toml::from_str(&text).map_err(|e| Error::config(path, e.to_string()))?;
    if f.version != FILE_VERSION {
        return Err(Error::config(path, format!("unsupported version {}", f.version)));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let c = f.class_names.len();
    let mut mats = Vec::new();
    for (name, rel) in MATRIX_NAMES.iter().zip([&f.mu, &f.w1, &f.w2, &f.w3]) {
        let p = base.join(rel);
        let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
        let (names, mut m) = parse_blocks(&text, &[name], &p)?;
        if names != f.class_names {
            return Err(Error::format(&p, format!("class names differ from {}", path.display())));
        }
        mats.push(m.pop().unwrap_or_default());
    }
    let w3 = mats.pop().unwrap_or_default();
    let w2 = mats.pop().unwrap_or_default();
    let w1 = mats.pop().unwrap_or_default();
    let mu = mats.pop().unwrap_or_default();
    let params = CrfParams {
        num_classes: c,
        mu,
        w: [w1, w2, w3],
        theta_alpha: f.theta_alpha,
        theta_beta: f.theta_beta,
        theta_gamma: f.theta_gamma,
        theta_zeta: f.theta_zeta,
        theta_tau: f.theta_tau,
    };
    params.validate().map_err(|e| Error::config(path, e.to_string()))?;
    Ok((params, f.class_names))
}
