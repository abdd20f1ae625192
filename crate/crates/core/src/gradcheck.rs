//! Central-difference checks of the analytic gradients of the network, the losses
//! and the CRF.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::crf::{self, CrfFeatures, CrfParams, Filtering};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, LabelMap, IGNORE_LABEL};
use crate::losses::{self, DepthBinning};
use crate::math;
use crate::net::{self, NetworkConfig, NetworkParams};
use crate::rng::{self, SeededRng};

pub const NET_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const CRF_TOLERANCE: f64 = 1e-3;

/// Relative-error denominators are at least this fraction of the largest analytic
/// magnitude, so near-zero entries are judged against the gradient's scale.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Net,
    Losses,
    Crf,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Net, Target::Losses, Target::Crf];

    pub fn name(self) -> &'static str {
        match self {
            Target::Net => "net",
            Target::Losses => "losses",
            Target::Crf => "crf",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Target::Net => NET_TOLERANCE,
            Target::Losses => LOSS_TOLERANCE,
            Target::Crf => CRF_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub target: Target,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name of the entry with the largest error.
    pub worst: String,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// One analytic entry and the scalar function it should be the derivative of.
struct Entry {
    name: String,
    analytic: f64,
    numeric: f64,
}

fn summarize(target: Target, mut entries: Vec<Entry>, corrupt: bool) -> Result<GradcheckReport> {
    if entries.is_empty() {
        return Err(Error::Empty { op: "gradcheck" });
    }
    if corrupt {
        // flip the sign of the largest analytic entry
        let k = (0..entries.len())
            .max_by(|&a, &b| entries[a].analytic.abs().total_cmp(&entries[b].analytic.abs()))
            .unwrap_or(0);
        entries[k].analytic = -entries[k].analytic;
    }
    let scale = entries.iter().fold(0.0f64, |m, e| m.max(e.analytic.abs()));
    let floor = (REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut worst = 0;
    let mut max = 0.0;
    for (k, e) in entries.iter().enumerate() {
        let err = math::rel_err(e.analytic, e.numeric, floor);
        if !(err <= max) {
            max = err;
            worst = k;
        }
    }
    Ok(GradcheckReport {
        target,
        checked: entries.len(),
        max_rel_err: max,
        worst: entries.swap_remove(worst).name,
        tolerance: target.tolerance(),
    })
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, h: f64, mut f: F) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn random_grid(r: &mut SeededRng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Grid {
    Grid::from_fn(h, w, c, |_, _, _| rng::uniform(r, lo, hi))
}

pub fn run(target: Target, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let entries = match target {
        Target::Net => net_entries(&NetworkConfig::desk(), seed, 9, 9)?,
        Target::Losses => loss_entries(seed)?,
        Target::Crf => crf_entries(seed)?,
    };
    summarize(target, entries, corrupt)
}

/// Every parameter of the network under `L = <r_seg, seg> + <r_depth, depth>`.
fn net_entries(cfg: &NetworkConfig, seed: u64, h: usize, w: usize) -> Result<Vec<Entry>> {
    let mut r = rng::seeded(seed);
    let mut params = NetworkParams::init(cfg, seed)?;
    // nonzero biases keep ReLU pre-activations off the kink
    for l in &mut params.layers {
        l.bias.iter_mut().for_each(|b| *b = rng::uniform(&mut r, -0.3, 0.3));
    }
    let img = random_grid(&mut r, h, w, 3, -0.5, 0.5);
    let rs = random_grid(&mut r, h, w, cfg.num_classes, -1.0, 1.0);
    let rd = random_grid(&mut r, h, w, cfg.num_bins, -1.0, 1.0);
    let fwd = net::forward(cfg, &params, &img, true)?;
    let grads = net::backward(cfg, &params, &fwd, &rs, &rd)?.flatten();
    let dot = |a: &Grid, b: &Grid| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let names: Vec<String> = params
        .layers
        .iter()
        .flat_map(|l| {
            (0..l.weight.len())
                .map(move |k| format!("{}.weight[{k}]", l.name))
                .chain((0..l.bias.len()).map(move |k| format!("{}.bias[{k}]", l.name)))
        })
        .collect();
    let mut p = params.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (k, name) in names.into_iter().enumerate() {
        let orig = *p.value_mut(k).ok_or(Error::Empty { op: "gradcheck" })?;
        let numeric = central(orig, 1e-6, |v| {
            *p.value_mut(k).ok_or(Error::Empty { op: "gradcheck" })? = v;
            let o = net::forward(cfg, &p, &img, false)?;
            Ok(dot(&o.seg_logits, &rs) + dot(&o.depth_logits, &rd))
        })?;
        *p.value_mut(k).ok_or(Error::Empty { op: "gradcheck" })? = orig;
        out.push(Entry { name, analytic: grads[k], numeric });
    }
    Ok(out)
}

/// Semantic loss, depth loss and their weighted sum on random logits.
fn loss_entries(seed: u64) -> Result<Vec<Entry>> {
    let mut r = rng::seeded(seed);
    let (h, w, c) = (4, 5, 4);
    let binning = DepthBinning::desk();
    let nb = binning.num_bins;
    let seg = random_grid(&mut r, h, w, c, -3.0, 3.0);
    let depth_logits = random_grid(&mut r, h, w, nb, -2.0, 2.0);
    let mut labels: Vec<u8> = (0..h * w).map(|_| rng::index(&mut r, 0, c) as u8).collect();
    labels[3] = IGNORE_LABEL;
    let truth = LabelMap::new(h, w, labels)?;
    let star_depth: Vec<f64> = (0..h * w).map(|_| rng::uniform(&mut r, 0.8, 6.5)).collect();
    let mut star = DepthMap::dense(h, w, star_depth)?;
    star.valid[7] = false;
    let lambda = 0.37;

    let sem = losses::semantic_loss(&seg, &truth)?;
    let dep = losses::depth_loss_backward(&depth_logits, &star, &binning)?;
    let mut out = Vec::new();
    let step = 1e-6;
    for k in 0..seg.data().len() {
        let mut g = seg.clone();
        let numeric = central(seg.data()[k], step, |v| {
            g.data_mut()[k] = v;
            Ok(lambda * losses::semantic_loss(&g, &truth)?.sum)
        })?;
        out.push(Entry { name: format!("semantic[{k}]"), analytic: lambda * sem.grad.data()[k], numeric });
    }
    for k in 0..depth_logits.data().len() {
        let mut g = depth_logits.clone();
        let numeric = central(depth_logits.data()[k], step, |v| {
            g.data_mut()[k] = v;
            Ok(losses::depth_loss_backward(&g, &star, &binning)?.loss)
        })?;
        out.push(Entry { name: format!("depth[{k}]"), analytic: dep.grad.data()[k], numeric });
    }
    // the scale-invariant loss against log-depth directly
    let d = dep.depth.clone();
    let si = losses::scale_invariant_loss(&d, &star)?;
    for p in 0..d.pixels() {
        let mut dd = d.clone();
        let numeric = central(math::ln(d.depth[p]), step, |v| {
            dd.depth[p] = math::exp(v);
            Ok(losses::scale_invariant_loss(&dd, &star)?.loss)
        })?;
        out.push(Entry { name: format!("log-depth[{p}]"), analytic: si.grad_log_d[p], numeric });
    }
    Ok(out)
}

/// Unaries, compatibility and kernel weights of a 3x3, two-class CRF unrolled for
/// two iterations, under `L = <r, Q>`.
fn crf_entries(seed: u64) -> Result<Vec<Entry>> {
    let mut r = rng::seeded(seed);
    let (h, w, c, iters) = (3, 3, 2, 2);
    let image = random_grid(&mut r, h, w, 3, 0.0, 255.0);
    let depth = DepthMap::dense(h, w, (0..h * w).map(|_| rng::uniform(&mut r, 0.5, 6.0)).collect())?;
    let features = CrfFeatures::new(&image, &depth)?;
    let mut params = CrfParams::uniform(c, [1.0; 3], [4.0, 60.0, 3.0, 1.5, 1.5]);
    for v in params.mu.iter_mut().chain(params.w.iter_mut().flatten()) {
        *v = rng::uniform(&mut r, 0.2, 1.5);
    }
    let z = random_grid(&mut r, h, w, c, -2.0, 2.0);
    let weights = random_grid(&mut r, h, w, c, -1.0, 1.0);
    let loss = |z: &Grid, p: &CrfParams| -> Result<f64> {
        let q = crf::crf_inference(z, &features, p, iters, Filtering::Exact)?.q;
        Ok(q.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let (_, trace) = crf::crf_forward(&z, &features, &params, iters, Filtering::Exact, true)?;
    let g = crf::crf_backward(&weights, trace.as_ref(), &params)?;
    let step = 1e-6;
    let mut out = Vec::new();
    for k in 0..z.data().len() {
        let mut zz = z.clone();
        let numeric = central(z.data()[k], step, |v| {
            zz.data_mut()[k] = v;
            loss(&zz, &params)
        })?;
        out.push(Entry { name: format!("unary[{k}]"), analytic: g.unaries.data()[k], numeric });
    }
    for k in 0..c * c {
        let mut p = params.clone();
        let numeric = central(params.mu[k], step, |v| {
            p.mu[k] = v;
            loss(&z, &p)
        })?;
        out.push(Entry { name: format!("mu[{k}]"), analytic: g.mu[k], numeric });
        for m in 0..crf::NUM_KERNELS {
            let mut p = params.clone();
            let numeric = central(params.w[m][k], step, |v| {
                p.w[m][k] = v;
                loss(&z, &p)
            })?;
            out.push(Entry { name: format!("w{}[{k}]", m + 1), analytic: g.w[m][k], numeric });
        }
    }
    Ok(out)
}
