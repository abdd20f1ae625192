//! Fully-connected CRF over semantic labels with appearance, depth and smoothness
//! kernels, solved by unrolled mean-field updates.
//!
//! For pixels `i != j` the pairwise cost of labels `(l, l')` is
//! `mu[l][l'] * sum_m w_m[l][l'] * k_m(f_i, f_j)` with
//!
//! ```text
//! k_1 = exp(-|p_i - p_j|^2 / 2 theta_alpha^2 - |I_i - I_j|^2 / 2 theta_beta^2)   appearance
//! k_2 = exp(-|p_i - p_j|^2 / 2 theta_gamma^2 - |d_i - d_j|^2 / 2 theta_zeta^2)   depth
//! k_3 = exp(-|p_i - p_j|^2 / 2 theta_tau^2)                                      smoothness
//! ```
//!
//! Because every `w_m` is a full `C x C` matrix, a message is computed by filtering
//! `Q` once per kernel (`F_m = K_m Q`, self excluded) and mixing the filtered maps
//! with `mu * w_m`. Filter responses are not normalized per pixel.
//!
//! The unary is the network's semantic logit `z`, so one update is
//! `Q <- softmax(z - m(Q))`. Depth features are inputs only: no gradient flows back
//! into them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{self, DepthMap, Grid, LabelMap};
use crate::math;

/// Row-sum tolerance for mean-field marginals.
pub const Q_SUM_TOL: f64 = 1e-6;

pub const NUM_KERNELS: usize = 3;

/// Per-pixel CRF features: position is implicit in the pixel index.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfFeatures {
    pub height: usize,
    pub width: usize,
    /// RGB in 0..=255.
    pub color: Vec<[f64; 3]>,
    /// Estimated depth in meters.
    pub depth: Vec<f64>,
}

impl CrfFeatures {
    /// Features from an RGB image (0..=255) and the network's decoded depth.
    pub fn new(image: &Grid, depth: &DepthMap) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::shape("CrfFeatures", format!("image has {} channels", image.channels())));
        }
        if image.height() != depth.height || image.width() != depth.width {
            return Err(Error::shape(
                "CrfFeatures",
                format!("image {:?} vs depth {}x{}", image.dims(), depth.height, depth.width),
            ));
        }
        let color = (0..image.pixels())
            .map(|p| {
                let px = image.pixel(p);
                [px[0], px[1], px[2]]
            })
            .collect();
        let f = CrfFeatures {
            height: image.height(),
            width: image.width(),
            color,
            depth: depth.depth.clone(),
        };
        f.validate()?;
        Ok(f)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn position(&self, i: usize) -> (f64, f64) {
        ((i / self.width) as f64, (i % self.width) as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.color.len() != self.pixels() || self.depth.len() != self.pixels() {
            return Err(Error::shape("CrfFeatures", "feature vectors do not match the pixel count"));
        }
        for (i, (c, d)) in self.color.iter().zip(&self.depth).enumerate() {
            if !(c.iter().all(|v| v.is_finite()) && d.is_finite()) {
                return Err(Error::NonFinite { op: "CrfFeatures", index: i });
            }
        }
        Ok(())
    }

    fn same_size(&self, g: &Grid) -> bool {
        self.height == g.height() && self.width == g.width()
    }
}

/// Compatibility, kernel weights and bandwidths. Matrices are `C x C`, row-major,
/// indexed `[l * C + l']`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CrfParams {
    pub num_classes: usize,
    pub mu: Vec<f64>,
    /// Appearance, depth and smoothness kernel weights.
    pub w: [Vec<f64>; NUM_KERNELS],
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub theta_zeta: f64,
    pub theta_tau: f64,
}

impl CrfParams {
    /// Potts compatibility (0 on the diagonal, 1 elsewhere).
    pub fn potts(num_classes: usize) -> Vec<f64> {
        let c = num_classes;
        (0..c * c).map(|k| if k / c == k % c { 0.0 } else { 1.0 }).collect()
    }

    /// Potts `mu`, uniform kernel weights 7 / 4 / 3, bandwidths 160, 3, 50, 0.2, 3.
    pub fn standard_init(num_classes: usize) -> Self {
        Self::uniform(num_classes, [7.0, 4.0, 3.0], [160.0, 3.0, 50.0, 0.2, 3.0])
    }

    /// Potts `mu` with every entry of `w_m` set to `weights[m]`.
    /// `thetas` are `[alpha, beta, gamma, zeta, tau]`.
    pub fn uniform(num_classes: usize, weights: [f64; NUM_KERNELS], thetas: [f64; 5]) -> Self {
        let n = num_classes * num_classes;
        CrfParams {
            num_classes,
            mu: Self::potts(num_classes),
            w: [vec![weights[0]; n], vec![weights[1]; n], vec![weights[2]; n]],
            theta_alpha: thetas[0],
            theta_beta: thetas[1],
            theta_gamma: thetas[2],
            theta_zeta: thetas[3],
            theta_tau: thetas[4],
        }
    }

    /// All pairwise weights zero: inference reduces to `softmax(unaries)`.
    pub fn without_pairwise(mut self) -> Self {
        for w in &mut self.w {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }

    /// Same parameters with the depth kernel switched off.
    pub fn without_depth_kernel(mut self) -> Self {
        self.w[1].iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn thetas(&self) -> [f64; 5] {
        [self.theta_alpha, self.theta_beta, self.theta_gamma, self.theta_zeta, self.theta_tau]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes * self.num_classes;
        if self.num_classes == 0 {
            return Err(Error::config("CRF needs at least one class"));
        }
        if self.mu.len() != n || self.w.iter().any(|w| w.len() != n) {
            return Err(Error::config(format!(
                "CRF matrices must be {0}x{0}",
                self.num_classes
            )));
        }
        if self.thetas().iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::config("CRF bandwidths must be positive and finite"));
        }
        let finite = self.mu.iter().chain(self.w.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("CRF matrices must be finite"));
        }
        Ok(())
    }

    /// `mu[l][l'] * w_m[l][l']` for each kernel.
    fn mixing(&self) -> [Vec<f64>; NUM_KERNELS] {
        let mix = |w: &Vec<f64>| self.mu.iter().zip(w).map(|(a, b)| a * b).collect::<Vec<f64>>();
        [mix(&self.w[0]), mix(&self.w[1]), mix(&self.w[2])]
    }
}

/// The three Gaussian factors for a pixel pair, without weights.
pub fn gaussian_factors(f: &CrfFeatures, i: usize, j: usize, params: &CrfParams) -> [f64; NUM_KERNELS] {
    let (yi, xi) = f.position(i);
    let (yj, xj) = f.position(j);
    let dp2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
    let (ci, cj) = (f.color[i], f.color[j]);
    let di2: f64 = (0..3).map(|k| (ci[k] - cj[k]) * (ci[k] - cj[k])).sum();
    let dd = f.depth[i] - f.depth[j];
    let two = |t: f64| 2.0 * t * t;
    [
        math::exp(-dp2 / two(params.theta_alpha) - di2 / two(params.theta_beta)),
        math::exp(-dp2 / two(params.theta_gamma) - dd * dd / two(params.theta_zeta)),
        math::exp(-dp2 / two(params.theta_tau)),
    ]
}

/// Full `C x C` kernel `k(f_i, f_j) = sum_m w_m * k_m(f_i, f_j)`.
pub fn kernel_eval(f: &CrfFeatures, i: usize, j: usize, params: &CrfParams) -> Vec<f64> {
    let g = gaussian_factors(f, i, j, params);
    (0..params.num_classes * params.num_classes)
        .map(|k| params.w[0][k] * g[0] + params.w[1][k] * g[1] + params.w[2][k] * g[2])
        .collect()
}

/// How the per-kernel Gaussian filtering of `Q` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Filtering {
    /// Every pixel pair, exactly.
    #[default]
    Exact,
    /// Drop pairs whose spatial factor alone guarantees a message contribution below
    /// `tolerance` in total per pixel.
    Truncated { tolerance: f64 },
}

/// Pixel pairs `(i, j)` with `i < j` and their Gaussian factors. Entries for a kernel
/// that was truncated away are zero.
#[derive(Debug, Clone)]
pub struct PairKernels {
    n: usize,
    pairs: Vec<(u32, u32, [f64; NUM_KERNELS])>,
}

impl PairKernels {
    pub fn build(f: &CrfFeatures, params: &CrfParams, filtering: Filtering) -> Result<Self> {
        params.validate()?;
        let n = f.pixels();
        match filtering {
            Filtering::Exact => {
                let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        pairs.push((i as u32, j as u32, gaussian_factors(f, i, j, params)));
                    }
                }
                Ok(PairKernels { n, pairs })
            }
            Filtering::Truncated { tolerance } => {
                if !(tolerance > 0.0) {
                    return Err(Error::config("truncation tolerance must be positive"));
                }
                let mix = params.mixing();
                let spatial = [params.theta_alpha, params.theta_gamma, params.theta_tau];
                let mut radius2 = [0.0; NUM_KERNELS];
                for m in 0..NUM_KERNELS {
                    let wmax = mix[m].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let ratio = wmax * n as f64 * params.num_classes as f64 / tolerance;
                    radius2[m] = if wmax == 0.0 {
                        -1.0
                    } else {
                        2.0 * spatial[m] * spatial[m] * math::ln(ratio.max(1.0))
                    };
                }
                let r2max = radius2.iter().fold(0.0f64, |a, &b| a.max(b));
                let r = math::floor(math::sqrt(r2max)) as usize;
                let (h, w) = (f.height, f.width);
                let mut pairs = Vec::new();
                for i in 0..n {
                    let (yi, xi) = (i / w, i % w);
                    for yj in yi..(yi + r + 1).min(h) {
                        let x_lo = if yj == yi { xi + 1 } else { xi.saturating_sub(r) };
                        for xj in x_lo..(xi + r + 1).min(w) {
                            let dy = (yj - yi) as f64;
                            let dx = xj as f64 - xi as f64;
                            let d2 = dy * dy + dx * dx;
                            if d2 > r2max {
                                continue;
                            }
                            let j = yj * w + xj;
                            let mut g = gaussian_factors(f, i, j, params);
                            for m in 0..NUM_KERNELS {
                                if d2 > radius2[m] {
                                    g[m] = 0.0;
                                }
                            }
                            pairs.push((i as u32, j as u32, g));
                        }
                    }
                }
                Ok(PairKernels { n, pairs })
            }
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// `F_m = K_m x` for all three kernels (self excluded). `K_m` is symmetric, so the
    /// same routine applies the transpose.
    pub fn filter(&self, x: &Grid) -> [Grid; NUM_KERNELS] {
        let c = x.channels();
        let mut out = [
            Grid::zeros(x.height(), x.width(), c),
            Grid::zeros(x.height(), x.width(), c),
            Grid::zeros(x.height(), x.width(), c),
        ];
        debug_assert_eq!(x.pixels(), self.n);
        let src = x.data();
        for &(i, j, g) in &self.pairs {
            let (i, j) = (i as usize * c, j as usize * c);
            for (m, fm) in out.iter_mut().enumerate() {
                let k = g[m];
                if k == 0.0 {
                    continue;
                }
                let dst = fm.data_mut();
                for l in 0..c {
                    dst[i + l] += k * src[j + l];
                    dst[j + l] += k * src[i + l];
                }
            }
        }
        out
    }
}

/// `m(i, l) = sum_m sum_l' mix_m[l][l'] F_m(i, l')`.
fn messages(filtered: &[Grid; NUM_KERNELS], mix: &[Vec<f64>; NUM_KERNELS]) -> Grid {
    let (h, w, c) = filtered[0].dims();
    let mut out = Grid::zeros(h, w, c);
    for p in 0..h * w {
        let row = out.pixel_mut(p);
        for (fm, am) in filtered.iter().zip(mix) {
            let fp = fm.pixel(p);
            for (l, r) in row.iter_mut().enumerate() {
                let arow = &am[l * c..(l + 1) * c];
                *r += arow.iter().zip(fp).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

/// Messages computed directly from [`kernel_eval`] for every ordered pair, with no
/// factorization or truncation: `m_i(l) = sum_{j != i} sum_l' mu[l][l'] k(f_i, f_j)[l][l'] Q_j(l')`.
/// Quadratic in pixels and classes; the reference for any faster path.
pub fn brute_force_messages(q: &Grid, f: &CrfFeatures, params: &CrfParams) -> Result<Grid> {
    params.validate()?;
    let c = params.num_classes;
    if q.channels() != c || !f.same_size(q) {
        return Err(Error::shape("brute_force_messages", format!("Q {:?}", q.dims())));
    }
    let n = f.pixels();
    let mut out = Grid::zeros(q.height(), q.width(), c);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = kernel_eval(f, i, j, params);
            let qj = q.pixel(j).to_vec();
            let row = out.pixel_mut(i);
            for l in 0..c {
                for lp in 0..c {
                    row[l] += params.mu[l * c + lp] * k[l * c + lp] * qj[lp];
                }
            }
        }
    }
    Ok(out)
}

/// Messages for marginals `q` through a prebuilt pair set.
pub fn filtered_messages(q: &Grid, kernels: &PairKernels, params: &CrfParams) -> Grid {
    messages(&kernels.filter(q), &params.mixing())
}

/// Mean-field marginals after `iteration` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pub q: Grid,
    pub iteration: usize,
}

impl MeanFieldState {
    /// `Q_0 = softmax(unaries)`.
    pub fn init(unaries: &Grid) -> Result<Self> {
        Ok(MeanFieldState { q: grid::softmax_channels(unaries)?, iteration: 0 })
    }

    pub fn check_normalized(&self, op: &'static str) -> Result<()> {
        check_rows(&self.q, op)
    }
}

fn check_rows(q: &Grid, op: &'static str) -> Result<()> {
    for p in 0..q.pixels() {
        let row = q.pixel(p);
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= Q_SUM_TOL) || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::NotNormalized { op, pixel: p, sum });
        }
    }
    Ok(())
}

fn check_inputs(unaries: &Grid, f: &CrfFeatures, params: &CrfParams, op: &'static str) -> Result<()> {
    params.validate()?;
    if unaries.channels() != params.num_classes || !f.same_size(unaries) {
        return Err(Error::shape(
            op,
            format!(
                "unaries {:?}, features {}x{}, {} classes",
                unaries.dims(),
                f.height,
                f.width,
                params.num_classes
            ),
        ));
    }
    unaries.check_finite(op)
}

fn update(unaries: &Grid, msg: &Grid) -> Grid {
    let mut next = unaries.clone();
    for (v, m) in next.data_mut().iter_mut().zip(msg.data()) {
        *v -= m;
    }
    for p in 0..next.pixels() {
        grid::softmax_in_place(next.pixel_mut(p));
    }
    next
}

/// One mean-field update `Q <- softmax(unaries - m(Q))`.
pub fn mean_field_step(
    state: &MeanFieldState,
    unaries: &Grid,
    kernels: &PairKernels,
    params: &CrfParams,
) -> Result<MeanFieldState> {
    state.check_normalized("mean_field_step")?;
    if !state.q.same_shape(unaries) {
        return Err(Error::shape(
            "mean_field_step",
            format!("Q {:?} vs unaries {:?}", state.q.dims(), unaries.dims()),
        ));
    }
    let msg = filtered_messages(&state.q, kernels, params);
    let q = update(unaries, &msg);
    check_rows(&q, "mean_field_step")?;
    Ok(MeanFieldState { q, iteration: state.iteration + 1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    pub q: Grid,
    pub labels: LabelMap,
}

/// Runs `iters` mean-field updates from `softmax(unaries)`.
pub fn crf_inference(
    unaries: &Grid,
    features: &CrfFeatures,
    params: &CrfParams,
    iters: usize,
    filtering: Filtering,
) -> Result<CrfOutput> {
    Ok(crf_forward(unaries, features, params, iters, filtering, false)?.0)
}

/// Intermediate state of an unrolled inference kept for [`crf_backward`].
#[derive(Debug, Clone)]
pub struct CrfTrace {
    kernels: PairKernels,
    /// `Q_0 ..= Q_T`.
    qs: Vec<Grid>,
    /// Filtered `Q_{t}` for `t < T`, per kernel.
    filtered: Vec<[Grid; NUM_KERNELS]>,
}

impl CrfTrace {
    pub fn iterations(&self) -> usize {
        self.qs.len() - 1
    }

    /// Marginals after every iteration, starting with `softmax(unaries)`.
    pub fn marginals(&self) -> &[Grid] {
        &self.qs
    }
}

/// Inference that optionally records what the backward pass needs.
pub fn crf_forward(
    unaries: &Grid,
    features: &CrfFeatures,
    params: &CrfParams,
    iters: usize,
    filtering: Filtering,
    keep_trace: bool,
) -> Result<(CrfOutput, Option<CrfTrace>)> {
    if iters == 0 {
        return Err(Error::config("mean-field needs at least one iteration"));
    }
    check_inputs(unaries, features, params, "crf_inference")?;
    let kernels = PairKernels::build(features, params, filtering)?;
    let mix = params.mixing();
    let mut state = MeanFieldState::init(unaries)?;
    let mut qs = Vec::new();
    let mut filtered = Vec::new();
    for _ in 0..iters {
        state.check_normalized("crf_inference")?;
        let f = kernels.filter(&state.q);
        let msg = messages(&f, &mix);
        let q = update(unaries, &msg);
        check_rows(&q, "crf_inference")?;
        if keep_trace {
            qs.push(core::mem::replace(&mut state.q, q));
            filtered.push(f);
        } else {
            state.q = q;
        }
        state.iteration += 1;
    }
    let labels = state.q.argmax_channels();
    let trace = keep_trace.then(|| {
        qs.push(state.q.clone());
        CrfTrace { kernels, qs, filtered }
    });
    Ok((CrfOutput { q: state.q, labels }, trace))
}

/// Gradients produced by [`crf_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrads {
    pub unaries: Grid,
    pub mu: Vec<f64>,
    pub w: [Vec<f64>; NUM_KERNELS],
}

/// Reverse sweep through the unrolled iterations given `dL/dQ_T`.
pub fn crf_backward(grad_q: &Grid, trace: Option<&CrfTrace>, params: &CrfParams) -> Result<CrfGrads> {
    let trace = trace.ok_or(Error::MissingCache { op: "crf_backward" })?;
    let last = trace.qs.last().ok_or(Error::MissingCache { op: "crf_backward" })?;
    if !grad_q.same_shape(last) {
        return Err(Error::shape(
            "crf_backward",
            format!("gradient {:?} vs Q {:?}", grad_q.dims(), last.dims()),
        ));
    }
    let c = params.num_classes;
    let mix = params.mixing();
    let (h, w) = (grad_q.height(), grad_q.width());
    let mut g_unary = Grid::zeros(h, w, c);
    let mut g_mu = vec![0.0; c * c];
    let mut g_w = [vec![0.0; c * c], vec![0.0; c * c], vec![0.0; c * c]];
    let mut g_q = grad_q.clone();
    for t in (1..trace.qs.len()).rev() {
        // Q_t = softmax(z - M_t), M_t = sum_m mix_m F_m(Q_{t-1})
        let g_s = grid::softmax_backward(&trace.qs[t], &g_q)?;
        g_unary.add_scaled(&g_s, 1.0)?;
        let fs = &trace.filtered[t - 1];
        let mut g_f = [Grid::zeros(h, w, c), Grid::zeros(h, w, c), Grid::zeros(h, w, c)];
        for p in 0..h * w {
            let gm = g_s.pixel(p); // dL/dM = -gm
            for m in 0..NUM_KERNELS {
                let fp = fs[m].pixel(p);
                for l in 0..c {
                    let neg = -gm[l];
                    if neg == 0.0 {
                        continue;
                    }
                    for lp in 0..c {
                        let k = l * c + lp;
                        g_mu[k] += neg * params.w[m][k] * fp[lp];
                        g_w[m][k] += neg * params.mu[k] * fp[lp];
                    }
                }
                let gf = g_f[m].pixel_mut(p);
                for (lp, out) in gf.iter_mut().enumerate() {
                    *out = (0..c).map(|l| -gm[l] * mix[m][l * c + lp]).sum();
                }
            }
        }
        let mut next = Grid::zeros(h, w, c);
        for (m, gf) in g_f.iter().enumerate() {
            let back = trace.kernels.filter(gf);
            next.add_scaled(&back[m], 1.0)?;
        }
        g_q = next;
    }
    // Q_0 = softmax(z)
    let g0 = grid::softmax_backward(&trace.qs[0], &g_q)?;
    g_unary.add_scaled(&g0, 1.0)?;
    Ok(CrfGrads { unaries: g_unary, mu: g_mu, w: g_w })
}

/// Exact marginals of `P(x) ~ exp(-E(x))` with
/// `E(x) = -sum_i z_i(x_i) + sum_{i<j} mu(x_i, x_j) k(f_i, f_j)[x_i, x_j]`,
/// by enumerating all `C^N` labelings. Only for tiny instances.
pub fn exact_marginals(unaries: &Grid, f: &CrfFeatures, params: &CrfParams) -> Result<Grid> {
    check_inputs(unaries, f, params, "exact_marginals")?;
    let n = f.pixels();
    let c = params.num_classes;
    let total = (c as u64).checked_pow(n as u32).filter(|&t| t <= 1 << 20).ok_or_else(|| {
        Error::config(format!("{c}^{n} labelings is too many to enumerate"))
    })?;
    let mut kernels = vec![Vec::new(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            kernels[i * n + j] = kernel_eval(f, i, j, params);
        }
    }
    let mut energies = Vec::with_capacity(total as usize);
    let mut labels = vec![0usize; n];
    for code in 0..total {
        let mut rest = code;
        for l in labels.iter_mut() {
            *l = (rest % c as u64) as usize;
            rest /= c as u64;
        }
        let mut e = 0.0;
        for i in 0..n {
            e -= unaries.pixel(i)[labels[i]];
            for j in i + 1..n {
                let k = labels[i] * c + labels[j];
                e += params.mu[k] * kernels[i * n + j][k];
            }
        }
        energies.push(e);
    }
    let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut marg = Grid::zeros(unaries.height(), unaries.width(), c);
    let mut z = 0.0;
    for (code, e) in energies.iter().enumerate() {
        let weight = math::exp(-(e - e_min));
        z += weight;
        let mut rest = code as u64;
        for i in 0..n {
            let l = (rest % c as u64) as usize;
            rest /= c as u64;
            marg.pixel_mut(i)[l] += weight;
        }
    }
    marg.scale(1.0 / z);
    Ok(marg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rel_err;
    use crate::rng;
    use proptest::prelude::*;

    fn features(h: usize, w: usize, seed: u64) -> CrfFeatures {
        let mut r = rng::seeded(seed);
        CrfFeatures {
            height: h,
            width: w,
            color: (0..h * w)
                .map(|_| [0, 1, 2].map(|_| rng::uniform(&mut r, 0.0, 255.0)))
                .collect(),
            depth: (0..h * w).map(|_| rng::uniform(&mut r, 0.5, 6.0)).collect(),
        }
    }

    fn random_params(c: usize, seed: u64) -> CrfParams {
        let mut r = rng::seeded(seed);
        let mut p = CrfParams::uniform(c, [1.0, 1.0, 1.0], [4.0, 40.0, 3.0, 1.5, 1.5]);
        for v in p.mu.iter_mut().chain(p.w.iter_mut().flatten()) {
            *v = rng::uniform(&mut r, 0.1, 1.0);
        }
        p
    }

    fn random_unaries(h: usize, w: usize, c: usize, seed: u64) -> Grid {
        let mut r = rng::seeded(seed);
        Grid::from_fn(h, w, c, |_, _, _| rng::uniform(&mut r, -2.0, 2.0))
    }

    #[test]
    fn kernel_at_zero_distance_sums_weights() {
        let f = features(2, 2, 1);
        let p = CrfParams::standard_init(3);
        let k = kernel_eval(&f, 1, 1, &p);
        assert!(k.iter().all(|&v| v == 14.0));
    }

    #[test]
    fn kernel_decays_with_distance() {
        let f = CrfFeatures {
            height: 1,
            width: 2000,
            color: vec![[10.0; 3]; 2000],
            depth: vec![1.0; 2000],
        };
        let p = CrfParams::standard_init(2);
        let k = kernel_eval(&f, 0, 1999, &p);
        assert!(k.iter().all(|&v| v < 1e-10));
    }

    #[test]
    fn depth_gap_of_one_bandwidth() {
        let f = CrfFeatures {
            height: 1,
            width: 2,
            color: vec![[50.0; 3]; 2],
            depth: vec![1.0, 1.2],
        };
        let mut p = CrfParams::standard_init(2);
        p.theta_gamma = 1e9; // isolate the depth term from the 1-pixel offset
        let g = gaussian_factors(&f, 0, 1, &p);
        assert!((g[1] - libm::exp(-0.5)).abs() < 1e-12);
        assert!((g[1] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn kernel_is_symmetric() {
        let f = features(4, 4, 3);
        let p = random_params(3, 4);
        for (i, j) in [(0, 15), (3, 7), (5, 6)] {
            assert_eq!(kernel_eval(&f, i, j, &p), kernel_eval(&f, j, i, &p));
        }
    }

    #[test]
    fn zero_pairwise_is_softmax_fixed_point() {
        let f = features(3, 3, 5);
        let p = random_params(3, 6).without_pairwise();
        let z = random_unaries(3, 3, 3, 7);
        let kernels = PairKernels::build(&f, &p, Filtering::Exact).unwrap();
        let s0 = MeanFieldState::init(&z).unwrap();
        let s1 = mean_field_step(&s0, &z, &kernels, &p).unwrap();
        let s2 = mean_field_step(&s1, &z, &kernels, &p).unwrap();
        let soft = grid::softmax_channels(&z).unwrap();
        assert_eq!(s1.q, soft);
        assert_eq!(s2.q, soft);
        assert_eq!(s2.iteration, 2);
        let out = crf_inference(&z, &f, &p, 3, Filtering::Exact).unwrap();
        assert_eq!(out.labels, z.argmax_channels());
    }

    #[test]
    fn potts_symmetric_pair_stays_uniform() {
        let f = CrfFeatures { height: 1, width: 2, color: vec![[0.0; 3]; 2], depth: vec![2.0; 2] };
        let p = CrfParams::uniform(2, [1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 0.2, 3.0]);
        let z = Grid::zeros(1, 2, 2);
        let out = crf_inference(&z, &f, &p, 5, Filtering::Exact).unwrap();
        assert!(out.q.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn two_pixel_single_step_matches_hand_computation() {
        // pixels (0,0) and (0,1); only the smoothness kernel with theta_tau = 1
        let f = CrfFeatures { height: 1, width: 2, color: vec![[0.0; 3]; 2], depth: vec![1.0; 2] };
        let mut p = CrfParams::uniform(2, [0.0, 0.0, 2.0], [1.0, 1.0, 1.0, 1.0, 1.0]);
        p.mu = vec![0.0, 1.0, 1.0, 0.0];
        let z = Grid::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 0.5]).unwrap();
        let out = crf_inference(&z, &f, &p, 1, Filtering::Exact).unwrap();

        // hand computation
        let sm = |a: f64, b: f64| {
            let (ea, eb) = (libm::exp(a), libm::exp(b));
            (ea / (ea + eb), eb / (ea + eb))
        };
        let q0a = sm(1.0, 0.0);
        let q0b = sm(0.0, 0.5);
        let k = 2.0 * libm::exp(-0.5); // w3 * exp(-1 / (2 * 1^2))
        // m_a(0) = k * Q_b(1), m_a(1) = k * Q_b(0)
        let qa = sm(1.0 - k * q0b.1, 0.0 - k * q0b.0);
        let qb = sm(0.0 - k * q0a.1, 0.5 - k * q0a.0);
        let expect = [qa.0, qa.1, qb.0, qb.1];
        for (a, b) in out.q.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        // frozen fixture values
        let frozen = [0.668_830_125_302, 0.331_169_874_698, 0.515_139_482_876, 0.484_860_517_124];
        for (a, b) in out.q.data().iter().zip(frozen) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn unnormalized_state_is_rejected() {
        let f = features(2, 2, 1);
        let p = random_params(2, 2);
        let z = random_unaries(2, 2, 2, 3);
        let kernels = PairKernels::build(&f, &p, Filtering::Exact).unwrap();
        let bad = MeanFieldState { q: Grid::filled(2, 2, 2, 0.7), iteration: 0 };
        assert!(matches!(
            mean_field_step(&bad, &z, &kernels, &p),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn zero_iterations_rejected() {
        let f = features(2, 2, 1);
        let p = random_params(2, 2);
        assert!(crf_inference(&random_unaries(2, 2, 2, 1), &f, &p, 0, Filtering::Exact).is_err());
    }

    #[test]
    fn factorized_messages_match_brute_force() {
        let f = features(5, 6, 11);
        let p = random_params(3, 12);
        let q = grid::softmax_channels(&random_unaries(5, 6, 3, 13)).unwrap();
        let brute = brute_force_messages(&q, &f, &p).unwrap();
        let exact = filtered_messages(&q, &PairKernels::build(&f, &p, Filtering::Exact).unwrap(), &p);
        for (a, b) in brute.data().iter().zip(exact.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_filter_matches_brute_force() {
        let f = features(16, 16, 21);
        for p in [random_params(3, 22), CrfParams::standard_init(3)] {
            let q = grid::softmax_channels(&random_unaries(16, 16, 3, 23)).unwrap();
            let brute = brute_force_messages(&q, &f, &p).unwrap();
            let k = PairKernels::build(&f, &p, Filtering::Truncated { tolerance: 1e-6 }).unwrap();
            let fast = filtered_messages(&q, &k, &p);
            let max = brute
                .data()
                .iter()
                .zip(fast.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-5, "max diff {max}");
        }
        // narrow bandwidths actually drop pairs
        let mut p = random_params(3, 22);
        p.theta_alpha = 1.5;
        p.theta_gamma = 1.5;
        let k = PairKernels::build(&f, &p, Filtering::Truncated { tolerance: 1e-6 }).unwrap();
        assert!(k.num_pairs() < 256 * 255 / 2);
    }

    #[test]
    fn zero_pairwise_matches_enumeration() {
        let f = features(3, 3, 31);
        let p = random_params(2, 32).without_pairwise();
        let z = random_unaries(3, 3, 2, 33);
        let exact = exact_marginals(&z, &f, &p).unwrap();
        let out = crf_inference(&z, &f, &p, 5, Filtering::Exact).unwrap();
        for (a, b) in exact.data().iter().zip(out.q.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn enumeration_is_normalized() {
        let f = features(2, 4, 41);
        let p = random_params(2, 42);
        let m = exact_marginals(&random_unaries(2, 4, 2, 43), &f, &p).unwrap();
        for i in 0..8 {
            assert!((m.pixel(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_trace_is_error() {
        let p = random_params(2, 1);
        assert_eq!(
            crf_backward(&Grid::zeros(2, 2, 2), None, &p).unwrap_err(),
            Error::MissingCache { op: "crf_backward" }
        );
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let f = features(3, 3, 1);
        let p = random_params(2, 2);
        let z = random_unaries(3, 3, 2, 3);
        let (_, trace) = crf_forward(&z, &f, &p, 2, Filtering::Exact, true).unwrap();
        let g = crf_backward(&Grid::zeros(3, 3, 2), trace.as_ref(), &p).unwrap();
        assert!(g.unaries.data().iter().all(|&v| v == 0.0));
        assert!(g.mu.iter().chain(g.w.iter().flatten()).all(|&v| v == 0.0));
    }

    /// Central differences of `sum(r * Q_T)` on unaries, mu and every w.
    #[test]
    fn backward_matches_finite_differences() {
        let f = features(3, 3, 51);
        let p = random_params(2, 52);
        let z = random_unaries(3, 3, 2, 53);
        let r = random_unaries(3, 3, 2, 54);
        let iters = 2;
        let loss = |z: &Grid, p: &CrfParams| -> f64 {
            let out = crf_inference(z, &f, p, iters, Filtering::Exact).unwrap();
            out.q.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = crf_forward(&z, &f, &p, iters, Filtering::Exact, true).unwrap();
        let g = crf_backward(&r, trace.as_ref(), &p).unwrap();
        let h = 1e-6;
        for k in 0..z.data().len() {
            let (mut up, mut down) = (z.clone(), z.clone());
            up.data_mut()[k] += h;
            down.data_mut()[k] -= h;
            let fd = (loss(&up, &p) - loss(&down, &p)) / (2.0 * h);
            assert!(rel_err(g.unaries.data()[k], fd, 1e-7) < 1e-3, "unary {k}");
        }
        for k in 0..4 {
            let (mut up, mut down) = (p.clone(), p.clone());
            up.mu[k] += h;
            down.mu[k] -= h;
            let fd = (loss(&z, &up) - loss(&z, &down)) / (2.0 * h);
            assert!(rel_err(g.mu[k], fd, 1e-7) < 1e-3, "mu {k}: {} vs {fd}", g.mu[k]);
            for m in 0..3 {
                let (mut up, mut down) = (p.clone(), p.clone());
                up.w[m][k] += h;
                down.w[m][k] -= h;
                let fd = (loss(&z, &up) - loss(&z, &down)) / (2.0 * h);
                assert!(rel_err(g.w[m][k], fd, 1e-7) < 1e-3, "w{m} {k}");
            }
        }
    }

    #[test]
    fn depth_features_change_output_but_are_not_differentiated() {
        let f = features(3, 3, 61);
        let p = random_params(2, 62);
        let z = random_unaries(3, 3, 2, 63);
        let base = crf_inference(&z, &f, &p, 2, Filtering::Exact).unwrap();
        let mut f2 = f.clone();
        f2.depth[4] += 0.7;
        let moved = crf_inference(&z, &f2, &p, 2, Filtering::Exact).unwrap();
        assert_ne!(base.q, moved.q);
        // the gradient set has no depth component by construction
        let (_, trace) = crf_forward(&z, &f, &p, 2, Filtering::Exact, true).unwrap();
        let g = crf_backward(&z, trace.as_ref(), &p).unwrap();
        let CrfGrads { unaries, mu, w } = g;
        assert_eq!(unaries.dims(), (3, 3, 2));
        assert_eq!((mu.len(), w[0].len()), (4, 4));
    }

    #[test]
    fn params_validation() {
        let mut p = CrfParams::standard_init(3);
        p.validate().unwrap();
        p.theta_zeta = 0.0;
        assert!(p.validate().is_err());
        let mut p = CrfParams::standard_init(3);
        p.w[2].pop();
        assert!(p.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn marginals_stay_normalized(seed in 0u64..1_000_000, h in 1usize..9, w in 1usize..9, c in 1usize..6) {
            let f = features(h, w, seed);
            let mut p = random_params(c, seed + 1);
            p.w.iter_mut().flatten().for_each(|v| *v *= 3.0);
            let z = random_unaries(h, w, c, seed + 2);
            let (_, trace) = crf_forward(&z, &f, &p, 5, Filtering::Exact, true).unwrap();
            for q in trace.unwrap().marginals() {
                for i in 0..q.pixels() {
                    prop_assert!((q.pixel(i).iter().sum::<f64>() - 1.0).abs() < Q_SUM_TOL);
                }
            }
        }
    }
}
