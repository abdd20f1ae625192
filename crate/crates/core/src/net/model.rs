//! Whole-network forward and backward passes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{Aggregation, LayerKind, LayerSpec, NetworkConfig, FUSE_DEPTH, FUSE_SEG};
use super::layers::{self, PoolOutput};
use super::params::{LayerParams, NetworkParams};
use crate::error::{Error, Result};
use crate::grid::{self, BilinearPlan, Grid};

/// Per-layer state kept for the backward pass.
#[derive(Debug, Clone)]
enum LayerTrace {
    Conv { param: usize },
    Pool(PoolOutput),
    Upsample(BilinearPlan),
}

#[derive(Debug, Clone)]
struct BranchTrace {
    /// `acts[0]` is the branch input, `acts[j + 1]` the output of layer `j`.
    acts: Vec<Grid>,
    layers: Vec<LayerTrace>,
    seg_param: usize,
    depth_param: usize,
    resize: BilinearPlan,
}

/// Activations cached by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    branches: Vec<BranchTrace>,
    /// Concatenated per-branch head maps (concat aggregation only).
    fused_inputs: Option<(Grid, Grid)>,
}

/// Result of [`forward`]: full-resolution semantic and depth-bin logits.
#[derive(Debug, Clone)]
pub struct Forward {
    pub seg_logits: Grid,
    pub depth_logits: Grid,
    cache: Option<ForwardCache>,
}

impl Forward {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops cached activations, keeping only the outputs.
    pub fn into_outputs(self) -> (Grid, Grid) {
        (self.seg_logits, self.depth_logits)
    }
}

fn param_index(params: &NetworkParams, name: &str) -> Result<usize> {
    params
        .layers
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| Error::shape("forward", format!("no parameters for layer {name}")))
}

fn conv_act(input: &Grid, spec: &LayerSpec, p: &LayerParams) -> Result<Grid> {
    let mut y = layers::conv_forward(input, spec, p)?;
    if spec.relu {
        layers::relu_in_place(&mut y);
    }
    Ok(y)
}

/// Runs the network on an `H x W x 3` image. With `keep_cache` the activations
/// needed by [`backward`] are retained.
pub fn forward(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    img: &Grid,
    keep_cache: bool,
) -> Result<Forward> {
    if img.channels() != 3 {
        return Err(Error::shape("forward", format!("image must have 3 channels, got {}", img.channels())));
    }
    if img.is_empty() {
        return Err(Error::Empty { op: "forward" });
    }
    params.check_against(cfg)?;
    let (h, w) = (img.height(), img.width());
    cfg.plan(h, w)?;

    let mut traces: Vec<BranchTrace> = Vec::with_capacity(cfg.branches.len());
    let mut seg_maps = Vec::with_capacity(cfg.branches.len());
    let mut depth_maps = Vec::with_capacity(cfg.branches.len());
    for branch in &cfg.branches {
        let input = match cfg.tap_position(branch.input) {
            None => img.clone(),
            Some((tb, tl)) => traces[tb].acts[tl + 1].clone(),
        };
        let mut acts = Vec::with_capacity(branch.layers.len() + 1);
        let mut ltraces = Vec::with_capacity(branch.layers.len());
        acts.push(input);
        for layer in &branch.layers {
            let x = acts.last().expect("branch input present");
            let (y, t) = match layer.kind {
                LayerKind::Conv => {
                    let pi = param_index(params, &layer.name)?;
                    (conv_act(x, layer, &params.layers[pi])?, LayerTrace::Conv { param: pi })
                }
                LayerKind::Pool => {
                    let pooled = layers::maxpool_forward(x, layer)?;
                    (pooled.output.clone(), LayerTrace::Pool(pooled))
                }
                LayerKind::Upsample => {
                    let plan = layers::upsample_plan((x.height(), x.width()), layer)?;
                    (plan.apply(x)?, LayerTrace::Upsample(plan))
                }
            };
            acts.push(y);
            ltraces.push(t);
        }
        let trunk = acts.last().expect("branch input present");
        let seg_param = param_index(params, &branch.seg_head.name)?;
        let depth_param = param_index(params, &branch.depth_head.name)?;
        let seg = layers::conv_forward(trunk, &branch.seg_head, &params.layers[seg_param])?;
        let depth = layers::conv_forward(trunk, &branch.depth_head, &params.layers[depth_param])?;
        let resize = BilinearPlan::new(trunk.height(), trunk.width(), h, w)?;
        seg_maps.push(resize.apply(&seg)?);
        depth_maps.push(resize.apply(&depth)?);
        traces.push(BranchTrace { acts, layers: ltraces, seg_param, depth_param, resize });
    }

    let (seg_logits, depth_logits, fused_inputs) = match cfg.aggregation {
        Aggregation::Sum => (grid::channel_sum(&seg_maps)?, grid::channel_sum(&depth_maps)?, None),
        Aggregation::Concat => {
            let seg_cat = grid::channel_concat(&seg_maps)?;
            let depth_cat = grid::channel_concat(&depth_maps)?;
            let fs = &params.layers[param_index(params, FUSE_SEG)?];
            let fd = &params.layers[param_index(params, FUSE_DEPTH)?];
            let seg_spec = LayerSpec::head(FUSE_SEG, cfg.num_classes);
            let depth_spec = LayerSpec::head(FUSE_DEPTH, cfg.num_bins);
            (
                layers::conv_forward(&seg_cat, &seg_spec, fs)?,
                layers::conv_forward(&depth_cat, &depth_spec, fd)?,
                Some((seg_cat, depth_cat)),
            )
        }
    };
    seg_logits.check_finite("forward")?;
    depth_logits.check_finite("forward")?;
    let cache = keep_cache.then_some(ForwardCache { branches: traces, fused_inputs });
    Ok(Forward { seg_logits, depth_logits, cache })
}

/// Gradients of every parameter given the gradients of both output maps.
pub fn backward(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    fwd: &Forward,
    grad_seg: &Grid,
    grad_depth: &Grid,
) -> Result<NetworkParams> {
    let cache = fwd.cache.as_ref().ok_or(Error::MissingCache { op: "net::backward" })?;
    if !grad_seg.same_shape(&fwd.seg_logits) || !grad_depth.same_shape(&fwd.depth_logits) {
        return Err(Error::shape(
            "net::backward",
            format!(
                "gradients {:?}/{:?} vs outputs {:?}/{:?}",
                grad_seg.dims(),
                grad_depth.dims(),
                fwd.seg_logits.dims(),
                fwd.depth_logits.dims()
            ),
        ));
    }
    let mut grads = params.zeros_like();
    let nb = cfg.branches.len();

    // Gradient reaching each branch's resized head maps.
    let (seg_parts, depth_parts) = match (&cfg.aggregation, &cache.fused_inputs) {
        (Aggregation::Sum, _) => (vec![grad_seg.clone(); nb], vec![grad_depth.clone(); nb]),
        (Aggregation::Concat, Some((seg_cat, depth_cat))) => {
            let mut parts = Vec::with_capacity(2);
            for (name, cat, g, width) in [
                (FUSE_SEG, seg_cat, grad_seg, cfg.num_classes),
                (FUSE_DEPTH, depth_cat, grad_depth, cfg.num_bins),
            ] {
                let pi = param_index(params, name)?;
                let spec = LayerSpec::head(name, width);
                let cg = layers::conv_backward(cat, &spec, &params.layers[pi], g, true)?;
                grads.layers[pi].weight = cg.weight;
                grads.layers[pi].bias = cg.bias;
                let split = grid::channel_split(&cg.input.expect("input grad requested"), &vec![width; nb])?;
                parts.push(split);
            }
            let depth_parts = parts.pop().expect("two fusion layers");
            let seg_parts = parts.pop().expect("two fusion layers");
            (seg_parts, depth_parts)
        }
        (Aggregation::Concat, None) => return Err(Error::MissingCache { op: "net::backward" }),
    };

    // Gradients flowing into pool taps from later branches, keyed by (branch, layer).
    let mut pending: Vec<((usize, usize), Grid)> = Vec::new();
    for b in (0..nb).rev() {
        let branch = &cfg.branches[b];
        let trace = &cache.branches[b];
        let trunk = trace.acts.last().expect("branch input present");
        let mut g_trunk = Grid::zeros(trunk.height(), trunk.width(), trunk.channels());
        for (head, pi, part) in [
            (&branch.seg_head, trace.seg_param, &seg_parts[b]),
            (&branch.depth_head, trace.depth_param, &depth_parts[b]),
        ] {
            let small = trace.resize.backward(part)?;
            let cg = layers::conv_backward(trunk, head, &params.layers[pi], &small, true)?;
            accumulate(&mut grads.layers[pi], &cg.weight, &cg.bias);
            g_trunk.add_scaled(&cg.input.expect("input grad requested"), 1.0)?;
        }

        let tap = cfg.tap_position(branch.input);
        let mut g = g_trunk;
        for j in (0..branch.layers.len()).rev() {
            if let Some(k) = pending.iter().position(|(pos, _)| *pos == (b, j)) {
                let (_, extra) = pending.swap_remove(k);
                g.add_scaled(&extra, 1.0)?;
            }
            let x = &trace.acts[j];
            let need_input = j > 0 || tap.is_some();
            g = match &trace.layers[j] {
                LayerTrace::Conv { param } => {
                    let layer = &branch.layers[j];
                    if layer.relu {
                        layers::relu_backward_in_place(&trace.acts[j + 1], &mut g);
                    }
                    let cg = layers::conv_backward(x, layer, &params.layers[*param], &g, need_input)?;
                    accumulate(&mut grads.layers[*param], &cg.weight, &cg.bias);
                    match cg.input {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                LayerTrace::Pool(pooled) => layers::maxpool_backward(x.dims(), pooled, &g)?,
                LayerTrace::Upsample(plan) => plan.backward(&g)?,
            };
        }
        if let Some(pos) = tap {
            match pending.iter_mut().find(|(p, _)| *p == pos) {
                Some((_, acc)) => acc.add_scaled(&g, 1.0)?,
                None => pending.push((pos, g)),
            }
        }
    }
    Ok(grads)
}

fn accumulate(dst: &mut LayerParams, weight: &[f64], bias: &[f64]) {
    for (a, b) in dst.weight.iter_mut().zip(weight) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(bias) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rel_err;
    use crate::net::config::{BranchInput, BranchSpec, LayerRole};
    use crate::rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Grid {
        let mut r = rng::seeded(seed);
        Grid::from_fn(h, w, 3, |_, _, _| rng::uniform(&mut r, -1.0, 1.0))
    }

    fn tiny_tapped_config(aggregation: Aggregation) -> NetworkConfig {
        NetworkConfig {
            branches: vec![
                BranchSpec {
                    input: BranchInput::Rgb,
                    layers: vec![LayerSpec::conv("a1", 3, 3), LayerSpec::pool("pool2", 3, 3)],
                    seg_head: LayerSpec::head("a-seg", 2),
                    depth_head: LayerSpec::head("a-depth", 3),
                    upsample_factor: 2,
                },
                BranchSpec {
                    input: BranchInput::Pool2,
                    layers: vec![
                        LayerSpec::conv("b1", 4, 3).dilated(2),
                        LayerSpec::upsample("b-up", 2),
                        LayerSpec::conv("b2", 3, 1),
                    ],
                    seg_head: LayerSpec::head("b-seg", 2),
                    depth_head: LayerSpec::head("b-depth", 3),
                    upsample_factor: 2,
                },
            ],
            num_classes: 2,
            num_bins: 3,
            input_size: (7, 7),
            aggregation,
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::zeros(&cfg).unwrap();
        let out = forward(&cfg, &params, &random_image(33, 33, 1), false).unwrap();
        assert!(out.seg_logits.data().iter().all(|&v| v == 0.0));
        assert!(out.depth_logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn desk_output_shapes() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let out = forward(&cfg, &params, &random_image(33, 33, 2), false).unwrap();
        assert_eq!(out.seg_logits.dims(), (33, 33, 4));
        assert_eq!(out.depth_logits.dims(), (33, 33, 10));
        // fully convolutional: other sizes work too
        let out = forward(&cfg, &params, &random_image(20, 27, 2), false).unwrap();
        assert_eq!(out.seg_logits.dims(), (20, 27, 4));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let img = random_image(33, 33, 4);
        let a = forward(&cfg, &params, &img, false).unwrap();
        let b = forward(&cfg, &params, &img, true).unwrap();
        assert_eq!(a.seg_logits, b.seg_logits);
        assert_eq!(a.depth_logits, b.depth_logits);
    }

    #[test]
    fn param_mismatch_is_error() {
        let cfg = NetworkConfig::desk();
        let mut other = cfg.clone();
        other.branches[0].layers[0].out_channels = 5;
        let params = NetworkParams::init(&other, 3).unwrap();
        assert!(forward(&cfg, &params, &random_image(9, 9, 1), false).is_err());
    }

    #[test]
    fn backward_without_cache_is_error() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let out = forward(&cfg, &params, &random_image(9, 9, 1), false).unwrap();
        let gs = Grid::zeros(9, 9, 4);
        let gd = Grid::zeros(9, 9, 10);
        assert_eq!(
            backward(&cfg, &params, &out, &gs, &gd).unwrap_err(),
            Error::MissingCache { op: "net::backward" }
        );
    }

    #[test]
    fn zero_output_grads_give_zero_param_grads() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let out = forward(&cfg, &params, &random_image(11, 11, 1), true).unwrap();
        let g = backward(&cfg, &params, &out, &Grid::zeros(11, 11, 4), &Grid::zeros(11, 11, 10)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trunk_gradient_is_sum_of_head_contributions() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let out = forward(&cfg, &params, &random_image(11, 11, 5), true).unwrap();
        let mut r = rng::seeded(9);
        let gs = Grid::from_fn(11, 11, 4, |_, _, _| rng::uniform(&mut r, -1.0, 1.0));
        let gd = Grid::from_fn(11, 11, 10, |_, _, _| rng::uniform(&mut r, -1.0, 1.0));
        let both = backward(&cfg, &params, &out, &gs, &gd).unwrap();
        let seg_only = backward(&cfg, &params, &out, &gs, &Grid::zeros(11, 11, 10)).unwrap();
        let depth_only = backward(&cfg, &params, &out, &Grid::zeros(11, 11, 4), &gd).unwrap();
        for ((a, s), d) in both.layers.iter().zip(&seg_only.layers).zip(&depth_only.layers) {
            for k in 0..a.weight.len() {
                assert!((a.weight[k] - s.weight[k] - d.weight[k]).abs() < 1e-9);
            }
            if a.role == LayerRole::SegHead {
                assert!(d.weight.iter().all(|&v| v == 0.0));
            }
            if a.role == LayerRole::DepthHead {
                assert!(s.weight.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn heads_are_independent_given_trunk() {
        let cfg = NetworkConfig::desk();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let img = random_image(15, 15, 6);
        let base = forward(&cfg, &params, &img, false).unwrap();
        let mut depth_perturbed = params.clone();
        for l in depth_perturbed.layers.iter_mut().filter(|l| l.role == LayerRole::DepthHead) {
            l.weight.iter_mut().for_each(|w| *w += 0.3);
        }
        let out = forward(&cfg, &depth_perturbed, &img, false).unwrap();
        assert_eq!(out.seg_logits, base.seg_logits);
        assert_ne!(out.depth_logits, base.depth_logits);
        let mut seg_perturbed = params.clone();
        for l in seg_perturbed.layers.iter_mut().filter(|l| l.role == LayerRole::SegHead) {
            l.bias.iter_mut().for_each(|b| *b -= 0.2);
        }
        let out = forward(&cfg, &seg_perturbed, &img, false).unwrap();
        assert_eq!(out.depth_logits, base.depth_logits);
        assert_ne!(out.seg_logits, base.seg_logits);
    }

    fn fd_check(cfg: &NetworkConfig, seed: u64, h: usize, w: usize) {
        let mut params = NetworkParams::init(cfg, seed).unwrap();
        // zero biases put dead-ReLU pre-activations exactly on the kink
        let mut rb = rng::seeded(seed + 3);
        for l in &mut params.layers {
            l.bias.iter_mut().for_each(|b| *b = rng::uniform(&mut rb, -0.3, 0.3));
        }
        let img = random_image(h, w, seed + 1);
        let out = forward(cfg, &params, &img, true).unwrap();
        let mut r = rng::seeded(seed + 2);
        let rs = Grid::from_fn(h, w, cfg.num_classes, |_, _, _| rng::uniform(&mut r, -1.0, 1.0));
        let rd = Grid::from_fn(h, w, cfg.num_bins, |_, _, _| rng::uniform(&mut r, -1.0, 1.0));
        let grads = backward(cfg, &params, &out, &rs, &rd).unwrap().flatten();
        let loss = |p: &NetworkParams| -> f64 {
            let o = forward(cfg, p, &img, false).unwrap();
            let a: f64 = o.seg_logits.data().iter().zip(rs.data()).map(|(x, y)| x * y).sum();
            let b: f64 = o.depth_logits.data().iter().zip(rd.data()).map(|(x, y)| x * y).sum();
            a + b
        };
        let step = 1e-6;
        let mut p = params.clone();
        let n = grads.len();
        let stride = (n / 60).max(1);
        for k in (0..n).step_by(stride) {
            let orig = *p.value_mut(k).unwrap();
            *p.value_mut(k).unwrap() = orig + step;
            let up = loss(&p);
            *p.value_mut(k).unwrap() = orig - step;
            let down = loss(&p);
            *p.value_mut(k).unwrap() = orig;
            let fd = (up - down) / (2.0 * step);
            let err = rel_err(grads[k], fd, 1e-6);
            assert!(err < 1e-4, "param {k}: analytic {} vs fd {fd} (rel {err})", grads[k]);
        }
    }

    #[test]
    fn desk_network_gradients_match_finite_differences() {
        fd_check(&NetworkConfig::desk(), 17, 9, 9);
    }

    #[test]
    fn tapped_branches_gradients_match_finite_differences() {
        let cfg = tiny_tapped_config(Aggregation::Sum);
        cfg.validate().unwrap();
        fd_check(&cfg, 23, 7, 7);
    }

    #[test]
    fn concat_aggregation_gradients_match_finite_differences() {
        let cfg = tiny_tapped_config(Aggregation::Concat);
        fd_check(&cfg, 29, 7, 6);
    }
}
