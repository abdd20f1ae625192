//! Forward and backward kernels for the three layer kinds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{LayerKind, LayerSpec};
use super::params::LayerParams;
use crate::error::{Error, Result};
use crate::grid::{BilinearPlan, Grid};

/// Gradients of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Option<Grid>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

struct Geometry {
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad_h: usize,
    pad_w: usize,
}

fn conv_geometry(input: &Grid, spec: &LayerSpec, p: &LayerParams) -> Result<Geometry> {
    if spec.kind != LayerKind::Conv {
        return Err(Error::config(format!("layer {} is not a conv", spec.name)));
    }
    if input.channels() != p.cin || spec.kernel != (p.kh, p.kw) || spec.out_channels != p.cout {
        return Err(Error::shape(
            "conv_forward",
            format!(
                "layer {}: input {:?}, kernel {:?}/{} outputs vs params {}x{}x{}x{}",
                spec.name,
                input.dims(),
                spec.kernel,
                spec.out_channels,
                p.kh,
                p.kw,
                p.cin,
                p.cout
            ),
        ));
    }
    let (oh, ow) = spec.output_hw(input.height(), input.width()).ok_or_else(|| {
        Error::shape("conv_forward", format!("layer {} collapses {:?}", spec.name, input.dims()))
    })?;
    let (pad_h, pad_w) = spec.pads();
    Ok(Geometry { oh, ow, stride: spec.stride, dilation: spec.dilation, pad_h, pad_w })
}

#[inline]
fn source(o: usize, k: usize, g_stride: usize, dil: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * g_stride + k * dil) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

/// Cross-correlation with zero padding; no activation.
pub fn conv_forward(input: &Grid, spec: &LayerSpec, p: &LayerParams) -> Result<Grid> {
    let g = conv_geometry(input, spec, p)?;
    let (h, w, ci) = input.dims();
    let co = p.cout;
    let mut out = Grid::zeros(g.oh, g.ow, co);
    let src = input.data();
    let dst = out.data_mut();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o_base = (oy * g.ow + ox) * co;
            let acc = &mut dst[o_base..o_base + co];
            acc.copy_from_slice(&p.bias);
            for ky in 0..p.kh {
                let Some(iy) = source(oy, ky, g.stride, g.dilation, g.pad_h, h) else {
                    continue;
                };
                for kx in 0..p.kw {
                    let Some(ix) = source(ox, kx, g.stride, g.dilation, g.pad_w, w) else {
                        continue;
                    };
                    let px = &src[(iy * w + ix) * ci..(iy * w + ix + 1) * ci];
                    let w_base = (ky * p.kw + kx) * ci * co;
                    for (i, &a) in px.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = &p.weight[w_base + i * co..w_base + (i + 1) * co];
                        for (acc_o, &wv) in acc.iter_mut().zip(wrow) {
                            *acc_o += a * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv_forward`] given the gradient of its (pre-activation) output.
/// The input gradient is skipped when `need_input` is false.
pub fn conv_backward(
    input: &Grid,
    spec: &LayerSpec,
    p: &LayerParams,
    grad_out: &Grid,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, spec, p)?;
    if grad_out.dims() != (g.oh, g.ow, p.cout) {
        return Err(Error::shape(
            "conv_backward",
            format!("layer {}: grad {:?} vs output {}x{}x{}", spec.name, grad_out.dims(), g.oh, g.ow, p.cout),
        ));
    }
    let (h, w, ci) = input.dims();
    let co = p.cout;
    let mut gw = vec![0.0; p.weight.len()];
    let mut gb = vec![0.0; co];
    let mut gin = need_input.then(|| Grid::zeros(h, w, ci));
    let src = input.data();
    let gsrc = grad_out.data();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o_base = (oy * g.ow + ox) * co;
            let go = &gsrc[o_base..o_base + co];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..p.kh {
                let Some(iy) = source(oy, ky, g.stride, g.dilation, g.pad_h, h) else {
                    continue;
                };
                for kx in 0..p.kw {
                    let Some(ix) = source(ox, kx, g.stride, g.dilation, g.pad_w, w) else {
                        continue;
                    };
                    let px_base = (iy * w + ix) * ci;
                    let w_base = (ky * p.kw + kx) * ci * co;
                    for i in 0..ci {
                        let a = src[px_base + i];
                        let row = w_base + i * co;
                        let gw_row = &mut gw[row..row + co];
                        if a != 0.0 {
                            for (gwv, &gov) in gw_row.iter_mut().zip(go) {
                                *gwv += a * gov;
                            }
                        }
                        if let Some(gin) = gin.as_mut() {
                            let wrow = &p.weight[row..row + co];
                            let dot: f64 = wrow.iter().zip(go).map(|(a, b)| a * b).sum();
                            gin.data_mut()[px_base + i] += dot;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: gin, weight: gw, bias: gb })
}

/// In-place ReLU.
pub fn relu_in_place(g: &mut Grid) {
    for v in g.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose rectified output was not positive.
pub fn relu_backward_in_place(output: &Grid, grad: &mut Grid) {
    for (gv, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Max-pool output plus, per output element, the flat input index that won.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolOutput {
    pub output: Grid,
    pub argmax: Vec<usize>,
}

pub fn maxpool_forward(input: &Grid, spec: &LayerSpec) -> Result<PoolOutput> {
    if spec.kind != LayerKind::Pool {
        return Err(Error::config(format!("layer {} is not a pool", spec.name)));
    }
    let (h, w, c) = input.dims();
    let (oh, ow) = spec.output_hw(h, w).ok_or_else(|| {
        Error::shape("maxpool_forward", format!("layer {} collapses {:?}", spec.name, input.dims()))
    })?;
    let (pad_h, pad_w) = spec.pads();
    let mut out = Grid::zeros(oh, ow, c);
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..spec.kernel.0 {
                    let Some(iy) = source(oy, ky, spec.stride, spec.dilation, pad_h, h) else {
                        continue;
                    };
                    for kx in 0..spec.kernel.1 {
                        let Some(ix) = source(ox, kx, spec.stride, spec.dilation, pad_w, w) else {
                            continue;
                        };
                        let idx = (iy * w + ix) * c + ch;
                        let v = input.data()[idx];
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out.data_mut()[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(PoolOutput { output: out, argmax })
}

pub fn maxpool_backward(input_dims: (usize, usize, usize), pool: &PoolOutput, grad_out: &Grid) -> Result<Grid> {
    if !grad_out.same_shape(&pool.output) {
        return Err(Error::shape(
            "maxpool_backward",
            format!("{:?} vs {:?}", grad_out.dims(), pool.output.dims()),
        ));
    }
    let mut gin = Grid::zeros(input_dims.0, input_dims.1, input_dims.2);
    for (o, &src) in pool.argmax.iter().enumerate() {
        gin.data_mut()[src] += grad_out.data()[o];
    }
    Ok(gin)
}

/// Bilinear upsampling by the layer's integer factor.
pub fn upsample_plan(input_dims: (usize, usize), spec: &LayerSpec) -> Result<BilinearPlan> {
    let f = spec.upsample_factor;
    BilinearPlan::new(input_dims.0, input_dims.1, input_dims.0 * f, input_dims.1 * f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::config::{LayerRole, ParamShape};
    use crate::rng;

    fn params_for(spec: &LayerSpec, cin: usize, seed: u64) -> LayerParams {
        let shape = ParamShape {
            name: spec.name.clone(),
            role: LayerRole::Trunk,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            cin,
            cout: spec.out_channels,
        };
        let mut p = LayerParams::zeros(&shape);
        let mut r = rng::seeded(seed);
        p.weight.iter_mut().for_each(|w| *w = rng::uniform(&mut r, -1.0, 1.0));
        p.bias.iter_mut().for_each(|b| *b = rng::uniform(&mut r, -1.0, 1.0));
        p
    }

    fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> Grid {
        let mut r = rng::seeded(seed);
        Grid::from_fn(h, w, c, |_, _, _| rng::uniform(&mut r, -1.0, 1.0))
    }

    /// Direct scalar-loop conv, written independently of the fast path.
    fn conv_oracle(input: &Grid, spec: &LayerSpec, p: &LayerParams) -> Grid {
        let (oh, ow) = spec.output_hw(input.height(), input.width()).unwrap();
        let (ph, pw) = spec.pads();
        Grid::from_fn(oh, ow, p.cout, |oy, ox, o| {
            let mut acc = p.bias[o];
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let iy = (oy * spec.stride + ky * spec.dilation) as i64 - ph as i64;
                    let ix = (ox * spec.stride + kx * spec.dilation) as i64 - pw as i64;
                    if iy < 0 || ix < 0 || iy >= input.height() as i64 || ix >= input.width() as i64 {
                        continue;
                    }
                    for i in 0..p.cin {
                        acc += p.weight[p.weight_index(ky, kx, i, o)]
                            * input.get(iy as usize, ix as usize, i);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_1x1_kernel() {
        let spec = LayerSpec::head("id", 3);
        let mut p = params_for(&spec, 3, 0);
        p.weight.iter_mut().for_each(|w| *w = 0.0);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        for c in 0..3 {
            let k = p.weight_index(0, 0, c, c);
            p.weight[k] = 1.0;
        }
        let x = random_grid(4, 5, 3, 1);
        assert_eq!(conv_forward(&x, &spec, &p).unwrap(), x);
    }

    #[test]
    fn zero_kernel_bias_one() {
        let spec = LayerSpec::conv("z", 2, 3).linear();
        let mut p = params_for(&spec, 3, 0);
        p.weight.iter_mut().for_each(|w| *w = 0.0);
        p.bias.iter_mut().for_each(|b| *b = 1.0);
        let y = conv_forward(&random_grid(5, 5, 3, 2), &spec, &p).unwrap();
        assert_eq!(y.dims(), (5, 5, 2));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn derivative_kernel_on_ramp() {
        let mut spec = LayerSpec::conv("d", 1, 1).linear().with_padding(0);
        spec.kernel = (1, 3);
        let mut p = params_for(&spec, 1, 0);
        p.weight = vec![-1.0, 0.0, 1.0];
        p.bias = vec![0.0];
        let ramp = Grid::from_vec(1, 5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = conv_forward(&ramp, &spec, &p).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0, 2.0]);
        assert_eq!(conv_oracle(&ramp, &spec, &p).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn fast_conv_matches_oracle_with_stride_and_dilation() {
        for (stride, dil, pad) in [(1, 1, None), (2, 1, Some(1)), (1, 2, None), (2, 2, Some(0))] {
            let mut spec = LayerSpec::conv("c", 4, 3).dilated(dil).with_stride(stride).linear();
            spec.padding = pad;
            let p = params_for(&spec, 3, 11);
            let x = random_grid(9, 8, 3, 12);
            let fast = conv_forward(&x, &spec, &p).unwrap();
            let slow = conv_oracle(&x, &spec, &p);
            assert_eq!(fast.dims(), slow.dims());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let spec = LayerSpec::conv("c", 4, 3);
        let p = params_for(&spec, 3, 0);
        assert!(matches!(conv_forward(&Grid::zeros(5, 5, 2), &spec, &p), Err(Error::Shape { .. })));
    }

    /// Central finite differences of `sum(r * conv(x))` against the analytic backward.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let h = 1e-4;
        for (stride, dil) in [(1, 1), (2, 1), (1, 2)] {
            let spec = LayerSpec::conv("c", 3, 3).dilated(dil).with_stride(stride).linear();
            let mut p = params_for(&spec, 2, 5);
            let x = random_grid(5, 5, 2, 6);
            let y = conv_forward(&x, &spec, &p).unwrap();
            let r = random_grid(y.height(), y.width(), y.channels(), 7);
            let loss = |x: &Grid, p: &LayerParams| -> f64 {
                let y = conv_forward(x, &spec, p).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let g = conv_backward(&x, &spec, &p, &r, true).unwrap();
            for k in 0..p.weight.len() {
                let orig = p.weight[k];
                p.weight[k] = orig + h;
                let up = loss(&x, &p);
                p.weight[k] = orig - h;
                let down = loss(&x, &p);
                p.weight[k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(crate::math::rel_err(g.weight[k], fd, 1e-6) < 1e-4, "w{k}");
            }
            for k in 0..p.bias.len() {
                let orig = p.bias[k];
                p.bias[k] = orig + h;
                let up = loss(&x, &p);
                p.bias[k] = orig - h;
                let down = loss(&x, &p);
                p.bias[k] = orig;
                assert!(crate::math::rel_err(g.bias[k], (up - down) / (2.0 * h), 1e-6) < 1e-4);
            }
            let gin = g.input.unwrap();
            let mut xp = x.clone();
            for k in 0..x.data().len() {
                let orig = xp.data()[k];
                xp.data_mut()[k] = orig + h;
                let up = loss(&xp, &p);
                xp.data_mut()[k] = orig - h;
                let down = loss(&xp, &p);
                xp.data_mut()[k] = orig;
                assert!(crate::math::rel_err(gin.data()[k], (up - down) / (2.0 * h), 1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let spec = LayerSpec::pool("p", 1, 2).with_padding(0);
        let x = Grid::from_vec(2, 4, 1, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, -1.0]).unwrap();
        let p = maxpool_forward(&x, &spec).unwrap();
        assert_eq!(p.output.data(), &[5.0, 7.0]);
        let g = maxpool_backward(x.dims(), &p, &Grid::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn maxpool_padded_stride_two_shape() {
        let spec = LayerSpec::pool("p", 2, 3);
        let p = maxpool_forward(&random_grid(33, 33, 2, 3), &spec).unwrap();
        assert_eq!(p.output.dims(), (17, 17, 2));
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        let spec = LayerSpec::pool("p", 2, 3);
        let x = random_grid(6, 5, 2, 21);
        let pooled = maxpool_forward(&x, &spec).unwrap();
        let r = random_grid(pooled.output.height(), pooled.output.width(), 2, 22);
        let gin = maxpool_backward(x.dims(), &pooled, &r).unwrap();
        let loss = |x: &Grid| -> f64 {
            let y = maxpool_forward(x, &spec).unwrap().output;
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let mut xp = x.clone();
        for k in 0..x.data().len() {
            let orig = xp.data()[k];
            xp.data_mut()[k] = orig + h;
            let up = loss(&xp);
            xp.data_mut()[k] = orig - h;
            let down = loss(&xp);
            xp.data_mut()[k] = orig;
            assert!(crate::math::rel_err(gin.data()[k], (up - down) / (2.0 * h), 1e-6) < 1e-4);
        }
    }

    #[test]
    fn upsample_doubles_dims() {
        let spec = LayerSpec::upsample("u", 2);
        let plan = upsample_plan((3, 4), &spec).unwrap();
        let y = plan.apply(&random_grid(3, 4, 2, 1)).unwrap();
        assert_eq!(y.dims(), (6, 8, 2));
    }
}
