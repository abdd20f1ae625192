use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{LayerRole, NetworkConfig, ParamShape};
use crate::error::{Error, Result};
use crate::math;
use crate::rng;

/// Weights (`[kh][kw][in][out]`) and bias of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub role: LayerRole,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(shape: &ParamShape) -> Self {
        LayerParams {
            name: shape.name.clone(),
            role: shape.role,
            kh: shape.kh,
            kw: shape.kw,
            cin: shape.cin,
            cout: shape.cout,
            weight: vec![0.0; shape.weight_len()],
            bias: vec![0.0; shape.cout],
        }
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, i: usize, o: usize) -> usize {
        ((ky * self.kw + kx) * self.cin + i) * self.cout + o
    }

    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn same_shape(&self, other: &LayerParams) -> bool {
        self.kh == other.kh && self.kw == other.kw && self.cin == other.cin && self.cout == other.cout
    }
}

/// Every learnable array of a network, in [`NetworkConfig::param_shapes`] order.
/// The same type carries gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// Seed the weights were drawn with (0 for zero-initialized sets).
    pub seed: u64,
}

impl NetworkParams {
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        let layers = cfg.param_shapes()?.iter().map(LayerParams::zeros).collect();
        Ok(NetworkParams { layers, seed: 0 })
    }

    /// Zero-mean uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        params.seed = seed;
        let mut rng = rng::seeded(seed);
        for layer in &mut params.layers {
            let bound = 1.0 / math::sqrt(layer.fan_in() as f64);
            for w in &mut layer.weight {
                *w = rng::uniform(&mut rng, -bound, bound);
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                    name: l.name.clone(),
                    ..*l
                })
                .collect(),
            seed: 0,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Checks the set matches `cfg` layer for layer.
    pub fn check_against(&self, cfg: &NetworkConfig) -> Result<()> {
        let shapes = cfg.param_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::shape(
                "NetworkParams",
                format!("{} layers for a config with {}", self.layers.len(), shapes.len()),
            ));
        }
        for (s, l) in shapes.iter().zip(&self.layers) {
            let ok = s.name == l.name
                && (s.kh, s.kw, s.cin, s.cout) == (l.kh, l.kw, l.cin, l.cout)
                && l.weight.len() == s.weight_len()
                && l.bias.len() == s.cout;
            if !ok {
                return Err(Error::shape(
                    "NetworkParams",
                    format!(
                        "layer {} is {}x{}x{}x{}, config wants {} {}x{}x{}x{}",
                        l.name, l.kh, l.kw, l.cin, l.cout, s.name, s.kh, s.kw, s.cin, s.cout
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &NetworkParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("NetworkParams::add_scaled", "layouts differ"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// Flat view of all values, layer by layer, weights before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to flat element `k` in [`NetworkParams::flatten`] order.
    pub fn value_mut(&mut self, mut k: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            if k < l.weight.len() {
                return l.weight.get_mut(k);
            }
            k -= l.weight.len();
            if k < l.bias.len() {
                return l.bias.get_mut(k);
            }
            k -= l.bias.len();
        }
        None
    }
}
