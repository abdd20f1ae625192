//! Branch topology: which layers each branch runs, where it reads its input from, and
//! how its head maps are brought back to image resolution.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LayerKind {
    Conv,
    Pool,
    Upsample,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels. For pools this must equal the input channel count.
    #[cfg_attr(feature = "serde", serde(default))]
    pub out_channels: usize,
    #[cfg_attr(feature = "serde", serde(default = "unit_kernel"))]
    pub kernel: (usize, usize),
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub stride: usize,
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub dilation: usize,
    /// Symmetric zero padding; `None` pads so stride-1 layers keep their size.
    #[cfg_attr(feature = "serde", serde(default))]
    pub padding: Option<usize>,
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub upsample_factor: usize,
    /// Rectify the conv output.
    #[cfg_attr(feature = "serde", serde(default))]
    pub relu: bool,
}

#[cfg(feature = "serde")]
fn one() -> usize {
    1
}

#[cfg(feature = "serde")]
fn unit_kernel() -> (usize, usize) {
    (1, 1)
}

impl LayerSpec {
    /// `k x k` convolution with ReLU and size-preserving padding.
    pub fn conv(name: &str, out_channels: usize, k: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv,
            out_channels,
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            padding: None,
            upsample_factor: 1,
            relu: true,
        }
    }

    /// Linear `1 x 1` convolution used for the seg/depth heads.
    pub fn head(name: &str, out_channels: usize) -> Self {
        LayerSpec { relu: false, ..Self::conv(name, out_channels, 1) }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = Some(padding);
        self
    }

    pub fn linear(mut self) -> Self {
        self.relu = false;
        self
    }

    /// Max pool, `k x k` window, stride 2.
    pub fn pool(name: &str, channels: usize, k: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Pool,
            out_channels: channels,
            kernel: (k, k),
            stride: 2,
            dilation: 1,
            padding: None,
            upsample_factor: 1,
            relu: false,
        }
    }

    pub fn upsample(name: &str, factor: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Upsample,
            out_channels: 0,
            kernel: (1, 1),
            stride: 1,
            dilation: 1,
            padding: None,
            upsample_factor: factor,
            relu: false,
        }
    }

    /// Padding actually applied on each axis.
    pub fn pads(&self) -> (usize, usize) {
        match self.padding {
            Some(p) => (p, p),
            None => (
                self.dilation * (self.kernel.0 - 1) / 2,
                self.dilation * (self.kernel.1 - 1) / 2,
            ),
        }
    }

    /// Output spatial size for an input of `h x w`, or `None` if it collapses.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Upsample => Some((h * self.upsample_factor, w * self.upsample_factor)),
            LayerKind::Conv | LayerKind::Pool => {
                let (ph, pw) = self.pads();
                let span_h = self.dilation * (self.kernel.0 - 1) + 1;
                let span_w = self.dilation * (self.kernel.1 - 1) + 1;
                let eh = (h + 2 * ph).checked_sub(span_h)?;
                let ew = (w + 2 * pw).checked_sub(span_w)?;
                Some((eh / self.stride + 1, ew / self.stride + 1))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::config(format!("layer {}: {why}", self.name)));
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if self.dilation == 0 {
            return bad("dilation must be >= 1");
        }
        match self.kind {
            LayerKind::Conv => {
                if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) {
                    return bad("conv kernel dimensions must be odd");
                }
                if self.out_channels == 0 {
                    return bad("conv needs at least one output channel");
                }
            }
            LayerKind::Pool => {
                if self.kernel.0 == 0 || self.kernel.1 == 0 {
                    return bad("pool kernel must be non-empty");
                }
            }
            LayerKind::Upsample => {
                if !matches!(self.upsample_factor, 2 | 4 | 8) {
                    return bad("upsample factor must be 2, 4 or 8");
                }
            }
        }
        Ok(())
    }
}

/// Where a branch reads its input: the image or the output of a named pool layer of
/// an earlier branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BranchInput {
    Rgb,
    Pool2,
    Pool3,
    Pool4,
}

impl BranchInput {
    pub fn layer_name(self) -> Option<&'static str> {
        match self {
            BranchInput::Rgb => None,
            BranchInput::Pool2 => Some("pool2"),
            BranchInput::Pool3 => Some("pool3"),
            BranchInput::Pool4 => Some("pool4"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BranchSpec {
    pub input: BranchInput,
    pub layers: Vec<LayerSpec>,
    pub seg_head: LayerSpec,
    pub depth_head: LayerSpec,
    /// Nominal scale of the branch output relative to the image (1 = full resolution).
    /// Head maps are always resampled to exactly the image size.
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub upsample_factor: usize,
}

/// How per-branch head maps are combined into the final logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Aggregation {
    /// Elementwise sum of the resampled head maps.
    #[default]
    Sum,
    /// Channel concatenation followed by a learned linear `1 x 1` fusion per task.
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NetworkConfig {
    pub branches: Vec<BranchSpec>,
    pub num_classes: usize,
    pub num_bins: usize,
    /// Nominal `(height, width)`; the network itself is fully convolutional.
    pub input_size: (usize, usize),
    #[cfg_attr(feature = "serde", serde(default))]
    pub aggregation: Aggregation,
}

/// Which task a parameterized layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Trunk,
    SegHead,
    DepthHead,
}

/// Shape of one parameterized layer. Weights are stored `[kh][kw][in][out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub role: LayerRole,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ParamShape {
    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout
    }
}

/// Spatial and channel shape at every stage of every branch for one input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchPlan {
    pub input_shape: (usize, usize, usize),
    pub layer_shapes: Vec<(usize, usize, usize)>,
}

impl BranchPlan {
    pub fn output_shape(&self) -> (usize, usize, usize) {
        *self.layer_shapes.last().unwrap_or(&self.input_shape)
    }
}

pub const FUSE_SEG: &str = "fuse-seg";
pub const FUSE_DEPTH: &str = "fuse-depth";

impl NetworkConfig {
    /// Two-branch configuration that trains in seconds on 33x33 inputs.
    pub fn desk() -> Self {
        let c = 4;
        let nd = 10;
        NetworkConfig {
            branches: vec![
                BranchSpec {
                    input: BranchInput::Rgb,
                    layers: vec![LayerSpec::conv("conv1-1", 8, 3), LayerSpec::conv("conv1-2", 8, 3)],
                    seg_head: LayerSpec::head("conv1-seg", c),
                    depth_head: LayerSpec::head("conv1-depth", nd),
                    upsample_factor: 1,
                },
                BranchSpec {
                    input: BranchInput::Rgb,
                    layers: vec![
                        LayerSpec::conv("conv2-1", 8, 3),
                        LayerSpec::pool("pool2", 8, 3),
                        LayerSpec::conv("conv2-2", 16, 3),
                        LayerSpec::conv("conv2-3", 16, 3).dilated(2),
                    ],
                    seg_head: LayerSpec::head("conv2-seg", c),
                    depth_head: LayerSpec::head("conv2-depth", nd),
                    upsample_factor: 2,
                },
            ],
            num_classes: c,
            num_bins: nd,
            input_size: (33, 33),
            aggregation: Aggregation::Sum,
        }
    }

    /// The five-branch topology at full width: 40 classes, 50 depth bins, 513x513 input.
    pub fn full() -> Self {
        let c = 40;
        let nd = 50;
        let heads = |b: usize| {
            (
                LayerSpec::head(&format!("conv{b}-seg"), c),
                LayerSpec::head(&format!("conv{b}-depth"), nd),
            )
        };
        let branch = |b: usize, input, layers, up| {
            let (seg_head, depth_head) = heads(b);
            BranchSpec { input, layers, seg_head, depth_head, upsample_factor: up }
        };
        NetworkConfig {
            branches: vec![
                branch(
                    1,
                    BranchInput::Rgb,
                    vec![LayerSpec::conv("conv1-1", 64, 3), LayerSpec::conv("conv1-2", 64, 3)],
                    1,
                ),
                branch(
                    2,
                    BranchInput::Rgb,
                    vec![
                        LayerSpec::conv("conv2-1", 64, 3),
                        LayerSpec::conv("conv2-2", 64, 3),
                        LayerSpec::pool("pool2", 64, 3),
                        LayerSpec::conv("conv2-3", 128, 3),
                    ],
                    2,
                ),
                branch(
                    3,
                    BranchInput::Pool2,
                    vec![
                        LayerSpec::conv("conv3-1", 128, 3),
                        LayerSpec::conv("conv3-2", 128, 3),
                        LayerSpec::pool("pool3", 128, 3),
                        LayerSpec::conv("conv3-3", 128, 3),
                        LayerSpec::conv("conv3-4", 128, 3),
                    ],
                    4,
                ),
                branch(
                    4,
                    BranchInput::Pool3,
                    vec![
                        LayerSpec::conv("conv4-1", 256, 3),
                        LayerSpec::conv("conv4-2", 256, 3),
                        LayerSpec::pool("pool4", 256, 3),
                        LayerSpec::conv("conv4-3", 128, 3),
                        LayerSpec::conv("conv4-4", 128, 3),
                    ],
                    4,
                ),
                branch(
                    5,
                    BranchInput::Pool4,
                    vec![
                        LayerSpec::conv("conv5-1", 512, 3),
                        LayerSpec::conv("conv5-2", 512, 3),
                        // stride 1 keeps branch 5 at output stride 8; conv5-3 dilates instead
                        LayerSpec::pool("pool5", 512, 3).with_stride(1),
                        LayerSpec::conv("conv5-3", 1024, 3).dilated(2),
                        LayerSpec::conv("conv5-4", 1024, 1),
                    ],
                    8,
                ),
            ],
            num_classes: c,
            num_bins: nd,
            input_size: (513, 513),
            aggregation: Aggregation::Sum,
        }
    }

    /// Checks structural invariants that do not depend on the input size.
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::config("network needs at least one branch"));
        }
        if self.num_classes == 0 || self.num_classes >= crate::IGNORE_LABEL as usize {
            return Err(Error::config(format!(
                "num_classes must be in 1..{}",
                crate::IGNORE_LABEL
            )));
        }
        if self.num_bins < 2 {
            return Err(Error::config("num_bins must be >= 2"));
        }
        let mut names: Vec<&str> = Vec::new();
        for (b, branch) in self.branches.iter().enumerate() {
            if let Some(tap) = branch.input.layer_name() {
                let produced = self.branches[..b].iter().any(|earlier| {
                    earlier.layers.iter().any(|l| l.kind == LayerKind::Pool && l.name == tap)
                });
                if !produced {
                    return Err(Error::config(format!(
                        "branch {} reads {tap}, which no earlier branch produces",
                        b + 1
                    )));
                }
            }
            if !matches!(branch.upsample_factor, 1 | 2 | 4 | 8) {
                return Err(Error::config(format!(
                    "branch {} upsample factor must be 1, 2, 4 or 8",
                    b + 1
                )));
            }
            for layer in &branch.layers {
                layer.validate()?;
            }
            for (head, want) in
                [(&branch.seg_head, self.num_classes), (&branch.depth_head, self.num_bins)]
            {
                if head.kind != LayerKind::Conv || head.kernel != (1, 1) || head.stride != 1 {
                    return Err(Error::config(format!("head {} must be a 1x1 conv", head.name)));
                }
                if head.out_channels != want {
                    return Err(Error::config(format!(
                        "head {} has {} outputs, expected {want}",
                        head.name, head.out_channels
                    )));
                }
            }
            let all = branch.layers.iter().chain([&branch.seg_head, &branch.depth_head]);
            for layer in all {
                if names.contains(&layer.name.as_str()) {
                    return Err(Error::config(format!("duplicate layer name {}", layer.name)));
                }
                names.push(&layer.name);
            }
        }
        Ok(())
    }

    /// Position `(branch, layer)` of the pool layer feeding `input`.
    pub fn tap_position(&self, input: BranchInput) -> Option<(usize, usize)> {
        let name = input.layer_name()?;
        self.branches.iter().enumerate().find_map(|(b, br)| {
            br.layers
                .iter()
                .position(|l| l.kind == LayerKind::Pool && l.name == name)
                .map(|j| (b, j))
        })
    }

    /// Propagates an `h x w x 3` input through every branch.
    pub fn plan(&self, h: usize, w: usize) -> Result<Vec<BranchPlan>> {
        self.validate()?;
        let mut plans: Vec<BranchPlan> = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let input_shape = match self.tap_position(branch.input) {
                None => (h, w, 3),
                Some((tb, tl)) => plans[tb].layer_shapes[tl],
            };
            let mut shape = input_shape;
            let mut layer_shapes = Vec::with_capacity(branch.layers.len());
            for layer in &branch.layers {
                let (oh, ow) = layer.output_hw(shape.0, shape.1).ok_or_else(|| {
                    Error::config(format!(
                        "layer {} in branch {} collapses a {}x{} input",
                        layer.name,
                        b + 1,
                        shape.0,
                        shape.1
                    ))
                })?;
                let oc = match layer.kind {
                    LayerKind::Conv => layer.out_channels,
                    LayerKind::Pool => {
                        if layer.out_channels != 0 && layer.out_channels != shape.2 {
                            return Err(Error::config(format!(
                                "pool {} declares {} channels but receives {}",
                                layer.name, layer.out_channels, shape.2
                            )));
                        }
                        shape.2
                    }
                    LayerKind::Upsample => shape.2,
                };
                shape = (oh, ow, oc);
                layer_shapes.push(shape);
            }
            plans.push(BranchPlan { input_shape, layer_shapes });
        }
        Ok(plans)
    }

    /// Parameterized layers in storage order: per branch its convs, then seg head,
    /// then depth head; finally the two fusion layers under concat aggregation.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        // channel counts do not depend on spatial size
        let (h, w) = (64usize.max(self.input_size.0), 64usize.max(self.input_size.1));
        let plans = self.plan(h, w)?;
        let mut shapes = Vec::new();
        for (branch, plan) in self.branches.iter().zip(&plans) {
            let mut cin = plan.input_shape.2;
            for (layer, shape) in branch.layers.iter().zip(&plan.layer_shapes) {
                if layer.kind == LayerKind::Conv {
                    shapes.push(ParamShape {
                        name: layer.name.clone(),
                        role: LayerRole::Trunk,
                        kh: layer.kernel.0,
                        kw: layer.kernel.1,
                        cin,
                        cout: layer.out_channels,
                    });
                }
                cin = shape.2;
            }
            for (head, role) in
                [(&branch.seg_head, LayerRole::SegHead), (&branch.depth_head, LayerRole::DepthHead)]
            {
                shapes.push(ParamShape {
                    name: head.name.clone(),
                    role,
                    kh: 1,
                    kw: 1,
                    cin,
                    cout: head.out_channels,
                });
            }
        }
        if self.aggregation == Aggregation::Concat {
            let nb = self.branches.len();
            shapes.push(ParamShape {
                name: FUSE_SEG.to_string(),
                role: LayerRole::SegHead,
                kh: 1,
                kw: 1,
                cin: nb * self.num_classes,
                cout: self.num_classes,
            });
            shapes.push(ParamShape {
                name: FUSE_DEPTH.to_string(),
                role: LayerRole::DepthHead,
                kh: 1,
                kw: 1,
                cin: nb * self.num_bins,
                cout: self.num_bins,
            });
        }
        Ok(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        let cfg = NetworkConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.branches.len(), 2);
        assert_eq!((cfg.num_classes, cfg.num_bins, cfg.input_size), (4, 10, (33, 33)));
        let plans = cfg.plan(33, 33).unwrap();
        assert_eq!(plans[0].output_shape(), (33, 33, 8));
        assert_eq!(plans[1].output_shape(), (17, 17, 16));
    }

    #[test]
    fn full_config_layers() {
        let cfg = NetworkConfig::full();
        cfg.validate().unwrap();
        let ups: Vec<usize> = cfg.branches.iter().map(|b| b.upsample_factor).collect();
        assert_eq!(ups, vec![1, 2, 4, 4, 8]);
        let inputs: Vec<BranchInput> = cfg.branches.iter().map(|b| b.input).collect();
        assert_eq!(
            inputs,
            vec![
                BranchInput::Rgb,
                BranchInput::Rgb,
                BranchInput::Pool2,
                BranchInput::Pool3,
                BranchInput::Pool4
            ]
        );
        let widths: Vec<usize> = cfg.branches[4].layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(widths, vec![512, 512, 512, 1024, 1024]);
        assert_eq!(cfg.branches[4].layers[4].kernel, (1, 1));
        assert_eq!((cfg.num_classes, cfg.num_bins, cfg.input_size), (40, 50, (513, 513)));
        let plans = cfg.plan(513, 513).unwrap();
        let sizes: Vec<usize> = plans.iter().map(|p| p.output_shape().0).collect();
        // stride 1, 2, 4, 8, 8 with 3x3 / pad 1 pools
        assert_eq!(sizes, vec![513, 257, 129, 65, 65]);
        for p in &plans {
            assert!(p.output_shape().2 > 0);
        }
    }

    #[test]
    fn full_param_count() {
        let shapes = NetworkConfig::full().param_shapes().unwrap();
        // 2 + 3 + 4 + 4 + 4 convs, plus 2 heads per branch
        assert_eq!(shapes.len(), 17 + 10);
        let conv53 = shapes.iter().find(|s| s.name == "conv5-3").unwrap();
        assert_eq!((conv53.cin, conv53.cout, conv53.kh), (512, 1024, 3));
        let head5 = shapes.iter().find(|s| s.name == "conv5-seg").unwrap();
        assert_eq!((head5.cin, head5.cout), (1024, 40));
    }

    #[test]
    fn rejects_even_kernel() {
        let mut cfg = NetworkConfig::desk();
        cfg.branches[0].layers[0].kernel = (2, 2);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_upsample_factor() {
        let mut cfg = NetworkConfig::desk();
        cfg.branches[0].layers.push(LayerSpec::upsample("up", 3));
        assert!(cfg.validate().is_err());
        cfg.branches[0].layers.pop();
        cfg.branches[1].upsample_factor = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unproduced_pool_input() {
        let mut cfg = NetworkConfig::desk();
        cfg.branches[0].input = BranchInput::Pool2;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.branches[1].input = BranchInput::Pool3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_head_width_mismatch() {
        let mut cfg = NetworkConfig::desk();
        cfg.branches[1].depth_head.out_channels = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_zero_dilation() {
        let mut cfg = NetworkConfig::desk();
        cfg.branches[1].layers[2].dilation = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conv_output_arithmetic() {
        let l = LayerSpec::conv("c", 4, 3).with_stride(2).with_padding(0);
        assert_eq!(l.output_hw(9, 7), Some((4, 3)));
        let d = LayerSpec::conv("d", 4, 3).dilated(2);
        assert_eq!(d.pads(), (2, 2));
        assert_eq!(d.output_hw(10, 10), Some((10, 10)));
        let v = LayerSpec::conv("v", 1, 5).with_padding(0);
        assert_eq!(v.output_hw(3, 3), None);
    }
}
