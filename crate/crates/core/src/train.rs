//! Staged SGD-momentum training: semantic only, then joint semantic and depth, then
//! joint with the CRF-refined semantic loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::crf::{self, CrfFeatures, CrfParams, Filtering, NUM_KERNELS};
use crate::data::{self, Sample, Split};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};
use crate::losses::{self, DepthBinning};
use crate::net::{self, LayerRole, NetworkConfig, NetworkParams};

/// Which losses a stage optimizes. The order of variants is the stage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StageLosses {
    Sem,
    SemDepth,
    SemDepthCrf,
}

impl StageLosses {
    /// 1-based stage number.
    pub fn stage(self) -> u8 {
        match self {
            StageLosses::Sem => 1,
            StageLosses::SemDepth => 2,
            StageLosses::SemDepthCrf => 3,
        }
    }

    pub fn from_stage(stage: u8) -> Option<Self> {
        match stage {
            1 => Some(StageLosses::Sem),
            2 => Some(StageLosses::SemDepth),
            3 => Some(StageLosses::SemDepthCrf),
            _ => None,
        }
    }

    pub fn uses_depth(self) -> bool {
        self != StageLosses::Sem
    }

    pub fn uses_crf(self) -> bool {
        self == StageLosses::SemDepthCrf
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageSpec {
    pub losses: StageLosses,
    pub iterations: u64,
    pub lr_net: f64,
    pub lr_crf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the semantic term once depth is active.
    pub lambda: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_net, self.lr_crf, self.momentum, self.weight_decay, self.lambda];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::config(format!(
                "stage {}: rates, momentum, weight decay and lambda must be finite and >= 0",
                self.losses.stage()
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config(format!("stage {} needs at least one iteration", self.losses.stage())));
        }
        Ok(())
    }
}

/// Three stages run in order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Schedule {
    pub stages: Vec<StageSpec>,
    pub crf_iterations: usize,
}

impl Schedule {
    /// 160K semantic iterations at lr 1e-10, 10K joint, 10K with the CRF at 1e-13
    /// (net at 1e-16); momentum 0.99, weight decay 0.0005, lambda 1e-6.
    pub fn full() -> Self {
        let base = StageSpec {
            losses: StageLosses::Sem,
            iterations: 160_000,
            lr_net: 1e-10,
            lr_crf: 0.0,
            momentum: 0.99,
            weight_decay: 0.0005,
            lambda: 1e-6,
        };
        Schedule {
            stages: vec![
                base,
                StageSpec { losses: StageLosses::SemDepth, iterations: 10_000, ..base },
                StageSpec {
                    losses: StageLosses::SemDepthCrf,
                    iterations: 10_000,
                    lr_net: 1e-16,
                    lr_crf: 1e-13,
                    ..base
                },
            ],
            crf_iterations: 5,
        }
    }

    /// 500 / 200 / 200 iterations tuned for the desk network on synthetic scenes.
    pub fn desk() -> Self {
        let base = StageSpec {
            losses: StageLosses::Sem,
            iterations: 500,
            lr_net: 5e-5,
            lr_crf: 0.0,
            momentum: 0.5,
            weight_decay: 0.0005,
            lambda: 1e-3,
        };
        Schedule {
            stages: vec![
                base,
                StageSpec { losses: StageLosses::SemDepth, iterations: 200, lr_net: 0.1, momentum: 0.9, ..base },
                StageSpec {
                    losses: StageLosses::SemDepthCrf,
                    iterations: 200,
                    lr_net: 1e-7,
                    lr_crf: 1e-5,
                    momentum: 0.9,
                    ..base
                },
            ],
            crf_iterations: 5,
        }
    }

    pub fn stage(&self, losses: StageLosses) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.losses == losses)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if s.losses.stage() as usize != k + 1 {
                return Err(Error::config(format!(
                    "schedule entry {} is stage {}",
                    k + 1,
                    s.losses.stage()
                )));
            }
        }
        if self.crf_iterations == 0 {
            return Err(Error::config("CRF needs at least one mean-field iteration"));
        }
        Ok(())
    }
}

/// Momentum buffers for the CRF matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfVelocity {
    pub mu: Vec<f64>,
    pub w: [Vec<f64>; NUM_KERNELS],
}

impl CrfVelocity {
    pub fn zeros(num_classes: usize) -> Self {
        let n = num_classes * num_classes;
        CrfVelocity { mu: vec![0.0; n], w: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub velocity: NetworkParams,
    pub crf: CrfParams,
    pub crf_velocity: CrfVelocity,
    /// Iterations run across all stages.
    pub iteration: u64,
    /// Iterations run in the stage in progress.
    pub stage_iteration: u64,
    pub stages_completed: u8,
    pub seed: u64,
}

impl TrainState {
    /// Fresh weights drawn from `seed`, CRF at its standard initialization.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let params = NetworkParams::init(cfg, seed)?;
        Ok(TrainState {
            velocity: params.zeros_like(),
            params,
            crf: CrfParams::standard_init(cfg.num_classes),
            crf_velocity: CrfVelocity::zeros(cfg.num_classes),
            iteration: 0,
            stage_iteration: 0,
            stages_completed: 0,
            seed,
        })
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        self.params.check_against(cfg)?;
        if !self.params.same_layout(&self.velocity) {
            return Err(Error::shape("TrainState", "momentum buffers do not mirror the parameters"));
        }
        self.crf.validate()?;
        let n = self.crf.num_classes * self.crf.num_classes;
        if self.crf.num_classes != cfg.num_classes
            || self.crf_velocity.mu.len() != n
            || self.crf_velocity.w.iter().any(|w| w.len() != n)
        {
            return Err(Error::shape("TrainState", "CRF parameters do not match the class count"));
        }
        Ok(())
    }
}

/// `v <- m v - lr (g + wd theta); theta <- theta + v`.
#[inline]
fn sgd_update(theta: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, wd: f64) {
    for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v - lr * (g + wd * *t);
        *t += *v;
    }
}

/// One momentum step on the network layers whose role is in `roles`.
pub fn sgd_step(
    params: &mut NetworkParams,
    velocity: &mut NetworkParams,
    grads: &NetworkParams,
    spec: &StageSpec,
    roles: &[LayerRole],
) -> Result<()> {
    if !params.same_layout(velocity) || !params.same_layout(grads) {
        return Err(Error::shape("sgd_step", "parameter, momentum and gradient layouts differ"));
    }
    for ((p, v), g) in params.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
        if !roles.contains(&p.role) {
            continue;
        }
        sgd_update(&mut p.weight, &mut v.weight, &g.weight, spec.lr_net, spec.momentum, spec.weight_decay);
        sgd_update(&mut p.bias, &mut v.bias, &g.bias, spec.lr_net, spec.momentum, spec.weight_decay);
    }
    Ok(())
}

/// One momentum step on `mu` and the kernel weights. Bandwidths stay fixed.
pub fn crf_sgd_step(
    crf: &mut CrfParams,
    velocity: &mut CrfVelocity,
    grads: &crf::CrfGrads,
    spec: &StageSpec,
) -> Result<()> {
    let n = crf.num_classes * crf.num_classes;
    if velocity.mu.len() != n || grads.mu.len() != n {
        return Err(Error::shape("crf_sgd_step", "CRF gradient shape differs"));
    }
    sgd_update(&mut crf.mu, &mut velocity.mu, &grads.mu, spec.lr_crf, spec.momentum, spec.weight_decay);
    for m in 0..NUM_KERNELS {
        sgd_update(&mut crf.w[m], &mut velocity.w[m], &grads.w[m], spec.lr_crf, spec.momentum, spec.weight_decay);
    }
    Ok(())
}

/// Training samples with preprocessed depth and network-ready images.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    samples: Vec<Sample>,
    inputs: Vec<Grid>,
}

impl TrainingSet {
    pub fn new(samples: &[Sample], binning: &DepthBinning) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty { op: "TrainingSet" });
        }
        let samples = samples
            .iter()
            .map(|s| data::prepare_training_sample(s, Split::Train, binning))
            .collect::<Result<Vec<_>>>()?;
        let inputs = samples.iter().map(|s| data::normalize_image(&s.image)).collect();
        Ok(TrainingSet { samples, inputs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

/// Loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    pub stage: u8,
    pub l_sem: f64,
    /// 0 when depth is not active.
    pub l_depth: f64,
    pub l_total: f64,
}

/// Shared model description for training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: NetworkConfig,
    pub binning: DepthBinning,
}

impl Model {
    pub fn desk() -> Self {
        Model { net: NetworkConfig::desk(), binning: DepthBinning::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.binning.validate()?;
        if self.binning.num_bins != self.net.num_bins {
            return Err(Error::config(format!(
                "network predicts {} depth bins, binning has {}",
                self.net.num_bins, self.binning.num_bins
            )));
        }
        Ok(())
    }
}

/// Losses and gradients for one sample; does not touch the state.
fn iteration_grads(
    model: &Model,
    state: &TrainState,
    input: &Grid,
    sample: &Sample,
    spec: &StageSpec,
    crf_iters: usize,
) -> Result<(IterationLog, NetworkParams, Option<crf::CrfGrads>)> {
    let non_finite = Error::NonFiniteLoss { iteration: state.iteration };
    let fwd = match net::forward(&model.net, &state.params, input, true) {
        Err(Error::NonFinite { .. }) => return Err(non_finite),
        r => r?,
    };
    if fwd.seg_logits.first_non_finite().is_some() || fwd.depth_logits.first_non_finite().is_some() {
        return Err(non_finite);
    }
    let losses = spec.losses;
    // stage 1 trains on the semantic loss alone
    let sem_weight = if losses.uses_depth() { spec.lambda } else { 1.0 };

    let (l_depth, grad_depth, est_depth) = if losses.uses_depth() {
        let d = losses::depth_loss_backward(&fwd.depth_logits, &sample.depth, &model.binning)?;
        (d.loss, d.grad, Some(d.depth))
    } else {
        (0.0, losses::zero_grad_like(&fwd.depth_logits), None)
    };

    let mut crf_grads = None;
    let (l_sem, mut grad_seg) = if losses.uses_crf() {
        let est = match est_depth {
            Some(d) => d,
            None => losses::decode_depth(&fwd.depth_logits, &model.binning)?.1,
        };
        let features = CrfFeatures::new(&sample.image, &est)?;
        let (out, trace) =
            crf::crf_forward(&fwd.seg_logits, &features, &state.crf, crf_iters, Filtering::Exact, true)?;
        let (nll, g_q) = losses::nll_from_probs(&out.q, &sample.labels)?;
        let mut g = g_q;
        g.scale(sem_weight);
        let grads = crf::crf_backward(&g, trace.as_ref(), &state.crf)?;
        let unaries = grads.unaries.clone();
        crf_grads = Some(grads);
        (nll, unaries)
    } else {
        let s = losses::semantic_loss(&fwd.seg_logits, &sample.labels)?;
        (s.sum, s.grad)
    };
    if sem_weight == 0.0 {
        grad_seg = losses::zero_grad_like(&grad_seg);
    } else if !losses.uses_crf() {
        grad_seg.scale(sem_weight);
    }

    let l_total = if losses.uses_depth() {
        losses::joint_loss(l_sem, l_depth, losses::JointLossConfig { lambda: spec.lambda })
    } else {
        l_sem
    };
    let log = IterationLog { iteration: state.iteration, stage: losses.stage(), l_sem, l_depth, l_total };
    if !l_total.is_finite() {
        return Err(non_finite);
    }
    let grads = net::backward(&model.net, &state.params, &fwd, &grad_seg, &grad_depth)?;
    if !grads.is_finite() {
        return Err(non_finite);
    }
    Ok((log, grads, crf_grads))
}

fn roles_for(losses: StageLosses) -> &'static [LayerRole] {
    match losses {
        StageLosses::Sem => &[LayerRole::Trunk, LayerRole::SegHead],
        _ => &[LayerRole::Trunk, LayerRole::SegHead, LayerRole::DepthHead],
    }
}

/// Whether a stage runs after the previous one or on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageOrder {
    #[default]
    Enforced,
    /// Single-stage mode: any stage may run on fresh or partially trained weights.
    Free,
}

/// Runs (or resumes) a stage until `stop_after` of its iterations are done, or the
/// whole stage when `None`. Every iteration is reported to `sink`. A non-finite loss
/// aborts with the state left as it was before that iteration.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &Model,
    state: &mut TrainState,
    data: &TrainingSet,
    spec: &StageSpec,
    crf_iters: usize,
    order: StageOrder,
    stop_after: Option<u64>,
    sink: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    model.validate()?;
    spec.validate()?;
    state.validate(&model.net)?;
    if data.is_empty() {
        return Err(Error::Empty { op: "run_stage" });
    }
    let stage = spec.losses.stage();
    if order == StageOrder::Enforced && state.stages_completed + 1 != stage {
        return Err(Error::StageOrder { requested: stage, completed: state.stages_completed });
    }
    if spec.losses.uses_crf() && crf_iters == 0 {
        return Err(Error::config("CRF needs at least one mean-field iteration"));
    }
    let end = stop_after.map_or(spec.iterations, |s| s.min(spec.iterations));
    let roles = roles_for(spec.losses);
    while state.stage_iteration < end {
        let k = (state.iteration % data.len() as u64) as usize;
        let (log, grads, crf_grads) =
            iteration_grads(model, state, &data.inputs[k], &data.samples[k], spec, crf_iters)?;
        sink(&log);
        sgd_step(&mut state.params, &mut state.velocity, &grads, spec, roles)?;
        if let Some(g) = crf_grads {
            crf_sgd_step(&mut state.crf, &mut state.crf_velocity, &g, spec)?;
        }
        state.iteration += 1;
        state.stage_iteration += 1;
    }
    if state.stage_iteration >= spec.iterations {
        state.stages_completed = state.stages_completed.max(stage);
        state.stage_iteration = 0;
    }
    Ok(())
}

/// Runs every remaining stage of `schedule`, resuming a partially finished one.
pub fn run_schedule(
    model: &Model,
    state: &mut TrainState,
    data: &TrainingSet,
    schedule: &Schedule,
    sink: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    schedule.validate()?;
    for spec in &schedule.stages {
        if spec.losses.stage() <= state.stages_completed {
            continue;
        }
        run_stage(model, state, data, spec, schedule.crf_iterations, StageOrder::Enforced, None, sink)?;
    }
    Ok(())
}

/// Network outputs for one image, optionally refined by the CRF.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: LabelMap,
    pub depth: crate::grid::DepthMap,
    /// Class marginals (CRF output or softmax of the logits).
    pub probs: Grid,
}

/// `crf_iters = None` skips the CRF and labels by unary argmax.
pub fn predict(
    model: &Model,
    params: &NetworkParams,
    crf_params: &CrfParams,
    image: &Grid,
    crf_iters: Option<usize>,
    filtering: Filtering,
) -> Result<Prediction> {
    model.validate()?;
    let input = data::normalize_image(image);
    let fwd = net::forward(&model.net, params, &input, false)?;
    let (_, depth) = losses::decode_depth(&fwd.depth_logits, &model.binning)?;
    match crf_iters {
        None => Ok(Prediction {
            labels: fwd.seg_logits.argmax_channels(),
            probs: crate::grid::softmax_channels(&fwd.seg_logits)?,
            depth,
        }),
        Some(iters) => {
            let features = CrfFeatures::new(image, &depth)?;
            let out = crf::crf_inference(&fwd.seg_logits, &features, crf_params, iters, filtering)?;
            Ok(Prediction { labels: out.labels, probs: out.q, depth })
        }
    }
}
