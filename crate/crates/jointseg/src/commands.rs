//! The CLI verbs as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use jointseg_core::data::{self, generate_scene, Split};
use jointseg_core::gradcheck::{self, GradcheckReport, Target};
use jointseg_core::metrics::{eval_depth, ConfusionMatrix, DepthReport, SegReport};
use jointseg_core::train::{self, StageOrder, TrainState, TrainingSet};
use jointseg_core::{DepthMap, Error as CoreError};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, SynthSpec};
use crate::crf_io;
use crate::dataset::{self, Entry};
use crate::error::{Error, Result};
use crate::report::{self, LossLog};

pub const LATEST: &str = "latest.ckpt";
pub const DIAGNOSTIC: &str = "diagnostic.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

pub fn stage_checkpoint(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

/// Writes `spec.num_scenes` scenes and a manifest into `out`.
pub fn synth(spec: &SynthSpec, out: &Path) -> Result<Vec<Entry>> {
    let n_train = spec.num_scenes - spec.num_test();
    let mut entries = Vec::with_capacity(spec.num_scenes);
    for k in 0..spec.num_scenes {
        let scene = generate_scene(&spec.scene(k))?;
        let id = dataset::sample_id(k);
        dataset::save_sample(out, &id, &scene.sample)?;
        entries.push(Entry { id, split: if k < n_train { Split::Train } else { Split::Test } });
    }
    dataset::write_manifest(out, &entries)?;
    Ok(entries)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `latest.ckpt` instead of starting fresh.
    pub resume: bool,
    /// Stop once this many iterations have run in total.
    pub max_iterations: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations_run: u64,
    pub state: TrainState,
    pub latest: PathBuf,
}

/// Runs the remaining stages of the configured schedule. Checkpoints go to the
/// checkpoint directory (`stage<N>.ckpt` after each stage, `latest.ckpt` always),
/// the loss log and the exported CRF weights to the report directory.
pub fn train(config: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    let r = RunConfig::load(config)?.resolve(config)?;
    let model = r.model.clone();
    let samples: Vec<_> = dataset::load_dataset(&r.dataset, Some(Split::Train))?.into_iter().map(|(_, s)| s).collect();
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{}: no training samples", r.dataset.display())));
    }
    let samples = match &r.augment {
        Some(a) => data::augment_dataset(&samples, a, r.seed)?,
        None => samples,
    };
    let set = TrainingSet::new(&samples, &model.binning)?;
    let latest = r.checkpoints.join(LATEST);
    let mut state = if opts.resume {
        checkpoint::load_state(&latest, &model.net)?
    } else {
        let mut s = TrainState::new(&model.net, r.seed)?;
        s.crf = r.crf.clone();
        s
    };
    let start = state.iteration;
    let mut log = LossLog::open(&r.reports.join(LOSS_LOG), opts.resume)?;
    let mut log_err = None;
    for spec in &r.schedule.stages {
        let stage = spec.losses.stage();
        if stage <= state.stages_completed {
            continue;
        }
        let stop = match opts.max_iterations {
            Some(m) if state.iteration >= m => break,
            Some(m) => Some(state.stage_iteration + (m - state.iteration)),
            None => None,
        };
        let res = train::run_stage(
            &model,
            &mut state,
            &set,
            spec,
            r.schedule.crf_iterations,
            StageOrder::Enforced,
            stop,
            &mut |l| {
                if log_err.is_none() {
                    log_err = log.push(l).err();
                }
            },
        );
        if let Some(e) = log_err.take() {
            return Err(e);
        }
        match res {
            Ok(()) => {}
            Err(e @ CoreError::NonFiniteLoss { .. }) => {
                let path = r.checkpoints.join(DIAGNOSTIC);
                checkpoint::save_state(&path, &state, r.dtype)?;
                return Err(Error::Aborted { source: e, checkpoint: path });
            }
            Err(e) => return Err(e.into()),
        }
        if state.stages_completed >= stage {
            checkpoint::save_state(&r.checkpoints.join(stage_checkpoint(stage)), &state, r.dtype)?;
        }
    }
    checkpoint::save_state(&latest, &state, r.dtype)?;
    fs::write(
        r.reports.join("crf_weights.csv"),
        crf_io::export_crf_weights(&state.crf, &r.class_names)?,
    )
    .map_err(Error::io(r.reports.join("crf_weights.csv")))?;
    crf_io::write_crf_dir(&r.reports.join("crf"), &state.crf, &r.class_names)?;
    Ok(TrainSummary { iterations_run: state.iteration - start, state, latest })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferOptions {
    pub no_crf: bool,
    /// Mean-field iterations; the schedule's count when `None`.
    pub crf_iters: Option<usize>,
    /// Restrict a dataset input to one split.
    pub split: Option<Split>,
}

/// Predicts every input image; writes `labels/<id>.png` (palette PNG),
/// `depths/<id>.png` (16-bit millimeters) and `marginals/<id>.qmap` into `out`.
/// `input` is a PNG file or a dataset directory. Returns the ids written.
pub fn infer(
    config: &Path,
    checkpoint: Option<&Path>,
    input: &Path,
    out: &Path,
    opts: InferOptions,
) -> Result<Vec<String>> {
    let r = RunConfig::load(config)?.resolve(config)?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| r.checkpoints.join(LATEST));
    let state = Checkpoint::load(&ck)?.to_state(&r.model.net).map_err(|e| match e {
        Error::Invalid(d) => Error::format(&ck, d),
        e => e,
    })?;
    let inputs: Vec<(String, PathBuf)> = if input.is_dir() {
        dataset::read_manifest(input)?
            .into_iter()
            .filter(|e| opts.split.is_none_or(|s| s == e.split))
            .map(|e| {
                let p = dataset::image_path(input, &e.id);
                (e.id, p)
            })
            .collect()
    } else {
        let id = input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("{}: cannot derive an output name", input.display())))?;
        vec![(id.to_string(), input.to_path_buf())]
    };
    let iters = match (opts.no_crf, opts.crf_iters) {
        (true, _) => None,
        (false, Some(0)) => return Err(Error::Invalid("--crf-iters must be at least 1".into())),
        (false, n) => Some(n.unwrap_or(r.schedule.crf_iterations)),
    };
    let mut ids = Vec::with_capacity(inputs.len());
    for (id, path) in inputs {
        let image = dataset::read_rgb_png(&path)?;
        let p = train::predict(&r.model, &state.params, &state.crf, &image, iters, r.filtering)?;
        dataset::write_label_png(&dataset::label_path(out, &id), &p.labels)?;
        dataset::write_depth_png(&dataset::depth_path(out, &id), &p.depth)?;
        report::write_marginals(&out.join("marginals").join(format!("{id}.qmap")), &p.probs)?;
        ids.push(id);
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Depth,
    Seg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Depth(DepthReport),
    Seg(SegReport),
}

impl Evaluation {
    pub fn csv(&self, class_names: &[String]) -> String {
        match self {
            Evaluation::Depth(r) => report::depth_csv(r),
            Evaluation::Seg(r) => report::seg_csv(r, class_names),
        }
    }

    pub fn text(&self, class_names: &[String]) -> String {
        match self {
            Evaluation::Depth(r) => report::depth_text(r),
            Evaluation::Seg(r) => report::seg_text(r, class_names),
        }
    }
}

/// Pools every predicted image in `pred` against the matching ground truth in
/// `truth`. Depth metrics are computed over all jointly valid pixels of all images.
pub fn eval(pred: &Path, truth: &Path, task: Task, num_classes: usize) -> Result<Evaluation> {
    let sub = match task {
        Task::Depth => dataset::DEPTHS,
        Task::Seg => dataset::LABELS,
    };
    let ids = dataset::list_ids(&pred.join(sub))?;
    if ids.is_empty() {
        return Err(Error::Invalid(format!("{}: no predictions", pred.join(sub).display())));
    }
    match task {
        Task::Depth => {
            let (mut d, mut dv, mut t, mut tv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for id in &ids {
                let p = dataset::read_depth_png(&dataset::depth_path(pred, id))?;
                let tp = dataset::depth_path(truth, id);
                let g = dataset::read_depth_png(&tp)?;
                if (p.height, p.width) != (g.height, g.width) {
                    return Err(Error::Invalid(format!("{}: size differs from the prediction", tp.display())));
                }
                d.extend(p.depth);
                dv.extend(p.valid);
                t.extend(g.depth);
                tv.extend(g.valid);
            }
            let n = d.len();
            let r = eval_depth(&DepthMap::new(1, n, d, dv)?, &DepthMap::new(1, n, t, tv)?)?;
            Ok(Evaluation::Depth(r))
        }
        Task::Seg => {
            let mut cm = ConfusionMatrix::new(num_classes);
            for id in &ids {
                let p = dataset::read_label_png(&dataset::label_path(pred, id))?;
                let g = dataset::read_label_png(&dataset::label_path(truth, id))?;
                cm.accumulate(&p, &g)?;
            }
            Ok(Evaluation::Seg(cm.report()?))
        }
    }
}

pub fn gradcheck_line(r: &GradcheckReport) -> String {
    format!(
        "{:<7} checked {:>5}  max rel err {:.3e}  tolerance {:.0e}  worst {}  {}",
        r.target.name(),
        r.checked,
        r.max_rel_err,
        r.tolerance,
        r.worst,
        if r.passed() { "PASS" } else { "FAIL" }
    )
}

/// Runs the checks for `targets`; fails if any exceeds its tolerance.
pub fn gradcheck(targets: &[Target], seed: u64, corrupt: bool) -> Result<Vec<GradcheckReport>> {
    targets.iter().map(|&t| gradcheck::run(t, seed, corrupt).map_err(Error::from)).collect()
}

/// Class names for `eval` from a run config, or `class<k>` defaults.
pub fn class_names_for(config: Option<&Path>, num_classes: Option<usize>) -> Result<(usize, Vec<String>)> {
    match (config, num_classes) {
        (Some(c), n) => {
            let r = RunConfig::load(c)?.resolve(c)?;
            let k = r.model.net.num_classes;
            if n.is_some_and(|n| n != k) {
                return Err(Error::Invalid(format!("--num-classes {} disagrees with the config ({k})", n.unwrap_or(0))));
            }
            Ok((k, r.class_names))
        }
        (None, Some(n)) => Ok((n, crf_io::default_class_names(n))),
        (None, None) => Err(Error::Invalid("give --config or --num-classes".into())),
    }
}
