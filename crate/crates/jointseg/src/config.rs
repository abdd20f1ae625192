//! Run configuration and synthetic-dataset specs (TOML, schema version 1).
//!
//! ```toml
//! version = 1
//! seed = 1
//! checkpoint_dtype = "f64"        # or "f32"
//!
//! [paths]                         # relative to this file
//! dataset = "data"
//! checkpoints = "checkpoints"
//! reports = "reports"
//!
//! [model]
//! preset = "desk"                 # or "full"; [model.network] / [model.binning] override it
//! class_names = ["background", "red", "green", "blue"]
//!
//! [crf]
//! file = "crf/crf.toml"           # omit for the standard initialization
//! filtering = "exact"             # or "truncated" with `tolerance`
//!
//! [schedule]
//! preset = "desk"                 # or "full", or explicit `stages` + `crf_iterations`
//!
//! [augment]                       # omit to train on the images as they are
//! num_crops = 4
//! min_zoom = 1.0
//! max_zoom = 1.5
//! ```
//!
//! Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use jointseg_core::crf::{CrfParams, Filtering};
use jointseg_core::data::{AugmentConfig, SceneSpec};
use jointseg_core::losses::DepthBinning;
use jointseg_core::net::NetworkConfig;
use jointseg_core::train::{Model, Schedule, StageSpec};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Dtype;
use crate::crf_io;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeName {
    F32,
    #[default]
    F64,
}

impl From<DtypeName> for Dtype {
    fn from(d: DtypeName) -> Dtype {
        match d {
            DtypeName::F32 => Dtype::F32,
            DtypeName::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilteringName {
    #[default]
    Exact,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Preset,
    pub network: Option<NetworkConfig>,
    pub binning: Option<DepthBinning>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfSection {
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub filtering: FilteringName,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub preset: Option<Preset>,
    pub stages: Option<Vec<StageSpec>>,
    pub crf_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_dtype: DtypeName,
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub crf: CrfSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub augment: Option<AugmentConfig>,
}

/// A validated run configuration with every default filled in and paths made
/// absolute against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub dtype: Dtype,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub model: Model,
    pub class_names: Vec<String>,
    pub crf: CrfParams,
    pub filtering: Filtering,
    pub schedule: Schedule,
    pub augment: Option<AugmentConfig>,
}

fn preset_schedule(p: Preset) -> Schedule {
    match p {
        Preset::Desk => Schedule::desk(),
        Preset::Full => Schedule::full(),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(origin, e.message()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::config(origin, format!("unsupported config version {}", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn schedule(&self, origin: &Path) -> Result<Schedule> {
        let s = &self.schedule;
        let schedule = match (&s.stages, s.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::config(origin, "schedule: give either preset or stages, not both"))
            }
            (Some(stages), None) => Schedule {
                stages: stages.clone(),
                crf_iterations: s.crf_iterations.unwrap_or(Schedule::desk().crf_iterations),
            },
            (None, p) => {
                let mut sch = preset_schedule(p.unwrap_or(self.model.preset));
                if let Some(n) = s.crf_iterations {
                    sch.crf_iterations = n;
                }
                sch
            }
        };
        schedule.validate().map_err(|e| Error::config(origin, e.to_string()))?;
        Ok(schedule)
    }

    /// Checks cross-field consistency and that the referenced inputs exist.
    pub fn resolve(&self, origin: &Path) -> Result<Resolved> {
        let base = origin.parent().unwrap_or(Path::new("."));
        let cerr = |d: String| Error::config(origin, d);
        let (net, binning) = match self.model.preset {
            Preset::Desk => (NetworkConfig::desk(), DepthBinning::desk()),
            Preset::Full => (NetworkConfig::full(), DepthBinning::full()),
        };
        let model = Model {
            net: self.model.network.clone().unwrap_or(net),
            binning: self.model.binning.unwrap_or(binning),
        };
        model.validate().map_err(|e| cerr(e.to_string()))?;
        let c = model.net.num_classes;
        let mut class_names = self.model.class_names.clone().unwrap_or_else(|| crf_io::default_class_names(c));
        let crf = match &self.crf.file {
            Some(f) => {
                let path = base.join(f);
                if !path.exists() {
                    return Err(cerr(format!("crf file {} does not exist", path.display())));
                }
                let (p, names) = crf_io::read_crf_file(&path)?;
                if self.model.class_names.is_none() {
                    class_names = names;
                }
                p
            }
            None => CrfParams::standard_init(c),
        };
        if crf.num_classes != c {
            return Err(cerr(format!("CRF has {} classes, network predicts {c}", crf.num_classes)));
        }
        if class_names.len() != c {
            return Err(cerr(format!("{} class names for {c} classes", class_names.len())));
        }
        let filtering = match (self.crf.filtering, self.crf.tolerance) {
            (FilteringName::Exact, None) => Filtering::Exact,
            (FilteringName::Exact, Some(_)) => return Err(cerr("crf.tolerance needs filtering = \"truncated\"".into())),
            (FilteringName::Truncated, t) => {
                let tolerance = t.unwrap_or(1e-6);
                if !(tolerance > 0.0 && tolerance.is_finite()) {
                    return Err(cerr("crf.tolerance must be positive".into()));
                }
                Filtering::Truncated { tolerance }
            }
        };
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| cerr(e.to_string()))?;
        }
        let dataset = base.join(&self.paths.dataset);
        if !dataset.is_dir() {
            return Err(cerr(format!("dataset directory {} does not exist", dataset.display())));
        }
        Ok(Resolved {
            seed: self.seed,
            dtype: self.checkpoint_dtype.into(),
            dataset,
            checkpoints: base.join(&self.paths.checkpoints),
            reports: base.join(&self.paths.reports),
            model,
            class_names,
            crf,
            filtering,
            schedule: self.schedule(origin)?,
            augment: self.augment,
        })
    }
}

/// Synthetic dataset: `num_scenes` scenes drawn from `scene`, scene `k` with seed
/// `scene.seed + k`. The last `round(num_scenes * test_fraction)` scenes form the
/// test split.
///
/// ```toml
/// version = 1
/// num_scenes = 10
/// test_fraction = 0.2
///
/// [scene]
/// seed = 1
/// height = 33
/// width = 33
/// num_rectangles = 3
/// palette = [[90, 90, 90], [200, 40, 40], [40, 180, 60], [50, 70, 210]]
/// depth_range = [0.7, 4.9]
/// depth_layout = { class-banded = { jitter = 0.15 } }
/// background_depth = 6.3
/// noise = 6.0
/// size_range = [8, 20]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub version: u32,
    pub num_scenes: usize,
    #[serde(default)]
    pub test_fraction: f64,
    pub scene: SceneSpec,
}

impl SynthSpec {
    pub fn desk(seed: u64, num_scenes: usize, test_fraction: f64) -> Self {
        SynthSpec { version: CONFIG_VERSION, num_scenes, test_fraction, scene: SceneSpec::desk(seed) }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let s: SynthSpec = toml::from_str(text).map_err(|e| Error::config(origin, e.message()))?;
        if s.version != CONFIG_VERSION {
            return Err(Error::config(origin, format!("unsupported spec version {}", s.version)));
        }
        if s.num_scenes == 0 {
            return Err(Error::config(origin, "num_scenes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&s.test_fraction) {
            return Err(Error::config(origin, "test_fraction must lie in [0, 1]"));
        }
        s.scene.validate().map_err(|e| Error::config(origin, e.to_string()))?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn num_test(&self) -> usize {
        (self.num_scenes as f64 * self.test_fraction).round() as usize
    }

    pub fn scene(&self, k: usize) -> SceneSpec {
        SceneSpec { seed: self.scene.seed.wrapping_add(k as u64), ..self.scene.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "version = 1\n[paths]\ndataset = \".\"\ncheckpoints = \"ck\"\nreports = \"rp\"\n";

    fn origin() -> PathBuf {
        std::env::temp_dir().join("run.toml")
    }

    #[test]
    fn minimal_config_resolves_to_desk_defaults() {
        let r = RunConfig::parse(MINIMAL, &origin()).unwrap().resolve(&origin()).unwrap();
        assert_eq!(r.model, Model::desk());
        assert_eq!(r.schedule, Schedule::desk());
        assert_eq!(r.crf, CrfParams::standard_init(4));
        assert_eq!(r.filtering, Filtering::Exact);
        assert_eq!(r.dtype, Dtype::F64);
        assert_eq!(r.class_names.len(), 4);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{MINIMAL}lerning_rate = 1.0\n");
        let e = RunConfig::parse(&text, &origin()).unwrap_err();
        assert!(e.to_string().contains("lerning_rate"), "{e}");
        assert_eq!(e.exit_code(), 1);
        let text = format!("{MINIMAL}[schedule]\npreset = \"desk\"\nstage = 3\n");
        assert!(RunConfig::parse(&text, &origin()).is_err());
    }

    #[test]
    fn version_is_checked() {
        let text = MINIMAL.replace("version = 1", "version = 2");
        assert!(RunConfig::parse(&text, &origin()).is_err());
    }

    #[test]
    fn full_schedule_round_trips_exactly() {
        let text = format!("{MINIMAL}[model]\npreset = \"full\"\n");
        let cfg = RunConfig::parse(&text, &origin()).unwrap();
        let s = cfg.schedule(&origin()).unwrap();
        assert_eq!(s, Schedule::full());
        let explicit = RunConfig {
            schedule: ScheduleSection { preset: None, stages: Some(s.stages.clone()), crf_iterations: Some(5) },
            ..cfg
        };
        let back = RunConfig::parse(&explicit.to_toml().unwrap(), &origin()).unwrap();
        assert_eq!(back.schedule(&origin()).unwrap(), Schedule::full());
        let st = &back.schedule.stages.unwrap();
        assert_eq!((st[0].iterations, st[0].lr_net, st[0].momentum), (160_000, 1e-10, 0.99));
        assert_eq!((st[0].weight_decay, st[0].lambda), (0.0005, 1e-6));
        assert_eq!(st[1].iterations, 10_000);
        assert_eq!((st[2].lr_crf, st[2].lr_net), (1e-13, 1e-16));
    }

    #[test]
    fn explicit_network_round_trips() {
        let cfg = RunConfig {
            model: ModelSection {
                network: Some(NetworkConfig::full()),
                binning: Some(DepthBinning::full()),
                ..Default::default()
            },
            ..RunConfig::parse(MINIMAL, &origin()).unwrap()
        };
        let back = RunConfig::parse(&cfg.to_toml().unwrap(), &origin()).unwrap();
        assert_eq!(back, cfg);
        let r = back.resolve(&origin()).unwrap();
        assert_eq!(r.model.net, NetworkConfig::full());
    }

    #[test]
    fn inconsistent_class_counts_are_rejected() {
        let text = format!("{MINIMAL}[model]\nclass_names = [\"a\", \"b\"]\n");
        let e = RunConfig::parse(&text, &origin()).unwrap().resolve(&origin()).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let text = format!("{MINIMAL}[model.binning]\nnum_bins = 50\nbin_length = 0.14\n");
        assert!(RunConfig::parse(&text, &origin()).unwrap().resolve(&origin()).is_err());
    }

    #[test]
    fn missing_dataset_is_rejected() {
        let text = MINIMAL.replace("dataset = \".\"", "dataset = \"no/such/dir\"");
        assert!(RunConfig::parse(&text, &origin()).unwrap().resolve(&origin()).is_err());
    }

    #[test]
    fn tolerance_needs_truncated_filtering() {
        let text = format!("{MINIMAL}[crf]\ntolerance = 1e-5\n");
        assert!(RunConfig::parse(&text, &origin()).unwrap().resolve(&origin()).is_err());
        let text = format!("{MINIMAL}[crf]\nfiltering = \"truncated\"\ntolerance = 1e-5\n");
        let r = RunConfig::parse(&text, &origin()).unwrap().resolve(&origin()).unwrap();
        assert_eq!(r.filtering, Filtering::Truncated { tolerance: 1e-5 });
    }

    #[test]
    fn synth_spec_round_trips() {
        let s = SynthSpec::desk(3, 10, 0.2);
        let back = SynthSpec::parse(&s.to_toml().unwrap(), &origin()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.num_test(), 2);
        assert_eq!(back.scene(4).seed, 7);
    }

    #[test]
    fn synth_spec_rejects_bad_fraction() {
        let mut s = SynthSpec::desk(3, 10, 0.2);
        s.test_fraction = 1.5;
        assert!(SynthSpec::parse(&s.to_toml().unwrap(), &origin()).is_err());
    }
}
