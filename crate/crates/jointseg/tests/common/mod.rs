#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jointseg::commands;
use jointseg::config::SynthSpec;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointseg")).args(args).output().expect("run jointseg")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Five desk scenes (seeds 0..5), all in the training split.
pub fn desk_dataset(dir: &Path) {
    commands::synth(&SynthSpec::desk(0, 5, 0.0), dir).unwrap();
}

/// Run config in `root/run.toml` pointing at `root/data`, with `schedule` as the
/// body of its `[schedule]` table.
pub fn write_config(root: &Path, schedule: &str) -> PathBuf {
    let path = root.join("run.toml");
    let text = format!(
        "version = 1\nseed = 1\n\n[paths]\ndataset = \"data\"\ncheckpoints = \"ck\"\nreports = \"rp\"\n\n\
         [model]\nclass_names = [\"background\", \"red\", \"green\", \"blue\"]\n\n[schedule]\n{schedule}"
    );
    fs::write(&path, text).unwrap();
    path
}

pub const SHORT_SCHEDULE: &str = "crf_iterations = 2\n\n\
[[schedule.stages]]\nlosses = \"sem\"\niterations = 20\nlr_net = 5e-5\nlr_crf = 0.0\nmomentum = 0.5\nweight_decay = 0.0005\nlambda = 1e-3\n\n\
[[schedule.stages]]\nlosses = \"sem-depth\"\niterations = 10\nlr_net = 0.1\nlr_crf = 0.0\nmomentum = 0.9\nweight_decay = 0.0005\nlambda = 1e-3\n\n\
[[schedule.stages]]\nlosses = \"sem-depth-crf\"\niterations = 3\nlr_net = 1e-7\nlr_crf = 1e-5\nmomentum = 0.9\nweight_decay = 0.0005\nlambda = 1e-3\n";

/// Stage 1 and 2 of the desk schedule.
pub const DESK_TWO_STAGES: &str = "crf_iterations = 5\n\n\
[[schedule.stages]]\nlosses = \"sem\"\niterations = 500\nlr_net = 5e-5\nlr_crf = 0.0\nmomentum = 0.5\nweight_decay = 0.0005\nlambda = 1e-3\n\n\
[[schedule.stages]]\nlosses = \"sem-depth\"\niterations = 200\nlr_net = 0.1\nlr_crf = 0.0\nmomentum = 0.9\nweight_decay = 0.0005\nlambda = 1e-3\n";

pub fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
