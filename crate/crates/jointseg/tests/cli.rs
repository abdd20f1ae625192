mod common;

use std::fs;

use common::{bin, code, desk_dataset, read_tree, write_config, SHORT_SCHEDULE};
use jointseg::checkpoint::Checkpoint;
use jointseg::commands::{self, InferOptions, Task, TrainOptions};
use jointseg::config::{RunConfig, SynthSpec};
use jointseg::{crf_io, dataset, report};
use jointseg_core::crf::CrfParams;
use jointseg_core::data::Split;
use jointseg_core::train::Schedule;

#[test]
fn synth_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SynthSpec::desk(4, 10, 0.3).to_toml().unwrap()).unwrap();
    let out = dir.path().join("data");
    let o = bin(&["synth", spec.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for sub in ["images", "labels", "depths"] {
        assert_eq!(dataset::list_ids(&out.join(sub)).unwrap().len(), 10);
    }
    let m = dataset::read_manifest(&out).unwrap();
    assert_eq!(m.iter().filter(|e| e.split == Split::Test).count(), 3);
    assert_eq!(m.iter().filter(|e| e.split == Split::Train).count(), 7);
}

#[test]
fn synth_is_byte_identical_for_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = common::repo_file("configs/synth-desk.toml");
    for k in ["a", "b"] {
        let o = bin(&["synth", spec.to_str().unwrap(), dir.path().join(k).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_tree(&dir.path().join("a")), read_tree(&dir.path().join("b")));
}

#[test]
fn shipped_configs_parse() {
    let desk = common::repo_file("configs/desk.toml");
    let cfg = RunConfig::load(&desk).unwrap();
    assert_eq!(cfg.schedule(&desk).unwrap(), Schedule::desk());
    let full = common::repo_file("configs/full.toml");
    let cfg = RunConfig::load(&full).unwrap();
    assert_eq!(cfg.schedule(&full).unwrap(), Schedule::full());
    SynthSpec::load(&common::repo_file("configs/synth-desk.toml")).unwrap();
}

#[test]
fn unknown_config_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    desk_dataset(&dir.path().join("data"));
    let cfg = write_config(dir.path(), "preset = \"desk\"\nlr = 1.0\n");
    let o = bin(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr"));
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    assert_eq!(code(&bin(&["train"])), 1);
    assert_eq!(code(&bin(&["eval", "a", "b", "--task", "colour"])), 1);
    assert_eq!(code(&bin(&["--help"])), 0);
}

#[test]
fn missing_input_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["synth", dir.path().join("nope.toml").to_str().unwrap(), dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
}

#[test]
fn resume_continues_the_iteration_count_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    desk_dataset(&root.join("data"));
    let cfg = write_config(root, SHORT_SCHEDULE);
    let full = commands::train(&cfg, TrainOptions::default()).unwrap();
    assert_eq!(full.state.iteration, 33);
    assert_eq!(full.state.stages_completed, 3);
    let full_bytes = fs::read(&full.latest).unwrap();
    let full_log = fs::read_to_string(root.join("rp/loss.csv")).unwrap();

    let o = bin(&["train", cfg.to_str().unwrap(), "--max-iterations", "25"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let part = Checkpoint::load(&root.join("ck/latest.ckpt")).unwrap();
    assert_eq!((part.iteration, part.stages_completed, part.stage_iteration), (25, 1, 5));
    let o = bin(&["train", cfg.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("8 iterations (total 33"));
    assert_eq!(fs::read(root.join("ck/latest.ckpt")).unwrap(), full_bytes);
    assert_eq!(fs::read_to_string(root.join("rp/loss.csv")).unwrap(), full_log);
    assert_eq!(full_log.lines().count(), 34);
    assert!(root.join("ck/stage1.ckpt").exists() && root.join("ck/stage3.ckpt").exists());
}

#[test]
fn trained_crf_weights_are_exported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    desk_dataset(&root.join("data"));
    let cfg = write_config(root, SHORT_SCHEDULE);
    let s = commands::train(&cfg, TrainOptions::default()).unwrap();
    let text = fs::read_to_string(root.join("rp/crf_weights.csv")).unwrap();
    let (names, m) = crf_io::import_crf_weights(&text).unwrap();
    assert_eq!(names, ["background", "red", "green", "blue"]);
    assert_eq!(m[0], s.state.crf.mu);
    assert_ne!(s.state.crf, CrfParams::standard_init(4));
    let (p, _) = crf_io::read_crf_file(&root.join("rp/crf/crf.toml")).unwrap();
    assert_eq!(p, s.state.crf);
}

#[test]
fn crf_file_in_config_sets_the_initial_crf() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    desk_dataset(&root.join("data"));
    let mut crf = CrfParams::standard_init(4);
    crf.w[2][1] = 0.5;
    crf_io::write_crf_dir(&root.join("crf"), &crf, &crf_io::default_class_names(4)).unwrap();
    let cfg = write_config(root, "preset = \"desk\"\n");
    let text = fs::read_to_string(&cfg).unwrap() + "\n[crf]\nfile = \"crf/crf.toml\"\n";
    fs::write(&cfg, text).unwrap();
    let r = RunConfig::load(&cfg).unwrap().resolve(&cfg).unwrap();
    assert_eq!(r.crf, crf);
}

#[test]
fn infer_variants_agree_where_they_must() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    desk_dataset(&root.join("data"));
    let cfg = write_config(root, SHORT_SCHEDULE);
    let s = commands::train(&cfg, TrainOptions::default()).unwrap();
    let data = root.join("data");

    let no_crf = root.join("no-crf");
    let o = bin(&["infer", cfg.to_str().unwrap(), data.to_str().unwrap(), "--out", no_crf.to_str().unwrap(), "--no-crf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // --no-crf labels are the argmax of the stored marginals
    for id in dataset::list_ids(&no_crf.join("labels")).unwrap() {
        let q = report::read_marginals(&no_crf.join("marginals").join(format!("{id}.qmap"))).unwrap();
        let l = dataset::read_label_png(&dataset::label_path(&no_crf, &id)).unwrap();
        assert_eq!(q.argmax_channels(), l);
    }

    // a checkpoint whose CRF has no pairwise weights reproduces --no-crf
    let mut zero = s.state.clone();
    zero.crf = zero.crf.without_pairwise();
    let ck = root.join("zero.ckpt");
    jointseg::checkpoint::save_state(&ck, &zero, jointseg::checkpoint::Dtype::F64).unwrap();
    let zero_out = root.join("zero");
    let opts = InferOptions { crf_iters: Some(3), ..Default::default() };
    commands::infer(&cfg, Some(&ck), &data, &zero_out, opts).unwrap();
    for id in dataset::list_ids(&no_crf.join("labels")).unwrap() {
        assert_eq!(
            dataset::read_label_png(&dataset::label_path(&zero_out, &id)).unwrap(),
            dataset::read_label_png(&dataset::label_path(&no_crf, &id)).unwrap()
        );
        assert_eq!(
            fs::read(dataset::depth_path(&zero_out, &id)).unwrap(),
            fs::read(dataset::depth_path(&no_crf, &id)).unwrap()
        );
    }

    // single image input
    let one = root.join("one");
    let img = dataset::image_path(&data, "0002");
    commands::infer(&cfg, None, &img, &one, InferOptions::default()).unwrap();
    assert!(dataset::label_path(&one, "0002").exists());
    assert!(one.join("marginals/0002.qmap").exists());
}

#[test]
fn infer_rejects_a_checkpoint_for_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    desk_dataset(&root.join("data"));
    let cfg = write_config(root, "preset = \"desk\"\n");
    let ck = root.join("bad.ckpt");
    fs::write(&ck, b"JSEGCKPT").unwrap();
    let o = bin(&["infer", cfg.to_str().unwrap(), root.join("data").to_str().unwrap(), "--out", root.join("o").to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.ckpt"));
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    desk_dataset(&data);
    let e = commands::eval(&data, &data, Task::Seg, 4).unwrap();
    let csv = e.csv(&crf_io::default_class_names(4));
    assert!(csv.starts_with("metric,value\nMean IoU,1.000000\nMean Accuracy,1.000000\nPixel Accuracy,1.000000\n"), "{csv}");
    let out = dir.path().join("depth.csv");
    let o = bin(&["eval", data.to_str().unwrap(), data.to_str().unwrap(), "--task", "depth", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out).unwrap();
    assert!(csv.contains("threshold δ < 1.25,1.000000\n"));
    assert!(csv.contains("RMSE (log. scale invariant),0.000000\n"));
    let o = bin(&["eval", data.to_str().unwrap(), data.to_str().unwrap(), "--task", "seg"]);
    assert_eq!(code(&o), 1, "seg needs a class count");
}

#[test]
fn eval_two_pixel_fixture_matches_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = (dir.path().join("pred"), dir.path().join("truth"));
    let d = |v: Vec<f64>| jointseg_core::DepthMap::dense(1, 2, v).unwrap();
    dataset::write_depth_png(&dataset::depth_path(&pred, "a"), &d(vec![1.0, 2.0])).unwrap();
    dataset::write_depth_png(&dataset::depth_path(&truth, "a"), &d(vec![1.0, 4.0])).unwrap();
    let o = bin(&["eval", pred.to_str().unwrap(), truth.to_str().unwrap(), "--task", "depth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "metric,value\n\
         threshold δ < 1.25,0.500000\n\
         threshold δ < 1.25^2,0.500000\n\
         threshold δ < 1.25^3,0.500000\n\
         abs relative distance,0.250000\n\
         sqr relative distance,0.500000\n\
         RMSE (linear),1.414214\n\
         RMSE (log),0.490129\n\
         RMSE (log. scale invariant),0.346574\n"
    );
}

#[test]
fn gradcheck_exit_codes() {
    let o = bin(&["gradcheck", "--module", "losses", "--seed", "11"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let o = bin(&["gradcheck", "--module", "crf", "--seed", "11", "--corrupt"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
