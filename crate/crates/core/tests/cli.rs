//! The command-line driver end to end: exit codes, outputs and
//! reproducibility.

use std::fs;
use std::path::Path;

use amalgam::blocknet::{BlockNet, BlockNetSpec, HeadSpec};
use amalgam::cli::run;
use amalgam::synthdata::{generate, SceneDistribution};
use amalgam::tensor::Tensor;
use amalgam::zoo::{save_dataset, save_net};

const TINY: &str = "\
# small enough to run in a few seconds
samples_per_source = 30
unlabeled_samples = 40
test_samples = 40
teachers = 4
teacher_epochs = 1
epochs = 1
image_size = 8
stem_channels = 4
block_channels = 4,6,8
";

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn unknown_subcommand_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(["amalgam", "frobnicate"]), 1);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nno_such_key = 1\n").unwrap();
    let out = dir.path().join("runs");
    assert_eq!(run(["amalgam", "resources", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert_eq!(run(["amalgam", "resources", "--set", "lr=-1", "--out", s(&out)]), 1);
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let missing = dir.path().join("nope.amlg");
    assert_eq!(run(["amalgam", "eval", "--net", s(&missing), "--data", s(&missing), "--out", s(&out)]), 3);
}

#[test]
fn eval_of_a_perfect_net_reports_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    // a net whose is_red head is a fixed function of the image: zero weights
    // and a bias that always favours class 1, scored on all-positive labels
    let spec = BlockNetSpec::default().with_heads(vec![HeadSpec::new("is_red", 2)]);
    let mut net = BlockNet::new(spec, 0).unwrap();
    let params = net.params_mut();
    for i in 0..params.len() {
        let t = params.get_mut(i);
        let shape = t.shape().to_vec();
        let value = if shape == [2] { vec![-1.0, 1.0] } else { vec![0.0; t.numel()] };
        *t = Tensor::new(&shape, value).unwrap().with_requires_grad();
    }
    let data = generate(&SceneDistribution::default(), 200, 3).unwrap();
    let rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels_for("is_red").unwrap()[i] == 1).collect();
    let positives = data.subset(&rows).unwrap();
    let (net_path, data_path) = (dir.path().join("net.amlg"), dir.path().join("pos.amlg"));
    save_net(&net, &net_path).unwrap();
    save_dataset(&positives, &data_path).unwrap();
    let out = dir.path().join("runs");
    let code = run(["amalgam", "eval", "--net", s(&net_path), "--data", s(&data_path), "--out", s(&out), "--run-id", "e"]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join("e/metrics.csv")).unwrap();
    assert_eq!(csv, "run_id,stage,epoch,task,metric,value\ne,eval,0,is_red,accuracy,1\n");
    assert!(fs::read_to_string(out.join("e/config.txt")).unwrap().contains("run_id = e"));
}

fn pipeline(root: &Path) -> (String, Vec<u8>) {
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = root.join("runs");
    let base = |args: &[&str]| {
        let mut argv = vec!["amalgam"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(run(argv.clone()), 0, "{argv:?}");
    };
    base(&["gen-data", "--seed", "7"]);
    let data = out.join("gen-data-7/data");
    for (i, task) in ["is_red", "is_red", "bright_background", "bright_background"].iter().enumerate() {
        let part = data.join(format!("teacher{i}.amlg"));
        let id = format!("s{i}");
        base(&["train-teacher", "--data", s(&part), "--id", &id, "--tasks", task, "--run-id", &id]);
    }
    let unl = data.join("unlabeled.amlg");
    base(&["dual-stage", "--seed", "7", "--data", s(&unl)]);
    (
        fs::read_to_string(out.join("dual-stage-7/metrics.csv")).unwrap(),
        fs::read(out.join("zoo/nets/dual-stage-7.target.amlg")).unwrap(),
    )
}

#[test]
fn dual_stage_with_a_fixed_seed_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (csv_a, net_a) = pipeline(a.path());
    let (csv_b, net_b) = pipeline(b.path());
    assert_eq!(csv_a, csv_b);
    assert_eq!(net_a, net_b);
    assert!(csv_a.starts_with("run_id,stage,epoch,task,metric,value\ndual-stage-7,stage1:bright_background,0,"));
    assert!(csv_a.lines().any(|l| l.starts_with("dual-stage-7,stage2,0,,l_total,")));

    // the same ids cannot be registered twice
    let cfg = a.path().join("tiny.cfg");
    let out = a.path().join("runs");
    let unl = out.join("gen-data-7/data/unlabeled.amlg");
    let again = run(["amalgam", "dual-stage", "--seed", "7", "--data", s(&unl), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(again, 2);
}

#[test]
fn stage_commands_and_resources_run() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let (cfg, out) = (dir.path().join("tiny.cfg"), dir.path().join("runs"));
    let unl = out.join("gen-data-7/data/unlabeled.amlg");
    let test = out.join("gen-data-7/data/test.amlg");
    let common = ["--config", s(&cfg), "--out", s(&out)];
    let call = |args: &[&str]| {
        let mut argv = vec!["amalgam"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&common);
        run(argv)
    };
    assert_eq!(call(&["amalgamate-stage1", "--data", s(&unl), "--run-id", "st"]), 0);
    // two components now cover each task, so stage 2 needs an explicit choice
    assert_eq!(call(&["amalgamate-stage2", "--data", s(&unl), "--run-id", "st2"]), 1);
    assert_eq!(
        call(&["amalgamate-stage2", "--data", s(&unl), "--run-id", "st2", "--components", "st.is_red,st.bright_background"]),
        0
    );
    assert_eq!(call(&["one-shot", "--data", s(&unl), "--test", s(&test), "--kd-only"]), 0);
    assert_eq!(call(&["eval", "--id", "st2.target", "--data", s(&test)]), 0);
    assert_eq!(call(&["resources", "--run-id", "res"]), 0);
    let csv = fs::read_to_string(out.join("res/metrics.csv")).unwrap();
    assert!(csv.contains("res,resources,0,s0,params,"));
    assert!(csv.contains("res,resources,0,target,params,"));
    assert_eq!(call(&["amalgamate-stage2", "--data", s(&unl), "--components", "nope"]), 2);
}
