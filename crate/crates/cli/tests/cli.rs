use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tiny_config(dir: &Path, teacher_sequences: usize) -> PathBuf {
    let out = dir.join("run");
    let text = format!(
        r#"
schema_version = 1
seed = 0
output_dir = "{out}"

[task]
dof = 2
target = [0.65, 0.4]
image_size = 16
sprite = "teacher"
sprite_radius = 2.0
a_max = 0.05

[demos]
teacher_sequences = {teacher_sequences}
executor_sequences = 1
steps = 6
pattern = "straight"
seed = 0

[[methods]]
[methods.encoder]
method = "sae"
latent_dim = 8
sae_channels = 2
image_size = 16
hidden = [16, 8]
sae_conv_channels = 2
sae_decoder_hidden = 8
temperature = 1.0
seed = 0

[methods.train]
epochs = 2
batch_size = 4
learning_rate = 1e-3
seed = 0
kl_warmup_epochs = 0

[analysis]
tau = 0.2
grid_n = 6
alpha_sweep = []
alpha_sweep_epochs = 1
dof_compare = []

[control]
trials = 2
goal_radius = 0.02
reinforce_runs = 1
seed = 1

[control.uvs]
gain = 0.5
damping = 1e-3
max_steps = 1

[control.reinforce]
gamma = 0.99
learning_rate = 1e-4
episodes = 4
batch_size = 2
horizon = 3
r_goal = 10.0
k_gain = 10.0
log_std_init = -1.5
seed = 0
"#,
        out = out.display()
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn latentservo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentservo")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stage(dir: &Path, name: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![name, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = latentservo(&args);
    assert!(out.status.success(), "{name} failed in {}: {}", dir.display(), String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(run: &Path) -> Value {
    serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn invalid_config_exits_2_without_creating_the_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let text = fs::read_to_string(&cfg).unwrap().replace("seed = 1\n", "seed = 1\nbogus = 3\n");
    fs::write(&cfg, text).unwrap();
    let out = latentservo(&["demo-gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn zero_sequences_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 0);
    let out = latentservo(&["demo-gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sequence"));
}

#[test]
fn missing_config_file_exits_2() {
    let out = latentservo(&["demo-gen", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_without_upstream_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let out = latentservo(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("latentservo demo-gen"));
}

#[test]
fn corrupt_manifest_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("manifest.json"), "{ truncated").unwrap();
    assert_eq!(latentservo(&["demo-gen", "--config", cfg.to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(latentservo(&["report", "--out", run.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_latentservo"))
        .args(["demo-gen", "--config", cfg.to_str().unwrap()])
        .env("LATENTSERVO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demo_gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2);
    let run = tmp.path().join("run");
    stage(tmp.path(), "demo-gen", &cfg, &[]);
    let snapshot = || -> Vec<(PathBuf, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(run.join("demos/teacher/seq_001"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.clone(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let first = snapshot();
    assert!(first.len() > 1);
    stage(tmp.path(), "demo-gen", &cfg, &["--force"]);
    assert_eq!(first, snapshot());
}

#[test]
fn resume_skips_unchanged_stages_and_force_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    stage(tmp.path(), "demo-gen", &cfg, &[]);
    stage(tmp.path(), "train", &cfg, &[]);
    let before = manifest(&run);
    let model = run.join("models/sae.lsrv");
    let stamp = fs::metadata(&model).unwrap().modified().unwrap();

    stage(tmp.path(), "train", &cfg, &[]);
    assert_eq!(manifest(&run), before, "unchanged digest must not touch the manifest");
    assert_eq!(fs::metadata(&model).unwrap().modified().unwrap(), stamp);

    stage(tmp.path(), "train", &cfg, &["--force"]);
    let after = manifest(&run);
    assert_eq!(after["stages"]["train:sae"]["digest"], before["stages"]["train:sae"]["digest"]);
    assert_ne!(fs::metadata(&model).unwrap().modified().unwrap(), stamp);

    // a changed seed changes the digest, so the stage reruns without --force
    stage(tmp.path(), "demo-gen", &cfg, &["--seed", "7"]);
    let reseeded = manifest(&run);
    assert_ne!(reseeded["stages"]["demo-gen"]["digest"], before["stages"]["demo-gen"]["digest"]);
}

#[test]
fn report_marks_stages_that_never_ran() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    stage(tmp.path(), "demo-gen", &cfg, &[]);
    let out = stage(tmp.path(), "report", &cfg, &[]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("report.md"));
    let text = fs::read_to_string(run.join("report.md")).unwrap();
    assert!(text.contains("| demo-gen | COMPLETED"));
    assert!(text.contains("| reinforce | SKIPPED"));
}

#[test]
fn tiny_pipeline_writes_traces_for_failed_episodes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    stage(tmp.path(), "pipeline", &cfg, &[]);

    let m = manifest(&run);
    // no alpha values configured, so that stage has nothing to record
    assert!(m["stages"]["alpha-sweep"].is_null());
    for s in latentservo::STAGES.iter().filter(|&&s| s != "alpha-sweep") {
        let key = if *s == "train" { "train:sae" } else { s };
        assert_eq!(m["stages"][key]["status"], "completed", "{key}");
    }

    // one UVS step cannot reach the goal from a random start
    let servo: Value = serde_json::from_slice(&fs::read(run.join("servo/oracle.json")).unwrap()).unwrap();
    assert_eq!(servo["stats"]["successes"], 0);
    for i in 0..2 {
        let trace = fs::read_to_string(run.join(format!("servo/traces/oracle_trial_{i:02}.csv"))).unwrap();
        assert!(trace.lines().count() >= 2, "trace {i} has no rows");
    }
    for p in m["stages"]["servo"]["outputs"].as_array().unwrap() {
        assert!(run.join(p.as_str().unwrap()).exists());
    }
    assert!(run.join("report.md").exists());
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_latentservo"))
            .args(["pipeline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("LATENTSERVO_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let files = ["fieldmap/metrics.json", "servo/oracle.json", "reinforce/oracle.json", "evaluate/table.json"];
        outputs.push(files.map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
}
