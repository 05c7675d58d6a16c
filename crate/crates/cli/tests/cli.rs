use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use megloc::dataset::read_dataset;
use megloc::eval::read_sweep_csv;
use megloc::forward::read_lead_field;
use megloc::nn::{build_mlp_with_hidden, load_model, OutputFrame};

const SMALL: &str = r#"
[geometry]
n_sensors = 32
n_sources = 120
seed = 7

[data]
n_sources = 1
count = 8
snr_db = inf
correlation = 0.0
n_samples = 1

[model]
hidden = [6, 5]

[train]
steps = 0

[experiment]
n_sources = 1
n_samples = 1
snr_values = [0.0, 10.0]
trials = 6
perturbation_rhos = [0.0, 0.1]

[timing]
q_values = [1]
n_samples_values = [1]
repeats = 10
"#;

fn megloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_megloc"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn with_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn geometry_is_reproducible_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    let stdout = ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    assert!(stdout.contains("M=32 P=120"), "{stdout}");
    let first = fs::read(dir.path().join("lead_field.megl")).unwrap();
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    assert_eq!(fs::read(dir.path().join("lead_field.megl")).unwrap(), first);
    let sensors = fs::read_to_string(dir.path().join("sensors.csv")).unwrap();
    assert_eq!(sensors.lines().count(), 33);
}

#[test]
fn unknown_key_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), &format!("{SMALL}\n[extra]\nfoo = 1\n"));
    let out = megloc(dir.path(), &["gen-geometry", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
    assert!(!dir.path().join("lead_field.megl").exists());

    let out = megloc(dir.path(), &["gen-geometry", "--config", &cfg, "--set", "geometry.sede=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_geometry_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    let out = megloc(dir.path(), &["gen-geometry", "--config", &cfg, "--set", "geometry.source_radius=0.2"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rap_music_localizes_noiseless_example_on_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    ok(&megloc(dir.path(), &["gen-data", "--config", &cfg]));
    let data = read_dataset(&dir.path().join("data.megd")).unwrap();
    let (_, space, _) = read_lead_field(&dir.path().join("lead_field.megl")).unwrap();
    for k in [0usize, 5] {
        let stdout = ok(&megloc(dir.path(), &["localize", "--config", &cfg, "--set", &format!("localize.example={k}")]));
        let line: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
        let pos: Vec<f64> = line["position"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        // Stored targets are single precision; the grid point they round from is the truth.
        let target = data.examples[k].targets[0];
        let truth = (0..space.len())
            .min_by(|&a, &b| (space.positions()[a] - target).norm().total_cmp(&(space.positions()[b] - target).norm()))
            .unwrap();
        assert!((space.positions()[truth] - target).norm() < 1e-7);
        assert_eq!(line["grid_index"].as_u64(), Some(truth as u64));
        for (a, b) in pos.iter().zip(space.positions()[truth].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn recording_csv_can_be_localized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    let (lf, space, _) = read_lead_field(&dir.path().join("lead_field.megl")).unwrap();
    let col = lf.column(17);
    let text: String = col.iter().map(|v| format!("{v}\n")).collect();
    fs::write(dir.path().join("rec.csv"), text).unwrap();
    let stdout = ok(&megloc(dir.path(), &["localize", "--config", &cfg, "--set", "localize.recording=\"rec.csv\""]));
    let line: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(line["grid_index"].as_u64(), Some(17));
    assert_eq!(line["position"][2].as_f64(), Some(space.positions()[17].z));
}

#[test]
fn zero_step_training_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    ok(&megloc(dir.path(), &["train", "--config", &cfg]));
    let saved = load_model(&dir.path().join("model.megm")).unwrap();
    let (_, space, fp) = read_lead_field(&dir.path().join("lead_field.megl")).unwrap();
    let mut init = build_mlp_with_hidden(32, 1, &[6, 5], 3).unwrap();
    init.fingerprint = fp;
    init.set_output_frame(OutputFrame::for_space(&space).unwrap());
    assert_eq!(saved, init);
    assert_eq!(fs::read_to_string(dir.path().join("loss.csv")).unwrap(), "step,loss,reg_term\n");
}

#[test]
fn training_then_model_sweeps_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    ok(&megloc(dir.path(), &["gen-data", "--config", &cfg, "--set", "data.count=64"]));
    let train = ["train", "--config", &cfg, "--set", "train.steps=20", "--set", "train.log_every=5", "--set", "train.source=\"dataset\""];
    ok(&megloc(dir.path(), &train));
    let history = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    ok(&megloc(dir.path(), &["sweep", "--config", &cfg, "--set", "experiment.localizer=\"mlp\""]));
    let report = read_sweep_csv(&dir.path().join("sweep.csv")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.localizer == "mlp" && r.trials == 6));
    let stdout = ok(&megloc(dir.path(), &["bench-time", "--config", &cfg, "--set", "timing.models=[\"model.megm\"]"]));
    assert!(stdout.contains("mlp q=1 n=1"), "{stdout}");
    assert!(stdout.contains("rap_music q=1 n=1"), "{stdout}");
}

#[test]
fn sweep_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    ok(&megloc(dir.path(), &["sweep", "--config", &cfg]));
    let first = fs::read(dir.path().join("sweep.csv")).unwrap();
    ok(&megloc(dir.path(), &["sweep", "--config", &cfg, "--threads", "1"]));
    assert_eq!(fs::read(dir.path().join("sweep.csv")).unwrap(), first);
    ok(&megloc(dir.path(), &["perturb-sweep", "--config", &cfg]));
    let text = fs::read_to_string(dir.path().join("robustness.csv")).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",rho"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn mismatched_lead_field_exits_3_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg]));
    ok(&megloc(dir.path(), &["gen-data", "--config", &cfg]));
    ok(&megloc(dir.path(), &["gen-geometry", "--config", &cfg, "--set", "geometry.seed=8"]));
    let out = megloc(dir.path(), &["localize", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let hashes = stderr.split_whitespace().filter(|w| w.len() == 64 && w.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(hashes.count(), 2, "{stderr}");
}

#[test]
fn resolved_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), SMALL);
    let out = megloc(dir.path(), &["gen-geometry", "--config", &cfg, "--set", "geometry.seed=9"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("# resolved config"));
    assert!(stderr.contains("seed = 9"));
}
