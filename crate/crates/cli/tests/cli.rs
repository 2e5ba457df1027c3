use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use ratenet::generator::compose_tensor;
use ratenet::trainer::{latest_checkpoint, RunConfig, TrainedModel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rate-net"));
    c.env_remove("RATE_NET_DATA_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, cycles: u64) -> std::path::PathBuf {
    let mut cfg = RunConfig::tiny();
    cfg.cycle.total_cycles = cycles;
    let path = dir.join(format!("tiny_{cycles}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg.to_json()).unwrap()).unwrap();
    path
}

/// A synthetic dataset and a two-cycle run shared by the slower tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    run: std::path::PathBuf,
    config: std::path::PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let o = run(&["synth-data", "--persons", "3", "--poses", "2", "--size", "32", "--test-persons", "1", "--seed", "5", "--out", p(&data)]);
        assert!(o.status.success(), "{}", text(&o));
        let config = tiny_config(dir.path(), 2);
        let runp = dir.path().join("run");
        let o = run(&["--config", p(&config), "train", "--out", p(&runp), "--data-root", p(&data)]);
        assert!(o.status.success(), "{}", text(&o));
        Fixture { data, run: runp, config, _dir: dir }
    })
}

#[test]
fn synth_data_writes_and_is_idempotent() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("d");
    let args = ["synth-data", "--persons", "4", "--poses", "3", "--size", "64", "--seed", "7", "--out", p(&out)];
    let first = run(&args);
    assert!(first.status.success());
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 12);
    let second = run(&args);
    assert!(second.status.success());
    assert!(text(&second).contains("unchanged"));
    let digest = |o: &Output| text(o).lines().find(|l| l.starts_with("digest")).unwrap().to_string();
    assert_eq!(digest(&first), digest(&second));
}

#[test]
fn synth_data_rejects_bad_size_and_dry_run_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("d");
    let o = run(&["synth-data", "--persons", "4", "--poses", "3", "--size", "60", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("multiple of 8"));
    let o = run(&["--dry-run", "synth-data", "--persons", "2", "--poses", "2", "--size", "32", "--out", p(&out)]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(run(&["train"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"cycle": {"bogus": 1}}"#).unwrap();
    let o = run(&["--config", p(&bad), "train", "--out", p(&d.path().join("r")), "--data-root", p(d.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_on_fresh_directory_fails() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let o = run(&["--config", p(&f.config), "train", "--resume", "--out", p(d.path()), "--data-root", p(&f.data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("no checkpoint found"));
}

#[test]
fn data_root_from_environment() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let o = bin()
        .args(["--dry-run", "--config", p(&f.config), "train", "--out", p(&out)])
        .env("RATE_NET_DATA_ROOT", &f.data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("2 cycles x 5 iterations"));
    assert!(!out.exists());
}

#[test]
fn pb_only_ablation_skips_enhancer() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), 1);
    let o = run(&["--config", p(&cfg), "train", "--ablation", "pb_only", "--out", p(&d.path().join("r")), "--data-root", p(&f.data)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("pose 2, texture 0"));
}

#[test]
fn non_finite_loss_exits_3() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.cycle.total_cycles = 3;
    cfg.optimizer.schedule.base_lr = 1e36;
    let path = d.path().join("hot.json");
    std::fs::write(&path, serde_json::to_string(&cfg.to_json()).unwrap()).unwrap();
    let o = run(&["--config", p(&path), "train", "--out", p(&d.path().join("r")), "--data-root", p(&f.data)]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("non-finite"));
}

#[test]
fn infer_grids_are_deterministic_with_five_panes() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["infer", "--checkpoint", p(&f.run), "--data-root", p(&f.data), "--out", p(out)]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let names: Vec<_> = std::fs::read_dir(a.join("grid")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2);
    for n in &names {
        let ga = std::fs::read(a.join("grid").join(n)).unwrap();
        assert_eq!(ga, std::fs::read(b.join("grid").join(n)).unwrap());
        let img = image::load_from_memory(&ga).unwrap();
        assert_eq!((img.width(), img.height()), (5 * 32, 32));
        // The output pane is the prediction written alongside.
        let pred = image::open(a.join("pred").join(n)).unwrap().to_rgb8();
        let pane = image::imageops::crop_imm(&img.to_rgb8(), 3 * 32, 0, 32, 32).to_image();
        assert_eq!(pane, pred);
    }
}

#[test]
fn infer_single_input_without_ground_truth_has_four_panes() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let img = f.data.join("images/p0000_00.png");
    let (sk, tk) = (f.data.join("keypoints/p0000_00.json"), f.data.join("keypoints/p0000_01.json"));
    let o = run(&[
        "infer", "--checkpoint", p(&f.run), "--out", p(d.path()),
        "--source", p(&img), "--source-keypoints", p(&sk), "--target-keypoints", p(&tk),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let grid = image::open(d.path().join("grid.png")).unwrap();
    assert_eq!(grid.width(), 4 * 32);

    // The composed output equals compose(coarse, residual) on the tensors.
    let model = TrainedModel::load(&latest_checkpoint(&f.run).unwrap().unwrap()).unwrap();
    let src = ratenet::data::load_image(&img).unwrap().reshape(&[1, 3, 32, 32]).unwrap();
    let heat = |k: &Path| {
        let kp = ratenet::data::Keypoints18::load(k).unwrap();
        let sigma = ratenet::data::default_sigma(32);
        ratenet::data::render_heatmap(&kp, 32, 32, sigma).unwrap().reshape(&[1, 18, 32, 32]).unwrap()
    };
    let r = model.infer(&src, &heat(&sk), &heat(&tk)).unwrap();
    assert_eq!(compose_tensor(&r.coarse, &r.residual).unwrap(), r.output);
    let pred = image::open(d.path().join("pred.png")).unwrap().to_rgb8();
    assert_eq!(pred, ratenet::data::denormalize_image(&r.output).unwrap());
}

#[test]
fn infer_rejects_resolution_mismatch() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let big = d.path().join("big");
    assert!(run(&["synth-data", "--persons", "2", "--poses", "2", "--size", "64", "--test-persons", "1", "--out", p(&big)]).status.success());
    let o = run(&["infer", "--checkpoint", p(&f.run), "--data-root", p(&big), "--out", p(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("trained at 32x32"));
}

#[test]
fn evaluate_identical_directories_and_report_schema() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("inf");
    assert!(run(&["infer", "--checkpoint", p(&f.run), "--data-root", p(&f.data), "--out", p(&out)]).status.success());
    let report = d.path().join("report.json");
    let o = run(&["evaluate", "--pred", p(&out.join("gt")), "--gt", p(&out.join("gt")), "--report", p(&report)]);
    assert!(o.status.success(), "{}", text(&o));
    let row = text(&o).lines().nth(1).unwrap().to_string();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[0], "1.000");
    assert!(cols.contains(&"0.000"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let obj = v.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["classifier", "extractor_provenance", "fid", "is_mean", "is_std", "lpips", "n_samples", "ssim"]);
    assert_eq!(obj["n_samples"], 2);
    assert_eq!(obj["extractor_provenance"], "fixed-seed-surrogate");
    assert!(obj["fid"].as_f64().unwrap() < 1e-6);
}

#[test]
fn evaluate_names_missing_file() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("inf");
    assert!(run(&["infer", "--checkpoint", p(&f.run), "--data-root", p(&f.data), "--out", p(&out)]).status.success());
    let victim = std::fs::read_dir(out.join("pred")).unwrap().next().unwrap().unwrap().path();
    let name = victim.file_name().unwrap().to_str().unwrap().to_string();
    std::fs::remove_file(&victim).unwrap();
    let o = run(&["evaluate", "--pred", p(&out.join("pred")), "--gt", p(&out.join("gt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains(&name));
}
