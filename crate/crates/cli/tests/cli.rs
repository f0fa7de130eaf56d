use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_sdf::experiment::{fit_in_mm, load_transform, mesh_in_mm, ExperimentConfig};
use latent_sdf::fitting::load_latent;
use latent_sdf::io::{read_cloud_ply, read_mesh_ply};
use latent_sdf::sdfnet::LatentSdfModel;
use latent_sdf::training::{history_from_csv, HISTORY_FILE, MODEL_FILE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-sdf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny network, few epochs, coarse grids: fast enough for a test.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{
  "network": {"layer_count": 2, "hidden_width": 16, "skip_layer": 1, "latent_dim": 4},
  "training": {"epochs": 3, "surface_points_per_shape": 100, "freespace_points_per_shape": 100, "shapes_per_batch": 2},
  "fit": {"iterations": 20},
  "grid": {"resolution": [24, 24, 24], "min": [-1, -1, -1], "max": [1, 1, 1]},
  "data": {"settings": {"points_per_shape": 400, "grid_resolution": 48}},
  "evaluation": {"samples": 5000}
}"#,
    )
    .unwrap();
    path
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture(count: &str) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = small_config(&root);
    let data = root.join("data");
    ok(&["gen-data", "--count", count, "--seed", "4", "--config", s(&config), "--out", s(&data)]);
    Fixture { _tmp: tmp, root, config, data }
}

#[test]
fn gen_data_writes_pairs_and_is_reproducible() {
    let f = fixture("2");
    for i in 0..2 {
        assert!(f.data.join(format!("shape_00{i}_mesh.ply")).exists());
        assert!(f.data.join(format!("shape_00{i}_cloud.ply")).exists());
    }
    assert!(f.data.join("config.json").exists());
    let again = f.root.join("again");
    ok(&["gen-data", "--count", "2", "--seed", "4", "--config", s(&f.config), "--out", s(&again)]);
    assert_eq!(
        fs::read_to_string(f.data.join("manifest.json")).unwrap(),
        fs::read_to_string(again.join("manifest.json")).unwrap()
    );
    // non-empty without --force
    assert_eq!(code(&["gen-data", "--count", "2", "--config", s(&f.config), "--out", s(&again)]), 2);
    ok(&["gen-data", "--count", "1", "--config", s(&f.config), "--out", s(&again), "--force"]);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&["train", "--data", "/definitely/missing", "--out", s(&out)]), 2);
    assert_eq!(code(&["degrade", "--cloud", "x.ply", "--out", s(&out)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"training": {"epochz": 1}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&bad), "--out", s(&out)]), 2);
}

#[test]
fn corrupt_model_exits_3() {
    let f = fixture("1");
    let model = f.root.join("model");
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&model)]);
    let bytes = fs::read(model.join(MODEL_FILE)).unwrap();
    fs::write(model.join(MODEL_FILE), &bytes[..bytes.len() / 2]).unwrap();
    let cloud = f.data.join("shape_000_cloud.ply");
    let out = f.root.join("fit");
    assert_eq!(code(&["fit", "--model", s(&model), "--cloud", s(&cloud), "--out", s(&out)]), 3);
}

#[test]
fn training_resume_continues_history_exactly() {
    let f = fixture("2");
    let full = f.root.join("full");
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--epochs", "5", "--out", s(&full)]);
    let part = f.root.join("part");
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&part)]);
    let rows = history_from_csv(&fs::read_to_string(part.join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--epochs", "5", "--resume", "--out", s(&part)]);
    let resumed = fs::read_to_string(part.join(HISTORY_FILE)).unwrap();
    let rows = history_from_csv(&resumed).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert_eq!(resumed, fs::read_to_string(full.join(HISTORY_FILE)).unwrap());
    assert_eq!(fs::read(part.join(MODEL_FILE)).unwrap(), fs::read(full.join(MODEL_FILE)).unwrap());
    let echoed = ExperimentConfig::load(part.join("config.json")).unwrap();
    assert_eq!(echoed.training.epochs, 5);
}

#[test]
fn fit_mesh_eval_matches_library_composition() {
    let f = fixture("2");
    let model = f.root.join("model");
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&model)]);
    let cloud = f.data.join("shape_001_cloud.ply");
    let degraded = f.root.join("degraded");
    ok(&["degrade", "--cloud", s(&cloud), "--subsample", "200", "--noise-sigma", "1.0", "--out", s(&degraded)]);
    let sparse = degraded.join("cloud.ply");
    assert_eq!(read_cloud_ply(&sparse).unwrap().len(), 200);

    let fit = f.root.join("fit");
    ok(&["fit", "--model", s(&model), "--cloud", s(&sparse), "--lambda", "0.1", "--config", s(&f.config), "--out", s(&fit)]);
    let latent = fit.join("latent.bin");
    let mesh = f.root.join("mesh");
    ok(&["mesh", "--model", s(&model), "--latent", s(&latent), "--config", s(&f.config), "--out", s(&mesh)]);
    let eval = f.root.join("eval");
    let gt = f.data.join("shape_001_mesh.ply");
    let pred = mesh.join("mesh.ply");
    let report = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--config", s(&f.config), "--out", s(&eval)]);
    assert!(String::from_utf8_lossy(&report.stdout).contains("Chamfer distance"));
    assert!(fs::read_to_string(eval.join("metrics.csv")).unwrap().lines().count() == 2);

    // the same steps in-process
    let config = ExperimentConfig::load(&f.config).unwrap();
    let mut fit_config = config.fit.clone();
    fit_config.lambda = 0.1;
    let m = LatentSdfModel::load(model.join(MODEL_FILE)).unwrap();
    let t = load_transform(&model).unwrap();
    let result = fit_in_mm(&m, &t, &read_cloud_ply(&sparse).unwrap(), &fit_config).unwrap();
    assert_eq!(load_latent(&latent).unwrap(), result.latent);
    let lib_mesh = mesh_in_mm(&m, &t, &result.latent, &config.grid).unwrap();
    assert_eq!(read_mesh_ply(&pred).unwrap(), lib_mesh);
}

#[test]
fn sample_writes_requested_count() {
    let f = fixture("2");
    let model = f.root.join("model");
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&model)]);
    let out = f.root.join("samples");
    ok(&["sample", "--model", s(&model), "--count", "3", "--seed", "1", "--config", s(&f.config), "--out", s(&out)]);
    let summary = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for i in 0..3 {
        assert!(out.join(format!("sample_00{i}.latent")).exists());
    }
    let full = f.root.join("samples_full");
    ok(&["sample", "--model", s(&model), "--count", "2", "--full-covariance", "--config", s(&f.config), "--out", s(&full)]);
    assert!(fs::read_to_string(full.join("config.json")).unwrap().contains("\"full\""));
}

#[test]
fn eval_of_identical_meshes_is_perfect() {
    let f = fixture("1");
    let gt = f.data.join("shape_000_mesh.ply");
    let out = f.root.join("eval");
    ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--planes", "none", "--out", s(&out)]);
    let row = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let values: Vec<&str> = row.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&values[..3], &["0", "100", "100"]);
}

/// The layout a NumPy-based depth unprojector writes: little-endian float32
/// positions and normals.
fn float32_cloud(points: &[[f32; 3]], normals: &[[f32; 3]]) -> Vec<u8> {
    let mut bytes = format!(
        "ply\nformat binary_little_endian 1.0\ncomment depth unprojection\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\nend_header\n",
        points.len()
    )
    .into_bytes();
    for (p, n) in points.iter().zip(normals) {
        for v in p.iter().chain(n) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

#[test]
fn fit_accepts_float32_depth_clouds() {
    let f = fixture("1");
    let model = f.root.join("model");
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&model)]);
    let source = read_cloud_ply(f.data.join("shape_000_cloud.ply")).unwrap().subsample(300, 1);
    let points: Vec<[f32; 3]> = source.points().iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    let normals: Vec<[f32; 3]> = source.normals().unwrap().iter().map(|n| [n.x as f32, n.y as f32, n.z as f32]).collect();
    let cloud = f.root.join("depth.ply");
    fs::write(&cloud, float32_cloud(&points, &normals)).unwrap();
    assert_eq!(read_cloud_ply(&cloud).unwrap().len(), 300);

    let out = f.root.join("fit");
    ok(&["fit", "--model", s(&model), "--cloud", s(&cloud), "--config", s(&f.config), "--out", s(&out)]);
    assert_eq!(load_latent(out.join("latent.bin")).unwrap().len(), 4);
}
