use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[model]
resolution = 8
latent_dim = 16
gen_channels = 8
disc_channels = 8
heads = 2

[train]
batch = 4
steps = 4
checkpoint_every = 2

[joint]
bootstrap_steps = 2
gan_steps = 2
iterations = 2
view_shapes = 4

[joint.classifier]
steps = 3
batch = 8

[dataset]
resolution = 8
shapes = 16
views_per_shape = 4
seed = 3

[eval]
samples = 70

[eval.extractor]
shapes_per_family = 12
steps = 4
batch = 8
"#;

fn mpgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpgan")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mpgan(args);
    assert!(
        out.status.success(),
        "mpgan {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }
    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn s(&self, name: &str) -> String {
        self.p(name).to_str().unwrap().to_owned()
    }
    fn config(&self) -> String {
        self.s("tiny.toml")
    }
    fn dataset(&self) -> String {
        ok(&["dataset", "--config", &self.config(), "--out", &self.s("data")]);
        self.s("data")
    }
}

fn metric_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn dataset_writes_manifest_images_and_oracle() {
    let f = Fixture::new();
    let data = f.dataset();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&data).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 64);
    assert_eq!(manifest["size"], 8);
    assert_eq!(fs::read_dir(Path::new(&data).join("images")).unwrap().count(), 64);
    assert!(Path::new(&data).join("oracle.json").exists());
}

#[test]
fn dataset_is_deterministic() {
    let f = Fixture::new();
    ok(&["dataset", "--config", &f.config(), "--out", &f.s("a")]);
    ok(&["dataset", "--config", &f.config(), "--out", &f.s("b")]);
    for name in ["manifest.json", "oracle.json", "images/000017.pgm"] {
        assert_eq!(fs::read(f.p("a").join(name)).unwrap(), fs::read(f.p("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn refuses_to_overwrite_without_force() {
    let f = Fixture::new();
    f.dataset();
    let out = mpgan(&["dataset", "--config", &f.config(), "--out", &f.s("data")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&["dataset", "--config", &f.config(), "--out", &f.s("data"), "--force", "--shapes", "4"]);
    assert_eq!(fs::read_dir(f.p("data/images")).unwrap().count(), 16);
}

#[test]
fn bad_config_exits_with_usage_code() {
    let f = Fixture::new();
    let out = mpgan(&["dataset", "--config", &f.config(), "--set", "dataset.bogus=1", "--out", &f.s("x")]);
    assert_eq!(out.status.code(), Some(2));
    let out = mpgan(&["dataset", "--config", &f.config(), "--set", "dataset.resolution=13", "--out", &f.s("x")]);
    assert_eq!(out.status.code(), Some(2));
    let out = mpgan(&["train", "--data", &f.s("missing"), "--out", &f.s("run"), "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let f = Fixture::new();
    let out = mpgan(&["train", "--config", &f.config(), "--data", &f.s("missing"), "--out", &f.s("run")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn single_training_writes_checkpoints_metrics_and_plot() {
    let f = Fixture::new();
    let data = f.dataset();
    ok(&["train", "--config", &f.config(), "--data", &data, "--out", &f.s("run"), "--mode", "single"]);
    for name in ["run.toml", "metrics.jsonl", "ckpt_step000002.mpg", "ckpt_step000004.mpg", "losses.svg"] {
        assert!(f.p("run").join(name).exists(), "{name}");
    }
    let lines = metric_lines(&f.p("run/metrics.jsonl"));
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 4);
    assert_eq!(lines[0]["d_loss"].as_array().unwrap().len(), 1);
    let saved = fs::read_to_string(f.p("run/run.toml")).unwrap();
    assert!(saved.contains("heads = 1"), "{saved}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.dataset();
    let cfg = f.config();
    ok(&["train", "--config", &cfg, "--data", &data, "--out", &f.s("full"), "--mode", "mp-gan-oracle"]);
    ok(&["train", "--config", &cfg, "--data", &data, "--out", &f.s("part"), "--mode", "mp-gan-oracle", "--steps", "2"]);
    ok(&["train", "--data", &data, "--out", &f.s("part"), "--resume", "--steps", "4"]);
    assert_eq!(metric_lines(&f.p("full/metrics.jsonl")), metric_lines(&f.p("part/metrics.jsonl")));
    assert_eq!(fs::read(f.p("full/ckpt_step000004.mpg")).unwrap(), fs::read(f.p("part/ckpt_step000004.mpg")).unwrap());
}

#[test]
fn oracle_mode_uses_one_loss_per_head() {
    let f = Fixture::new();
    let data = f.dataset();
    ok(&["train", "--config", &f.config(), "--data", &data, "--out", &f.s("run"), "--mode", "mp-gan-oracle", "--heads", "3"]);
    let lines = metric_lines(&f.p("run/metrics.jsonl"));
    assert!(lines.iter().all(|l| l["d_loss"].as_array().unwrap().len() == 3));
}

#[test]
fn joint_training_and_view_evaluation() {
    let f = Fixture::new();
    let data = f.dataset();
    ok(&["train", "--config", &f.config(), "--data", &data, "--out", &f.s("run"), "--mode", "vp-mp-gan"]);
    for name in [
        "ckpt_bootstrap.mpg",
        "ckpt_joint1.mpg",
        "ckpt_joint2.mpg",
        "clusters_joint2.json",
        "classifier_joint2.mpg",
        "joint_report.json",
    ] {
        assert!(f.p("run").join(name).exists(), "{name}");
    }
    // bootstrap + 2 iterations of 2 steps each
    assert_eq!(metric_lines(&f.p("run/metrics.jsonl")).len(), 6);
    let report: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(f.p("run/joint_report.json")).unwrap()).unwrap();
    assert_eq!(report.len(), 2);
    assert!(report.iter().all(|r| r["view_accuracy"]["exact"].is_number()));

    let acc = ok(&[
        "eval",
        "--config",
        &f.config(),
        "--metric",
        "view-acc",
        "--data",
        &data,
        "--classifier",
        &f.s("run/classifier_joint2.mpg"),
    ]);
    let acc: serde_json::Value = serde_json::from_str(&acc).unwrap();
    let exact = acc["exact"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&exact) && acc["up_to_mirror"].as_f64().unwrap() >= exact);

    ok(&[
        "eval",
        "--config",
        &f.config(),
        "--metric",
        "view-dist",
        "--data",
        &data,
        "--clusters",
        &f.s("run/clusters_joint2.json"),
        "--out",
        &f.s("dist.json"),
        "--plot",
        &f.s("dist.svg"),
    ]);
    let dist: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.p("dist.json")).unwrap()).unwrap();
    let tv = dist["total_variation"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tv));
    assert!(fs::read_to_string(f.p("dist.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn joint_training_is_reproducible() {
    let f = Fixture::new();
    let data = f.dataset();
    for run in ["a", "b"] {
        ok(&["train", "--config", &f.config(), "--data", &data, "--out", &f.s(run), "--mode", "vp-mp-gan"]);
    }
    assert_eq!(metric_lines(&f.p("a/metrics.jsonl")), metric_lines(&f.p("b/metrics.jsonl")));
    assert_eq!(fs::read(f.p("a/clusters_joint2.json")).unwrap(), fs::read(f.p("b/clusters_joint2.json")).unwrap());
}

#[test]
fn generate_formats_and_determinism() {
    let f = Fixture::new();
    let data = f.dataset();
    ok(&["train", "--config", &f.config(), "--data", &data, "--out", &f.s("run"), "--steps", "2"]);
    let ckpt = f.s("run/ckpt_step000002.mpg");
    for (dir, format) in [("vox", "voxel"), ("vox2", "voxel"), ("obj", "mesh"), ("sil", "silhouette")] {
        ok(&["generate", "--checkpoint", &ckpt, "--count", "3", "--out", &f.s(dir), "--format", format, "--seed", "9"]);
    }
    assert_eq!(fs::read(f.p("vox/sample_0001.mpgvox")).unwrap(), fs::read(f.p("vox2/sample_0001.mpgvox")).unwrap());
    assert_eq!(fs::read_dir(f.p("obj")).unwrap().count(), 3);
    assert_eq!(fs::read_dir(f.p("sil")).unwrap().count(), 24);
    assert!(f.p("sil/sample_0002_az315.pgm").exists());
    let out = mpgan(&["generate", "--checkpoint", &ckpt, "--out", &f.s("vox")]);
    assert_eq!(out.status.code(), Some(2));
    let out = mpgan(&["generate", "--checkpoint", &ckpt, "--out", &f.s("t"), "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fid_evaluation_reports_baseline() {
    let f = Fixture::new();
    let small = f.dataset();
    ok(&["extractor-train", "--config", &f.config(), "--resolution", "8", "--out", &f.s("ex.mpg")]);
    ok(&["train", "--config", &f.config(), "--data", &small, "--out", &f.s("run"), "--steps", "2"]);
    let fid_args = |data: &str| {
        mpgan(&[
            "eval",
            "--config",
            &f.config(),
            "--metric",
            "fid",
            "--data",
            data,
            "--checkpoint",
            &f.s("run/ckpt_step000002.mpg"),
            "--extractor",
            &f.s("ex.mpg"),
        ])
    };
    // 16 reference shapes cannot support a 64-dimensional covariance.
    assert_eq!(fid_args(&small).status.code(), Some(2));
    ok(&["dataset", "--config", &f.config(), "--out", &f.s("big"), "--shapes", "140"]);
    let data = f.s("big");
    let report = ok(&[
        "eval",
        "--config",
        &f.config(),
        "--metric",
        "fid",
        "--data",
        &data,
        "--checkpoint",
        &f.s("run/ckpt_step000002.mpg"),
        "--extractor",
        &f.s("ex.mpg"),
    ]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["value"].as_f64().unwrap() >= 0.0);
    assert!(report["baseline_split_half"].as_f64().unwrap() >= 0.0);
    // An extractor is not a generator.
    let out = mpgan(&["generate", "--checkpoint", &f.s("ex.mpg"), "--out", &f.s("g")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn import_folder_of_masks() {
    let f = Fixture::new();
    let masks = f.p("masks");
    fs::create_dir_all(&masks).unwrap();
    for i in 0..3 {
        let mut pgm = b"P5\n8 8\n255\n".to_vec();
        pgm.extend((0..64).map(|p| if p % 8 > i { 255u8 } else { 0 }));
        fs::write(masks.join(format!("m{i}.pgm")), pgm).unwrap();
    }
    ok(&["dataset", "--config", &f.config(), "--import", masks.to_str().unwrap(), "--out", &f.s("imported")]);
    assert_eq!(fs::read_dir(f.p("imported/images")).unwrap().count(), 3);
    assert!(!f.p("imported/oracle.json").exists());
    ok(&["train", "--config", &f.config(), "--data", &f.s("imported"), "--out", &f.s("run"), "--steps", "2"]);
    let out = mpgan(&["train", "--config", &f.config(), "--data", &f.s("imported"), "--out", &f.s("run2"), "--mode", "mp-gan-oracle"]);
    assert_eq!(out.status.code(), Some(2));
}
