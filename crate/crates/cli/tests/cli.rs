use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};
use tempfile::TempDir;

fn setup(toml: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, toml).unwrap();
    (dir, cfg)
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intraloss"))
        .arg(cmd)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_all_rows_reproducibly() {
    let (dir, cfg) = setup("seed = 3\n");
    let a = run("gen-data", &cfg, &dir.path().join("a"), &[]);
    let b = run("gen-data", &cfg, &dir.path().join("b"), &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = std::fs::read_to_string(dir.path().join("a/dataset.csv")).unwrap();
    assert_eq!(text.lines().count(), 1601);
    assert_eq!(text, std::fs::read_to_string(dir.path().join("b/dataset.csv")).unwrap());
    assert!(String::from_utf8_lossy(&b.stdout).contains("class 7: 200"));
}

#[test]
fn single_class_is_a_config_error() {
    let (dir, cfg) = setup("[data]\nnum_classes = 1\n");
    let o = run("gen-data", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("num_classes"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let (dir, cfg) = setup("[train]\nlearning_rat = 0.1\n");
    let o = run("train", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn missing_config_and_dataset_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("train", &dir.path().join("nope.toml"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));

    let (dir, cfg) = setup("[data]\npath = \"/nonexistent/data.csv\"\n");
    let o = run("train", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent/data.csv"));
}

#[test]
fn train_without_intra_logs_zero_intra_loss() {
    let (dir, cfg) = setup("[margin]\nscheme = \"norm\"\n[train]\ntotal_iterations = 300\n");
    let out = dir.path().join("out");
    let o = run("train", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(out.join("trace.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "loss_intra").unwrap();
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|x| x[col].parse::<f64>().unwrap() == 0.0));
    for f in ["model.json", "report.json", "sphere_train.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn train_from_saved_dataset() {
    let (dir, cfg) = setup("[data]\nnum_classes = 4\nsamples_per_class = 50\n");
    assert!(run("gen-data", &cfg, &dir.path().join("data"), &[]).status.success());
    let cfg2 = dir.path().join("from_file.toml");
    std::fs::write(
        &cfg2,
        format!(
            "[data]\npath = \"{}\"\n[backbone]\nkind = \"mlp\"\n[train]\ntotal_iterations = 200\n",
            dir.path().join("data/dataset.csv").display()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run("train", &cfg2, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("sphere_test.csv").exists());
}

#[test]
fn exploding_learning_rate_is_a_numerical_failure() {
    let (dir, cfg) = setup("[margin]\nscheme = \"plain\"\n[train]\nlearning_rate = 1e200\ntotal_iterations = 50\n");
    let o = run("train", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("iteration"));
}

#[test]
fn gradcheck_exit_codes() {
    let (dir, cfg) = setup("[gradcheck]\nbatches = 3\n");
    let o = run("gradcheck", &cfg, &dir.path().join("ok"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("ok/gradcheck.json").exists());

    let o = run("gradcheck", &cfg, &dir.path().join("bad"), &["--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("FAIL"));

    let (dir, cfg) = setup("[gradcheck]\nbatch_size = 1\nbatches = 3\n");
    let o = run("gradcheck", &cfg, &dir.path().join("one"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

const AM_PAIR: &str = "[train]\ntotal_iterations = 2000\n\
    [[runs]]\nname = \"am\"\nscheme = \"additive_cosine\"\n\
    [[runs]]\nname = \"intra_am\"\nscheme = \"additive_cosine\"\nintra = true\n";

#[test]
fn compare_needs_two_runs() {
    let (dir, cfg) = setup("[[runs]]\nname = \"am\"\nscheme = \"additive_cosine\"\n");
    let o = run("compare", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("runs"));
}

#[test]
fn compare_identical_runs_give_identical_rows() {
    let (dir, cfg) = setup(
        "[train]\ntotal_iterations = 300\n[[runs]]\nname = \"a\"\nscheme = \"norm\"\n[[runs]]\nname = \"b\"\nscheme = \"norm\"\n",
    );
    let out = dir.path().join("out");
    let o = run("compare", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("comparison.json")).unwrap()).unwrap();
    let mut a = rows[0].clone();
    a["name"] = rows[1]["name"].clone();
    assert_eq!(a, rows[1]);
}

#[test]
fn reference_comparison_runs_quickly_and_shrinks_radius() {
    let (dir, cfg) = setup(AM_PAIR);
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = run("compare", &cfg, &out, &[]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("comparison.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("comparison.json")).unwrap()).unwrap();
    let p95 = |i: usize| rows[i]["mean_p95_radius_rad"].as_f64().unwrap();
    assert!(p95(1) < p95(0), "{} vs {}", p95(0), p95(1));
    assert!(out.join("runs/1_intra_am/seed_0/trace.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, cfg) = setup("seed = 1\n[data]\nnum_classes = 3\nsamples_per_class = 20\n");
    run("gen-data", &cfg, &dir.path().join("a"), &["--seed", "9"]);
    let (dir2, cfg2) = setup("seed = 9\n[data]\nnum_classes = 3\nsamples_per_class = 20\n");
    run("gen-data", &cfg2, &dir2.path().join("b"), &[]);
    assert_eq!(
        std::fs::read(dir.path().join("a/dataset.csv")).unwrap(),
        std::fs::read(dir2.path().join("b/dataset.csv")).unwrap()
    );
}
