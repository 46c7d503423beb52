use crate::config::{RunConfig, RunEntry};
use crate::error::CliError;
use intraloss::data::{generate, LabeledDataset, Split};
use intraloss::eval::{sphere_dump, DistributionReport};
use intraloss::experiment::{gradcheck_suite, run_experiment, GradcheckRow, RunOutcome};
use intraloss::margin::lambda_at;
use intraloss::trainer::{Backbone, GradcheckOptions, TrainConfig};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// The configured dataset file, or a freshly generated one.
pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset, CliError> {
    match &cfg.data.path {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::io(path, e))?;
            Ok(LabeledDataset::read_csv(std::io::BufReader::new(file))?)
        }
        None => Ok(generate(&cfg.dataset_spec())?),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let ds = generate(&cfg.dataset_spec())?;
    ensure_dir(out)?;
    let path = out.join("dataset.csv");
    let mut w = create(&path)?;
    ds.write_csv(&mut w)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let mut msg = format!("wrote {} rows to {}\n", ds.len(), path.display());
    for (class, count) in ds.class_counts().iter().enumerate() {
        let _ = writeln!(msg, "  class {class}: {count}");
    }
    Ok(msg)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    eval_split: &'a str,
    train_accuracy: f64,
    #[serde(flatten)]
    report: &'a DistributionReport,
}

#[derive(Serialize)]
struct ModelFile<'a> {
    backbone: &'a Backbone,
    class_weights: &'a intraloss::Matrix,
}

fn write_sphere(ds: &LabeledDataset, outcome: &RunOutcome, cfg: &TrainConfig, split: Split, path: &Path) -> Result<(), CliError> {
    let emb = outcome.model.embed(ds, split)?;
    let (_, labels) = ds.split_view(split);
    let lambda = lambda_at(cfg.total_iterations, &cfg.margin.lambda);
    let intra = cfg.intra_config()?;
    let mut dump = sphere_dump(&emb, &labels, &outcome.model.class_weights, &cfg.margin, intra.as_ref(), lambda)?;
    dump.set_sample_ids(&ds.split_indices(split))?;
    let mut w = create(path)?;
    dump.write_csv(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes trace, model, report and sphere dumps for one finished run.
fn write_run(ds: &LabeledDataset, outcome: &RunOutcome, cfg: &TrainConfig, dir: &Path) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let trace_path = dir.join("trace.csv");
    let mut w = create(&trace_path)?;
    outcome.model.trace.write_csv(&mut w)?;
    w.flush().map_err(|e| CliError::io(&trace_path, e))?;
    write_json(
        &dir.join("model.json"),
        &ModelFile {
            backbone: &outcome.model.backbone,
            class_weights: &outcome.model.class_weights,
        },
    )?;
    write_json(
        &dir.join("report.json"),
        &TrainReport {
            eval_split: outcome.eval_split.as_str(),
            train_accuracy: outcome.train_accuracy,
            report: &outcome.report,
        },
    )?;
    write_sphere(ds, outcome, cfg, Split::Train, &dir.join("sphere_train.csv"))?;
    if matches!(outcome.model.backbone, Backbone::Mlp { .. }) {
        write_sphere(ds, outcome, cfg, Split::Test, &dir.join("sphere_test.csv"))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let tc = cfg.train_config();
    let outcome = run_experiment(&ds, &tc, cfg.eval.num_pairs, &[])?;
    write_run(&ds, &outcome, &tc, out)?;
    let g = &outcome.report.global;
    Ok(format!(
        "train accuracy {:.4}\nverification accuracy ({} split) {:.4}\nmean p95 radius {:.4} rad\nmean anisotropy {:.3}\nmargin proxy {:.4} rad\noutputs in {}\n",
        outcome.train_accuracy,
        outcome.eval_split.as_str(),
        g.verification_accuracy,
        g.mean_p95_radius_rad,
        g.mean_anisotropy_index,
        g.margin_proxy_rad,
        out.display()
    ))
}

pub fn gradcheck(cfg: &RunConfig, out: &Path, corrupt: bool) -> Result<String, CliError> {
    let ds = load_dataset(cfg)?;
    let opts = GradcheckOptions {
        corrupt,
        ..GradcheckOptions::default()
    };
    let rows = gradcheck_suite(&ds, &cfg.train_config(), cfg.gradcheck.batch_size, cfg.gradcheck.batches, &opts)?;
    ensure_dir(out)?;
    write_json(&out.join("gradcheck.json"), &rows)?;
    let text = gradcheck_table(&rows, opts.tolerance);
    if rows.iter().all(|r| r.passed) {
        Ok(text)
    } else {
        Err(CliError::Gradcheck(text))
    }
}

fn gradcheck_table(rows: &[GradcheckRow], tolerance: f64) -> String {
    let mut s = format!("{:<24} {:<6} {:>8} {:>8} {:>14}  result\n", "scheme", "intra", "checked", "skipped", "max_rel_err");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:<6} {:>8} {:>8} {:>14.3e}  {}",
            r.scheme.name(),
            r.intra,
            r.checked,
            r.skipped_samples,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "tolerance {tolerance:e}");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub train_accuracy: f64,
    pub verification_accuracy: f64,
    pub mean_p95_radius_rad: f64,
    pub mean_anisotropy_index: f64,
    pub margin_proxy_rad: f64,
    pub error: Option<String>,
}

fn compare_one(cfg: &RunConfig, run: &RunEntry, seeds: &[u64], dir: &Path) -> Result<ComparisonRow, CliError> {
    let mut row = ComparisonRow {
        name: run.name.clone(),
        seeds: seeds.to_vec(),
        train_accuracy: 0.0,
        verification_accuracy: 0.0,
        mean_p95_radius_rad: 0.0,
        mean_anisotropy_index: 0.0,
        margin_proxy_rad: 0.0,
        error: None,
    };
    let k = seeds.len() as f64;
    for &seed in seeds {
        let seeded = cfg.clone().with_seed(Some(seed));
        let ds = load_dataset(&seeded)?;
        let tc = seeded.run_config(run);
        let outcome = run_experiment(&ds, &tc, cfg.eval.num_pairs, &[])?;
        write_run(&ds, &outcome, &tc, &dir.join(format!("seed_{seed}")))?;
        let g = &outcome.report.global;
        row.train_accuracy += outcome.train_accuracy / k;
        row.verification_accuracy += g.verification_accuracy / k;
        row.mean_p95_radius_rad += g.mean_p95_radius_rad / k;
        row.mean_anisotropy_index += g.mean_anisotropy_index / k;
        row.margin_proxy_rad += g.margin_proxy_rad / k;
    }
    Ok(row)
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>9}  {:>12}  {:>12}  {:>10}  {:>12}\n",
        "name", "train_acc", "verification", "p95_rad", "anisotropy", "margin_rad"
    );
    for r in rows {
        match &r.error {
            Some(e) => {
                let _ = writeln!(s, "{:<width$}  FAILED: {e}", r.name);
            }
            None => {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>9.4}  {:>12.4}  {:>12.4}  {:>10.3}  {:>12.4}",
                    r.name, r.train_accuracy, r.verification_accuracy, r.mean_p95_radius_rad, r.mean_anisotropy_index, r.margin_proxy_rad
                );
            }
        }
    }
    s
}

/// Trains every `[[runs]]` entry on the same data. Failed runs are kept as
/// flagged rows; the first failure decides the exit status.
pub fn compare(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    if cfg.runs.len() < 2 {
        return Err(CliError::Config(format!(
            "runs: compare needs at least two entries, found {}",
            cfg.runs.len()
        )));
    }
    let seeds = cfg.compare.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    ensure_dir(out)?;
    let mut rows = Vec::new();
    let mut first_error = None;
    for (i, run) in cfg.runs.iter().enumerate() {
        let dir: PathBuf = out.join("runs").join(format!("{i}_{}", run.name));
        match compare_one(cfg, run, &seeds, &dir) {
            Ok(row) => rows.push(row),
            Err(e) => {
                rows.push(ComparisonRow {
                    name: run.name.clone(),
                    seeds: seeds.clone(),
                    train_accuracy: f64::NAN,
                    verification_accuracy: f64::NAN,
                    mean_p95_radius_rad: f64::NAN,
                    mean_anisotropy_index: f64::NAN,
                    margin_proxy_rad: f64::NAN,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    let table = comparison_table(&rows);
    write_text(&out.join("comparison.txt"), &table)?;
    write_json(&out.join("comparison.json"), &rows)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(table),
    }
}
