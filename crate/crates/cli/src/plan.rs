//! Fully resolved commands and how to carry them out.
//!
//! A [`Plan`] holds every input a command depends on, with all config
//! overrides already folded in, so it can be stored in a manifest and run
//! again later with identical results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use bait::data::{load_features_csv, load_labeled_csv, load_unlabeled_csv, write_features_csv, LoadedDataset};
use bait::eval::{append_metrics_jsonl, boundary_grid, curves_csv, evaluate, read_metrics_jsonl, Evaluation, GridBounds, Snapshot};
use bait::experiment::MoonsSetup;
use bait::trainer::{adapt_observed, init_model, train_source_observed, EpochMetrics, StepKind, TrainObserver};
use bait::{AdaptMode, BaitModel, Checkpoint, Head, LabeledDataset, TauSchedule, Tensor, TrainConfig, UnlabeledDataset};
use serde::{Deserialize, Serialize};

use crate::error::{at, CliError, CliResult};

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const SOURCE_CKPT: &str = "source.ckpt";
pub const ADAPTED_CKPT: &str = "adapted.ckpt";
pub const SOURCE_METRICS: &str = "source_metrics.jsonl";
pub const ADAPT_METRICS: &str = "adapt_metrics.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const CONFUSION: &str = "confusion.json";
pub const CONFUSION_SOURCE: &str = "confusion_source.json";
pub const BOUNDARY: &str = "boundary.csv";
pub const BOUNDARY_SOURCE: &str = "boundary_source.csv";
pub const CURVES: &str = "curves.csv";
pub const REPORT: &str = "report.json";
pub const LAST_GOOD: &str = "diverged-last-good.ckpt";

const RUN_RESOLUTION: usize = 100;
const RUN_PAD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Plan {
    GenMoons {
        setup: MoonsSetup,
    },
    TrainSource {
        data: PathBuf,
        config: TrainConfig,
    },
    Adapt {
        ckpt: PathBuf,
        target: PathBuf,
        config: TrainConfig,
    },
    Eval {
        ckpt: PathBuf,
        data: PathBuf,
        head: Head,
    },
    ExportBoundary {
        ckpt: PathBuf,
        data: Option<PathBuf>,
        bounds: Option<GridBounds>,
        resolution: usize,
        pad: f64,
    },
    ExportCurves {
        metrics: Vec<PathBuf>,
    },
    Run {
        setup: MoonsSetup,
        config: TrainConfig,
    },
    Sweep {
        setup: MoonsSetup,
        config: TrainConfig,
        seeds: Vec<u64>,
        modes: Vec<AdaptMode>,
        jobs: usize,
    },
}

impl Plan {
    pub fn name(&self) -> &'static str {
        match self {
            Plan::GenMoons { .. } => "gen-moons",
            Plan::TrainSource { .. } => "train-source",
            Plan::Adapt { .. } => "adapt",
            Plan::Eval { .. } => "eval",
            Plan::ExportBoundary { .. } => "export-boundary",
            Plan::ExportCurves { .. } => "export-curves",
            Plan::Run { .. } => "run",
            Plan::Sweep { .. } => "sweep",
        }
    }

    pub fn inputs(&self) -> Vec<(&'static str, &Path)> {
        match self {
            Plan::GenMoons { .. } | Plan::Run { .. } | Plan::Sweep { .. } => vec![],
            Plan::TrainSource { data, .. } => vec![("data", data)],
            Plan::Adapt { ckpt, target, .. } => vec![("checkpoint", ckpt), ("target", target)],
            Plan::Eval { ckpt, data, .. } => vec![("checkpoint", ckpt), ("data", data)],
            Plan::ExportBoundary { ckpt, data, .. } => {
                let mut v = vec![("checkpoint", ckpt.as_path())];
                v.extend(data.as_deref().map(|d| ("data", d)));
                v
            }
            Plan::ExportCurves { metrics } => metrics.iter().map(|m| ("metrics", m.as_path())).collect(),
        }
    }

    /// Output layout, file name to description.
    pub fn outputs(&self) -> BTreeMap<String, String> {
        let mut out: Vec<(&str, &str)> = Vec::new();
        let run_files = [
            (SOURCE_CSV, "source moons, last column is the label"),
            (TARGET_CSV, "rotated target moons, last column is the evaluation label"),
            (SOURCE_CKPT, "model after source training"),
            (SOURCE_METRICS, "per-epoch source training metrics"),
            (CONFUSION_SOURCE, "source model evaluated on the target domain"),
            (BOUNDARY_SOURCE, "source model decision boundary"),
        ];
        let mode_files = [
            (ADAPTED_CKPT, "model after adaptation"),
            (ADAPT_METRICS, "per-epoch adaptation metrics"),
            (SUMMARY, "adaptation summary"),
            (CONFUSION, "adapted anchor head evaluated on the target domain"),
            (BOUNDARY, "adapted decision boundaries of both heads"),
            (CURVES, "training curves, one row per epoch and head"),
            (REPORT, "source, before and after accuracies"),
        ];
        match self {
            Plan::GenMoons { .. } => {
                out.extend(&run_files[..2]);
            }
            Plan::TrainSource { .. } => {
                out.push((SOURCE_CKPT, "model after source training"));
                out.push((SOURCE_METRICS, "per-epoch source training metrics"));
                out.push((LAST_GOOD, "only on divergence: parameters before the failing update"));
            }
            Plan::Adapt { .. } => {
                out.extend(&mode_files[..3]);
                out.push((LAST_GOOD, "only on divergence: parameters before the failing update"));
            }
            Plan::Eval { .. } => out.push((CONFUSION, "confusion matrix and accuracy")),
            Plan::ExportBoundary { .. } => out.push((BOUNDARY, "per-cell predictions of both heads")),
            Plan::ExportCurves { .. } => out.push((CURVES, "one row per epoch and head")),
            Plan::Run { .. } => {
                out.extend(&run_files);
                out.extend(&mode_files);
            }
            Plan::Sweep { .. } => {
                let mut owned: BTreeMap<String, String> = BTreeMap::new();
                for (f, d) in run_files {
                    owned.insert(format!("seed-<seed>/{f}"), d.to_string());
                }
                for (f, d) in mode_files {
                    owned.insert(format!("seed-<seed>/<mode>/{f}"), d.to_string());
                }
                owned.insert(SUMMARY.into(), "per-seed accuracies and per-mode medians".into());
                owned.insert("summary.csv".into(), "one row per seed and mode".into());
                return owned;
            }
        }
        out.into_iter().map(|(f, d)| (f.to_string(), d.to_string())).collect()
    }

    pub fn execute(&self, out: &Path) -> CliResult<()> {
        fs::create_dir_all(out).map_err(at(out))?;
        match self {
            Plan::GenMoons { setup } => {
                let (source, target) = gen_moons(setup, out)?;
                println!("wrote {} source and {} target rows to {}", source.len(), target.len(), out.display());
            }
            Plan::TrainSource { data, config } => {
                let source = load_labeled_csv(data)?;
                let (model, _) = train_source(&source, config, out)?;
                let acc = evaluate(&model, &source, Head::Anchor)?.accuracy;
                println!("source accuracy {acc:.4}");
            }
            Plan::Adapt { ckpt, target, config } => {
                let model = Checkpoint::load(ckpt)?.model;
                let target = load_points(target, model.input_dim())?;
                let (_, summary) = adapt(model, &target, config, out)?;
                match summary.accuracy.get(&Head::Anchor) {
                    Some(acc) => println!("target accuracy {acc:.4}"),
                    None => println!("adapted {} target samples", summary.samples),
                }
            }
            Plan::Eval { ckpt, data, head } => {
                let model = Checkpoint::load(ckpt)?.model;
                let ds = load_labeled_csv(data)?;
                check_dim(&model, ds.dim(), data)?;
                let e = eval_to(&model, &ds, *head, &out.join(CONFUSION))?;
                println!("{} accuracy {:.4}", head.name(), e.accuracy);
            }
            Plan::ExportBoundary {
                ckpt,
                data,
                bounds,
                resolution,
                pad,
            } => {
                let model = Checkpoint::load(ckpt)?.model;
                if model.input_dim() != 2 {
                    return Err(bait::Error::Unsupported(format!(
                        "decision boundaries need a 2-D input model, this one takes {} inputs",
                        model.input_dim()
                    ))
                    .into());
                }
                let bounds = match (bounds, data) {
                    (Some(b), _) => *b,
                    (None, Some(d)) => GridBounds::around(load_points(d, 2)?.features(), *pad)?,
                    (None, None) => return Err(CliError::Usage("export-boundary needs --data or --bounds".into())),
                };
                let grid = boundary_grid(&model, bounds, *resolution)?;
                grid.write_csv(out.join(BOUNDARY))?;
                println!("wrote {} grid cells", grid.cells.len());
            }
            Plan::ExportCurves { metrics } => {
                let mut all = Vec::new();
                for m in metrics {
                    all.extend(read_metrics_jsonl(m)?);
                }
                let path = out.join(CURVES);
                fs::write(&path, curves_csv(&all)?).map_err(at(&path))?;
                println!("wrote curves for {} epochs", all.len());
            }
            Plan::Run { setup, config } => {
                for row in pipeline(setup, config, &[config.mode], out, false)? {
                    println!("{}", row.describe());
                }
            }
            Plan::Sweep {
                setup,
                config,
                seeds,
                modes,
                jobs,
            } => sweep(setup, config, seeds, modes, *jobs, out)?,
        }
        Ok(())
    }
}

fn gen_moons(setup: &MoonsSetup, out: &Path) -> CliResult<(LabeledDataset, LabeledDataset)> {
    let (source, target) = setup.domains()?;
    write_features_csv(out.join(SOURCE_CSV), source.features(), Some(source.labels()))?;
    write_features_csv(out.join(TARGET_CSV), target.features(), Some(target.labels()))?;
    Ok((source, target))
}

/// Keeps the parameters from before the latest update, so a diverged run
/// still leaves a usable checkpoint behind.
struct LastGood {
    model: BaitModel,
}

impl TrainObserver for LastGood {
    fn before_step(&mut self, _kind: StepKind, model: &BaitModel) {
        self.model.clone_from(model);
    }

    fn on_epoch_end(&mut self, m: &EpochMetrics, _model: &BaitModel) {
        let losses: Vec<String> = m.losses.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        log::debug!("{:?} epoch {}: {}", m.phase, m.epoch, losses.join(", "));
    }
}

fn guarded<T>(
    model: &mut BaitModel,
    out: &Path,
    f: impl FnOnce(&mut BaitModel, &mut LastGood) -> bait::Result<T>,
) -> CliResult<T> {
    let mut guard = LastGood { model: model.clone() };
    match f(model, &mut guard) {
        Ok(v) => Ok(v),
        Err(e @ bait::Error::Divergence { .. }) => {
            let path = out.join(LAST_GOOD);
            Checkpoint::new(guard.model).save(&path)?;
            log::error!("saved the parameters before the failing update to {}", path.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> CliResult<()> {
    fs::write(path, "").map_err(at(path))?;
    append_metrics_jsonl(path, metrics)?;
    Ok(())
}

fn train_source(source: &LabeledDataset, cfg: &TrainConfig, out: &Path) -> CliResult<(BaitModel, Vec<EpochMetrics>)> {
    let mut model = init_model(cfg, source.dim(), source.num_classes())?;
    let metrics = guarded(&mut model, out, |m, g| train_source_observed(m, source, cfg, g))?;
    Checkpoint {
        model: model.clone(),
        epoch: cfg.epochs_source,
        rng: None,
    }
    .save(out.join(SOURCE_CKPT))?;
    write_metrics(&out.join(SOURCE_METRICS), &metrics)?;
    Ok((model, metrics))
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptSummary {
    pub mode: AdaptMode,
    pub tau_schedule: TauSchedule,
    pub eval_labels: bool,
    pub samples: usize,
    pub epochs: usize,
    pub steps: usize,
    pub skipped_batches: usize,
    /// Per-head target accuracy after adaptation; empty without eval labels.
    pub accuracy: BTreeMap<Head, f64>,
    pub agreement: Option<f64>,
    pub histogram: Vec<usize>,
    pub mean_entropy: f64,
    pub before: Snapshot,
    pub after: Snapshot,
    pub leak_tripped: bool,
}

fn adapt(
    mut model: BaitModel,
    target: &UnlabeledDataset,
    cfg: &TrainConfig,
    out: &Path,
) -> CliResult<(BaitModel, AdaptSummary)> {
    let outcome = guarded(&mut model, out, |m, g| adapt_observed(m, target, cfg, g))?;
    if target.leak_tripped() {
        log::error!("evaluation labels were read inside a loss");
    }
    Checkpoint {
        model: model.clone(),
        epoch: cfg.epochs_adapt,
        rng: None,
    }
    .save(out.join(ADAPTED_CKPT))?;
    write_metrics(&out.join(ADAPT_METRICS), &outcome.metrics)?;
    let after = outcome.final_snapshot;
    let summary = AdaptSummary {
        mode: cfg.mode,
        tau_schedule: cfg.tau_schedule,
        eval_labels: target.has_hidden_labels(),
        samples: target.len(),
        epochs: cfg.epochs_adapt,
        steps: outcome.steps,
        skipped_batches: outcome.skipped_batches,
        accuracy: after.accuracy.clone(),
        agreement: after.agreement,
        histogram: after.histogram.clone(),
        mean_entropy: after.mean_entropy,
        before: outcome.initial,
        after,
        leak_tripped: target.leak_tripped(),
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok((model, summary))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(at(path))
}

fn eval_to(model: &BaitModel, ds: &LabeledDataset, head: Head, path: &Path) -> CliResult<Evaluation> {
    if head == Head::Bait && model.bait().is_none() {
        return Err(CliError::Usage("checkpoint has no bait head".into()));
    }
    let e = evaluate(model, ds, head)?;
    write_json(path, &e.to_json())?;
    Ok(e)
}

fn check_dim(model: &BaitModel, dim: usize, path: &Path) -> CliResult<()> {
    if model.input_dim() == dim {
        return Ok(());
    }
    Err(CliError::Usage(format!(
        "{}: data has {dim} features, checkpoint expects {}",
        path.display(),
        model.input_dim()
    )))
}

/// Loads `dim`-column points. A trailing extra column is taken as evaluation
/// labels, which stay hidden from every loss.
fn load_points(path: &Path, dim: usize) -> CliResult<UnlabeledDataset> {
    let text = fs::read_to_string(path).map_err(at(path))?;
    let cols = text.lines().find(|l| !l.trim().is_empty()).map_or(0, |l| l.split(',').count());
    if cols == dim + 1 {
        match load_features_csv(path, true)? {
            LoadedDataset::Labeled(ds) => Ok(ds.into_unlabeled()),
            LoadedDataset::Unlabeled(ds) => Ok(ds),
        }
    } else if cols == dim {
        Ok(load_unlabeled_csv(path)?)
    } else {
        Err(CliError::Usage(format!(
            "{}: {cols} columns, checkpoint expects {dim} features optionally followed by a label",
            path.display()
        )))
    }
}

fn stack(a: &Tensor, b: &Tensor) -> CliResult<Tensor> {
    let data = a.data().iter().chain(b.data()).copied().collect();
    Ok(Tensor::matrix(a.rows() + b.rows(), a.cols(), data)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRow {
    pub seed: u64,
    pub mode: AdaptMode,
    pub source_accuracy: f64,
    pub target_accuracy_before: f64,
    pub target_accuracy_after: f64,
    pub bait_accuracy_after: Option<f64>,
    pub agreement: Option<f64>,
}

impl RunRow {
    fn describe(&self) -> String {
        let mut s = format!(
            "seed {} {}: source {:.4}, target before {:.4}, after {:.4}",
            self.seed,
            self.mode.name(),
            self.source_accuracy,
            self.target_accuracy_before,
            self.target_accuracy_after
        );
        if let Some(a) = self.agreement {
            s += &format!(", agreement {a:.4}");
        }
        s
    }
}

/// Generate, train on source, then adapt once per mode. With `nested` each
/// mode gets its own subdirectory.
fn pipeline(setup: &MoonsSetup, cfg: &TrainConfig, modes: &[AdaptMode], dir: &Path, nested: bool) -> CliResult<Vec<RunRow>> {
    fs::create_dir_all(dir).map_err(at(dir))?;
    let (source, target) = gen_moons(setup, dir)?;
    let (model, source_metrics) = train_source(&source, cfg, dir)?;
    let source_accuracy = evaluate(&model, &source, Head::Anchor)?.accuracy;
    let before = eval_to(&model, &target, Head::Anchor, &dir.join(CONFUSION_SOURCE))?.accuracy;
    let bounds = GridBounds::around(&stack(source.features(), target.features())?, RUN_PAD)?;
    boundary_grid(&model, bounds, RUN_RESOLUTION)?.write_csv(dir.join(BOUNDARY_SOURCE))?;

    let mut rows = Vec::new();
    for &mode in modes {
        let mdir = if nested { dir.join(mode.name()) } else { dir.to_path_buf() };
        fs::create_dir_all(&mdir).map_err(at(&mdir))?;
        let cfg = TrainConfig { mode, ..cfg.clone() };
        let target_u = target.clone().into_unlabeled();
        let (adapted, summary) = adapt(model.clone(), &target_u, &cfg, &mdir)?;
        let after = eval_to(&adapted, &target, Head::Anchor, &mdir.join(CONFUSION))?.accuracy;
        boundary_grid(&adapted, bounds, RUN_RESOLUTION)?.write_csv(mdir.join(BOUNDARY))?;
        let mut curves = source_metrics.clone();
        curves.extend(read_metrics_jsonl(mdir.join(ADAPT_METRICS))?);
        let path = mdir.join(CURVES);
        fs::write(&path, curves_csv(&curves)?).map_err(at(&path))?;

        let row = RunRow {
            seed: setup.seed,
            mode,
            source_accuracy,
            target_accuracy_before: before,
            target_accuracy_after: after,
            bait_accuracy_after: summary.accuracy.get(&Head::Bait).copied(),
            agreement: summary.agreement,
        };
        write_json(&mdir.join(REPORT), &row)?;
        rows.push(row);
    }
    Ok(rows)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn sweep(setup: &MoonsSetup, cfg: &TrainConfig, seeds: &[u64], modes: &[AdaptMode], jobs: usize, out: &Path) -> CliResult<()> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, seeds.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let setup = MoonsSetup { seed, ..setup.clone() };
                let cfg = TrainConfig { seed, ..cfg.clone() };
                let r = pipeline(&setup, &cfg, modes, &out.join(format!("seed-{seed}")), true);
                if let Ok(rows) = &r {
                    for row in rows {
                        log::info!("{}", row.describe());
                    }
                }
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut rows = Vec::new();
    for (_, r) in results {
        rows.extend(r?);
    }

    let mut medians = BTreeMap::new();
    for &mode in modes {
        let acc: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.target_accuracy_after).collect();
        if !acc.is_empty() {
            medians.insert(mode.name(), median(acc));
        }
    }
    write_json(
        &out.join(SUMMARY),
        &serde_json::json!({ "median_target_accuracy": medians, "runs": rows }),
    )?;
    let mut csv = String::from("seed,mode,source_accuracy,target_accuracy_before,target_accuracy_after,agreement\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.seed,
            r.mode.name(),
            r.source_accuracy,
            r.target_accuracy_before,
            r.target_accuracy_after,
            r.agreement.map(|a| a.to_string()).unwrap_or_default()
        );
    }
    let path = out.join("summary.csv");
    fs::write(&path, csv).map_err(at(&path))?;
    for (mode, m) in &medians {
        println!("{mode}: median target accuracy {m:.4} over {} seeds", seeds.len());
    }
    Ok(())
}
