//! Accuracy, confusion matrices, head agreement, and plot-data exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::row_entropies;
use crate::model::{BaitModel, Head};
use crate::tensor::Tensor;
use crate::trainer::EpochMetrics;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape {
                op: "confusion_matrix",
                left: vec![truth.len()],
                right: vec![predicted.len()],
            });
        }
        let mut counts = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            let bad = t.max(p);
            if bad >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: num_classes,
                });
            }
            counts[t][p] += 1;
        }
        Ok(Self { num_classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub head: Head,
    pub num_classes: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    /// `confusion.json` document.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "head": self.head.name(),
            "K": self.num_classes,
            "accuracy": self.accuracy,
            "counts": self.confusion.counts,
        })
    }
}

/// Accuracy and confusion matrix of one head's argmax predictions.
pub fn evaluate(model: &BaitModel, ds: &LabeledDataset, head: Head) -> Result<Evaluation> {
    let probs = model.predict(ds.features(), head)?;
    let k = model.num_classes().max(ds.num_classes());
    let confusion = ConfusionMatrix::from_predictions(ds.labels(), &probs.argmax_rows(), k)?;
    Ok(Evaluation {
        head,
        num_classes: k,
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Fraction of samples on which anchor and bait pick the same class.
pub fn agreement(model: &BaitModel, x: &Tensor) -> Result<f64> {
    let a = model.predict(x, Head::Anchor)?.argmax_rows();
    let b = model.predict(x, Head::Bait)?.argmax_rows();
    Ok(agreement_of(&a, &b))
}

pub fn agreement_of(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Evaluation summary over a set of inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub accuracy: BTreeMap<Head, f64>,
    pub agreement: Option<f64>,
    /// Anchor predictions per class.
    pub histogram: Vec<usize>,
    /// Mean anchor entropy, nats.
    pub mean_entropy: f64,
    pub samples: usize,
}

impl Snapshot {
    pub fn anchor_accuracy(&self) -> Option<f64> {
        self.accuracy.get(&Head::Anchor).copied()
    }

    /// L1 distance between the normalised histogram and the uniform distribution.
    pub fn histogram_imbalance(&self) -> f64 {
        let k = self.histogram.len() as f64;
        let n = self.samples.max(1) as f64;
        self.histogram.iter().map(|&c| (c as f64 / n - 1.0 / k).abs()).sum()
    }
}

pub fn snapshot(model: &BaitModel, x: &Tensor, labels: Option<&[usize]>) -> Result<Snapshot> {
    let p1 = model.predict(x, Head::Anchor)?;
    let pred1 = p1.argmax_rows();
    let mut histogram = vec![0; model.num_classes()];
    for &c in &pred1 {
        histogram[c] += 1;
    }
    let entropies = row_entropies(&p1)?;
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len().max(1) as f64;

    let pred2 = match model.bait() {
        Some(_) => Some(model.predict(x, Head::Bait)?.argmax_rows()),
        None => None,
    };
    let mut accuracy = BTreeMap::new();
    if let Some(y) = labels {
        accuracy.insert(Head::Anchor, agreement_of(&pred1, y));
        if let Some(p2) = &pred2 {
            accuracy.insert(Head::Bait, agreement_of(p2, y));
        }
    }
    Ok(Snapshot {
        accuracy,
        agreement: pred2.as_ref().map(|p2| agreement_of(&pred1, p2)),
        histogram,
        mean_entropy,
        samples: pred1.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridBounds {
    /// Bounding box of 2-D points, widened by `pad` of its extent on every side.
    pub fn around(points: &Tensor, pad: f64) -> Result<Self> {
        let (n, d) = points.dims2("grid bounds")?;
        if d != 2 || n == 0 {
            return Err(Error::Unsupported(format!("grid bounds need 2-D points, got shape {:?}", points.shape())));
        }
        let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for r in 0..n {
            let p = points.row(r);
            x_min = x_min.min(p[0]);
            x_max = x_max.max(p[0]);
            y_min = y_min.min(p[1]);
            y_max = y_max.max(p[1]);
        }
        let (px, py) = ((x_max - x_min) * pad, (y_max - y_min) * pad);
        Ok(Self {
            x_min: x_min - px,
            x_max: x_max + px,
            y_min: y_min - py,
            y_max: y_max + py,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub class_c1: usize,
    pub prob_c1: f64,
    pub class_c2: Option<usize>,
    pub prob_c2: Option<f64>,
}

/// Both heads evaluated over a regular mesh of the input plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub cells: Vec<GridCell>,
}

impl BoundaryGrid {
    /// Fraction of cells where the heads predict different classes.
    pub fn disagreement(&self) -> f64 {
        let differ = self
            .cells
            .iter()
            .filter(|c| c.class_c2.is_some_and(|k| k != c.class_c1))
            .count();
        differ as f64 / self.cells.len().max(1) as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "class_c1", "prob_c1", "class_c2", "prob_c2"])?;
        for c in &self.cells {
            w.write_record([
                c.x.to_string(),
                c.y.to_string(),
                c.class_c1.to_string(),
                c.prob_c1.to_string(),
                c.class_c2.map(|k| k.to_string()).unwrap_or_default(),
                c.prob_c2.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn linspace(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

/// Evaluates the model over a `resolution × resolution` mesh, row-major in `y`
/// then `x`.
pub fn boundary_grid(model: &BaitModel, bounds: GridBounds, resolution: usize) -> Result<BoundaryGrid> {
    if model.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "decision boundaries need a 2-D input model, this one takes {} inputs",
            model.input_dim()
        )));
    }
    if resolution < 2 {
        return Err(Error::Invalid(format!("grid resolution must be at least 2, got {resolution}")));
    }
    let mut pts = Vec::with_capacity(2 * resolution * resolution);
    for j in 0..resolution {
        let y = linspace(bounds.y_min, bounds.y_max, resolution, j);
        for i in 0..resolution {
            pts.push(linspace(bounds.x_min, bounds.x_max, resolution, i));
            pts.push(y);
        }
    }
    let x = Tensor::matrix(resolution * resolution, 2, pts)?;
    let p1 = model.predict(&x, Head::Anchor)?;
    let p2 = match model.bait() {
        Some(_) => Some(model.predict(&x, Head::Bait)?),
        None => None,
    };
    let c1 = p1.argmax_rows();
    let c2 = p2.as_ref().map(Tensor::argmax_rows);
    let cells = (0..x.rows())
        .map(|r| GridCell {
            x: x.get(r, 0),
            y: x.get(r, 1),
            class_c1: c1[r],
            prob_c1: p1.get(r, c1[r]),
            class_c2: c2.as_ref().map(|c| c[r]),
            prob_c2: c2.as_ref().zip(p2.as_ref()).map(|(c, p)| p.get(r, c[r])),
        })
        .collect();
    Ok(BoundaryGrid {
        bounds,
        resolution,
        cells,
    })
}

/// Appends epoch records as JSON lines.
pub fn append_metrics_jsonl(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_jsonl(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed metrics record: {e}"),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Tidy per-epoch table: one row per (run, phase, epoch, head), one column
/// per loss name.
pub fn curves_csv(metrics: &[EpochMetrics]) -> Result<String> {
    let loss_names: BTreeSet<&str> = metrics.iter().flat_map(|m| m.losses.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run", "phase", "domain", "epoch", "head", "accuracy", "agreement"];
    header.extend(loss_names.iter().copied());
    w.write_record(&header)?;
    for m in metrics {
        let phase = match m.phase {
            crate::trainer::Phase::Source => "source",
            crate::trainer::Phase::Adapt => "adapt",
        };
        let heads: Vec<(&str, Option<f64>)> = if m.accuracy.is_empty() {
            vec![("anchor", None)]
        } else {
            m.accuracy.iter().map(|(h, &a)| (h.as_str(), Some(a))).collect()
        };
        for (head, acc) in heads {
            let mut row = vec![
                m.run.clone(),
                phase.to_string(),
                m.domain.clone(),
                m.epoch.to_string(),
                head.to_string(),
                acc.map(|a| a.to_string()).unwrap_or_default(),
                m.agreement.map(|a| a.to_string()).unwrap_or_default(),
            ];
            row.extend(
                loss_names
                    .iter()
                    .map(|n| m.losses.get(*n).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Reads a metrics log and writes its accuracy curves as CSV.
pub fn export_curves(metrics_log: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<usize> {
    let metrics = read_metrics_jsonl(metrics_log)?;
    std::fs::write(out, curves_csv(&metrics)?)?;
    Ok(metrics.len())
}
