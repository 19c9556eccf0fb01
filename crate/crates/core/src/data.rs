//! Datasets, the twinning-moons generator, CSV exchange, and mini-batching.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled samples from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    domain: String,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, domain: impl Into<String>) -> Result<Self> {
        let (n, _) = features.dims2("dataset features")?;
        if n == 0 {
            return Err(Error::Invalid("a dataset needs at least one sample".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape {
                op: "dataset labels",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain: domain.into(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = domain.into();
        self
    }

    /// Target-domain view: the labels are kept but hidden behind the audit.
    pub fn into_unlabeled(self) -> UnlabeledDataset {
        let mut u = UnlabeledDataset::new(self.features, self.domain);
        u.hidden = Some((self.labels, self.num_classes));
        u
    }
}

#[derive(Debug, Default)]
struct LabelAudit {
    loss_scope: AtomicUsize,
    tripped: AtomicBool,
}

/// Samples without visible labels.
///
/// Labels may be attached for evaluation. Reading them while a
/// [`LossScope`] is open trips the leakage flag.
#[derive(Debug)]
pub struct UnlabeledDataset {
    features: Tensor,
    domain: String,
    hidden: Option<(Vec<usize>, usize)>,
    audit: LabelAudit,
}

impl Clone for UnlabeledDataset {
    fn clone(&self) -> Self {
        Self {
            features: self.features.clone(),
            domain: self.domain.clone(),
            hidden: self.hidden.clone(),
            audit: LabelAudit::default(),
        }
    }
}

impl UnlabeledDataset {
    pub fn new(features: Tensor, domain: impl Into<String>) -> Self {
        Self {
            features,
            domain: domain.into(),
            hidden: None,
            audit: LabelAudit::default(),
        }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn has_hidden_labels(&self) -> bool {
        self.hidden.is_some()
    }

    /// Ground truth for evaluation only.
    pub fn evaluation_labels(&self) -> Option<&[usize]> {
        if self.audit.loss_scope.load(Ordering::SeqCst) > 0 {
            self.audit.tripped.store(true, Ordering::SeqCst);
        }
        self.hidden.as_ref().map(|(l, _)| l.as_slice())
    }

    pub fn hidden_num_classes(&self) -> Option<usize> {
        self.hidden.as_ref().map(|&(_, k)| k)
    }

    /// Marks the region in which adaptation losses are built.
    pub fn enter_loss_scope(&self) -> LossScope<'_> {
        self.audit.loss_scope.fetch_add(1, Ordering::SeqCst);
        LossScope { audit: &self.audit }
    }

    /// True if hidden labels were read inside a loss scope.
    pub fn leak_tripped(&self) -> bool {
        self.audit.tripped.load(Ordering::SeqCst)
    }

    /// Labelled copy for evaluation routines.
    pub fn to_labeled(&self) -> Option<LabeledDataset> {
        let labels = self.evaluation_labels()?.to_vec();
        let k = self.hidden_num_classes()?;
        LabeledDataset::new(self.features.clone(), labels, k, self.domain.clone()).ok()
    }
}

pub struct LossScope<'a> {
    audit: &'a LabelAudit,
}

impl Drop for LossScope<'_> {
    fn drop(&mut self) {
        self.audit.loss_scope.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Two inter-twinning half circles.
///
/// Class 0 follows `(cos t, sin t)`, class 1 follows `(1 − cos t, 0.5 − sin t)`,
/// with `t` evenly spaced over `[0, π]`, plus isotropic Gaussian noise.
pub fn make_moons(n_per_class: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::Invalid("n_per_class must be at least 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Invalid(format!("noise_std must be a finite non-negative value, got {noise_std}")));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::Invalid(format!("noise_std {noise_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = if n_per_class > 1 {
        std::f64::consts::PI / (n_per_class - 1) as f64
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for i in 0..n_per_class {
            let t = step * i as f64;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            data.push(x + noise.sample(&mut rng));
            data.push(y + noise.sample(&mut rng));
            labels.push(class);
        }
    }
    let features = Tensor::matrix(2 * n_per_class, 2, data)?;
    LabeledDataset::new(features, labels, 2, "moons")
}

/// Rotates 2-D points about the origin by `degrees` (counter-clockwise).
pub fn rotate_points(features: &Tensor, degrees: f64) -> Result<Tensor> {
    let (n, d) = features.dims2("rotate2d")?;
    if d != 2 {
        return Err(Error::Unsupported(format!("rotation needs 2-D features, got {d}")));
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = Vec::with_capacity(2 * n);
    for r in 0..n {
        let p = features.row(r);
        out.push(c * p[0] - s * p[1]);
        out.push(s * p[0] + c * p[1]);
    }
    Tensor::matrix(n, 2, out)
}

pub fn rotate2d(ds: &LabeledDataset, degrees: f64) -> Result<LabeledDataset> {
    let features = rotate_points(ds.features(), degrees)?;
    LabeledDataset::new(features, ds.labels.clone(), ds.num_classes, ds.domain.clone())
}

/// Either kind of dataset, as read from CSV.
#[derive(Debug)]
pub enum LoadedDataset {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledDataset),
}

/// Reads header-less numeric CSV. With `has_labels`, the last column is an
/// integer class label and `K = max label + 1`.
pub fn load_features_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let domain = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("ragged row: expected {w} columns, found {}", record.len())));
            }
            _ => {}
        }
        let n_feat = if has_labels { record.len() - 1 } else { record.len() };
        if n_feat == 0 {
            return Err(parse_err(line, "row has no feature columns".into()));
        }
        for (col, cell) in record.iter().take(n_feat).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: {cell:?} is not a number", col + 1)))?;
            data.push(v);
        }
        if has_labels {
            let cell = &record[n_feat];
            let label: i64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("label {cell:?} is not an integer")))?;
            if label < 0 {
                return Err(parse_err(line, format!("negative label {label}")));
            }
            labels.push(label as usize);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| parse_err(1, "file contains no rows".into()))?;
    let cols = if has_labels { width - 1 } else { width };
    let features = Tensor::matrix(rows, cols, data)?;
    if has_labels {
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(LoadedDataset::Labeled(LabeledDataset::new(features, labels, k, domain)?))
    } else {
        Ok(LoadedDataset::Unlabeled(UnlabeledDataset::new(features, domain)))
    }
}

pub fn load_labeled_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    match load_features_csv(path, true)? {
        LoadedDataset::Labeled(ds) => Ok(ds),
        LoadedDataset::Unlabeled(_) => unreachable!(),
    }
}

pub fn load_unlabeled_csv(path: impl AsRef<Path>) -> Result<UnlabeledDataset> {
    match load_features_csv(path, false)? {
        LoadedDataset::Unlabeled(ds) => Ok(ds),
        LoadedDataset::Labeled(_) => unreachable!(),
    }
}

/// Scientific notation with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_features_csv(path: impl AsRef<Path>, features: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in 0..features.rows() {
        let mut line: Vec<String> = features.row(r).iter().map(|&v| format_f64(v)).collect();
        if let Some(l) = labels {
            line.push(l[r].to_string());
        }
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Seeded shuffled mini-batches over `0..n`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    drop_last: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, drop_last: bool, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        let mut it = Self {
            n,
            batch_size,
            drop_last,
            rng,
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
        };
        it.order.shuffle(&mut it.rng);
        Ok(it)
    }

    pub fn seeded(n: usize, batch_size: usize, drop_last: bool, seed: u64) -> Result<Self> {
        Self::new(n, batch_size, drop_last, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Number of batches one epoch yields.
    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.n / self.batch_size
        } else {
            self.n.div_ceil(self.batch_size)
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Next batch of indices, or `None` at the end of an epoch. The call
    /// that returns `None` also reshuffles for the next epoch.
    pub fn next_batch(&mut self) -> Option<Vec<usize>> {
        let remaining = self.n - self.cursor;
        let take = remaining.min(self.batch_size);
        if take == 0 || (self.drop_last && take < self.batch_size) {
            self.cursor = 0;
            self.epoch += 1;
            self.order.shuffle(&mut self.rng);
            return None;
        }
        let batch = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        Some(batch)
    }
}
