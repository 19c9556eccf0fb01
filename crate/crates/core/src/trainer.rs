//! Source training and the two-step adaptation loop.
//!
//! Adaptation, per mini-batch of target data:
//!
//! 1. split the batch by anchor entropy into certain / uncertain samples;
//! 2. update the bait head only, minimising the cast loss;
//! 3. update the feature extractor only, minimising
//!    `bite + cb_weight · class_balance`.
//!
//! The anchor head is frozen for the whole run.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdaptMode, TauSchedule, TrainConfig};
use crate::data::{BatchIterator, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{snapshot, Snapshot};
use crate::losses::{
    bite_loss, cast_loss, class_balance_loss, class_balance_single, cross_entropy_loss, quantile, row_entropies,
    BatchSplit,
};
use crate::model::{forward_features, forward_head, probabilities, BaitModel, BoundModel, Head, ParamGroup};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Any loss whose magnitude exceeds this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// RNG streams derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SOURCE_BATCHES: u64 = 1;
    pub const ADAPT_BATCHES: u64 = 2;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh model for a config and input dimension.
pub fn init_model(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<BaitModel> {
    let mut rng = stream_rng(cfg.seed, streams::INIT);
    BaitModel::init(&cfg.layer_widths(input_dim), num_classes, &mut rng)
}

/// One momentum SGD update: `v ← μv + g; w ← w − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Invalid(format!(
            "sgd_step got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &g), v) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Momentum SGD with one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamGroup, Vec<Vec<f64>>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, group: ParamGroup) -> Option<&[Vec<f64>]> {
        self.velocity.get(&group).map(Vec::as_slice)
    }

    /// Updates the listed groups from the gradients on `tape`. Frozen groups
    /// are skipped.
    pub fn step(&mut self, model: &mut BaitModel, tape: &Tape, bound: &BoundModel, groups: &[ParamGroup]) -> Result<()> {
        for &group in groups {
            if model.is_frozen(group) || !model.has_group(group) {
                continue;
            }
            let vars = bound.group_vars(group);
            let grads: Vec<&[f64]> = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .ok_or_else(|| Error::Invalid(format!("{group:?} parameter has no gradient")))
                })
                .collect::<Result<_>>()?;
            let velocity = self
                .velocity
                .entry(group)
                .or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
            sgd_step(&mut model.group_params_mut(group), &grads, velocity, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

/// Threshold used to split one batch.
pub fn tau_for_step(schedule: TauSchedule, step: usize, total_steps: usize, entropies: &[f64], percentile: f64) -> f64 {
    let base = quantile(entropies, percentile);
    match schedule {
        TauSchedule::Constant => base,
        TauSchedule::LinearDecayToZero => {
            let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
            base * (1.0 - frac)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Source,
    Adapt,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run: String,
    pub phase: Phase,
    pub domain: String,
    pub epoch: usize,
    /// Mean of each loss over the epoch's batches.
    pub losses: BTreeMap<String, f64>,
    /// Accuracy per head, when labels are available for evaluation.
    pub accuracy: BTreeMap<String, f64>,
    pub agreement: Option<f64>,
    /// Anchor-head prediction counts per class.
    pub histogram: Vec<usize>,
    pub mean_entropy: f64,
    pub samples: usize,
    pub skipped_batches: usize,
}

impl EpochMetrics {
    fn from_snapshot(run: &str, phase: Phase, domain: &str, epoch: usize, losses: &LossMeans, snap: &Snapshot, skipped: usize) -> Self {
        Self {
            run: run.to_string(),
            phase,
            domain: domain.to_string(),
            epoch,
            losses: losses.means(),
            accuracy: snap
                .accuracy
                .iter()
                .map(|(h, &a)| (h.name().to_string(), a))
                .collect(),
            agreement: snap.agreement,
            histogram: snap.histogram.clone(),
            mean_entropy: snap.mean_entropy,
            samples: snap.samples,
            skipped_batches: skipped,
        }
    }
}

#[derive(Default)]
struct LossMeans {
    sums: BTreeMap<&'static str, (f64, usize)>,
}

impl LossMeans {
    fn add(&mut self, name: &'static str, v: f64) {
        let e = self.sums.entry(name).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(k, &(s, n))| (k.to_string(), s / n as f64))
            .collect()
    }
}

fn guard(phase: &'static str, epoch: usize, step: usize, loss: &'static str, value: f64) -> Result<f64> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            phase,
            epoch,
            step,
            loss,
            value,
        });
    }
    Ok(value)
}

/// Catches updates that overflowed the parameters before the next forward
/// pass turns them into a less helpful error.
fn guard_params(model: &BaitModel, groups: &[ParamGroup], phase: &'static str, epoch: usize, step: usize) -> Result<()> {
    for &g in groups {
        for t in model.group_params(g) {
            if let Some(&value) = t.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    phase,
                    epoch,
                    step,
                    loss: "parameters",
                    value,
                });
            }
        }
    }
    Ok(())
}

/// Which update just ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Source,
    /// Adaptation step 1: bait head.
    Cast,
    /// Adaptation step 2: feature extractor.
    Bite,
    /// Single-classifier ablation: feature extractor on class balance only.
    Balance,
}

/// Hooks into the training loops, for audits and progress reporting.
pub trait TrainObserver {
    fn before_step(&mut self, _kind: StepKind, _model: &BaitModel) {}
    fn after_step(&mut self, _kind: StepKind, _model: &BaitModel) {}
    fn on_split(&mut self, _split: &BatchSplit, _entropies: &[f64]) {}
    fn on_epoch_end(&mut self, _metrics: &EpochMetrics, _model: &BaitModel) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Records which parameter groups each step changed.
#[derive(Debug, Default)]
pub struct StepIsolationAudit {
    before: BTreeMap<ParamGroup, Vec<f64>>,
    pub steps: Vec<(StepKind, Vec<ParamGroup>)>,
}

impl StepIsolationAudit {
    /// Groups changed by steps of `kind`, over the whole run.
    pub fn touched_by(&self, kind: StepKind) -> Vec<ParamGroup> {
        let mut out: Vec<ParamGroup> = self
            .steps
            .iter()
            .filter(|(k, _)| *k == kind)
            .flat_map(|(_, g)| g.iter().copied())
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

impl TrainObserver for StepIsolationAudit {
    fn before_step(&mut self, _kind: StepKind, model: &BaitModel) {
        self.before = ParamGroup::ALL.iter().map(|&g| (g, model.snapshot(g))).collect();
    }

    fn after_step(&mut self, kind: StepKind, model: &BaitModel) {
        let changed = ParamGroup::ALL
            .iter()
            .copied()
            .filter(|g| self.before.get(g).map(Vec::as_slice) != Some(model.snapshot(*g).as_slice()))
            .collect();
        self.steps.push((kind, changed));
    }
}

/// Supervised cross-entropy training of the extractor and anchor head.
///
/// The bait head, if present, is left untouched.
pub fn train_source(model: &mut BaitModel, source: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    train_source_observed(model, source, cfg, &mut NoopObserver)
}

pub fn train_source_observed(
    model: &mut BaitModel,
    source: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    model.check_input(source.features())?;
    if source.num_classes() > model.num_classes() {
        return Err(Error::Invalid(format!(
            "source data has {} classes, model has {}",
            source.num_classes(),
            model.num_classes()
        )));
    }
    let groups = [ParamGroup::Features, ParamGroup::Anchor];
    let mut opt = SgdMomentum::new(cfg.lr_source, cfg.momentum);
    let mut batches = BatchIterator::new(
        source.len(),
        cfg.batch_size,
        false,
        stream_rng(cfg.seed, streams::SOURCE_BATCHES),
    )?;
    let mut metrics = Vec::with_capacity(cfg.epochs_source);
    let mut step = 0;
    for epoch in 1..=cfg.epochs_source {
        let mut losses = LossMeans::default();
        while let Some(idx) = batches.next_batch() {
            let x = source.features().gather_rows(&idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| source.labels()[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &groups);
            let xv = tape.constant(x);
            let p = probabilities(&mut tape, &bound, Head::Anchor, xv)?;
            let loss = cross_entropy_loss(&mut tape, p, &y)?;
            losses.add("ce", guard("source training", epoch, step, "ce", tape.value(loss).item())?);
            tape.backward(loss)?;
            observer.before_step(StepKind::Source, model);
            opt.step(model, &tape, &bound, &groups)?;
            guard_params(model, &groups, "source training", epoch, step)?;
            observer.after_step(StepKind::Source, model);
            step += 1;
        }
        let snap = snapshot(model, source.features(), Some(source.labels()))?;
        let record = EpochMetrics::from_snapshot("source", Phase::Source, source.domain(), epoch, &losses, &snap, 0);
        observer.on_epoch_end(&record, model);
        metrics.push(record);
    }
    Ok(metrics)
}

/// Result of an adaptation run.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Target evaluation right after the heads were set up, before any update.
    pub initial: Snapshot,
    pub final_snapshot: Snapshot,
    pub skipped_batches: usize,
    pub steps: usize,
}

fn target_snapshot(model: &BaitModel, target: &UnlabeledDataset) -> Result<Snapshot> {
    snapshot(model, target.features(), target.evaluation_labels())
}

fn adapt_batches(target: &UnlabeledDataset, cfg: &TrainConfig) -> Result<BatchIterator> {
    BatchIterator::new(
        target.len(),
        cfg.batch_size,
        true,
        stream_rng(cfg.seed, streams::ADAPT_BATCHES),
    )
}

/// Runs the adaptation selected by `cfg.mode`.
pub fn adapt(model: &mut BaitModel, target: &UnlabeledDataset, cfg: &TrainConfig) -> Result<AdaptOutcome> {
    adapt_observed(model, target, cfg, &mut NoopObserver)
}

pub fn adapt_observed(
    model: &mut BaitModel,
    target: &UnlabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<AdaptOutcome> {
    match cfg.mode {
        AdaptMode::SingleClassifierCb => adapt_single_classifier_observed(model, target, cfg, observer),
        _ => adapt_bait_observed(model, target, cfg, observer),
    }
}

pub fn adapt_bait(model: &mut BaitModel, target: &UnlabeledDataset, cfg: &TrainConfig) -> Result<AdaptOutcome> {
    adapt_bait_observed(model, target, cfg, &mut NoopObserver)
}

/// Two-head adaptation. `cfg.mode` selects the split/no-split and
/// with/without class-balance variants; single-classifier mode is rejected.
pub fn adapt_bait_observed(
    model: &mut BaitModel,
    target: &UnlabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if cfg.mode == AdaptMode::SingleClassifierCb {
        return Err(Error::Invalid("single-classifier mode has no bait head".into()));
    }
    model.check_input(target.features())?;
    model.freeze(ParamGroup::Anchor);
    model.init_bait_from_anchor();
    model.set_trainable(ParamGroup::Bait);
    model.set_trainable(ParamGroup::Features);

    let mut batches = adapt_batches(target, cfg)?;
    let total_steps = cfg.epochs_adapt * batches.batches_per_epoch();
    let mut opt_bait = SgdMomentum::new(cfg.lr_adapt, cfg.momentum);
    let mut opt_features = SgdMomentum::new(cfg.lr_adapt, cfg.momentum);
    let use_cb = cfg.mode != AdaptMode::BaitNoCb;

    let initial = target_snapshot(model, target)?;
    let mut metrics = Vec::with_capacity(cfg.epochs_adapt);
    let mut step = 0;
    let mut skipped_total = 0;
    for epoch in 1..=cfg.epochs_adapt {
        let mut losses = LossMeans::default();
        let mut skipped = 0;
        while let Some(idx) = batches.next_batch() {
            if idx.len() < 2 {
                log::warn!("skipping adaptation batch of {} sample(s)", idx.len());
                skipped += 1;
                continue;
            }
            let _scope = target.enter_loss_scope();
            let x = target.features().gather_rows(&idx)?;

            // split on the anchor's current predictions
            let p1 = model.predict(&x, Head::Anchor)?;
            let entropies = row_entropies(&p1)?;
            let split = match cfg.mode {
                AdaptMode::BaitNoSplit => BatchSplit::all_uncertain(idx.len()),
                _ => {
                    let tau = tau_for_step(cfg.tau_schedule, step, total_steps, &entropies, cfg.split_percentile);
                    BatchSplit::from_threshold(&entropies, tau)
                }
            };
            observer.on_split(&split, &entropies);

            // step 1: bait head only
            {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &[ParamGroup::Bait]);
                let (p1, p2) = head_probabilities(&mut tape, &bound, x.clone(), true)?;
                let loss = cast_loss(&mut tape, p1, p2, &split)?;
                losses.add("cast", guard("adaptation", epoch, step, "cast", tape.value(loss).item())?);
                tape.backward(loss)?;
                observer.before_step(StepKind::Cast, model);
                opt_bait.step(model, &tape, &bound, &[ParamGroup::Bait])?;
                guard_params(model, &[ParamGroup::Bait], "adaptation", epoch, step)?;
                observer.after_step(StepKind::Cast, model);
            }

            // step 2: feature extractor only
            {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &[ParamGroup::Features]);
                let (p1, p2) = head_probabilities(&mut tape, &bound, x, false)?;
                let bite = bite_loss(&mut tape, p1, p2)?;
                losses.add("bite", guard("adaptation", epoch, step, "bite", tape.value(bite).item())?);
                let total = if use_cb {
                    let cb = class_balance_loss(&mut tape, p1, p2)?;
                    losses.add("cb", guard("adaptation", epoch, step, "cb", tape.value(cb).item())?);
                    let weighted = tape.scale(cb, cfg.cb_weight);
                    tape.add(bite, weighted)?
                } else {
                    bite
                };
                tape.backward(total)?;
                observer.before_step(StepKind::Bite, model);
                opt_features.step(model, &tape, &bound, &[ParamGroup::Features])?;
                guard_params(model, &[ParamGroup::Features], "adaptation", epoch, step)?;
                observer.after_step(StepKind::Bite, model);
            }
            step += 1;
        }
        skipped_total += skipped;
        let snap = target_snapshot(model, target)?;
        let record = EpochMetrics::from_snapshot(cfg.mode.name(), Phase::Adapt, target.domain(), epoch, &losses, &snap, skipped);
        observer.on_epoch_end(&record, model);
        metrics.push(record);
    }
    let final_snapshot = target_snapshot(model, target)?;
    Ok(AdaptOutcome {
        metrics,
        initial,
        final_snapshot,
        skipped_batches: skipped_total,
        steps: step,
    })
}

/// Anchor and bait probabilities from one shared feature pass. With
/// `detach_features` the extractor is cut off from the graph.
fn head_probabilities(tape: &mut Tape, bound: &BoundModel, x: Tensor, detach_features: bool) -> Result<(Var, Var)> {
    let xv = tape.constant(x);
    let mut feats = forward_features(tape, &bound.features, xv)?;
    if detach_features {
        feats = tape.detach(feats);
    }
    let l1 = forward_head(tape, bound.head(Head::Anchor)?, feats)?;
    let l2 = forward_head(tape, bound.head(Head::Bait)?, feats)?;
    Ok((tape.softmax_rows(l1)?, tape.softmax_rows(l2)?))
}

pub fn adapt_single_classifier(model: &mut BaitModel, target: &UnlabeledDataset, cfg: &TrainConfig) -> Result<AdaptOutcome> {
    adapt_single_classifier_observed(model, target, cfg, &mut NoopObserver)
}

/// Ablation: one frozen head, the extractor minimises the class-balance loss
/// of its predictions. No bait head is ever created.
pub fn adapt_single_classifier_observed(
    model: &mut BaitModel,
    target: &UnlabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    model.check_input(target.features())?;
    model.freeze(ParamGroup::Anchor);
    model.set_trainable(ParamGroup::Features);

    let mut batches = adapt_batches(target, cfg)?;
    let mut opt = SgdMomentum::new(cfg.lr_adapt, cfg.momentum);
    let initial = target_snapshot(model, target)?;
    let mut metrics = Vec::with_capacity(cfg.epochs_adapt);
    let mut step = 0;
    let mut skipped_total = 0;
    for epoch in 1..=cfg.epochs_adapt {
        let mut losses = LossMeans::default();
        let mut skipped = 0;
        while let Some(idx) = batches.next_batch() {
            if idx.len() < 2 {
                log::warn!("skipping adaptation batch of {} sample(s)", idx.len());
                skipped += 1;
                continue;
            }
            let _scope = target.enter_loss_scope();
            let x = target.features().gather_rows(&idx)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &[ParamGroup::Features]);
            let xv = tape.constant(x);
            let p = probabilities(&mut tape, &bound, Head::Anchor, xv)?;
            let loss = class_balance_single(&mut tape, p)?;
            losses.add("cb", guard("adaptation", epoch, step, "cb", tape.value(loss).item())?);
            tape.backward(loss)?;
            observer.before_step(StepKind::Balance, model);
            opt.step(model, &tape, &bound, &[ParamGroup::Features])?;
            guard_params(model, &[ParamGroup::Features], "adaptation", epoch, step)?;
            observer.after_step(StepKind::Balance, model);
            step += 1;
        }
        skipped_total += skipped;
        let snap = target_snapshot(model, target)?;
        let record = EpochMetrics::from_snapshot(cfg.mode.name(), Phase::Adapt, target.domain(), epoch, &losses, &snap, skipped);
        observer.on_epoch_end(&record, model);
        metrics.push(record);
    }
    let final_snapshot = target_snapshot(model, target)?;
    Ok(AdaptOutcome {
        metrics,
        initial,
        final_snapshot,
        skipped_batches: skipped_total,
        steps: step,
    })
}
