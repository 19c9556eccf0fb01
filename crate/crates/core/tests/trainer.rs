use bait::data::make_moons;
use bait::eval::evaluate;
use bait::experiment::MoonsSetup;
use bait::trainer::{
    adapt, adapt_observed, init_model, tau_for_step, train_source, train_source_observed, StepIsolationAudit,
    StepKind, TrainObserver,
};
use bait::losses::BatchSplit;
use bait::{AdaptMode, BaitModel, Error, Head, LabeledDataset, ParamGroup, TauSchedule, TrainConfig};

fn trained_source(cfg: &TrainConfig) -> (BaitModel, LabeledDataset, LabeledDataset) {
    let (source, target) = MoonsSetup::default().domains().unwrap();
    let mut m = init_model(cfg, 2, 2).unwrap();
    train_source(&mut m, &source, cfg).unwrap();
    (m, source, target)
}

fn short(mode: AdaptMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs_source: 30,
        epochs_adapt: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn source_training_separates_the_moons() {
    let cfg = TrainConfig::default();
    let (m, source, _) = trained_source(&cfg);
    let acc = evaluate(&m, &source, Head::Anchor).unwrap().accuracy;
    assert!(acc >= 0.99, "source accuracy {acc}");
    assert!(m.bait().is_none());
}

#[test]
fn zero_source_epochs_leave_the_model_alone() {
    let cfg = TrainConfig {
        epochs_source: 0,
        ..TrainConfig::default()
    };
    let source = make_moons(20, 0.1, 0).unwrap();
    let mut m = init_model(&cfg, 2, 2).unwrap();
    let before = m.clone();
    let metrics = train_source(&mut m, &source, &cfg).unwrap();
    assert!(metrics.is_empty());
    assert_eq!(m, before);
}

#[test]
fn source_loss_is_finite_and_improves() {
    let cfg = TrainConfig {
        epochs_source: 15,
        ..TrainConfig::default()
    };
    let source = make_moons(100, 0.1, 4).unwrap();
    let mut m = init_model(&cfg, 2, 2).unwrap();
    let metrics = train_source(&mut m, &source, &cfg).unwrap();
    let ce: Vec<f64> = metrics.iter().map(|e| e.losses["ce"]).collect();
    assert!(ce.iter().all(|v| v.is_finite()));
    assert!(ce.iter().copied().fold(f64::INFINITY, f64::min) <= ce[0]);
}

#[test]
fn source_training_never_touches_the_bait_head() {
    let cfg = TrainConfig {
        epochs_source: 2,
        ..TrainConfig::default()
    };
    let source = make_moons(40, 0.1, 1).unwrap();
    let mut m = init_model(&cfg, 2, 2).unwrap();
    m.init_bait_from_anchor();
    let bait_before = m.snapshot(ParamGroup::Bait);
    let mut audit = StepIsolationAudit::default();
    train_source_observed(&mut m, &source, &cfg, &mut audit).unwrap();
    assert_eq!(m.snapshot(ParamGroup::Bait), bait_before);
    assert_eq!(audit.touched_by(StepKind::Source), vec![ParamGroup::Features, ParamGroup::Anchor]);
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let cfg = TrainConfig {
        lr_source: 1e300,
        epochs_source: 5,
        ..TrainConfig::default()
    };
    let source = make_moons(40, 0.1, 1).unwrap();
    let mut m = init_model(&cfg, 2, 2).unwrap();
    let err = train_source(&mut m, &source, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn bait_adaptation_respects_step_isolation() {
    let cfg = short(AdaptMode::Bait);
    let (mut m, _, target) = trained_source(&cfg);
    let anchor = m.snapshot(ParamGroup::Anchor);
    let target = target.into_unlabeled();
    let mut audit = StepIsolationAudit::default();
    let out = adapt_observed(&mut m, &target, &cfg, &mut audit).unwrap();

    assert_eq!(m.snapshot(ParamGroup::Anchor), anchor);
    assert!(m.is_frozen(ParamGroup::Anchor));
    assert_eq!(audit.touched_by(StepKind::Bite), vec![ParamGroup::Features]);
    assert!(audit.touched_by(StepKind::Cast).iter().all(|&g| g == ParamGroup::Bait));
    assert_eq!(audit.steps.len(), 2 * out.steps);
    assert_eq!(out.steps, cfg.epochs_adapt * (600 / cfg.batch_size));
    assert!(!target.leak_tripped());
}

#[test]
fn bait_adaptation_improves_the_target() {
    let cfg = TrainConfig::default();
    let (mut m, _, target) = trained_source(&cfg);
    let before = evaluate(&m, &target, Head::Anchor).unwrap().accuracy;
    let target_u = target.clone().into_unlabeled();
    let out = adapt(&mut m, &target_u, &cfg).unwrap();
    let after = evaluate(&m, &target, Head::Anchor).unwrap().accuracy;
    assert!(after > before, "{before} -> {after}");
    assert!(out.final_snapshot.agreement.unwrap() >= out.initial.agreement.unwrap());
    assert!(out.final_snapshot.mean_entropy < out.initial.mean_entropy);
    assert_eq!(out.initial.agreement, Some(1.0));
    assert_eq!(out.metrics.len(), cfg.epochs_adapt);
}

#[test]
fn single_classifier_never_builds_a_bait_head() {
    let cfg = short(AdaptMode::SingleClassifierCb);
    let (mut m, _, target) = trained_source(&cfg);
    let anchor = m.snapshot(ParamGroup::Anchor);
    let target = target.into_unlabeled();
    let mut audit = StepIsolationAudit::default();
    let out = adapt_observed(&mut m, &target, &cfg, &mut audit).unwrap();
    assert!(m.bait().is_none());
    assert_eq!(m.snapshot(ParamGroup::Anchor), anchor);
    assert_eq!(audit.touched_by(StepKind::Balance), vec![ParamGroup::Features]);
    assert!(out.final_snapshot.histogram_imbalance() < out.initial.histogram_imbalance());
    assert!(out.final_snapshot.agreement.is_none());
}

struct SplitLog(Vec<BatchSplit>);

impl TrainObserver for SplitLog {
    fn on_split(&mut self, split: &BatchSplit, _entropies: &[f64]) {
        self.0.push(split.clone());
    }
}

#[test]
fn adaptation_splits_half_and_half() {
    let cfg = short(AdaptMode::Bait);
    let (mut m, _, target) = trained_source(&cfg);
    let mut log = SplitLog(Vec::new());
    adapt_observed(&mut m, &target.into_unlabeled(), &cfg, &mut log).unwrap();
    assert!(!log.0.is_empty());
    for s in &log.0 {
        let diff = s.certain.len() as isize - s.uncertain.len() as isize;
        assert!(diff == 0 || diff == 1, "{} certain, {} uncertain", s.certain.len(), s.uncertain.len());
    }
}

#[test]
fn no_split_mode_treats_everything_as_uncertain() {
    let cfg = short(AdaptMode::BaitNoSplit);
    let (mut m, _, target) = trained_source(&cfg);
    let mut log = SplitLog(Vec::new());
    adapt_observed(&mut m, &target.into_unlabeled(), &cfg, &mut log).unwrap();
    assert!(log.0.iter().all(|s| s.certain.is_empty() && s.uncertain.len() == cfg.batch_size));
}

#[test]
fn decaying_threshold_empties_the_certain_set() {
    let cfg = TrainConfig {
        tau_schedule: TauSchedule::LinearDecayToZero,
        ..short(AdaptMode::Bait)
    };
    let (mut m, _, target) = trained_source(&cfg);
    let mut log = SplitLog(Vec::new());
    adapt_observed(&mut m, &target.into_unlabeled(), &cfg, &mut log).unwrap();
    let first = log.0.first().unwrap();
    let last = log.0.last().unwrap();
    assert!(last.tau < first.tau);
    assert!(last.certain.len() <= first.certain.len());
}

#[test]
fn tau_schedule_endpoints() {
    let h = [0.1, 0.9, 0.5, 0.3];
    assert!((tau_for_step(TauSchedule::Constant, 7, 10, &h, 0.5) - 0.4).abs() < 1e-15);
    assert_eq!(tau_for_step(TauSchedule::LinearDecayToZero, 0, 10, &h, 0.5), tau_for_step(TauSchedule::Constant, 0, 10, &h, 0.5));
    assert_eq!(tau_for_step(TauSchedule::LinearDecayToZero, 10, 10, &h, 0.5), 0.0);
}

#[test]
fn singleton_batches_are_skipped() {
    let cfg = TrainConfig {
        batch_size: 1,
        epochs_adapt: 2,
        ..short(AdaptMode::Bait)
    };
    let target = make_moons(3, 0.1, 5).unwrap().into_unlabeled();
    let mut m = init_model(&cfg, 2, 2).unwrap();
    let features = m.snapshot(ParamGroup::Features);
    let out = adapt(&mut m, &target, &cfg).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.skipped_batches, 2 * 6);
    assert_eq!(m.snapshot(ParamGroup::Features), features);
}

#[test]
fn adaptation_is_deterministic() {
    let cfg = short(AdaptMode::Bait);
    let run = || {
        let (mut m, _, target) = trained_source(&cfg);
        let out = adapt(&mut m, &target.into_unlabeled(), &cfg).unwrap();
        (m, out.metrics)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(m1, m2);
    assert_eq!(l1, l2);
}
