//! The rotated twinning-moons experiment, end to end.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{make_moons, rotate2d, LabeledDataset, UnlabeledDataset};
use crate::error::Result;
use crate::eval::{evaluate, Snapshot};
use crate::model::{BaitModel, Head};
use crate::trainer::{adapt, init_model, train_source, AdaptOutcome, EpochMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoonsSetup {
    pub n_per_class: usize,
    pub noise_std: f64,
    pub rotation_deg: f64,
    /// Source data seed. Target data uses `seed + 1`.
    pub seed: u64,
}

impl Default for MoonsSetup {
    fn default() -> Self {
        Self {
            n_per_class: 300,
            noise_std: 0.1,
            rotation_deg: 30.0,
            seed: 0,
        }
    }
}

impl MoonsSetup {
    pub fn target_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Source moons and the rotated target moons (labels kept for evaluation).
    pub fn domains(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let source = make_moons(self.n_per_class, self.noise_std, self.seed)?.with_domain("source");
        let fresh = make_moons(self.n_per_class, self.noise_std, self.target_seed())?;
        let target = rotate2d(&fresh, self.rotation_deg)?.with_domain("target");
        Ok((source, target))
    }
}

#[derive(Clone, Debug)]
pub struct MoonsReport {
    pub source_accuracy: f64,
    /// Source-only model on the target domain.
    pub target_accuracy_before: f64,
    /// Anchor head on the target domain after adaptation.
    pub target_accuracy_after: f64,
    pub bait_accuracy_after: Option<f64>,
    pub adaptation: AdaptOutcome,
    pub source_metrics: Vec<EpochMetrics>,
    pub source_model: BaitModel,
    pub adapted_model: BaitModel,
    pub leak_tripped: bool,
}

impl MoonsReport {
    pub fn initial(&self) -> &Snapshot {
        &self.adaptation.initial
    }

    pub fn final_snapshot(&self) -> &Snapshot {
        &self.adaptation.final_snapshot
    }
}

/// Trains on the source moons, then adapts to the rotated target moons with
/// `cfg.mode`.
pub fn run_moons(setup: &MoonsSetup, cfg: &TrainConfig) -> Result<MoonsReport> {
    let (source, target) = setup.domains()?;
    let mut model = init_model(cfg, source.dim(), source.num_classes())?;
    let source_metrics = train_source(&mut model, &source, cfg)?;
    let source_model = model.clone();
    let source_accuracy = evaluate(&model, &source, Head::Anchor)?.accuracy;
    let target_accuracy_before = evaluate(&model, &target, Head::Anchor)?.accuracy;

    let target_u: UnlabeledDataset = target.clone().into_unlabeled();
    let adaptation = adapt(&mut model, &target_u, cfg)?;
    let target_accuracy_after = evaluate(&model, &target, Head::Anchor)?.accuracy;
    let bait_accuracy_after = match model.bait() {
        Some(_) => Some(evaluate(&model, &target, Head::Bait)?.accuracy),
        None => None,
    };
    Ok(MoonsReport {
        source_accuracy,
        target_accuracy_before,
        target_accuracy_after,
        bait_accuracy_after,
        leak_tripped: target_u.leak_tripped(),
        adaptation,
        source_metrics,
        source_model,
        adapted_model: model,
    })
}
