//! Training configuration, loaded from a flat TOML file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Anchor + bait heads, entropy split, bite and class-balance losses.
    Bait,
    /// Every sample is treated as uncertain in the cast step.
    BaitNoSplit,
    /// Step 2 minimises the bite loss alone.
    BaitNoCb,
    /// One head; the extractor minimises the class-balance loss only.
    #[serde(alias = "single_cb")]
    SingleClassifierCb,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 4] = [
        AdaptMode::Bait,
        AdaptMode::BaitNoSplit,
        AdaptMode::BaitNoCb,
        AdaptMode::SingleClassifierCb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Bait => "bait",
            AdaptMode::BaitNoSplit => "bait_no_split",
            AdaptMode::BaitNoCb => "bait_no_cb",
            AdaptMode::SingleClassifierCb => "single_classifier_cb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bait" => Ok(AdaptMode::Bait),
            "bait_no_split" => Ok(AdaptMode::BaitNoSplit),
            "bait_no_cb" => Ok(AdaptMode::BaitNoCb),
            "single_cb" | "single_classifier_cb" => Ok(AdaptMode::SingleClassifierCb),
            other => Err(Error::Config(format!("unknown adaptation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    Constant,
    #[serde(alias = "decay")]
    LinearDecayToZero,
}

impl TauSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(TauSchedule::Constant),
            "decay" | "linear_decay_to_zero" => Ok(TauSchedule::LinearDecayToZero),
            other => Err(Error::Config(format!("unknown tau schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_source: f64,
    pub lr_adapt: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_source: usize,
    pub epochs_adapt: usize,
    pub split_percentile: f64,
    /// Weight of the class-balance term in the extractor step. The bite loss
    /// is a sum over the batch while the balance loss works on batch means,
    /// so the default matches the default batch size.
    pub cb_weight: f64,
    pub mode: AdaptMode,
    pub tau_schedule: TauSchedule,
    pub seed: u64,
    /// Hidden layer widths of the feature extractor.
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_source: 0.01,
            lr_adapt: 1e-4,
            momentum: 0.9,
            batch_size: 64,
            epochs_source: 100,
            epochs_adapt: 30,
            split_percentile: 0.5,
            cb_weight: 64.0,
            mode: AdaptMode::Bait,
            tau_schedule: TauSchedule::Constant,
            seed: 0,
            hidden_widths: vec![16, 16],
            feature_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_source > 0.0 && self.lr_source.is_finite()) {
            return bad(format!("lr_source must be positive, got {}", self.lr_source));
        }
        if !(self.lr_adapt > 0.0 && self.lr_adapt.is_finite()) {
            return bad(format!("lr_adapt must be positive, got {}", self.lr_adapt));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.split_percentile > 0.0 && self.split_percentile < 1.0) {
            return bad(format!("split_percentile must lie in (0, 1), got {}", self.split_percentile));
        }
        if !(self.cb_weight >= 0.0 && self.cb_weight.is_finite()) {
            return bad(format!("cb_weight must be non-negative, got {}", self.cb_weight));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.feature_dim == 0 || self.hidden_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// `[input_dim, hidden.., feature_dim]`.
    pub fn layer_widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.feature_dim);
        w
    }
}
