//! The adaptation network: an MLP feature extractor followed by two
//! weight-normalised linear heads, the frozen *anchor* and the trainable
//! *bait*.
//!
//! Head logits are inner products between features and the row-normalised
//! head weight, so each row of a head acts as a unit-length class prototype.
//! Features themselves are not normalised and the heads carry no bias.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which classifier head to read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Anchor,
    Bait,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Anchor => "anchor",
            Head::Bait => "bait",
        }
    }
}

/// Independently trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Features,
    Anchor,
    Bait,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Features, ParamGroup::Anchor, ParamGroup::Bait];
}

/// Fully connected feature extractor. ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    // weights[i] is [widths[i] × widths[i+1]]
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    /// Weights and biases drawn uniformly from `[-1/√fan_in, 1/√fan_in]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        validate_widths(widths)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, w)?);
            biases.push(Tensor::vector(b));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(widths: &[usize], weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        validate_widths(widths)?;
        let layers = widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Invalid(format!(
                "{layers} layers need {layers} weights and biases, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (i, pair) in widths.windows(2).enumerate() {
            if weights[i].shape() != [pair[0], pair[1]] {
                return Err(Error::Shape {
                    op: "mlp layer weight",
                    left: vec![pair[0], pair[1]],
                    right: weights[i].shape().to_vec(),
                });
            }
            if biases[i].len() != pair[1] {
                return Err(Error::Shape {
                    op: "mlp layer bias",
                    left: vec![pair[1]],
                    right: biases[i].shape().to_vec(),
                });
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in declaration order: `W0, b0, W1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Invalid(format!(
            "layer widths {widths:?} need at least an input and an output width, all non-zero"
        )));
    }
    Ok(())
}

/// Linear head without bias whose rows are L2-normalised before use.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNormClassifier {
    weight: Tensor,
}

impl WeightNormClassifier {
    pub fn new(weight: Tensor) -> Result<Self> {
        let (k, _) = weight.dims2("classifier weight")?;
        if k < 2 {
            return Err(Error::Invalid(format!("a classifier needs at least 2 classes, got {k}")));
        }
        Ok(Self { weight })
    }

    pub fn init<R: Rng + ?Sized>(num_classes: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let w = (0..num_classes * feature_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::new(Tensor::matrix(num_classes, feature_dim, w)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Tape handles for one feature extractor.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Tape handles for every parameter of a [`BaitModel`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub features: BoundMlp,
    pub anchor: Var,
    pub bait: Option<Var>,
}

impl BoundModel {
    pub fn head(&self, head: Head) -> Result<Var> {
        match head {
            Head::Anchor => Ok(self.anchor),
            Head::Bait => self.bait.ok_or_else(missing_bait),
        }
    }

    /// Handles of one group, in the same order as [`BaitModel::group_params`].
    pub fn group_vars(&self, group: ParamGroup) -> Vec<Var> {
        match group {
            ParamGroup::Features => self
                .features
                .weights
                .iter()
                .zip(&self.features.biases)
                .flat_map(|(&w, &b)| [w, b])
                .collect(),
            ParamGroup::Anchor => vec![self.anchor],
            ParamGroup::Bait => self.bait.into_iter().collect(),
        }
    }
}

fn missing_bait() -> Error {
    Error::Invalid("model has no bait classifier".into())
}

/// `f(x)`: the MLP forward pass.
pub fn forward_features(tape: &mut Tape, mlp: &BoundMlp, x: Var) -> Result<Var> {
    let layers = mlp.weights.len();
    let mut h = x;
    for (i, (&w, &b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row_vector(z, b)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Logits `feats · normalize_rows(weight)ᵀ`.
pub fn forward_head(tape: &mut Tape, weight: Var, feats: Var) -> Result<Var> {
    let d_f = tape.value(weight).cols();
    let feat_cols = tape.value(feats).dims2("forward_head")?.1;
    if feat_cols != d_f {
        return Err(Error::Shape {
            op: "forward_head",
            left: tape.value(feats).shape().to_vec(),
            right: tape.value(weight).shape().to_vec(),
        });
    }
    let prototypes = tape.l2_normalize_rows(weight)?;
    let pt = tape.transpose(prototypes)?;
    tape.matmul(feats, pt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaitModel {
    features: Mlp,
    anchor: WeightNormClassifier,
    bait: Option<WeightNormClassifier>,
    frozen: BTreeSet<ParamGroup>,
}

impl BaitModel {
    pub fn new(features: Mlp, anchor: WeightNormClassifier) -> Result<Self> {
        if anchor.feature_dim() != features.output_dim() {
            return Err(Error::Shape {
                op: "BaitModel::new",
                left: vec![features.output_dim()],
                right: anchor.weight().shape().to_vec(),
            });
        }
        Ok(Self {
            features,
            anchor,
            bait: None,
            frozen: BTreeSet::new(),
        })
    }

    /// Fresh model with `widths = [d_in, hidden.., d_f]` and a `K`-class anchor head.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], num_classes: usize, rng: &mut R) -> Result<Self> {
        let features = Mlp::init(widths, rng)?;
        let anchor = WeightNormClassifier::init(num_classes, features.output_dim(), rng)?;
        Self::new(features, anchor)
    }

    pub(crate) fn from_raw_parts(
        features: Mlp,
        anchor: WeightNormClassifier,
        bait: Option<WeightNormClassifier>,
        frozen: BTreeSet<ParamGroup>,
    ) -> Result<Self> {
        let mut m = Self::new(features, anchor)?;
        if let Some(b) = &bait {
            if b.weight().shape() != m.anchor.weight().shape() {
                return Err(Error::Shape {
                    op: "bait classifier",
                    left: m.anchor.weight().shape().to_vec(),
                    right: b.weight().shape().to_vec(),
                });
            }
        }
        m.bait = bait;
        m.frozen = frozen;
        Ok(m)
    }

    pub fn features(&self) -> &Mlp {
        &self.features
    }

    pub fn anchor(&self) -> &WeightNormClassifier {
        &self.anchor
    }

    pub fn bait(&self) -> Option<&WeightNormClassifier> {
        self.bait.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.anchor.num_classes()
    }

    /// `C2 ← C1`: the bait head becomes an exact copy of the anchor.
    pub fn init_bait_from_anchor(&mut self) {
        self.bait = Some(self.anchor.clone());
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn set_trainable(&mut self, group: ParamGroup) {
        self.frozen.remove(&group);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> &BTreeSet<ParamGroup> {
        &self.frozen
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        group != ParamGroup::Bait || self.bait.is_some()
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Features => self.features.params(),
            ParamGroup::Anchor => vec![self.anchor.weight()],
            ParamGroup::Bait => self.bait.iter().map(|b| b.weight()).collect(),
        }
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Features => self.features.params_mut(),
            ParamGroup::Anchor => vec![self.anchor.weight_mut()],
            ParamGroup::Bait => self.bait.iter_mut().map(|b| b.weight_mut()).collect(),
        }
    }

    /// Flattened copy of one group's parameters, for audits.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<f64> {
        self.group_params(group)
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Records every parameter as a leaf on `tape`.
    ///
    /// A leaf requires a gradient only if its group is listed in `active` and
    /// is not frozen.
    pub fn bind(&self, tape: &mut Tape, active: &[ParamGroup]) -> BoundModel {
        let live = |g: ParamGroup| active.contains(&g) && !self.is_frozen(g);
        let f_live = live(ParamGroup::Features);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in self.features.weights.iter().zip(&self.features.biases) {
            weights.push(tape.leaf(w.clone(), f_live));
            biases.push(tape.leaf(b.clone(), f_live));
        }
        let anchor = tape.leaf(self.anchor.weight.clone(), live(ParamGroup::Anchor));
        let bait = self
            .bait
            .as_ref()
            .map(|b| tape.leaf(b.weight.clone(), live(ParamGroup::Bait)));
        BoundModel {
            features: BoundMlp { weights, biases },
            anchor,
            bait,
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2("model input")?;
        if d != self.input_dim() {
            return Err(Error::Shape {
                op: "model input",
                left: vec![self.input_dim()],
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Detached feature extraction.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let xv = tape.constant(x.clone());
        let f = forward_features(&mut tape, &bound.features, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Detached logits of one head.
    pub fn logits(&self, x: &Tensor, head: Head) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let xv = tape.constant(x.clone());
        let f = forward_features(&mut tape, &bound.features, xv)?;
        let l = forward_head(&mut tape, bound.head(head)?, f)?;
        Ok(tape.value(l).clone())
    }

    /// Softmax probabilities `[n×K]` of one head.
    pub fn predict(&self, x: &Tensor, head: Head) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        self.check_input(x)?;
        let bound = self.bind(&mut tape, &[]);
        let p = probabilities(&mut tape, &bound, head, xv)?;
        Ok(tape.value(p).clone())
    }
}

/// `softmax(C(f(x)))` on the tape.
pub fn probabilities(tape: &mut Tape, bound: &BoundModel, head: Head, x: Var) -> Result<Var> {
    let f = forward_features(tape, &bound.features, x)?;
    let l = forward_head(tape, bound.head(head)?, f)?;
    tape.softmax_rows(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let mlp = Mlp::from_parts(
            &[3, 4, 5],
            vec![Tensor::zeros(&[3, 4]), Tensor::zeros(&[4, 5])],
            vec![Tensor::zeros(&[4]), Tensor::zeros(&[5])],
        )
        .unwrap();
        let head = WeightNormClassifier::init(2, 5, &mut rng()).unwrap();
        let m = BaitModel::new(mlp, head).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        assert!(m.extract(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let mlp = Mlp::from_parts(&[3, 3], vec![identity(3)], vec![Tensor::zeros(&[3])]).unwrap();
        let head = WeightNormClassifier::init(2, 3, &mut rng()).unwrap();
        let m = BaitModel::new(mlp, head).unwrap();
        // single layer is linear: negatives survive
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, -9.0]).unwrap();
        assert_eq!(m.extract(&x).unwrap(), x);
    }

    #[test]
    fn feature_shape_contract() {
        let m = BaitModel::init(&[2, 16, 16, 16], 2, &mut rng()).unwrap();
        let x = Tensor::zeros(&[7, 2]);
        assert_eq!(m.extract(&x).unwrap().shape(), &[7, 16]);
        assert!(m.extract(&Tensor::zeros(&[7, 3])).is_err());
    }

    #[test]
    fn prototype_feature_scores_one() {
        let w = Tensor::from_rows(&[[3.0, 4.0, 0.0], [0.0, 1.0, 1.0], [-1.0, 0.0, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.constant(w);
        let feats = tape.constant(Tensor::from_rows(&[[0.6, 0.8, 0.0]]).unwrap());
        let l = forward_head(&mut tape, wv, feats).unwrap();
        let logits = tape.value(l).data().to_vec();
        assert!((logits[0] - 1.0).abs() < 1e-15);
        assert!(logits[1] < 1.0 && logits[2] < 1.0);
    }

    #[test]
    fn zero_features_give_uniform_prediction() {
        let mlp = Mlp::from_parts(&[2, 3], vec![Tensor::zeros(&[2, 3])], vec![Tensor::zeros(&[3])]).unwrap();
        let head = WeightNormClassifier::init(4, 3, &mut rng()).unwrap();
        let m = BaitModel::new(mlp, head).unwrap();
        let p = m.predict(&Tensor::full(&[3, 2], 1.5), Head::Anchor).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn row_scaling_leaves_logits_unchanged() {
        let mut r = rng();
        let m = BaitModel::init(&[2, 8, 5], 3, &mut r).unwrap();
        let x = Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let before = m.logits(&x, Head::Anchor).unwrap();
        let mut scaled = m.clone();
        let w = scaled.anchor.weight_mut();
        let cols = w.cols();
        w.data_mut()[cols..2 * cols].iter_mut().for_each(|v| *v *= 10.0);
        let after = scaled.logits(&x, Head::Anchor).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_prototype_row_is_rejected() {
        let mlp = Mlp::from_parts(&[2, 2], vec![identity(2)], vec![Tensor::zeros(&[2])]).unwrap();
        let head = WeightNormClassifier::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap();
        let m = BaitModel::new(mlp, head).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 2]), Head::Anchor).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeight { row: 1 }));
    }

    #[test]
    fn copied_bait_predicts_like_anchor() {
        let mut m = BaitModel::init(&[2, 6, 4], 3, &mut rng()).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2]), Head::Bait).is_err());
        m.init_bait_from_anchor();
        let x = Tensor::matrix(3, 2, vec![0.1, 2.0, -1.0, 0.3, 0.7, 0.7]).unwrap();
        assert_eq!(m.predict(&x, Head::Anchor).unwrap(), m.predict(&x, Head::Bait).unwrap());
    }

    #[test]
    fn argmax_of_probabilities_matches_logits() {
        let m = BaitModel::init(&[2, 8, 8, 6], 4, &mut rng()).unwrap();
        let x = Tensor::matrix(10, 2, (0..20).map(|i| ((i * 7) % 11) as f64 * 0.4 - 2.0).collect()).unwrap();
        let p = m.predict(&x, Head::Anchor).unwrap();
        let l = m.logits(&x, Head::Anchor).unwrap();
        assert_eq!(p.argmax_rows(), l.argmax_rows());
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_groups_bind_without_gradients() {
        let mut m = BaitModel::init(&[2, 4, 3], 2, &mut rng()).unwrap();
        m.init_bait_from_anchor();
        m.freeze(ParamGroup::Anchor);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, &ParamGroup::ALL);
        assert!(!tape.requires_grad(b.anchor));
        assert!(tape.requires_grad(b.bait.unwrap()));
        assert!(tape.requires_grad(b.features.weights[0]));
        m.set_trainable(ParamGroup::Anchor);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, &[ParamGroup::Anchor]);
        assert!(tape.requires_grad(b.anchor));
        assert!(!tape.requires_grad(b.features.biases[0]));
    }
}
