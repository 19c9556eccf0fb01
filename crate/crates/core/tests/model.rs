mod common;

use bait::checkpoint::{Checkpoint, Expect, FORMAT_VERSION};
use bait::model::{forward_head, Mlp, WeightNormClassifier};
use bait::{load_checkpoint, save_checkpoint, BaitModel, Error, Head, ParamGroup, Tape, Tensor};
use common::{perturbed_model, random_matrix, rng};
use proptest::prelude::*;

fn batch(seed: u64) -> Tensor {
    random_matrix(9, 2, 2.0, &mut rng(seed))
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let mut m = perturbed_model(&[2, 8, 5], 3, 11);
    m.freeze(ParamGroup::Anchor);
    save_checkpoint(&m, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, m);
    assert!(loaded.is_frozen(ParamGroup::Anchor));

    let x = batch(1);
    for head in [Head::Anchor, Head::Bait] {
        assert_eq!(m.predict(&x, head).unwrap(), loaded.predict(&x, head).unwrap());
    }
}

#[test]
fn checkpoint_rejects_wrong_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&perturbed_model(&[2, 4, 3], 2, 1), &p).unwrap();
    let err = Checkpoint::load_expecting(
        &p,
        Expect {
            input_dim: None,
            num_classes: Some(5),
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("classes")), "{err}");
}

#[test]
fn checkpoint_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&perturbed_model(&[2, 4, 3], 2, 1), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&p).is_err());

    std::fs::write(&p, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&p).is_err());

    let text = String::from_utf8_lossy(&bytes);
    let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = text[..newline].replace(&format!("\"version\":{FORMAT_VERSION}"), "\"version\":99");
    let mut bumped = header.into_bytes();
    bumped.extend_from_slice(&bytes[newline..]);
    std::fs::write(&p, bumped).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::CheckpointVersion { found: 99, .. })));
}

#[test]
fn single_linear_identity_layer() {
    let mlp = Mlp::from_parts(
        &[3, 3],
        vec![Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()],
        vec![Tensor::zeros(&[3])],
    )
    .unwrap();
    let head = WeightNormClassifier::new(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap()).unwrap();
    let m = BaitModel::new(mlp, head).unwrap();
    let x = Tensor::from_rows(&[[0.5, -2.0, 7.0], [-1.0, 0.0, 3.0]]).unwrap();
    assert_eq!(m.extract(&x).unwrap(), x);
    assert!(matches!(m.extract(&Tensor::zeros(&[2, 4])), Err(Error::Shape { .. })));
}

#[test]
fn frozen_anchor_gets_no_gradient() {
    let mut m = perturbed_model(&[2, 6, 4], 3, 5);
    m.freeze(ParamGroup::Anchor);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, &ParamGroup::ALL);
    assert!(!tape.requires_grad(bound.anchor));
    assert!(tape.requires_grad(bound.bait.unwrap()));
    assert!(bound.group_vars(ParamGroup::Features).iter().all(|&v| tape.requires_grad(v)));
}

proptest! {
    #[test]
    fn weight_normalization_invariance(seed in 0u64..500, row in 0usize..3, factor in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let w = random_matrix(3, 4, 1.0, &mut r);
        let feats = random_matrix(5, 4, 3.0, &mut r);
        let mut scaled = w.clone();
        for v in &mut scaled.data_mut()[row * 4..(row + 1) * 4] {
            *v *= factor;
        }
        let logits = |weight: Tensor| {
            let mut tape = Tape::new();
            let wv = tape.constant(weight);
            let fv = tape.constant(feats.clone());
            let l = forward_head(&mut tape, wv, fv).unwrap();
            tape.value(l).clone()
        };
        let a = logits(w);
        let b = logits(scaled);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bait_copy_predicts_like_anchor(seed in 0u64..500) {
        let mut m = BaitModel::init(&[2, 7, 5], 4, &mut rng(seed)).unwrap();
        m.init_bait_from_anchor();
        let x = batch(seed + 1);
        prop_assert_eq!(m.predict(&x, Head::Anchor).unwrap(), m.predict(&x, Head::Bait).unwrap());
    }

    #[test]
    fn predictions_are_distributions(seed in 0u64..500) {
        let m = BaitModel::init(&[2, 7, 5], 4, &mut rng(seed)).unwrap();
        let p = m.predict(&batch(seed), Head::Anchor).unwrap();
        for r in 0..p.rows() {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
