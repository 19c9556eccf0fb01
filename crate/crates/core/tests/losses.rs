mod common;

use bait::losses::{
    bite_loss, cast_loss, class_balance_loss, cross_entropy_loss, entropy, row_entropies, split_batch, symmetric_kl,
    BatchSplit,
};
use bait::model::forward_features;
use bait::model::forward_head;
use bait::{ParamGroup, Tape, Tensor};
use common::{fd_check, head_probs, perturbed_model, random_matrix, random_probs, rng};
use proptest::prelude::*;

fn prob_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, k).prop_map(|z| {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    })
}

fn pair(max_k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_k).prop_flat_map(|k| (prob_row(k), prob_row(k)))
}

proptest! {
    #[test]
    fn entropy_is_bounded(p in (2usize..8).prop_flat_map(prob_row)) {
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn symmetric_kl_properties((a, b) in pair(6)) {
        let ab = symmetric_kl(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, symmetric_kl(&b, &a).unwrap());
        prop_assert!(symmetric_kl(&a, &a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn split_partitions_the_batch(seed in 0u64..2000, n in 2usize..40, k in 2usize..6, pct in 0.05f64..0.95) {
        let p = random_probs(n, k, &mut rng(seed));
        let split = split_batch(&p, pct).unwrap();
        split.validate(n).unwrap();
        let h = row_entropies(&p).unwrap();
        let mut all: Vec<usize> = split.certain.iter().chain(&split.uncertain).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(split.certain.iter().all(|&i| h[i] <= split.tau));
        prop_assert!(split.uncertain.iter().all(|&i| h[i] > split.tau));
    }

    #[test]
    fn bite_on_identical_heads_is_twice_the_entropy(seed in 0u64..2000, n in 1usize..12, k in 2usize..6) {
        let p = random_probs(n, k, &mut rng(seed));
        let mut tape = Tape::new();
        let a = tape.constant(p.clone());
        let b = tape.constant(p.clone());
        let l = bite_loss(&mut tape, a, b).unwrap();
        let h: f64 = row_entropies(&p).unwrap().iter().sum();
        prop_assert!((tape.value(l).item() - 2.0 * h).abs() < 1e-9);
    }

    #[test]
    fn bite_is_symmetric(seed in 0u64..2000, n in 1usize..12, k in 2usize..6) {
        let mut r = rng(seed);
        let p = random_probs(n, k, &mut r);
        let q = random_probs(n, k, &mut r);
        let mut tape = Tape::new();
        let a = tape.constant(p);
        let b = tape.constant(q);
        let ab = bite_loss(&mut tape, a, b).unwrap();
        let ba = bite_loss(&mut tape, b, a).unwrap();
        prop_assert_eq!(tape.value(ab).item(), tape.value(ba).item());
    }
}

#[test]
fn unnormalized_rows_are_rejected() {
    assert!(entropy(&[0.5, 0.6]).is_err());
    assert!(symmetric_kl(&[0.5, 0.5], &[0.9, 0.2]).is_err());
}

#[test]
fn one_hot_bite_is_near_zero() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap());
    let l = bite_loss(&mut tape, p, p).unwrap();
    // only the clamped 0·ln ε terms remain, and those vanish exactly
    assert!(tape.value(l).item().abs() <= 2.0 * 3.0 * 1e-12 * 1e-12f64.ln().abs());
}

#[test]
fn empty_uncertain_set_leaves_the_agreement_term() {
    let mut r = rng(9);
    let p1 = random_probs(4, 3, &mut r);
    let p2 = random_probs(4, 3, &mut r);
    let split = BatchSplit::from_threshold(&[0.1, 0.2, 0.3, 0.4], 1.0);
    assert!(split.uncertain.is_empty());
    let mut tape = Tape::new();
    let a = tape.constant(p1.clone());
    let b = tape.constant(p2.clone());
    let l = cast_loss(&mut tape, a, b, &split).unwrap();
    let expected: f64 = (0..4).map(|i| symmetric_kl(p1.row(i), p2.row(i)).unwrap()).sum();
    assert!((tape.value(l).item() - expected).abs() < 1e-12);
    assert!(expected > 0.0);
}

#[test]
fn losses_reject_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full(&[2, 2], 0.5));
    let b = tape.constant(Tensor::full(&[3, 2], 0.5));
    let split = BatchSplit::all_uncertain(2);
    assert!(cast_loss(&mut tape, a, b, &split).is_err());
    assert!(bite_loss(&mut tape, a, b).is_err());
    assert!(class_balance_loss(&mut tape, a, b).is_err());
    assert!(cross_entropy_loss(&mut tape, a, &[0, 2]).is_err());
}

/// Step 1 binds only the bait head on detached features: gradients exist
/// for C2 and nowhere else.
#[test]
fn cast_step_reaches_only_the_bait_head() {
    let m = perturbed_model(&[2, 6, 4], 3, 21);
    let x = random_matrix(8, 2, 1.5, &mut rng(22));
    let p1 = m.predict(&x, bait::Head::Anchor).unwrap();
    let split = split_batch(&p1, 0.5).unwrap();

    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, &[ParamGroup::Bait]);
    let xv = tape.constant(x);
    let f = forward_features(&mut tape, &bound.features, xv).unwrap();
    let f = tape.detach(f);
    let l1 = forward_head(&mut tape, bound.anchor, f).unwrap();
    let l2 = forward_head(&mut tape, bound.bait.unwrap(), f).unwrap();
    let p1 = tape.softmax_rows(l1).unwrap();
    let p2 = tape.softmax_rows(l2).unwrap();
    let loss = cast_loss(&mut tape, p1, p2, &split).unwrap();
    tape.backward(loss).unwrap();

    let zero = |v| tape.grad(v).is_none_or(|g: &[f64]| g.iter().all(|&x| x == 0.0));
    assert!(bound.group_vars(ParamGroup::Features).into_iter().all(zero));
    assert!(zero(bound.anchor));
    assert!(!zero(bound.bait.unwrap()));
}

/// Step 2 binds only the extractor: both heads stay without gradient.
#[test]
fn bite_step_reaches_only_the_extractor() {
    let m = perturbed_model(&[2, 6, 4], 3, 23);
    let x = random_matrix(8, 2, 1.5, &mut rng(24));
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, &[ParamGroup::Features]);
    let p1 = head_probs(&mut tape, &bound, &x, bait::Head::Anchor).unwrap();
    let p2 = head_probs(&mut tape, &bound, &x, bait::Head::Bait).unwrap();
    let bite = bite_loss(&mut tape, p1, p2).unwrap();
    let cb = class_balance_loss(&mut tape, p1, p2).unwrap();
    let total = tape.add(bite, cb).unwrap();
    tape.backward(total).unwrap();

    let zero = |v| tape.grad(v).is_none_or(|g: &[f64]| g.iter().all(|&x| x == 0.0));
    assert!(zero(bound.anchor));
    assert!(zero(bound.bait.unwrap()));
    assert!(!bound.group_vars(ParamGroup::Features).into_iter().all(zero));
}

#[test]
fn cross_entropy_gradient_through_the_model() {
    let m = perturbed_model(&[3, 5, 4], 3, 31);
    let x = random_matrix(6, 3, 1.0, &mut rng(32));
    let labels = [0, 2, 1, 1, 0, 2];
    let (checked, bad) = fd_check(&m, &[ParamGroup::Features, ParamGroup::Anchor], |t, b| {
        let p = head_probs(t, b, &x, bait::Head::Anchor)?;
        cross_entropy_loss(t, p, &labels)
    })
    .unwrap();
    assert!(checked > 0);
    assert!(bad.is_empty(), "{bad:?}");
}
