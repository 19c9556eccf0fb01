#![allow(dead_code)]

use bait::model::{probabilities, BoundModel};
use bait::{BaitModel, Head, ParamGroup, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random probability rows (softmax of random logits).
pub fn random_probs(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let e: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0f64).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::matrix(rows, k, data).unwrap()
}

/// A model with a bait head nudged away from the anchor, so that every loss
/// has non-trivial gradients everywhere.
pub fn perturbed_model(widths: &[usize], k: usize, seed: u64) -> BaitModel {
    let mut r = rng(seed);
    let mut m = BaitModel::init(widths, k, &mut r).unwrap();
    m.init_bait_from_anchor();
    for t in m.group_params_mut(ParamGroup::Bait) {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    m
}

#[derive(Debug)]
pub struct Mismatch {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= (FD_REL * scale).max(FD_ABS)
}

/// Compares tape gradients of every parameter in `groups` against central
/// differences of the same loss. `build` must be a pure function of the
/// bound parameters.
pub fn fd_check<F>(model: &BaitModel, groups: &[ParamGroup], build: F) -> Result<(usize, Vec<Mismatch>)>
where
    F: Fn(&mut Tape, &BoundModel) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, groups);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;

    let value_at = |m: &BaitModel| -> Result<f64> {
        let mut t = Tape::new();
        let b = m.bind(&mut t, &[]);
        let l = build(&mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut checked = 0;
    let mut bad = Vec::new();
    let mut probe = model.clone();
    for &group in groups {
        let vars = bound.group_vars(group);
        let sizes: Vec<usize> = model.group_params(group).iter().map(|t| t.len()).collect();
        for (slot, (&var, &size)) in vars.iter().zip(&sizes).enumerate() {
            let analytic = tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; size]);
            for i in 0..size {
                let orig = probe.group_params(group)[slot].data()[i];
                probe.group_params_mut(group)[slot].data_mut()[i] = orig + FD_STEP;
                let up = value_at(&probe)?;
                probe.group_params_mut(group)[slot].data_mut()[i] = orig - FD_STEP;
                let down = value_at(&probe)?;
                probe.group_params_mut(group)[slot].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                checked += 1;
                if !close(analytic[i], numeric) {
                    bad.push(Mismatch {
                        group,
                        index: i,
                        analytic: analytic[i],
                        numeric,
                    });
                }
            }
        }
    }
    Ok((checked, bad))
}

pub fn head_probs(tape: &mut Tape, bound: &BoundModel, x: &Tensor, head: Head) -> Result<Var> {
    let xv = tape.constant(x.clone());
    probabilities(tape, bound, head, xv)
}
