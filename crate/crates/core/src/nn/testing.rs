//! Finite-difference helpers for unit tests.

use rand::Rng as _;

use super::{Differentiable, LabeledBatch, ParamSet};
use crate::data::{CLS, NUM_RESERVED, SEP};
use crate::error::Result;
use crate::util;

pub fn random_batch(vocab: usize, n: usize, seed: u64) -> LabeledBatch {
    let mut r = util::rng(seed, 0xfd);
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let len = r.gen_range(1..6);
        let mut s = vec![CLS];
        s.extend((0..len).map(|_| r.gen_range(NUM_RESERVED..vocab)));
        s.push(SEP);
        seqs.push(s);
        labels.push(if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    }
    LabeledBatch::mean(seqs, labels).unwrap()
}

/// Max per-coordinate relative error between reverse-mode and central
/// differences, with an absolute floor of 1e-6 on the denominator.
pub fn fd_check<M: Differentiable>(model: &M, params: &ParamSet, batch: &M::Batch, eps: f64) -> Result<f64> {
    let (_, grad) = model.loss_and_grad(params, batch)?;
    let flat = params.flatten();
    let analytic = grad.flatten();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += eps;
        let mut minus = flat.clone();
        minus[i] -= eps;
        let lp = model.loss(&params.unflatten_like(&plus)?, batch)?;
        let lm = model.loss(&params.unflatten_like(&minus)?, batch)?;
        let fd = (lp - lm) / (2.0 * eps);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
