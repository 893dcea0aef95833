//! Label-smoothed token cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Mean over rows with a target of `-(1-ε)·lp[y] - (ε/V)·Σ_k lp[k]`, i.e.
/// the cross-entropy against the target distribution that puts `ε/V` on
/// every class and the remaining `1-ε` on the reference. Rows whose target
/// is `None` (padding) contribute nothing.
pub fn smoothed_nll(
    g: &mut Graph,
    log_probs: Var,
    targets: &[Option<usize>],
    eps: f64,
) -> Result<Var> {
    let (rows, vocab) = g.value(log_probs).dims2();
    if targets.len() != rows {
        return Err(Error::Shape {
            op: "smoothed_nll",
            lhs: vec![rows, vocab],
            rhs: vec![targets.len()],
        });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} not in [0,1)")));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::contract("cross-entropy over zero target tokens"));
    }
    let mut w = vec![0.0; rows * vocab];
    let off = eps / vocab as f64;
    for (r, t) in targets.iter().enumerate() {
        if let Some(y) = *t {
            if y >= vocab {
                return Err(Error::contract(format!(
                    "target id {y} outside vocabulary of {vocab}"
                )));
            }
            w[r * vocab..(r + 1) * vocab]
                .iter_mut()
                .for_each(|x| *x = off);
            w[r * vocab + y] += 1.0 - eps;
        }
    }
    let w = g.constant(Tensor::new(vec![rows, vocab], w)?);
    let weighted = g.mul(log_probs, w)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, -1.0 / count as f64))
}

/// The smallest value [`smoothed_nll`] can take: the entropy of the
/// smoothed target distribution, reached when the model predicts it
/// exactly.
pub fn smoothing_floor(vocab: usize, eps: f64) -> f64 {
    let off = eps / vocab as f64;
    let on = 1.0 - eps + off;
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(on) + (vocab - 1) as f64 * h(off)
}
