//! Small building blocks shared by the models.

use super::{Tape, Var};
use crate::error::{contract, Result};

/// Scaled dot-product attention over already-projected `q` `[nq, w]`,
/// `k` and `v` `[nk, w]`, with `w` split evenly into `heads`. Returns the
/// concatenated head outputs `[nq, w]` and each head's weight matrix
/// `[nq, nk]`.
pub fn multihead_attention<'t>(
    tape: &'t Tape,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let width = q.shape()[1];
    contract!(
        heads > 0 && width.is_multiple_of(heads),
        "{heads} heads do not divide width {width}"
    );
    let dk = width / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                q.slice_cols(head * dk, dk)?,
                k.slice_cols(head * dk, dk)?,
                v.slice_cols(head * dk, dk)?,
            )
        };
        let w = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax(1)?;
        outs.push(w.matmul(vh)?);
        weights.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    Ok((out, weights))
}
