//! Causal multi-head attention core, `softmax(Q Kᵀ / sqrt(d_head) + mask) V`
//! per head. Softmax probabilities are never quantized.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const MASKED: f64 = -1e30;

fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(len, len, |i, j| if j > i { MASKED } else { 0.0 })
}

/// Records attention over already projected `q`, `k`, `v` (each `[L x M]`).
pub fn causal_attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let (len, width) = (tape.value(q).rows(), tape.value(q).cols());
    if n_heads == 0 || width % n_heads != 0 {
        return Err(Error::shape("attention", format!("{width} channels, {n_heads} heads")));
    }
    let d_head = width / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mask = tape.constant(causal_mask(len));
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax_rows(scores);
        heads.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&heads)
}

/// Plain evaluation of [`causal_attention`].
pub fn causal_attention_value(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = causal_attention(&mut tape, qv, kv, vv, n_heads)?;
    Ok(tape.value(out).clone())
}
