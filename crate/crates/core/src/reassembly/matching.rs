use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output error of merging channels `i` and `j`:
/// `Σ_t Σ_k ((x_i W_ik - x_i W_jk + x_j W_jk - x_j W_ik) / 2)²`.
pub fn channel_distance(x_i: &[f64], x_j: &[f64], w_i: &[f64], w_j: &[f64]) -> Result<f64> {
    if x_i.len() != x_j.len() || w_i.len() != w_j.len() {
        return Err(Error::shape(
            "channel_distance",
            format!("x {}/{}, w {}/{}", x_i.len(), x_j.len(), w_i.len(), w_j.len()),
        ));
    }
    let mut total = 0.0;
    for (&a, &b) in x_i.iter().zip(x_j) {
        for (&wi, &wj) in w_i.iter().zip(w_j) {
            let e = (a * (wi - wj) + b * (wj - wi)) / 2.0;
            total += e * e;
        }
    }
    Ok(total)
}

/// Symmetric table of merge distances between channels.
///
/// The per-pair term factorizes as `¼·‖x_i − x_j‖²·‖W_i − W_j‖²`, so the
/// table costs one pass over tokens and one over weight columns.
#[derive(Clone, Debug)]
pub struct PairDistances {
    n: usize,
    d: Vec<f64>,
}

impl PairDistances {
    /// `acts` are `[L x C]` samples, `weights` the `[C x N_k]` consumers of
    /// those channels (their rows are concatenated).
    pub fn new(acts: &[Tensor], weights: &[&Tensor]) -> Result<Self> {
        let Some(first) = acts.first() else {
            return Err(Error::Empty("pair distances"));
        };
        let n = first.cols();
        if acts.iter().any(|x| x.cols() != n) || weights.iter().any(|w| w.rows() != n) {
            return Err(Error::shape("pair distances", "channel counts disagree"));
        }
        let mut dx = vec![0.0; n * n];
        for x in acts {
            for r in 0..x.rows() {
                let row = x.row(r);
                for i in 0..n {
                    for j in i + 1..n {
                        let t = row[i] - row[j];
                        dx[i * n + j] += t * t;
                    }
                }
            }
        }
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let mut dw = 0.0;
                for w in weights {
                    for (a, b) in w.row(i).iter().zip(w.row(j)) {
                        dw += (a - b) * (a - b);
                    }
                }
                let v = 0.25 * dx[i * n + j] * dw;
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(Self { n, d })
    }

    pub fn channels(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Largest budget the even/odd matching can serve for `unprotected` channels:
/// every even-position channel may merge, provided at least one odd one exists.
pub fn max_merge_budget(unprotected: usize) -> usize {
    if unprotected < 2 {
        0
    } else {
        unprotected.div_ceil(2)
    }
}

/// Bipartite soft matching over `candidates` (ascending channel indices).
/// `dist(a, b)` is looked up by candidate channel index.
pub(crate) fn soft_match(
    candidates: &[usize],
    budget: usize,
    dist: impl Fn(usize, usize) -> f64,
) -> Result<Vec<(usize, usize)>> {
    if budget == 0 {
        return Ok(Vec::new());
    }
    if budget > max_merge_budget(candidates.len()) {
        return Err(Error::Infeasible(format!(
            "{budget} merges requested but only {} unprotected channels",
            candidates.len()
        )));
    }
    let set_a: Vec<usize> = candidates.iter().step_by(2).copied().collect();
    let set_b: Vec<usize> = candidates.iter().skip(1).step_by(2).copied().collect();
    let mut edges: Vec<(f64, usize, usize)> = set_a
        .iter()
        .map(|&a| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &b in &set_b {
                let d = dist(a, b);
                if d < best.0 {
                    best = (d, b);
                }
            }
            (best.0, a, best.1)
        })
        .collect();
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    Ok(edges.into_iter().take(budget).map(|(_, a, b)| (a, b)).collect())
}

/// Selects the `budget` cheapest merges among unprotected channels of the
/// (already disassembled) activations `acts` consumed by `w` (`[M' x N]`).
pub fn find_merge_pairs(
    acts: &[Tensor],
    w: &Tensor,
    budget: usize,
    protected: &BTreeSet<usize>,
) -> Result<Vec<(usize, usize)>> {
    let table = PairDistances::new(acts, &[w])?;
    let candidates: Vec<usize> = (0..table.channels()).filter(|i| !protected.contains(i)).collect();
    soft_match(&candidates, budget, |a, b| table.get(a, b))
}
