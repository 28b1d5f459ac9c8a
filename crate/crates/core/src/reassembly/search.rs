use serde::{Deserialize, Serialize};

use super::matching::{max_merge_budget, soft_match, PairDistances};
use super::{apply_plan_runtime, reassemble_weights, ChannelStats, ReassemblyPlan};
use crate::attention::causal_attention_value;
use crate::error::{Error, Result};
use crate::quant::{check_bits, fake_quant, Granularity};
use crate::tensor::Tensor;

/// Grid resolution used to turn an expansion ratio into a threshold.
pub const FIXED_RATIO_GRID_POINTS: usize = 1000;

/// `T_i = ⌈maxabs_i / θ⌉`, at least 1, with the guarantee `maxabs_i / T_i ≤ θ`
/// in floating point.
pub fn disassembly_counts(stats: &ChannelStats, theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0) {
        return Err(Error::Contract(format!("theta must be positive, got {theta}")));
    }
    Ok(stats
        .max_abs
        .iter()
        .map(|&m| {
            if m <= theta {
                return 1;
            }
            let mut t = (m / theta).ceil().max(1.0) as usize;
            while m / t as f64 > theta {
                t += 1;
            }
            t
        })
        .collect())
}

/// `θ_p = min(m) + p/P · (max(m) − min(m))` for `p = 1..=P`; the last point is
/// `max(m)` exactly.
pub fn theta_grid(stats: &ChannelStats, grid_points: usize) -> Result<Vec<f64>> {
    if grid_points == 0 {
        return Err(Error::Config("grid_points must be >= 1".into()));
    }
    let (lo, hi) = stats
        .max_abs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    if stats.max_abs.is_empty() {
        return Err(Error::Empty("theta_grid"));
    }
    let span = hi - lo;
    let mut grid: Vec<f64> = (1..=grid_points)
        .map(|p| lo + p as f64 / grid_points as f64 * span)
        .collect();
    grid[grid_points - 1] = hi;
    Ok(grid)
}

fn extra_of(splits: &[usize]) -> usize {
    splits.iter().map(|t| t - 1).sum()
}

fn unprotected_of(splits: &[usize]) -> usize {
    splits.iter().filter(|&&t| t == 1).count()
}

fn is_feasible(splits: &[usize]) -> bool {
    extra_of(splits) <= max_merge_budget(unprotected_of(splits))
}

/// Smallest grid threshold whose extra-channel count fits `⌊γ·M⌋` and whose
/// merges can be served by the unprotected channels.
pub fn theta_from_expansion_ratio(stats: &ChannelStats, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let grid = theta_grid(stats, FIXED_RATIO_GRID_POINTS)?;
    let top = grid[grid.len() - 1];
    let budget = (gamma * stats.channels() as f64).floor() as usize;
    if budget == 0 || top == 0.0 {
        return Ok(top);
    }
    for &theta in &grid {
        if theta <= 0.0 {
            continue;
        }
        let splits = disassembly_counts(stats, theta)?;
        if extra_of(&splits) <= budget && is_feasible(&splits) {
            return Ok(theta);
        }
    }
    Ok(top)
}

/// Builds the plan for `theta`: split counts from the statistics, merges from
/// soft matching over the channels that were not split.
pub fn build_plan(stats: &ChannelStats, distances: &PairDistances, theta: f64) -> Result<ReassemblyPlan> {
    if distances.channels() != stats.channels() {
        return Err(Error::shape("build_plan", "distance table and stats disagree"));
    }
    let splits = disassembly_counts(stats, theta)?;
    let budget = extra_of(&splits);
    let mut candidates = Vec::new();
    let mut origin = Vec::new();
    let mut offset = 0;
    for (i, &t) in splits.iter().enumerate() {
        if t == 1 {
            candidates.push(offset);
            origin.push(i);
        }
        offset += t;
    }
    // Unsplit channels are unchanged by disassembly, so the table over the
    // original channels is the table over their expanded copies.
    let lookup = |e: usize| origin[candidates.binary_search(&e).expect("candidate index")];
    let pairs = soft_match(&candidates, budget, |a, b| distances.get(lookup(a), lookup(b)))?;
    ReassemblyPlan::new(theta, splits, pairs)
}

/// Bit-widths for the reassembly objectives; `None` leaves that operand in
/// full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSetting {
    pub w_bits: Option<u32>,
    pub a_bits: Option<u32>,
}

impl QuantSetting {
    pub const FULL_PRECISION: Self = Self {
        w_bits: None,
        a_bits: None,
    };

    pub fn new(w_bits: u32, a_bits: u32) -> Self {
        Self {
            w_bits: Some(w_bits),
            a_bits: Some(a_bits),
        }
    }

    fn validate(&self) -> Result<()> {
        for b in [self.w_bits, self.a_bits].into_iter().flatten() {
            check_bits(b)?;
        }
        Ok(())
    }

    fn acts(&self, x: &Tensor) -> Result<Tensor> {
        match self.a_bits {
            Some(b) => fake_quant(x, b, Granularity::PerToken),
            None => Ok(x.clone()),
        }
    }

    fn weight(&self, w: &Tensor) -> Result<Tensor> {
        match self.w_bits {
            Some(b) => fake_quant(w, b, Granularity::PerChannel),
            None => Ok(w.clone()),
        }
    }
}

fn quantized_side(x: &Tensor, ws: &[&Tensor], plan: &ReassemblyPlan, q: QuantSetting) -> Result<(Tensor, Vec<Tensor>)> {
    q.validate()?;
    let xh = q.acts(&apply_plan_runtime(x, plan)?)?;
    let whs = ws
        .iter()
        .map(|w| q.weight(&reassemble_weights(w, plan)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((xh, whs))
}

/// `‖Attn(XW_Q, XW_K, XW_V) − Attn(X̂Ŵ_Q, X̂Ŵ_K, X̂Ŵ_V)‖²_F` with quantized
/// reassembled `X̂`, `Ŵ`.
pub fn attention_reassembly_error(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    n_heads: usize,
    plan: &ReassemblyPlan,
    quant: QuantSetting,
) -> Result<f64> {
    let reference = causal_attention_value(&x.matmul(w_q)?, &x.matmul(w_k)?, &x.matmul(w_v)?, n_heads)?;
    attention_error_against(&reference, x, &[w_q, w_k, w_v], n_heads, plan, quant)
}

fn attention_error_against(
    reference: &Tensor,
    x: &Tensor,
    ws: &[&Tensor],
    n_heads: usize,
    plan: &ReassemblyPlan,
    quant: QuantSetting,
) -> Result<f64> {
    let (xh, whs) = quantized_side(x, ws, plan, quant)?;
    let out = causal_attention_value(&xh.matmul(&whs[0])?, &xh.matmul(&whs[1])?, &xh.matmul(&whs[2])?, n_heads)?;
    Ok(reference.sq_dist(&out))
}

/// `Σ_k ‖X W_k − quant(X̂) quant(Ŵ_k)‖²_F` over the consumers of `X`.
pub fn linear_reassembly_error(x: &Tensor, ws: &[&Tensor], plan: &ReassemblyPlan, quant: QuantSetting) -> Result<f64> {
    let references = ws.iter().map(|w| x.matmul(w)).collect::<Result<Vec<_>>>()?;
    linear_error_against(&references, x, ws, plan, quant)
}

fn linear_error_against(
    references: &[Tensor],
    x: &Tensor,
    ws: &[&Tensor],
    plan: &ReassemblyPlan,
    quant: QuantSetting,
) -> Result<f64> {
    let (xh, whs) = quantized_side(x, ws, plan, quant)?;
    let mut total = 0.0;
    for (r, wh) in references.iter().zip(&whs) {
        total += r.sq_dist(&xh.matmul(wh)?);
    }
    Ok(total)
}

/// Which reassembly error drives the threshold search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// Consumers are `[W_Q, W_K, W_V]` feeding causal attention.
    Attention { n_heads: usize },
    /// Consumers are independent linear layers.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub theta: f64,
    pub plan: ReassemblyPlan,
    /// `(θ_p, error)` for every grid point; `None` marks thresholds whose
    /// merges cannot be served.
    pub evaluations: Vec<(f64, Option<f64>)>,
}

/// Grid search over thresholds: the objective summed over `acts` is evaluated at
/// every grid threshold; ties go to the larger threshold.
pub fn adaptive_search(
    stats: &ChannelStats,
    acts: &[Tensor],
    weights: &[&Tensor],
    grid_points: usize,
    quant: QuantSetting,
    objective: Objective,
) -> Result<SearchResult> {
    quant.validate()?;
    if let Objective::Attention { .. } = objective {
        if weights.len() != 3 {
            return Err(Error::Contract("attention objective needs W_Q, W_K, W_V".into()));
        }
    }
    let grid = theta_grid(stats, grid_points)?;
    let distances = PairDistances::new(acts, weights)?;
    let references: Vec<Vec<Tensor>> = acts
        .iter()
        .map(|x| -> Result<Vec<Tensor>> {
            let outs = weights.iter().map(|w| x.matmul(w)).collect::<Result<Vec<_>>>()?;
            match objective {
                Objective::Attention { n_heads } => {
                    Ok(vec![causal_attention_value(&outs[0], &outs[1], &outs[2], n_heads)?])
                }
                Objective::Linear => Ok(outs),
            }
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, ReassemblyPlan)> = None;
    let mut evaluations = Vec::with_capacity(grid.len());
    for &theta in &grid {
        let plan = match build_plan(stats, &distances, theta) {
            Ok(p) => p,
            Err(Error::Infeasible(_)) => {
                evaluations.push((theta, None));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut err = 0.0;
        for (x, refs) in acts.iter().zip(&references) {
            err += match objective {
                Objective::Attention { n_heads } => {
                    attention_error_against(&refs[0], x, weights, n_heads, &plan, quant)?
                }
                Objective::Linear => linear_error_against(refs, x, weights, &plan, quant)?,
            };
        }
        evaluations.push((theta, Some(err)));
        if best.as_ref().is_none_or(|(b, _)| err <= *b) {
            best = Some((err, plan));
        }
    }
    let (_, plan) = best.ok_or_else(|| Error::Infeasible("no feasible threshold on the grid".into()))?;
    Ok(SearchResult {
        theta: plan.theta,
        plan,
        evaluations,
    })
}
