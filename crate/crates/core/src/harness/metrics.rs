use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{run_blocks, PreparedBlock};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub channel: usize,
    pub min: f64,
    pub max: f64,
}

/// Per-channel extrema over all tokens of all samples.
pub fn channel_minmax_report(acts: &[Tensor]) -> Result<Vec<ChannelRange>> {
    let stats = crate::reassembly::channel_outlier_stats(acts)?;
    Ok(stats
        .min
        .iter()
        .zip(&stats.max)
        .enumerate()
        .map(|(channel, (&min, &max))| ChannelRange { channel, min, max })
        .collect())
}

pub fn minmax_csv(rows: &[ChannelRange]) -> String {
    let mut out = String::from("channel_index,min,max\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.channel, r.min, r.max));
    }
    out
}

/// Mean squared error between the final hidden states of two block stacks,
/// averaged over samples (all samples share a shape).
pub fn stage_output_mse(reference: &[PreparedBlock], candidate: &[PreparedBlock], eval_set: &[Tensor]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0.0;
    for x in eval_set {
        let a = run_blocks(reference, x, None)?;
        let b = run_blocks(candidate, x, None)?;
        total += a.mean_sq_diff(&b);
    }
    Ok(total / eval_set.len() as f64)
}

/// Linear interpolation between order statistics at rank `p·(n−1)`.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("quantile level {p} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Per-column `p`-quantiles of a matrix.
pub fn column_quantiles(t: &Tensor, p: f64) -> Result<Vec<f64>> {
    (0..t.cols()).map(|c| quantile(&t.column(c), p)).collect()
}

/// MSE between the per-channel `p`-quantiles of two equally shaped tensors.
pub fn percentile_mse(before: &Tensor, after: &Tensor, p: f64) -> Result<f64> {
    if before.shape() != after.shape() {
        return Err(Error::shape(
            "percentile_mse",
            format!("{:?} vs {:?}", before.shape(), after.shape()),
        ));
    }
    let a = column_quantiles(before, p)?;
    let b = column_quantiles(after, p)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_rows() {
        let x = Tensor::filled(&[3, 4], 2.5);
        let rows = channel_minmax_report(&[x]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.min == r.max));
        assert!(minmax_csv(&rows).starts_with("channel_index,min,max\n0,2.5,2.5\n"));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[1.0, 2.0], 1.0).unwrap(), 2.0);
        assert!((quantile(&[0.0, 10.0], 0.99).unwrap() - 9.9).abs() < 1e-12);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn percentile_mse_cases() {
        let a = Tensor::from_fn(5, 4, |r, c| (r * 4 + c) as f64);
        assert_eq!(percentile_mse(&a, &a, 0.99).unwrap(), 0.0);
        let permuted = Tensor::from_fn(5, 4, |r, c| a.get(r, 3 - c));
        assert!(percentile_mse(&a, &permuted, 0.99).unwrap() > 0.0);
        // Column c holds {c, c+4, ..., c+16}; its 0.5-quantile is c+8.
        let shifted = a.map(|v| v + 1.0);
        assert!((percentile_mse(&a, &shifted, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }
}
