//! Uniform affine quantization.
//!
//! `code = clamp(round(x / alpha) + beta, 0, 2^b - 1)` and
//! `x' = (code - beta) * alpha`, with `alpha = (max - min) / (2^b - 1)` and
//! `beta = -round(min / alpha)` per group. Rounding is half away from zero.
//!
//! Two details keep the quantizer well behaved:
//! * the group range is widened to include zero, so `beta` is a valid code
//!   and zero is represented exactly;
//! * `alpha` keeps at most 36 significant bits. Products of codes with such a
//!   scale are exact in `f64`, which makes fake quantization a bit-exact
//!   fixpoint of itself.
//!
//! A constant group `c` uses `alpha ≈ |c| / (2^b - 1)` (nudged so that
//! `(2^b - 1) * alpha == |c|`) and `beta = 0` or `2^b - 1` by sign, which
//! reconstructs `c` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Which elements share one `(alpha, beta)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per output channel, i.e. per column of an `[in x out]` weight.
    PerChannel,
    /// One group per row (token) of an activation matrix.
    PerToken,
}

impl Granularity {
    fn group_count(self, x_rows: usize, x_cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => x_cols,
            Granularity::PerToken => x_rows,
        }
    }

    #[inline]
    fn group(self, r: usize, c: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => c,
            Granularity::PerToken => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    pub alpha: Vec<f64>,
    pub beta: Vec<i64>,
}

/// Integer codes with the shape of the tensor they encode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    codes: Vec<u16>,
}

impl IntTensor {
    pub fn new(shape: &[usize], codes: Vec<u16>) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::shape("int_tensor", format!("{shape:?} vs {} codes", codes.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            codes,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    fn rows_cols(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        (self.codes.len() / cols.max(1), cols)
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Quant(format!("bit-width {bits} outside {MIN_BITS}..={MAX_BITS}")));
    }
    Ok(())
}

#[inline]
pub fn max_code(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Truncates the mantissa to 36 significant bits.
fn snap_scale(alpha: f64) -> f64 {
    f64::from_bits(alpha.to_bits() & !((1u64 << 17) - 1))
}

/// Scale for a constant group `c != 0` such that `levels * alpha == |c|`.
fn constant_scale(c: f64, levels: f64) -> f64 {
    let target = c.abs();
    let mut lo = target / levels;
    let mut hi = lo;
    for _ in 0..16 {
        if lo * levels == target {
            return lo;
        }
        if hi * levels == target {
            return hi;
        }
        lo = lo.next_down();
        hi = hi.next_up();
    }
    target / levels
}

impl QuantParams {
    pub fn per_tensor(bits: u32, alpha: f64, beta: i64) -> Result<Self> {
        let p = Self {
            bits,
            granularity: Granularity::PerTensor,
            alpha: vec![alpha],
            beta: vec![beta],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn groups(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.alpha.len() != self.beta.len() || self.alpha.is_empty() {
            return Err(Error::Quant("alpha/beta group counts differ".into()));
        }
        let k = max_code(self.bits);
        for (g, (&a, &b)) in self.alpha.iter().zip(&self.beta).enumerate() {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Quant(format!("group {g}: alpha {a} not positive")));
            }
            if !(0..=k).contains(&b) {
                return Err(Error::Quant(format!("group {g}: beta {b} outside 0..={k}")));
            }
        }
        Ok(())
    }

    fn check_against(&self, rows: usize, cols: usize) -> Result<()> {
        self.validate()?;
        let expected = self.granularity.group_count(rows, cols);
        if expected != self.groups() {
            return Err(Error::Quant(format!(
                "{:?} over [{rows}x{cols}] needs {expected} groups, params have {}",
                self.granularity,
                self.groups()
            )));
        }
        Ok(())
    }
}

/// Computes per-group scale and zero-point from the data range.
pub fn compute_quant_params(x: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    if x.numel() == 0 {
        return Err(Error::Empty("compute_quant_params"));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let groups = granularity.group_count(rows, cols);
    let mut lo = vec![f64::INFINITY; groups];
    let mut hi = vec![f64::NEG_INFINITY; groups];
    for r in 0..rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            let g = granularity.group(r, c);
            lo[g] = lo[g].min(v);
            hi[g] = hi[g].max(v);
        }
    }
    let k = max_code(bits);
    let levels = k as f64;
    let mut alpha = Vec::with_capacity(groups);
    let mut beta = Vec::with_capacity(groups);
    for (&mn, &mx) in lo.iter().zip(&hi) {
        if !(mn.is_finite() && mx.is_finite()) {
            return Err(Error::NonFinite("quantization range".into()));
        }
        if mx == mn {
            let c = mn;
            if c == 0.0 {
                alpha.push(1.0 / levels);
                beta.push(0);
            } else {
                alpha.push(constant_scale(c, levels));
                beta.push(if c < 0.0 { k } else { 0 });
            }
            continue;
        }
        let (mn, mx) = (mn.min(0.0), mx.max(0.0));
        let a = snap_scale((mx - mn) / levels);
        let b = (-round_half_away(mn / a)) as i64;
        alpha.push(a);
        beta.push(b.clamp(0, k));
    }
    Ok(QuantParams {
        bits,
        granularity,
        alpha,
        beta,
    })
}

/// Applies `f(value, alpha, beta)` element-wise, in row-major order.
fn for_each_grouped(x: &Tensor, p: &QuantParams, mut f: impl FnMut(f64, f64, i64)) {
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            let g = p.granularity.group(r, c);
            f(v, p.alpha[g], p.beta[g]);
        }
    }
}

#[inline]
fn raw_code(v: f64, alpha: f64, beta: i64) -> f64 {
    round_half_away(v / alpha) + beta as f64
}

pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<IntTensor> {
    p.check_against(x.rows(), x.cols())?;
    let k = max_code(p.bits) as f64;
    let mut codes = Vec::with_capacity(x.numel());
    for_each_grouped(x, p, |v, a, b| codes.push(raw_code(v, a, b).clamp(0.0, k) as u16));
    IntTensor::new(x.shape(), codes)
}

pub fn dequantize(q: &IntTensor, p: &QuantParams) -> Result<Tensor> {
    let (rows, cols) = q.rows_cols();
    p.check_against(rows, cols)?;
    let k = max_code(p.bits);
    let mut out = Vec::with_capacity(q.codes.len());
    for r in 0..rows {
        for c in 0..cols {
            let code = q.codes[r * cols + c] as i64;
            if code > k {
                return Err(Error::Quant(format!("code {code} exceeds {k}")));
            }
            let g = p.granularity.group(r, c);
            out.push((code - p.beta[g]) as f64 * p.alpha[g]);
        }
    }
    Ok(Tensor::from_parts(q.shape.clone(), out))
}

/// Quantize-dequantize with fixed parameters. Also returns, per element,
/// whether the pre-clamp code was inside `[0, 2^b - 1]`.
pub fn fake_quant_with_params(x: &Tensor, p: &QuantParams) -> Result<(Tensor, Vec<bool>)> {
    p.check_against(x.rows(), x.cols())?;
    let k = max_code(p.bits) as f64;
    let mut out = Vec::with_capacity(x.numel());
    let mut in_range = Vec::with_capacity(x.numel());
    for_each_grouped(x, p, |v, a, b| {
        let raw = raw_code(v, a, b);
        in_range.push((0.0..=k).contains(&raw));
        out.push((raw.clamp(0.0, k) - b as f64) * a);
    });
    Ok((Tensor::from_parts(x.shape().to_vec(), out), in_range))
}

pub(crate) fn fake_quant_with_mask(
    x: &Tensor,
    bits: u32,
    granularity: Granularity,
) -> Result<(Tensor, Vec<bool>)> {
    let p = compute_quant_params(x, bits, granularity)?;
    fake_quant_with_params(x, &p)
}

/// `dequantize(quantize(x))` with parameters computed from `x`.
pub fn fake_quant(x: &Tensor, bits: u32, granularity: Granularity) -> Result<Tensor> {
    Ok(fake_quant_with_mask(x, bits, granularity)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};
    use proptest::prelude::*;

    #[test]
    fn hand_evaluated_two_bit_case() {
        let x = Tensor::vector(vec![-1.0, 0.0, 3.0]).unwrap();
        let p = compute_quant_params(&x, 2, Granularity::PerTensor).unwrap();
        assert!((p.alpha[0] - 4.0 / 3.0).abs() < 1e-10);
        assert_eq!(p.beta[0], 1);
        let q = quantize(&x, &p).unwrap();
        assert_eq!(q.codes(), &[0, 1, 3]);
        let d = dequantize(&q, &p).unwrap();
        let expected = [-4.0 / 3.0, 0.0, 8.0 / 3.0];
        for ((&v, &e), &orig) in d.data().iter().zip(&expected).zip(x.data()) {
            assert!((v - e).abs() < 1e-10);
            assert!((v - orig).abs() <= p.alpha[0] / 2.0 + 1e-12);
        }
        // zero-point code decodes to exactly zero
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn integer_aligned_range() {
        let x = Tensor::vector((0..16).map(f64::from).collect()).unwrap();
        let p = compute_quant_params(&x, 4, Granularity::PerTensor).unwrap();
        assert_eq!((p.alpha[0], p.beta[0]), (1.0, 0));
        let q = quantize(&x, &p).unwrap();
        assert_eq!(q.codes(), (0..16).collect::<Vec<u16>>());
    }

    #[test]
    fn constant_group_is_lossless() {
        for c in [5.0, -5.0, 0.37, -1234.5, 0.0] {
            let x = Tensor::vector(vec![c, c]).unwrap();
            let p = compute_quant_params(&x, 4, Granularity::PerTensor).unwrap();
            if c == 5.0 {
                assert_eq!(p.alpha[0], 5.0 / 15.0);
                assert_eq!(p.beta[0], 0);
            }
            p.validate().unwrap();
            assert_eq!(fake_quant(&x, 4, Granularity::PerTensor).unwrap(), x);
        }
    }

    #[test]
    fn out_of_range_probe_is_clamped() {
        let p = QuantParams::per_tensor(2, 4.0 / 3.0, 1).unwrap();
        let probe = Tensor::vector(vec![-50.0, 50.0]).unwrap();
        assert_eq!(quantize(&probe, &p).unwrap().codes(), &[0, 3]);
    }

    #[test]
    fn dequantize_rejects_out_of_range_codes() {
        let p = QuantParams::per_tensor(2, 1.0, 0).unwrap();
        let q = IntTensor::new(&[1], vec![4]).unwrap();
        assert!(matches!(dequantize(&q, &p), Err(Error::Quant(_))));
    }

    #[test]
    fn params_reject_bad_inputs() {
        assert!(compute_quant_params(&Tensor::zeros(&[0]), 4, Granularity::PerTensor).is_err());
        assert!(compute_quant_params(&Tensor::zeros(&[2]), 1, Granularity::PerTensor).is_err());
        assert!(compute_quant_params(&Tensor::zeros(&[2]), 17, Granularity::PerTensor).is_err());
        let x = Tensor::zeros(&[2, 3]);
        let p = compute_quant_params(&x, 4, Granularity::PerChannel).unwrap();
        assert_eq!(p.groups(), 3);
        assert_eq!(compute_quant_params(&x, 4, Granularity::PerToken).unwrap().groups(), 2);
        assert!(quantize(&Tensor::zeros(&[3, 4]), &p).is_err());
    }

    #[test]
    fn sixteen_bit_round_trip_is_tight() {
        let x = gaussian_matrix(&mut seeded(1), 8, 8, 1.0);
        let p = compute_quant_params(&x, 16, Granularity::PerTensor).unwrap();
        let d = dequantize(&quantize(&x, &p).unwrap(), &p).unwrap();
        assert!(x.max_abs_diff(&d) <= p.alpha[0] / 2.0 + 1e-12);
        let rel = x.max_abs_diff(&d) / x.max_abs();
        assert!(rel < 1e-3);
    }

    #[test]
    fn grid_values_are_fixpoints() {
        let x = Tensor::vector(vec![-1.5, -0.5, 0.0, 0.5, 1.0, 6.0]).unwrap();
        let y = fake_quant(&x, 4, Granularity::PerTensor).unwrap();
        assert_eq!(fake_quant(&y, 4, Granularity::PerTensor).unwrap(), y);
        let grid = Tensor::vector((0..8).map(|i| f64::from(i) * 0.5).collect()).unwrap();
        assert_eq!(fake_quant(&grid, 3, Granularity::PerTensor).unwrap(), grid);
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..6, any::<u64>(), 0.01f64..100.0, -3.0f64..3.0).prop_map(
            |(r, c, seed, scale, shift)| {
                gaussian_matrix(&mut seeded(seed), r, c, scale).map(|v| v + shift * scale)
            },
        )
    }

    fn granularity_strategy() -> impl Strategy<Value = Granularity> {
        prop_oneof![
            Just(Granularity::PerTensor),
            Just(Granularity::PerChannel),
            Just(Granularity::PerToken)
        ]
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(x in matrix_strategy(), bits in 2u32..=16, g in granularity_strategy()) {
            let p = compute_quant_params(&x, bits, g).unwrap();
            p.validate().unwrap();
            let q = quantize(&x, &p).unwrap();
            prop_assert!(q.codes().iter().all(|&c| i64::from(c) <= max_code(bits)));
            let d = dequantize(&q, &p).unwrap();
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let grp = g.group(r, c);
                    let err = (x.get(r, c) - d.get(r, c)).abs();
                    prop_assert!(err <= p.alpha[grp] / 2.0 + 1e-12, "err {} alpha {}", err, p.alpha[grp]);
                }
            }
        }

        #[test]
        fn fake_quant_is_idempotent(x in matrix_strategy(), bits in 2u32..=16, g in granularity_strategy()) {
            let y = fake_quant(&x, bits, g).unwrap();
            prop_assert_eq!(fake_quant(&y, bits, g).unwrap(), y);
        }

        #[test]
        fn per_token_equals_row_by_row(x in matrix_strategy(), bits in 2u32..=8) {
            let whole = fake_quant(&x, bits, Granularity::PerToken).unwrap();
            for r in 0..x.rows() {
                let row = Tensor::vector(x.row(r).to_vec()).unwrap();
                let single = fake_quant(&row, bits, Granularity::PerTensor).unwrap();
                prop_assert_eq!(single.data(), whole.row(r));
            }
        }
    }
}
