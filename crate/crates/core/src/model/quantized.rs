use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{block_tensor_name, Container, ContainerWriter};
use super::{BlockPlans, ModelConfig, PreparedBlock, Projection};
use crate::error::{Error, Result};
use crate::quant::{check_bits, compute_quant_params, dequantize, quantize, Granularity, IntTensor, QuantParams};
use crate::tensor::Tensor;

/// Integer weight codes with their per-output-channel parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight {
    pub codes: IntTensor,
    pub params: QuantParams,
}

impl QuantizedWeight {
    pub fn quantize(w: &Tensor, bits: u32) -> Result<Self> {
        let params = compute_quant_params(w, bits, Granularity::PerChannel)?;
        Ok(Self {
            codes: quantize(w, &params)?,
            params,
        })
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        dequantize(&self.codes, &self.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// Reassembled (and possibly merged) weights in [`Projection::ALL`] order.
    pub weights: Vec<QuantizedWeight>,
    pub plans: BlockPlans,
}

/// Deployable form: integer weights, runtime plans and activation bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub w_bits: u32,
    pub a_bits: u32,
    pub blocks: Vec<QuantizedBlock>,
}

impl QuantizedModel {
    /// Quantizes the full-precision reassembled weights of prepared blocks.
    pub fn from_prepared(config: &ModelConfig, blocks: &[PreparedBlock], w_bits: u32, a_bits: u32) -> Result<Self> {
        check_bits(w_bits)?;
        check_bits(a_bits)?;
        let blocks = blocks
            .iter()
            .map(|b| {
                Ok(QuantizedBlock {
                    ln1_gain: b.ln1_gain.clone(),
                    ln1_bias: b.ln1_bias.clone(),
                    ln2_gain: b.ln2_gain.clone(),
                    ln2_bias: b.ln2_bias.clone(),
                    weights: b
                        .reassembled
                        .iter()
                        .map(|w| QuantizedWeight::quantize(w, w_bits))
                        .collect::<Result<_>>()?,
                    plans: b.plans.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let q = Self {
            config: config.clone(),
            w_bits,
            a_bits,
            blocks,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_layers {
            return Err(Error::shape("quantized model", "block count"));
        }
        let reference = super::BlockWeights::zeros(&self.config);
        for b in &self.blocks {
            b.plans.check(&self.config)?;
            if b.weights.len() != Projection::ALL.len() {
                return Err(Error::shape("quantized model", "projection count"));
            }
            for (&p, w) in Projection::ALL.iter().zip(&b.weights) {
                w.params.validate()?;
                if w.codes.shape() != reference.projection(p).shape() || w.params.bits != self.w_bits {
                    return Err(Error::shape("quantized model", format!("{} codes/params", p.name())));
                }
            }
        }
        Ok(())
    }

    pub fn prepare(&self) -> Result<Vec<PreparedBlock>> {
        self.blocks
            .iter()
            .map(|b| {
                let weights = b.weights.iter().map(|w| w.dequantize()).collect::<Result<Vec<_>>>()?;
                Ok(PreparedBlock {
                    n_heads: self.config.n_heads,
                    ln1_gain: b.ln1_gain.clone(),
                    ln1_bias: b.ln1_bias.clone(),
                    ln2_gain: b.ln2_gain.clone(),
                    ln2_bias: b.ln2_bias.clone(),
                    reassembled: weights.clone(),
                    effective: weights,
                    plans: b.plans.clone(),
                    a_bits: Some(self.a_bits),
                    w_bits: Some(self.w_bits),
                })
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::run_blocks(&self.prepare()?, x, None)
    }
}

#[derive(Serialize, Deserialize)]
struct QuantizedHeader {
    model: ModelConfig,
    w_bits: u32,
    a_bits: u32,
}

pub fn save_quantized(q: &QuantizedModel, path: &Path) -> Result<()> {
    q.validate()?;
    let mut w = ContainerWriter::default();
    for (i, b) in q.blocks.iter().enumerate() {
        w.f32(block_tensor_name(i, "ln1_gain"), &b.ln1_gain);
        w.f32(block_tensor_name(i, "ln1_bias"), &b.ln1_bias);
        w.f32(block_tensor_name(i, "ln2_gain"), &b.ln2_gain);
        w.f32(block_tensor_name(i, "ln2_bias"), &b.ln2_bias);
        for (p, qw) in Projection::ALL.iter().zip(&b.weights) {
            let base = block_tensor_name(i, p.name());
            let groups = [qw.params.groups()];
            w.u16(format!("{base}.codes"), qw.codes.shape(), qw.codes.codes());
            w.f64(format!("{base}.alpha"), &groups, &qw.params.alpha);
            let beta: Vec<i32> = qw.params.beta.iter().map(|&b| b as i32).collect();
            w.i32(format!("{base}.beta"), &groups, &beta);
        }
    }
    let header = QuantizedHeader {
        model: q.config.clone(),
        w_bits: q.w_bits,
        a_bits: q.a_bits,
    };
    let plans: Vec<&BlockPlans> = q.blocks.iter().map(|b| &b.plans).collect();
    w.write(
        path,
        "quantized_model",
        serde_json::to_value(header)?,
        serde_json::json!({ "plans": plans }),
    )
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let c = Container::read(path, "quantized_model")?;
    let header: QuantizedHeader = c.config()?;
    let cfg = header.model;
    cfg.validate().map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let plans: Vec<BlockPlans> = serde_json::from_value(c.manifest.meta["plans"].clone())
        .map_err(|e| Error::checkpoint(path, format!("bad plans: {e}")))?;
    if plans.len() != cfg.n_layers {
        return Err(Error::checkpoint(path, "plan count differs from n_layers"));
    }
    let reference = super::BlockWeights::zeros(&cfg);
    let mut names = Vec::new();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (i, plans) in plans.into_iter().enumerate() {
        let mut vec_f32 = |name: &str| -> Result<Tensor> {
            let full = block_tensor_name(i, name);
            let t = c.f32(&full, &[cfg.d_model])?;
            names.push(full);
            Ok(t)
        };
        let (ln1_gain, ln1_bias, ln2_gain, ln2_bias) =
            (vec_f32("ln1_gain")?, vec_f32("ln1_bias")?, vec_f32("ln2_gain")?, vec_f32("ln2_bias")?);
        let mut weights = Vec::with_capacity(7);
        for p in Projection::ALL {
            let base = block_tensor_name(i, p.name());
            let shape = reference.projection(p).shape().to_vec();
            let groups = [shape[1]];
            let codes = c.u16(&format!("{base}.codes"), &shape)?;
            let alpha = c.f64(&format!("{base}.alpha"), &groups)?;
            let beta = c.i32(&format!("{base}.beta"), &groups)?;
            names.extend(["codes", "alpha", "beta"].map(|s| format!("{base}.{s}")));
            let params = QuantParams {
                bits: header.w_bits,
                granularity: Granularity::PerChannel,
                alpha,
                beta: beta.into_iter().map(i64::from).collect(),
            };
            params.validate().map_err(|e| Error::checkpoint(path, format!("{base}: {e}")))?;
            let qw = QuantizedWeight {
                codes: IntTensor::new(&shape, codes)?,
                params,
            };
            qw.dequantize().map_err(|e| Error::checkpoint(path, format!("{base}: {e}")))?;
            weights.push(qw);
        }
        blocks.push(QuantizedBlock {
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            weights,
            plans,
        });
    }
    c.expect_exactly(&names)?;
    let q = QuantizedModel {
        config: cfg,
        w_bits: header.w_bits,
        a_bits: header.a_bits,
        blocks,
    };
    q.validate().map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_synthetic_model, prepare_model, run_blocks, Mode, OutlierSpec};
    use crate::rng::{gaussian_matrix, seeded};

    #[test]
    fn quantized_forward_matches_quantsim_and_round_trips() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            seq_len: 6,
        };
        let model = gen_synthetic_model(&cfg, 5, &OutlierSpec::default_for(8)).unwrap();
        let mode = Mode::QuantSim { w_bits: 4, a_bits: 6 };
        let prepared = prepare_model(&model, mode, None).unwrap();
        let q = QuantizedModel::from_prepared(&cfg, &prepared, 4, 6).unwrap();
        let x = gaussian_matrix(&mut seeded(1), 6, 8, 1.0);
        assert_eq!(q.forward(&x).unwrap(), run_blocks(&prepared, &x, None).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.json");
        save_quantized(&q, &p).unwrap();
        assert_eq!(load_quantized(&p).unwrap(), q);
    }
}
