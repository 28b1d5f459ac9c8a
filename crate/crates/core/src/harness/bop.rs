//! Bit-operation counts: `2 · MACs · b_w · b_a` for weight matmuls and
//! `2 · MACs · b_a · b_a` for the attention score and value products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDims {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Output head width, if the model has one.
    pub vocab: Option<usize>,
}

impl ArchDims {
    pub fn llama_7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            d_ff: 11008,
            vocab: Some(32000),
        }
    }
}

impl From<&ModelConfig> for ArchDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BopCount {
    pub weight_bops: f64,
    pub attention_bops: f64,
    /// Scaling and averaging work of runtime reassembly, kept out of `total`.
    pub reassembly_overhead: f64,
    pub total: f64,
}

/// Counts for a sequence of `seq_len` tokens. `extra_channels` is the number
/// of sub-channels created (and merged away) across all layers.
pub fn bop_count(arch: &ArchDims, seq_len: usize, w_bits: u32, a_bits: u32, extra_channels: usize) -> Result<BopCount> {
    if arch.n_layers == 0 || arch.d_model == 0 || arch.d_ff == 0 || seq_len == 0 || w_bits == 0 || a_bits == 0 {
        return Err(Error::Contract("bop_count needs positive dimensions".into()));
    }
    let (l, d, f) = (seq_len as f64, arch.d_model as f64, arch.d_ff as f64);
    let (bw, ba) = (w_bits as f64, a_bits as f64);
    let per_layer_weight_macs = l * (4.0 * d * d + 3.0 * d * f);
    let head_macs = arch.vocab.map_or(0.0, |v| l * d * v as f64);
    let weight_macs = arch.n_layers as f64 * per_layer_weight_macs + head_macs;
    let attention_macs = arch.n_layers as f64 * 2.0 * l * l * d;
    let weight_bops = 2.0 * weight_macs * bw * ba;
    let attention_bops = 2.0 * attention_macs * ba * ba;
    Ok(BopCount {
        weight_bops,
        attention_bops,
        reassembly_overhead: 2.0 * l * extra_channels as f64 * ba * ba,
        total: weight_bops + attention_bops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_fp16_total() {
        let c = bop_count(&ArchDims::llama_7b(), 256, 16, 16, 0).unwrap();
        assert!((c.total / 875.52e12 - 1.0).abs() < 0.02, "{}", c.total);
    }

    #[test]
    fn weight_part_is_bilinear() {
        let a = ArchDims::from(&ModelConfig::default());
        let full = bop_count(&a, 64, 8, 8, 0).unwrap();
        let half = bop_count(&a, 64, 4, 4, 0).unwrap();
        assert_eq!(half.weight_bops * 4.0, full.weight_bops);
        let w2 = bop_count(&a, 64, 16, 8, 0).unwrap();
        assert_eq!(w2.weight_bops, 2.0 * full.weight_bops);
    }

    #[test]
    fn toy_matches_enumeration() {
        let cfg = ModelConfig::default();
        let (l, m, f) = (64.0, 32.0, 86.0);
        let mut macs = 0.0;
        for _ in 0..cfg.n_layers {
            for (i, o) in [(m, m), (m, m), (m, m), (m, m), (m, f), (m, f), (f, m)] {
                macs += l * i * o;
            }
        }
        let c = bop_count(&ArchDims::from(&cfg), 64, 4, 4, 3).unwrap();
        assert_eq!(c.weight_bops, 2.0 * macs * 16.0);
        let heads = cfg.n_heads as f64;
        let d_head = m / heads;
        let att: f64 = cfg.n_layers as f64 * heads * 2.0 * l * l * d_head;
        assert_eq!(c.attention_bops, 2.0 * att * 16.0);
        assert_eq!(c.reassembly_overhead, 2.0 * 64.0 * 3.0 * 16.0);
    }
}
