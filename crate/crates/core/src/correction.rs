//! Low-rank error correction: adapters `A·B` on every projection, trained
//! group by group against full-precision block outputs, then merged as
//! `quant(W + A·B)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prepare_model, run_blocks, AdapterVars, BlockPlans, Mode, Model, ModelConfig, PreparedBlock, Projection};
use crate::quant::{compute_quant_params, fake_quant, quantize, Granularity, IntTensor, QuantParams};
use crate::rng::{derive, gaussian_matrix};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};

/// Std of the Gaussian initialization of `A`; `B` starts at zero.
pub const ADAPTER_INIT_STD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    /// `[in x r]`
    pub a: Tensor,
    /// `[r x out]`
    pub b: Tensor,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn zeros(d_in: usize, d_out: usize, rank: usize) -> Self {
        Self {
            a: Tensor::zeros(&[d_in, rank]),
            b: Tensor::zeros(&[rank, d_out]),
        }
    }

    pub fn product(&self) -> Result<Tensor> {
        self.a.matmul(&self.b)
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub rank: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            epochs: 10,
            batch_size: 1,
            lr: 5e-4,
            group_size: 4,
            seed: 0,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.epochs == 0 || self.batch_size == 0 || self.group_size == 0 {
            return Err(Error::Config(format!("correction settings must be positive: {self:?}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionTrace {
    pub group: usize,
    pub first_block: usize,
    pub n_blocks: usize,
    /// Mean loss over the calibration samples with fresh adapters.
    pub initial_loss: f64,
    /// Mean loss over the calibration samples after training.
    pub final_loss: f64,
    /// Batch loss recorded before each optimizer step.
    pub step_losses: Vec<f64>,
    /// `false` flags a group whose final loss did not drop below the initial one.
    pub improved: bool,
}

/// Input/output widths of each projection, in [`Projection::ALL`] order.
pub fn projection_dims(cfg: &ModelConfig) -> [(usize, usize); 7] {
    let (m, f) = (cfg.d_model, cfg.d_ff);
    Projection::ALL.map(|p| match p {
        Projection::Gate | Projection::Up => (m, f),
        Projection::Down => (f, m),
        _ => (m, m),
    })
}

/// One adapter per projection per layer; `A` is seeded Gaussian, `B` zero.
pub fn attach_adapters(cfg: &ModelConfig, rank: usize, seed: u64) -> Result<Vec<Vec<LowRankAdapter>>> {
    let dims = projection_dims(cfg);
    if let Some(&(i, o)) = dims.iter().find(|&&(i, o)| rank == 0 || rank > i.min(o)) {
        return Err(Error::Config(format!("adapter rank {rank} invalid for a {i}x{o} projection")));
    }
    Ok((0..cfg.n_layers)
        .map(|layer| {
            let mut rng = derive(seed, 0x4144_0000 + layer as u64);
            dims.iter()
                .map(|&(i, o)| LowRankAdapter {
                    a: gaussian_matrix(&mut rng, i, rank, ADAPTER_INIT_STD),
                    b: Tensor::zeros(&[rank, o]),
                })
                .collect()
        })
        .collect())
}

/// Mean-squared reconstruction loss of one sample through `blocks`, recorded
/// on `tape` with the adapters as trainable leaves.
fn record_group(
    tape: &mut Tape,
    blocks: &[PreparedBlock],
    adapters: &[Vec<LowRankAdapter>],
    input: &Tensor,
    target: &Tensor,
) -> Result<(crate::tensor::Var, Vec<Vec<AdapterVars>>)> {
    let mut h = tape.constant(input.clone());
    let mut vars = Vec::with_capacity(blocks.len());
    for (b, ad) in blocks.iter().zip(adapters) {
        let av = AdapterVars::params(tape, ad);
        h = b.forward_tape(tape, h, Some(&av))?;
        vars.push(av);
    }
    let t = tape.constant(target.clone());
    Ok((tape.mse(h, t)?, vars))
}

/// Loss of one sample and the gradient of every adapter factor, flattened as
/// `[A_0, B_0, A_1, B_1, ...]` over blocks then projections.
pub fn group_loss_and_grads(
    blocks: &[PreparedBlock],
    adapters: &[Vec<LowRankAdapter>],
    input: &Tensor,
    target: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (loss, vars) = record_group(&mut tape, blocks, adapters, input, target)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (block_vars, block_ads) in vars.iter().zip(adapters) {
        for (v, ad) in block_vars.iter().zip(block_ads) {
            out.push(grads.take(v.a).unwrap_or_else(|| Tensor::zeros(ad.a.shape())));
            out.push(grads.take(v.b).unwrap_or_else(|| Tensor::zeros(ad.b.shape())));
        }
    }
    Ok((value, out))
}

fn group_loss(blocks: &[PreparedBlock], adapters: &[Vec<LowRankAdapter>], input: &Tensor, target: &Tensor) -> Result<f64> {
    let mut h = input.clone();
    for (b, ad) in blocks.iter().zip(adapters) {
        h = b.forward(&h, Some(ad))?;
    }
    Ok(h.mean_sq_diff(target))
}

fn mean_loss(
    blocks: &[PreparedBlock],
    adapters: &[Vec<LowRankAdapter>],
    inputs: &[Tensor],
    targets: &[Tensor],
) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        total += group_loss(blocks, adapters, x, t)?;
    }
    Ok(total / inputs.len() as f64)
}

/// Trains the adapters of one group of blocks (weights frozen) so that the
/// quantized group applied to `q_inputs` reproduces `fp_targets`.
pub fn reconstruct_group(
    blocks: &[PreparedBlock],
    adapters: &mut [Vec<LowRankAdapter>],
    fp_targets: &[Tensor],
    q_inputs: &[Tensor],
    cfg: &CorrectionConfig,
    group: usize,
) -> Result<ReconstructionTrace> {
    cfg.validate()?;
    if blocks.len() != adapters.len() || blocks.is_empty() {
        return Err(Error::Contract(format!("{} blocks, {} adapter sets", blocks.len(), adapters.len())));
    }
    if q_inputs.is_empty() || q_inputs.len() != fp_targets.len() {
        return Err(Error::Contract("inputs and targets must pair up and be nonempty".into()));
    }
    let n = q_inputs.len();
    let initial_loss = mean_loss(blocks, adapters, q_inputs, fp_targets)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { group, step: 0 });
    }

    let batches: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(cfg.batch_size)
        .map(|s| s..(s + cfg.batch_size).min(n))
        .collect();
    let total_steps = cfg.epochs * batches.len();
    let mut params: Vec<Tensor> = adapters
        .iter()
        .flat_map(|ads| ads.iter().flat_map(|ad| [ad.a.clone(), ad.b.clone()]))
        .collect();
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.lr, total_steps),
        &params.iter().collect::<Vec<_>>(),
    );
    let mut step_losses = Vec::with_capacity(total_steps);

    for _ in 0..cfg.epochs {
        for batch in &batches {
            let mut loss = 0.0;
            let mut acc: Option<Vec<Tensor>> = None;
            for i in batch.clone() {
                let (l, g) = group_loss_and_grads(blocks, adapters, &q_inputs[i], &fp_targets[i])?;
                loss += l;
                acc = Some(match acc {
                    None => g,
                    Some(a) => a.iter().zip(&g).map(|(x, y)| x.add(y)).collect::<Result<_>>()?,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    group,
                    step: step_losses.len(),
                });
            }
            step_losses.push(loss);
            let grads: Vec<Tensor> = acc.expect("nonempty batch").iter().map(|g| g.scale(scale)).collect();
            opt.step(
                &mut params.iter_mut().collect::<Vec<_>>(),
                &grads.iter().collect::<Vec<_>>(),
            )?;
            let mut it = params.iter();
            for ad in adapters.iter_mut().flatten() {
                ad.a = it.next().expect("A").clone();
                ad.b = it.next().expect("B").clone();
            }
        }
    }

    let final_loss = mean_loss(blocks, adapters, q_inputs, fp_targets)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            group,
            step: total_steps,
        });
    }
    Ok(ReconstructionTrace {
        group,
        first_block: 0,
        n_blocks: blocks.len(),
        initial_loss,
        final_loss,
        step_losses,
        improved: final_loss < initial_loss,
    })
}

/// `quant(W + A·B)` with per-output-channel parameters.
pub fn merge_adapters(
    w: &Tensor,
    adapter: &LowRankAdapter,
    granularity: Granularity,
    bits: u32,
) -> Result<(IntTensor, QuantParams)> {
    let merged = w.add(&adapter.product()?)?;
    let params = compute_quant_params(&merged, bits, granularity)?;
    Ok((quantize(&merged, &params)?, params))
}

/// The block with `W + A·B` folded into its full-precision reassembled
/// weights and re-quantized; the adapters are no longer needed.
pub fn merge_block(block: &PreparedBlock, adapters: &[LowRankAdapter]) -> Result<PreparedBlock> {
    if adapters.len() != block.reassembled.len() {
        return Err(Error::Contract("one adapter per projection expected".into()));
    }
    let reassembled = block
        .reassembled
        .iter()
        .zip(adapters)
        .map(|(w, ad)| w.add(&ad.product()?))
        .collect::<Result<Vec<_>>>()?;
    let effective = match block.w_bits {
        Some(b) => reassembled
            .iter()
            .map(|w| fake_quant(w, b, Granularity::PerChannel))
            .collect::<Result<Vec<_>>>()?,
        None => reassembled.clone(),
    };
    Ok(PreparedBlock {
        reassembled,
        effective,
        ..block.clone()
    })
}

#[derive(Clone, Debug)]
pub struct CorrectionOutcome {
    pub adapters: Vec<Vec<LowRankAdapter>>,
    pub traces: Vec<ReconstructionTrace>,
    /// Quantized blocks with adapters merged, ready for deployment.
    pub merged: Vec<PreparedBlock>,
}

impl CorrectionOutcome {
    pub fn trainable_params(&self) -> usize {
        self.adapters.iter().flatten().map(LowRankAdapter::param_count).sum()
    }
}

/// Corrects groups of `group_size` blocks front to back. Targets come from
/// the original full-precision model; each group's inputs are produced by
/// the already corrected and merged predecessors.
pub fn sequential_correct(
    model: &Model,
    plans: &[BlockPlans],
    calib: &[Tensor],
    mode: Mode,
    cfg: &CorrectionConfig,
) -> Result<CorrectionOutcome> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let fp_blocks = prepare_model(model, Mode::Fp, None)?;
    let q_blocks = prepare_model(model, mode, Some(plans))?;
    let mut adapters = attach_adapters(&model.config, cfg.rank, cfg.seed)?;
    let mut fp_states: Vec<Tensor> = calib.to_vec();
    let mut q_states: Vec<Tensor> = calib.to_vec();
    let mut traces = Vec::new();
    let mut merged = Vec::with_capacity(q_blocks.len());

    for (group, start) in (0..q_blocks.len()).step_by(cfg.group_size).enumerate() {
        let end = (start + cfg.group_size).min(q_blocks.len());
        let targets = fp_states
            .iter()
            .map(|x| run_blocks(&fp_blocks[start..end], x, None))
            .collect::<Result<Vec<_>>>()?;
        let mut trace = reconstruct_group(
            &q_blocks[start..end],
            &mut adapters[start..end],
            &targets,
            &q_states,
            cfg,
            group,
        )?;
        trace.first_block = start;
        traces.push(trace);
        let group_merged = q_blocks[start..end]
            .iter()
            .zip(&adapters[start..end])
            .map(|(b, a)| merge_block(b, a))
            .collect::<Result<Vec<_>>>()?;
        q_states = q_states
            .iter()
            .map(|x| run_blocks(&group_merged, x, None))
            .collect::<Result<Vec<_>>>()?;
        merged.extend(group_merged);
        fp_states = targets;
    }
    Ok(CorrectionOutcome {
        adapters,
        traces,
        merged,
    })
}

/// Stores adapters as 64-bit tensors `layers.{i}.{projection}.a|b`.
pub fn save_adapters(adapters: &[Vec<LowRankAdapter>], path: &std::path::Path) -> Result<()> {
    let mut w = crate::model::ContainerWriter::default();
    for (i, layer) in adapters.iter().enumerate() {
        for (p, ad) in Projection::ALL.iter().zip(layer) {
            w.f64(format!("layers.{i}.{}.a", p.name()), ad.a.shape(), ad.a.data());
            w.f64(format!("layers.{i}.{}.b", p.name()), ad.b.shape(), ad.b.data());
        }
    }
    let header = serde_json::json!({ "n_layers": adapters.len() });
    w.write(path, "adapters", header, serde_json::Value::Null)
}

pub fn load_adapters(path: &std::path::Path, cfg: &ModelConfig, rank: usize) -> Result<Vec<Vec<LowRankAdapter>>> {
    let c = crate::model::Container::read(path, "adapters")?;
    let dims = projection_dims(cfg);
    let mut names = Vec::new();
    let mut out = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut layer = Vec::with_capacity(7);
        for (p, &(d_in, d_out)) in Projection::ALL.iter().zip(&dims) {
            let na = format!("layers.{i}.{}.a", p.name());
            let nb = format!("layers.{i}.{}.b", p.name());
            let a = Tensor::new(&[d_in, rank], c.f64(&na, &[d_in, rank])?)?;
            let b = Tensor::new(&[rank, d_out], c.f64(&nb, &[rank, d_out])?)?;
            names.extend([na, nb]);
            layer.push(LowRankAdapter { a, b });
        }
        out.push(layer);
    }
    c.expect_exactly(&names)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_synthetic_model, OutlierSpec};
    use crate::rng::seeded;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            seq_len: 6,
        }
    }

    #[test]
    fn adapters_structure() {
        let cfg = small();
        let ads = attach_adapters(&cfg, 2, 1).unwrap();
        assert_eq!(ads.iter().flatten().count(), 7 * cfg.n_layers);
        assert!(ads.iter().flatten().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
        let params: usize = ads.iter().flatten().map(LowRankAdapter::param_count).sum();
        let expected: usize = projection_dims(&cfg).iter().map(|(i, o)| 2 * (i + o)).sum::<usize>() * 2;
        assert_eq!(params, expected);
        assert!(attach_adapters(&cfg, 9, 1).is_err());
        assert!(attach_adapters(&cfg, 0, 1).is_err());
    }

    #[test]
    fn zero_adapter_merge_equals_plain_quantization() {
        let w = gaussian_matrix(&mut seeded(3), 6, 5, 1.0);
        let mut ad = LowRankAdapter::zeros(6, 5, 2);
        ad.a = gaussian_matrix(&mut seeded(4), 6, 2, 1.0);
        let (codes, params) = merge_adapters(&w, &ad, Granularity::PerChannel, 4).unwrap();
        let p = compute_quant_params(&w, 4, Granularity::PerChannel).unwrap();
        assert_eq!(params, p);
        assert_eq!(codes, quantize(&w, &p).unwrap());
    }

    #[test]
    fn fp_passthrough_is_a_fixpoint() {
        let cfg = small();
        let model = gen_synthetic_model(&cfg, 2, &OutlierSpec::none()).unwrap();
        let blocks = prepare_model(&model, Mode::Fp, None).unwrap();
        let x: Vec<Tensor> = (0..2).map(|i| gaussian_matrix(&mut seeded(i), 6, 8, 1.0)).collect();
        let targets: Vec<Tensor> = x.iter().map(|s| run_blocks(&blocks, s, None).unwrap()).collect();
        let mut ads = attach_adapters(&cfg, 2, 1).unwrap();
        let before = ads.clone();
        let ccfg = CorrectionConfig {
            rank: 2,
            epochs: 2,
            ..CorrectionConfig::default()
        };
        let trace = reconstruct_group(&blocks, &mut ads, &targets, &x, &ccfg, 0).unwrap();
        assert!(trace.initial_loss < 1e-20);
        for (a, b) in ads.iter().flatten().zip(before.iter().flatten()) {
            assert!(a.b.max_abs() < 1e-12 && a.a.max_abs_diff(&b.a) < 1e-6);
        }
    }

    #[test]
    fn adapters_round_trip() {
        let cfg = small();
        let mut ads = attach_adapters(&cfg, 2, 5).unwrap();
        ads[1][3].b = gaussian_matrix(&mut seeded(6), 2, 8, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ad.json");
        save_adapters(&ads, &p).unwrap();
        assert_eq!(load_adapters(&p, &cfg, 2).unwrap(), ads);
        assert!(load_adapters(&p, &cfg, 3).is_err());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = small();
        let model = gen_synthetic_model(&cfg, 2, &OutlierSpec::none()).unwrap();
        let blocks = prepare_model(&model, Mode::Fp, None).unwrap();
        let mut ads = attach_adapters(&cfg, 2, 1).unwrap();
        let x = vec![Tensor::zeros(&[6, 8])];
        assert!(reconstruct_group(&blocks, &mut ads, &[], &x, &CorrectionConfig::default(), 0).is_err());
        assert!(reconstruct_group(&blocks[..1], &mut ads, &x, &x, &CorrectionConfig::default(), 0).is_err());
    }
}
