//! Toy pre-norm Attention-FFN transformer: features in, features out.

mod checkpoint;
mod quantized;

pub(crate) use checkpoint::{Container, ContainerWriter};
pub use checkpoint::{
    load_calibration, load_checkpoint, save_calibration, save_checkpoint, Dtype, Manifest, TensorEntry,
    FORMAT_VERSION,
};
pub use quantized::{load_quantized, save_quantized, QuantizedBlock, QuantizedModel, QuantizedWeight};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::causal_attention;
use crate::correction::LowRankAdapter;
use crate::error::{Error, Result};
use crate::quant::{check_bits, fake_quant, Granularity};
use crate::reassembly::{reassemble_weights, ReassemblyPlan, Site};
use crate::rng::{derive, gaussian_matrix, to_f32_precision};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 86,
            n_layers: 8,
            seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The seven projections of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "w_q",
            Projection::K => "w_k",
            Projection::V => "w_v",
            Projection::O => "w_o",
            Projection::Gate => "w_gate",
            Projection::Up => "w_up",
            Projection::Down => "w_down",
        }
    }

    /// Reassembly site feeding this projection; `None` for the attention output.
    pub fn site(self) -> Option<Site> {
        match self {
            Projection::Q | Projection::K | Projection::V => Some(Site::Qkv),
            Projection::O => None,
            Projection::Gate | Projection::Up => Some(Site::GateUp),
            Projection::Down => Some(Site::Down),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Weights are stored `[in x out]` so a layer computes `X · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl BlockWeights {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::O => &self.w_o,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Q => &mut self.w_q,
            Projection::K => &mut self.w_k,
            Projection::V => &mut self.w_v,
            Projection::O => &mut self.w_o,
            Projection::Gate => &mut self.w_gate,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }

    /// `(name, tensor)` in checkpoint order.
    pub fn named(&self) -> [(&'static str, &Tensor); 11] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (m, f) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_gain: Tensor::zeros(&[m]),
            ln1_bias: Tensor::zeros(&[m]),
            w_q: Tensor::zeros(&[m, m]),
            w_k: Tensor::zeros(&[m, m]),
            w_v: Tensor::zeros(&[m, m]),
            w_o: Tensor::zeros(&[m, m]),
            ln2_gain: Tensor::zeros(&[m]),
            ln2_bias: Tensor::zeros(&[m]),
            w_gate: Tensor::zeros(&[m, f]),
            w_up: Tensor::zeros(&[m, f]),
            w_down: Tensor::zeros(&[f, m]),
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(cfg);
        for ((name, t), (_, r)) in self.named().iter().zip(reference.named().iter()) {
            if t.shape() != r.shape() {
                return Err(Error::shape(
                    "block weights",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), r.shape()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<BlockWeights>,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_layers {
            return Err(Error::shape(
                "model",
                format!("{} blocks for n_layers {}", self.blocks.len(), self.config.n_layers),
            ));
        }
        self.blocks.iter().try_for_each(|b| b.check(&self.config))
    }
}

/// Channels whose LayerNorm gains are scaled up by `magnification`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub channels: Vec<usize>,
    pub magnification: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self::default_for(ModelConfig::default().d_model)
    }
}

impl OutlierSpec {
    /// One channel at `d_model / 6`, magnified 50×.
    pub fn default_for(d_model: usize) -> Self {
        Self {
            channels: vec![d_model / 6],
            magnification: 50.0,
        }
    }

    pub fn none() -> Self {
        Self {
            channels: Vec::new(),
            magnification: 1.0,
        }
    }
}

/// Gaussian weights with std `1/sqrt(fan_in)`, unit LayerNorm gains except at
/// the outlier channels, small LayerNorm biases. Values are rounded to 32-bit
/// precision so a checkpoint round trip is exact.
pub fn gen_synthetic_model(config: &ModelConfig, seed: u64, outliers: &OutlierSpec) -> Result<Model> {
    config.validate()?;
    if let Some(&c) = outliers.channels.iter().find(|&&c| c >= config.d_model) {
        return Err(Error::Config(format!("outlier channel {c} >= d_model {}", config.d_model)));
    }
    if !(outliers.magnification > 0.0 && outliers.magnification.is_finite()) {
        return Err(Error::Config(format!("bad magnification {}", outliers.magnification)));
    }
    let (m, f) = (config.d_model, config.d_ff);
    let blocks = (0..config.n_layers)
        .map(|layer| {
            let mut rng = derive(seed, layer as u64);
            let gain = || {
                let mut g = vec![1.0; m];
                for &c in &outliers.channels {
                    g[c] *= outliers.magnification;
                }
                Tensor::from_parts(vec![m], g)
            };
            let bias = |rng: &mut _| gaussian_matrix(rng, 1, m, 0.02).reshape(&[m]);
            let sm = 1.0 / (m as f64).sqrt();
            let sf = 1.0 / (f as f64).sqrt();
            let block = BlockWeights {
                ln1_gain: gain(),
                ln1_bias: bias(&mut rng)?,
                w_q: gaussian_matrix(&mut rng, m, m, sm),
                w_k: gaussian_matrix(&mut rng, m, m, sm),
                w_v: gaussian_matrix(&mut rng, m, m, sm),
                w_o: gaussian_matrix(&mut rng, m, m, sm),
                ln2_gain: gain(),
                ln2_bias: bias(&mut rng)?,
                w_gate: gaussian_matrix(&mut rng, m, f, sm),
                w_up: gaussian_matrix(&mut rng, m, f, sm),
                w_down: gaussian_matrix(&mut rng, f, m, sf),
            };
            Ok(round_block(block))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config: config.clone(),
        blocks,
    })
}

fn round_block(b: BlockWeights) -> BlockWeights {
    BlockWeights {
        ln1_gain: to_f32_precision(&b.ln1_gain),
        ln1_bias: to_f32_precision(&b.ln1_bias),
        w_q: to_f32_precision(&b.w_q),
        w_k: to_f32_precision(&b.w_k),
        w_v: to_f32_precision(&b.w_v),
        w_o: to_f32_precision(&b.w_o),
        ln2_gain: to_f32_precision(&b.ln2_gain),
        ln2_bias: to_f32_precision(&b.ln2_bias),
        w_gate: to_f32_precision(&b.w_gate),
        w_up: to_f32_precision(&b.w_up),
        w_down: to_f32_precision(&b.w_down),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub samples: Vec<Tensor>,
    pub seed: u64,
    /// Outliers of the model this set was drawn for, if recorded.
    pub outliers: Option<OutlierSpec>,
}

/// Standard-normal `[L x M]` token features, rounded to 32-bit precision.
pub fn gen_calibration(config: &ModelConfig, seed: u64, n_samples: usize) -> Result<CalibrationSet> {
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::Empty("calibration set"));
    }
    let samples = (0..n_samples)
        .map(|i| {
            let mut rng = derive(seed ^ 0x9e37_79b9_7f4a_7c15, i as u64);
            to_f32_precision(&gaussian_matrix(&mut rng, config.seq_len, config.d_model, 1.0))
        })
        .collect();
    Ok(CalibrationSet {
        samples,
        seed,
        outliers: None,
    })
}

/// One plan per reassembly site; identity where a site is out of scope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPlans {
    pub qkv: Arc<ReassemblyPlan>,
    pub gate_up: Arc<ReassemblyPlan>,
    pub down: Arc<ReassemblyPlan>,
}

impl BlockPlans {
    pub fn identity(cfg: &ModelConfig) -> Self {
        Self {
            qkv: Arc::new(ReassemblyPlan::identity(cfg.d_model)),
            gate_up: Arc::new(ReassemblyPlan::identity(cfg.d_model)),
            down: Arc::new(ReassemblyPlan::identity(cfg.d_ff)),
        }
    }

    pub fn site(&self, site: Site) -> &Arc<ReassemblyPlan> {
        match site {
            Site::Qkv => &self.qkv,
            Site::GateUp => &self.gate_up,
            Site::Down => &self.down,
        }
    }

    pub fn site_mut(&mut self, site: Site) -> &mut Arc<ReassemblyPlan> {
        match site {
            Site::Qkv => &mut self.qkv,
            Site::GateUp => &mut self.gate_up,
            Site::Down => &mut self.down,
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for (site, want) in [(Site::Qkv, cfg.d_model), (Site::GateUp, cfg.d_model), (Site::Down, cfg.d_ff)] {
            let plan = self.site(site);
            plan.validate()?;
            if plan.channels() != want {
                return Err(Error::Plan(format!(
                    "{} plan covers {} channels, expected {want}",
                    site.name(),
                    plan.channels()
                )));
            }
        }
        Ok(())
    }

    pub fn extra_channels(&self) -> usize {
        Site::ALL.iter().map(|&s| self.site(s).extra_channels()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mode {
    Fp,
    /// Per-channel weight and per-token activation fake quantization.
    QuantSim { w_bits: u32, a_bits: u32 },
}

impl Mode {
    pub fn validate(&self) -> Result<()> {
        if let Mode::QuantSim { w_bits, a_bits } = *self {
            check_bits(w_bits)?;
            check_bits(a_bits)?;
        }
        Ok(())
    }

    fn a_bits(&self) -> Option<u32> {
        match *self {
            Mode::Fp => None,
            Mode::QuantSim { a_bits, .. } => Some(a_bits),
        }
    }

    fn w_bits(&self) -> Option<u32> {
        match *self {
            Mode::Fp => None,
            Mode::QuantSim { w_bits, .. } => Some(w_bits),
        }
    }
}

/// A block with its consumer weights already reassembled and (in quantsim
/// mode) fake-quantized, ready for repeated forward passes.
#[derive(Clone, Debug)]
pub struct PreparedBlock {
    pub n_heads: usize,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// Reassembled full-precision weights, indexed by [`Projection::index`].
    pub reassembled: Vec<Tensor>,
    /// Weights used in the forward pass.
    pub effective: Vec<Tensor>,
    pub plans: BlockPlans,
    pub a_bits: Option<u32>,
    pub w_bits: Option<u32>,
}

impl PreparedBlock {
    pub fn new(w: &BlockWeights, n_heads: usize, mode: Mode, plans: &BlockPlans) -> Result<Self> {
        mode.validate()?;
        let reassembled = Projection::ALL
            .iter()
            .map(|&p| match p.site() {
                Some(site) => reassemble_weights(w.projection(p), plans.site(site)),
                None => Ok(w.projection(p).clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_reassembled(w, n_heads, mode, plans, reassembled)
    }

    /// Builds from given reassembled weights (e.g. with adapters merged in).
    pub fn from_reassembled(
        w: &BlockWeights,
        n_heads: usize,
        mode: Mode,
        plans: &BlockPlans,
        reassembled: Vec<Tensor>,
    ) -> Result<Self> {
        let effective = match mode.w_bits() {
            Some(b) => reassembled
                .iter()
                .map(|t| fake_quant(t, b, Granularity::PerChannel))
                .collect::<Result<Vec<_>>>()?,
            None => reassembled.clone(),
        };
        Ok(Self {
            n_heads,
            ln1_gain: w.ln1_gain.clone(),
            ln1_bias: w.ln1_bias.clone(),
            ln2_gain: w.ln2_gain.clone(),
            ln2_bias: w.ln2_bias.clone(),
            reassembled,
            effective,
            plans: plans.clone(),
            a_bits: mode.a_bits(),
            w_bits: mode.w_bits(),
        })
    }

    fn site_input(&self, tape: &mut Tape, x: Var, site: Option<Site>) -> Result<Var> {
        let x = match site {
            Some(s) if !self.plans.site(s).is_identity() => {
                let plan: Arc<ReassemblyPlan> = Arc::clone(self.plans.site(s));
                tape.column_map(x, plan)?
            }
            _ => x,
        };
        match self.a_bits {
            Some(b) => tape.fake_quant(x, b, Granularity::PerToken),
            None => Ok(x),
        }
    }

    fn project(&self, tape: &mut Tape, x: Var, p: Projection, adapters: Option<&[AdapterVars]>) -> Result<Var> {
        let w = tape.constant(self.effective[p.index()].clone());
        let y = tape.matmul(x, w)?;
        match adapters {
            Some(a) => {
                let xa = tape.matmul(x, a[p.index()].a)?;
                let xab = tape.matmul(xa, a[p.index()].b)?;
                tape.add(y, xab)
            }
            None => Ok(y),
        }
    }

    /// Records the block on `tape`. `adapters`, when given, holds one entry
    /// per projection in [`Projection::ALL`] order.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, adapters: Option<&[AdapterVars]>) -> Result<Var> {
        Ok(self.forward_tape_capture(tape, x, adapters)?.0)
    }

    /// Like [`Self::forward_tape`], also returning the inputs of the three
    /// reassembly sites before any plan or quantization is applied.
    pub fn forward_tape_capture(
        &self,
        tape: &mut Tape,
        x: Var,
        adapters: Option<&[AdapterVars]>,
    ) -> Result<(Var, [Var; 3])> {
        if let Some(a) = adapters {
            if a.len() != Projection::ALL.len() {
                return Err(Error::Contract(format!("{} adapters for 7 projections", a.len())));
            }
        }
        let g1 = tape.constant(self.ln1_gain.clone());
        let b1 = tape.constant(self.ln1_bias.clone());
        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let hq = self.site_input(tape, h, Some(Site::Qkv))?;
        let q = self.project(tape, hq, Projection::Q, adapters)?;
        let k = self.project(tape, hq, Projection::K, adapters)?;
        let v = self.project(tape, hq, Projection::V, adapters)?;
        let att = causal_attention(tape, q, k, v, self.n_heads)?;
        let att = self.site_input(tape, att, None)?;
        let o = self.project(tape, att, Projection::O, adapters)?;
        let x1 = tape.add(x, o)?;

        let g2 = tape.constant(self.ln2_gain.clone());
        let b2 = tape.constant(self.ln2_bias.clone());
        let h2 = tape.layer_norm(x1, g2, b2, LAYER_NORM_EPS)?;
        let h2q = self.site_input(tape, h2, Some(Site::GateUp))?;
        let gate = self.project(tape, h2q, Projection::Gate, adapters)?;
        let up = self.project(tape, h2q, Projection::Up, adapters)?;
        let act = tape.silu(gate);
        let mid = tape.mul(act, up)?;
        let midq = self.site_input(tape, mid, Some(Site::Down))?;
        let down = self.project(tape, midq, Projection::Down, adapters)?;
        Ok((tape.add(x1, down)?, [h, h2, mid]))
    }

    /// Output plus the site inputs in [`Site::ALL`] order.
    pub fn forward_capture(&self, x: &Tensor) -> Result<(Tensor, [Tensor; 3])> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, sites) = self.forward_tape_capture(&mut tape, xv, None)?;
        Ok((tape.value(out).clone(), sites.map(|v| tape.value(v).clone())))
    }

    pub fn forward(&self, x: &Tensor, adapters: Option<&[LowRankAdapter]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = adapters.map(|a| AdapterVars::constants(&mut tape, a));
        let out = self.forward_tape(&mut tape, xv, vars.as_deref())?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles of one adapter's factors.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
}

impl AdapterVars {
    pub fn constants(tape: &mut Tape, adapters: &[LowRankAdapter]) -> Vec<AdapterVars> {
        adapters
            .iter()
            .map(|ad| AdapterVars {
                a: tape.constant(ad.a.clone()),
                b: tape.constant(ad.b.clone()),
            })
            .collect()
    }

    pub fn params(tape: &mut Tape, adapters: &[LowRankAdapter]) -> Vec<AdapterVars> {
        adapters
            .iter()
            .map(|ad| AdapterVars {
                a: tape.param(ad.a.clone()),
                b: tape.param(ad.b.clone()),
            })
            .collect()
    }
}

/// One Attention-FFN block. `plans` default to identity and `adapters` to none.
pub fn block_forward(
    x: &Tensor,
    w: &BlockWeights,
    n_heads: usize,
    mode: Mode,
    plans: Option<&BlockPlans>,
    adapters: Option<&[LowRankAdapter]>,
) -> Result<Tensor> {
    let identity;
    let plans = match plans {
        Some(p) => p,
        None => {
            identity = BlockPlans {
                qkv: Arc::new(ReassemblyPlan::identity(w.w_q.rows())),
                gate_up: Arc::new(ReassemblyPlan::identity(w.w_gate.rows())),
                down: Arc::new(ReassemblyPlan::identity(w.w_down.rows())),
            };
            &identity
        }
    };
    PreparedBlock::new(w, n_heads, mode, plans)?.forward(x, adapters)
}

/// Per-layer plans and adapters for [`model_forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardExtras<'a> {
    pub plans: Option<&'a [BlockPlans]>,
    pub adapters: Option<&'a [Vec<LowRankAdapter>]>,
}

pub fn prepare_model(model: &Model, mode: Mode, plans: Option<&[BlockPlans]>) -> Result<Vec<PreparedBlock>> {
    model.validate()?;
    if let Some(p) = plans {
        if p.len() != model.blocks.len() {
            return Err(Error::Plan(format!("{} plan sets for {} layers", p.len(), model.blocks.len())));
        }
    }
    let identity = BlockPlans::identity(&model.config);
    model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let plans = plans.map_or(&identity, |p| &p[i]);
            plans.check(&model.config)?;
            PreparedBlock::new(b, model.config.n_heads, mode, plans)
        })
        .collect()
}

/// Runs prepared blocks in order.
pub fn run_blocks(blocks: &[PreparedBlock], x: &Tensor, adapters: Option<&[Vec<LowRankAdapter>]>) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, b) in blocks.iter().enumerate() {
        h = b.forward(&h, adapters.map(|a| a[i].as_slice()))?;
    }
    Ok(h)
}

pub fn model_forward(x: &Tensor, model: &Model, mode: Mode, extras: ForwardExtras<'_>) -> Result<Tensor> {
    if x.cols() != model.config.d_model {
        return Err(Error::shape(
            "model_forward",
            format!("input has {} features, model expects {}", x.cols(), model.config.d_model),
        ));
    }
    if let Some(a) = extras.adapters {
        if a.len() != model.blocks.len() {
            return Err(Error::Contract(format!("{} adapter sets for {} layers", a.len(), model.blocks.len())));
        }
    }
    let blocks = prepare_model(model, mode, extras.plans)?;
    run_blocks(&blocks, x, extras.adapters)
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_are_a_pure_residual() {
        let cfg = small();
        let w = BlockWeights::zeros(&cfg);
        let x = gaussian_matrix(&mut seeded(1), 6, 8, 1.0);
        let y = block_forward(&x, &w, 2, Mode::Fp, None, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_layers_is_identity_and_one_layer_is_a_block() {
        let mut cfg = small();
        cfg.n_layers = 0;
        let empty = gen_synthetic_model(&cfg, 3, &OutlierSpec::none()).unwrap();
        let x = gaussian_matrix(&mut seeded(2), 6, 8, 1.0);
        assert_eq!(model_forward(&x, &empty, Mode::Fp, ForwardExtras::default()).unwrap(), x);

        cfg.n_layers = 1;
        let one = gen_synthetic_model(&cfg, 3, &OutlierSpec::none()).unwrap();
        let via_model = model_forward(&x, &one, Mode::Fp, ForwardExtras::default()).unwrap();
        let via_block = block_forward(&x, &one.blocks[0], 2, Mode::Fp, None, None).unwrap();
        assert_eq!(via_model, via_block);
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let cfg = small();
        let spec = OutlierSpec {
            channels: vec![1],
            magnification: 50.0,
        };
        let a = gen_synthetic_model(&cfg, 7, &spec).unwrap();
        assert_eq!(a, gen_synthetic_model(&cfg, 7, &spec).unwrap());
        assert_ne!(a, gen_synthetic_model(&cfg, 8, &spec).unwrap());
        assert_eq!(a.blocks[0].ln1_gain.data()[1], 50.0);
        let bad = OutlierSpec {
            channels: vec![8],
            magnification: 50.0,
        };
        assert!(gen_synthetic_model(&cfg, 7, &bad).is_err());
    }

    #[test]
    fn calibration_shapes_and_seeds() {
        let cfg = small();
        let c = gen_calibration(&cfg, 1, 3).unwrap();
        assert_eq!(c.samples.len(), 3);
        assert!(c.samples.iter().all(|s| s.shape() == [6, 8]));
        assert_eq!(c, gen_calibration(&cfg, 1, 3).unwrap());
        assert_ne!(c.samples[0], gen_calibration(&cfg, 2, 3).unwrap().samples[0]);
        assert!(gen_calibration(&cfg, 1, 0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cfg = small();
        let model = gen_synthetic_model(&cfg, 1, &OutlierSpec::none()).unwrap();
        let x = Tensor::zeros(&[6, 7]);
        assert!(matches!(
            model_forward(&x, &model, Mode::Fp, ForwardExtras::default()),
            Err(Error::Shape { .. })
        ));
    }
}
