//! WebAssembly bindings for the demo page in `www/`. Every export returns a
//! JSON string; failures come back as `{"error": "..."}`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use chanquant::harness::collect_site_acts;
use chanquant::model::{gen_calibration, gen_synthetic_model, Model, ModelConfig, OutlierSpec};
use chanquant::quant::{compute_quant_params, dequantize, quantize, Granularity};
use chanquant::reassembly::{
    adaptive_search, apply_plan_runtime, attention_reassembly_error, build_plan, channel_outlier_stats,
    linear_reassembly_error, Objective, PairDistances, QuantSetting, ReassemblyPlan, Site,
};
use chanquant::{Error, Result, Tensor};

const SAMPLES: usize = 4;

fn respond(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn parse_site(name: &str) -> Result<Site> {
    Site::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown site {name:?}")))
}

struct Layer {
    model: Model,
    acts: Vec<Tensor>,
}

impl Layer {
    fn new(seed: u64, magnification: f64, layer: usize, site: Site) -> Result<Self> {
        let config = ModelConfig::default();
        if layer >= config.n_layers {
            return Err(Error::Config(format!("layer {layer} >= {}", config.n_layers)));
        }
        let outliers = OutlierSpec {
            magnification,
            ..OutlierSpec::default_for(config.d_model)
        };
        let model = gen_synthetic_model(&config, seed, &outliers)?;
        let calib = gen_calibration(&config, seed.wrapping_add(1), SAMPLES)?;
        let mut sites = collect_site_acts(&model, &calib.samples)?.swap_remove(layer);
        let k = Site::ALL.iter().position(|&s| s == site).expect("site listed");
        let acts = std::mem::take(&mut sites[k]);
        Ok(Self { model, acts })
    }

    fn weights(&self, layer: usize, site: Site) -> Vec<&Tensor> {
        let b = &self.model.blocks[layer];
        match site {
            Site::Qkv => vec![&b.w_q, &b.w_k, &b.w_v],
            Site::GateUp => vec![&b.w_gate, &b.w_up],
            Site::Down => vec![&b.w_down],
        }
    }

    fn objective(&self, site: Site) -> Objective {
        match site {
            Site::Qkv => Objective::Attention {
                n_heads: self.model.config.n_heads,
            },
            _ => Objective::Linear,
        }
    }

    fn error(&self, ws: &[&Tensor], objective: Objective, plan: &ReassemblyPlan, quant: QuantSetting) -> Result<f64> {
        let mut total = 0.0;
        for x in &self.acts {
            total += match objective {
                Objective::Attention { n_heads } => {
                    attention_reassembly_error(x, ws[0], ws[1], ws[2], n_heads, plan, quant)?
                }
                Objective::Linear => linear_reassembly_error(x, ws, plan, quant)?,
            };
        }
        Ok(total)
    }
}

fn column_max_abs(acts: &[Tensor]) -> Vec<f64> {
    let cols = acts.first().map_or(0, Tensor::cols);
    (0..cols)
        .map(|c| acts.iter().flat_map(|x| x.column(c)).fold(0.0, |m, v| f64::max(m, v.abs())))
        .collect()
}

fn profile(seed: u64, magnification: f64, layer: usize, site: &str, theta_fraction: f64, bits: u32) -> Result<Value> {
    let site = parse_site(site)?;
    if !(theta_fraction > 0.0 && theta_fraction <= 1.0) {
        return Err(Error::Config("theta fraction must be in (0, 1]".into()));
    }
    let l = Layer::new(seed, magnification, layer, site)?;
    let ws = l.weights(layer, site);
    let stats = channel_outlier_stats(&l.acts)?;
    let top = stats.max_abs.iter().cloned().fold(0.0, f64::max);
    let theta = top * theta_fraction;
    let plan = build_plan(&stats, &PairDistances::new(&l.acts, &ws)?, theta)?;
    let after: Vec<Tensor> = l.acts.iter().map(|x| apply_plan_runtime(x, &plan)).collect::<Result<_>>()?;
    let quant = QuantSetting::new(bits, bits);
    let identity = ReassemblyPlan::identity(plan.channels());
    Ok(json!({
        "theta": theta,
        "before": column_max_abs(&l.acts),
        "after": column_max_abs(&after),
        "splits": plan.splits,
        "merge_pairs": plan.merge_pairs,
        "extra_channels": plan.extra_channels(),
        "error_identity": l.error(&ws, l.objective(site), &identity, quant)?,
        "error_plan": l.error(&ws, l.objective(site), &plan, quant)?,
    }))
}

fn sweep(seed: u64, magnification: f64, layer: usize, site: &str, bits: u32, grid_points: usize) -> Result<Value> {
    let site = parse_site(site)?;
    if grid_points > 200 {
        return Err(Error::Config("at most 200 grid points".into()));
    }
    let l = Layer::new(seed, magnification, layer, site)?;
    let ws = l.weights(layer, site);
    let stats = channel_outlier_stats(&l.acts)?;
    let quant = QuantSetting::new(bits, bits);
    let r = adaptive_search(&stats, &l.acts, &ws, grid_points, quant, l.objective(site))?;
    let identity = ReassemblyPlan::identity(stats.channels());
    Ok(json!({
        "theta": r.theta,
        "extra_channels": r.plan.extra_channels(),
        "points": r.evaluations.iter().map(|(t, e)| json!({ "theta": t, "error": e })).collect::<Vec<_>>(),
        "error_identity": l.error(&ws, l.objective(site), &identity, quant)?,
    }))
}

fn quantizer(values: &str, bits: u32) -> Result<Value> {
    let xs = values
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("not a number: {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::vector(xs)?;
    let p = compute_quant_params(&x, bits, Granularity::PerTensor)?;
    let q = quantize(&x, &p)?;
    let deq = dequantize(&q, &p)?;
    let max_err = x.max_abs_diff(&deq);
    Ok(json!({
        "alpha": p.alpha[0],
        "beta": p.beta[0],
        "codes": q.codes(),
        "dequantized": deq.data(),
        "max_error": max_err,
    }))
}

/// Per-channel max |x| of one site input before and after reassembly at
/// `theta_fraction · max`, plus the site's quantized output error both ways.
#[wasm_bindgen]
pub fn channel_profile(seed: u64, magnification: f64, layer: usize, site: &str, theta_fraction: f64, bits: u32) -> String {
    respond(profile(seed, magnification, layer, site, theta_fraction, bits))
}

/// Quantized output error at every grid threshold and the one picked.
#[wasm_bindgen]
pub fn theta_sweep(seed: u64, magnification: f64, layer: usize, site: &str, bits: u32, grid_points: usize) -> String {
    respond(sweep(seed, magnification, layer, site, bits, grid_points))
}

/// Per-tensor asymmetric quantization of comma or space separated numbers.
#[wasm_bindgen]
pub fn quantize_values(values: &str, bits: u32) -> String {
    respond(quantizer(values, bits))
}
