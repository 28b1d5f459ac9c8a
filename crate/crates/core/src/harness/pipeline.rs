use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bop::{bop_count, ArchDims, BopCount};
use super::config::PipelineConfig;
use super::metrics::{channel_minmax_report, percentile_mse, stage_output_mse};
use crate::correction::{attach_adapters, save_adapters, sequential_correct, ReconstructionTrace};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{
    gen_calibration, gen_synthetic_model, prepare_model, run_blocks, save_calibration, save_checkpoint,
    save_quantized, BlockPlans, Mode, Model, Projection, QuantizedModel,
};
use crate::quant::{compute_quant_params, Granularity};
use crate::reassembly::{
    adaptive_search, build_plan, channel_outlier_stats, disassemble, theta_from_expansion_ratio, Objective,
    PairDistances, QuantSetting, ReassemblyConfig, ReassemblyMode, ReassemblyPlan, Site,
};
use crate::tensor::Tensor;

pub const REPORT_NOTE: &str = "Quality is measured as output MSE of the final hidden states against the \
full-precision model on held-out synthetic inputs; perplexity is not computed at this scale.";

/// Calibration inputs of the three reassembly sites of one layer, in
/// [`Site::ALL`] order, one tensor per sample.
pub type SiteActs = [Vec<Tensor>; 3];

/// Full-precision site inputs of every layer.
pub fn collect_site_acts(model: &Model, samples: &[Tensor]) -> Result<Vec<SiteActs>> {
    let blocks = prepare_model(model, Mode::Fp, None)?;
    let mut states = samples.to_vec();
    let mut out = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let mut layer: SiteActs = Default::default();
        for s in states.iter_mut() {
            let (y, sites) = b.forward_capture(s)?;
            for (dst, t) in layer.iter_mut().zip(sites) {
                dst.push(t);
            }
            *s = y;
        }
        out.push(layer);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitePlanSummary {
    pub site: Site,
    /// `None` for an identity plan.
    pub theta: Option<f64>,
    pub extra_channels: usize,
    pub expansion_ratio: f64,
    /// Only channels with `T_i > 1`.
    pub splits: BTreeMap<usize, usize>,
    pub merge_pairs: Vec<(usize, usize)>,
    /// Threshold grid and the error at each point (adaptive mode only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<(f64, Option<f64>)>,
}

impl SitePlanSummary {
    fn new(site: Site, plan: &ReassemblyPlan, grid: Vec<(f64, Option<f64>)>) -> Self {
        Self {
            site,
            theta: plan.theta.is_finite().then_some(plan.theta),
            extra_channels: plan.extra_channels(),
            expansion_ratio: plan.expansion_ratio(),
            splits: plan
                .splits
                .iter()
                .enumerate()
                .filter(|(_, &t)| t > 1)
                .map(|(i, &t)| (i, t))
                .collect(),
            merge_pairs: plan.merge_pairs.clone(),
            grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlans {
    pub layer: usize,
    pub sites: Vec<SitePlanSummary>,
}

/// Plans for every layer plus their summaries; the `reassemble` artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSet {
    pub mode: ReassemblyMode,
    pub quant: QuantSetting,
    pub layers: Vec<BlockPlans>,
    pub summaries: Vec<LayerPlans>,
}

impl PlanSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let set: PlanSet = serde_json::from_slice(&bytes).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        for p in &set.layers {
            for site in Site::ALL {
                p.site(site).validate()?;
            }
        }
        Ok(set)
    }
}

fn site_consumers(model: &Model, layer: usize, site: Site) -> (Vec<&Tensor>, Objective) {
    let b = &model.blocks[layer];
    match site {
        Site::Qkv => (
            vec![&b.w_q, &b.w_k, &b.w_v],
            Objective::Attention {
                n_heads: model.config.n_heads,
            },
        ),
        Site::GateUp => (vec![&b.w_gate, &b.w_up], Objective::Linear),
        Site::Down => (vec![&b.w_down], Objective::Linear),
    }
}

/// Builds one plan per in-scope site and layer from full-precision
/// calibration activations.
pub fn plan_model(model: &Model, site_acts: &[SiteActs], rcfg: &ReassemblyConfig, quant: QuantSetting) -> Result<PlanSet> {
    rcfg.validate()?;
    if site_acts.len() != model.blocks.len() {
        return Err(Error::Contract("one set of site activations per layer expected".into()));
    }
    let mut layers = Vec::with_capacity(site_acts.len());
    let mut summaries = Vec::with_capacity(site_acts.len());
    for (layer, acts) in site_acts.iter().enumerate() {
        let mut plans = BlockPlans::identity(&model.config);
        let mut sites = Vec::new();
        for (k, site) in Site::ALL.into_iter().enumerate() {
            if rcfg.mode == ReassemblyMode::Off || !rcfg.scope.contains(&site) {
                continue;
            }
            let (weights, objective) = site_consumers(model, layer, site);
            let stats = channel_outlier_stats(&acts[k])?;
            let (plan, grid) = match rcfg.mode {
                ReassemblyMode::FixedRatio => {
                    let theta = theta_from_expansion_ratio(&stats, rcfg.gamma)?;
                    let distances = PairDistances::new(&acts[k], &weights)?;
                    (build_plan(&stats, &distances, theta)?, Vec::new())
                }
                ReassemblyMode::Adaptive => {
                    let r = adaptive_search(&stats, &acts[k], &weights, rcfg.grid_points, quant, objective)?;
                    (r.plan, r.evaluations)
                }
                ReassemblyMode::Off => unreachable!("handled above"),
            };
            sites.push(SitePlanSummary::new(site, &plan, grid));
            *plans.site_mut(site) = Arc::new(plan);
        }
        layers.push(plans);
        summaries.push(LayerPlans { layer, sites });
    }
    Ok(PlanSet {
        mode: rcfg.mode,
        quant,
        layers,
        summaries,
    })
}

/// `layer,site,channel_index,min,max` rows for every site input.
pub fn site_minmax_csv(acts: &[SiteActs]) -> Result<String> {
    let mut csv = String::from("layer,site,channel_index,min,max\n");
    for (layer, sites) in acts.iter().enumerate() {
        for (site, a) in Site::ALL.iter().zip(sites) {
            for r in channel_minmax_report(a)? {
                csv.push_str(&format!("{layer},{},{},{},{}\n", site.name(), r.channel, r.min, r.max));
            }
        }
    }
    Ok(csv)
}

/// One row per planned site; `theta` is empty for identity plans.
pub fn expansion_csv(set: &PlanSet) -> String {
    let mut csv = String::from("layer,site,theta,extra_channels,expansion_ratio\n");
    for l in &set.summaries {
        for s in &l.sites {
            let theta = s.theta.map(|t| t.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{theta},{},{}\n",
                l.layer,
                s.site.name(),
                s.extra_channels,
                s.expansion_ratio
            ));
        }
    }
    csv
}

pub fn loss_trace_csv(traces: &[ReconstructionTrace]) -> String {
    let mut csv = String::from("group,step,loss\n");
    for t in traces {
        for (s, l) in t.step_losses.iter().enumerate() {
            csv.push_str(&format!("{},{s},{l}\n", t.group));
        }
    }
    csv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMse {
    /// Quantized with identity plans, no correction.
    pub naive: f64,
    pub reassembly: f64,
    /// Reassembly plus correction, adapters merged into the weights.
    pub corrected: Option<f64>,
    /// Reassembly plus correction with adapters kept separate.
    pub adapter_carrying: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Channel-wise shift of `W + A·B` against `W`, averaged over layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightShift {
    pub projection: Projection,
    pub p99_mse: f64,
    pub p999_mse: f64,
    pub max_abs_shift_of_channel_max: f64,
    pub max_abs_shift_of_channel_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub traces: Vec<ReconstructionTrace>,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub trainable_bytes_f32: usize,
    pub weight_shift: Vec<WeightShift>,
    /// Largest per-element gap between the merged weights and the
    /// adapter-carrying weights, relative to the bound `(α_merged + α) / 2`.
    pub merge_gap_over_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BopSummary {
    pub toy_fp16: BopCount,
    pub toy_quantized: BopCount,
    pub llama_7b_fp16_l256: BopCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Granularities {
    pub weights: Granularity,
    pub activations: Granularity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub note: String,
    pub config: PipelineConfig,
    pub granularity: Granularities,
    pub plans: Vec<LayerPlans>,
    pub correction: Option<CorrectionSummary>,
    pub stage_mse: StageMse,
    pub bops: BopSummary,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage; the only non-deterministic section.
    pub timing: BTreeMap<String, f64>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Report JSON with the `timing` section removed, for determinism checks.
pub fn strip_timing(json: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    Ok(serde_json::to_string_pretty(&v)?)
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    /// Registers a manifest and its blob.
    fn container(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.written.push(p.with_extension("bin"));
        p
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, text.as_bytes())
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.strip_prefix(&self.dir).ok())
            .map(|p| p.display().to_string())
            .collect()
    }

    fn remove_all(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Runs generate → stats → reassemble → quantize → correct → evaluate and
/// writes every artifact plus the report. On failure, files written so far
/// are removed and the error names the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Report> {
    cfg.validate()?;
    let mut artifacts = Artifacts {
        dir: cfg.out_dir.clone(),
        written: Vec::new(),
    };
    let result = run_stages(cfg, &mut artifacts);
    if result.is_err() {
        artifacts.remove_all();
    }
    result
}

fn timed<T>(timing: &mut BTreeMap<String, f64>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    timing.insert(stage.to_string(), start.elapsed().as_secs_f64());
    out
}

fn run_stages(cfg: &PipelineConfig, art: &mut Artifacts) -> Result<Report> {
    let mut timing = BTreeMap::new();
    let model_cfg = cfg.model_config();
    let qmode = cfg.quant_mode();

    let (model, calib, eval) = timed(&mut timing, "generate", || {
        let model = gen_synthetic_model(&model_cfg, cfg.model_seed(), &cfg.outliers())?;
        let mut calib = gen_calibration(&model_cfg, cfg.calib_seed(), cfg.n_calib)?;
        calib.outliers = Some(cfg.outliers());
        let mut eval = gen_calibration(&model_cfg, cfg.eval_seed(), cfg.n_eval)?;
        eval.outliers = Some(cfg.outliers());
        save_checkpoint(&model, &art.container("model.json"))?;
        save_calibration(&calib, &art.container("calib.json"))?;
        save_calibration(&eval, &art.container("eval.json"))?;
        Ok((model, calib, eval))
    })?;

    let site_acts = timed(&mut timing, "stats", || {
        let acts = collect_site_acts(&model, &calib.samples)?;
        art.text("channel_minmax.csv", &site_minmax_csv(&acts)?)?;
        Ok(acts)
    })?;

    let plan_set = timed(&mut timing, "reassemble", || {
        let set = plan_model(&model, &site_acts, &cfg.reassembly_config(), cfg.quant_setting())?;
        set.save(&art.path("plans.json"))?;
        art.text("expansion.csv", &expansion_csv(&set))?;
        Ok(set)
    })?;
    let plans = &plan_set.layers;

    let (q_naive, q_reassembled, re_blocks) = timed(&mut timing, "quantize", || {
        let naive_blocks = prepare_model(&model, qmode, None)?;
        let re_blocks = prepare_model(&model, qmode, Some(plans))?;
        let q_naive = QuantizedModel::from_prepared(&model_cfg, &naive_blocks, cfg.w_bits, cfg.a_bits)?;
        let q_re = QuantizedModel::from_prepared(&model_cfg, &re_blocks, cfg.w_bits, cfg.a_bits)?;
        save_quantized(&q_naive, &art.container("q_naive.json"))?;
        save_quantized(&q_re, &art.container("q_reassembled.json"))?;
        Ok((q_naive, q_re, re_blocks))
    })?;

    let corrected = if cfg.correction {
        Some(timed(&mut timing, "correct", || {
            let outcome = sequential_correct(&model, plans, &calib.samples, qmode, &cfg.correction_config())?;
            let q = QuantizedModel::from_prepared(&model_cfg, &outcome.merged, cfg.w_bits, cfg.a_bits)?;
            save_quantized(&q, &art.container("q_corrected.json"))?;
            save_adapters(&outcome.adapters, &art.container("adapters.json"))?;
            art.text("loss_trace.csv", &loss_trace_csv(&outcome.traces))?;
            Ok((outcome, q))
        })?)
    } else {
        None
    };

    let (stage_mse, correction, mut checks) = timed(&mut timing, "evaluate", || {
        let fp_blocks = prepare_model(&model, Mode::Fp, None)?;
        let eval_x = &eval.samples;
        let naive = stage_output_mse(&fp_blocks, &q_naive.prepare()?, eval_x)?;
        let reassembly = stage_output_mse(&fp_blocks, &q_reassembled.prepare()?, eval_x)?;
        let mut checks = vec![
            magnitude_check(&plan_set, &site_acts)?,
            warm_start_check(cfg, &re_blocks, &calib.samples[0])?,
        ];
        if cfg.mode != ReassemblyMode::Off {
            checks.push(Check::new(
                "reassembly_beats_naive",
                reassembly < naive,
                format!("reassembly {reassembly:e} vs naive {naive:e}"),
            ));
        }
        let mut stage = StageMse {
            naive,
            reassembly,
            corrected: None,
            adapter_carrying: None,
        };
        let mut summary = None;
        if let Some((outcome, q)) = &corrected {
            let merged = stage_output_mse(&fp_blocks, &q.prepare()?, eval_x)?;
            let mut carrying = 0.0;
            for x in eval_x {
                let fp = run_blocks(&fp_blocks, x, None)?;
                carrying += fp.mean_sq_diff(&run_blocks(&re_blocks, x, Some(&outcome.adapters))?);
            }
            stage.corrected = Some(merged);
            stage.adapter_carrying = Some(carrying / eval_x.len() as f64);
            checks.push(Check::new(
                "correction_beats_reassembly",
                merged < reassembly,
                format!("corrected {merged:e} vs reassembly {reassembly:e}"),
            ));
            let worst = outcome
                .traces
                .iter()
                .map(|t| t.final_loss / t.initial_loss)
                .fold(0.0, f64::max);
            checks.push(Check::new(
                "groups_improved",
                outcome.traces.iter().all(|t| t.improved),
                format!("worst final/initial loss ratio {worst:.4}"),
            ));
            let (shift, gap) = weight_shift(&re_blocks, &outcome.adapters, &outcome.merged)?;
            checks.push(Check::new(
                "merge_consistency",
                gap <= 1.0,
                format!("max element gap / bound = {gap:.4}"),
            ));
            let trainable = outcome.trainable_params();
            summary = Some(CorrectionSummary {
                traces: outcome.traces.clone(),
                trainable_params: trainable,
                frozen_params: re_blocks
                    .iter()
                    .flat_map(|b| b.reassembled.iter().map(Tensor::numel))
                    .sum(),
                trainable_bytes_f32: trainable * 4,
                weight_shift: shift,
                merge_gap_over_bound: gap,
            });
        }
        Ok((stage, summary, checks))
    })?;

    let extra: usize = plans.iter().map(BlockPlans::extra_channels).sum();
    let arch = ArchDims::from(&model_cfg);
    let bops = BopSummary {
        toy_fp16: bop_count(&arch, model_cfg.seq_len, 16, 16, 0)?,
        toy_quantized: bop_count(&arch, model_cfg.seq_len, cfg.w_bits, cfg.a_bits, extra)?,
        llama_7b_fp16_l256: bop_count(&ArchDims::llama_7b(), 256, 16, 16, 0)?,
    };
    if !stage_mse.naive.is_finite() || !stage_mse.reassembly.is_finite() {
        checks.push(Check::new("finite_metrics", false, "non-finite stage MSE".into()));
    }

    let report_path = cfg.report_path();
    let mut names = art.names();
    names.sort();
    let report = Report {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        note: REPORT_NOTE.to_string(),
        config: cfg.clone(),
        granularity: Granularities {
            weights: Granularity::PerChannel,
            activations: Granularity::PerToken,
        },
        plans: plan_set.summaries.clone(),
        correction,
        stage_mse,
        bops,
        checks,
        artifacts: names,
        timing,
    };
    art.written.push(report_path.clone());
    write_atomic(&report_path, report.to_json()?.as_bytes()).map_err(|e| e.in_stage("report"))?;
    Ok(report)
}

/// Post-disassembly calibration activations never exceed θ.
fn magnitude_check(set: &PlanSet, acts: &[SiteActs]) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for (plans, layer_acts) in set.layers.iter().zip(acts) {
        for (k, site) in Site::ALL.iter().enumerate() {
            let plan = plans.site(*site);
            if plan.is_identity() {
                continue;
            }
            for x in &layer_acts[k] {
                worst = worst.max(disassemble(x, &plan.splits)?.max_abs() / plan.theta);
            }
        }
    }
    Ok(Check::new(
        "magnitude_bound",
        worst <= 1.0,
        format!("max |x̂| / θ = {worst:.6}"),
    ))
}

/// Fresh adapters (B = 0) leave the quantized model's output bit-identical.
fn warm_start_check(cfg: &PipelineConfig, blocks: &[crate::model::PreparedBlock], x: &Tensor) -> Result<Check> {
    let fresh = attach_adapters(&cfg.model_config(), cfg.rank, cfg.adapter_seed())?;
    let with = run_blocks(blocks, x, Some(&fresh))?;
    let without = run_blocks(blocks, x, None)?;
    Ok(Check::new(
        "zero_warm_start",
        with == without,
        format!("max abs diff {:e}", with.max_abs_diff(&without)),
    ))
}

fn weight_shift(
    blocks: &[crate::model::PreparedBlock],
    adapters: &[Vec<crate::correction::LowRankAdapter>],
    merged: &[crate::model::PreparedBlock],
) -> Result<(Vec<WeightShift>, f64)> {
    let mut gap: f64 = 0.0;
    let mut shifts: Vec<WeightShift> = Projection::ALL
        .iter()
        .map(|&projection| WeightShift {
            projection,
            p99_mse: 0.0,
            p999_mse: 0.0,
            max_abs_shift_of_channel_max: 0.0,
            max_abs_shift_of_channel_min: 0.0,
        })
        .collect();
    let n = blocks.len().max(1) as f64;
    for ((b, ads), m) in blocks.iter().zip(adapters).zip(merged) {
        for (j, ad) in ads.iter().enumerate() {
            let w = &b.reassembled[j];
            let w_new = &m.reassembled[j];
            let s = &mut shifts[j];
            s.p99_mse += percentile_mse(w, w_new, 0.99)? / n;
            s.p999_mse += percentile_mse(w, w_new, 0.999)? / n;
            for c in 0..w.cols() {
                let (a, bcol) = (w.column(c), w_new.column(c));
                let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
                s.max_abs_shift_of_channel_max = s.max_abs_shift_of_channel_max.max((max(&a) - max(&bcol)).abs());
                s.max_abs_shift_of_channel_min = s.max_abs_shift_of_channel_min.max((min(&a) - min(&bcol)).abs());
            }
            if let Some(bits) = b.w_bits {
                let alpha_w = compute_quant_params(w, bits, Granularity::PerChannel)?.alpha;
                let alpha_m = compute_quant_params(w_new, bits, Granularity::PerChannel)?.alpha;
                let carrying = b.effective[j].add(&ad.product()?)?;
                for r in 0..w.rows() {
                    for c in 0..w.cols() {
                        let bound = (alpha_w[c] + alpha_m[c]) / 2.0 * (1.0 + 1e-9);
                        gap = gap.max((m.effective[j].get(r, c) - carrying.get(r, c)).abs() / bound);
                    }
                }
            }
        }
    }
    Ok((shifts, gap))
}
