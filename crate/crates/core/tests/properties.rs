//! Statistical and paired-run properties of the generator, planner and
//! correction on seeded toys.

use chanquant::correction::{
    attach_adapters, merge_adapters, projection_dims, reconstruct_group, sequential_correct, CorrectionConfig,
    LowRankAdapter,
};
use chanquant::harness::{
    channel_minmax_report, collect_site_acts, plan_model, run_pipeline, stage_output_mse, PipelineConfig,
};
use chanquant::model::{
    gen_calibration, gen_synthetic_model, model_forward, BlockPlans, prepare_model, run_blocks, ForwardExtras, Mode, Model,
    ModelConfig, OutlierSpec,
};
use chanquant::quant::{compute_quant_params, dequantize, Granularity};
use chanquant::reassembly::{
    adaptive_search, apply_plan_runtime, channel_outlier_stats, linear_reassembly_error, Objective, QuantSetting,
    ReassemblyConfig, ReassemblyMode, ReassemblyPlan,
};
use chanquant::rng::{derive, gaussian_matrix};
use chanquant::Tensor;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn toy(seed: u64, outliers: &OutlierSpec) -> (Model, Vec<Tensor>) {
    let cfg = ModelConfig::default();
    let model = gen_synthetic_model(&cfg, seed, outliers).unwrap();
    let calib = gen_calibration(&cfg, seed + 1, 16).unwrap();
    (model, calib.samples)
}

#[test]
fn magnification_controls_outlier_strength() {
    for seed in 0..5 {
        let (model, samples) = toy(seed, &OutlierSpec { magnification: 1.0, ..OutlierSpec::default() });
        for layer in collect_site_acts(&model, &samples).unwrap() {
            let m = channel_outlier_stats(&layer[0]).unwrap().max_abs;
            let med = median(m.clone());
            assert!(m.iter().all(|&v| v <= 5.0 * med), "seed {seed}: {m:?}");
        }
        let spec = OutlierSpec::default();
        let (model, samples) = toy(seed, &spec);
        for layer in collect_site_acts(&model, &samples).unwrap() {
            for site in [&layer[0], &layer[1]] {
                let m = channel_outlier_stats(site).unwrap().max_abs;
                let med = median(m.clone());
                for &c in &spec.channels {
                    assert!(m[c] >= 10.0 * med, "seed {seed} channel {c}: {} vs median {med}", m[c]);
                }
            }
        }
    }
}

#[test]
fn outlier_channel_tops_the_minmax_report() {
    let spec = OutlierSpec::default();
    let (model, samples) = toy(2, &spec);
    let acts = collect_site_acts(&model, &samples).unwrap();
    let rows = channel_minmax_report(&acts[0][0]).unwrap();
    assert_eq!(rows.len(), 32);
    let top = rows.iter().max_by(|a, b| (a.max - a.min).total_cmp(&(b.max - b.min))).unwrap();
    assert_eq!(top.channel, spec.channels[0]);
}

#[test]
fn sixteen_bit_quantsim_tracks_full_precision() {
    let (model, samples) = toy(4, &OutlierSpec::none());
    let fp = prepare_model(&model, Mode::Fp, None).unwrap();
    let q16 = prepare_model(&model, Mode::QuantSim { w_bits: 16, a_bits: 16 }, None).unwrap();
    let q4 = prepare_model(&model, Mode::QuantSim { w_bits: 4, a_bits: 4 }, None).unwrap();
    for x in &samples[..4] {
        let a = run_blocks(&fp, x, None).unwrap();
        let b = run_blocks(&q16, x, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-2, "{}", a.max_abs_diff(&b));
    }
    let m16 = stage_output_mse(&fp, &q16, &samples[..4]).unwrap();
    let m4 = stage_output_mse(&fp, &q4, &samples[..4]).unwrap();
    assert!(m16 * 1e3 < m4, "{m16} vs {m4}");
}

#[test]
fn full_precision_forward_is_repeatable() {
    let (model, samples) = toy(6, &OutlierSpec::default());
    let a = model_forward(&samples[0], &model, Mode::Fp, ForwardExtras::default()).unwrap();
    let (model2, _) = toy(6, &OutlierSpec::default());
    let b = model_forward(&samples[0], &model2, Mode::Fp, ForwardExtras::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn plans_lower_four_bit_output_error() {
    let (model, samples) = toy(0, &OutlierSpec::default());
    let (calib, eval) = samples.split_at(12);
    let acts = collect_site_acts(&model, calib).unwrap();
    let set = plan_model(&model, &acts, &ReassemblyConfig::default(), QuantSetting::new(4, 4)).unwrap();
    let mode = Mode::QuantSim { w_bits: 4, a_bits: 4 };
    let fp = prepare_model(&model, Mode::Fp, None).unwrap();
    let naive = stage_output_mse(&fp, &prepare_model(&model, mode, None).unwrap(), eval).unwrap();
    let planned = stage_output_mse(&fp, &prepare_model(&model, mode, Some(&set.layers)).unwrap(), eval).unwrap();
    assert!(planned < naive, "{planned} vs {naive}");
}

#[test]
fn searched_plan_beats_identity_on_outlier_sites() {
    let (model, samples) = toy(1, &OutlierSpec::default());
    let acts = collect_site_acts(&model, &samples).unwrap();
    let quant = QuantSetting::new(4, 4);
    for (l, layer) in acts.iter().enumerate() {
        let b = &model.blocks[l];
        let ws = [&b.w_gate, &b.w_up];
        let stats = channel_outlier_stats(&layer[1]).unwrap();
        let r = adaptive_search(&stats, &layer[1], &ws, 10, quant, Objective::Linear).unwrap();
        let err = |p: &ReassemblyPlan| -> f64 {
            layer[1].iter().map(|x| linear_reassembly_error(x, &ws, p, quant).unwrap()).sum()
        };
        let identity = ReassemblyPlan::identity(stats.channels());
        assert!(err(&r.plan) < err(&identity), "layer {l}");
    }
}

#[test]
fn outlier_free_layers_keep_identity_plans() {
    let (model, samples) = toy(3, &OutlierSpec::none());
    let acts = collect_site_acts(&model, &samples).unwrap();
    let b = &model.blocks[0];
    let stats = channel_outlier_stats(&acts[0][0]).unwrap();
    let r = adaptive_search(
        &stats,
        &acts[0][0],
        &[&b.w_q, &b.w_k, &b.w_v],
        10,
        QuantSetting::new(4, 4),
        Objective::Attention { n_heads: 4 },
    )
    .unwrap();
    assert!(r.plan.is_identity(), "{:?}", r.plan.splits);
}

#[test]
fn plans_bound_unseen_inputs_with_slack() {
    let spec = OutlierSpec::default();
    let cfg = ModelConfig::default();
    for seed in 0..3 {
        let model = gen_synthetic_model(&cfg, seed, &spec).unwrap();
        let calib = gen_calibration(&cfg, 100 + seed, 16).unwrap();
        let unseen = gen_calibration(&cfg, 200 + seed, 4).unwrap();
        let set = plan_model(
            &model,
            &collect_site_acts(&model, &calib.samples).unwrap(),
            &ReassemblyConfig { mode: ReassemblyMode::FixedRatio, ..ReassemblyConfig::default() },
            QuantSetting::new(4, 4),
        )
        .unwrap();
        for (plans, layer) in set.layers.iter().zip(collect_site_acts(&model, &unseen.samples).unwrap()) {
            for (k, site) in chanquant::reassembly::Site::ALL.into_iter().enumerate() {
                let plan = plans.site(site);
                if plan.is_identity() {
                    continue;
                }
                for x in &layer[k] {
                    let peak = apply_plan_runtime(x, plan).unwrap().max_abs();
                    assert!(peak <= plan.theta * 1.05, "seed {seed} {site:?}: {peak} > {}", plan.theta);
                }
            }
        }
    }
}

#[test]
fn adapters_are_a_small_fraction_of_weights() {
    let cfg = ModelConfig::default();
    let r = 4;
    let (trainable, frozen) = projection_dims(&cfg)
        .iter()
        .fold((0, 0), |(t, f), &(m, n)| (t + r * (m + n), f + m * n));
    assert!(trainable * 5 < frozen, "{trainable} vs {frozen}");
}

#[test]
fn merged_weight_is_within_half_step_of_the_sum() {
    let mut rng = derive(9, 9);
    let w = gaussian_matrix(&mut rng, 32, 86, 0.2);
    let ad = LowRankAdapter {
        a: gaussian_matrix(&mut rng, 32, 4, 0.1),
        b: gaussian_matrix(&mut rng, 4, 86, 0.1),
    };
    let target = w.add(&ad.product().unwrap()).unwrap();
    for bits in [3, 4, 8] {
        let (codes, p) = merge_adapters(&w, &ad, Granularity::PerChannel, bits).unwrap();
        let deq = dequantize(&codes, &p).unwrap();
        assert_eq!(p, compute_quant_params(&target, bits, Granularity::PerChannel).unwrap());
        for r in 0..32 {
            for c in 0..86 {
                assert!((deq.get(r, c) - target.get(r, c)).abs() <= p.alpha[c] / 2.0 + 1e-12);
            }
        }
    }
}

#[test]
fn one_group_is_one_reconstruction() {
    let cfg = ModelConfig { n_layers: 2, seq_len: 8, ..ModelConfig::default() };
    let model = gen_synthetic_model(&cfg, 5, &OutlierSpec::default()).unwrap();
    let calib = gen_calibration(&cfg, 6, 3).unwrap();
    let plans = vec![BlockPlans::identity(&cfg); 2];
    let mode = Mode::QuantSim { w_bits: 4, a_bits: 4 };
    let ccfg = CorrectionConfig { group_size: 2, epochs: 2, ..CorrectionConfig::default() };
    let out = sequential_correct(&model, &plans, &calib.samples, mode, &ccfg).unwrap();
    assert_eq!(out.traces.len(), 1);
    assert_eq!((out.traces[0].first_block, out.traces[0].n_blocks), (0, 2));

    let fp = prepare_model(&model, Mode::Fp, None).unwrap();
    let q = prepare_model(&model, mode, Some(&plans)).unwrap();
    let targets: Vec<Tensor> = calib.samples.iter().map(|x| run_blocks(&fp, x, None).unwrap()).collect();
    let mut adapters = attach_adapters(&cfg, ccfg.rank, ccfg.seed).unwrap();
    let trace = reconstruct_group(&q, &mut adapters, &targets, &calib.samples, &ccfg, 0).unwrap();
    assert_eq!(trace, out.traces[0]);
    assert_eq!(adapters, out.adapters);
}

#[test]
fn default_training_improves_every_group() {
    let cfg = ModelConfig { n_layers: 4, seq_len: 16, ..ModelConfig::default() };
    let model = gen_synthetic_model(&cfg, 7, &OutlierSpec::default()).unwrap();
    let calib = gen_calibration(&cfg, 8, 8).unwrap();
    let plans = vec![BlockPlans::identity(&cfg); 4];
    let ccfg = CorrectionConfig { group_size: 2, ..CorrectionConfig::default() };
    let out = sequential_correct(&model, &plans, &calib.samples, Mode::QuantSim { w_bits: 4, a_bits: 4 }, &ccfg)
        .unwrap();
    for t in &out.traces {
        assert!(t.final_loss <= t.initial_loss, "group {}: {} -> {}", t.group, t.initial_loss, t.final_loss);
    }
}

#[test]
fn lossless_settings_give_near_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        outlier_channels: Vec::new(),
        w_bits: 16,
        a_bits: 16,
        mode: ReassemblyMode::Off,
        correction: false,
        n_layers: 2,
        out_dir: tmp.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.stage_mse.naive < 1e-3, "{}", report.stage_mse.naive);
    assert_eq!(report.stage_mse.naive, report.stage_mse.reassembly);
    assert!(report.correction.is_none() && report.passed());
}
