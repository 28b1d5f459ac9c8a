use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chanquant::correction::{save_adapters, sequential_correct};
use chanquant::harness::{
    collect_site_acts, expansion_csv, loss_trace_csv, plan_model, run_pipeline, site_minmax_csv, stage_output_mse,
    PipelineConfig, PlanSet,
};
use chanquant::io::write_atomic;
use chanquant::model::{
    gen_calibration, gen_synthetic_model, load_calibration, load_checkpoint, load_quantized, prepare_model,
    save_calibration, save_checkpoint, save_quantized, Mode, QuantizedModel,
};
use chanquant::reassembly::ReassemblyMode;
use chanquant::{Error, Result};

const MODEL: &str = "model.json";
const CALIB: &str = "calib.json";
const EVAL: &str = "eval.json";
const PLANS: &str = "plans.json";
const Q_NAIVE: &str = "q_naive.json";
const Q_REASSEMBLED: &str = "q_reassembled.json";
const Q_CORRECTED: &str = "q_corrected.json";

#[derive(Parser)]
#[command(name = "chanquant", version, about = "Channel reassembly and low-rank correction for quantized toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic model.
    GenModel,
    /// Generate calibration and evaluation inputs.
    GenCalib,
    /// Per-channel min/max of every site input.
    Stats,
    /// Search reassembly plans.
    Reassemble,
    /// Quantize with and without the plans.
    Quantize,
    /// Train and merge low-rank adapters.
    Correct,
    /// Output MSE of every quantized model found in the output directory.
    Eval,
    /// All stages plus the report.
    Run,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    bits_w: Option<u32>,
    #[arg(long, global = true)]
    bits_a: Option<u32>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    grid_points: Option<usize>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ReassemblyMode>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<ReassemblyMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = &self.$flag { c.$field = v.clone(); })*
            };
        }
        set!(seed => seed, out_dir => out_dir, bits_w => w_bits, bits_a => a_bits, gamma => gamma,
             grid_points => grid_points, mode => mode, rank => rank, epochs => epochs,
             group_size => group_size);
        if let Some(r) = &self.report {
            c.report = Some(r.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn at(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn create_out_dir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn gen_model(cfg: &PipelineConfig) -> Result<bool> {
    let model = gen_synthetic_model(&cfg.model_config(), cfg.model_seed(), &cfg.outliers())?;
    save_checkpoint(&model, &at(cfg, MODEL))?;
    println!("wrote {}", at(cfg, MODEL).display());
    Ok(true)
}

fn gen_calib(cfg: &PipelineConfig) -> Result<bool> {
    for (name, seed, n) in [(CALIB, cfg.calib_seed(), cfg.n_calib), (EVAL, cfg.eval_seed(), cfg.n_eval)] {
        let mut set = gen_calibration(&cfg.model_config(), seed, n)?;
        set.outliers = Some(cfg.outliers());
        save_calibration(&set, &at(cfg, name))?;
        println!("wrote {} ({n} samples)", at(cfg, name).display());
    }
    Ok(true)
}

fn stats(cfg: &PipelineConfig) -> Result<bool> {
    let model = load_checkpoint(&at(cfg, MODEL))?;
    let calib = load_calibration(&at(cfg, CALIB))?;
    let acts = collect_site_acts(&model, &calib.samples)?;
    let path = at(cfg, "channel_minmax.csv");
    write_atomic(&path, site_minmax_csv(&acts)?.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn reassemble(cfg: &PipelineConfig) -> Result<bool> {
    let model = load_checkpoint(&at(cfg, MODEL))?;
    let calib = load_calibration(&at(cfg, CALIB))?;
    let acts = collect_site_acts(&model, &calib.samples)?;
    let set = plan_model(&model, &acts, &cfg.reassembly_config(), cfg.quant_setting())?;
    set.save(&at(cfg, PLANS))?;
    write_atomic(&at(cfg, "expansion.csv"), expansion_csv(&set).as_bytes())?;
    for l in &set.summaries {
        for s in &l.sites {
            let theta = s.theta.map_or("-".to_string(), |t| format!("{t:.4}"));
            println!("layer {} {:<8} theta {theta:>10}  +{} channels", l.layer, s.site.name(), s.extra_channels);
        }
    }
    Ok(true)
}

fn quantize(cfg: &PipelineConfig) -> Result<bool> {
    let model = load_checkpoint(&at(cfg, MODEL))?;
    let set = PlanSet::load(&at(cfg, PLANS))?;
    let mc = cfg.model_config();
    for (name, plans) in [(Q_NAIVE, None), (Q_REASSEMBLED, Some(set.layers.as_slice()))] {
        let blocks = prepare_model(&model, cfg.quant_mode(), plans)?;
        save_quantized(&QuantizedModel::from_prepared(&mc, &blocks, cfg.w_bits, cfg.a_bits)?, &at(cfg, name))?;
        println!("wrote {}", at(cfg, name).display());
    }
    Ok(true)
}

fn correct(cfg: &PipelineConfig) -> Result<bool> {
    let model = load_checkpoint(&at(cfg, MODEL))?;
    let calib = load_calibration(&at(cfg, CALIB))?;
    let set = PlanSet::load(&at(cfg, PLANS))?;
    let outcome = sequential_correct(&model, &set.layers, &calib.samples, cfg.quant_mode(), &cfg.correction_config())?;
    let q = QuantizedModel::from_prepared(&cfg.model_config(), &outcome.merged, cfg.w_bits, cfg.a_bits)?;
    save_quantized(&q, &at(cfg, Q_CORRECTED))?;
    save_adapters(&outcome.adapters, &at(cfg, "adapters.json"))?;
    write_atomic(&at(cfg, "loss_trace.csv"), loss_trace_csv(&outcome.traces).as_bytes())?;
    for t in &outcome.traces {
        println!(
            "group {} (blocks {}..{}): loss {:.4e} -> {:.4e}",
            t.group,
            t.first_block,
            t.first_block + t.n_blocks,
            t.initial_loss,
            t.final_loss
        );
    }
    Ok(outcome.traces.iter().all(|t| t.improved))
}

fn eval(cfg: &PipelineConfig) -> Result<bool> {
    let model = load_checkpoint(&at(cfg, MODEL))?;
    let eval = load_calibration(&at(cfg, EVAL))?;
    let fp = prepare_model(&model, Mode::Fp, None)?;
    let mut mse = serde_json::Map::new();
    for name in [Q_NAIVE, Q_REASSEMBLED, Q_CORRECTED] {
        let path = at(cfg, name);
        if !path.exists() {
            continue;
        }
        let q = load_quantized(&path)?;
        let key = name.trim_start_matches("q_").trim_end_matches(".json");
        mse.insert(key.to_string(), stage_output_mse(&fp, &q.prepare()?, &eval.samples)?.into());
    }
    if mse.is_empty() {
        return Err(Error::Config(format!("no quantized models in {}", cfg.out_dir.display())));
    }
    let get = |k: &str| mse.get(k).and_then(|v| v.as_f64());
    let mut ok = true;
    if let (Some(n), Some(r)) = (get("naive"), get("reassembled")) {
        ok &= cfg.mode == ReassemblyMode::Off || r < n;
    }
    if let (Some(r), Some(c)) = (get("reassembled"), get("corrected")) {
        ok &= c < r;
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({ "output_mse": mse, "ordered": ok }))? + "\n";
    let path = cfg.report.clone().unwrap_or_else(|| at(cfg, "eval_report.json"));
    write_atomic(&path, text.as_bytes())?;
    print!("{text}");
    Ok(ok)
}

fn run(cfg: &PipelineConfig) -> Result<bool> {
    let report = run_pipeline(cfg)?;
    let s = &report.stage_mse;
    println!("output MSE  naive {:.4e}  reassembly {:.4e}", s.naive, s.reassembly);
    if let (Some(c), Some(a)) = (s.corrected, s.adapter_carrying) {
        println!("            corrected {c:.4e}  (adapters unmerged {a:.4e})");
    }
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    println!("report: {}", cfg.report_path().display());
    Ok(report.passed())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = cli.opts.resolve()?;
    create_out_dir(&cfg)?;
    let (stage, f): (&'static str, fn(&PipelineConfig) -> Result<bool>) = match cli.command {
        Command::GenModel => ("gen-model", gen_model),
        Command::GenCalib => ("gen-calib", gen_calib),
        Command::Stats => ("stats", stats),
        Command::Reassemble => ("reassemble", reassemble),
        Command::Quantize => ("quantize", quantize),
        Command::Correct => ("correct", correct),
        Command::Eval => ("eval", eval),
        Command::Run => return run(&cfg),
    };
    f(&cfg).map_err(|e| e.in_stage(stage))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
