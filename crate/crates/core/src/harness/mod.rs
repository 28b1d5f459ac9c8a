//! Metrics, reports, configuration and the end-to-end pipeline.

mod bop;
mod config;
mod metrics;
mod pipeline;

pub use bop::{bop_count, ArchDims, BopCount};
pub use config::PipelineConfig;
pub use metrics::{
    channel_minmax_report, column_quantiles, minmax_csv, percentile_mse, quantile, stage_output_mse, ChannelRange,
};
pub use pipeline::{
    collect_site_acts, expansion_csv, loss_trace_csv, plan_model, run_pipeline, site_minmax_csv, strip_timing, Check, LayerPlans, PlanSet, Report, SitePlanSummary,
    StageMse, SiteActs, REPORT_NOTE,
};
