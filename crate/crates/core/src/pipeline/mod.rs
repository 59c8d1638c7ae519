//! End-to-end runs: configuration, the variant matrix, artifacts, reports,
//! translation and dataset export.

mod config;
mod data;
pub mod gradcheck;
mod report;
mod run;
mod translate;

pub use config::{DataConfig, RunConfig, SplitSource, Variant};
pub use data::cmd_gen_data;
pub use report::{median_night_ap50, report, Report, ReportRow};
pub use run::{
    adapt_loss_csv, burn_in_config, cmd_run, metrics_csv, run_burn_in, run_variant, translation_grid, write_artifacts,
    Datasets, RunOutcome, SUMMARY_FILE,
};
pub use translate::{cmd_translate, TranslateOptions, TranslateSummary, SWEEP_BETAS};
