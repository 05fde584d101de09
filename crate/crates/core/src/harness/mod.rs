//! Experiment orchestration: model training recipes, single runs, sweeps,
//! CSV tables, and SVG plots.

mod config;
mod pipeline;
mod plot;
mod run;
mod sweep;
mod table;

pub use config::{ExperimentConfig, ReportFormat, TaskSource};
pub use pipeline::{train_judge, train_task_model, JudgeRecipe, TaskModelRecipe};
pub use plot::{plot, read_series, render_svg, PlotKind, Series};
pub use run::{
    evaluate, load_models, load_task, run_experiment, run_with, tune, RunReport, PROMPT_FILE,
    REPORT_FILE, SOFT_PROMPT_FILE, TRACE_FILE,
};
pub use sweep::{
    grid_points, parse_grid, point_config, run_seed, summary_row, sweep, thread_count, Grid,
    GridParam, SweepOutcome, SUMMARY_FILE, THREADS_VAR,
};
pub use table::{
    column_indices, format_sig, read_summary, read_trace, write_summary, write_trace, SummaryRow,
    SUMMARY_COLUMNS, TRACE_COLUMNS,
};
