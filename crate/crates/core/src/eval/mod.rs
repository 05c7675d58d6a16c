//! Monte Carlo localization experiments, timing and CSV reports.

mod metric;
mod report;
mod sweep;
mod timing;

pub use metric::assignment_error;
pub use report::{
    read_sweep_csv, read_timing_csv, write_sweep_csv, write_timing_csv, ACCURACY_COLUMNS,
    RHO_COLUMN, TIMING_COLUMNS,
};
pub use sweep::{
    run_accuracy_sweep, run_robustness_sweep, ExperimentConfig, Localizer, LocalizerContext,
    SweepReport, SweepRow,
};
pub use timing::{median, run_timing_benchmark, TimingReport, TimingRow, MIN_REPEATS};
