//! Dice scores, laterality registration, slice-wise profiles with bootstrap
//! intervals, KL-stratified reports, paired tests and report files.

mod dsc;
mod output;
mod profile;
mod report;
mod wilcoxon;

pub use dsc::{class_dsc, dsc, dsc_counts, planar_dsc, register_laterality, register_mask, volumetric_dsc, DscConvention};
pub use output::{
    emit_outputs, read_profile_csv, read_report_csv, render_profiles_png, write_comparison, Comparison, ComparisonRow,
    EmittedFiles, SIGNIFICANCE_LEVEL,
};
pub use profile::{bootstrap_mean_ci, percentile_inverse_ecdf, slice_profile, ProfileOptions, SliceProfile};
pub use report::{stratified_report, DscReport, GroupStat, ScanScores};
pub use wilcoxon::{paired_compare, wilcoxon_signed_rank, WilcoxonResult};
