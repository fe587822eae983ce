//! Experiment settings, fold training with alternating adversarial
//! updates, cross-validation, fold ensembles and run directories.

mod config;
mod experiment;
pub mod run;
mod trainer;

pub use config::{lr_at_epoch, ExperimentConfig, Setting, Which, DEFAULT_WEIGHT_DECAY};
pub use experiment::{
    ensemble_predict, evaluate_models, load_eval_scans, load_target_slices, load_train_slices, plan_folds, predict_scans,
    run_experiment, FoldPlan,
};
pub use trainer::{
    curves_csv, predict_labels, train_fold, validation_dsc, EpochCurve, FoldTrainer, StepLosses, TrainSlice, TrainedFold,
    ValidationScan, CURVE_TERMS, VALIDATION_CLASSES,
};
