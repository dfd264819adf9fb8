//! Synthetic multi-task benchmark and the method comparison.

mod harness;
mod metrics;
mod suite;

pub use harness::{
    contamination_sweep, evaluate, median, run_comparison, sweep_csv, train_stage, Artifacts, EvalConfig, EvalReport, Method,
    MethodSet, MethodSummary, SweepRow, TaskRecord, GENERAL_NAME, REPORT_FORMAT, SHARED_NAME,
};
pub use metrics::{accuracy, choose, completion_logprob, greedy_answers, mean_rouge_l, rouge_l, rouge_l_text, RougeScore};
pub use suite::{gen_suite, GenItem, HeldOutSet, HeldOutTask, Layout, McItem, SuiteConfig, SyntheticSuite, TaskSpec, BOS, FILL};
