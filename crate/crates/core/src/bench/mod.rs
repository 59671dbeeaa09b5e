//! Synthetic biased world, presence probing, metrics and sweeps.

mod eval;
mod metrics;
mod probes;
mod world;

pub use eval::{
    ablation_sweep, default_grid, evaluate, CategoryResult, EvalReport, GridPoint, MetricsRow, SweepAxis, SweepRow,
};
pub use metrics::{f1, Confusion, Metrics};
pub use probes::{build_probes, negatives_for};
pub use world::{
    generate_corpus, parse_jsonl, read_jsonl, to_jsonl, write_jsonl, Answer, BiasPair, Category, CoStats, Corpus,
    Example, WorldSpec,
};
