//! Probe evaluation and one-factor ablation sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{Confusion, Metrics};
use crate::bench::world::{Answer, Category, Example};
use crate::decoding::{decode, sampler_roster, CostReport, DecodeConfig, Decoded, Method, SamplerConfig};
use crate::error::{Error, Result};
use crate::interventions::{thirds, VafConfig};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::vocab::{Vocab, NO, YES};

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryResult {
    pub category: Category,
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub cost: CostReport,
    /// Mean of `ln p(yes) − ln p(no)` at the first decoding step.
    pub answer_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub categories: Vec<CategoryResult>,
    /// Unweighted mean of the per-category metrics.
    pub pooled: Metrics,
    pub cost: CostReport,
    /// Probes whose first generated token was neither yes nor no.
    pub non_answers: u64,
    pub answer_margin: f64,
}

/// One line of the metrics CSV; metric columns are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub category: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub forward_calls: u64,
    pub wall_ns_per_example: u64,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> Option<&CategoryResult> {
        self.categories.iter().find(|r| r.category == c)
    }

    /// One row per category followed by the pooled row.
    pub fn rows(&self) -> Vec<MetricsRow> {
        let row = |category: &str, m: &Metrics, cost: &CostReport| {
            let p = m.as_percent();
            MetricsRow {
                method: self.method.clone(),
                category: category.to_string(),
                accuracy: p.accuracy,
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
                forward_calls: cost.forward_calls,
                wall_ns_per_example: cost.wall_ns_per_example,
            }
        };
        let mut out: Vec<MetricsRow> = self
            .categories
            .iter()
            .map(|c| row(c.category.name(), &c.metrics, &c.cost))
            .collect();
        out.push(row("pooled", &self.pooled, &self.cost));
        out
    }
}

fn example_seed(base: u64, index: usize) -> u64 {
    Rng::derive(base, index as u64).next_u64()
}

fn answer_margin(d: &Decoded) -> f64 {
    let p = &d.distributions[0];
    p[YES].max(1e-300).ln() - p[NO].max(1e-300).ln()
}

/// Decodes every probe (in parallel) and scores the first generated token.
pub fn evaluate(params: &ModelParams, probes: &[Example], vocab: &Vocab, cfg: &DecodeConfig) -> Result<EvalReport> {
    if probes.is_empty() {
        return Err(Error::Contract("no probes to evaluate".into()));
    }
    if vocab.size() != params.config().vocab_size {
        return Err(Error::Config(format!(
            "world vocabulary has {} tokens, model has {}",
            vocab.size(),
            params.config().vocab_size
        )));
    }
    let decoded: Vec<Decoded> = probes
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut c = cfg.clone();
            c.sampler.seed = example_seed(cfg.sampler.seed, i);
            decode(
                params,
                &ex.visual_tokens(vocab),
                &ex.instruction_tokens(vocab),
                &ex.sys,
                &c,
            )
        })
        .collect::<Result<_>>()?;

    let mut categories = Vec::new();
    let mut non_answers = 0;
    for cat in Category::ALL {
        let idx: Vec<usize> = (0..probes.len()).filter(|&i| probes[i].category == cat).collect();
        if idx.is_empty() {
            continue;
        }
        let mut confusion = Confusion::default();
        let mut margin = 0.0;
        for &i in &idx {
            let predicted = match decoded[i].first_token() {
                Some(YES) => Some(true),
                Some(NO) => Some(false),
                _ => {
                    non_answers += 1;
                    None
                }
            };
            confusion.record(probes[i].label == Answer::Yes, predicted);
            margin += answer_margin(&decoded[i]);
        }
        categories.push(CategoryResult {
            category: cat,
            confusion,
            metrics: confusion.metrics(),
            cost: CostReport::combine(idx.iter().map(|&i| &decoded[i].cost)),
            answer_margin: margin / idx.len() as f64,
        });
    }
    let pooled = Metrics::mean(&categories.iter().map(|c| c.metrics).collect::<Vec<_>>());
    let answer_margin = decoded.iter().map(answer_margin).sum::<f64>() / decoded.len() as f64;
    Ok(EvalReport {
        method: cfg.method.name().to_string(),
        categories,
        pooled,
        cost: CostReport::combine(decoded.iter().map(|d| &d.cost)),
        non_answers,
        answer_margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    Window,
    Sampler,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::Window => "window",
            SweepAxis::Sampler => "sampler",
        }
    }
}

/// One setting along a sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub enum GridPoint {
    /// Enhancement coefficient with suppression off.
    Alpha(f64),
    /// Suppression coefficient with enhancement off.
    Beta(f64),
    Window { lo: usize, hi: usize },
    Sampler(SamplerConfig),
}

impl GridPoint {
    pub fn axis(&self) -> SweepAxis {
        match self {
            GridPoint::Alpha(_) => SweepAxis::Alpha,
            GridPoint::Beta(_) => SweepAxis::Beta,
            GridPoint::Window { .. } => SweepAxis::Window,
            GridPoint::Sampler(_) => SweepAxis::Sampler,
        }
    }

    pub fn label(&self) -> String {
        match self {
            GridPoint::Alpha(a) => format!("{a}"),
            GridPoint::Beta(b) => format!("{b}"),
            GridPoint::Window { lo, hi } => format!("{lo}-{hi}"),
            GridPoint::Sampler(s) => s.label(),
        }
    }

    /// Decoding configuration for this point, derived from `base`.
    pub fn apply(&self, base_vaf: &VafConfig, base: &DecodeConfig) -> DecodeConfig {
        let mut cfg = base.clone();
        let vaf = match self {
            GridPoint::Alpha(a) => base_vaf.clone().with_coefficients(*a, 0.0),
            GridPoint::Beta(b) => base_vaf.clone().with_coefficients(0.0, *b),
            GridPoint::Window { lo, hi } => base_vaf.clone().with_window(*lo, *hi),
            GridPoint::Sampler(s) => {
                cfg.sampler = *s;
                base_vaf.clone()
            }
        };
        cfg.method = Method::Vaf(vaf);
        cfg
    }
}

/// `0, 0.05, …, 0.5` for alpha; `0, 0.05, …, 0.3` for beta; the early,
/// middle and late thirds; the six-sampler roster.
pub fn default_grid(axis: SweepAxis, n_layers: usize, sampler_seed: u64) -> Vec<GridPoint> {
    match axis {
        SweepAxis::Alpha => (0..=10).map(|i| GridPoint::Alpha(i as f64 / 20.0)).collect(),
        SweepAxis::Beta => (0..=6).map(|i| GridPoint::Beta(i as f64 / 20.0)).collect(),
        SweepAxis::Window => thirds(n_layers)
            .into_iter()
            .map(|(lo, hi)| GridPoint::Window { lo, hi })
            .collect(),
        SweepAxis::Sampler => sampler_roster(sampler_seed).into_iter().map(GridPoint::Sampler).collect(),
    }
}

/// One sweep CSV line; metric columns are pooled percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub setting: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub adversarial_f1: f64,
    pub answer_margin: f64,
    pub forward_calls: u64,
    pub wall_ns_per_example: u64,
}

impl SweepRow {
    fn from_report(point: &GridPoint, r: &EvalReport) -> Self {
        let p = r.pooled.as_percent();
        SweepRow {
            axis: point.axis().name().to_string(),
            setting: point.label(),
            accuracy: p.accuracy,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            adversarial_f1: r.category(Category::Adversarial).map_or(0.0, |c| 100.0 * c.metrics.f1),
            answer_margin: r.answer_margin,
            forward_calls: r.cost.forward_calls,
            wall_ns_per_example: r.cost.wall_ns_per_example,
        }
    }
}

/// One [`evaluate`] run per grid point, in grid order.
pub fn ablation_sweep(
    params: &ModelParams,
    probes: &[Example],
    vocab: &Vocab,
    base_vaf: &VafConfig,
    base: &DecodeConfig,
    grid: &[GridPoint],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Contract("ablation grid is empty".into()));
    }
    grid.iter()
        .map(|point| {
            let report = evaluate(params, probes, vocab, &point.apply(base_vaf, base))?;
            Ok(SweepRow::from_report(point, &report))
        })
        .collect()
}
