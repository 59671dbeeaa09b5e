//! Token samplers: greedy, direct, top-p, top-k and tempered top-k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Direct,
    TopP { p: f64 },
    TopK { k: usize },
    TopKTemp { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSampler", into = "RawSampler")]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            strategy: Strategy::Greedy,
            seed: 0,
        }
    }

    pub fn new(strategy: Strategy, seed: u64) -> Result<Self> {
        let cfg = Self { strategy, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Greedy | Strategy::Direct => Ok(()),
            Strategy::TopP { p } if p > 0.0 && p <= 1.0 => Ok(()),
            Strategy::TopP { p } => Err(Error::Config(format!("top_p {p} outside (0, 1]"))),
            Strategy::TopK { k } if k >= 1 => Ok(()),
            Strategy::TopKTemp { k, temperature } if k >= 1 && temperature > 0.0 && temperature.is_finite() => Ok(()),
            Strategy::TopK { .. } | Strategy::TopKTemp { .. } => {
                Err(Error::Config(format!("invalid top-k parameters in {:?}", self.strategy)))
            }
        }
    }

    /// Short label used in reports, e.g. `top_k_temp(5,0.5)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Greedy => "greedy".into(),
            Strategy::Direct => "direct".into(),
            Strategy::TopP { p } => format!("top_p({p})"),
            Strategy::TopK { k } => format!("top_k({k})"),
            Strategy::TopKTemp { k, temperature } => format!("top_k_temp({k},{temperature})"),
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.strategy == Strategy::Greedy
    }
}

/// The six sampling strategies compared in the sampler sweep.
pub fn sampler_roster(seed: u64) -> Vec<SamplerConfig> {
    [
        Strategy::Greedy,
        Strategy::Direct,
        Strategy::TopP { p: 0.9 },
        Strategy::TopK { k: 5 },
        Strategy::TopKTemp { k: 5, temperature: 0.5 },
        Strategy::TopKTemp { k: 5, temperature: 1.5 },
    ]
    .into_iter()
    .map(|strategy| SamplerConfig { strategy, seed })
    .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampler {
    strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<RawSampler> for SamplerConfig {
    type Error = Error;

    fn try_from(raw: RawSampler) -> Result<Self> {
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::Config(format!("sampler {} needs `{what}`", raw.strategy)))
        };
        let strategy = match raw.strategy.as_str() {
            "greedy" => Strategy::Greedy,
            "direct" => Strategy::Direct,
            "top_p" => Strategy::TopP { p: need(raw.p, "p")? },
            "top_k" => Strategy::TopK {
                k: raw.k.ok_or_else(|| Error::Config("sampler top_k needs `k`".into()))?,
            },
            "top_k_temp" => Strategy::TopKTemp {
                k: raw.k.ok_or_else(|| Error::Config("sampler top_k_temp needs `k`".into()))?,
                temperature: need(raw.temperature, "temperature")?,
            },
            other => return Err(Error::Config(format!("unknown sampler strategy `{other}`"))),
        };
        SamplerConfig::new(strategy, raw.seed)
    }
}

impl From<SamplerConfig> for RawSampler {
    fn from(cfg: SamplerConfig) -> Self {
        let mut raw = RawSampler {
            strategy: String::new(),
            p: None,
            k: None,
            temperature: None,
            seed: cfg.seed,
        };
        raw.strategy = match cfg.strategy {
            Strategy::Greedy => "greedy",
            Strategy::Direct => "direct",
            Strategy::TopP { p } => {
                raw.p = Some(p);
                "top_p"
            }
            Strategy::TopK { k } => {
                raw.k = Some(k);
                "top_k"
            }
            Strategy::TopKTemp { k, temperature } => {
                raw.k = Some(k);
                raw.temperature = Some(temperature);
                "top_k_temp"
            }
        }
        .into();
        raw
    }
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from `p` under `sampler`.
pub fn sample(p: &[f64], sampler: &SamplerConfig, rng: &mut Rng) -> Result<TokenId> {
    check_distribution(p)?;
    match sampler.strategy {
        Strategy::Greedy => Ok(argmax(p)),
        Strategy::Direct => Ok(categorical(p, rng)),
        Strategy::TopK { k } => Ok(truncated_draw(p, &top_k(p, k), rng)),
        Strategy::TopP { p: mass } => Ok(truncated_draw(p, &nucleus(p, mass), rng)),
        Strategy::TopKTemp { k, temperature } => {
            let tempered = temper(p, temperature);
            Ok(truncated_draw(&tempered, &top_k(&tempered, k), rng))
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Contract("empty distribution".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Contract("distribution has negative or non-finite entries".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("distribution sums to {total}")));
    }
    Ok(())
}

/// Indices by descending probability; ties keep ascending index order.
fn descending(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).expect("finite probabilities"));
    idx
}

fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx = descending(p);
    idx.truncate(k.min(p.len()));
    idx
}

/// Smallest descending prefix whose cumulative mass reaches `mass`.
fn nucleus(p: &[f64], mass: f64) -> Vec<usize> {
    let idx = descending(p);
    let mut cum = 0.0;
    let mut out = Vec::new();
    for i in idx {
        out.push(i);
        cum += p[i];
        if cum >= mass - 1e-12 {
            break;
        }
    }
    out
}

/// `p^(1/τ)` renormalised, computed in log space.
fn temper(p: &[f64], temperature: f64) -> Vec<f64> {
    let logs: Vec<f64> = p
        .iter()
        .map(|&v| if v > 0.0 { v.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn truncated_draw(p: &[f64], keep: &[usize], rng: &mut Rng) -> usize {
    let total: f64 = keep.iter().map(|&i| p[i]).sum();
    if total <= 0.0 {
        return keep[0];
    }
    let u = rng.next_f64() * total;
    let mut cum = 0.0;
    for &i in keep {
        cum += p[i];
        if u < cum {
            return i;
        }
    }
    *keep.iter().rev().find(|&&i| p[i] > 0.0).unwrap_or(&keep[0])
}

fn categorical(p: &[f64], rng: &mut Rng) -> usize {
    let all: Vec<usize> = (0..p.len()).collect();
    truncated_draw(p, &all, rng)
}
