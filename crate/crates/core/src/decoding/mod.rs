//! Autoregressive decoding with regular, contrastive (visual or
//! instruction corruption) and attention-rewriting variants.

mod contrastive;
mod sampler;

pub use contrastive::{distort_instruction, distort_visual, vcd_step, Disruption, VisualDistortion};
pub use sampler::{argmax, sample, sampler_roster, SamplerConfig, Strategy};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{make_vaf_hook, HeadSelection, VafConfig, VafHook};
use crate::model::{forward, CallCounter, ForwardOptions, ModelParams, SegmentMap};
use crate::rng::Rng;
use crate::tensor::{softmax, Tensor};
use crate::vocab::{TokenId, END_OF_ANSWER};

/// Stream index used for corruption noise, separate from the sampler stream.
const DISTORTION_STREAM: u64 = 0x5643_4421;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Regular,
    Vcd {
        #[serde(default = "default_alpha_cd")]
        alpha_cd: f64,
        #[serde(default = "default_noise_sigma")]
        noise_sigma: f64,
    },
    Icd {
        #[serde(default = "default_alpha_cd")]
        alpha_cd: f64,
        #[serde(default)]
        disruption: Disruption,
    },
    Vaf(VafConfig),
}

pub fn default_alpha_cd() -> f64 {
    1.0
}

pub fn default_noise_sigma() -> f64 {
    1.0
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Regular => "regular",
            Method::Vcd { .. } => "vcd",
            Method::Icd { .. } => "icd",
            Method::Vaf(_) => "vaf",
        }
    }

    /// Forward passes spent per generated token.
    pub fn passes_per_token(&self) -> u64 {
        match self {
            Method::Vcd { .. } | Method::Icd { .. } => 2,
            Method::Regular | Method::Vaf(_) => 1,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match self {
            Method::Regular => Ok(()),
            Method::Vcd { alpha_cd, noise_sigma } => {
                check_alpha_cd(*alpha_cd)?;
                if !(*noise_sigma > 0.0 && noise_sigma.is_finite()) {
                    return Err(Error::Config(format!("noise_sigma must be positive, got {noise_sigma}")));
                }
                Ok(())
            }
            Method::Icd { alpha_cd, .. } => check_alpha_cd(*alpha_cd),
            Method::Vaf(cfg) => cfg.validate(n_layers),
        }
    }
}

fn check_alpha_cd(a: f64) -> Result<()> {
    if a >= 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha_cd must be a finite value >= 0, got {a}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub method: Method,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn default_max_new_tokens() -> usize {
    1
}

impl DecodeConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            max_new_tokens: default_max_new_tokens(),
            sampler: SamplerConfig::greedy(),
        }
    }

    pub fn with_sampler(mut self, sampler: SamplerConfig) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn with_max_new_tokens(mut self, n: usize) -> Self {
        self.max_new_tokens = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub forward_calls: u64,
    pub wall_ns_total: u64,
    pub wall_ns_per_example: u64,
    pub examples: u64,
}

impl CostReport {
    pub fn single(forward_calls: u64, wall_ns: u64) -> Self {
        Self {
            forward_calls,
            wall_ns_total: wall_ns,
            wall_ns_per_example: wall_ns,
            examples: 1,
        }
    }

    /// Sums calls and wall time over several reports.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a CostReport>) -> Self {
        let mut out = CostReport::default();
        for r in reports {
            out.forward_calls += r.forward_calls;
            out.wall_ns_total += r.wall_ns_total;
            out.examples += r.examples;
        }
        out.wall_ns_per_example = out.wall_ns_total.checked_div(out.examples).unwrap_or(0);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated tokens, including a final end-of-answer token if one was
    /// produced.
    pub tokens: Vec<TokenId>,
    /// Next-token distribution at every step.
    pub distributions: Vec<Vec<f64>>,
    pub cost: CostReport,
}

impl Decoded {
    pub fn first_token(&self) -> Option<TokenId> {
        self.tokens.first().copied()
    }
}

/// Generates a response to `sys ++ v ++ x`.
pub fn decode(
    params: &ModelParams,
    v: &[TokenId],
    x: &[TokenId],
    sys: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    decode_with_selection(params, v, x, sys, cfg, HeadSelection::PerInput)
}

/// As [`decode`], with an explicit head selection for the attention rewrite.
pub fn decode_with_selection(
    params: &ModelParams,
    v: &[TokenId],
    x: &[TokenId],
    sys: &[TokenId],
    cfg: &DecodeConfig,
    selection: HeadSelection,
) -> Result<Decoded> {
    let model = params.config();
    if cfg.max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be at least 1".into()));
    }
    cfg.method.validate(model.n_layers)?;
    cfg.sampler.validate()?;
    let prompt_len = sys.len() + v.len() + x.len();
    let needed = prompt_len + cfg.max_new_tokens - 1;
    if needed > model.max_seq {
        return Err(Error::Sequence {
            len: needed,
            max: model.max_seq,
        });
    }

    let start = Instant::now();
    let counter = CallCounter::new();
    let mut sample_rng = Rng::new(cfg.sampler.seed);
    let mut distort_rng = Rng::derive(cfg.sampler.seed, DISTORTION_STREAM);

    let hook: Option<VafHook> = match &cfg.method {
        Method::Vaf(vaf) => Some(make_vaf_hook(vaf, model.n_layers, selection)?),
        _ => None,
    };
    let visual_noise = match &cfg.method {
        Method::Vcd { noise_sigma, .. } => Some(distort_visual(v, model.d_model, *noise_sigma, &mut distort_rng)?),
        _ => None,
    };
    let disrupted = match &cfg.method {
        Method::Icd { disruption, .. } => Some(distort_instruction(x, *disruption, &mut distort_rng)?),
        _ => None,
    };

    let mut tokens: Vec<TokenId> = [sys, v, x].concat();
    let mut seg = SegmentMap::from_lengths(sys.len(), v.len(), x.len(), 0);
    let mut generated = Vec::new();
    let mut distributions = Vec::new();

    for _ in 0..cfg.max_new_tokens {
        let base_opts = ForwardOptions {
            hook: hook.as_ref().map(|h| h as _),
            counter: Some(&counter),
            ..Default::default()
        };
        let logit = last_row(forward(params, &tokens, &seg, base_opts)?.logits());
        let dist = match &cfg.method {
            Method::Regular | Method::Vaf(_) => softmax(&logit),
            Method::Vcd { alpha_cd, .. } => {
                let offset = visual_noise.as_ref().expect("noise drawn").offset_for(&seg)?;
                let opts = ForwardOptions {
                    embedding_offset: Some(&offset),
                    counter: Some(&counter),
                    ..Default::default()
                };
                let distorted = last_row(forward(params, &tokens, &seg, opts)?.logits());
                vcd_step(&logit, &distorted, *alpha_cd)?
            }
            Method::Icd { alpha_cd, .. } => {
                let xd = disrupted.as_ref().expect("instruction disrupted");
                let alt: Vec<TokenId> = [sys, v, xd, &generated].concat();
                let opts = ForwardOptions {
                    counter: Some(&counter),
                    ..Default::default()
                };
                let distorted = last_row(forward(params, &alt, &seg, opts)?.logits());
                vcd_step(&logit, &distorted, *alpha_cd)?
            }
        };
        let y = sample(&dist, &cfg.sampler, &mut sample_rng)?;
        distributions.push(dist);
        generated.push(y);
        if y == END_OF_ANSWER || generated.len() == cfg.max_new_tokens {
            break;
        }
        tokens.push(y);
        seg.push_response();
    }

    let wall = start.elapsed().as_nanos() as u64;
    Ok(Decoded {
        tokens: generated,
        distributions,
        cost: CostReport::single(counter.get(), wall),
    })
}

fn last_row(logits: &Tensor) -> Vec<f64> {
    logits.row(logits.rows() - 1).to_vec()
}
