//! Adam training on next-token cross-entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{forward, ForwardOptions};
use crate::model::params::ModelParams;
use crate::model::segment::SegmentMap;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::TokenId;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// One supervised sequence: inputs, their segments, the next-token targets
/// and which positions count toward the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub seg: SegmentMap,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl Sequence {
    /// Builds the teacher-forced sequence for `prompt` segments followed by
    /// `response` tokens. Every position whose target is a response token is
    /// supervised.
    pub fn from_parts(
        system: &[TokenId],
        visual: &[TokenId],
        instruction: &[TokenId],
        response: &[TokenId],
    ) -> Result<Self> {
        if response.is_empty() {
            return Err(Error::Contract("a training sequence needs a response".into()));
        }
        let full: Vec<TokenId> = [system, visual, instruction, response].concat();
        let prompt = full.len() - response.len();
        if prompt == 0 {
            return Err(Error::Contract("a training sequence needs a prompt".into()));
        }
        let tokens = full[..full.len() - 1].to_vec();
        let targets = full[1..].to_vec();
        let mask = (0..tokens.len()).map(|t| t + 1 >= prompt).collect();
        let seg = SegmentMap::from_lengths(system.len(), visual.len(), instruction.len(), response.len() - 1);
        Ok(Self { tokens, seg, targets, mask })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 2e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean example loss of each epoch (measured before each batch's update).
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                if delta != 0.0 {
                    *w -= delta;
                }
            }
        }
    }
}

/// Loss and parameter gradients of one sequence.
pub fn sequence_grad(params: &ModelParams, seq: &Sequence) -> Result<(f64, Vec<Tensor>)> {
    let mut trace = forward(
        params,
        &seq.tokens,
        &seq.seg,
        ForwardOptions {
            track_params: true,
            ..ForwardOptions::default()
        },
    )?;
    let loss = trace.loss_next_token(&seq.targets, &seq.mask)?;
    trace.backward(&loss)?;
    let grads = trace.param_grads().expect("parameters were tracked");
    Ok((loss.value, grads))
}

/// Mini-batch Adam. Batch order is a seeded shuffle per epoch; gradients
/// within a batch are computed in parallel and summed in index order, so the
/// result does not depend on scheduling.
pub fn train(params: ModelParams, corpus: &[Sequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} is invalid", cfg.lr)));
    }
    let mut params = params;
    let mut adam = Adam::new(&params);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| sequence_grad(&params, &corpus[i]))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Numeric(_) | Error::DegenerateRow { .. } => Error::Training { step, loss: f64::NAN },
                    other => other,
                })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v * scale;
                    }
                }
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training { step, loss: batch_loss * scale });
            }
            epoch_total += batch_loss;
            adam.step(&mut params, &grads, cfg.lr);
            step += 1;
        }
        epoch_losses.push(epoch_total / corpus.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        steps: step,
    })
}
