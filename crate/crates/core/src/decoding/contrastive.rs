//! Contrastive decoding: the logit combination and the two input
//! corruptions (noisy visual embeddings, disrupted instructions).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegmentMap;
use crate::rng::Rng;
use crate::tensor::{softmax, Tensor};
use crate::vocab::{TokenId, DISTURBANCE};

/// `softmax[(1 + α)·logit − α·logit_distorted]`.
pub fn vcd_step(logit: &[f64], logit_distorted: &[f64], alpha_cd: f64) -> Result<Vec<f64>> {
    if logit.len() != logit_distorted.len() {
        return Err(Error::Dimension(format!(
            "logit vectors differ in length: {} vs {}",
            logit.len(),
            logit_distorted.len()
        )));
    }
    let combined: Vec<f64> = logit
        .iter()
        .zip(logit_distorted)
        .map(|(&l, &d)| (1.0 + alpha_cd) * l - alpha_cd * d)
        .collect();
    Ok(softmax(&combined))
}

/// Gaussian noise added to the visual token embeddings of the contrast pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualDistortion {
    noise: Tensor,
}

impl VisualDistortion {
    /// `[|v| × d_model]` noise rows, one per visual token.
    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    /// Full-sequence embedding offset: noise on the visual rows, exact zeros
    /// everywhere else.
    pub fn offset_for(&self, seg: &SegmentMap) -> Result<Tensor> {
        let vis = seg.visual();
        if vis.len() != self.noise.rows() {
            return Err(Error::Dimension(format!(
                "distortion covers {} visual tokens, sequence has {}",
                self.noise.rows(),
                vis.len()
            )));
        }
        let d = self.noise.cols();
        let mut out = Tensor::zeros(&[seg.len(), d]);
        for (k, pos) in vis.enumerate() {
            out.row_mut(pos).copy_from_slice(self.noise.row(k));
        }
        Ok(out)
    }
}

/// Draws i.i.d. `N(0, σ²)` noise for each visual token.
pub fn distort_visual(v: &[TokenId], d_model: usize, sigma: f64, rng: &mut Rng) -> Result<VisualDistortion> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be positive, got {sigma}")));
    }
    if v.is_empty() {
        return Err(Error::Contract("no visual tokens to distort".into()));
    }
    let data = (0..v.len() * d_model).map(|_| sigma * rng.normal()).collect();
    Ok(VisualDistortion {
        noise: Tensor::matrix(v.len(), d_model, data)?,
    })
}

/// How the instruction is corrupted for the contrast pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Disruption {
    /// Seeded uniform permutation of the instruction tokens.
    #[default]
    Shuffle,
    /// Every instruction token replaced by the disturbance token.
    Replace,
}

pub fn distort_instruction(x: &[TokenId], spec: Disruption, rng: &mut Rng) -> Result<Vec<TokenId>> {
    if x.is_empty() {
        return Err(Error::Contract("cannot disrupt an empty instruction".into()));
    }
    Ok(match spec {
        Disruption::Shuffle => {
            let mut out = x.to_vec();
            rng.shuffle(&mut out);
            out
        }
        Disruption::Replace => vec![DISTURBANCE; x.len()],
    })
}
