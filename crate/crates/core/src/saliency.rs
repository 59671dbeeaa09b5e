//! Gradient-times-attention saliency and the per-layer flow profile.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::attention_allocation;
use crate::model::{forward, ForwardOptions, ModelParams, SegmentMap, Sequence};
use crate::report::{line_chart, parse_csv, read_csv, write_csv, Series};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// How per-head products are combined inside the absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    #[default]
    Sum,
    /// Sum divided by the head count.
    Mean,
}

/// `I_l`: nonnegative edge importances for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMatrix {
    pub layer: usize,
    pub values: Tensor,
}

/// `I_l = |Σ_h A_{h,l} ⊙ ∂L/∂A_{h,l}|` for every layer, where `L` is the
/// next-token cross-entropy over the positions selected by `mask`.
pub fn attention_saliency(
    params: &ModelParams,
    tokens: &[TokenId],
    seg: &SegmentMap,
    targets: &[TokenId],
    mask: &[bool],
    reduction: HeadReduction,
) -> Result<Vec<SaliencyMatrix>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("saliency needs at least one supervised position".into()));
    }
    let opts = ForwardOptions {
        retain: true,
        track_params: true,
        ..Default::default()
    };
    let mut trace = forward(params, tokens, seg, opts)?;
    let loss = trace.loss_next_token(targets, mask)?;
    trace.backward(&loss)?;
    saliency_from_trace(&trace, reduction)
}

fn saliency_from_trace(trace: &crate::model::ForwardTrace<'_>, reduction: HeadReduction) -> Result<Vec<SaliencyMatrix>> {
    let n_heads = trace.n_heads();
    let scale = match reduction {
        HeadReduction::Sum => 1.0,
        HeadReduction::Mean => 1.0 / n_heads as f64,
    };
    (0..trace.n_layers())
        .map(|layer| {
            let first = trace.weights(layer, 0).expect("retained trace");
            let mut acc = Tensor::zeros(first.shape());
            for head in 0..n_heads {
                let a = trace.weights(layer, head).expect("retained trace");
                if let Some(g) = trace.weight_grad(layer, head) {
                    for ((s, &x), &y) in acc.data_mut().iter_mut().zip(a.data()).zip(g.data()) {
                        *s += x * y;
                    }
                }
            }
            Ok(SaliencyMatrix {
                layer,
                values: acc.map(|v| (v * scale).abs()),
            })
        })
        .collect()
}

fn check_square(i: &SaliencyMatrix, seg: &SegmentMap) -> Result<()> {
    let n = seg.len();
    if i.values.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "saliency matrix {:?} does not match {n} positions",
            i.values.shape()
        )));
    }
    Ok(())
}

/// Mean of `I(i, j)` over visual pairs with `i ≥ j`.
pub fn s_vv(i: &SaliencyMatrix, seg: &SegmentMap) -> Result<f64> {
    check_square(i, seg)?;
    let vis = seg.visual();
    if vis.is_empty() {
        return Err(Error::Contract("S_vv needs visual tokens".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in vis.clone() {
        for c in vis.start..=r {
            total += i.values.at(r, c);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean of `I(i, j)` over instruction rows `i` and visual columns `j`.
pub fn s_vt(i: &SaliencyMatrix, seg: &SegmentMap) -> Result<f64> {
    check_square(i, seg)?;
    let (vis, ins) = (seg.visual(), seg.instruction());
    if vis.is_empty() || ins.is_empty() {
        return Err(Error::Contract("S_vt needs visual and instruction tokens".into()));
    }
    let total: f64 = ins
        .clone()
        .map(|r| i.values.row(r)[vis.clone()].iter().sum::<f64>())
        .sum();
    Ok(total / (vis.len() * ins.len()) as f64)
}

/// One layer of a [`LayerProfile`]; also the profile CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub s_vv: f64,
    pub s_vt: f64,
    pub lambda_sys: f64,
    pub lambda_vis: f64,
    pub lambda_ins: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub rows: Vec<ProfileRow>,
}

/// Flow metrics and head-averaged attention allocation for every layer of
/// one supervised sequence.
pub fn example_profile(params: &ModelParams, seq: &Sequence, reduction: HeadReduction) -> Result<Vec<ProfileRow>> {
    if !seq.mask.iter().any(|&m| m) {
        return Err(Error::Contract("saliency needs at least one supervised position".into()));
    }
    let opts = ForwardOptions {
        retain: true,
        track_params: true,
        ..Default::default()
    };
    let mut trace = forward(params, &seq.tokens, &seq.seg, opts)?;
    let loss = trace.loss_next_token(&seq.targets, &seq.mask)?;
    trace.backward(&loss)?;
    let sal = saliency_from_trace(&trace, reduction)?;
    sal.iter()
        .map(|m| {
            let lam = attention_allocation(&trace.mean_weights(m.layer).expect("retained trace"), &seq.seg)?;
            Ok(ProfileRow {
                layer: m.layer,
                s_vv: s_vv(m, &seq.seg)?,
                s_vt: s_vt(m, &seq.seg)?,
                lambda_sys: lam.sys,
                lambda_vis: lam.vis,
                lambda_ins: lam.ins,
            })
        })
        .collect()
}

/// Averages [`example_profile`] over `sample`. Examples run in parallel;
/// the average is accumulated in sample order.
pub fn layer_profile(params: &ModelParams, sample: &[Sequence], reduction: HeadReduction) -> Result<LayerProfile> {
    if sample.is_empty() {
        return Err(Error::Contract("layer profile needs a nonempty sample".into()));
    }
    let per: Vec<Vec<ProfileRow>> = sample
        .par_iter()
        .map(|s| example_profile(params, s, reduction))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let n_layers = params.config().n_layers;
    let rows = (0..n_layers)
        .map(|layer| {
            let mut r = ProfileRow {
                layer,
                s_vv: 0.0,
                s_vt: 0.0,
                lambda_sys: 0.0,
                lambda_vis: 0.0,
                lambda_ins: 0.0,
            };
            for ex in &per {
                let e = &ex[layer];
                r.s_vv += e.s_vv;
                r.s_vt += e.s_vt;
                r.lambda_sys += e.lambda_sys;
                r.lambda_vis += e.lambda_vis;
                r.lambda_ins += e.lambda_ins;
            }
            r.s_vv /= n;
            r.s_vt /= n;
            r.lambda_sys /= n;
            r.lambda_vis /= n;
            r.lambda_ins /= n;
            r
        })
        .collect();
    Ok(LayerProfile { rows })
}

impl LayerProfile {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        crate::report::csv_bytes(&self.rows)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        Ok(Self { rows: parse_csv(bytes)? })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self { rows: read_csv(path)? })
    }

    /// Chart of the two flow metrics across layers.
    pub fn flow_svg(&self) -> String {
        line_chart(
            "Information flow by layer",
            "layer",
            &[
                Series::new("S_vv", self.rows.iter().map(|r| r.s_vv).collect()),
                Series::new("S_vt", self.rows.iter().map(|r| r.s_vt).collect()),
            ],
        )
    }

    /// Chart of instruction-row attention allocation across layers.
    pub fn allocation_svg(&self) -> String {
        line_chart(
            "Attention allocation by layer",
            "layer",
            &[
                Series::new("system", self.rows.iter().map(|r| r.lambda_sys).collect()),
                Series::new("visual", self.rows.iter().map(|r| r.lambda_vis).collect()),
                Series::new("instruction", self.rows.iter().map(|r| r.lambda_ins).collect()),
            ],
        )
    }
}
