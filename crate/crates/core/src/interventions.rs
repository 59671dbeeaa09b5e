//! Visual amplification of attention scores.
//!
//! In a window of middle layers, the heads that already give the most
//! attention to visual tokens have their text→visual scores scaled up by
//! `1 + alpha` and their text→system scores scaled down by `1 − beta`:
//!
//! ```text
//! Ẑ = Z + α·M_enh∘Z − β·M_sup∘Z
//! M_enh(i, j) = [i ∈ rows, j ∈ 𝒱]      M_sup(i, j) = [i ∈ rows, j ∈ 𝒮]
//! ```
//!
//! The rewrite is multiplicative, so a negative score becomes more negative
//! under enhancement. Every sign is preserved.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookSite, InterventionHook, SegmentMap};
use crate::tensor::{is_masked, Tensor};

/// Which query rows the rewrite touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceRows {
    /// Instruction positions only.
    InsOnly,
    /// Instruction positions and every generated position.
    #[default]
    InsAndResp,
}

impl EnhanceRows {
    pub fn rows(self, seg: &SegmentMap) -> Range<usize> {
        match self {
            EnhanceRows::InsOnly => seg.instruction(),
            EnhanceRows::InsAndResp => seg.instruction().start..seg.response().end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VafConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub layer_lo: usize,
    pub layer_hi: usize,
    #[serde(default = "default_head_fraction")]
    pub head_fraction: f64,
    #[serde(default)]
    pub enhance_rows: EnhanceRows,
}

fn default_alpha() -> f64 {
    0.15
}

fn default_beta() -> f64 {
    0.1
}

fn default_head_fraction() -> f64 {
    0.5
}

/// Middle-layer window for a model of `n_layers`: layers
/// `⌊0.28·L⌋ ..= ⌈0.44·L⌉ − 1` (8..=14 for 32 layers, 2..=3 for 8).
pub fn default_window(n_layers: usize) -> (usize, usize) {
    let lo = 28 * n_layers / 100;
    let hi = (44 * n_layers).div_ceil(100).saturating_sub(1);
    (lo, hi.max(lo))
}

/// Early, middle and late thirds of the depth (0..=2, 3..=5, 6..=7 for 8
/// layers).
pub fn thirds(n_layers: usize) -> [(usize, usize); 3] {
    let b1 = n_layers.div_ceil(3);
    let b2 = (2 * n_layers).div_ceil(3);
    [(0, b1 - 1), (b1, b2 - 1), (b2, n_layers - 1)]
}

impl VafConfig {
    /// Default coefficients with the scaled middle window for `n_layers`.
    pub fn for_depth(n_layers: usize) -> Self {
        let (layer_lo, layer_hi) = default_window(n_layers);
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            layer_lo,
            layer_hi,
            head_fraction: default_head_fraction(),
            enhance_rows: EnhanceRows::default(),
        }
    }

    pub fn with_coefficients(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_window(mut self, lo: usize, hi: usize) -> Self {
        self.layer_lo = lo;
        self.layer_hi = hi;
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        check_coefficients(self.alpha, self.beta)?;
        if self.layer_lo > self.layer_hi {
            return Err(Error::Config(format!(
                "empty layer window {}..={}",
                self.layer_lo, self.layer_hi
            )));
        }
        if self.layer_hi >= n_layers {
            return Err(Error::Config(format!(
                "layer window ends at {} but the model has {n_layers} layers",
                self.layer_hi
            )));
        }
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(Error::Config(format!("head_fraction {} outside (0, 1]", self.head_fraction)));
        }
        Ok(())
    }

    pub fn in_window(&self, layer: usize) -> bool {
        (self.layer_lo..=self.layer_hi).contains(&layer)
    }
}

fn check_coefficients(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be a finite value >= 0, got {alpha}")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// Attention mass that instruction queries place on system, visual and
/// instruction keys.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AllocationTriple {
    pub sys: f64,
    pub vis: f64,
    pub ins: f64,
}

/// Sums `A(i, j)` over `i ∈ 𝒯` and `j` in each of 𝒮, 𝒱, 𝒯. Works for a
/// single head's weights or for head-averaged weights.
pub fn attention_allocation(weights: &Tensor, seg: &SegmentMap) -> Result<AllocationTriple> {
    let n = seg.len();
    if weights.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "attention matrix {:?} does not match {n} segment positions",
            weights.shape()
        )));
    }
    let rows = seg.instruction();
    if rows.is_empty() {
        return Err(Error::Contract("attention allocation needs instruction tokens".into()));
    }
    let block = |cols: Range<usize>| -> f64 {
        rows.clone()
            .map(|i| weights.row(i)[cols.clone()].iter().sum::<f64>())
            .sum()
    };
    Ok(AllocationTriple {
        sys: block(seg.system()),
        vis: block(seg.visual()),
        ins: block(seg.instruction()),
    })
}

/// The `⌈fraction·H⌉` heads with the largest visual allocation, ascending by
/// index. Ties go to the lower head index.
pub fn select_visual_heads(lambda_vis: &[f64], fraction: f64) -> Vec<usize> {
    let h = lambda_vis.len();
    if h == 0 {
        return Vec::new();
    }
    let count = ((fraction * h as f64) - 1e-9).ceil().clamp(1.0, h as f64) as usize;
    let mut order: Vec<usize> = (0..h).collect();
    // Stable sort keeps lower indices first among equal values; NaN sorts last.
    order.sort_by(|&a, &b| {
        let (x, y) = (lambda_vis[a], lambda_vis[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => y.partial_cmp(&x).expect("non-NaN"),
        }
    });
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Boolean enhancement and suppression masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    n: usize,
    enh: Vec<bool>,
    sup: Vec<bool>,
}

impl MaskPair {
    pub fn new(seg: &SegmentMap, rows: EnhanceRows) -> Self {
        let n = seg.len();
        let mut enh = vec![false; n * n];
        let mut sup = vec![false; n * n];
        for i in rows.rows(seg) {
            for j in seg.visual() {
                enh[i * n + j] = true;
            }
            for j in seg.system() {
                sup[i * n + j] = true;
            }
        }
        Self { n, enh, sup }
    }

    pub fn enh(&self, i: usize, j: usize) -> bool {
        self.enh[i * self.n + j]
    }

    pub fn sup(&self, i: usize, j: usize) -> bool {
        self.sup[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Applies the enhancement/suppression rewrite to one score matrix.
/// Masked entries and entries above the diagonal are never modified.
pub fn vaf_rewrite(
    scores: &Tensor,
    seg: &SegmentMap,
    alpha: f64,
    beta: f64,
    rows: EnhanceRows,
) -> Result<Tensor> {
    check_coefficients(alpha, beta)?;
    let n = seg.len();
    if scores.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "score matrix {:?} does not match {n} segment positions",
            scores.shape()
        )));
    }
    let (enh, sup) = (1.0 + alpha, 1.0 - beta);
    let mut out = scores.clone();
    for i in rows.rows(seg) {
        let row = out.row_mut(i);
        for j in seg.visual().filter(|&j| j <= i) {
            if !is_masked(row[j]) {
                row[j] *= enh;
            }
        }
        for j in seg.system().filter(|&j| j <= i) {
            if !is_masked(row[j]) {
                row[j] *= sup;
            }
        }
    }
    Ok(out)
}

/// Where the rewritten heads come from.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSelection {
    /// Rank heads on the current input by their unmodified visual allocation.
    PerInput,
    /// Fixed head sets per layer (layers absent from the map are untouched).
    Fixed(BTreeMap<usize, Vec<usize>>),
}

/// Intervention hook applying [`vaf_rewrite`] to the selected heads of the
/// window layers.
#[derive(Debug, Clone)]
pub struct VafHook {
    cfg: VafConfig,
    selection: HeadSelection,
}

pub fn make_vaf_hook(cfg: &VafConfig, n_layers: usize, selection: HeadSelection) -> Result<VafHook> {
    cfg.validate(n_layers)?;
    Ok(VafHook {
        cfg: cfg.clone(),
        selection,
    })
}

impl VafHook {
    pub fn config(&self) -> &VafConfig {
        &self.cfg
    }

    /// Heads rewritten at `layer` given the layer's unmodified scores.
    pub fn selected_heads(&self, layer: usize, layer_scores: &[Tensor], seg: &SegmentMap) -> Result<Vec<usize>> {
        if !self.cfg.in_window(layer) {
            return Ok(Vec::new());
        }
        match &self.selection {
            HeadSelection::Fixed(map) => Ok(map.get(&layer).cloned().unwrap_or_default()),
            HeadSelection::PerInput => {
                let lambdas = layer_scores
                    .iter()
                    .map(|z| {
                        let a = causal_softmax(z)?;
                        Ok(attention_allocation(&a, seg)?.vis)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(select_visual_heads(&lambdas, self.cfg.head_fraction))
            }
        }
    }
}

impl InterventionHook for VafHook {
    fn rewrite(&self, site: &HookSite<'_>, scores: &Tensor) -> Result<Option<Tensor>> {
        if !self.cfg.in_window(site.layer) {
            return Ok(None);
        }
        let heads = self.selected_heads(site.layer, site.layer_scores, site.seg)?;
        if !heads.contains(&site.head) {
            return Ok(None);
        }
        vaf_rewrite(scores, site.seg, self.cfg.alpha, self.cfg.beta, self.cfg.enhance_rows).map(Some)
    }
}

/// Softmax of `z` after writing the sentinel above the diagonal.
pub fn causal_softmax(z: &Tensor) -> Result<Tensor> {
    let mut m = z.clone();
    for i in 0..m.rows() {
        for x in m.row_mut(i).iter_mut().skip(i + 1) {
            *x = crate::tensor::MASK_SENTINEL;
        }
    }
    m.softmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_scaling() {
        assert_eq!(default_window(32), (8, 14));
        assert_eq!(default_window(8), (2, 3));
        assert_eq!(thirds(8), [(0, 2), (3, 5), (6, 7)]);
    }

    #[test]
    fn allocation_of_uniform_row() {
        // |S|=2, |V|=3, |T|=1; the instruction row sees six positions uniformly.
        let seg = SegmentMap::from_lengths(2, 3, 1, 0);
        let z = Tensor::zeros(&[6, 6]);
        let a = causal_softmax(&z).unwrap();
        let t = attention_allocation(&a, &seg).unwrap();
        assert!((t.sys - 2.0 / 6.0).abs() < 1e-12);
        assert!((t.vis - 3.0 / 6.0).abs() < 1e-12);
        assert!((t.ins - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn allocation_ignores_response_columns() {
        let seg = SegmentMap::from_lengths(1, 1, 1, 1);
        let mut a = Tensor::zeros(&[4, 4]);
        // Not row-stochastic on purpose: all instruction mass on a response column.
        a.set(2, 3, 1.0);
        let t = attention_allocation(&a, &seg).unwrap();
        assert_eq!(t, AllocationTriple::default());
    }

    #[test]
    fn allocation_needs_instructions() {
        let seg = SegmentMap::from_lengths(1, 1, 0, 0);
        let a = causal_softmax(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(attention_allocation(&a, &seg), Err(Error::Contract(_))));
    }

    #[test]
    fn head_selection_examples() {
        assert_eq!(select_visual_heads(&[0.1, 0.4, 0.3, 0.2], 0.5), vec![1, 2]);
        assert_eq!(select_visual_heads(&[0.9], 0.5), vec![0]);
        assert_eq!(select_visual_heads(&[0.2; 4], 0.5), vec![0, 1]);
        assert_eq!(select_visual_heads(&[0.1, 0.2, 0.3], 1.0), vec![0, 1, 2]);
        assert_eq!(select_visual_heads(&[0.1; 10], 0.3), vec![0, 1, 2]);
    }

    #[test]
    fn rewrite_examples() {
        let seg = SegmentMap::from_lengths(1, 1, 1, 0);
        let z = Tensor::from_rows(&[vec![0.5, -1.0, 3.0], vec![0.2, 0.3, 7.0], vec![1.0, 2.0, -0.5]]).unwrap();
        let same = vaf_rewrite(&z, &seg, 0.0, 0.0, EnhanceRows::InsAndResp).unwrap();
        assert_eq!(same, z);

        let r = vaf_rewrite(&z, &seg, 0.15, 0.1, EnhanceRows::InsAndResp).unwrap();
        assert!((r.at(2, 1) - 2.3).abs() < 1e-12);
        assert!((r.at(2, 0) - 0.9).abs() < 1e-12);
        assert_eq!(r.at(2, 2), -0.5);
        assert_eq!(r.row(0), z.row(0));
        assert_eq!(r.row(1), z.row(1));
    }

    #[test]
    fn rewrite_rejects_bad_coefficients() {
        let seg = SegmentMap::from_lengths(1, 1, 1, 0);
        let z = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            vaf_rewrite(&z, &seg, -0.1, 0.0, EnhanceRows::InsOnly),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            vaf_rewrite(&z, &seg, 0.1, 1.0, EnhanceRows::InsOnly),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masks_are_disjoint() {
        let seg = SegmentMap::from_lengths(2, 3, 2, 2);
        let m = MaskPair::new(&seg, EnhanceRows::InsAndResp);
        for i in 0..m.len() {
            for j in 0..m.len() {
                assert!(!(m.enh(i, j) && m.sup(i, j)));
                let row_in = (5..9).contains(&i);
                assert_eq!(m.enh(i, j), row_in && (2..5).contains(&j));
                assert_eq!(m.sup(i, j), row_in && j < 2);
            }
        }
        let ins = MaskPair::new(&seg, EnhanceRows::InsOnly);
        assert!(!ins.enh(7, 2));
    }

    #[test]
    fn window_validation() {
        let cfg = VafConfig::for_depth(8).with_window(5, 4);
        assert!(matches!(cfg.validate(8), Err(Error::Config(_))));
        let cfg = VafConfig::for_depth(8).with_window(6, 8);
        assert!(matches!(make_vaf_hook(&cfg, 8, HeadSelection::PerInput), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_keys() {
        let cfg = VafConfig::for_depth(8);
        let v = serde_json::to_value(&cfg).unwrap();
        for key in ["alpha", "beta", "layer_lo", "layer_hi", "head_fraction", "enhance_rows"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["enhance_rows"], "ins_and_resp");
        let back: VafConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<VafConfig>(r#"{"layer_lo":1,"layer_hi":2,"gamma":1}"#).is_err());
    }
}
