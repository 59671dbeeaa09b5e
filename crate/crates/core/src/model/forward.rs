//! Pre-norm causal transformer forward pass with an attention-score hook.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::params::{block_offset, ModelParams};
use crate::model::segment::SegmentMap;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// Where a hook is being invoked. `layer_scores` holds the unmodified
/// scores of every head in the layer, so a hook can rank heads before it
/// rewrites any of them.
pub struct HookSite<'s> {
    pub layer: usize,
    pub head: usize,
    pub seg: &'s SegmentMap,
    pub layer_scores: &'s [Tensor],
}

/// Rewrites attention scores `Z = QKᵀ/√d_head` after scaling and before
/// causal masking and softmax.
///
/// Returning `None` leaves the scores untouched. A returned matrix must keep
/// the shape and must not change any entry above the diagonal; the forward
/// pass checks both. Gradients flow straight through a rewrite.
pub trait InterventionHook: Send + Sync {
    fn rewrite(&self, site: &HookSite<'_>, scores: &Tensor) -> Result<Option<Tensor>>;
}

/// Returns every score matrix unchanged (as a fresh copy).
pub struct IdentityHook;

impl InterventionHook for IdentityHook {
    fn rewrite(&self, _site: &HookSite<'_>, scores: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(scores.clone()))
    }
}

/// Counts model evaluations. Shared by reference; safe across threads.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'h> {
    pub hook: Option<&'h dyn InterventionHook>,
    /// Keep per-head score and weight matrices in the trace.
    pub retain: bool,
    /// Record parameters as differentiable leaves.
    pub track_params: bool,
    /// Added to the summed token and position embeddings (`[seq × d_model]`).
    pub embedding_offset: Option<&'h Tensor>,
    pub counter: Option<&'h CallCounter>,
}

#[derive(Debug, Clone, Copy)]
struct HeadNodes {
    scores: NodeId,
    weights: NodeId,
}

/// Result of one forward pass. Owns the tape so a loss can be attached and
/// differentiated afterwards.
pub struct ForwardTrace<'a> {
    tape: Tape<'a>,
    params: Vec<NodeId>,
    logits: NodeId,
    heads: Vec<Vec<HeadNodes>>,
}

/// Scalar loss attached to a trace's tape.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    node: NodeId,
    pub value: f64,
}

impl<'a> ForwardTrace<'a> {
    /// `[seq × vocab]`.
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn is_retained(&self) -> bool {
        !self.heads.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    /// Score matrix `Z_{l,h}` as fed to the causal mask (after any hook).
    pub fn scores(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.head(layer, head).map(|n| self.tape.value(n.scores))
    }

    /// Attention weights `A_{l,h}`.
    pub fn weights(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.head(layer, head).map(|n| self.tape.value(n.weights))
    }

    /// Head-averaged attention weights `A_l`.
    pub fn mean_weights(&self, layer: usize) -> Option<Tensor> {
        let heads = self.heads.get(layer)?;
        let first = self.tape.value(heads[0].weights);
        let mut acc = Tensor::zeros(first.shape());
        for h in heads {
            for (a, v) in acc.data_mut().iter_mut().zip(self.tape.value(h.weights).data()) {
                *a += v;
            }
        }
        let n = heads.len() as f64;
        Some(acc.map(|v| v / n))
    }

    fn head(&self, layer: usize, head: usize) -> Option<HeadNodes> {
        self.heads.get(layer).and_then(|l| l.get(head)).copied()
    }

    /// Mean next-token cross-entropy over positions where `mask` is set.
    /// `targets[t]` is the token expected after position `t`.
    pub fn loss_next_token(&mut self, targets: &[TokenId], mask: &[bool]) -> Result<Loss> {
        let seq = self.logits().rows();
        if targets.len() != seq || mask.len() != seq {
            return Err(Error::Dimension(format!(
                "targets ({}) and mask ({}) must match sequence length {seq}",
                targets.len(),
                mask.len()
            )));
        }
        let picks: Vec<(usize, usize)> = (0..seq).filter(|&t| mask[t]).map(|t| (t, targets[t])).collect();
        if picks.is_empty() {
            return Err(Error::Contract("loss mask selects no positions".into()));
        }
        let node = self.tape.cross_entropy(self.logits, &picks)?;
        Ok(Loss {
            node,
            value: self.tape.value(node).data()[0],
        })
    }

    pub fn backward(&mut self, loss: &Loss) -> Result<()> {
        self.tape.backward(loss.node)
    }

    /// Parameter gradients in canonical order (requires `track_params`).
    pub fn param_grads(&self) -> Option<Vec<Tensor>> {
        if self.params.is_empty() {
            return None;
        }
        self.params
            .iter()
            .map(|&id| {
                self.tape
                    .grad(id)
                    .cloned()
                    .or_else(|| Some(Tensor::zeros(self.tape.value(id).shape())))
            })
            .collect()
    }

    /// `∂L/∂A_{l,h}` after [`ForwardTrace::backward`] (requires `retain`).
    pub fn weight_grad(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.head(layer, head).and_then(|n| self.tape.grad(n.weights))
    }
}

/// Runs the model on one sequence.
pub fn forward<'a>(
    params: &'a ModelParams,
    tokens: &[TokenId],
    seg: &SegmentMap,
    opts: ForwardOptions<'_>,
) -> Result<ForwardTrace<'a>> {
    let cfg = params.config();
    let seq = tokens.len();
    if seq > cfg.max_seq {
        return Err(Error::Sequence { len: seq, max: cfg.max_seq });
    }
    if seq == 0 {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if seg.len() != seq {
        return Err(Error::Dimension(format!(
            "segment map covers {} positions, sequence has {seq}",
            seg.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(c) = opts.counter {
        c.bump();
    }

    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params
        .tensors()
        .iter()
        .map(|t| tape.leaf_ref(t, opts.track_params))
        .collect();
    let (d, n_heads, d_head) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let tok = tape.gather_rows(leaves[0], tokens)?;
    let positions: Vec<usize> = (0..seq).collect();
    let pos = tape.gather_rows(leaves[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    if let Some(offset) = opts.embedding_offset {
        if offset.shape() != [seq, d] {
            return Err(Error::Dimension(format!(
                "embedding offset shape {:?}, expected [{seq}, {d}]",
                offset.shape()
            )));
        }
        let off = tape.constant(offset.clone());
        x = tape.add(x, off)?;
    }

    let mut heads_trace = Vec::new();
    for layer in 0..cfg.n_layers {
        let p = |k: usize| leaves[block_offset(layer) + k];
        let h = tape.layer_norm(x, p(0), p(1))?;
        let q = tape.matmul(h, p(2))?;
        let k = tape.matmul(h, p(3))?;
        let v = tape.matmul(h, p(4))?;

        let mut raw = Vec::with_capacity(n_heads);
        let mut values = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let qh = tape.slice_cols(q, head * d_head, d_head)?;
            let kh = tape.slice_cols(k, head * d_head, d_head)?;
            let vh = tape.slice_cols(v, head * d_head, d_head)?;
            let qk = tape.matmul_nt(qh, kh)?;
            raw.push(tape.scale(qk, inv_sqrt));
            values.push(vh);
        }

        let scores: Vec<NodeId> = match opts.hook {
            None => raw,
            Some(hook) => {
                let layer_scores: Vec<Tensor> = raw.iter().map(|&z| tape.value(z).clone()).collect();
                let mut out = Vec::with_capacity(n_heads);
                for (head, &z) in raw.iter().enumerate() {
                    let site = HookSite {
                        layer,
                        head,
                        seg,
                        layer_scores: &layer_scores,
                    };
                    match hook.rewrite(&site, &layer_scores[head])? {
                        None => out.push(z),
                        Some(rewritten) => {
                            check_hook_output(&layer_scores[head], &rewritten, layer, head)?;
                            out.push(tape.override_value(z, rewritten)?);
                        }
                    }
                }
                out
            }
        };

        let mut mixed = Vec::with_capacity(n_heads);
        let mut layer_nodes = Vec::with_capacity(n_heads);
        for (head, &z) in scores.iter().enumerate() {
            let masked = tape.causal_mask(z)?;
            let a = tape.softmax_rows(masked)?;
            mixed.push(tape.matmul(a, values[head])?);
            layer_nodes.push(HeadNodes { scores: z, weights: a });
        }
        if opts.retain {
            heads_trace.push(layer_nodes);
        }
        let cat = tape.concat_cols(&mixed)?;
        let attn = tape.matmul(cat, p(5))?;
        x = tape.add(x, attn)?;

        let h2 = tape.layer_norm(x, p(6), p(7))?;
        let up = tape.matmul(h2, p(8))?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, p(9))?;
        x = tape.add(x, down)?;
    }

    let n = leaves.len();
    let xf = tape.layer_norm(x, leaves[n - 3], leaves[n - 2])?;
    let logits = tape.matmul(xf, leaves[n - 1])?;
    if !tape.value(logits).all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }

    Ok(ForwardTrace {
        tape,
        params: if opts.track_params { leaves } else { Vec::new() },
        logits,
        heads: heads_trace,
    })
}

fn check_hook_output(before: &Tensor, after: &Tensor, layer: usize, head: usize) -> Result<()> {
    if before.shape() != after.shape() {
        return Err(Error::Dimension(format!(
            "hook changed score shape at layer {layer}, head {head}: {:?} -> {:?}",
            before.shape(),
            after.shape()
        )));
    }
    for i in 0..before.rows() {
        for j in i + 1..before.cols() {
            if before.at(i, j).to_bits() != after.at(i, j).to_bits() {
                return Err(Error::InterventionContract { layer, head, row: i, col: j });
            }
        }
    }
    Ok(())
}
