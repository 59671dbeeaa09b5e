//! A deliberately naive re-implementation of the decoder forward pass, used
//! as an independent reference. Nested `Vec`s, explicit loops, no tape.

#![allow(dead_code)]

use std::collections::HashMap;

use vaflab::model::{ModelConfig, ModelParams};

pub type Mat = Vec<Vec<f64>>;

pub struct Weights {
    cfg: ModelConfig,
    by_name: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Weights {
    pub fn new(params: &ModelParams) -> Self {
        let by_name = params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().to_vec())))
            .collect();
        Self {
            cfg: params.config().clone(),
            by_name,
        }
    }

    fn mat(&self, name: &str) -> Mat {
        let (shape, data) = &self.by_name[name];
        (0..shape[0]).map(|r| data[r * shape[1]..(r + 1) * shape[1]].to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.by_name[name].1.clone()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Causal softmax of one score matrix.
pub fn causal_softmax(z: &Mat) -> Mat {
    let n = z.len();
    (0..n)
        .map(|i| {
            let m = z[i][..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..n).map(|j| if j <= i { (z[i][j] - m).exp() } else { 0.0 }).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub struct OracleOut {
    pub logits: Mat,
    /// `weights[layer][head]`.
    pub weights: Vec<Vec<Mat>>,
    /// Scores after `edit_scores`, before masking.
    pub scores: Vec<Vec<Mat>>,
}

/// `edit_scores(layer, head, z)` may rewrite scores before masking;
/// `edit_weights(layer, head, a)` may perturb the weights after softmax.
pub fn forward(
    w: &Weights,
    tokens: &[usize],
    edit_scores: &dyn Fn(usize, usize, &mut Mat),
    edit_weights: &dyn Fn(usize, usize, &mut Mat),
) -> OracleOut {
    let cfg = &w.cfg;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let dh = d / nh;
    let tok = w.mat("tok_emb");
    let pos = w.mat("pos_emb");
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| tok[id][j] + pos[t][j]).collect())
        .collect();
    let n = tokens.len();
    let mut all_w = Vec::new();
    let mut all_z = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let h = layer_norm(&x, &w.vec(&p("ln1.gamma")), &w.vec(&p("ln1.beta")));
        let q = matmul(&h, &w.mat(&p("attn.wq")));
        let k = matmul(&h, &w.mat(&p("attn.wk")));
        let v = matmul(&h, &w.mat(&p("attn.wv")));
        let mut cat = vec![vec![0.0; d]; n];
        let mut lw = Vec::new();
        let mut lz = Vec::new();
        for head in 0..nh {
            let off = head * dh;
            let mut z = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i][off + c] * k[j][off + c];
                    }
                    z[i][j] = s / (dh as f64).sqrt();
                }
            }
            edit_scores(l, head, &mut z);
            let mut a = causal_softmax(&z);
            edit_weights(l, head, &mut a);
            for i in 0..n {
                for c in 0..dh {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += a[i][j] * v[j][off + c];
                    }
                    cat[i][off + c] = s;
                }
            }
            lw.push(a);
            lz.push(z);
        }
        let attn = matmul(&cat, &w.mat(&p("attn.wo")));
        for i in 0..n {
            for j in 0..d {
                x[i][j] += attn[i][j];
            }
        }
        let h2 = layer_norm(&x, &w.vec(&p("ln2.gamma")), &w.vec(&p("ln2.beta")));
        let up: Mat = matmul(&h2, &w.mat(&p("mlp.w1")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let down = matmul(&up, &w.mat(&p("mlp.w2")));
        for i in 0..n {
            for j in 0..d {
                x[i][j] += down[i][j];
            }
        }
        all_w.push(lw);
        all_z.push(lz);
    }
    let xf = layer_norm(&x, &w.vec("ln_f.gamma"), &w.vec("ln_f.beta"));
    OracleOut {
        logits: matmul(&xf, &w.mat("out_proj")),
        weights: all_w,
        scores: all_z,
    }
}

pub fn plain_forward(w: &Weights, tokens: &[usize]) -> OracleOut {
    forward(w, tokens, &|_, _, _| {}, &|_, _, _| {})
}

/// Mean next-token cross-entropy over masked positions.
pub fn loss(logits: &Mat, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (t, row) in logits.iter().enumerate() {
        if !mask[t] {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[t]];
        count += 1;
    }
    total / count as f64
}
