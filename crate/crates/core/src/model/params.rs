use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Tensors per transformer block, in canonical order.
pub(crate) const PER_LAYER: usize = 10;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.w2",
];

/// All weights of the toy model, stored flat in a canonical order:
/// token embedding, positional embedding, each block's ten tensors, then the
/// final layer norm and the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

/// Borrowed view of one transformer block.
pub struct BlockParams<'a> {
    pub ln1_gamma: &'a Tensor,
    pub ln1_beta: &'a Tensor,
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
    pub ln2_gamma: &'a Tensor,
    pub ln2_beta: &'a Tensor,
    pub w1: &'a Tensor,
    pub w2: &'a Tensor,
}

impl ModelParams {
    /// Names and shapes of every tensor, in canonical order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.d_hidden());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![cfg.max_seq, d]),
        ];
        for l in 0..cfg.n_layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d, h],
                vec![h, d],
            ];
            for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        out.push(("out_proj".to_string(), vec![d, v]));
        out
    }

    /// Weights ~ N(0, 0.02²) from `cfg.seed`; layer-norm scales 1, shifts 0.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let tensors = Self::layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("gamma") {
                    vec![1.0; n]
                } else if name.ends_with("beta") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| INIT_STD * rng.normal()).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            tensors,
        })
    }

    /// Assembles parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let layout = Self::layout(&cfg);
        if layout.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("{name} holds non-finite values")));
            }
        }
        Ok(Self { config: cfg, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        Self::layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tok_emb(&self) -> &Tensor {
        &self.tensors[0]
    }

    pub fn pos_emb(&self) -> &Tensor {
        &self.tensors[1]
    }

    pub fn block(&self, layer: usize) -> BlockParams<'_> {
        let b = &self.tensors[block_offset(layer)..block_offset(layer) + PER_LAYER];
        BlockParams {
            ln1_gamma: &b[0],
            ln1_beta: &b[1],
            wq: &b[2],
            wk: &b[3],
            wv: &b[4],
            wo: &b[5],
            ln2_gamma: &b[6],
            ln2_beta: &b[7],
            w1: &b[8],
            w2: &b[9],
        }
    }

    pub fn final_norm(&self) -> (&Tensor, &Tensor) {
        let n = self.tensors.len();
        (&self.tensors[n - 3], &self.tensors[n - 2])
    }

    pub fn out_proj(&self) -> &Tensor {
        self.tensors.last().expect("nonempty parameter list")
    }
}

pub(crate) fn block_offset(layer: usize) -> usize {
    2 + layer * PER_LAYER
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_seq: 6,
            seed: 1,
        }
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(ModelParams::init(&small()).unwrap(), ModelParams::init(&small()).unwrap());
    }

    #[test]
    fn different_seed_different_params() {
        let mut other = small();
        other.seed = 2;
        assert_ne!(ModelParams::init(&small()).unwrap(), ModelParams::init(&other).unwrap());
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let cfg = ModelConfig {
            d_model: 65,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(ModelParams::init(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn layout_matches_views() {
        let p = ModelParams::init(&small()).unwrap();
        assert_eq!(p.tensors().len(), 2 + 2 * PER_LAYER + 3);
        assert_eq!(p.block(1).w1.shape(), &[8, 32]);
        assert_eq!(p.block(1).ln2_gamma.data(), &[1.0; 8]);
        assert_eq!(p.final_norm().1.data(), &[0.0; 8]);
        assert_eq!(p.out_proj().shape(), &[8, 11]);
        let names = p.names();
        assert_eq!(names[block_offset(1) + 3], "layers.1.attn.wk");
    }

    #[test]
    fn init_spread_is_roughly_0_02() {
        let p = ModelParams::init(&ModelConfig::default()).unwrap();
        let w = p.block(0).w1.data();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.001, "{}", var.sqrt());
    }
}
