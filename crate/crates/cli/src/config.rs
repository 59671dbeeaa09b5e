use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use vaflab::bench::WorldSpec;
use vaflab::decoding::{DecodeConfig, Method};
use vaflab::interventions::VafConfig;
use vaflab::model::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub probes: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            probes: "data/probes.jsonl".into(),
            checkpoint: "data/model.ckpt".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub world: WorldSpec,
    pub vaf: VafConfig,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let model = ModelConfig {
            d_model: 32,
            vocab_size: world.vocab().size(),
            ..ModelConfig::default()
        };
        Self {
            vaf: VafConfig::for_depth(model.n_layers),
            model,
            world,
            decode: DecodeConfig::new(Method::Regular),
            train: TrainConfig {
                epochs: 12,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.corpus,
            &mut cfg.paths.probes,
            &mut cfg.paths.checkpoint,
            &mut cfg.paths.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()
            .with_context(|| format!("invalid config file {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.world.validate()?;
        self.vaf.validate(self.model.n_layers)?;
        self.decode.method.validate(self.model.n_layers)?;
        self.decode.sampler.validate()?;
        let vocab = self.world.vocab().size();
        if vocab != self.model.vocab_size {
            bail!(
                "model.vocab_size is {} but the world needs {vocab} tokens",
                self.model.vocab_size
            );
        }
        let longest = self.world.n_system + self.world.scene_size + 2 + self.decode.max_new_tokens;
        if longest > self.model.max_seq {
            bail!(
                "model.max_seq {} is too short for prompts plus {} new tokens",
                self.model.max_seq,
                self.decode.max_new_tokens
            );
        }
        Ok(())
    }

    /// Applies a global seed to every seeded component.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
        self.decode.sampler.seed = seed;
    }

    /// Decoding configuration for a method chosen on the command line.
    pub fn decode_for(&self, method: MethodArg) -> DecodeConfig {
        let mut d = self.decode.clone();
        d.method = match (method, &self.decode.method) {
            (MethodArg::Regular, _) => Method::Regular,
            (MethodArg::Vaf, _) => Method::Vaf(self.vaf.clone()),
            (MethodArg::Vcd, m @ Method::Vcd { .. }) | (MethodArg::Icd, m @ Method::Icd { .. }) => m.clone(),
            (MethodArg::Vcd, _) => Method::Vcd {
                alpha_cd: vaflab::decoding::default_alpha_cd(),
                noise_sigma: vaflab::decoding::default_noise_sigma(),
            },
            (MethodArg::Icd, _) => Method::Icd {
                alpha_cd: vaflab::decoding::default_alpha_cd(),
                disruption: Default::default(),
            },
        };
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MethodArg {
    Regular,
    Vcd,
    Icd,
    Vaf,
}
