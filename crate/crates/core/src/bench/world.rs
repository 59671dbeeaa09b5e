//! The synthetic world: scenes drawn with biased object co-occurrence and
//! yes/no presence questions about them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;
use crate::report::write_atomic;
use crate::rng::Rng;
use crate::vocab::{TokenId, Vocab, END_OF_ANSWER, NO, YES};

const SCENE_STREAM: u64 = 1;
const QUESTION_STREAM: u64 = 2;
const MAX_DRAWS: usize = 10_000;

/// `P(b joins the scene | a was drawn)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasPair {
    pub a: usize,
    pub b: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub n_objects: usize,
    pub scene_size: usize,
    #[serde(default)]
    pub cooccur_bias: Vec<BiasPair>,
    pub n_train: usize,
    pub n_probe: usize,
    /// Share of training questions that ask about the partner of a present
    /// biased object.
    #[serde(default)]
    pub bias_question_fraction: f64,
    #[serde(default = "default_n_system")]
    pub n_system: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_system() -> usize {
    3
}

impl Default for WorldSpec {
    fn default() -> Self {
        let mut cooccur_bias = Vec::new();
        for (a, b) in [(0, 1), (2, 3), (4, 5), (6, 7)] {
            cooccur_bias.push(BiasPair { a, b, p: 0.9 });
            cooccur_bias.push(BiasPair { a: b, b: a, p: 0.9 });
        }
        Self {
            n_objects: 12,
            scene_size: 3,
            cooccur_bias,
            n_train: 1500,
            n_probe: 60,
            bias_question_fraction: 0.3,
            n_system: default_n_system(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_objects, self.n_system)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.scene_size == 0 {
            return Err(Error::Spec("n_objects and scene_size must be positive".into()));
        }
        if self.scene_size > self.n_objects {
            return Err(Error::Spec(format!(
                "scene_size {} exceeds n_objects {}",
                self.scene_size, self.n_objects
            )));
        }
        for pair in &self.cooccur_bias {
            if pair.a >= self.n_objects || pair.b >= self.n_objects || pair.a == pair.b {
                return Err(Error::Spec(format!("bias pair ({}, {}) is invalid", pair.a, pair.b)));
            }
            if !(0.0..=1.0).contains(&pair.p) {
                return Err(Error::Spec(format!("bias probability {} outside [0, 1]", pair.p)));
            }
        }
        if !(0.0..=1.0).contains(&self.bias_question_fraction) {
            return Err(Error::Spec("bias_question_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws one scene. Objects are drawn uniformly; each draw pulls in its
    /// biased partners (transitively) and the whole group is kept only when
    /// it fits, otherwise the draw is repeated.
    pub fn sample_scene(&self, rng: &mut Rng) -> Result<Vec<usize>> {
        for _ in 0..MAX_DRAWS / 10 {
            if let Some(mut scene) = self.try_scene(rng) {
                rng.shuffle(&mut scene);
                return Ok(scene);
            }
        }
        Err(Error::Spec("could not place biased object groups into a scene".into()))
    }

    fn try_scene(&self, rng: &mut Rng) -> Option<Vec<usize>> {
        let mut scene: Vec<usize> = Vec::with_capacity(self.scene_size);
        let mut draws = 0;
        while scene.len() < self.scene_size {
            draws += 1;
            if draws > MAX_DRAWS {
                return None;
            }
            let absent: Vec<usize> = (0..self.n_objects).filter(|o| !scene.contains(o)).collect();
            let seed_obj = absent[rng.below(absent.len())];
            let mut group = vec![seed_obj];
            let mut k = 0;
            while k < group.len() {
                let x = group[k];
                for pair in self.cooccur_bias.iter().filter(|p| p.a == x) {
                    if rng.chance(pair.p) && !group.contains(&pair.b) && !scene.contains(&pair.b) {
                        group.push(pair.b);
                    }
                }
                k += 1;
            }
            if scene.len() + group.len() <= self.scene_size {
                scene.extend(group);
            }
        }
        Some(scene)
    }
}

/// Object frequencies and pairwise co-occurrence counts over training scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoStats {
    pub n_scenes: usize,
    pub counts: Vec<usize>,
    /// `pair[x][y]`: scenes containing both `x` and `y`.
    pub pair: Vec<Vec<usize>>,
}

impl CoStats {
    pub fn new(n_objects: usize) -> Self {
        Self {
            n_scenes: 0,
            counts: vec![0; n_objects],
            pair: vec![vec![0; n_objects]; n_objects],
        }
    }

    pub fn add_scene(&mut self, scene: &[usize]) {
        self.n_scenes += 1;
        for &x in scene {
            self.counts[x] += 1;
            for &y in scene {
                if x != y {
                    self.pair[x][y] += 1;
                }
            }
        }
    }

    pub fn from_scenes<'a>(n_objects: usize, scenes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut s = Self::new(n_objects);
        for scene in scenes {
            s.add_scene(scene);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Random,
    Popular,
    Adversarial,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Random, Category::Popular, Category::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Category::Random => "random",
            Category::Popular => "popular",
            Category::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn token(self) -> TokenId {
        match self {
            Answer::Yes => YES,
            Answer::No => NO,
        }
    }

    pub fn from_bool(yes: bool) -> Self {
        if yes {
            Answer::Yes
        } else {
            Answer::No
        }
    }
}

/// A scene plus one presence question. Serialises to one JSONL record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    /// Object ids in presentation order.
    pub scene: Vec<usize>,
    pub sys: Vec<TokenId>,
    /// Object id asked about.
    pub question: usize,
    pub label: Answer,
    pub category: Category,
}

impl Example {
    pub fn visual_tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        self.scene.iter().map(|&o| vocab.visual_id(o)).collect()
    }

    pub fn instruction_tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        vocab.question(self.question)
    }

    /// Teacher-forced training sequence: answer followed by end-of-answer.
    pub fn to_sequence(&self, vocab: &Vocab) -> Result<Sequence> {
        Sequence::from_parts(
            &self.sys,
            &self.visual_tokens(vocab),
            &self.instruction_tokens(vocab),
            &[self.label.token(), END_OF_ANSWER],
        )
    }

    /// Prompt-only sequence supervised on the answer token.
    pub fn to_probe_sequence(&self, vocab: &Vocab) -> Result<Sequence> {
        Sequence::from_parts(
            &self.sys,
            &self.visual_tokens(vocab),
            &self.instruction_tokens(vocab),
            &[self.label.token()],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub stats: CoStats,
}

/// Samples `n_train` scenes with one question each. Training questions are
/// tagged `adversarial` when they target a biased partner and `random`
/// otherwise.
pub fn generate_corpus(spec: &WorldSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = spec.vocab();
    let sys = vocab.system_prompt();
    let mut scene_rng = Rng::derive(spec.seed, SCENE_STREAM);
    let mut q_rng = Rng::derive(spec.seed, QUESTION_STREAM);
    let mut stats = CoStats::new(spec.n_objects);
    let mut examples = Vec::with_capacity(spec.n_train);
    for _ in 0..spec.n_train {
        let scene = spec.sample_scene(&mut scene_rng)?;
        stats.add_scene(&scene);
        let partners: Vec<usize> = spec
            .cooccur_bias
            .iter()
            .filter(|p| scene.contains(&p.a))
            .map(|p| p.b)
            .collect();
        let (question, category) = if !partners.is_empty() && q_rng.chance(spec.bias_question_fraction) {
            (partners[q_rng.below(partners.len())], Category::Adversarial)
        } else {
            let absent: Vec<usize> = (0..spec.n_objects).filter(|o| !scene.contains(o)).collect();
            let ask_present = absent.is_empty() || q_rng.chance(0.5);
            let q = if ask_present {
                scene[q_rng.below(scene.len())]
            } else {
                absent[q_rng.below(absent.len())]
            };
            (q, Category::Random)
        };
        examples.push(Example {
            label: Answer::from_bool(scene.contains(&question)),
            scene,
            sys: sys.clone(),
            question,
            category,
        });
    }
    Ok(Corpus { examples, stats })
}

pub fn to_jsonl(examples: &[Example]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    write_atomic(path, &to_jsonl(examples)?)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(n_objects: usize, scene_size: usize) -> WorldSpec {
        WorldSpec {
            n_objects,
            scene_size,
            cooccur_bias: Vec::new(),
            n_train: 10,
            n_probe: 5,
            bias_question_fraction: 0.0,
            n_system: 3,
            seed: 0,
        }
    }

    #[test]
    fn scenes_are_distinct_objects_of_fixed_size() {
        let spec = WorldSpec::default();
        let mut rng = Rng::new(1);
        for _ in 0..500 {
            let mut s = spec.sample_scene(&mut rng).unwrap();
            assert_eq!(s.len(), spec.scene_size);
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), spec.scene_size);
        }
    }

    #[test]
    fn certain_partner_always_joins() {
        let mut spec = plain(6, 3);
        spec.cooccur_bias = vec![BiasPair { a: 2, b: 4, p: 1.0 }];
        let mut rng = Rng::new(9);
        for _ in 0..2000 {
            let s = spec.sample_scene(&mut rng).unwrap();
            if s.contains(&2) {
                assert!(s.contains(&4), "{s:?}");
            }
        }
    }

    #[test]
    fn infeasible_spec() {
        assert!(matches!(generate_corpus(&plain(3, 4)), Err(Error::Spec(_))));
    }

    #[test]
    fn labels_follow_scene() {
        let c = generate_corpus(&WorldSpec::default()).unwrap();
        assert_eq!(c.examples.len(), WorldSpec::default().n_train);
        for e in &c.examples {
            assert_eq!(e.label == Answer::Yes, e.scene.contains(&e.question));
        }
        assert!(c.examples.iter().any(|e| e.category == Category::Adversarial));
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_corpus(&plain(5, 2)).unwrap();
        let bytes = to_jsonl(&c.examples).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"scene":["#));
        assert_eq!(parse_jsonl(&text).unwrap(), c.examples);
    }
}
