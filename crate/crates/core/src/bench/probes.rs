//! Balanced yes/no probes with random, popular and adversarial negatives.

use crate::bench::world::{Answer, Category, CoStats, Example, WorldSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

const PROBE_SCENE_STREAM: u64 = 3;
const PROBE_QUESTION_STREAM: u64 = 4;

/// Absent object with the highest count; ties go to the lower id.
fn most_frequent_absent(stats: &CoStats, scene: &[usize]) -> Option<usize> {
    argmax_absent(scene, stats.counts.len(), |y| stats.counts[y])
}

/// Absent object co-occurring most often with the scene's objects.
fn most_cooccurring_absent(stats: &CoStats, scene: &[usize]) -> Option<usize> {
    argmax_absent(scene, stats.counts.len(), |y| scene.iter().map(|&x| stats.pair[x][y]).sum())
}

fn argmax_absent(scene: &[usize], n: usize, score: impl Fn(usize) -> usize) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for y in (0..n).filter(|y| !scene.contains(y)) {
        let s = score(y);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((y, s));
        }
    }
    best.map(|(y, _)| y)
}

/// Negatives for `scene` in [`Category::ALL`] order.
pub fn negatives_for(scene: &[usize], stats: &CoStats, rng: &mut Rng) -> Result<[usize; 3]> {
    let n = stats.counts.len();
    let absent: Vec<usize> = (0..n).filter(|o| !scene.contains(o)).collect();
    if absent.is_empty() {
        return Err(Error::ProbeConstruction(format!(
            "scene {scene:?} contains every object, so no negative exists"
        )));
    }
    let random = absent[rng.below(absent.len())];
    let popular = most_frequent_absent(stats, scene).expect("absent object exists");
    let adversarial = most_cooccurring_absent(stats, scene).expect("absent object exists");
    Ok([random, popular, adversarial])
}

/// For each of `spec.n_probe` fresh scenes: one positive question, shared by
/// every category, and one negative per category.
pub fn build_probes(stats: &CoStats, spec: &WorldSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    if stats.counts.len() != spec.n_objects {
        return Err(Error::ProbeConstruction(format!(
            "statistics cover {} objects, world has {}",
            stats.counts.len(),
            spec.n_objects
        )));
    }
    let sys = spec.vocab().system_prompt();
    let mut scene_rng = Rng::derive(spec.seed, PROBE_SCENE_STREAM);
    let mut q_rng = Rng::derive(spec.seed, PROBE_QUESTION_STREAM);
    let mut out = Vec::with_capacity(spec.n_probe * 6);
    for _ in 0..spec.n_probe {
        let scene = spec.sample_scene(&mut scene_rng)?;
        let positive = scene[q_rng.below(scene.len())];
        let negatives = negatives_for(&scene, stats, &mut q_rng)?;
        for (category, negative) in Category::ALL.into_iter().zip(negatives) {
            for (question, label) in [(positive, Answer::Yes), (negative, Answer::No)] {
                out.push(Example {
                    scene: scene.clone(),
                    sys: sys.clone(),
                    question,
                    label,
                    category,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::world::{generate_corpus, BiasPair};

    #[test]
    fn exhaustion_forces_the_only_negative() {
        let stats = CoStats::from_scenes(2, [&[0usize][..], &[1][..]]);
        let negs = negatives_for(&[0], &stats, &mut Rng::new(0)).unwrap();
        assert_eq!(negs, [1, 1, 1]);
    }

    #[test]
    fn full_scene_has_no_negative() {
        let stats = CoStats::new(2);
        assert!(matches!(
            negatives_for(&[0, 1], &stats, &mut Rng::new(0)),
            Err(Error::ProbeConstruction(_))
        ));
    }

    #[test]
    fn adversarial_picks_biased_partner() {
        let spec = WorldSpec {
            n_objects: 8,
            scene_size: 2,
            cooccur_bias: vec![BiasPair { a: 3, b: 6, p: 0.9 }],
            n_train: 3000,
            n_probe: 1,
            bias_question_fraction: 0.0,
            n_system: 3,
            seed: 2,
        };
        let c = generate_corpus(&spec).unwrap();
        let negs = negatives_for(&[3], &c.stats, &mut Rng::new(0)).unwrap();
        assert_eq!(negs[2], 6);
    }

    #[test]
    fn categories_are_balanced() {
        let spec = WorldSpec::default();
        let c = generate_corpus(&spec).unwrap();
        let probes = build_probes(&c.stats, &spec).unwrap();
        assert_eq!(probes.len(), 6 * spec.n_probe);
        for cat in Category::ALL {
            let yes = probes.iter().filter(|p| p.category == cat && p.label == Answer::Yes).count();
            let no = probes.iter().filter(|p| p.category == cat && p.label == Answer::No).count();
            assert_eq!((yes, no), (spec.n_probe, spec.n_probe));
        }
        for p in &probes {
            assert_eq!(p.label == Answer::Yes, p.scene.contains(&p.question));
        }
    }
}
