mod common;

use proptest::prelude::*;
use vaflab::decoding::{argmax, decode, vcd_step, DecodeConfig, Method};
use vaflab::interventions::{attention_allocation, causal_softmax, vaf_rewrite, EnhanceRows};
use vaflab::model::{checkpoint, forward, ForwardOptions, IdentityHook, ModelConfig, ModelParams, SegmentMap, Sequence};
use vaflab::rng::Rng;
use vaflab::saliency::{attention_saliency, example_profile, layer_profile, s_vt, s_vv, HeadReduction, SaliencyMatrix};
use vaflab::tensor::Tensor;

fn cfg(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: 24,
        max_seq: 16,
        seed,
    }
}

fn params(seed: u64, gain: f64) -> ModelParams {
    let p = ModelParams::init(&cfg(seed)).unwrap();
    let ts = p.tensors().iter().map(|t| t.map(|v| if v == 0.0 || v == 1.0 { v } else { v * gain })).collect();
    ModelParams::from_tensors(cfg(seed), ts).unwrap()
}

fn logits(p: &ModelParams, tokens: &[usize], seg: &SegmentMap) -> Tensor {
    forward(p, tokens, seg, ForwardOptions::default()).unwrap().logits().clone()
}

#[test]
fn later_tokens_do_not_affect_earlier_logits() {
    let p = params(1, 10.0);
    let seg = SegmentMap::from_lengths(2, 4, 3, 1);
    let mut rng = Rng::new(4);
    for _ in 0..50 {
        let tokens: Vec<usize> = (0..10).map(|_| rng.below(24)).collect();
        let t = rng.below(10);
        let mut other = tokens.clone();
        for x in other.iter_mut().skip(t + 1) {
            *x = rng.below(24);
        }
        let (a, b) = (logits(&p, &tokens, &seg), logits(&p, &other, &seg));
        for i in 0..=t {
            assert_eq!(a.row(i), b.row(i), "position {i} moved after changing tokens past {t}");
        }
    }
}

#[test]
fn attention_is_causal_and_row_stochastic() {
    let p = params(2, 10.0);
    let seg = SegmentMap::from_lengths(1, 3, 2, 2);
    let tokens: Vec<usize> = (0..8).map(|i| (i * 5) % 24).collect();
    let trace = forward(
        &p,
        &tokens,
        &seg,
        ForwardOptions {
            retain: true,
            ..Default::default()
        },
    )
    .unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let a = trace.weights(l, h).unwrap();
            for i in 0..8 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in i + 1..8 {
                    assert_eq!(a.at(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn identity_hook_is_bitwise_neutral() {
    let p = params(3, 8.0);
    let seg = SegmentMap::from_lengths(2, 3, 2, 0);
    let tokens = [3, 4, 10, 11, 12, 6, 7];
    let plain = logits(&p, &tokens, &seg);
    let hooked = forward(
        &p,
        &tokens,
        &seg,
        ForwardOptions {
            hook: Some(&IdentityHook),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(plain.data(), hooked.logits().data());
}

#[test]
fn matches_oracle_on_default_init() {
    for seed in 0..5 {
        let p = params(seed, 1.0);
        let seg = SegmentMap::from_lengths(2, 3, 2, 1);
        let tokens = [1, 2, 15, 16, 17, 5, 6, 0];
        let want = common::plain_forward(&common::Weights::new(&p), &tokens);
        let got = logits(&p, &tokens, &seg);
        for (i, row) in want.logits.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                assert!((x - got.at(i, j)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn loss_hand_values() {
    let p = params(0, 1.0);
    let seg = SegmentMap::from_lengths(0, 1, 2, 0);
    let tokens = [4, 9, 2];
    let targets = [9, 2, 7];
    let mask = [true, true, true];
    let mut trace = forward(&p, &tokens, &seg, ForwardOptions::default()).unwrap();
    let loss = trace.loss_next_token(&targets, &mask).unwrap().value;
    let logits = trace.logits().clone();
    let mut want = 0.0;
    for t in 0..3 {
        let row = logits.row(t);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[targets[t]];
    }
    want /= 3.0;
    assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    let oracle = common::plain_forward(&common::Weights::new(&p), &tokens);
    assert!((common::loss(&oracle.logits, &targets, &mask) - want).abs() < 1e-10);
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let p = params(0, 1.0);
    let mut ts = p.tensors().to_vec();
    let last = ts.len() - 1;
    ts[last] = Tensor::zeros(ts[last].shape());
    let p = ModelParams::from_tensors(cfg(0), ts).unwrap();
    let seg = SegmentMap::from_lengths(1, 1, 1, 0);
    let mut trace = forward(&p, &[1, 2, 3], &seg, ForwardOptions::default()).unwrap();
    let loss = trace.loss_next_token(&[2, 3, 4], &[true, false, true]).unwrap().value;
    assert!((loss - 24f64.ln()).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_over_random_configs() {
    let mut rng = Rng::new(12);
    for seed in 0..10 {
        let heads = 2 + rng.below(3);
        let c = ModelConfig {
            n_layers: 2 + rng.below(3),
            n_heads: heads,
            d_model: heads * (1 + rng.below(4)),
            vocab_size: 5 + rng.below(30),
            max_seq: 4 + rng.below(12),
            seed,
        };
        let p = ModelParams::init(&c).unwrap();
        let mut bytes = Vec::new();
        checkpoint::write_checkpoint(&p, &mut bytes).unwrap();
        let back = checkpoint::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in back.tensors().iter().zip(p.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        checkpoint::write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let p = ModelParams::init(&cfg(0)).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write_checkpoint(&p, &mut bytes).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    assert!(checkpoint::read_checkpoint(&bytes[..nl]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::read_checkpoint(extra.as_slice()).is_err());
    let text = String::from_utf8(bytes[..nl].to_vec()).unwrap().replace("vaflab-checkpoint", "other-format");
    let mut wrong = text.into_bytes();
    wrong.extend_from_slice(&bytes[nl..]);
    assert!(checkpoint::read_checkpoint(wrong.as_slice()).is_err());
}

#[test]
fn greedy_single_step_is_argmax_of_last_logits() {
    let p = params(5, 10.0);
    let (sys, v, x) = (vec![3, 4], vec![12, 13, 14], vec![7]);
    let d = decode(&p, &v, &x, &sys, &DecodeConfig::new(Method::Regular)).unwrap();
    let seg = SegmentMap::from_lengths(2, 3, 1, 0);
    let l = logits(&p, &[sys.clone(), v.clone(), x.clone()].concat(), &seg);
    assert_eq!(d.tokens, vec![argmax(l.row(5))]);
}

#[test]
fn vcd_noise_continuity() {
    let p = params(6, 10.0);
    let (sys, v, x) = (vec![3], vec![12, 13], vec![7, 8]);
    let reg = decode(&p, &v, &x, &sys, &DecodeConfig::new(Method::Regular)).unwrap();
    let vcd = decode(
        &p,
        &v,
        &x,
        &sys,
        &DecodeConfig::new(Method::Vcd {
            alpha_cd: 1.0,
            noise_sigma: 1e-8,
        }),
    )
    .unwrap();
    let worst = reg.distributions[0]
        .iter()
        .zip(&vcd.distributions[0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn vcd_step_is_a_distribution(
        l in proptest::collection::vec(-30.0f64..30.0, 1..12),
        noise in proptest::collection::vec(-30.0f64..30.0, 12),
        alpha in 0.0f64..5.0,
    ) {
        let lp: Vec<f64> = noise[..l.len()].to_vec();
        let p = vcd_step(&l, &lp, alpha).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn allocation_is_bounded_by_instruction_rows(
        s in 0usize..3, v in 1usize..4, t in 1usize..4, r in 0usize..3,
        z in proptest::collection::vec(-5.0f64..5.0, 144),
    ) {
        let seg = SegmentMap::from_lengths(s, v, t, r);
        let n = seg.len();
        let a = causal_softmax(&Tensor::matrix(n, n, z[..n * n].to_vec()).unwrap()).unwrap();
        let tri = attention_allocation(&a, &seg).unwrap();
        prop_assert!(tri.sys + tri.vis + tri.ins <= t as f64 + 1e-12);
    }

    #[test]
    fn enhancement_raises_positive_visual_shares(
        s in 0usize..3, v in 1usize..4, t in 1usize..3,
        z in proptest::collection::vec(-4.0f64..4.0, 100),
        alpha in 0.01f64..1.0,
    ) {
        let seg = SegmentMap::from_lengths(s, v, t, 0);
        let n = seg.len();
        let z = Tensor::matrix(n, n, z[..n * n].to_vec()).unwrap();
        let out = vaf_rewrite(&z, &seg, alpha, 0.0, EnhanceRows::InsAndResp).unwrap();
        let (a0, a1) = (causal_softmax(&z).unwrap(), causal_softmax(&out).unwrap());
        for i in seg.instruction() {
            let positive: Vec<usize> = seg.visual().filter(|&j| z.at(i, j) > 0.0).collect();
            for &j in &positive {
                prop_assert!(out.at(i, j) > z.at(i, j));
            }
            let before: f64 = positive.iter().map(|&j| a0.at(i, j)).sum();
            let after: f64 = positive.iter().map(|&j| a1.at(i, j)).sum();
            prop_assert!(after >= before - 1e-15);
        }
    }
}

fn seq(tokens: &[usize], seg: SegmentMap, label: usize) -> Sequence {
    let n = tokens.len();
    let mut targets = tokens[1..].to_vec();
    targets.push(label);
    let mut mask = vec![false; n];
    mask[n - 1] = true;
    Sequence {
        tokens: tokens.to_vec(),
        seg,
        targets,
        mask,
    }
}

#[test]
fn saliency_is_nonnegative_on_random_models() {
    let mut rng = Rng::new(8);
    for seed in 0..100 {
        let p = params(seed, 1.0 + 9.0 * rng.next_f64());
        let seg = SegmentMap::from_lengths(1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(2), 0);
        let n = seg.len();
        let tokens: Vec<usize> = (0..n).map(|_| rng.below(24)).collect();
        let s = seq(&tokens, seg.clone(), rng.below(24));
        for m in attention_saliency(&p, &s.tokens, &s.seg, &s.targets, &s.mask, HeadReduction::Sum).unwrap() {
            assert!(m.values.data().iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn mean_reduction_is_sum_over_heads() {
    let p = params(9, 6.0);
    let s = seq(&[3, 12, 13, 7, 8], SegmentMap::from_lengths(1, 2, 2, 0), 1);
    let sum = attention_saliency(&p, &s.tokens, &s.seg, &s.targets, &s.mask, HeadReduction::Sum).unwrap();
    let mean = attention_saliency(&p, &s.tokens, &s.seg, &s.targets, &s.mask, HeadReduction::Mean).unwrap();
    for (a, b) in sum.iter().zip(&mean) {
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert!((x / 2.0 - y).abs() < 1e-15);
        }
    }
}

#[test]
fn saliency_metrics_ignore_system_columns() {
    let seg = SegmentMap::from_lengths(2, 2, 2, 0);
    let mut rng = Rng::new(2);
    let base = Tensor::matrix(6, 6, (0..36).map(|_| rng.next_f64()).collect()).unwrap();
    let mut bumped = base.clone();
    for i in 0..6 {
        for j in 0..2 {
            bumped.set(i, j, 100.0);
        }
    }
    let a = SaliencyMatrix { layer: 0, values: base };
    let b = SaliencyMatrix { layer: 0, values: bumped };
    assert_eq!(s_vv(&a, &seg).unwrap(), s_vv(&b, &seg).unwrap());
    assert_eq!(s_vt(&a, &seg).unwrap(), s_vt(&b, &seg).unwrap());
}

#[test]
fn profile_of_one_example_and_duplicates() {
    let p = params(10, 6.0);
    let a = seq(&[3, 12, 13, 14, 7, 8], SegmentMap::from_lengths(1, 3, 2, 0), 1);
    let b = seq(&[4, 15, 16, 17, 9, 10], SegmentMap::from_lengths(1, 3, 2, 0), 2);
    let one = layer_profile(&p, std::slice::from_ref(&a), HeadReduction::Sum).unwrap();
    assert_eq!(one.rows, example_profile(&p, &a, HeadReduction::Sum).unwrap());

    let pair = layer_profile(&p, &[a.clone(), b.clone()], HeadReduction::Sum).unwrap();
    let doubled = layer_profile(&p, &[a.clone(), b.clone(), a, b], HeadReduction::Sum).unwrap();
    for (x, y) in pair.rows.iter().zip(&doubled.rows) {
        assert!((x.s_vv - y.s_vv).abs() < 1e-15 && (x.s_vt - y.s_vt).abs() < 1e-15);
        assert!((x.lambda_vis - y.lambda_vis).abs() < 1e-15);
    }
}
