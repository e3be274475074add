use super::mlm::mlm_loss_and_grad;
use super::*;
use crate::gradcheck::{max_relative_error, FD_STEP};
use crate::tokenizer::{PAD, MASK};
use proptest::prelude::*;
use rand::Rng as _;

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn: 12,
        vocab: 7,
        max_pos: 6,
    }
}

fn padded(ids: &[u32], pad: usize) -> TokenSequence {
    let mut s = TokenSequence::from_ids(ids.to_vec());
    s.ids.extend(std::iter::repeat_n(PAD, pad));
    s.mask.extend(std::iter::repeat_n(0, pad));
    s
}

#[test]
fn init_is_deterministic() {
    let a = EncoderParams::<f32>::init(tiny_config(), 11).unwrap();
    let b = EncoderParams::<f32>::init(tiny_config(), 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, EncoderParams::<f32>::init(tiny_config(), 12).unwrap());
    assert!(a.layers[0].ln1_gamma.iter().all(|&g| g == 1.0));
    assert!(a.layers[1].ln2_beta.iter().all(|&b| b == 0.0));
}

#[test]
fn init_scale_follows_hidden_size() {
    let cfg = EncoderConfig::desk(50);
    let p = EncoderParams::<f64>::init(cfg, 1).unwrap();
    let w = &p.layers[0].wq;
    let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    assert!((var * 192.0 - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn head_dim_and_divisibility() {
    let mut cfg = EncoderConfig::desk(100);
    assert_eq!(cfg.head_dim(), 48);
    cfg.hidden = 10;
    assert!(EncoderParams::<f32>::init(cfg, 0).is_err());
}

#[test]
fn single_token_attention_is_one() {
    let p = EncoderParams::<f32>::init(tiny_config(), 3).unwrap();
    let t = p.forward(&TokenSequence::from_ids(vec![4])).unwrap();
    for layer in &t.attention {
        for a in layer {
            assert_eq!(a.shape(), &[1, 1]);
            assert_eq!(a[[0, 0]], 1.0);
        }
    }
}

#[test]
fn padded_keys_get_no_attention() {
    let p = EncoderParams::<f32>::init(tiny_config(), 3).unwrap();
    let t = p.forward(&padded(&[3, 4, 5], 2)).unwrap();
    for layer in &t.attention {
        for a in layer {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-5);
                assert!(row[3] <= 1e-6 && row[4] <= 1e-6);
            }
        }
    }
}

#[test]
fn padding_is_inert() {
    let p = EncoderParams::<f64>::init(tiny_config(), 5).unwrap();
    let a = padded(&[3, 4, 5], 2);
    let mut b = a.clone();
    b.ids[3] = 6;
    b.ids[4] = 2;
    let (ta, tb) = (p.forward(&a).unwrap(), p.forward(&b).unwrap());
    for (ha, hb) in ta.hidden.iter().zip(&tb.hidden) {
        for i in 0..3 {
            for j in 0..8 {
                assert!((ha[[i, j]] - hb[[i, j]]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let p = EncoderParams::<f32>::init(tiny_config(), 3).unwrap();
    assert!(p.forward(&TokenSequence::from_ids(vec![3; 7])).is_err());
    assert!(p.forward(&padded(&[], 3)).is_err());
    assert!(p.forward(&TokenSequence::from_ids(vec![9])).is_err());
}

#[test]
fn mlm_gradient_matches_finite_differences() {
    let p = EncoderParams::<f64>::init(tiny_config(), 21).unwrap();
    let input = TokenSequence::from_ids(vec![3, MASK, 5]);
    let targets = [(1usize, 4u32), (2, 5)];
    let (_, grads) = mlm_loss_and_grad(&p, &input, &targets).unwrap();
    let err = max_relative_error(
        &p,
        &grads,
        |q| mlm_loss_and_grad(q, &input, &targets).unwrap().0,
        FD_STEP,
    );
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn mlm_gradient_with_padding_matches_finite_differences() {
    let p = EncoderParams::<f64>::init(tiny_config(), 8).unwrap();
    let input = padded(&[6, 3, 4], 2);
    let targets = [(0usize, 6u32)];
    let (_, grads) = mlm_loss_and_grad(&p, &input, &targets).unwrap();
    let err = max_relative_error(
        &p,
        &grads,
        |q| mlm_loss_and_grad(q, &input, &targets).unwrap().0,
        FD_STEP,
    );
    assert!(err <= 1e-4, "max relative error {err}");
}

fn toy_sequences(n: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = crate::rng::rng_from_seed(seed);
    (0..n)
        .map(|_| {
            // two interleaved patterns so masked tokens are predictable
            let start = rng.random_range(0..2u32);
            let len = rng.random_range(3..6usize);
            TokenSequence::from_ids((0..len).map(|i| 3 + (start + i as u32) % 2 * 2).collect())
        })
        .collect()
}

#[test]
fn mlm_with_zero_mask_prob_leaves_params_unchanged() {
    let p = EncoderParams::<f32>::init(tiny_config(), 1).unwrap();
    let hyper = MlmHyper {
        mask_prob: 0.0,
        epochs: 1,
        ..MlmHyper::default()
    };
    let (q, report) = pretrain_mlm_sequences(p.clone(), &toy_sequences(20, 1), &hyper).unwrap();
    assert_eq!(p, q);
    assert_eq!(report.masked_tokens, 0);
}

#[test]
fn mlm_loss_decreases_and_is_deterministic() {
    let seqs = toy_sequences(64, 2);
    let p = EncoderParams::<f32>::init(tiny_config(), 4).unwrap();
    let hyper = MlmHyper {
        mask_prob: 0.3,
        lr: 1e-2,
        batch: 8,
        epochs: 3,
        seed: 9,
        ..MlmHyper::default()
    };
    let before = mlm_eval_loss(&p, &seqs, 0.3, 77).unwrap();
    let (q, report) = pretrain_mlm_sequences(p.clone(), &seqs, &hyper).unwrap();
    let after = mlm_eval_loss(&q, &seqs, 0.3, 77).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(report.epoch_losses.len(), 3);
    let (q2, _) = pretrain_mlm_sequences(p, &seqs, &hyper).unwrap();
    assert_eq!(q, q2);
}

#[test]
fn mlm_rejects_degenerate_corpus() {
    let p = EncoderParams::<f32>::init(tiny_config(), 1).unwrap();
    let seqs = vec![TokenSequence::from_ids(vec![3]); 4];
    assert!(pretrain_mlm_sequences(p.clone(), &seqs, &MlmHyper::default()).is_err());
    assert!(pretrain_mlm_sequences(p, &[], &MlmHyper::default()).is_err());
}

#[test]
fn section_round_trip_is_bit_exact() {
    let p = EncoderParams::<f32>::init(tiny_config(), 6).unwrap();
    let back = EncoderParams::<f32>::from_section(&crate::io::Section::from_bytes(&p.to_section().to_bytes()).unwrap()).unwrap();
    for (a, b) in p.tensors().iter().zip(back.tensors()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut wrong = p.to_section();
    wrong.tensors.pop();
    assert!(EncoderParams::<f32>::from_section(&wrong).is_err());
}

#[test]
fn cast_preserves_values() {
    let p = EncoderParams::<f32>::init(tiny_config(), 6).unwrap();
    let back: EncoderParams<f32> = p.cast::<f64>().cast();
    assert_eq!(p, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn trace_shapes_and_softmax_rows(
        layers in 1usize..4, heads in 1usize..4, dh in 1usize..5,
        n in 1usize..9, pad in 0usize..4, seed in any::<u64>(),
    ) {
        let cfg = EncoderConfig { layers, heads, hidden: heads * dh, ffn: 5, vocab: 9, max_pos: 12 };
        let p = EncoderParams::<f32>::init(cfg, seed).unwrap();
        let mut rng = crate::rng::rng_from_seed(seed);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(3..9)).collect();
        let t = p.forward(&padded(&ids, pad)).unwrap();
        prop_assert_eq!(t.hidden.len(), layers + 1);
        prop_assert_eq!(t.attention.len(), layers);
        for h in &t.hidden {
            prop_assert_eq!(h.shape(), &[n + pad, heads * dh]);
        }
        for layer in &t.attention {
            prop_assert_eq!(layer.len(), heads);
            for a in layer {
                prop_assert_eq!(a.shape(), &[n + pad, n + pad]);
                for row in a.rows() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-5);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!(row.iter().skip(n).all(|&v| v <= 1e-6));
                }
            }
        }
    }
}
