use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::error::Error;
use crate::pooling::PoolingKind;

fn config(mode: MaskMode, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d_model = 16;
    c.encoder.n_heads = 2;
    c.encoder.d_ff = 32;
    c.encoder.n_layers = layers;
    c.encoder.max_len = 24;
    c.encoder.mask_mode = mode;
    c.pooling.kind = PoolingKind::Mean;
    c
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize) -> TokenSequence {
    let text: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
    tokenize(&text, 24).unwrap()
}

fn rows_equal(a: &crate::tensor::Tensor<f64>, b: &crate::tensor::Tensor<f64>, upto: usize) -> bool {
    (0..upto).all(|i| a.row(i) == b.row(i))
}

#[test]
fn causal_mode_never_leaks_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Causal, 2), 7).unwrap();
    for _ in 0..10 {
        let seq = random_seq(&mut rng, 8);
        let t = rng.random_range(1..seq.valid_len - 1);
        let mut probe = seq.clone();
        probe.ids[t] = (probe.ids[t] + 1 - 97) % 26 + 97;
        let (a, b) = (encode(&seq, &ckpt).unwrap(), encode(&probe, &ckpt).unwrap());
        assert!(rows_equal(&a, &b, t), "position < {t} changed");
        assert_ne!(a.row(t), b.row(t));
    }
}

#[test]
fn bidirectional_mode_leaks_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Bidirectional, 2), 7).unwrap();
    let seq = random_seq(&mut rng, 8);
    let mut probe = seq.clone();
    probe.ids[5] = b'#' as usize;
    let (a, b) = (encode(&seq, &ckpt).unwrap(), encode(&probe, &ckpt).unwrap());
    assert!(!rows_equal(&a, &b, 5));
}

#[test]
fn zero_layers_is_token_plus_position_embedding() {
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Bidirectional, 0), 3).unwrap();
    let seq = tokenize("hi", 24).unwrap();
    let h = encode(&seq, &ckpt).unwrap();
    let (tok, pos) = (ckpt.get("embed.tokens").unwrap(), ckpt.get("embed.positions").unwrap());
    for (i, &id) in seq.ids.iter().enumerate() {
        let want: Vec<f64> = tok.row(id).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        assert_eq!(h.row(i), want.as_slice());
    }
}

#[test]
fn pad_tokens_are_opaque() {
    for mode in [MaskMode::Causal, MaskMode::Bidirectional] {
        let ckpt = Checkpoint::<f64>::init(config(mode, 2), 5).unwrap();
        let seq = tokenize("padding", 24).unwrap().padded(12).unwrap();
        let mut other = seq.clone();
        for id in &mut other.ids[seq.valid_len..] {
            *id = b'z' as usize;
        }
        let (a, b) = (encode(&seq, &ckpt).unwrap(), encode(&other, &ckpt).unwrap());
        assert!(rows_equal(&a, &b, seq.valid_len), "{mode}");
    }
}

#[test]
fn single_token_is_mode_independent() {
    let seq = TokenSequence { ids: vec![EOS], instruction_end: 0, valid_len: 1 };
    let c = Checkpoint::<f64>::init(config(MaskMode::Causal, 2), 9).unwrap();
    let mut b = c.clone();
    b.config.encoder.mask_mode = MaskMode::Bidirectional;
    assert_eq!(encode(&seq, &c).unwrap(), encode(&seq, &b).unwrap());
}

#[test]
fn out_of_vocab_and_overlong_inputs_are_rejected() {
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Causal, 1), 1).unwrap();
    let bad = TokenSequence { ids: vec![BOS, 999, EOS], instruction_end: 0, valid_len: 3 };
    assert!(matches!(encode(&bad, &ckpt), Err(Error::Input(_))));
    let long = TokenSequence { ids: vec![BOS; 30], instruction_end: 0, valid_len: 30 };
    assert!(matches!(encode(&long, &ckpt), Err(Error::Input(_))));
}

#[test]
fn zero_b_adapter_is_identity() {
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Bidirectional, 2), 4).unwrap();
    let ad = LoraAdapter::init(&ckpt, "layers.1.attn.v", 2, 4.0, 0.0, 8).unwrap();
    let adapted = apply_lora(&ckpt, vec![ad]).unwrap();
    let seq = tokenize("identity", 24).unwrap();
    assert_eq!(encode(&seq, &ckpt).unwrap(), encode(&seq, &adapted).unwrap());
}

#[test]
fn full_rank_adapter_equals_adding_the_update() {
    // rank = min(in, out), alpha = rank, A = I, B = ΔW  ⇒  B·A = ΔW
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Bidirectional, 1), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(-0.3..0.3)).collect();
    let mut a = crate::tensor::Tensor::zeros([16, 16]);
    for i in 0..16 {
        a.data_mut()[i * 16 + i] = 1.0;
    }
    let ad = LoraAdapter {
        target: "layers.0.attn.o".into(),
        rank: 16,
        alpha: 16.0,
        dropout: 0.0,
        a,
        b: crate::tensor::Tensor::new([16, 16], delta.clone()).unwrap(),
    };
    let adapted = apply_lora(&ckpt, vec![ad]).unwrap();
    let mut direct = ckpt.clone();
    let w = direct.get_mut("layers.0.attn.o.weight").unwrap();
    w.data_mut().iter_mut().zip(&delta).for_each(|(w, d)| *w += d);
    let seq = tokenize("full rank", 24).unwrap();
    let diff = encode(&seq, &adapted).unwrap().max_abs_diff(&encode(&seq, &direct).unwrap());
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn random_adapter_matches_dense_reconstruction() {
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Causal, 2), 6).unwrap();
    let mut ad = LoraAdapter::init(&ckpt, "layers.0.ffn.up", 2, 3.0, 0.1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    ad.b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));

    // oracle: W + (alpha/rank)·B·A by explicit loops
    let mut dense = ckpt.clone();
    let w = dense.get_mut("layers.0.ffn.up.weight").unwrap();
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    for o in 0..out_dim {
        for i in 0..in_dim {
            let mut s = 0.0;
            for r in 0..2 {
                s += ad.b.at(o, r) * ad.a.at(r, i);
            }
            w.data_mut()[o * in_dim + i] += 1.5 * s;
        }
    }
    let adapted = apply_lora(&ckpt, vec![ad]).unwrap();
    let seq = tokenize("low rank check", 24).unwrap();
    let diff = encode(&seq, &adapted).unwrap().max_abs_diff(&encode(&seq, &dense).unwrap());
    assert!(diff < 1e-9, "{diff}");
    let merged = merge_lora(&adapted).unwrap();
    assert!(merged.config.lora.is_empty());
    assert!(encode(&seq, &merged).unwrap().max_abs_diff(&encode(&seq, &dense).unwrap()) < 1e-9);
}

#[test]
fn unknown_lora_target_is_a_config_error() {
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Causal, 1), 6).unwrap();
    assert!(matches!(
        LoraAdapter::init(&ckpt, "layers.7.attn.q", 2, 4.0, 0.0, 0),
        Err(Error::Config(_))
    ));
    let mut ad = LoraAdapter::init(&ckpt, "layers.0.attn.q", 2, 4.0, 0.0, 0).unwrap();
    ad.target = "embed.tokens".into();
    assert!(matches!(apply_lora(&ckpt, vec![ad]), Err(Error::Config(_))));
}

#[test]
fn lora_training_only_touches_adapters() {
    use crate::autodiff::Graph;
    use crate::model::{embed_on, ModelVars};
    let ckpt = Checkpoint::<f64>::init(config(MaskMode::Bidirectional, 1), 6).unwrap();
    let mut ad = LoraAdapter::init(&ckpt, "layers.0.attn.q", 2, 4.0, 0.0, 0).unwrap();
    ad.b.data_mut().iter_mut().for_each(|v| *v = 0.1);
    let ckpt = apply_lora(&ckpt, vec![ad]).unwrap();
    let mut g = Graph::new();
    let is_adapter = |n: &str| n.ends_with(".lora_a") || n.ends_with(".lora_b");
    let vars = ModelVars::bind(&mut g, &ckpt, &is_adapter).unwrap();
    let seq = tokenize("train adapters", 24).unwrap();
    let e = embed_on(&mut g, &vars, &ckpt.config, &seq, None).unwrap();
    let s = g.sum(e.pooled).unwrap();
    g.backward(s).unwrap();
    for (name, &v) in &vars.params {
        assert_eq!(g.grad(v).is_some(), is_adapter(name), "{name}");
    }
}
