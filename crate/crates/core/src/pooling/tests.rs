use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::encoder::tokenize;
use crate::model::ModelVars;
use crate::tensor::Tensor;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn config(kind: PoolingKind, d: usize, r: usize, heads: usize) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder.d_model = d;
    c.encoder.n_heads = 1;
    c.encoder.d_ff = 2 * d;
    c.encoder.max_len = 16;
    c.pooling = PoolingConfig { kind, latents: r, n_heads: heads, ..PoolingConfig::default() };
    c
}

/// Binds `ckpt` and puts `h` on a fresh graph.
fn setup(ckpt: &Checkpoint<f64>, h: &[Vec<f64>]) -> (Graph<f64>, ModelVars<f64>, Var) {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, ckpt, &|_| false).unwrap();
    let hv = g.constant(Tensor::from_rows(h).unwrap());
    (g, vars, hv)
}

fn full_mask(l: usize) -> PoolMask {
    PoolMask::new(vec![true; l]).unwrap()
}

#[test]
fn eos_pooling_selects_the_eos_row() {
    let seq = tokenize("abc", 16).unwrap().padded(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = rand_matrix(&mut rng, 7, 4);
    let mut g = Graph::<f64>::new();
    let hv = g.constant(Tensor::from_rows(&h).unwrap());
    let e = pool_eos(&mut g, hv, &seq).unwrap();
    assert_eq!(g.value(e).data(), h[4].as_slice());

    let mut h2 = h.clone();
    h2[5] = vec![9.0; 4];
    h2[6] = vec![-9.0; 4];
    let hv2 = g.constant(Tensor::from_rows(&h2).unwrap());
    let e2 = pool_eos(&mut g, hv2, &seq).unwrap();
    assert_eq!(g.value(e).data(), g.value(e2).data());
}

#[test]
fn mean_pooling_closed_forms() {
    let mut g = Graph::<f64>::new();
    let h = g.constant(Tensor::from_f64_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap());
    let e = pool_mean(&mut g, h, &full_mask(2)).unwrap();
    assert_eq!(g.value(e).data(), &[1.0, 1.0]);

    let same = g.constant(Tensor::from_f64_rows(&[&[0.5, -1.5][..]; 3]).unwrap());
    let e = pool_mean(&mut g, same, &full_mask(3)).unwrap();
    assert_eq!(g.value(e).data(), &[0.5, -1.5]);
    assert!(PoolMask::new(vec![false, false]).is_err());
}

#[test]
fn mean_pooling_matches_sum_over_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let l = rng.random_range(1..9);
        let h = rand_matrix(&mut rng, l, 5);
        let mut allow: Vec<bool> = (0..l).map(|_| rng.random_bool(0.6)).collect();
        allow[rng.random_range(0..l)] = true;
        let mut g = Graph::<f64>::new();
        let hv = g.constant(Tensor::from_rows(&h).unwrap());
        let e = pool_mean(&mut g, hv, &PoolMask::new(allow.clone()).unwrap()).unwrap();
        let count = allow.iter().filter(|&&a| a).count() as f64;
        for j in 0..5 {
            let s: f64 = (0..l).filter(|&i| allow[i]).map(|i| h[i][j]).sum();
            assert!((g.value(e).data()[j] - s / count).abs() < 1e-12);
        }
    }
}

#[test]
fn pool_mask_excludes_bos_instruction_and_padding() {
    let seq = tokenize("Instruct: T Query: q", 32).unwrap().padded(26).unwrap();
    let m = PoolMask::for_sequence(&seq);
    // positions: BOS + 19 instruction bytes, then 'q' at 20, EOS at 21
    assert_eq!(m.positions(), vec![20, 21]);
    let doc = tokenize("doc", 32).unwrap();
    assert_eq!(PoolMask::for_sequence(&doc).positions(), vec![1, 2, 3, 4]);
}

// ---- dense oracle ----------------------------------------------------------

fn mat(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm_t(a: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    // a · wᵀ
    a.iter().map(|r| w.iter().map(|wr| r.iter().zip(wr).map(|(x, y)| x * y).sum()).collect()).collect()
}

fn add_bias(a: &mut [Vec<f64>], b: &[f64]) {
    a.iter_mut().for_each(|r| r.iter_mut().zip(b).for_each(|(x, y)| *x += y));
}

fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Latent (or self) attention pooling written out step by step.
fn oracle(ckpt: &Checkpoint<f64>, h: &[Vec<f64>], kv: Option<&[Vec<f64>]>, heads: usize, scaled: bool) -> Vec<f64> {
    let w = |n: &str| mat(ckpt.get(n).unwrap());
    let q = mm_t(h, &w("pool.attn.q.weight"));
    let kv_in = kv.unwrap_or(h);
    let k = mm_t(kv_in, &w("pool.attn.k.weight"));
    let v = mm_t(kv_in, &w("pool.attn.v.weight"));
    let d = q[0].len();
    let hd = d / heads;
    let mut o = vec![vec![0.0; d]; h.len()];
    for head in 0..heads {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..h.len() {
            let mut scores: Vec<f64> = k
                .iter()
                .map(|kr| cols.clone().map(|c| q[i][c] * kr[c]).sum::<f64>())
                .collect();
            if scaled {
                scores.iter_mut().for_each(|s| *s /= (hd as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let p = (s - max).exp() / z;
                for c in cols.clone() {
                    o[i][c] += p * v[j][c];
                }
            }
        }
    }
    let o = mm_t(&o, &w("pool.attn.o.weight"));
    let mut hidden = mm_t(&o, &w("pool.mlp.up.weight"));
    add_bias(&mut hidden, ckpt.get("pool.mlp.up.bias").unwrap().data());
    hidden.iter_mut().flatten().for_each(|x| *x = gelu(*x));
    let mut out = mm_t(&hidden, &w("pool.mlp.down.weight"));
    add_bias(&mut out, ckpt.get("pool.mlp.down.bias").unwrap().data());
    for (r, orow) in out.iter_mut().zip(&o) {
        r.iter_mut().zip(orow).for_each(|(x, y)| *x += y);
    }
    (0..d).map(|c| out.iter().map(|r| r[c]).sum::<f64>() / out.len() as f64).collect()
}

fn randomize_biases(ckpt: &mut Checkpoint<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["pool.mlp.up.bias", "pool.mlp.down.bias"] {
        ckpt.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

#[test]
fn latent_attention_matches_dense_oracle() {
    let mut ckpt = Checkpoint::<f64>::init(config(PoolingKind::LatentAttention, 4, 2, 2), 11).unwrap();
    randomize_biases(&mut ckpt, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = rand_matrix(&mut rng, 3, 4);
    let latents = mat(ckpt.get("pool.latents").unwrap());
    for literal in [false, true] {
        ckpt.config.pooling.unscaled_scores = literal;
        let (mut g, vars, hv) = setup(&ckpt, &h);
        let PoolVars::LatentAttention(dict) = &vars.pool else { panic!() };
        let e = pool_latent_attention(&mut g, hv, dict, &ckpt.config.pooling, &full_mask(3)).unwrap();
        let want = oracle(&ckpt, &h, Some(&latents), 2, !literal);
        for (a, b) in g.value(e).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "literal={literal}: {a} vs {b}");
        }
    }
}

#[test]
fn single_latent_gives_constant_attention_output() {
    let mut ckpt = Checkpoint::<f64>::init(config(PoolingKind::LatentAttention, 4, 1, 2), 5).unwrap();
    randomize_biases(&mut ckpt, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = rand_matrix(&mut rng, 5, 4);
    let (mut g, vars, hv) = setup(&ckpt, &h);
    let PoolVars::LatentAttention(dict) = &vars.pool else { panic!() };
    let e = pool_latent_attention(&mut g, hv, dict, &ckpt.config.pooling, &full_mask(5)).unwrap();
    // every query row sees only the lone latent, so the result is the MLP
    // path applied to the projected latent, whatever H is
    let latent = mat(ckpt.get("pool.latents").unwrap());
    let want = oracle(&ckpt, &latent, Some(&latent), 2, true);
    for (a, b) in g.value(e).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_latents_reduce_to_one_latent() {
    let base = Checkpoint::<f64>::init(config(PoolingKind::LatentAttention, 4, 1, 2), 5).unwrap();
    let mut cfg4 = base.config.clone();
    cfg4.pooling.latents = 4;
    let mut tensors = base.tensors().clone();
    let lone = base.get("pool.latents").unwrap().row(0).to_vec();
    tensors.insert("pool.latents".into(), Tensor::from_rows(&vec![lone; 4]).unwrap());
    let four = Checkpoint::from_parts(cfg4, tensors).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = rand_matrix(&mut rng, 3, 4);
    let run = |ckpt: &Checkpoint<f64>| {
        let (mut g, vars, hv) = setup(ckpt, &h);
        let PoolVars::LatentAttention(dict) = &vars.pool else { panic!() };
        let e = pool_latent_attention(&mut g, hv, dict, &ckpt.config.pooling, &full_mask(3)).unwrap();
        g.value(e).clone()
    };
    assert!(run(&base).max_abs_diff(&run(&four)) < 1e-12);
}

#[test]
fn latent_weights_sum_to_one_and_permutation_is_invisible() {
    let ckpt = Checkpoint::<f64>::init(config(PoolingKind::LatentAttention, 8, 5, 2), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = rand_matrix(&mut rng, 4, 8);
    let run = |ckpt: &Checkpoint<f64>| {
        let (mut g, vars, hv) = setup(ckpt, &h);
        let PoolVars::LatentAttention(dict) = &vars.pool else { panic!() };
        let e = pool_latent_attention(&mut g, hv, dict, &ckpt.config.pooling, &full_mask(4)).unwrap();
        g.value(e).clone()
    };
    let mut permuted = ckpt.clone();
    let lat = permuted.get_mut("pool.latents").unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|i| lat.row(i).to_vec()).collect();
    for (dst, src) in [4, 2, 0, 3, 1].into_iter().enumerate() {
        lat.row_mut(dst).copy_from_slice(&rows[src]);
    }
    assert!(run(&ckpt).max_abs_diff(&run(&permuted)) < 1e-12);

    // attention weights over latents are a distribution per query row
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::from_rows(&h).unwrap());
    let l = g.constant(ckpt.get("pool.latents").unwrap().clone());
    let s = g.matmul_nt(q, l).unwrap();
    let p = g.softmax_rows(s, None).unwrap();
    for i in 0..4 {
        assert!((g.value(p).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn masked_out_rows_do_not_matter() {
    let ckpt = Checkpoint::<f64>::init(config(PoolingKind::LatentAttention, 4, 3, 2), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = rand_matrix(&mut rng, 5, 4);
    let mut h2 = h.clone();
    h2[0] = vec![7.0; 4];
    h2[1] = vec![-3.0; 4];
    let mask = PoolMask::new(vec![false, false, true, true, true]).unwrap();
    for kind in [PoolingKind::Mean, PoolingKind::LatentAttention] {
        let run = |h: &[Vec<f64>]| {
            let (mut g, vars, hv) = setup(&ckpt, h);
            let e = match (kind, &vars.pool) {
                (PoolingKind::Mean, _) => pool_mean(&mut g, hv, &mask).unwrap(),
                (_, PoolVars::LatentAttention(d)) => {
                    pool_latent_attention(&mut g, hv, d, &ckpt.config.pooling, &mask).unwrap()
                }
                _ => unreachable!(),
            };
            g.value(e).clone()
        };
        assert_eq!(run(&h), run(&h2), "{kind}");
    }
}

#[test]
fn self_attention_matches_oracle_and_reduces_for_one_row() {
    let mut ckpt = Checkpoint::<f64>::init(config(PoolingKind::SelfAttention, 4, 0, 2), 13).unwrap();
    randomize_biases(&mut ckpt, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = rand_matrix(&mut rng, 3, 4);
    let run = |h: &[Vec<f64>]| {
        let (mut g, vars, hv) = setup(&ckpt, h);
        let PoolVars::SelfAttention(block) = &vars.pool else { panic!() };
        let e = pool_self_attention(&mut g, hv, block, &ckpt.config.pooling, &full_mask(h.len())).unwrap();
        g.value(e).data().to_vec()
    };
    let got = run(&h);
    let want = oracle(&ckpt, &h, None, 2, true);
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));

    // permutation equivariance of self-attention, then mean
    let permuted = vec![h[2].clone(), h[0].clone(), h[1].clone()];
    assert!(run(&permuted).iter().zip(&got).all(|(a, b)| (a - b).abs() < 1e-12));

    // one row: attention is trivially 1 on itself
    let single = vec![h[1].clone()];
    let want1 = oracle(&ckpt, &single, Some(&single), 2, true);
    assert!(run(&single).iter().zip(&want1).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn width_mismatch_is_a_config_error() {
    let ckpt = Checkpoint::<f64>::init(config(PoolingKind::LatentAttention, 4, 2, 2), 1).unwrap();
    let (mut g, vars, _) = setup(&ckpt, &[vec![0.0; 4]]);
    let wide = g.constant(Tensor::zeros([2, 6]));
    let PoolVars::LatentAttention(dict) = &vars.pool else { panic!() };
    assert!(matches!(
        pool_latent_attention(&mut g, wide, dict, &ckpt.config.pooling, &full_mask(2)),
        Err(Error::Config(_))
    ));
}

#[test]
fn normalize_examples() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::from_f64_rows(&[&[3.0, 4.0]]).unwrap());
    let n = normalize(&mut g, e).unwrap();
    assert!((g.value(n).data()[0] - 0.6).abs() < 1e-15 && (g.value(n).data()[1] - 0.8).abs() < 1e-15);
    let u = g.constant(Tensor::from_f64_rows(&[&[0.0, 1.0]]).unwrap());
    let n = normalize(&mut g, u).unwrap();
    assert_eq!(g.value(n).data(), &[0.0, 1.0]);
    let z = g.constant(Tensor::zeros([1, 3]));
    assert!(matches!(normalize(&mut g, z), Err(Error::Numeric(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let v = g.constant(Tensor::from_rows(&rand_matrix(&mut rng, 1, 7)).unwrap());
        let n = normalize(&mut g, v).unwrap();
        let norm: f64 = g.value(n).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn every_head_is_differentiable_end_to_end() {
    use crate::gradcheck::{check_gradients, Tolerance};
    use crate::model::embed_on;
    for kind in PoolingKind::ALL {
        let mut cfg = config(kind, 4, 2, 2);
        cfg.encoder.n_layers = 1;
        cfg.encoder.n_heads = 2;
        cfg.encoder.max_len = 32;
        let ckpt = Checkpoint::<f64>::init(cfg, 21).unwrap();
        let seq = tokenize("Instruct: t Query: ab", 32).unwrap();
        let names: Vec<String> = ckpt.names().map(String::from).collect();
        let params: Vec<(String, Tensor<f64>)> =
            names.iter().map(|n| (n.clone(), ckpt.get(n).unwrap().clone())).collect();
        let report = check_gradients(&params, Tolerance::default(), None, |g, vars| {
            let mut tensors = std::collections::BTreeMap::new();
            for (n, v) in names.iter().zip(vars) {
                tensors.insert(n.clone(), *v);
            }
            let mv = bind_vars(g, &ckpt, &tensors);
            let e = embed_on(g, &mv, &ckpt.config, &seq, None)?;
            let w = g.constant(Tensor::from_f64_rows(&[&[0.3, -0.7, 0.2, 0.9]]).unwrap());
            let p = g.mul(e.embedding, w)?;
            g.sum(p)
        })
        .unwrap();
        for c in report {
            assert!(c.passed(), "{kind}: {} {:?}", c.name, c.worst);
        }
    }
}

/// Rebuilds ModelVars around externally created vars.
fn bind_vars(
    g: &mut Graph<f64>,
    ckpt: &Checkpoint<f64>,
    existing: &std::collections::BTreeMap<String, Var>,
) -> ModelVars<f64> {
    crate::model::ModelVars::bind_existing(g, ckpt, existing).unwrap()
}
