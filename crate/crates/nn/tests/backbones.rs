use chunklab_nn::{
    assign_positions, build_block_sparse_mask, BlockSparseMask, Graph, Init, Linear, Mixer,
    MixerConfig, ParamStore, PositionIds, Tensor, Transformer, TransformerConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mixer_out(store: &ParamStore, mixer: &Mixer, tokens: &Tensor, cond: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let c = g.constant(cond.clone());
    let y = mixer.forward(&mut g, store, t, c).unwrap();
    g.value(y).clone()
}

fn tf_out(store: &ParamStore, tf: &Transformer, tokens: &Tensor, mask: &BlockSparseMask, pos: &PositionIds) -> Tensor {
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let y = tf.forward(&mut g, store, t, mask, pos).unwrap();
    g.value(y).clone()
}

fn small_transformer(seed: u64) -> (ParamStore, Transformer) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let tf = Transformer::new(&mut s, "tf", TransformerConfig { width: 8, heads: 2, depth: 2, mlp_hidden: 16 }, &mut r)
        .unwrap();
    (s, tf)
}

#[test]
fn zero_head_outputs_zero() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let mixer = Mixer::new(&mut s, "m", MixerConfig::new(8, 16), &mut r);
    let head = Linear::new(&mut s, "head", 16, 2, Init::Zero, &mut r);
    for _ in 0..3 {
        let tokens = Tensor::randn(16, 16, 3.0, &mut r);
        let cond = Tensor::randn(2, 16, 3.0, &mut r);
        let mut g = Graph::new();
        let t = g.constant(tokens);
        let c = g.constant(cond);
        let y = mixer.forward(&mut g, &s, t, c).unwrap();
        let out = head.forward(&mut g, &s, y).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mixer_rejects_bad_shapes() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let mixer = Mixer::new(&mut s, "m", MixerConfig::new(4, 8), &mut r);
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros(6, 8));
    let c = g.constant(Tensor::zeros(1, 8));
    assert!(mixer.forward(&mut g, &s, t, c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mixer_batch_permutation_is_equivariant(seed in 0u64..1000, swap in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let t = 4;
        let mixer = Mixer::new(&mut s, "m", MixerConfig::new(t, 8), &mut r);
        let tokens = Tensor::randn(4 * t, 8, 1.0, &mut r);
        let cond = Tensor::randn(4, 8, 1.0, &mut r);
        let base = mixer_out(&s, &mixer, &tokens, &cond);
        // swap sample 0 with sample `swap`
        let mut pt = tokens.clone();
        let mut pc = cond.clone();
        for i in 0..t {
            pt.row_slice_mut(i).copy_from_slice(tokens.row_slice(swap * t + i));
            pt.row_slice_mut(swap * t + i).copy_from_slice(tokens.row_slice(i));
        }
        pc.row_slice_mut(0).copy_from_slice(cond.row_slice(swap));
        pc.row_slice_mut(swap).copy_from_slice(cond.row_slice(0));
        let perm = mixer_out(&s, &mixer, &pt, &pc);
        for i in 0..t {
            prop_assert_eq!(perm.row_slice(i), base.row_slice(swap * t + i));
            prop_assert_eq!(perm.row_slice(swap * t + i), base.row_slice(i));
        }
    }

    #[test]
    fn branch_isolation_is_bit_exact(seed in 0u64..1000, victim in 0usize..3) {
        let (s, tf) = small_transformer(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let (obs, bl) = (3, 4);
        let mask = build_block_sparse_mask(obs, &[bl; 3]).unwrap();
        let pos = assign_positions(obs, &[bl; 3]).unwrap();
        let tokens = Tensor::randn(obs + 3 * bl, 8, 1.0, &mut r);
        let base = tf_out(&s, &tf, &tokens, &mask, &pos);
        let mut perturbed = tokens.clone();
        let start = obs + victim * bl;
        for row in start..start + bl {
            for v in perturbed.row_slice_mut(row) {
                *v += 10.0;
            }
        }
        let out = tf_out(&s, &tf, &perturbed, &mask, &pos);
        for row in 0..obs + 3 * bl {
            if row >= start && row < start + bl {
                continue;
            }
            prop_assert_eq!(out.row_slice(row), base.row_slice(row));
        }
    }

    #[test]
    fn swapping_branches_permutes_outputs(seed in 0u64..1000) {
        let (s, tf) = small_transformer(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x123);
        let (obs, bl) = (2, 3);
        let mask = build_block_sparse_mask(obs, &[bl, bl]).unwrap();
        let pos = assign_positions(obs, &[bl, bl]).unwrap();
        let tokens = Tensor::randn(obs + 2 * bl, 8, 1.0, &mut r);
        let mut swapped = tokens.clone();
        for i in 0..bl {
            swapped.row_slice_mut(obs + i).copy_from_slice(tokens.row_slice(obs + bl + i));
            swapped.row_slice_mut(obs + bl + i).copy_from_slice(tokens.row_slice(obs + i));
        }
        let a = tf_out(&s, &tf, &tokens, &mask, &pos);
        let b = tf_out(&s, &tf, &swapped, &mask, &pos);
        for i in 0..obs {
            prop_assert_eq!(a.row_slice(i), b.row_slice(i));
        }
        for i in 0..bl {
            prop_assert_eq!(a.row_slice(obs + i), b.row_slice(obs + bl + i));
            prop_assert_eq!(a.row_slice(obs + bl + i), b.row_slice(obs + i));
        }
    }
}

// Reference forward built from plain tensor math, attending to every token.
fn reference_forward(s: &ParamStore, tokens: &Tensor, ids: &[usize], heads: usize, depth: usize) -> Tensor {
    use chunklab_nn::sinusoidal_positions;
    use chunklab_nn::tensor::matmul;
    let p = |n: &str| s.get(s.id(n).unwrap()).clone();
    let lin = |x: &Tensor, n: &str| {
        let mut y = matmul(x, &p(&format!("{n}.w")));
        let b = p(&format!("{n}.b"));
        for r in 0..y.rows() {
            for (o, bb) in y.row_slice_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        y
    };
    let ln = |x: &Tensor, n: &str| {
        let (g, b) = (p(&format!("{n}.gain")), p(&format!("{n}.bias")));
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = x.row_slice(r);
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
            for (c, o) in y.row_slice_mut(r).iter_mut().enumerate() {
                *o = (row[c] - m) / (v + 1e-5).sqrt() * g.data()[c] + b.data()[c];
            }
        }
        y
    };
    let gelu = |x: &Tensor| x.map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()));
    let n = tokens.rows();
    let width = tokens.cols();
    let dh = width / heads;
    let mut x = tokens.zip_map(&sinusoidal_positions(ids, width), |a, b| a + b);
    for l in 0..depth {
        let pre = format!("tf.block{l}");
        let y = ln(&x, &format!("{pre}.norm_attn"));
        let (q, k, v) = (lin(&y, &format!("{pre}.q")), lin(&y, &format!("{pre}.k")), lin(&y, &format!("{pre}.v")));
        let mut att = Tensor::zeros(n, width);
        for h in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|d| q.get(i, h * dh + d) * k.get(j, h * dh + d)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    let val: f64 = (0..n).map(|j| e[j] / z * v.get(j, h * dh + d)).sum();
                    att.set(i, h * dh + d, val);
                }
            }
        }
        let a = lin(&att, &format!("{pre}.out"));
        x = x.zip_map(&a, |p, q| p + q);
        let y = ln(&x, &format!("{pre}.norm_mlp"));
        let z = lin(&gelu(&lin(&y, &format!("{pre}.mlp.fc1"))), &format!("{pre}.mlp.fc2"));
        x = x.zip_map(&z, |p, q| p + q);
    }
    ln(&x, "tf.final_norm")
}

#[test]
fn full_mask_matches_unmasked_reference() {
    for seed in 0..3 {
        let (s, tf) = small_transformer(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 99);
        let tokens = Tensor::randn(6, 8, 1.0, &mut r);
        let ids: Vec<usize> = (0..6).collect();
        let out = tf_out(&s, &tf, &tokens, &BlockSparseMask::full(6), &PositionIds(ids.clone()));
        let reference = reference_forward(&s, &tokens, &ids, 2, 2);
        let err = out.zip_map(&reference, |a, b| (a - b).abs()).data().iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-12, "max abs diff {err}");
    }
}

#[test]
fn transformer_rejects_mismatched_lengths() {
    let (s, tf) = small_transformer(0);
    let mask = build_block_sparse_mask(2, &[3]).unwrap();
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros(5, 8));
    assert!(tf.forward(&mut g, &s, t, &mask, &PositionIds(vec![0, 1, 2])).is_err());
    let t = g.constant(Tensor::zeros(4, 8));
    let pos = assign_positions(2, &[3]).unwrap();
    assert!(tf.forward(&mut g, &s, t, &mask, &pos).is_err());
}
