//! Reverse-mode gradients against central finite differences, one test per
//! op family plus the two backbones.

use std::rc::Rc;

use chunklab_nn::{
    assign_positions, build_block_sparse_mask, Graph, Init, LayerNorm, Linear, Mixer, MixerConfig,
    NnError, ParamStore, Tensor, Transformer, TransformerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn numeric_grads(store: &ParamStore, loss: &dyn Fn(&ParamStore) -> f64) -> Vec<Tensor> {
    let mut work = store.clone();
    store
        .ids()
        .map(|id| {
            let (r, c) = store.get(id).shape();
            let mut g = Tensor::zeros(r, c);
            for i in 0..r * c {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + H;
                let up = loss(&work);
                work.get_mut(id).data_mut()[i] = orig - H;
                let down = loss(&work);
                work.get_mut(id).data_mut()[i] = orig;
                g.data_mut()[i] = (up - down) / (2.0 * H);
            }
            g
        })
        .collect()
}

/// Builds the loss on a fresh tape and returns its value and tape gradients.
fn check(
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<chunklab_nn::Var, NnError>,
) {
    let value = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s).unwrap();
        g.value(l).get(0, 0)
    };
    let mut g = Graph::new();
    let l = build(&mut g, store).unwrap();
    let analytic = g.backward(l, store).unwrap();
    let numeric = numeric_grads(store, &value);
    let mut vanished = 0;
    for (id, name, _) in store.iter() {
        let a = analytic.get(id);
        let n = &numeric[id.index()];
        let diff = a.zip_map(n, |x, y| x - y).norm();
        let scale = a.norm().max(n.norm());
        if scale < 1e-9 {
            // Structurally zero (e.g. key biases under softmax, per-row
            // constants under a following layer norm): both routes agree.
            vanished += 1;
            continue;
        }
        let rel = diff / scale;
        assert!(rel < TOL, "{name}: relative error {rel:e}");
    }
    assert!(vanished * 4 < store.len(), "too many vanishing gradients: {vanished}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn linear_gelu_mse() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 3, 4, Init::Fan, &mut r);
        s.get_mut(lin.b).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.05]);
        let x = Tensor::randn(5, 3, 1.0, &mut r);
        let target = Tensor::randn(5, 4, 1.0, &mut r);
        check(&s, |g, s| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, s, xv)?;
            let y = g.gelu(y);
            g.mse(y, target.clone())
        });
    }
}

#[test]
fn layer_norm() {
    for seed in 0..3 {
        let mut r = rng(10 + seed);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 4, 6, Init::Fan, &mut r);
        let ln = LayerNorm::new(&mut s, "ln", 6);
        *s.get_mut(ln.gain) = Tensor::randn(1, 6, 1.0, &mut r);
        *s.get_mut(ln.bias) = Tensor::randn(1, 6, 1.0, &mut r);
        let x = Tensor::randn(3, 4, 1.0, &mut r);
        let target = Tensor::randn(3, 6, 1.0, &mut r);
        check(&s, |g, s| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, s, xv)?;
            let y = ln.forward(g, s, y)?;
            g.mse(y, target.clone())
        });
    }
}

#[test]
fn token_mix_and_broadcasts() {
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::randn(5, 3, 1.0, &mut r));
        let b = s.add("b", Tensor::randn(5, 1, 1.0, &mut r));
        let c = s.add("c", Tensor::randn(2, 4, 1.0, &mut r));
        let x = s.add("x", Tensor::randn(6, 4, 1.0, &mut r));
        let target = Tensor::randn(10, 4, 1.0, &mut r);
        check(&s, |g, s| {
            let (wv, bv, cv, xv) = (g.param(s, w), g.param(s, b), g.param(s, c), g.param(s, x));
            let y = g.add_group(xv, cv, 3)?;
            let y = g.token_mix(wv, y, 2)?;
            let y = g.add_col_periodic(y, bv, 5)?;
            let sq = g.mul(y, y)?;
            let y = g.sub(sq, y)?;
            g.mse(y, target.clone())
        });
    }
}

#[test]
fn masked_attention_with_gather_and_concat() {
    for seed in 0..3 {
        let mut r = rng(30 + seed);
        let mut s = ParamStore::new();
        let seq = 7;
        let q = s.add("q", Tensor::randn(2 * seq, 4, 1.0, &mut r));
        let k = s.add("k", Tensor::randn(2 * seq, 4, 1.0, &mut r));
        let v = s.add("v", Tensor::randn(2 * seq, 4, 1.0, &mut r));
        let extra = s.add("extra", Tensor::randn(1, 4, 1.0, &mut r));
        let mask = build_block_sparse_mask(3, &[2, 2]).unwrap().to_shared();
        let idx: Rc<[usize]> = vec![14, 3, 4, 10, 0, 14].into();
        let target = Tensor::randn(6, 4, 1.0, &mut r);
        check(&s, |g, s| {
            let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
            let a = g.attention(qv, kv, vv, 2, seq, mask.clone())?;
            let e = g.param(s, extra);
            let cat = g.concat_rows(&[a, e])?;
            let sel = g.gather_rows(cat, idx.clone())?;
            let sel = g.scale(sel, 1.7);
            g.mse(sel, target.clone())
        });
    }
}

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let (rows, cols) = store.get(id).shape();
        let t = store.get(id).clone();
        let noise = Tensor::randn(rows, cols, 0.3, r);
        *store.get_mut(id) = t.zip_map(&noise, |a, b| a + b);
    }
}

#[test]
fn mixer_backbone() {
    for seed in 0..3 {
        let mut r = rng(40 + seed);
        let mut s = ParamStore::new();
        let cfg = MixerConfig { tokens: 3, width: 4, token_hidden: 5, channel_hidden: 6, depth: 2 };
        let mixer = Mixer::new(&mut s, "mixer", cfg, &mut r);
        randomize(&mut s, &mut r);
        let tokens = Tensor::randn(6, 4, 1.0, &mut r);
        let cond = Tensor::randn(2, 4, 1.0, &mut r);
        let target = Tensor::randn(6, 4, 1.0, &mut r);
        check(&s, |g, s| {
            let t = g.constant(tokens.clone());
            let c = g.constant(cond.clone());
            let y = mixer.forward(g, s, t, c)?;
            g.mse(y, target.clone())
        });
    }
}

#[test]
fn transformer_backbone_packed_layout() {
    for seed in 0..3 {
        let mut r = rng(50 + seed);
        let mut s = ParamStore::new();
        let cfg = TransformerConfig { width: 4, heads: 2, depth: 2, mlp_hidden: 6 };
        let tf = Transformer::new(&mut s, "tf", cfg, &mut r).unwrap();
        randomize(&mut s, &mut r);
        let mask = build_block_sparse_mask(2, &[2, 2]).unwrap();
        let pos = assign_positions(2, &[2, 2]).unwrap();
        let tokens = Tensor::randn(12, 4, 1.0, &mut r);
        let target = Tensor::randn(12, 4, 1.0, &mut r);
        check(&s, |g, s| {
            let t = g.constant(tokens.clone());
            let y = tf.forward(g, s, t, &mask, &pos)?;
            g.mse(y, target.clone())
        });
    }
}
