//! Pre-norm transformer encoder with an explicit attention mask and explicit
//! position ids, so packed sequences can share positions across branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::layers::{Init, LayerNorm, Linear, Mlp};
use crate::mask::{BlockSparseMask, PositionIds};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

#[derive(Clone, Debug)]
struct Block {
    norm_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

/// Sinusoidal encodings, one row per position id.
pub fn sinusoidal_positions(ids: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(ids.len(), width);
    for (r, &pos) in ids.iter().enumerate() {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            t.set(r, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if config.heads == 0 || config.width % config.heads != 0 {
            return Err(NnError::Shape(format!(
                "width {} not divisible by {} heads",
                config.width, config.heads
            )));
        }
        let c = config.width;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Block {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), c),
                    q: Linear::new(store, &format!("{p}.q"), c, c, Init::Fan, rng),
                    k: Linear::new(store, &format!("{p}.k"), c, c, Init::Fan, rng),
                    v: Linear::new(store, &format!("{p}.v"), c, c, Init::Fan, rng),
                    out: Linear::new(store, &format!("{p}.out"), c, c, Init::Fan, rng),
                    norm_mlp: LayerNorm::new(store, &format!("{p}.norm_mlp"), c),
                    mlp: Mlp::new(store, &format!("{p}.mlp"), c, config.mlp_hidden, c, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), c);
        Ok(Self { config, blocks, final_norm })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// `tokens` stacks sequences of `mask.len()` rows each; every sequence
    /// uses the same mask and position ids.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        mask: &BlockSparseMask,
        positions: &PositionIds,
    ) -> Result<Var, NnError> {
        let seq = mask.len();
        let (rows, width) = g.value(tokens).shape();
        if positions.0.len() != seq {
            return Err(NnError::Shape(format!(
                "transformer: {} position ids for mask of {seq}",
                positions.0.len()
            )));
        }
        if width != self.config.width || seq == 0 || rows % seq != 0 {
            return Err(NnError::Shape(format!(
                "transformer: input {rows}x{width} for sequence length {seq}"
            )));
        }
        let pe = sinusoidal_positions(&positions.0, width);
        let mut tiled = Vec::with_capacity(rows * width);
        for _ in 0..rows / seq {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::from_vec(rows, width, tiled)?);
        let mut x = g.add(tokens, pe)?;
        let shared_mask = mask.to_shared();
        for b in &self.blocks {
            let y = b.norm_attn.forward(g, store, x)?;
            let q = b.q.forward(g, store, y)?;
            let k = b.k.forward(g, store, y)?;
            let v = b.v.forward(g, store, y)?;
            let a = g.attention(q, k, v, self.config.heads, seq, shared_mask.clone())?;
            let a = b.out.forward(g, store, a)?;
            x = g.add(x, a)?;
            let y = b.norm_mlp.forward(g, store, x)?;
            let z = b.mlp.forward(g, store, y)?;
            x = g.add(x, z)?;
        }
        self.final_norm.forward(g, store, x)
    }
}
