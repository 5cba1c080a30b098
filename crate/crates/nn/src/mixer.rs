//! MLP-Mixer blocks: token mixing across the chunk followed by channel mixing,
//! each pre-normalized with a residual connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub tokens: usize,
    pub width: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub depth: usize,
}

impl MixerConfig {
    pub fn new(tokens: usize, width: usize) -> Self {
        Self { tokens, width, token_hidden: 2 * tokens, channel_hidden: 2 * width, depth: 4 }
    }
}

#[derive(Clone, Debug)]
struct MixerBlock {
    norm_tokens: LayerNorm,
    token_w1: ParamId,
    token_b1: ParamId,
    token_w2: ParamId,
    token_b2: ParamId,
    norm_channels: LayerNorm,
    channel_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Mixer {
    config: MixerConfig,
    blocks: Vec<MixerBlock>,
    final_norm: LayerNorm,
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: MixerConfig,
        rng: &mut R,
    ) -> Self {
        let (t, ht, c) = (config.tokens, config.token_hidden, config.width);
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                MixerBlock {
                    norm_tokens: LayerNorm::new(store, &format!("{p}.norm_tokens"), c),
                    token_w1: store.add(
                        format!("{p}.token.w1"),
                        Tensor::truncated_normal(ht, t, 1.0 / (t as f64).sqrt(), rng),
                    ),
                    token_b1: store.add(format!("{p}.token.b1"), Tensor::zeros(ht, 1)),
                    token_w2: store.add(
                        format!("{p}.token.w2"),
                        Tensor::truncated_normal(t, ht, 1.0 / (ht as f64).sqrt(), rng),
                    ),
                    token_b2: store.add(format!("{p}.token.b2"), Tensor::zeros(t, 1)),
                    norm_channels: LayerNorm::new(store, &format!("{p}.norm_channels"), c),
                    channel_mlp: Mlp::new(store, &format!("{p}.channel"), c, config.channel_hidden, c, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), c);
        Self { config, blocks, final_norm }
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    /// `tokens` stacks `B` sequences of `[T, C]`; `cond` is `[B, C]` and is
    /// added to every token of its sequence before the blocks run.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        cond: Var,
    ) -> Result<Var, NnError> {
        let (rows, width) = g.value(tokens).shape();
        let t = self.config.tokens;
        if width != self.config.width || rows % t != 0 {
            return Err(NnError::Shape(format!(
                "mixer: input {rows}x{width}, expected multiples of {t}x{}",
                self.config.width
            )));
        }
        let groups = rows / t;
        let mut x = g.add_group(tokens, cond, t)?;
        for b in &self.blocks {
            let y = b.norm_tokens.forward(g, store, x)?;
            let w1 = g.param(store, b.token_w1);
            let b1 = g.param(store, b.token_b1);
            let h = g.token_mix(w1, y, groups)?;
            let h = g.add_col_periodic(h, b1, self.config.token_hidden)?;
            let h = g.gelu(h);
            let w2 = g.param(store, b.token_w2);
            let b2 = g.param(store, b.token_b2);
            let z = g.token_mix(w2, h, groups)?;
            let z = g.add_col_periodic(z, b2, t)?;
            x = g.add(x, z)?;

            let y = b.norm_channels.forward(g, store, x)?;
            let z = b.channel_mlp.forward(g, store, y)?;
            x = g.add(x, z)?;
        }
        self.final_norm.forward(g, store, x)
    }
}
