//! Flow-matching action-chunk policies.
//!
//! A policy maps `(observation, robot state)` to a chunk of `H` delta actions
//! by integrating a learned velocity field from Gaussian noise. Two backbones
//! are available: an MLP-Mixer over the action tokens with the conditioning
//! summed into every token, and a transformer that reads observation, state
//! and action tokens. Only the transformer supports packed training, where
//! several temporal-offset branches share one encoded observation.

use std::path::Path;
use std::rc::Rc;

use chunklab_nn::{
    assign_positions, build_block_sparse_mask, AdamW, AdamWConfig, Gradients, Graph, Init, Linear,
    Mixer, MixerConfig, Mlp, ParamStore, Schedule, Tensor, Transformer, TransformerConfig, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, OffsetSample};
use crate::error::{Error, Result};
use crate::types::{Action, Observation, RobotState};

/// Number of flow-time features fed to the conditioning networks.
pub const TIME_FEATURES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Mixer,
    Transformer,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixer" => Ok(Backbone::Mixer),
            "transformer" => Ok(Backbone::Transformer),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub backbone: Backbone,
    pub horizon: usize,
    pub flow_steps: usize,
    pub width: usize,
    pub depth: usize,
    /// Mixer token-mixing hidden size.
    pub token_hidden: usize,
    /// Mixer channel-mixing hidden size.
    pub channel_hidden: usize,
    /// Transformer attention heads.
    pub heads: usize,
    /// Transformer MLP hidden size.
    pub mlp_hidden: usize,
    /// Observation features per transformer token.
    pub obs_token_dim: usize,
    pub cond_hidden: usize,
    pub delta_max: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl PolicyConfig {
    pub fn new(backbone: Backbone, obs_dim: usize, state_dim: usize) -> Self {
        PolicyConfig {
            backbone,
            horizon: 8,
            flow_steps: 10,
            width: 32,
            depth: 3,
            token_hidden: 16,
            channel_hidden: 64,
            heads: 2,
            mlp_hidden: 64,
            obs_token_dim: 2,
            cond_hidden: 64,
            delta_max: 0,
            obs_dim,
            state_dim,
            action_dim: state_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon < 1 {
            return Err(Error::InvalidHorizon("prediction horizon must be at least 1".into()));
        }
        if self.flow_steps < 1 {
            return bad("flow_steps must be at least 1");
        }
        if self.width == 0 || self.depth == 0 || self.cond_hidden == 0 {
            return bad("width, depth and cond_hidden must be positive");
        }
        if self.obs_dim == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return bad("obs, state and action dims must be positive");
        }
        match self.backbone {
            Backbone::Mixer if self.token_hidden == 0 || self.channel_hidden == 0 => {
                bad("mixer hidden sizes must be positive")
            }
            Backbone::Transformer if self.heads == 0 || self.width % self.heads != 0 => {
                bad("width must be a positive multiple of heads")
            }
            Backbone::Transformer if self.obs_token_dim == 0 || self.mlp_hidden == 0 => {
                bad("obs_token_dim and mlp_hidden must be positive")
            }
            _ => Ok(()),
        }
    }

    /// Observation tokens per sequence (transformer backbone).
    pub fn obs_tokens(&self) -> usize {
        self.obs_dim.div_ceil(self.obs_token_dim)
    }

    /// Tokens per offset branch: one state token plus `H` action tokens.
    pub fn branch_tokens(&self) -> usize {
        1 + self.horizon
    }

    /// Transformer tokens for one observation with `branches` offsets, packed
    /// or as separate sequences: `(packed, separate)`.
    pub fn token_counts(&self, branches: usize) -> (usize, usize) {
        chunklab_nn::packed_token_counts(self.obs_tokens(), self.branch_tokens(), branches)
    }
}

/// Feature standardization computed from a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_std: Vec<f64>,
}

const MIN_STD: f64 = 1e-3;

fn mean_std(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize, centered: bool) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut n = 0.0f64;
    if centered {
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(&r) {
                *m += v;
            }
            n += 1.0;
        }
        for m in &mut mean {
            *m /= n.max(1.0);
        }
    }
    let mut var = vec![0.0; dim];
    n = 0.0;
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(&r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
        n += 1.0;
    }
    let std = var.into_iter().map(|s| (s / f64::max(n, 1.0)).sqrt().max(MIN_STD)).collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(obs_dim: usize, state_dim: usize, action_dim: usize) -> Self {
        Normalizer {
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    /// Observation and state are centred and scaled per feature; actions are
    /// only scaled (root mean square) so that zero stays zero.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let first = dataset
            .trajectories
            .iter()
            .find_map(|t| t.steps.first())
            .ok_or(Error::EmptyDataset)?;
        let steps = || dataset.trajectories.iter().flat_map(|t| t.steps.iter());
        let (obs_mean, obs_std) = mean_std(steps().map(|s| s.obs.features.clone()), first.obs.features.len(), true);
        let (state_mean, state_std) = mean_std(steps().map(|s| s.state.0.clone()), first.state.dim(), true);
        let (_, action_std) = mean_std(steps().map(|s| s.action.0.clone()), first.action.0.len(), false);
        Ok(Normalizer { obs_mean, obs_std, state_mean, state_std, action_std })
    }

    fn norm(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
        x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn obs(&self, o: &[f64]) -> Vec<f64> {
        Self::norm(o, &self.obs_mean, &self.obs_std)
    }

    pub fn state(&self, s: &[f64]) -> Vec<f64> {
        Self::norm(s, &self.state_mean, &self.state_std)
    }

    pub fn action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_std).map(|(v, s)| v / s).collect()
    }

    pub fn denorm_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_std).map(|(v, s)| v * s).collect()
    }
}

/// `[τ, sin(2^k π τ), cos(2^k π τ)]` for `k = 0..4`.
pub fn time_features(tau: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    f[0] = tau;
    for k in 0..4 {
        let a = (1u32 << k) as f64 * std::f64::consts::PI * tau;
        f[1 + 2 * k] = a.sin();
        f[2 + 2 * k] = a.cos();
    }
    f
}

/// One offset branch of a flow-matching input, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInput {
    pub state: Vec<f64>,
    /// Noisy chunk `x_τ`, `H` rows of `D_a`, row-major.
    pub x: Vec<f64>,
    pub tau: f64,
}

/// Branches sharing one (normalized) observation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupInput {
    pub obs: Vec<f64>,
    pub branches: Vec<BranchInput>,
}

/// Training example: an input branch plus its velocity target `A − x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBranch {
    pub input: BranchInput,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowGroup {
    pub obs: Vec<f64>,
    pub branches: Vec<FlowBranch>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowBatch {
    pub groups: Vec<FlowGroup>,
}

impl FlowBatch {
    pub fn num_branches(&self) -> usize {
        self.groups.iter().map(|g| g.branches.len()).sum()
    }

    /// Splits every group into single-branch groups with a copy of its
    /// observation.
    pub fn unpacked(&self) -> FlowBatch {
        let groups = self
            .groups
            .iter()
            .flat_map(|g| g.branches.iter().map(|b| FlowGroup { obs: g.obs.clone(), branches: vec![b.clone()] }))
            .collect();
        FlowBatch { groups }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Mixer { action_in: Linear, cond: Mlp, mixer: Mixer, head: Linear },
    Transformer { obs_in: Linear, state_in: Linear, action_in: Linear, time: Mlp, tf: Transformer, head: Linear },
}

#[derive(Clone, Debug)]
pub struct FlowPolicy {
    config: PolicyConfig,
    normalizer: Normalizer,
    store: ParamStore,
    net: Net,
}

impl FlowPolicy {
    pub fn new(config: PolicyConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if normalizer.obs_mean.len() != config.obs_dim
            || normalizer.state_mean.len() != config.state_dim
            || normalizer.action_std.len() != config.action_dim
        {
            return Err(Error::Config("normalizer dimensions do not match policy config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.width;
        let da = config.action_dim;
        let net = match config.backbone {
            Backbone::Mixer => {
                let cond_in = config.obs_dim + config.state_dim + TIME_FEATURES;
                let action_in = Linear::new(&mut store, "action_in", da, c, Init::Fan, &mut rng);
                let cond = Mlp::new(&mut store, "cond", cond_in, config.cond_hidden, c, &mut rng);
                let mc = MixerConfig {
                    tokens: config.horizon,
                    width: c,
                    token_hidden: config.token_hidden,
                    channel_hidden: config.channel_hidden,
                    depth: config.depth,
                };
                let mixer = Mixer::new(&mut store, "mixer", mc, &mut rng);
                let head = Linear::new(&mut store, "head", c, da, Init::Zero, &mut rng);
                Net::Mixer { action_in, cond, mixer, head }
            }
            Backbone::Transformer => {
                let obs_in = Linear::new(&mut store, "obs_in", config.obs_token_dim, c, Init::Fan, &mut rng);
                let state_in = Linear::new(&mut store, "state_in", config.state_dim, c, Init::Zero, &mut rng);
                let action_in = Linear::new(&mut store, "action_in", da, c, Init::Fan, &mut rng);
                let time = Mlp::new(&mut store, "time", TIME_FEATURES, config.cond_hidden, c, &mut rng);
                let tc = TransformerConfig {
                    width: c,
                    heads: config.heads,
                    depth: config.depth,
                    mlp_hidden: config.mlp_hidden,
                };
                let tf = Transformer::new(&mut store, "tf", tc, &mut rng)?;
                let head = Linear::new(&mut store, "head", c, da, Init::Zero, &mut rng);
                Net::Transformer { obs_in, state_in, action_in, time, tf, head }
            }
        };
        Ok(FlowPolicy { config, normalizer, store, net })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_group(&self, group: &GroupInput) -> Result<()> {
        let cfg = &self.config;
        let len = cfg.horizon * cfg.action_dim;
        if group.obs.len() != cfg.obs_dim || group.branches.is_empty() {
            return Err(Error::Config(format!(
                "group needs {} obs features and at least one branch",
                cfg.obs_dim
            )));
        }
        for b in &group.branches {
            if b.state.len() != cfg.state_dim || b.x.len() != len {
                return Err(Error::Config(format!(
                    "branch needs a state of {} and a chunk of {len} values",
                    cfg.state_dim
                )));
            }
        }
        Ok(())
    }

    /// Predicted velocities for every branch, as rows ordered by group, then
    /// branch, then chunk index. With `packed`, each group is one transformer
    /// sequence; otherwise every branch is its own sequence.
    pub fn forward(&self, g: &mut Graph, groups: &[GroupInput], packed: bool) -> Result<Var> {
        if groups.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        for grp in groups {
            self.check_group(grp)?;
        }
        let cfg = &self.config;
        let (h, da) = (cfg.horizon, cfg.action_dim);
        let branches = || groups.iter().flat_map(|grp| grp.branches.iter());
        let nb = branches().count();
        let x_rows: Vec<f64> = branches().flat_map(|b| b.x.iter().copied()).collect();
        let x = g.constant(Tensor::from_vec(nb * h, da, x_rows)?);
        match &self.net {
            Net::Mixer { action_in, cond, mixer, head } => {
                let width = cfg.obs_dim + cfg.state_dim + TIME_FEATURES;
                let mut c_rows = Vec::with_capacity(nb * width);
                for grp in groups {
                    for b in &grp.branches {
                        c_rows.extend_from_slice(&grp.obs);
                        c_rows.extend_from_slice(&b.state);
                        c_rows.extend_from_slice(&time_features(b.tau));
                    }
                }
                let c_in = g.constant(Tensor::from_vec(nb, width, c_rows)?);
                let c = cond.forward(g, &self.store, c_in)?;
                let tokens = action_in.forward(g, &self.store, x)?;
                let y = mixer.forward(g, &self.store, tokens, c)?;
                Ok(head.forward(g, &self.store, y)?)
            }
            Net::Transformer { obs_in, state_in, action_in, time, tf, head } => {
                let n = groups[0].branches.len();
                let per_seq = if packed {
                    if groups.iter().any(|grp| grp.branches.len() != n) {
                        return Err(Error::Config("packed groups must have equal branch counts".into()));
                    }
                    n
                } else {
                    1
                };
                let seqs = nb / per_seq;
                let lo = cfg.obs_tokens();
                let d = cfg.obs_token_dim;
                let mut o_rows = Vec::with_capacity(seqs * lo * d);
                for grp in groups {
                    let reps = if packed { 1 } else { grp.branches.len() };
                    for _ in 0..reps {
                        o_rows.extend_from_slice(&grp.obs);
                        o_rows.resize(o_rows.len() + lo * d - cfg.obs_dim, 0.0);
                    }
                }
                let s_rows: Vec<f64> = branches().flat_map(|b| b.state.iter().copied()).collect();
                let t_rows: Vec<f64> = branches().flat_map(|b| time_features(b.tau)).collect();
                let o = g.constant(Tensor::from_vec(seqs * lo, d, o_rows)?);
                let s = g.constant(Tensor::from_vec(nb, cfg.state_dim, s_rows)?);
                let t = g.constant(Tensor::from_vec(nb, TIME_FEATURES, t_rows)?);
                let o = obs_in.forward(g, &self.store, o)?;
                let s = state_in.forward(g, &self.store, s)?;
                let t = time.forward(g, &self.store, t)?;
                let a = action_in.forward(g, &self.store, x)?;
                let a = g.add_group(a, t, h)?;
                let all = g.concat_rows(&[o, s, a])?;

                let lb = cfg.branch_tokens();
                let seq = lo + per_seq * lb;
                let (s_off, a_off) = (seqs * lo, seqs * lo + nb);
                let mut order = Vec::with_capacity(seqs * seq);
                let mut outputs = Vec::with_capacity(nb * h);
                for q in 0..seqs {
                    let base = order.len();
                    order.extend(q * lo..(q + 1) * lo);
                    for k in 0..per_seq {
                        let br = q * per_seq + k;
                        order.push(s_off + br);
                        outputs.extend((0..h).map(|i| base + lo + k * lb + 1 + i));
                        order.extend(a_off + br * h..a_off + (br + 1) * h);
                    }
                }
                let x = g.gather_rows(all, Rc::from(order))?;
                let mask = build_block_sparse_mask(lo, &vec![lb; per_seq])?;
                let pos = assign_positions(lo, &vec![lb; per_seq])?;
                let y = tf.forward(g, &self.store, x, &mask, &pos)?;
                let y = g.gather_rows(y, Rc::from(outputs))?;
                Ok(head.forward(g, &self.store, y)?)
            }
        }
    }

    fn batch_inputs(batch: &FlowBatch) -> (Vec<GroupInput>, Vec<f64>) {
        let groups = batch
            .groups
            .iter()
            .map(|grp| GroupInput { obs: grp.obs.clone(), branches: grp.branches.iter().map(|b| b.input.clone()).collect() })
            .collect();
        let target: Vec<f64> = batch.groups.iter().flat_map(|g| g.branches.iter().flat_map(|b| b.target.iter().copied())).collect();
        (groups, target)
    }

    /// Flow-matching loss: mean squared error between predicted velocity and
    /// `A − x0` over every chunk element of the batch.
    pub fn fm_loss(&self, batch: &FlowBatch, packed: bool) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss_var(&mut g, batch, packed)?;
        let v = g.value(loss).get(0, 0);
        if !v.is_finite() {
            return Err(Error::Nn(chunklab_nn::NnError::NonFinite("flow-matching loss".into())));
        }
        Ok(v)
    }

    fn loss_var(&self, g: &mut Graph, batch: &FlowBatch, packed: bool) -> Result<Var> {
        let (groups, target) = Self::batch_inputs(batch);
        let pred = self.forward(g, &groups, packed)?;
        let da = self.config.action_dim;
        let target = Tensor::from_vec(target.len() / da, da, target)?;
        Ok(g.mse(pred, target)?)
    }

    pub fn loss_and_grads(&self, batch: &FlowBatch, packed: bool) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let loss = self.loss_var(&mut g, batch, packed)?;
        let grads = g.backward(loss, &self.store)?;
        Ok((g.value(loss).get(0, 0), grads))
    }

    /// Builds a flow-matching batch from offset samples, drawing τ uniform in
    /// `[0, 1)` and `x0` standard normal for every branch independently.
    /// `groups` lists sample indices that share one observation.
    pub fn flow_batch<R: Rng + ?Sized>(&self, samples: &[OffsetSample], groups: &[Vec<usize>], rng: &mut R) -> FlowBatch {
        let (h, da) = (self.config.horizon, self.config.action_dim);
        let groups = groups
            .iter()
            .map(|idx| {
                let obs = self.normalizer.obs(&samples[idx[0]].obs.features);
                let branches = idx
                    .iter()
                    .map(|&i| {
                        let s = &samples[i];
                        let tau: f64 = rng.random_range(0.0..1.0);
                        let x0 = Tensor::randn(h, da, 1.0, rng).into_data();
                        let a: Vec<f64> = s.target_chunk.iter().flat_map(|a| self.normalizer.action(&a.0)).collect();
                        let x = a.iter().zip(&x0).map(|(a, z)| tau * a + (1.0 - tau) * z).collect();
                        let target = a.iter().zip(&x0).map(|(a, z)| a - z).collect();
                        FlowBranch { input: BranchInput { state: self.normalizer.state(&s.state.0), x, tau }, target }
                    })
                    .collect();
                FlowGroup { obs, branches }
            })
            .collect();
        FlowBatch { groups }
    }

    fn velocity(&self, obs: &[f64], state: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = GroupInput { obs: obs.to_vec(), branches: vec![BranchInput { state: state.to_vec(), x: x.to_vec(), tau }] };
        let v = self.forward(&mut g, &[input], true)?;
        Ok(g.value(v).data().to_vec())
    }

    fn integrate<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        state: &RobotState,
        prefix: &[Action],
        rng: &mut R,
    ) -> Result<Vec<Action>> {
        let cfg = &self.config;
        let (h, da) = (cfg.horizon, cfg.action_dim);
        if prefix.len() > h {
            return Err(Error::PrefixTooLong { prefix: prefix.len(), horizon: h });
        }
        if obs.features.len() != cfg.obs_dim || state.dim() != cfg.state_dim {
            return Err(Error::Config("observation or state dimension mismatch".into()));
        }
        if prefix.iter().any(|a| a.0.len() != da) {
            return Err(Error::Config("frozen action dimension mismatch".into()));
        }
        let o = self.normalizer.obs(&obs.features);
        let s = self.normalizer.state(&state.0);
        let x0 = Tensor::randn(h, da, 1.0, rng).into_data();
        let frozen: Vec<f64> = prefix.iter().flat_map(|a| self.normalizer.action(&a.0)).collect();
        let mut x = x0.clone();
        let n = cfg.flow_steps;
        let dt = 1.0 / n as f64;
        for i in 0..n {
            let tau = i as f64 * dt;
            for (j, f) in frozen.iter().enumerate() {
                x[j] = tau * f + (1.0 - tau) * x0[j];
            }
            let v = self.velocity(&o, &s, &x, tau)?;
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi += dt * vi;
            }
        }
        let mut out: Vec<Action> =
            x.chunks(da).map(|row| Action(self.normalizer.denorm_action(row))).collect();
        out[..prefix.len()].clone_from_slice(prefix);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "policy": self.config, "normalizer": self.normalizer });
        Ok(self.store.save(path, &header)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let (store, header) = ParamStore::load(path)?;
        let parse = |key: &str| {
            header.config.get(key).cloned().ok_or_else(|| Error::Config(format!("checkpoint header lacks {key:?}")))
        };
        let config: PolicyConfig = serde_json::from_value(parse("policy")?).map_err(|e| Error::Config(e.to_string()))?;
        let normalizer: Normalizer =
            serde_json::from_value(parse("normalizer")?).map_err(|e| Error::Config(e.to_string()))?;
        let mut policy = FlowPolicy::new(config, normalizer, 0)?;
        if store.len() != policy.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                store.len(),
                policy.store.len()
            )));
        }
        for id in policy.store.ids().collect::<Vec<_>>() {
            let name = policy.store.name(id).to_string();
            let src = store.id(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            let t = store.get(src);
            if t.shape() != policy.store.get(id).shape() {
                return Err(Error::Config(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *policy.store.get_mut(id) = t.clone();
        }
        Ok(policy)
    }
}

/// Anything that can produce action chunks for the runtime.
pub trait ChunkPolicy: Sync {
    fn horizon(&self) -> usize;

    fn sample_chunk(&self, obs: &Observation, state: &RobotState, rng: &mut ChaCha8Rng) -> Result<Vec<Action>>;

    /// Samples a chunk whose first `frozen.len()` actions are `frozen`
    /// exactly, with the rest generated consistently with that prefix.
    fn sample_chunk_inpaint(
        &self,
        obs: &Observation,
        state: &RobotState,
        frozen: &[Action],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>>;
}

impl ChunkPolicy for FlowPolicy {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn sample_chunk(&self, obs: &Observation, state: &RobotState, rng: &mut ChaCha8Rng) -> Result<Vec<Action>> {
        self.integrate(obs, state, &[], rng)
    }

    /// Euler integration where, before every velocity evaluation, the prefix
    /// rows are reset onto the straight path from their noise to the frozen
    /// actions.
    fn sample_chunk_inpaint(
        &self,
        obs: &Observation,
        state: &RobotState,
        frozen: &[Action],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>> {
        self.integrate(obs, state, frozen, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Standard,
    Offset,
    Packed,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(TrainMode::Standard),
            "offset" => Ok(TrainMode::Offset),
            "packed" => Ok(TrainMode::Packed),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    /// Effective batch: branches per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Relative weights of δ = 0..=Δ_max for offset mode; uniform if absent.
    #[serde(default)]
    pub delta_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    /// Short-run settings for the toy tasks: peak rate 3e-3 with 10% warmup
    /// and cosine decay to 5e-5 over `steps`.
    pub fn toy(mode: TrainMode, steps: u64, seed: u64) -> Self {
        let optimizer = AdamWConfig {
            schedule: Schedule {
                lr_peak: 3e-3,
                lr_min: 5e-5,
                warmup_steps: (steps / 10).max(1),
                decay_steps: steps.max(2),
            },
            ..AdamWConfig::default()
        };
        TrainConfig { mode, steps, batch_size: 32, seed, optimizer, delta_weights: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// Transformer tokens processed (zero for the mixer backbone).
    pub tokens: u64,
    pub physical_batch: usize,
}

/// Draws one optimizer step's samples and their sharing structure.
pub fn draw_step<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &PolicyConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<OffsetSample>, Vec<Vec<usize>>)> {
    let h = config.horizon;
    match train.mode {
        TrainMode::Standard => {
            let s = data::sample_batch(dataset, train.batch_size, 0, h, rng)?;
            let groups = (0..s.len()).map(|i| vec![i]).collect();
            Ok((s, groups))
        }
        TrainMode::Offset => {
            let s = data::sample_batch_weighted(
                dataset,
                train.batch_size,
                config.delta_max,
                train.delta_weights.as_deref(),
                h,
                rng,
            )?;
            let groups = (0..s.len()).map(|i| vec![i]).collect();
            Ok((s, groups))
        }
        TrainMode::Packed => {
            let n = config.delta_max + 1;
            let physical = train.batch_size / n;
            let mut samples = Vec::with_capacity(physical * n);
            let mut groups = Vec::with_capacity(physical);
            for _ in 0..physical {
                let (i, t) = dataset.sample_index(rng)?;
                let traj = &dataset.trajectories[i];
                groups.push((samples.len()..samples.len() + n).collect());
                for delta in 0..n {
                    samples.push(data::make_offset_sample(traj, t, delta, h)?);
                }
            }
            Ok((samples, groups))
        }
    }
}

pub fn validate_training(config: &PolicyConfig, train: &TrainConfig) -> Result<()> {
    config.validate()?;
    if train.batch_size == 0 || train.steps == 0 {
        return Err(Error::Config("batch_size and steps must be positive".into()));
    }
    if let Some(w) = &train.delta_weights {
        if train.mode != TrainMode::Offset {
            return Err(Error::Config("delta_weights apply only to offset mode".into()));
        }
        data::validate_delta_weights(config.delta_max, w)?;
    }
    if train.mode == TrainMode::Packed {
        if config.backbone != Backbone::Transformer {
            return Err(Error::Config("packed training requires the transformer backbone".into()));
        }
        let n = config.delta_max + 1;
        if train.batch_size % n != 0 {
            return Err(Error::Config(format!(
                "packed batch_size {} must be a multiple of {n} branches",
                train.batch_size
            )));
        }
    }
    Ok(())
}

/// Trains a fresh policy on `dataset`. Initialization and sampling are
/// seeded from `train.seed`.
pub fn train(dataset: &Dataset, config: &PolicyConfig, train: &TrainConfig) -> Result<(FlowPolicy, TrainLog)> {
    validate_training(config, train)?;
    let normalizer = Normalizer::fit(dataset)?;
    let mut policy = FlowPolicy::new(config.clone(), normalizer, train.seed)?;
    let log = train_policy(&mut policy, dataset, train)?;
    Ok((policy, log))
}

pub fn train_policy(policy: &mut FlowPolicy, dataset: &Dataset, train: &TrainConfig) -> Result<TrainLog> {
    validate_training(&policy.config, train)?;
    if dataset.num_steps() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_da7a);
    let mut opt = AdamW::new(train.optimizer.clone(), &policy.store);
    let packed = train.mode == TrainMode::Packed;
    let mut log = TrainLog::default();
    for _ in 0..train.steps {
        let (samples, groups) = draw_step(dataset, &policy.config, train, &mut rng)?;
        let batch = policy.flow_batch(&samples, &groups, &mut rng);
        let (loss, grads) = policy.loss_and_grads(&batch, packed)?;
        opt.step(&mut policy.store, &grads)?;
        log.losses.push(loss);
        log.physical_batch = groups.len();
        if policy.config.backbone == Backbone::Transformer {
            let (p, s) = policy.config.token_counts(groups[0].len());
            log.tokens += (groups.len() * if packed { p } else { s }) as u64;
        }
    }
    Ok(log)
}
