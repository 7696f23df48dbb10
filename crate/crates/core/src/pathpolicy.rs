//! Path generation as a sequential decision process.
//!
//! The agent sits on a node and picks the next node among its out-neighbors.
//! Its state is a recurrent encoding of the generated prefix plus three
//! hand-built features of the current node: recent traversal times of the
//! candidate out-edges, distance to the destination and the direction to it.
//! Training mixes teacher-forced cross-entropy with a self-critical policy
//! gradient whose baseline is the reward of the model's own greedy rollout.

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, AlignError};
use crate::grad::{GradError, Gradients, Graph, ParamId, ParamStore, Var};
use crate::nn::{Linear, RecState, Recurrent, RecurrentKind};
use crate::roadnet::{hop_distance, NodeId, OdtQuery, Path, RoadNetwork, RoadnetError};
use crate::seeding;
use crate::synthgen::{Dataset, Split};
use crate::traffic::TrafficIndex;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("node {0} has no out-neighbors")]
    DeadEnd(NodeId),
    #[error("ground-truth step {from} -> {to} leaves the out-neighbor set")]
    NotNeighbor { from: NodeId, to: NodeId },
    #[error("episode has no actions")]
    EmptyEpisode,
    #[error("no sampled episodes")]
    NoSamples,
    #[error("origin and destination resolve to the same node {0}")]
    SameEndpoints(NodeId),
    #[error("node {node} cannot reach destination {dest}")]
    Unreachable { node: NodeId, dest: NodeId },
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Roadnet(#[from] RoadnetError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// `[policy]` section of the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub head_hidden: usize,
    pub encoder: RecurrentKind,
    /// MDP discount applied to per-step log-probabilities in the policy loss.
    pub gamma_discount: f64,
    /// Weight of the policy loss next to the cross-entropy loss.
    pub gamma_policy_weight: f64,
    pub omega: f64,
    pub beta: f64,
    pub samples_per_query: usize,
    /// Rollout cap: `l_max_factor * hops(origin, dest) + l_max_offset`.
    pub l_max_factor: usize,
    pub l_max_offset: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Number of out-edge traffic slots (zero-padded / truncated).
    pub fanout: usize,
    /// Seconds before departure used for the traffic feature.
    pub traffic_window: i64,
    /// Traffic feature divisor, seconds.
    pub traffic_scale: f64,
    /// Divide advantages by the per-query std of sampled rewards.
    pub standardize_rewards: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            head_hidden: 64,
            encoder: RecurrentKind::Gru,
            gamma_discount: 1.0,
            gamma_policy_weight: 0.5,
            omega: 1.0,
            beta: 1.0,
            samples_per_query: 4,
            l_max_factor: 2,
            l_max_offset: 10,
            warmup_epochs: 3,
            epochs: 15,
            batch_size: 16,
            lr: 5e-3,
            grad_clip: 5.0,
            fanout: 8,
            traffic_window: 600,
            traffic_scale: 100.0,
            standardize_rewards: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PolicyError::Config(m.into()));
        if self.d_model == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma_discount) {
            return bad("gamma_discount must lie in [0, 1]");
        }
        if self.gamma_policy_weight < 0.0 || self.omega < 0.0 || self.beta < 0.0 {
            return bad("loss and reward weights must be non-negative");
        }
        if self.samples_per_query == 0 || self.batch_size == 0 {
            return bad("samples_per_query and batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.traffic_scale > 0.0) || self.traffic_window <= 0 {
            return bad("lr, traffic_scale and traffic_window must be positive");
        }
        Ok(())
    }

    fn head_inputs(&self) -> usize {
        self.d_model + self.fanout + 3
    }
}

/// Embedding table, prefix encoder and two-layer prediction head.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    emb: ParamId,
    encoder: Recurrent,
    head1: Linear,
    head2: Linear,
    n_nodes: usize,
}

impl PolicyNet {
    /// Registers freshly initialised parameters in `store`.
    pub fn new(cfg: &PolicyConfig, n_nodes: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeding::stream(seed, &[0x706f6c]);
        let emb = store.init_matrix("policy.emb", n_nodes, cfg.d_model, &mut rng)?;
        let encoder = Recurrent::new(store, "policy.enc", cfg.encoder, cfg.d_model, cfg.d_model, &mut rng)?;
        let head1 = Linear::new(store, "policy.head1", cfg.head_inputs(), cfg.head_hidden, &mut rng)?;
        let head2 = Linear::new(store, "policy.head2", cfg.head_hidden, n_nodes, &mut rng)?;
        Ok(Self { emb, encoder, head1, head2, n_nodes })
    }

    /// Rebuilds the model around checkpointed values.
    pub fn from_checkpoint(cfg: &PolicyConfig, n_nodes: usize, saved: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, n_nodes, &mut store, 0)?;
        store.load_values_from(saved)?;
        Ok((model, store))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    fn feed(&self, g: &mut Graph, s: RecState, node: NodeId) -> Result<RecState> {
        let table = g.param(self.emb);
        let x = g.gather_rows(table, &[node])?;
        Ok(self.encoder.step(g, x, s)?)
    }

    fn logits(&self, g: &mut Graph, h: Var, f: &StepFeatures) -> Result<Var> {
        let mut extra = f.traffic.clone();
        extra.push(f.dist);
        extra.push(f.dir.0);
        extra.push(f.dir.1);
        let extra = g.row(extra);
        let x = g.concat(&[h, extra])?;
        let a = self.head1.forward(g, x)?;
        let a = g.tanh(a);
        Ok(self.head2.forward(g, a)?)
    }
}

/// Read-only environment shared by every rollout.
#[derive(Clone, Copy)]
pub struct PolicyContext<'a> {
    pub net: &'a RoadNetwork,
    pub traffic: &'a TrafficIndex,
    pub cfg: &'a PolicyConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepFeatures {
    pub traffic: Vec<f64>,
    pub dist: f64,
    /// `(sin, cos)` of the angle from the +lng axis towards the destination.
    pub dir: (f64, f64),
}

/// Traffic, distance and direction features at `current`.
pub fn step_features(ctx: &PolicyContext, current: NodeId, dest: NodeId, departure: i64) -> Result<StepFeatures> {
    let cfg = ctx.cfg;
    let mut traffic = vec![0.0; cfg.fanout];
    for (slot, &(_, e)) in traffic.iter_mut().zip(ctx.net.out_edges(current)?) {
        if let Some(m) = ctx.traffic.mean_time(e, departure - cfg.traffic_window, departure) {
            *slot = m / cfg.traffic_scale;
        }
    }
    let a = ctx.net.normalized(current)?;
    let b = ctx.net.normalized(dest)?;
    let (dx, dy) = (b.lng - a.lng, b.lat - a.lat);
    let dist = dx.hypot(dy);
    let dir = if dist > 0.0 {
        let theta = dy.atan2(dx);
        (theta.sin(), theta.cos())
    } else {
        (0.0, 1.0)
    };
    Ok(StepFeatures { traffic, dist, dir })
}

/// Agent state after a prefix has been generated.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub prefix: Path,
    pub h: Vec<f64>,
    pub features: StepFeatures,
}

impl PolicyState {
    pub fn current(&self) -> NodeId {
        self.prefix.last().expect("state prefix is non-empty")
    }

    pub fn dist_to_dest(&self) -> f64 {
        self.features.dist
    }

    pub fn dir_to_dest(&self) -> (f64, f64) {
        self.features.dir
    }
}

pub fn encode_state(
    ctx: &PolicyContext,
    model: &PolicyNet,
    store: &ParamStore,
    dest: NodeId,
    departure: i64,
    prefix: &Path,
) -> Result<PolicyState> {
    let Some(current) = prefix.last() else {
        return Err(PolicyError::EmptyEpisode);
    };
    let mut g = Graph::new(store);
    let mut s = model.encoder.zero_state(&mut g);
    for &v in prefix.nodes() {
        if v >= model.n_nodes {
            return Err(GradError::Index { what: "node embeddings", index: v, size: model.n_nodes }.into());
        }
        s = model.feed(&mut g, s, v)?;
    }
    Ok(PolicyState {
        prefix: prefix.clone(),
        h: g.value(s.h).to_vec(),
        features: step_features(ctx, current, dest, departure)?,
    })
}

fn neighbor_mask(net: &RoadNetwork, n_nodes: usize, v: NodeId) -> Result<(Vec<NodeId>, Vec<bool>)> {
    let nbrs = net.out_neighbors(v)?;
    if nbrs.is_empty() {
        return Err(PolicyError::DeadEnd(v));
    }
    let mut mask = vec![false; n_nodes];
    for &w in &nbrs {
        mask[w] = true;
    }
    Ok((nbrs, mask))
}

/// Probabilities over the out-neighbors of the state's current node,
/// in ascending node order.
pub fn action_distribution(
    ctx: &PolicyContext,
    model: &PolicyNet,
    store: &ParamStore,
    state: &PolicyState,
) -> Result<Vec<(NodeId, f64)>> {
    let (nbrs, mask) = neighbor_mask(ctx.net, model.n_nodes, state.current())?;
    let mut g = Graph::new(store);
    let h = g.row(state.h.clone());
    let logits = model.logits(&mut g, h, &state.features)?;
    let p = g.softmax_masked(logits, &mask)?;
    let probs = g.value(p);
    Ok(nbrs.into_iter().map(|w| (w, probs[w])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// A rollout kept on a graph so its log-probabilities stay differentiable.
pub struct Rollout {
    pub path: Path,
    pub log_probs: Vec<Var>,
    pub reached: bool,
}

pub fn l_max(cfg: &PolicyConfig, net: &RoadNetwork, origin: NodeId, dest: NodeId) -> Result<usize> {
    let hops = hop_distance(net, origin, dest).ok_or(PolicyError::Unreachable { node: origin, dest })?;
    Ok(cfg.l_max_factor * hops + cfg.l_max_offset)
}

/// Autoregressive decoding from `origin` until `dest`, a dead end, or `l_max` actions.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    g: &mut Graph,
    ctx: &PolicyContext,
    model: &PolicyNet,
    origin: NodeId,
    dest: NodeId,
    departure: i64,
    l_max: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Rollout> {
    let mut path = Path::new(vec![origin]);
    let mut log_probs = Vec::new();
    let mut s = model.encoder.zero_state(g);
    s = model.feed(g, s, origin)?;
    let mut current = origin;
    while current != dest && log_probs.len() < l_max {
        let (nbrs, mask) = match neighbor_mask(ctx.net, model.n_nodes, current) {
            Ok(x) => x,
            Err(PolicyError::DeadEnd(_)) => break,
            Err(e) => return Err(e),
        };
        let f = step_features(ctx, current, dest, departure)?;
        let logits = model.logits(g, s.h, &f)?;
        let lp = g.log_softmax_masked(logits, &mask)?;
        let lpv = g.value(lp);
        let next = match mode {
            DecodeMode::Greedy => {
                let mut best = nbrs[0];
                for &w in &nbrs[1..] {
                    if lpv[w] > lpv[best] {
                        best = w;
                    }
                }
                best
            }
            DecodeMode::Sample => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = *nbrs.last().unwrap();
                for &w in &nbrs {
                    acc += lpv[w].exp();
                    if u < acc {
                        pick = w;
                        break;
                    }
                }
                pick
            }
        };
        log_probs.push(g.select(lp, 0, next)?);
        path.push(next);
        s = model.feed(g, s, next)?;
        current = next;
    }
    Ok(Rollout {
        reached: current == dest,
        path,
        log_probs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub actions: Vec<NodeId>,
    pub log_probs: Vec<f64>,
    pub path: Path,
    pub terminal_reward: f64,
    pub reached: bool,
    pub truth: Path,
}

/// Decodes a path for `query` and scores it against `truth`.
pub fn sample_path(
    ctx: &PolicyContext,
    model: &PolicyNet,
    store: &ParamStore,
    query: &OdtQuery,
    truth: &Path,
    mode: DecodeMode,
    seed: u64,
) -> Result<Episode> {
    let (origin, dest) = ctx.net.resolve(query)?;
    if origin == dest {
        return Err(PolicyError::SameEndpoints(origin));
    }
    let cap = l_max(ctx.cfg, ctx.net, origin, dest)?;
    let mut rng = seeding::stream(seed, &[query.id as u64]);
    let mut g = Graph::new(store);
    let r = rollout(&mut g, ctx, model, origin, dest, query.departure_time, cap, mode, &mut rng)?;
    let reward = align::reward(&r.path, truth, ctx.net, ctx.cfg.omega, ctx.cfg.beta)?;
    Ok(Episode {
        actions: r.path.nodes()[1..].to_vec(),
        log_probs: r.log_probs.iter().map(|&v| g.scalar(v)).collect(),
        path: r.path,
        terminal_reward: reward,
        reached: r.reached,
        truth: truth.clone(),
    })
}

/// Greedy path for a query, with no ground truth needed.
pub fn predict_path(ctx: &PolicyContext, model: &PolicyNet, store: &ParamStore, query: &OdtQuery) -> Result<(Path, bool)> {
    let (origin, dest) = ctx.net.resolve(query)?;
    if origin == dest {
        return Err(PolicyError::SameEndpoints(origin));
    }
    let cap = l_max(ctx.cfg, ctx.net, origin, dest)?;
    let mut g = Graph::new(store);
    let mut rng = seeding::stream(0, &[]);
    let r = rollout(&mut g, ctx, model, origin, dest, query.departure_time, cap, DecodeMode::Greedy, &mut rng)?;
    Ok((r.path, r.reached))
}

/// One sampled sequence: per-step log-probability nodes plus its reward.
pub struct ScoredSample {
    pub log_probs: Vec<Var>,
    pub reward: f64,
}

/// Self-critical policy loss
/// `-(1/N) sum_i (sum_t gamma^(t-1) log pi(a_it)) * (r_i - r_greedy)`.
/// Rewards are constants, so gradients flow only through the log-probabilities.
pub fn scst_loss(
    g: &mut Graph,
    samples: &[ScoredSample],
    baseline: f64,
    gamma_discount: f64,
    standardize: bool,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(PolicyError::NoSamples);
    }
    let scale = if standardize && samples.len() > 1 {
        let mean = samples.iter().map(|s| s.reward).sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s.reward - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        if var.sqrt() > 1e-8 { 1.0 / var.sqrt() } else { 1.0 }
    } else {
        1.0
    };
    let n = samples.len() as f64;
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        if s.log_probs.is_empty() {
            return Err(PolicyError::EmptyEpisode);
        }
        let mut weighted = Vec::with_capacity(s.log_probs.len());
        let mut w = 1.0;
        for &lp in &s.log_probs {
            weighted.push(if w == 1.0 { lp } else { g.scale(lp, w) });
            w *= gamma_discount;
        }
        let seq = g.add_n(&weighted)?;
        let adv = (s.reward - baseline) * scale;
        terms.push(g.scale(seq, -adv / n));
    }
    Ok(g.add_n(&terms)?)
}

/// Teacher-forced negative log-likelihood of `truth`, averaged over steps.
pub fn ce_loss(
    g: &mut Graph,
    ctx: &PolicyContext,
    model: &PolicyNet,
    truth: &Path,
    departure: i64,
) -> Result<Var> {
    ctx.net.validate_path(truth)?;
    let nodes = truth.nodes();
    let dest = *nodes.last().unwrap();
    let mut s = model.encoder.zero_state(g);
    let mut terms = Vec::with_capacity(nodes.len() - 1);
    for w in nodes.windows(2) {
        let (cur, next) = (w[0], w[1]);
        s = model.feed(g, s, cur)?;
        let (_, mask) = neighbor_mask(ctx.net, model.n_nodes, cur)?;
        if !mask[next] {
            return Err(PolicyError::NotNeighbor { from: cur, to: next });
        }
        let f = step_features(ctx, cur, dest, departure)?;
        let logits = model.logits(g, s.h, &f)?;
        let lp = g.log_softmax_masked(logits, &mask)?;
        terms.push(g.select(lp, 0, next)?);
    }
    let total = g.add_n(&terms)?;
    Ok(g.scale(total, -1.0 / terms.len() as f64))
}

/// Greedy-decoding quality over a set of trips.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PathQuality {
    pub mean_reward: f64,
    pub mean_lcs: f64,
    pub mean_lcs_norm: f64,
    pub mean_dtw: f64,
    pub reached_frac: f64,
}

pub fn evaluate_greedy(
    ctx: &PolicyContext,
    model: &PolicyNet,
    store: &ParamStore,
    ds: &Dataset,
    indices: &[usize],
) -> Result<(PathQuality, Vec<Path>)> {
    let results = indices
        .par_iter()
        .map(|&i| {
            let truth = ds.trips[i].path();
            let (path, reached) = predict_path(ctx, model, store, &ds.queries[i])?;
            let s = align::scores(&path, &truth, ctx.net)?;
            Ok((path, reached, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len().max(1) as f64;
    let mut q = PathQuality::default();
    for (_, reached, s) in &results {
        q.mean_reward += align::reward_from(s, ctx.cfg.omega, ctx.cfg.beta) / n;
        q.mean_lcs += s.lcs_len as f64 / n;
        q.mean_lcs_norm += s.lcs_norm / n;
        q.mean_dtw += s.dtw_norm / n;
        q.reached_frac += if *reached { 1.0 / n } else { 0.0 };
    }
    Ok((q, results.into_iter().map(|(p, _, _)| p).collect()))
}

/// One line of the path-training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub ce_loss: f64,
    pub policy_loss: f64,
    pub val_mean_reward: f64,
    pub val_lcs: f64,
    pub val_dtw: f64,
}

impl PolicyEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,ce_loss,policy_loss,val_mean_reward,val_lcs,val_dtw";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.ce_loss, self.policy_loss, self.val_mean_reward, self.val_lcs, self.val_dtw
        )
    }
}

pub struct TrainedPolicy {
    pub model: PolicyNet,
    /// Parameters from the epoch with the best validation reward.
    pub store: ParamStore,
    pub best_epoch: usize,
    /// Epoch 0 is the untrained model; its losses are reported as 0.
    pub log: Vec<PolicyEpochLog>,
}

struct QueryGrad {
    grads: Gradients,
    ce: f64,
    policy: f64,
}

#[allow(clippy::too_many_arguments)]
fn query_gradient(
    ctx: &PolicyContext,
    model: &PolicyNet,
    store: &ParamStore,
    ds: &Dataset,
    i: usize,
    joint: bool,
    seed: u64,
    epoch: usize,
) -> Result<QueryGrad> {
    let cfg = ctx.cfg;
    let trip = &ds.trips[i];
    let truth = trip.path();
    let dep = trip.departure();
    let mut g = Graph::new(store);
    let ce = ce_loss(&mut g, ctx, model, &truth, dep)?;
    let ce_val = g.scalar(ce);
    let (loss, policy_val) = if joint {
        let origin = truth.first().unwrap();
        let dest = truth.last().unwrap();
        let cap = l_max(cfg, ctx.net, origin, dest)?;
        let mut rng = seeding::stream(seed, &[0x7363, epoch as u64, i as u64]);
        let baseline = {
            let mut gb = Graph::new(store);
            let r = rollout(&mut gb, ctx, model, origin, dest, dep, cap, DecodeMode::Greedy, &mut rng)?;
            align::reward(&r.path, &truth, ctx.net, cfg.omega, cfg.beta)?
        };
        let mut samples = Vec::with_capacity(cfg.samples_per_query);
        for _ in 0..cfg.samples_per_query {
            let r = rollout(&mut g, ctx, model, origin, dest, dep, cap, DecodeMode::Sample, &mut rng)?;
            let reward = align::reward(&r.path, &truth, ctx.net, cfg.omega, cfg.beta)?;
            samples.push(ScoredSample { log_probs: r.log_probs, reward });
        }
        let pl = scst_loss(&mut g, &samples, baseline, cfg.gamma_discount, cfg.standardize_rewards)?;
        let pv = g.scalar(pl);
        let weighted = g.scale(pl, cfg.gamma_policy_weight);
        (g.add(weighted, ce)?, pv)
    } else {
        (ce, 0.0)
    };
    let grads = g.backward(loss)?;
    Ok(QueryGrad { grads, ce: ce_val, policy: policy_val })
}

/// Trains the path policy on the train split; selects by validation reward.
pub fn train_policy(ds: &Dataset, traffic: &TrafficIndex, cfg: &PolicyConfig, seed: u64) -> Result<TrainedPolicy> {
    cfg.validate()?;
    let ctx = PolicyContext { net: &ds.network, traffic, cfg };
    let mut store = ParamStore::new();
    let model = PolicyNet::new(cfg, ds.network.node_count(), &mut store, seed)?;
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    if train.is_empty() {
        return Err(PolicyError::Config("empty training split".into()));
    }

    let validate = |store: &ParamStore| -> Result<PathQuality> {
        if val.is_empty() {
            return Ok(PathQuality::default());
        }
        Ok(evaluate_greedy(&ctx, &model, store, ds, &val)?.0)
    };

    let q0 = validate(&store)?;
    let mut log = vec![PolicyEpochLog {
        epoch: 0,
        ce_loss: 0.0,
        policy_loss: 0.0,
        val_mean_reward: q0.mean_reward,
        val_lcs: q0.mean_lcs,
        val_dtw: q0.mean_dtw,
    }];
    let mut best = (q0.mean_reward, 0, store.clone());

    for epoch in 1..=cfg.epochs {
        let joint = epoch > cfg.warmup_epochs && cfg.gamma_policy_weight > 0.0;
        let mut order = train.clone();
        order.shuffle(&mut seeding::stream(seed, &[0x6570, epoch as u64]));
        let (mut ce_sum, mut pol_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| query_gradient(&ctx, &model, &store, ds, i, joint, seed, epoch))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            for r in &results {
                r.grads.accumulate_scaled(&mut store, scale);
                ce_sum += r.ce;
                pol_sum += r.policy;
            }
            store.clip_grad_norm(cfg.grad_clip);
            store
                .optimizer_step(cfg.lr)
                .map_err(|e| PolicyError::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        let n = train.len() as f64;
        if !(ce_sum.is_finite() && pol_sum.is_finite()) {
            return Err(PolicyError::Divergence(format!("non-finite loss at epoch {epoch}")));
        }
        let q = validate(&store)?;
        log.push(PolicyEpochLog {
            epoch,
            ce_loss: ce_sum / n,
            policy_loss: pol_sum / n,
            val_mean_reward: q.mean_reward,
            val_lcs: q.mean_lcs,
            val_dtw: q.mean_dtw,
        });
        if q.mean_reward > best.0 {
            best = (q.mean_reward, epoch, store.clone());
        }
    }
    Ok(TrainedPolicy {
        model,
        store: best.2,
        best_epoch: best.1,
        log,
    })
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{Edge, Node, Point};

    fn chain(n: usize) -> RoadNetwork {
        let nodes = (0..n).map(|i| Node { id: i, pos: Point::new(i as f64, 0.0) }).collect();
        let edges = (0..n - 1).map(|i| Edge { id: i, from: i, to: i + 1, length: 1.0 }).collect();
        RoadNetwork::new(nodes, edges).unwrap()
    }

    fn star() -> RoadNetwork {
        // center 0 with four spokes, each spoke linked back to the center
        let pos = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        let nodes = pos.iter().enumerate().map(|(i, &(x, y))| Node { id: i, pos: Point::new(x, y) }).collect();
        let mut edges = Vec::new();
        for k in 1..5 {
            edges.push(Edge { id: edges.len(), from: 0, to: k, length: 1.0 });
            edges.push(Edge { id: edges.len(), from: k, to: 0, length: 1.0 });
        }
        RoadNetwork::new(nodes, edges).unwrap()
    }

    fn zero_head(store: &mut ParamStore) {
        for name in ["policy.head2.w", "policy.head2.b"] {
            let id = store.id(name).unwrap();
            store.value_mut(id).iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn direction_and_distance_features() {
        let net = star();
        let traffic = TrafficIndex::default();
        let cfg = PolicyConfig::default();
        let ctx = PolicyContext { net: &net, traffic: &traffic, cfg: &cfg };
        let f = step_features(&ctx, 0, 1, 0).unwrap();
        assert!(f.dir.0.abs() < 1e-12 && (f.dir.1 - 1.0).abs() < 1e-12);
        let f = step_features(&ctx, 3, 3, 0).unwrap();
        assert_eq!(f.dist, 0.0);
        assert!((f.dir.0.powi(2) + f.dir.1.powi(2) - 1.0).abs() < 1e-9);
        assert_eq!(f.traffic, vec![0.0; cfg.fanout]);
    }

    #[test]
    fn single_neighbor_gets_all_mass() {
        let net = chain(3);
        let traffic = TrafficIndex::default();
        let cfg = PolicyConfig::default();
        let ctx = PolicyContext { net: &net, traffic: &traffic, cfg: &cfg };
        let mut store = ParamStore::new();
        let model = PolicyNet::new(&cfg, 3, &mut store, 1).unwrap();
        let st = encode_state(&ctx, &model, &store, 2, 0, &Path::new(vec![0])).unwrap();
        let d = action_distribution(&ctx, &model, &store, &st).unwrap();
        assert_eq!(d, vec![(1, 1.0)]);
        let st = encode_state(&ctx, &model, &store, 2, 0, &Path::new(vec![0, 1, 2])).unwrap();
        assert!(matches!(
            action_distribution(&ctx, &model, &store, &st),
            Err(PolicyError::DeadEnd(2))
        ));
    }

    #[test]
    fn prefix_of_one_is_one_recurrent_step() {
        let net = chain(3);
        let traffic = TrafficIndex::default();
        let cfg = PolicyConfig::default();
        let ctx = PolicyContext { net: &net, traffic: &traffic, cfg: &cfg };
        let mut store = ParamStore::new();
        let model = PolicyNet::new(&cfg, 3, &mut store, 1).unwrap();
        let st = encode_state(&ctx, &model, &store, 2, 0, &Path::new(vec![1])).unwrap();
        let mut g = Graph::new(&store);
        let s0 = model.encoder.zero_state(&mut g);
        let table = g.param(model.emb);
        let x = g.gather_rows(table, &[1]).unwrap();
        let s1 = model.encoder.step(&mut g, x, s0).unwrap();
        assert_eq!(g.value(s1.h), st.h.as_slice());
    }

    #[test]
    fn uniform_policy_ce_at_four_way_node() {
        let net = star();
        let traffic = TrafficIndex::default();
        let cfg = PolicyConfig::default();
        let ctx = PolicyContext { net: &net, traffic: &traffic, cfg: &cfg };
        let mut store = ParamStore::new();
        let model = PolicyNet::new(&cfg, 5, &mut store, 2).unwrap();
        zero_head(&mut store);
        let mut g = Graph::new(&store);
        let l = ce_loss(&mut g, &ctx, &model, &Path::new(vec![0, 2]), 0).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
        assert!((g.scalar(l) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn forced_chain_has_zero_ce() {
        let net = chain(5);
        let traffic = TrafficIndex::default();
        let cfg = PolicyConfig::default();
        let ctx = PolicyContext { net: &net, traffic: &traffic, cfg: &cfg };
        let mut store = ParamStore::new();
        let model = PolicyNet::new(&cfg, 5, &mut store, 3).unwrap();
        let mut g = Graph::new(&store);
        let l = ce_loss(&mut g, &ctx, &model, &Path::new(vec![0, 1, 2, 3, 4]), 0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn two_node_network_episode() {
        let net = chain(2);
        let traffic = TrafficIndex::default();
        let cfg = PolicyConfig::default();
        let ctx = PolicyContext { net: &net, traffic: &traffic, cfg: &cfg };
        let mut store = ParamStore::new();
        let model = PolicyNet::new(&cfg, 2, &mut store, 3).unwrap();
        let q = OdtQuery {
            id: 0,
            origin: Point::new(0.0, 0.0),
            destination: Point::new(1.0, 0.0),
            departure_time: 0,
        };
        let truth = Path::new(vec![0, 1]);
        let ep = sample_path(&ctx, &model, &store, &q, &truth, DecodeMode::Greedy, 0).unwrap();
        assert_eq!(ep.actions, vec![1]);
        assert!(ep.reached);
        assert_eq!(ep.terminal_reward, 1.0);
        let again = sample_path(&ctx, &model, &store, &q, &truth, DecodeMode::Greedy, 99).unwrap();
        assert_eq!(ep, again);
    }

    #[test]
    fn equal_rewards_give_zero_scst_loss_and_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("logits", vec![1, 3], vec![0.2, -0.4, 1.0]).unwrap();
        let mut g = Graph::new(&store);
        let lv = g.param(w);
        let lp = g.log_softmax_masked(lv, &[true, true, true]).unwrap();
        let a = g.select(lp, 0, 0).unwrap();
        let b = g.select(lp, 0, 2).unwrap();
        let samples = vec![
            ScoredSample { log_probs: vec![a], reward: 0.7 },
            ScoredSample { log_probs: vec![b, a], reward: 0.7 },
        ];
        let loss = scst_loss(&mut g, &samples, 0.7, 1.0, false).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(w).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scst_contract_errors() {
        let mut g = Graph::detached();
        assert!(matches!(scst_loss(&mut g, &[], 0.0, 1.0, false), Err(PolicyError::NoSamples)));
        let empty = [ScoredSample { log_probs: vec![], reward: 1.0 }];
        assert!(matches!(scst_loss(&mut g, &empty, 0.0, 1.0, false), Err(PolicyError::EmptyEpisode)));
    }

    #[test]
    fn smoothing_window() {
        let s = smoothed(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 5);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[4], 3.0);
        assert_eq!(s[5], 4.0);
    }
}
