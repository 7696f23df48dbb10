//! Travel-time intervals from a path.
//!
//! Each edge of the path becomes a feature vector (recent travel-time
//! histogram, edge embedding, departure-slice embedding) passed through an
//! MLP and an LSTM. A sparsely gated mixture of experts transforms every
//! step, the steps are summed, and three heads give the point estimate and
//! the lower/upper offsets. Training minimises the mean interval score.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Graph, ParamId, ParamStore, Var};
use crate::nn::{Linear, Recurrent, RecurrentKind};
use crate::roadnet::{EdgeId, Path, RoadNetwork, RoadnetError};
use crate::seeding;
use crate::synthgen::{Dataset, Split};
use crate::traffic::TrafficIndex;

#[derive(Debug, Error)]
pub enum UqError {
    #[error("invalid interval-model config: {0}")]
    Config(String),
    #[error("rho must lie in (0, 1), got {0}")]
    Rho(f64),
    #[error("path has no edges")]
    EmptyPath,
    #[error("{estimates} estimates but {truths} truths")]
    Length { estimates: usize, truths: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected {expected} histograms, got {found}")]
    Histograms { expected: usize, found: usize },
    #[error("non-finite prediction ({0}); parameters are untrained or corrupt")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("histogram cache line {line}: {msg}")]
    Cache { line: usize, msg: String },
    #[error("embedding file line {line}: {msg}")]
    Embeddings { line: usize, msg: String },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Roadnet(#[from] RoadnetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UqError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    /// The `m` largest bucket values present in the window.
    Largest,
    /// The `m` most populated buckets, listed by decreasing value.
    MostFrequent,
}

/// `[uq]` section of the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqConfig {
    pub n_experts: usize,
    pub k: usize,
    pub expert_width: usize,
    pub hidden: usize,
    pub m: usize,
    pub edge_emb_dim: usize,
    pub slice_emb_dim: usize,
    pub bucket: i64,
    /// Seconds before departure covered by the histograms.
    pub window: i64,
    pub histogram_mode: HistogramMode,
    pub rho: f64,
    /// Seconds per model unit for targets and histogram values.
    pub time_scale: f64,
    /// Train on ground-truth paths instead of greedy policy paths.
    pub teacher_forced: bool,
    /// Optional text file of `edge_id v1 v2 ...` rows.
    pub edge_embeddings: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            k: 2,
            expert_width: 64,
            hidden: 64,
            m: 5,
            edge_emb_dim: 16,
            slice_emb_dim: 8,
            bucket: 5,
            window: 1800,
            histogram_mode: HistogramMode::Largest,
            rho: 0.1,
            time_scale: 100.0,
            teacher_forced: false,
            edge_embeddings: None,
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            grad_clip: 5.0,
        }
    }
}

impl UqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UqError::Config(m.into()));
        if self.k == 0 || self.k > self.n_experts {
            return bad("k must satisfy 1 <= k <= n_experts");
        }
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if self.expert_width == 0 || self.hidden == 0 || self.edge_emb_dim == 0 || self.slice_emb_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.bucket <= 0 || self.window <= 0 {
            return bad("bucket and window must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(UqError::Rho(self.rho));
        }
        if !(self.time_scale > 0.0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("time_scale, lr and batch_size must be positive");
        }
        Ok(())
    }
}

/// Up to `m` `(seconds, relative frequency)` pairs, zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentHistogram {
    pub entries: Vec<(f64, f64)>,
}

impl SegmentHistogram {
    pub fn empty(m: usize) -> Self {
        Self { entries: vec![(0.0, 0.0); m] }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|&(_, f)| f == 0.0)
    }

    /// `[d_1/scale .. d_m/scale, f_1 .. f_m]`.
    fn features(&self, time_scale: f64, out: &mut Vec<f64>) {
        out.extend(self.entries.iter().map(|&(d, _)| d / time_scale));
        out.extend(self.entries.iter().map(|&(_, f)| f));
    }
}

/// Histogram of traversal times of `edge` entered in `[departure - window, departure)`.
pub fn segment_histogram(
    index: &TrafficIndex,
    edge: EdgeId,
    departure: i64,
    window: i64,
    m: usize,
    bucket: i64,
    mode: HistogramMode,
) -> SegmentHistogram {
    let obs = index.window(edge, departure - window, departure);
    if obs.is_empty() {
        return SegmentHistogram::empty(m);
    }
    // (bucket start, count), ascending by bucket
    let mut buckets: Vec<(i64, usize)> = Vec::new();
    let mut times: Vec<i64> = obs.iter().map(|&(_, s)| s.div_euclid(bucket) * bucket).collect();
    times.sort_unstable();
    for t in times {
        match buckets.last_mut() {
            Some((b, c)) if *b == t => *c += 1,
            _ => buckets.push((t, 1)),
        }
    }
    let total = obs.len() as f64;
    let mut chosen: Vec<(i64, usize)> = match mode {
        HistogramMode::Largest => buckets.iter().rev().take(m).copied().collect(),
        HistogramMode::MostFrequent => {
            let mut by_count = buckets.clone();
            by_count.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
            by_count.truncate(m);
            by_count
        }
    };
    chosen.sort_by_key(|&(d, _)| std::cmp::Reverse(d));
    let mut entries: Vec<(f64, f64)> = chosen.iter().map(|&(d, c)| (d as f64, c as f64 / total)).collect();
    entries.resize(m, (0.0, 0.0));
    SegmentHistogram { entries }
}

/// Everything the model needs about one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFeatures {
    pub edges: Vec<EdgeId>,
    pub slice: usize,
    pub hists: Vec<SegmentHistogram>,
}

pub fn path_features(
    net: &RoadNetwork,
    index: &TrafficIndex,
    cfg: &UqConfig,
    slice_len: i64,
    n_slices: usize,
    path: &Path,
    departure: i64,
) -> Result<PathFeatures> {
    let edges = net.path_edges(path)?;
    if edges.is_empty() {
        return Err(UqError::EmptyPath);
    }
    let hists = edges
        .iter()
        .map(|&e| segment_histogram(index, e, departure, cfg.window, cfg.m, cfg.bucket, cfg.histogram_mode))
        .collect();
    let slice = departure.div_euclid(slice_len).clamp(0, n_slices as i64 - 1) as usize;
    Ok(PathFeatures { edges, slice, hists })
}

/// Writes histograms at every slice boundary as
/// `edge_id,slice_index,d_1..d_m,f_1..f_m` rows.
pub fn write_histogram_cache<W: Write>(
    index: &TrafficIndex,
    cfg: &UqConfig,
    slice_len: i64,
    n_slices: usize,
    mut w: W,
) -> Result<()> {
    for e in 0..index.edge_count() {
        for s in 0..n_slices {
            let h = segment_histogram(index, e, s as i64 * slice_len, cfg.window, cfg.m, cfg.bucket, cfg.histogram_mode);
            let mut line = format!("{e},{s}");
            for &(d, _) in &h.entries {
                write!(line, ",{d}").unwrap();
            }
            for &(_, f) in &h.entries {
                write!(line, ",{f}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_histogram_cache<R: BufRead>(r: R, m: usize) -> Result<Vec<(EdgeId, usize, SegmentHistogram)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| UqError::Cache { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 + 2 * m {
            return Err(err(format!("expected {} fields, found {}", 2 + 2 * m, fields.len())));
        }
        let edge = fields[0].parse().map_err(|e| err(format!("edge id: {e}")))?;
        let slice = fields[1].parse().map_err(|e| err(format!("slice index: {e}")))?;
        let nums = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let entries = (0..m).map(|j| (nums[j], nums[m + j])).collect();
        out.push((edge, slice, SegmentHistogram { entries }));
    }
    Ok(out)
}

/// Reads `edge_id v1 v2 ...` rows into an `n_edges x dim` table.
pub fn read_edge_embeddings<R: BufRead>(r: R, n_edges: usize, dim: usize) -> Result<Vec<f64>> {
    let mut table = vec![0.0; n_edges * dim];
    let mut seen = vec![false; n_edges];
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| UqError::Embeddings { line: i + 1, msg };
        let mut it = line.split_whitespace();
        let e: usize = it
            .next()
            .unwrap()
            .parse()
            .map_err(|e| err(format!("edge id: {e}")))?;
        if e >= n_edges {
            return Err(err(format!("edge {e} outside 0..{n_edges}")));
        }
        let v = it
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != dim {
            return Err(err(format!("expected {dim} values, found {}", v.len())));
        }
        table[e * dim..(e + 1) * dim].copy_from_slice(&v);
        seen[e] = true;
    }
    if let Some(e) = seen.iter().position(|&s| !s) {
        return Err(UqError::Embeddings { line: 0, msg: format!("no vector for edge {e}") });
    }
    Ok(table)
}

/// Point estimate and non-negative offsets, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub y_hat: f64,
    pub sigma_l: f64,
    pub sigma_u: f64,
}

impl IntervalEstimate {
    pub fn lower(&self) -> f64 {
        self.y_hat - self.sigma_l
    }

    pub fn upper(&self) -> f64 {
        self.y_hat + self.sigma_u
    }
}

/// Graph nodes of one estimate, in model units.
#[derive(Debug, Clone, Copy)]
pub struct IntervalVars {
    pub y_hat: Var,
    pub sigma_l: Var,
    pub sigma_u: Var,
}

/// Noisy top-k gate: `H = r W_g + eps * softplus(r W_noise)`, softmax over the top `k` of `H`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub w_g: ParamId,
    pub w_noise: ParamId,
    pub n_experts: usize,
    pub k: usize,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_experts: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k > n_experts {
            return Err(UqError::Config("k must satisfy 1 <= k <= n_experts".into()));
        }
        let w_g = store.init_matrix(&format!("{name}.w_g"), dim, n_experts, rng)?;
        let w_noise = store.init_constant(&format!("{name}.w_noise"), vec![dim, n_experts], 0.0)?;
        Ok(Self { w_g, w_noise, n_experts, k })
    }

    /// Gate logits for a `1 x dim` row; `noise` holds standard normal draws.
    pub fn logits(&self, g: &mut Graph, r: Var, noise: Option<&[f64]>) -> Result<Var> {
        let wg = g.param(self.w_g);
        let clean = g.matmul(r, wg)?;
        let Some(eps) = noise else {
            return Ok(clean);
        };
        let wn = g.param(self.w_noise);
        let raw = g.matmul(r, wn)?;
        let std = g.softplus(raw);
        let (rows, cols) = g.dims(std);
        let eps = g.constant(rows, cols, eps.to_vec())?;
        let scaled = g.mul(std, eps)?;
        Ok(g.add(clean, scaled)?)
    }

    /// Gate weights for a `1 x dim` row and the selected experts in ascending order.
    pub fn weights(&self, g: &mut Graph, r: Var, noise: Option<&[f64]>) -> Result<(Var, Vec<usize>)> {
        let h = self.logits(g, r, noise)?;
        let mask = top_k_mask(g.value(h), self.k);
        let w = g.softmax_masked(h, &mask)?;
        let chosen = (0..mask.len()).filter(|&i| mask[i]).collect();
        Ok((w, chosen))
    }
}

/// Marks the `k` largest entries; ties go to the lower index.
pub fn top_k_mask(h: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let mut mask = vec![false; h.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone)]
pub struct UqModel {
    pub edge_emb: ParamId,
    pub slice_emb: ParamId,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub encoder: Recurrent,
    pub gate: Gate,
    pub experts: Vec<Linear>,
    pub head_y: Linear,
    pub head_l: Linear,
    pub head_u: Linear,
    pub time_scale: f64,
    pub m: usize,
    pub n_edges: usize,
    pub n_slices: usize,
}

impl UqModel {
    pub fn new(cfg: &UqConfig, n_edges: usize, n_slices: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeding::stream(seed, &[0x7571]);
        let edge_emb = store.init_matrix("uq.edge_emb", n_edges, cfg.edge_emb_dim, &mut rng)?;
        let slice_emb = store.init_matrix("uq.slice_emb", n_slices, cfg.slice_emb_dim, &mut rng)?;
        let in_dim = 2 * cfg.m + cfg.edge_emb_dim + cfg.slice_emb_dim;
        let mlp1 = Linear::new(store, "uq.mlp1", in_dim, cfg.hidden, &mut rng)?;
        let mlp2 = Linear::new(store, "uq.mlp2", cfg.hidden, cfg.hidden, &mut rng)?;
        let encoder = Recurrent::new(store, "uq.lstm", RecurrentKind::Lstm, cfg.hidden, cfg.hidden, &mut rng)?;
        let gate = Gate::new(store, "uq.gate", cfg.hidden, cfg.n_experts, cfg.k, &mut rng)?;
        let experts = (0..cfg.n_experts)
            .map(|i| Linear::new(store, &format!("uq.expert{i}"), cfg.hidden, cfg.expert_width, &mut rng))
            .collect::<crate::grad::Result<Vec<_>>>()?;
        let head_y = Linear::new(store, "uq.head_y", cfg.expert_width, 1, &mut rng)?;
        let head_l = Linear::new(store, "uq.head_l", cfg.expert_width, 1, &mut rng)?;
        let head_u = Linear::new(store, "uq.head_u", cfg.expert_width, 1, &mut rng)?;
        Ok(Self {
            edge_emb,
            slice_emb,
            mlp1,
            mlp2,
            encoder,
            gate,
            experts,
            head_y,
            head_l,
            head_u,
            time_scale: cfg.time_scale,
            m: cfg.m,
            n_edges,
            n_slices,
        })
    }

    pub fn from_checkpoint(cfg: &UqConfig, n_edges: usize, n_slices: usize, saved: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, n_edges, n_slices, &mut store, 0)?;
        store.load_values_from(saved)?;
        Ok((model, store))
    }

    /// Per-edge mixture outputs `r''_j`. With `noise`, gate logits are perturbed
    /// by standard normal draws from it.
    pub fn encode_segments<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        f: &PathFeatures,
        mut noise: Option<&mut R>,
    ) -> Result<Vec<Var>> {
        if f.edges.is_empty() {
            return Err(UqError::EmptyPath);
        }
        if f.hists.len() != f.edges.len() {
            return Err(UqError::Histograms { expected: f.edges.len(), found: f.hists.len() });
        }
        let edge_table = g.param(self.edge_emb);
        let slice_table = g.param(self.slice_emb);
        let slice_vec = g.gather_rows(slice_table, &[f.slice])?;
        let mut state = self.encoder.zero_state(g);
        let mut out = Vec::with_capacity(f.edges.len());
        for (&e, h) in f.edges.iter().zip(&f.hists) {
            if h.entries.len() != self.m {
                return Err(UqError::Config(format!("histogram has {} pairs, model expects {}", h.entries.len(), self.m)));
            }
            let mut hv = Vec::with_capacity(2 * self.m);
            h.features(self.time_scale, &mut hv);
            let hv = g.row(hv);
            let ev = g.gather_rows(edge_table, &[e])?;
            let x = g.concat(&[hv, ev, slice_vec])?;
            let x = self.mlp1.forward(g, x)?;
            let x = g.relu(x);
            let x = self.mlp2.forward(g, x)?;
            state = self.encoder.step(g, x, state)?;
            let draws: Option<Vec<f64>> = noise
                .as_deref_mut()
                .map(|rng| (0..self.gate.n_experts).map(|_| rng.sample(StandardNormal)).collect());
            let (w, chosen) = self.gate.weights(g, state.h, draws.as_deref())?;
            let mut mixed = Vec::with_capacity(chosen.len());
            for i in chosen {
                let gi = g.select(w, 0, i)?;
                let ei = self.experts[i].forward(g, state.h)?;
                let ei = g.relu(ei);
                mixed.push(g.mul(ei, gi)?);
            }
            out.push(g.add_n(&mixed)?);
        }
        Ok(out)
    }

    /// Forward pass in model units.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, f: &PathFeatures, noise: Option<&mut R>) -> Result<IntervalVars> {
        let steps = self.encode_segments(g, f, noise)?;
        let pooled = g.add_n(&steps)?;
        let y_hat = self.head_y.forward(g, pooled)?;
        let l = self.head_l.forward(g, pooled)?;
        let u = self.head_u.forward(g, pooled)?;
        Ok(IntervalVars {
            y_hat,
            sigma_l: g.softplus(l),
            sigma_u: g.softplus(u),
        })
    }

    /// Noiseless prediction in seconds.
    pub fn predict_interval(&self, store: &ParamStore, f: &PathFeatures) -> Result<IntervalEstimate> {
        let mut g = Graph::new(store);
        let v = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, f, None)?;
        let est = IntervalEstimate {
            y_hat: g.scalar(v.y_hat) * self.time_scale,
            sigma_l: g.scalar(v.sigma_l) * self.time_scale,
            sigma_u: g.scalar(v.sigma_u) * self.time_scale,
        };
        if !(est.y_hat.is_finite() && est.sigma_l.is_finite() && est.sigma_u.is_finite()) {
            return Err(UqError::NonFinite(format!("{est:?}")));
        }
        Ok(est)
    }

    /// Sets the point-head bias and the offset-head biases from target statistics.
    fn init_heads(&self, store: &mut ParamStore, mean: f64, spread: f64) {
        store.value_mut(self.head_y.b)[0] = mean;
        let s = spread.max(1e-3);
        // inverse softplus
        let b = s + (-(-s).exp_m1()).ln();
        store.value_mut(self.head_l.b)[0] = b;
        store.value_mut(self.head_u.b)[0] = b;
    }
}

/// Mean interval score of a batch in graph form; `truths` in the same units.
pub fn mis_loss(g: &mut Graph, est: &[IntervalVars], truths: &[f64], rho: f64) -> Result<Var> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(UqError::Rho(rho));
    }
    if est.len() != truths.len() {
        return Err(UqError::Length { estimates: est.len(), truths: truths.len() });
    }
    if est.is_empty() {
        return Err(UqError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(est.len());
    for (e, &y) in est.iter().zip(truths) {
        let y = g.scalar_const(y);
        let width = g.add(e.sigma_l, e.sigma_u)?;
        let upper = g.add(e.y_hat, e.sigma_u)?;
        let lower = g.sub(e.y_hat, e.sigma_l)?;
        let over = g.sub(y, upper)?;
        let over = g.relu(over);
        let under = g.sub(lower, y)?;
        let under = g.relu(under);
        let miss = g.add(over, under)?;
        let miss = g.scale(miss, 2.0 / rho);
        let err = g.sub(y, e.y_hat)?;
        let err = g.abs(err);
        terms.push(g.add_n(&[width, miss, err])?);
    }
    let total = g.add_n(&terms)?;
    Ok(g.scale(total, 1.0 / est.len() as f64))
}

/// Plain evaluation of the mean interval score.
pub fn mis_score(est: &[IntervalEstimate], truths: &[f64], rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(UqError::Rho(rho));
    }
    if est.len() != truths.len() {
        return Err(UqError::Length { estimates: est.len(), truths: truths.len() });
    }
    if est.is_empty() {
        return Err(UqError::EmptyBatch);
    }
    let s: f64 = est
        .iter()
        .zip(truths)
        .map(|(e, &y)| {
            let (l, u) = (e.lower(), e.upper());
            (u - l) + 2.0 / rho * ((y - u).max(0.0) + (l - y).max(0.0)) + (y - e.y_hat).abs()
        })
        .sum();
    Ok(s / est.len() as f64)
}

/// One line of the interval-training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UqEpochLog {
    pub epoch: usize,
    pub train_mis: f64,
    pub val_mis: f64,
    pub val_picp: f64,
    pub val_iw: f64,
}

impl UqEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_mis,val_mis,val_picp,val_iw";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.train_mis, self.val_mis, self.val_picp, self.val_iw)
    }
}

pub struct TrainedUq {
    pub model: UqModel,
    pub store: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<UqEpochLog>,
}

/// Features for every query of the dataset, one path per query.
pub fn dataset_features(
    ds: &Dataset,
    index: &TrafficIndex,
    cfg: &UqConfig,
    slice_len: i64,
    n_slices: usize,
    paths: &[Path],
) -> Result<Vec<PathFeatures>> {
    if paths.len() != ds.queries.len() {
        return Err(UqError::Length { estimates: paths.len(), truths: ds.queries.len() });
    }
    paths
        .par_iter()
        .zip(ds.queries.par_iter())
        .map(|(p, q)| path_features(&ds.network, index, cfg, slice_len, n_slices, p, q.departure_time))
        .collect()
}

pub fn predict_all(model: &UqModel, store: &ParamStore, feats: &[PathFeatures], idx: &[usize]) -> Result<Vec<IntervalEstimate>> {
    idx.par_iter().map(|&i| model.predict_interval(store, &feats[i])).collect()
}

/// Minimises the interval score on the train split; keeps the epoch with the
/// lowest validation score. `feats` is indexed like the dataset queries.
pub fn train_uq(
    ds: &Dataset,
    feats: &[PathFeatures],
    cfg: &UqConfig,
    n_slices: usize,
    seed: u64,
) -> Result<TrainedUq> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = UqModel::new(cfg, ds.network.edge_count(), n_slices, &mut store, seed)?;
    if let Some(path) = &cfg.edge_embeddings {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let table = read_edge_embeddings(file, ds.network.edge_count(), cfg.edge_emb_dim)?;
        store.value_mut(model.edge_emb).copy_from_slice(&table);
    }
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    if train.is_empty() {
        return Err(UqError::Config("empty training split".into()));
    }
    let ys: Vec<f64> = ds.trips.iter().map(|t| t.travel_time() / cfg.time_scale).collect();
    let mean = train.iter().map(|&i| ys[i]).sum::<f64>() / train.len() as f64;
    let sd = (train.iter().map(|&i| (ys[i] - mean).powi(2)).sum::<f64>() / train.len() as f64).sqrt();
    model.init_heads(&mut store, mean, sd);

    let validate = |store: &ParamStore| -> Result<(f64, f64, f64)> {
        if val.is_empty() {
            return Ok((0.0, 0.0, 0.0));
        }
        let est = predict_all(&model, store, feats, &val)?;
        let truths: Vec<f64> = val.iter().map(|&i| ds.trips[i].travel_time()).collect();
        let mis = mis_score(&est, &truths, cfg.rho)?;
        let covered = est.iter().zip(&truths).filter(|(e, &y)| e.lower() <= y && y <= e.upper()).count();
        let picp = 100.0 * covered as f64 / est.len() as f64;
        let iw = est.iter().map(|e| e.sigma_l + e.sigma_u).sum::<f64>() / est.len() as f64;
        Ok((mis, picp, iw))
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut seeding::stream(seed, &[0x7571, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = seeding::stream(seed, &[0x6e6f, epoch as u64, i as u64]);
                    let mut g = Graph::new(&store);
                    let v = model.forward(&mut g, &feats[i], Some(&mut rng))?;
                    let loss = mis_loss(&mut g, &[v], &[ys[i]], cfg.rho)?;
                    Ok((g.scalar(loss), g.backward(loss)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (l, grads) in &results {
                loss_sum += l;
                grads.accumulate_scaled(&mut store, scale);
            }
            store.clip_grad_norm(cfg.grad_clip);
            store
                .optimizer_step(cfg.lr)
                .map_err(|e| UqError::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        if !loss_sum.is_finite() {
            return Err(UqError::Divergence(format!("non-finite loss at epoch {epoch}")));
        }
        let (val_mis, val_picp, val_iw) = validate(&store)?;
        log.push(UqEpochLog {
            epoch,
            train_mis: loss_sum / train.len() as f64 * cfg.time_scale,
            val_mis,
            val_picp,
            val_iw,
        });
        let score = if val.is_empty() { loss_sum } else { val_mis };
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, store.clone()));
        }
    }
    let (best_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store),
    };
    Ok(TrainedUq { model, store, best_epoch, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{Edge, Node, Point, Trip};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_edge_net() -> RoadNetwork {
        let nodes = (0..3).map(|i| Node { id: i, pos: Point::new(i as f64, 0.0) }).collect();
        let edges = vec![
            Edge { id: 0, from: 0, to: 1, length: 100.0 },
            Edge { id: 1, from: 1, to: 2, length: 100.0 },
        ];
        RoadNetwork::new(nodes, edges).unwrap()
    }

    fn index_with(times: &[(i64, i64)]) -> TrafficIndex {
        let net = two_edge_net();
        let trips: Vec<Trip> = times
            .iter()
            .enumerate()
            .map(|(id, &(t, s))| Trip::new(id, vec![(0, t), (1, t + s)]).unwrap())
            .collect();
        TrafficIndex::build(&net, &trips).unwrap()
    }

    #[test]
    fn histogram_examples() {
        let idx = index_with(&[(100, 30), (110, 30), (120, 32), (130, 45), (140, 45), (150, 45)]);
        let h = segment_histogram(&idx, 0, 1000, 1800, 2, 5, HistogramMode::Largest);
        assert_eq!(h.entries, vec![(45.0, 0.5), (30.0, 0.5)]);
        let h = segment_histogram(&idx, 1, 1000, 1800, 3, 5, HistogramMode::Largest);
        assert_eq!(h, SegmentHistogram::empty(3));
        let one = index_with(&[(10, 60)]);
        let h = segment_histogram(&one, 0, 20, 100, 3, 5, HistogramMode::Largest);
        assert_eq!(h.entries, vec![(60.0, 1.0), (0.0, 0.0), (0.0, 0.0)]);
    }

    #[test]
    fn most_frequent_mode_orders_by_value() {
        let idx = index_with(&[(1, 10), (2, 20), (3, 20), (4, 30), (5, 30), (6, 30)]);
        let h = segment_histogram(&idx, 0, 100, 1000, 2, 5, HistogramMode::MostFrequent);
        assert_eq!(h.entries, vec![(30.0, 0.5), (20.0, 2.0 / 6.0)]);
        let h = segment_histogram(&idx, 0, 100, 1000, 2, 5, HistogramMode::Largest);
        assert_eq!(h.entries, vec![(30.0, 0.5), (20.0, 2.0 / 6.0)]);
        let h = segment_histogram(&idx, 0, 100, 1000, 1, 10, HistogramMode::MostFrequent);
        assert_eq!(h.entries, vec![(30.0, 0.5)]);
    }

    #[test]
    fn future_traversals_are_invisible() {
        let idx = index_with(&[(500, 40), (600, 41), (1000, 30)]);
        let h = segment_histogram(&idx, 0, 500, 1800, 4, 5, HistogramMode::Largest);
        assert!(h.is_empty());
    }

    #[test]
    fn cache_round_trip() {
        let idx = index_with(&[(100, 30), (700, 45)]);
        let cfg = UqConfig { m: 3, window: 1200, ..UqConfig::default() };
        let mut buf = Vec::new();
        write_histogram_cache(&idx, &cfg, 600, 3, &mut buf).unwrap();
        let rows = read_histogram_cache(buf.as_slice(), 3).unwrap();
        assert_eq!(rows.len(), 6);
        for (e, s, h) in rows {
            let want = segment_histogram(&idx, e, s as i64 * 600, 1200, 3, 5, HistogramMode::Largest);
            assert_eq!(h, want);
        }
        assert!(matches!(read_histogram_cache("0,0,1".as_bytes(), 3), Err(UqError::Cache { line: 1, .. })));
    }

    fn est(y: f64, l: f64, u: f64) -> IntervalEstimate {
        IntervalEstimate { y_hat: y, sigma_l: y - l, sigma_u: u - y }
    }

    #[test]
    fn mis_examples() {
        let e = [est(10.0, 8.0, 12.0)];
        assert_eq!(mis_score(&e, &[10.0], 0.1).unwrap(), 4.0);
        assert_eq!(mis_score(&e, &[13.0], 0.1).unwrap(), 27.0);
        assert_eq!(mis_score(&e, &[7.0], 0.1).unwrap(), 27.0);
        assert!(matches!(mis_score(&e, &[7.0], 1.0), Err(UqError::Rho(_))));
        assert!(matches!(mis_score(&[], &[], 0.1), Err(UqError::EmptyBatch)));
    }

    #[test]
    fn graph_mis_matches_plain() {
        let mut g = Graph::detached();
        let mk = |g: &mut Graph, y: f64, l: f64, u: f64| IntervalVars {
            y_hat: g.scalar_const(y),
            sigma_l: g.scalar_const(y - l),
            sigma_u: g.scalar_const(u - y),
        };
        let a = mk(&mut g, 10.0, 8.0, 12.0);
        let b = mk(&mut g, 10.0, 8.0, 12.0);
        let loss = mis_loss(&mut g, &[a, b], &[13.0, 10.0], 0.1).unwrap();
        assert_eq!(g.scalar(loss), 15.5);
    }

    fn small_cfg() -> UqConfig {
        UqConfig { n_experts: 4, k: 2, expert_width: 6, hidden: 5, m: 3, edge_emb_dim: 3, slice_emb_dim: 2, ..UqConfig::default() }
    }

    fn feats() -> PathFeatures {
        PathFeatures {
            edges: vec![0, 1],
            slice: 1,
            hists: vec![
                SegmentHistogram { entries: vec![(45.0, 0.5), (30.0, 0.5), (0.0, 0.0)] },
                SegmentHistogram::empty(3),
            ],
        }
    }

    #[test]
    fn gate_weights_are_sparse_and_normalised() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let model = UqModel::new(&cfg, 2, 3, &mut store, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&store);
        for _ in 0..50 {
            let r = g.row((0..cfg.hidden).map(|_| rng.random_range(-2.0..2.0)).collect());
            let noise: Vec<f64> = (0..cfg.n_experts).map(|_| rng.sample(StandardNormal)).collect();
            let (w, chosen) = model.gate.weights(&mut g, r, Some(&noise)).unwrap();
            let w = g.value(w);
            assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), cfg.k);
            assert_eq!(chosen.len(), cfg.k);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma_heads_non_negative_and_sum_pooling_sensitive() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let model = UqModel::new(&cfg, 2, 3, &mut store, 4).unwrap();
        let f = feats();
        let e = model.predict_interval(&store, &f).unwrap();
        assert!(e.sigma_l >= 0.0 && e.sigma_u >= 0.0);
        let mut doubled = f.clone();
        doubled.edges.extend([0, 1]);
        doubled.hists.extend(f.hists.clone());
        let d = model.predict_interval(&store, &doubled).unwrap();
        assert_ne!(e, d);
    }

    #[test]
    fn expert_permutation_leaves_output_unchanged() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let model = UqModel::new(&cfg, 2, 3, &mut store, 9).unwrap();
        let f = feats();
        let before = model.predict_interval(&store, &f).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = store.clone();
        let n = cfg.n_experts;
        for wid in [model.gate.w_g, model.gate.w_noise] {
            let src = store.value(wid).to_vec();
            let dst = permuted.value_mut(wid);
            for row in 0..cfg.hidden {
                for (new, &old) in perm.iter().enumerate() {
                    dst[row * n + new] = src[row * n + old];
                }
            }
        }
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in [(model.experts[new].w, model.experts[old].w), (model.experts[new].b, model.experts[old].b)] {
                let v = store.value(b).to_vec();
                permuted.value_mut(a).copy_from_slice(&v);
            }
        }
        let after = model.predict_interval(&permuted, &f).unwrap();
        for (x, y) in [(before.y_hat, after.y_hat), (before.sigma_l, after.sigma_l), (before.sigma_u, after.sigma_u)] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn nan_parameters_are_reported() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let model = UqModel::new(&cfg, 2, 3, &mut store, 4).unwrap();
        store.value_mut(model.head_y.b)[0] = f64::NAN;
        assert!(matches!(model.predict_interval(&store, &feats()), Err(UqError::NonFinite(_))));
    }

    #[test]
    fn bad_k_rejected() {
        let cfg = UqConfig { k: 9, ..UqConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = UqConfig { k: 0, ..UqConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k_mask(&[1.0, 3.0, 3.0, 0.0], 2), vec![false, true, true, false]);
        assert_eq!(top_k_mask(&[2.0, 2.0, 2.0], 1), vec![true, false, false]);
    }

    #[test]
    fn embeddings_file() {
        let t = read_edge_embeddings("1 0.5 0.25\n0 1 2\n".as_bytes(), 2, 2).unwrap();
        assert_eq!(t, vec![1.0, 2.0, 0.5, 0.25]);
        assert!(read_edge_embeddings("0 1 2\n".as_bytes(), 2, 2).is_err());
        assert!(read_edge_embeddings("0 1\n1 1 1\n".as_bytes(), 2, 2).is_err());
    }
}
