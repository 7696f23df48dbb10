//! Deterministic synthetic road networks, congestion, trips and splits.
//!
//! Every trip draws from its own RNG stream keyed by `(seed, trip_id)`, so
//! the generated dataset does not depend on how simulation is scheduled
//! across threads.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path as FsPath;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roadnet::{
    self, round_sig9, shortest_path, Edge, EdgeId, Node, OdtQuery, Path, Point, RoadNetwork,
    RoadnetError, Trip,
};
use crate::seeding;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid of {rows}x{cols} exceeds the {max} node limit")]
    Size { rows: usize, cols: usize, max: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("query {0}: origin and destination resolve to the same node")]
    SameEndpoints(usize),
    #[error("query {query}: node {to} is unreachable from node {from}")]
    Unreachable { query: usize, from: usize, to: usize },
    #[error("splits file line {line}: {msg}")]
    Splits { line: usize, msg: String },
    #[error(transparent)]
    Roadnet(#[from] RoadnetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Generator settings; the `[data]` section of the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub rows: usize,
    pub cols: usize,
    /// Meters between lattice neighbors.
    pub spacing: f64,
    pub max_nodes: usize,
    pub trips: usize,
    /// Fractions for train, val, calib, test.
    pub splits: [f64; 4],
    /// Departure times are uniform over `[0, horizon)` seconds.
    pub horizon: i64,
    pub slice_len: i64,
    /// Path perturbation: each edge weight is scaled by `U[1, 1 + epsilon]`.
    pub epsilon: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Peak fractional slowdown of the most congestion-sensitive edge.
    pub congestion_max: f64,
    /// Log-normal dispersion of edge traversal times.
    pub noise_scale: f64,
    /// When set, edges whose midpoint lies in the east half of the network
    /// use this dispersion instead of `noise_scale`.
    pub noise_high: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 5,
            spacing: 400.0,
            max_nodes: 10_000,
            trips: 1000,
            splits: [0.6, 0.1, 0.15, 0.15],
            horizon: 4 * 3600,
            slice_len: 600,
            epsilon: 0.3,
            speed_min: 8.0,
            speed_max: 14.0,
            congestion_max: 0.5,
            noise_scale: 0.15,
            noise_high: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("grid must be at least 2x2, got {}x{}", self.rows, self.cols));
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be positive".into());
        }
        if self.trips == 0 {
            return bad("trip count must be positive".into());
        }
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("split fractions {:?} must be in [0,1] and sum to 1", self.splits));
        }
        if self.horizon <= 0 || self.slice_len <= 0 {
            return bad("horizon and slice_len must be positive".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative".into());
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("need 0 < speed_min <= speed_max".into());
        }
        if !(0.0..1.0).contains(&self.congestion_max) {
            return bad("congestion_max must be in [0, 1)".into());
        }
        if !(self.noise_scale >= 0.0) || self.noise_high.is_some_and(|h| !(h >= 0.0)) {
            return bad("noise scales must be non-negative".into());
        }
        Ok(())
    }

    /// Number of congestion slices covering the horizon.
    pub fn profile_slices(&self) -> usize {
        ((self.horizon + self.slice_len - 1) / self.slice_len) as usize
    }
}

/// Bidirectional lattice with seeded coordinate jitter of at most 10% of
/// `spacing` per axis.
pub fn generate_grid_network(
    rows: usize,
    cols: usize,
    spacing: f64,
    seed: u64,
    max_nodes: usize,
) -> Result<RoadNetwork> {
    if rows < 2 || cols < 2 {
        return Err(SynthError::Config(format!(
            "grid must be at least 2x2, got {rows}x{cols}"
        )));
    }
    if rows.saturating_mul(cols) > max_nodes {
        return Err(SynthError::Size { rows, cols, max: max_nodes });
    }
    let mut rng = seeding::stream(seed, &[0x6e6574]);
    let jitter = 0.1 * spacing;
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dx = rng.random_range(-jitter..=jitter);
            let dy = rng.random_range(-jitter..=jitter);
            nodes.push(Node {
                id: r * cols + c,
                pos: Point::new(
                    round_sig9(c as f64 * spacing + dx),
                    round_sig9(r as f64 * spacing + dy),
                ),
            });
        }
    }
    let mut edges = Vec::new();
    let mut link = |a: usize, b: usize| {
        let (pa, pb) = (nodes[a].pos, nodes[b].pos);
        let length = round_sig9((pa.lng - pb.lng).hypot(pa.lat - pb.lat));
        for (from, to) in [(a, b), (b, a)] {
            let id = edges.len();
            edges.push(Edge { id, from, to, length });
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let v = r * cols + c;
            if c + 1 < cols {
                link(v, v + 1);
            }
            if r + 1 < rows {
                link(v, v + cols);
            }
        }
    }
    Ok(RoadNetwork::new(nodes, edges)?)
}

/// Time-varying speeds and dispersion per `(edge, slice)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionProfile {
    pub slice_len: i64,
    pub n_slices: usize,
    /// Free-flow speed per edge, m/s.
    pub base_speed: Vec<f64>,
    /// Row-major `[edge][slice]`; scales the speed, always `> 0`.
    pub multiplier: Vec<f64>,
    /// Row-major `[edge][slice]`; log-normal sigma, `>= 0`.
    pub noise_scale: Vec<f64>,
    lengths: Vec<f64>,
}

impl CongestionProfile {
    /// Seeded profile: a single congestion wave over the horizon whose depth
    /// varies per edge.
    pub fn generate(net: &RoadNetwork, cfg: &DataConfig, seed: u64) -> Self {
        let n_slices = cfg.profile_slices().max(1);
        let mut rng = seeding::stream(seed, &[0x70726f66]);
        let bbox = net.bbox();
        let mut base_speed = Vec::with_capacity(net.edge_count());
        let mut multiplier = Vec::with_capacity(net.edge_count() * n_slices);
        let mut noise_scale = Vec::with_capacity(net.edge_count() * n_slices);
        for e in net.edges() {
            base_speed.push(rng.random_range(cfg.speed_min..=cfg.speed_max));
            let depth = rng.random_range(0.0..=cfg.congestion_max);
            let mid = {
                let a = bbox.normalize(net.nodes()[e.from].pos);
                let b = bbox.normalize(net.nodes()[e.to].pos);
                0.5 * (a.lng + b.lng)
            };
            let sigma = match cfg.noise_high {
                Some(high) if mid >= 0.5 => high,
                _ => cfg.noise_scale,
            };
            for s in 0..n_slices {
                let wave = 0.5 * (1.0 - (2.0 * PI * (s as f64 + 0.5) / n_slices as f64).cos());
                multiplier.push(1.0 - depth * wave);
                noise_scale.push(sigma);
            }
        }
        Self {
            slice_len: cfg.slice_len,
            n_slices,
            base_speed,
            multiplier,
            noise_scale,
            lengths: net.edges().iter().map(|e| e.length).collect(),
        }
    }

    /// Slice index of timestamp `t`, clamped to the horizon.
    pub fn slice_of(&self, t: i64) -> usize {
        (t.div_euclid(self.slice_len)).clamp(0, self.n_slices as i64 - 1) as usize
    }

    /// Implied traversal time `length / (base_speed * multiplier)` on entry at `t`.
    pub fn traversal_time(&self, edge: EdgeId, t: i64) -> f64 {
        let k = edge * self.n_slices + self.slice_of(t);
        self.lengths[edge] / (self.base_speed[edge] * self.multiplier[k])
    }

    pub fn dispersion(&self, edge: EdgeId, t: i64) -> f64 {
        self.noise_scale[edge * self.n_slices + self.slice_of(t)]
    }

    /// Log-normal draw with median [`Self::traversal_time`] and sigma
    /// [`Self::dispersion`], before rounding.
    pub fn sample_time<R: Rng + ?Sized>(&self, edge: EdgeId, t: i64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.traversal_time(edge, t) * (self.dispersion(edge, t) * z).exp()
    }

    /// Whole seconds actually recorded for a traversal (at least 1).
    pub fn recorded_time<R: Rng + ?Sized>(&self, edge: EdgeId, t: i64, rng: &mut R) -> i64 {
        (self.sample_time(edge, t, rng).round() as i64).max(1)
    }
}

/// Simulates one trip for `query`: a perturbed shortest-time route with
/// log-normal per-edge times accumulated from the departure time.
pub fn simulate_trip(
    net: &RoadNetwork,
    profile: &CongestionProfile,
    query: &OdtQuery,
    epsilon: f64,
    rng_seed: u64,
) -> Result<(Trip, Path)> {
    let (from, to) = net.resolve(query)?;
    if from == to {
        return Err(SynthError::SameEndpoints(query.id));
    }
    let mut rng = seeding::stream(rng_seed, &[query.id as u64]);
    let t0 = query.departure_time;
    let factors: Vec<f64> = (0..net.edge_count())
        .map(|_| 1.0 + epsilon * rng.random::<f64>())
        .collect();
    let (path, _) = shortest_path(net, from, to, |e| profile.traversal_time(e, t0) * factors[e])
        .ok_or(SynthError::Unreachable { query: query.id, from, to })?;
    let edges = net.path_edges(&path)?;
    let mut t = t0;
    let mut points = Vec::with_capacity(path.len());
    points.push((from, t));
    for (&e, &v) in edges.iter().zip(&path.nodes()[1..]) {
        t += profile.recorded_time(e, t, &mut rng);
        points.push((v, t));
    }
    Ok((Trip::new(query.id, points)?, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Calib,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Calib, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Calib => "calib",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "calib" => Ok(Split::Calib),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Network, trips (index-aligned with queries and splits).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub network: RoadNetwork,
    pub trips: Vec<Trip>,
    pub queries: Vec<OdtQuery>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.trips.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn trips_in(&self, split: Split) -> impl Iterator<Item = &Trip> {
        self.trips
            .iter()
            .zip(&self.splits)
            .filter(move |(_, &s)| s == split)
            .map(|(t, _)| t)
    }

    pub fn save(&self, dir: impl AsRef<FsPath>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        roadnet::save_network(&self.network, dir.join(NETWORK_FILE))?;
        roadnet::save_trips(&self.trips, dir.join(TRIPS_FILE))?;
        roadnet::save_queries(&self.queries, dir.join(QUERIES_FILE))?;
        let mut s = String::new();
        for (t, sp) in self.trips.iter().zip(&self.splits) {
            s.push_str(&format!("{} {sp}\n", t.id));
        }
        fs::write(dir.join(SPLITS_FILE), s)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<FsPath>) -> Result<Self> {
        let dir = dir.as_ref();
        let network = roadnet::load_network(dir.join(NETWORK_FILE))?;
        let trips = roadnet::load_trips(dir.join(TRIPS_FILE))?;
        let queries = roadnet::load_queries(dir.join(QUERIES_FILE))?;
        let text = fs::read_to_string(dir.join(SPLITS_FILE))?;
        let mut splits = Vec::with_capacity(trips.len());
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| SynthError::Splits { line: i + 1, msg };
            let (id, label) = line
                .split_once(' ')
                .ok_or_else(|| err("expected `<trip_id> <split>`".into()))?;
            let id: usize = id.parse().map_err(|_| err(format!("bad trip id `{id}`")))?;
            if trips.get(splits.len()).map(|t| t.id) != Some(id) {
                return Err(err(format!("trip id {id} out of order")));
            }
            splits.push(label.trim().parse().map_err(err)?);
        }
        if splits.len() != trips.len() || queries.len() != trips.len() {
            return Err(SynthError::Config(format!(
                "dataset files disagree: {} trips, {} queries, {} split labels",
                trips.len(),
                queries.len(),
                splits.len()
            )));
        }
        for t in &trips {
            network.validate_path(&t.path())?;
        }
        Ok(Self { network, trips, queries, splits })
    }
}

pub const NETWORK_FILE: &str = "network.txt";
pub const TRIPS_FILE: &str = "trips.txt";
pub const QUERIES_FILE: &str = "queries.txt";
pub const SPLITS_FILE: &str = "splits.txt";

/// Per-split counts: val, calib and test get `floor(frac * n)`, train the rest.
pub fn split_counts(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let val = (fractions[1] * n as f64 + 1e-9).floor() as usize;
    let calib = (fractions[2] * n as f64 + 1e-9).floor() as usize;
    let test = (fractions[3] * n as f64 + 1e-9).floor() as usize;
    [n - val - calib - test, val, calib, test]
}

/// Generates the whole dataset: network, profile, queries, trips, splits.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<(Dataset, CongestionProfile)> {
    cfg.validate()?;
    let network = generate_grid_network(cfg.rows, cfg.cols, cfg.spacing, seed, cfg.max_nodes)?;
    let profile = CongestionProfile::generate(&network, cfg, seed);

    let mut rng = seeding::stream(seed, &[0x71756572]);
    let n_nodes = network.node_count();
    let queries: Vec<OdtQuery> = (0..cfg.trips)
        .map(|id| {
            let o = rng.random_range(0..n_nodes);
            let mut d = rng.random_range(0..n_nodes - 1);
            if d >= o {
                d += 1;
            }
            OdtQuery {
                id,
                origin: network.nodes()[o].pos,
                destination: network.nodes()[d].pos,
                departure_time: rng.random_range(0..cfg.horizon),
            }
        })
        .collect();

    let trip_seed = seeding::derive_seed(seed, &[0x74726970]);
    let trips = queries
        .par_iter()
        .map(|q| simulate_trip(&network, &profile, q, cfg.epsilon, trip_seed).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;

    let counts = split_counts(cfg.trips, &cfg.splits);
    let mut order: Vec<usize> = (0..cfg.trips).collect();
    order.shuffle(&mut seeding::stream(seed, &[0x73706c74]));
    let mut splits = vec![Split::Train; cfg.trips];
    let mut k = 0;
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for &i in &order[k..k + count] {
            splits[i] = *split;
        }
        k += count;
    }
    Ok((
        Dataset {
            network,
            trips,
            queries,
            splits,
        },
        profile,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_counts() {
        let net = generate_grid_network(2, 2, 100.0, 1, 10_000).unwrap();
        assert_eq!((net.node_count(), net.edge_count()), (4, 8));
        let net = generate_grid_network(3, 3, 100.0, 1, 10_000).unwrap();
        // 3 rows x 2 horizontal + 3 cols x 2 vertical lattice links, both directions
        assert_eq!((net.node_count(), net.edge_count()), (9, (3 * 2 + 3 * 2) * 2));
    }

    #[test]
    fn grid_is_deterministic_and_jitter_bounded() {
        let a = generate_grid_network(4, 5, 100.0, 9, 10_000).unwrap();
        let b = generate_grid_network(4, 5, 100.0, 9, 10_000).unwrap();
        assert_eq!(a, b);
        for n in a.nodes() {
            let (r, c) = (n.id / 5, n.id % 5);
            assert!((n.pos.lng - c as f64 * 100.0).abs() <= 10.0 + 1e-6);
            assert!((n.pos.lat - r as f64 * 100.0).abs() <= 10.0 + 1e-6);
        }
        assert_ne!(a, generate_grid_network(4, 5, 100.0, 10, 10_000).unwrap());
    }

    #[test]
    fn oversized_grid_rejected() {
        assert!(matches!(
            generate_grid_network(200, 200, 10.0, 0, 10_000),
            Err(SynthError::Size { .. })
        ));
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(1000, &[0.6, 0.1, 0.15, 0.15]), [600, 100, 150, 150]);
    }

    #[test]
    fn bad_configs() {
        let cfg = DataConfig { splits: [0.5, 0.1, 0.1, 0.1], ..DataConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = DataConfig { congestion_max: 1.0, ..DataConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_labels_parse() {
        for s in Split::ALL {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }
}
