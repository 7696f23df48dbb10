//! Road network graph, path/trip/query data model, and their text formats.

mod io;
mod search;

pub use io::{
    fmt_sig9, load_network, load_queries, load_trips, parse_network, parse_queries, parse_trips,
    round_sig9, save_network, save_queries, save_trips, write_network, write_queries, write_trips,
};
pub use search::{hop_distance, shortest_path};

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Error)]
pub enum RoadnetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("node {node} out of range (network has {size} nodes)")]
    NodeIndex { node: NodeId, size: usize },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("point ({lng}, {lat}) lies outside the network bounding box")]
    OutsideNetwork { lng: f64, lat: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RoadnetError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub lng: f64,
    pub lat: f64,
}

impl Point {
    pub fn new(lng: f64, lat: f64) -> Self {
        Self { lng, lat }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub pos: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    /// Meters.
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn contains(&self, p: Point) -> bool {
        p.lng >= self.min.lng && p.lng <= self.max.lng && p.lat >= self.min.lat && p.lat <= self.max.lat
    }

    /// Affine map of the box onto `[0,1]^2`; a degenerate axis maps to 0.
    pub fn normalize(&self, p: Point) -> Point {
        let span = |lo: f64, hi: f64, x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
        Point {
            lng: span(self.min.lng, self.max.lng, p.lng),
            lat: span(self.min.lat, self.max.lat, p.lat),
        }
    }
}

/// Euclidean distance between two points in the same (normalized) frame.
pub fn planar_distance(a: Point, b: Point) -> f64 {
    (a.lng - b.lng).hypot(a.lat - b.lat)
}

/// Directed road graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    /// `(target, edge)` per node, sorted by target.
    out: Vec<Vec<(NodeId, EdgeId)>>,
    by_endpoints: HashMap<(NodeId, NodeId), EdgeId>,
    bbox: BoundingBox,
    normalized: Vec<Point>,
}

impl RoadNetwork {
    /// Validates and indexes a node/edge list. Node ids must be dense
    /// `0..n` in order, and edge ids dense `0..m` in order.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(RoadnetError::Validation("network has no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(RoadnetError::Validation(format!(
                    "node ids must be dense: expected {i}, found {}",
                    n.id
                )));
            }
            if !n.pos.lng.is_finite() || !n.pos.lat.is_finite() {
                return Err(RoadnetError::Validation(format!("node {i} has non-finite coordinates")));
            }
        }
        let mut out = vec![Vec::new(); nodes.len()];
        let mut by_endpoints = HashMap::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            if e.id != i {
                return Err(RoadnetError::Validation(format!(
                    "edge ids must be dense: expected {i}, found {}",
                    e.id
                )));
            }
            for end in [e.from, e.to] {
                if end >= nodes.len() {
                    return Err(RoadnetError::Validation(format!(
                        "edge {i} references unknown node {end}"
                    )));
                }
            }
            if e.from == e.to {
                return Err(RoadnetError::Validation(format!("edge {i} is a self-loop")));
            }
            if !(e.length > 0.0) || !e.length.is_finite() {
                return Err(RoadnetError::Validation(format!(
                    "edge {i} has non-positive length {}",
                    e.length
                )));
            }
            if by_endpoints.insert((e.from, e.to), i).is_some() {
                return Err(RoadnetError::Validation(format!(
                    "duplicate edge {} -> {}",
                    e.from, e.to
                )));
            }
            out[e.from].push((e.to, i));
        }
        for adj in &mut out {
            adj.sort_unstable();
        }
        let mut min = nodes[0].pos;
        let mut max = nodes[0].pos;
        for n in &nodes {
            min.lng = min.lng.min(n.pos.lng);
            min.lat = min.lat.min(n.pos.lat);
            max.lng = max.lng.max(n.pos.lng);
            max.lat = max.lat.max(n.pos.lat);
        }
        let bbox = BoundingBox { min, max };
        let normalized = nodes.iter().map(|n| bbox.normalize(n.pos)).collect();
        Ok(Self {
            nodes,
            edges,
            out,
            by_endpoints,
            bbox,
            normalized,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id]
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if v < self.nodes.len() {
            Ok(())
        } else {
            Err(RoadnetError::NodeIndex {
                node: v,
                size: self.nodes.len(),
            })
        }
    }

    pub fn position(&self, v: NodeId) -> Result<Point> {
        self.check(v)?;
        Ok(self.nodes[v].pos)
    }

    /// Coordinates of `v` with the bounding box mapped onto `[0,1]^2`.
    pub fn normalized(&self, v: NodeId) -> Result<Point> {
        self.check(v)?;
        Ok(self.normalized[v])
    }

    /// Sorted out-neighbors of `v`; empty for a dead end.
    pub fn out_neighbors(&self, v: NodeId) -> Result<Vec<NodeId>> {
        self.check(v)?;
        Ok(self.out[v].iter().map(|&(w, _)| w).collect())
    }

    /// `(target, edge)` pairs leaving `v`, sorted by target.
    pub fn out_edges(&self, v: NodeId) -> Result<&[(NodeId, EdgeId)]> {
        self.check(v)?;
        Ok(&self.out[v])
    }

    pub fn edge_between(&self, from: NodeId, to: NodeId) -> Option<EdgeId> {
        self.by_endpoints.get(&(from, to)).copied()
    }

    /// Node closest to `p` in normalized coordinates; ties go to the smaller id.
    pub fn nearest_node(&self, p: Point) -> NodeId {
        let q = self.bbox.normalize(p);
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.normalized.iter().enumerate() {
            let d = planar_distance(*n, q);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Distance between two nodes in normalized coordinates.
    pub fn normalized_distance(&self, a: NodeId, b: NodeId) -> Result<f64> {
        Ok(planar_distance(self.normalized(a)?, self.normalized(b)?))
    }

    /// Checks the adjacency invariant and returns the traversed edge ids.
    pub fn path_edges(&self, path: &Path) -> Result<Vec<EdgeId>> {
        let nodes = path.nodes();
        if nodes.len() < 2 {
            return Err(RoadnetError::InvalidPath(format!(
                "path must have at least 2 nodes, has {}",
                nodes.len()
            )));
        }
        for &v in nodes {
            self.check(v)?;
        }
        nodes
            .windows(2)
            .map(|w| {
                self.edge_between(w[0], w[1]).ok_or_else(|| {
                    RoadnetError::InvalidPath(format!("{} -> {} is not an edge", w[0], w[1]))
                })
            })
            .collect()
    }

    pub fn validate_path(&self, path: &Path) -> Result<()> {
        self.path_edges(path).map(|_| ())
    }

    /// Resolves a query onto origin and destination nodes.
    pub fn resolve(&self, q: &OdtQuery) -> Result<(NodeId, NodeId)> {
        for p in [q.origin, q.destination] {
            if !self.bbox.contains(p) {
                return Err(RoadnetError::OutsideNetwork { lng: p.lng, lat: p.lat });
            }
        }
        Ok((self.nearest_node(q.origin), self.nearest_node(q.destination)))
    }
}

/// Node sequence; validated against a network with [`RoadNetwork::validate_path`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Path(Vec<NodeId>);

impl Path {
    pub fn new(nodes: Vec<NodeId>) -> Self {
        Self(nodes)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<NodeId> {
        self.0.first().copied()
    }

    pub fn last(&self) -> Option<NodeId> {
        self.0.last().copied()
    }

    pub fn push(&mut self, v: NodeId) {
        self.0.push(v);
    }

    pub fn into_inner(self) -> Vec<NodeId> {
        self.0
    }
}

impl From<Vec<NodeId>> for Path {
    fn from(v: Vec<NodeId>) -> Self {
        Self(v)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// A trip born on the network: node visits with integer-second timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub id: usize,
    pub points: Vec<(NodeId, i64)>,
}

impl Trip {
    pub fn new(id: usize, points: Vec<(NodeId, i64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(RoadnetError::InvalidPath(format!("trip {id} has no points")));
        }
        if points.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(RoadnetError::InvalidPath(format!(
                "trip {id} timestamps decrease"
            )));
        }
        Ok(Self { id, points })
    }

    pub fn path(&self) -> Path {
        Path(self.points.iter().map(|&(v, _)| v).collect())
    }

    pub fn departure(&self) -> i64 {
        self.points[0].1
    }

    /// `y = c_k - c_1`, seconds.
    pub fn travel_time(&self) -> f64 {
        (self.points[self.points.len() - 1].1 - self.points[0].1) as f64
    }

    /// `(edge, entry timestamp, traversal seconds)` for each hop.
    pub fn traversals(&self, net: &RoadNetwork) -> Result<Vec<(EdgeId, i64, i64)>> {
        let edges = net.path_edges(&self.path())?;
        Ok(edges
            .into_iter()
            .zip(self.points.windows(2))
            .map(|(e, w)| (e, w[0].1, w[1].1 - w[0].1))
            .collect())
    }
}

/// Origin point, destination point, departure time.
#[derive(Debug, Clone, PartialEq)]
pub struct OdtQuery {
    pub id: usize,
    pub origin: Point,
    pub destination: Point,
    pub departure_time: i64,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn grid(rows: usize, cols: usize) -> RoadNetwork {
        let mut nodes = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                nodes.push(Node {
                    id: r * cols + c,
                    pos: Point::new(c as f64, r as f64),
                });
            }
        }
        let mut edges = Vec::new();
        let mut add = |a: usize, b: usize| {
            let id = edges.len();
            edges.push(Edge { id, from: a, to: b, length: 1.0 });
        };
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                if c + 1 < cols {
                    add(v, v + 1);
                    add(v + 1, v);
                }
                if r + 1 < rows {
                    add(v, v + cols);
                    add(v + cols, v);
                }
            }
        }
        RoadNetwork::new(nodes, edges).unwrap()
    }

    #[test]
    fn interior_grid_node_has_four_sorted_neighbors() {
        let net = grid(3, 3);
        // enumerate lattice neighbors of the center (node 4) directly
        let mut expect: Vec<NodeId> = net
            .edges()
            .iter()
            .filter(|e| e.from == 4)
            .map(|e| e.to)
            .collect();
        expect.sort();
        assert_eq!(expect, vec![1, 3, 5, 7]);
        assert_eq!(net.out_neighbors(4).unwrap(), expect);
    }

    #[test]
    fn sink_and_chain_neighbors() {
        let nodes = vec![
            Node { id: 0, pos: Point::new(0.0, 0.0) },
            Node { id: 1, pos: Point::new(1.0, 0.0) },
        ];
        let edges = vec![Edge { id: 0, from: 0, to: 1, length: 5.0 }];
        let net = RoadNetwork::new(nodes, edges).unwrap();
        assert_eq!(net.out_neighbors(0).unwrap(), vec![1]);
        assert!(net.out_neighbors(1).unwrap().is_empty());
        assert!(matches!(
            net.out_neighbors(2),
            Err(RoadnetError::NodeIndex { node: 2, .. })
        ));
    }

    #[test]
    fn nearest_node_exact_and_tie_break() {
        let net = grid(3, 3);
        assert_eq!(net.nearest_node(net.position(7).unwrap()), 7);
        // halfway between node 2 (2,0) and node 5 (2,1)
        assert_eq!(net.nearest_node(Point::new(2.0, 0.5)), 2);
    }

    #[test]
    fn nearest_node_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let net = grid(10, 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = Point::new(rng.random_range(0.0..9.0), rng.random_range(0.0..9.0));
            // raw-coordinate scan; the grid box is square so the order is the same
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for n in net.nodes() {
                let d = ((n.pos.lng - p.lng).powi(2) + (n.pos.lat - p.lat).powi(2)).sqrt();
                if d < best_d {
                    best_d = d;
                    best = n.id;
                }
            }
            assert_eq!(net.nearest_node(p), best);
        }
    }

    #[test]
    fn path_validation() {
        let net = grid(3, 3);
        assert!(net.validate_path(&Path::new(vec![0, 1, 4, 7])).is_ok());
        assert!(net.validate_path(&Path::new(vec![0, 4])).is_err());
        assert!(net.validate_path(&Path::new(vec![0])).is_err());
        assert_eq!(net.path_edges(&Path::new(vec![0, 1])).unwrap().len(), 1);
    }

    #[test]
    fn rejects_dangling_and_bad_lengths() {
        let nodes: Vec<Node> = (0..5)
            .map(|i| Node { id: i, pos: Point::new(i as f64, 0.0) })
            .collect();
        let dangling = vec![Edge { id: 0, from: 0, to: 99, length: 1.0 }];
        assert!(matches!(
            RoadNetwork::new(nodes.clone(), dangling),
            Err(RoadnetError::Validation(_))
        ));
        let zero = vec![Edge { id: 0, from: 0, to: 1, length: 0.0 }];
        assert!(RoadNetwork::new(nodes, zero).is_err());
    }

    #[test]
    fn trip_accessors() {
        let trip = Trip::new(0, vec![(0, 100), (1, 130), (2, 175)]).unwrap();
        assert_eq!(trip.travel_time(), 75.0);
        assert_eq!(trip.path(), Path::new(vec![0, 1, 2]));
        assert!(Trip::new(1, vec![(0, 10), (1, 5)]).is_err());
    }
}
