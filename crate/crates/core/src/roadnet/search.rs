use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use super::{EdgeId, NodeId, Path, RoadNetwork};

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    node: NodeId,
}

impl Eq for Entry {}

impl Ord for Entry {
    // min-heap on cost, then on node id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `src` to `dst` under non-negative edge weights.
///
/// Relaxation only replaces a predecessor on a strict improvement, and
/// neighbors are scanned in ascending id order, so the result is a pure
/// function of the inputs.
pub fn shortest_path(
    net: &RoadNetwork,
    src: NodeId,
    dst: NodeId,
    mut weight: impl FnMut(EdgeId) -> f64,
) -> Option<(Path, f64)> {
    let n = net.node_count();
    if src >= n || dst >= n {
        return None;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<NodeId>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Entry { cost: 0.0, node: src });
    while let Some(Entry { cost, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        if node == dst {
            break;
        }
        for &(w, e) in net.out_edges(node).ok()? {
            let c = cost + weight(e);
            if c < dist[w] {
                dist[w] = c;
                prev[w] = Some(node);
                heap.push(Entry { cost: c, node: w });
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }
    let mut nodes = vec![dst];
    let mut cur = dst;
    while let Some(p) = prev[cur] {
        nodes.push(p);
        cur = p;
    }
    nodes.reverse();
    Some((Path::new(nodes), dist[dst]))
}

/// Minimum number of edges from `src` to `dst`, if reachable.
pub fn hop_distance(net: &RoadNetwork, src: NodeId, dst: NodeId) -> Option<usize> {
    let n = net.node_count();
    if src >= n || dst >= n {
        return None;
    }
    let mut seen = vec![usize::MAX; n];
    seen[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        if v == dst {
            return Some(seen[v]);
        }
        for &(w, _) in net.out_edges(v).ok()? {
            if seen[w] == usize::MAX {
                seen[w] = seen[v] + 1;
                queue.push_back(w);
            }
        }
    }
    None
}
