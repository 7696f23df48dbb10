//! Path alignment metrics and the sequence-level path reward.
//!
//! `reward = omega * LCS(pred, truth) / |truth| - beta * DTW(pred, truth)`,
//! where DTW uses Euclidean ground distance between normalized node
//! coordinates and is divided by `|truth|`.

use thiserror::Error;

use crate::roadnet::{planar_distance, NodeId, Path, Point, RoadNetwork, RoadnetError};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("alignment of an empty path")]
    EmptyPath,
    #[error(transparent)]
    Roadnet(#[from] RoadnetError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScores {
    pub lcs_len: usize,
    /// `lcs_len / |truth|`.
    pub lcs_norm: f64,
    /// Total DTW cost divided by `|truth|`.
    pub dtw_norm: f64,
}

/// Length of the longest common subsequence of two node sequences.
pub fn lcs(a: &Path, b: &Path) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignError::EmptyPath);
    }
    Ok(lcs_len(a.nodes(), b.nodes()))
}

fn lcs_len(a: &[NodeId], b: &[NodeId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Unnormalized DTW cost between two point traces.
pub fn dtw_cost(a: &[Point], b: &[Point]) -> f64 {
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for pa in a {
        cur[0] = f64::INFINITY;
        for (j, pb) in b.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = planar_distance(*pa, *pb) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

fn trace(net: &RoadNetwork, p: &Path) -> Result<Vec<Point>> {
    Ok(p.nodes()
        .iter()
        .map(|&v| net.normalized(v))
        .collect::<std::result::Result<_, _>>()?)
}

/// DTW cost between `pred` and `truth` in normalized coordinates, divided by `|truth|`.
pub fn dtw(pred: &Path, truth: &Path, net: &RoadNetwork) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(AlignError::EmptyPath);
    }
    let a = trace(net, pred)?;
    let b = trace(net, truth)?;
    Ok(dtw_cost(&a, &b) / b.len() as f64)
}

pub fn scores(pred: &Path, truth: &Path, net: &RoadNetwork) -> Result<AlignmentScores> {
    let lcs_len = lcs(pred, truth)?;
    Ok(AlignmentScores {
        lcs_len,
        lcs_norm: lcs_len as f64 / truth.len() as f64,
        dtw_norm: dtw(pred, truth, net)?,
    })
}

pub fn reward(pred: &Path, truth: &Path, net: &RoadNetwork, omega: f64, beta: f64) -> Result<f64> {
    let s = scores(pred, truth, net)?;
    Ok(reward_from(&s, omega, beta))
}

pub fn reward_from(s: &AlignmentScores, omega: f64, beta: f64) -> f64 {
    omega * s.lcs_norm - beta * s.dtw_norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{Edge, Node};

    fn p(v: &[usize]) -> Path {
        Path::new(v.to_vec())
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs(&p(&[1, 2, 3, 4]), &p(&[1, 2, 3, 4])).unwrap(), 4);
        assert_eq!(lcs(&p(&[1, 2, 3, 4]), &p(&[1, 3, 4, 5])).unwrap(), 3);
        assert_eq!(lcs(&p(&[1, 2]), &p(&[3, 4])).unwrap(), 0);
        assert!(matches!(lcs(&p(&[]), &p(&[1])), Err(AlignError::EmptyPath)));
    }

    #[test]
    fn dtw_two_point_trace() {
        let a = [Point::new(0.0, 0.0), Point::new(0.1, 0.0)];
        let b = [Point::new(0.0, 0.0), Point::new(0.2, 0.0)];
        // alignments: (0,0)(1,1) = 0 + 0.1; (0,0)(0,1)(1,1) = 0.2 + 0.1; (0,0)(1,0)(1,1) = 0.1 + 0.1
        let cost = dtw_cost(&a, &b);
        assert!((cost - 0.1).abs() < 1e-15);
        assert!((cost / 2.0 - 0.05).abs() < 1e-15);
    }

    fn line_net() -> RoadNetwork {
        // two parallel rows: 0-1-2 at y=0 and 3-4-5 at y=1
        let nodes = (0..6)
            .map(|i| Node { id: i, pos: Point::new((i % 3) as f64, (i / 3) as f64) })
            .collect();
        let pairs = [(0, 1), (1, 2), (3, 4), (4, 5)];
        let edges = pairs
            .iter()
            .enumerate()
            .map(|(id, &(from, to))| Edge { id, from, to, length: 1.0 })
            .collect();
        RoadNetwork::new(nodes, edges).unwrap()
    }

    #[test]
    fn reward_examples() {
        let net = line_net();
        let truth = p(&[0, 1, 2]);
        assert_eq!(reward(&truth, &truth, &net, 1.0, 1.0).unwrap(), 1.0);
        let other = p(&[3, 4, 5]);
        let r = reward(&other, &truth, &net, 1.0, 1.0).unwrap();
        assert!(r < 0.0);
        let d = dtw(&other, &truth, &net).unwrap();
        assert_eq!(reward(&other, &truth, &net, 0.0, 2.5).unwrap(), -2.5 * d);
        // unit vertical offset in normalized space, three matched pairs
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dtw_unknown_node() {
        let net = line_net();
        assert!(dtw(&p(&[0, 9]), &p(&[0, 1]), &net).is_err());
    }
}
