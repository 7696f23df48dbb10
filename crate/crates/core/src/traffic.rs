//! Observed edge traversals, indexed by entry time.
//!
//! Built from training-split trips only; downstream features query strictly
//! before a departure time.

use crate::roadnet::{EdgeId, RoadNetwork, RoadnetError, Trip};

#[derive(Debug, Clone, Default)]
pub struct TrafficIndex {
    /// `(entry_ts, seconds)` per edge, sorted.
    per_edge: Vec<Vec<(i64, i64)>>,
}

impl TrafficIndex {
    pub fn build<'a>(
        net: &RoadNetwork,
        trips: impl IntoIterator<Item = &'a Trip>,
    ) -> Result<Self, RoadnetError> {
        let mut per_edge = vec![Vec::new(); net.edge_count()];
        for trip in trips {
            for (e, entry, secs) in trip.traversals(net)? {
                per_edge[e].push((entry, secs));
            }
        }
        for v in &mut per_edge {
            v.sort_unstable();
        }
        Ok(Self { per_edge })
    }

    pub fn edge_count(&self) -> usize {
        self.per_edge.len()
    }

    /// Traversals of `edge` entered in `[start, end)`.
    pub fn window(&self, edge: EdgeId, start: i64, end: i64) -> &[(i64, i64)] {
        let Some(obs) = self.per_edge.get(edge) else {
            return &[];
        };
        let lo = obs.partition_point(|&(t, _)| t < start);
        let hi = obs.partition_point(|&(t, _)| t < end);
        &obs[lo..hi.max(lo)]
    }

    pub fn mean_time(&self, edge: EdgeId, start: i64, end: i64) -> Option<f64> {
        let w = self.window(edge, start, end);
        if w.is_empty() {
            None
        } else {
            Some(w.iter().map(|&(_, s)| s as f64).sum::<f64>() / w.len() as f64)
        }
    }

    pub fn observations(&self, edge: EdgeId) -> &[(i64, i64)] {
        self.per_edge.get(edge).map(Vec::as_slice).unwrap_or(&[])
    }
}
