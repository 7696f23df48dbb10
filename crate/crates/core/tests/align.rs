use odtq_core::align::{dtw, lcs, reward, scores};
use odtq_core::roadnet::{Path, RoadNetwork};
use odtq_core::synthgen::generate_grid_network;
use proptest::prelude::*;

fn grid() -> RoadNetwork {
    generate_grid_network(4, 4, 100.0, 1, 100).unwrap()
}

fn node_seq() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0usize..16, 1..10)
}

/// Valid paths: random walks on the grid, steered by the choice indices.
fn walk() -> impl Strategy<Value = Vec<usize>> {
    (0usize..16, proptest::collection::vec(0usize..4, 1..9)).prop_map(|(start, picks)| {
        let net = grid();
        let mut out = vec![start];
        for p in picks {
            let nbrs = net.out_neighbors(*out.last().unwrap()).unwrap();
            out.push(nbrs[p % nbrs.len()]);
        }
        out
    })
}

proptest! {
    #[test]
    fn lcs_is_symmetric_and_reflexive(a in node_seq(), b in node_seq()) {
        let (pa, pb) = (Path::new(a.clone()), Path::new(b));
        prop_assert_eq!(lcs(&pa, &pb).unwrap(), lcs(&pb, &pa).unwrap());
        prop_assert_eq!(lcs(&pa, &pa).unwrap(), a.len());
    }

    #[test]
    fn score_ranges(a in node_seq(), b in node_seq()) {
        let net = grid();
        let (pa, pb) = (Path::new(a), Path::new(b));
        let s = scores(&pa, &pb, &net).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.lcs_norm));
        prop_assert!(s.dtw_norm >= 0.0);
        prop_assert_eq!(dtw(&pa, &pa, &net).unwrap(), 0.0);
    }

    #[test]
    fn reward_peaks_only_at_the_truth(
        a in walk(),
        b in walk(),
        omega in 0.1f64..3.0,
        beta in 0.1f64..3.0,
    ) {
        let net = grid();
        let (pa, pb) = (Path::new(a.clone()), Path::new(b.clone()));
        prop_assert_eq!(reward(&pb, &pb, &net, omega, beta).unwrap(), omega);
        let r = reward(&pa, &pb, &net, omega, beta).unwrap();
        if a == b {
            prop_assert_eq!(r, omega);
        } else {
            prop_assert!(r < omega);
        }
        let only_dtw = reward(&pa, &pb, &net, 0.0, beta).unwrap();
        prop_assert_eq!(only_dtw, -beta * dtw(&pa, &pb, &net).unwrap());
    }
}
