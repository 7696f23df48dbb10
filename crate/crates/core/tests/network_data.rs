use odtq_core::roadnet::{load_network, save_network, shortest_path, OdtQuery, Path, Point, RoadNetwork};
use odtq_core::synthgen::{build_dataset, generate_grid_network, simulate_trip, CongestionProfile, DataConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

/// Bellman-Ford distances plus predecessor links, as an oracle for Dijkstra.
fn bellman_ford(net: &RoadNetwork, src: usize, w: impl Fn(usize) -> f64) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![None; n];
    dist[src] = 0.0;
    for _ in 0..n {
        for e in net.edges() {
            let c = dist[e.from] + w(e.id);
            if c < dist[e.to] {
                dist[e.to] = c;
                prev[e.to] = Some(e.from);
            }
        }
    }
    (dist, prev)
}

fn unwind(prev: &[Option<usize>], dst: usize) -> Vec<usize> {
    let mut out = vec![dst];
    while let Some(p) = prev[*out.last().unwrap()] {
        out.push(p);
    }
    out.reverse();
    out
}

#[test]
fn shortest_paths_match_bellman_ford() {
    let net = generate_grid_network(6, 7, 250.0, 17, 10_000).unwrap();
    let w = |e: usize| net.edge(e).length * (1.0 + (e as f64 * 0.37).sin().abs());
    for src in [0, 11, 41] {
        let (dist, _) = bellman_ford(&net, src, w);
        for dst in (0..net.node_count()).filter(|&d| d != src) {
            let (path, cost) = shortest_path(&net, src, dst, w).unwrap();
            net.validate_path(&path).unwrap();
            assert!((cost - dist[dst]).abs() <= 1e-9 * dist[dst].max(1.0));
            let along: f64 = net.path_edges(&path).unwrap().iter().map(|&e| w(e)).sum();
            assert!((along - cost).abs() <= 1e-9 * cost.max(1.0));
        }
    }
}

#[test]
fn network_round_trip_through_file() {
    let net = generate_grid_network(10, 10, 300.0, 5, 10_000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("net.txt");
    save_network(&net, &file).unwrap();
    let back = load_network(&file).unwrap();
    assert_eq!(back, net);
    // and a second pass is a fixed point byte for byte
    let again = dir.path().join("again.txt");
    save_network(&back, &again).unwrap();
    assert_eq!(std::fs::read(&file).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn nearest_node_matches_scan_on_grid() {
    let net = generate_grid_network(10, 10, 100.0, 2, 10_000).unwrap();
    let bbox = net.bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        use rand::Rng;
        let p = Point::new(
            rng.random_range(bbox.min.lng..bbox.max.lng),
            rng.random_range(bbox.min.lat..bbox.max.lat),
        );
        let q = bbox.normalize(p);
        let best = (0..net.node_count())
            .min_by(|&a, &b| {
                let da = net.normalized(a).unwrap();
                let db = net.normalized(b).unwrap();
                let fa = (da.lng - q.lng).hypot(da.lat - q.lat);
                let fb = (db.lng - q.lng).hypot(db.lat - q.lat);
                fa.total_cmp(&fb).then(a.cmp(&b))
            })
            .unwrap();
        assert_eq!(net.nearest_node(p), best);
    }
}

fn corner_query(net: &RoadNetwork, dep: i64) -> OdtQuery {
    let last = net.node_count() - 1;
    OdtQuery {
        id: 3,
        origin: net.position(0).unwrap(),
        destination: net.position(last).unwrap(),
        departure_time: dep,
    }
}

#[test]
fn unperturbed_trip_follows_fastest_route() {
    let cfg = DataConfig { rows: 10, cols: 10, ..DataConfig::default() };
    let net = generate_grid_network(10, 10, cfg.spacing, 21, 10_000).unwrap();
    let profile = CongestionProfile::generate(&net, &cfg, 21);
    let q = corner_query(&net, 3600);
    let (_, path) = simulate_trip(&net, &profile, &q, 0.0, 1).unwrap();
    let (_, prev) = bellman_ford(&net, 0, |e| profile.traversal_time(e, q.departure_time));
    assert_eq!(path, Path::new(unwind(&prev, net.node_count() - 1)));
}

#[test]
fn zero_noise_trips_replay_the_profile() {
    let cfg = DataConfig { noise_scale: 0.0, noise_high: None, trips: 200, ..DataConfig::default() };
    let (ds, profile) = build_dataset(&cfg, 31).unwrap();
    for trip in &ds.trips {
        let mut t = trip.departure();
        for (e, entry, secs) in trip.traversals(&ds.network).unwrap() {
            assert_eq!(entry, t);
            let want = (profile.traversal_time(e, t).round() as i64).max(1);
            assert_eq!(secs, want);
            t += want;
        }
        assert_eq!(trip.travel_time(), (t - trip.departure()) as f64);
    }
}

#[test]
fn travel_time_is_sum_of_edge_times_and_seeds_matter() {
    let cfg = DataConfig { trips: 300, ..DataConfig::default() };
    let (ds, profile) = build_dataset(&cfg, 8).unwrap();
    for trip in &ds.trips {
        let sum: i64 = trip.traversals(&ds.network).unwrap().iter().map(|x| x.2).sum();
        assert_eq!(trip.travel_time(), sum as f64);
    }
    let q = &ds.queries[0];
    let a = simulate_trip(&ds.network, &profile, q, cfg.epsilon, 1).unwrap();
    let b = simulate_trip(&ds.network, &profile, q, cfg.epsilon, 2).unwrap();
    let c = simulate_trip(&ds.network, &profile, q, cfg.epsilon, 1).unwrap();
    assert_eq!(a, c);
    assert!(a.0.points != b.0.points || a.1 != b.1);
}

#[test]
fn dataset_serialization_is_deterministic() {
    let cfg = DataConfig { trips: 150, ..DataConfig::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        build_dataset(&cfg, 77).unwrap().0.save(d.path()).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 4);
    for n in &names {
        assert_eq!(
            std::fs::read(dirs[0].path().join(n)).unwrap(),
            std::fs::read(dirs[1].path().join(n)).unwrap(),
            "{n:?} differs"
        );
    }
    let loaded = odtq_core::synthgen::Dataset::load(dirs[0].path()).unwrap();
    assert_eq!(loaded, build_dataset(&cfg, 77).unwrap().0);
}

#[test]
fn noisier_edges_have_larger_variance() {
    let net = generate_grid_network(3, 3, 400.0, 4, 100).unwrap();
    let quiet = CongestionProfile::generate(&net, &DataConfig { noise_scale: 0.1, ..DataConfig::default() }, 4);
    let loud = CongestionProfile::generate(&net, &DataConfig { noise_scale: 0.2, ..DataConfig::default() }, 4);
    let n = 10_000;
    let var = |p: &CongestionProfile, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| p.sample_time(5, 1000, &mut rng)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    let (vq, vl) = (var(&quiet, 1), var(&loud, 2));
    let f = FisherSnedecor::new((n - 1) as f64, (n - 1) as f64).unwrap();
    let critical = f.inverse_cdf(0.99);
    assert!(vl / vq > critical, "variance ratio {} vs critical {critical}", vl / vq);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_trips_are_valid_paths(seed in 0u64..1000) {
        let cfg = DataConfig { rows: 4, cols: 5, trips: 40, ..DataConfig::default() };
        let (ds, _) = build_dataset(&cfg, seed).unwrap();
        let bbox = ds.network.bbox();
        for (trip, q) in ds.trips.iter().zip(&ds.queries) {
            ds.network.validate_path(&trip.path()).unwrap();
            prop_assert!(bbox.contains(q.origin) && bbox.contains(q.destination));
            prop_assert_eq!(trip.departure(), q.departure_time);
            prop_assert!(q.departure_time >= 0 && q.departure_time < cfg.horizon);
        }
    }
}
