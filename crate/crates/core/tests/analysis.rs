use std::sync::Arc;

use lift_core::analysis::*;
use lift_core::config::EngineConfig;
use lift_core::oracle::{brute_tap_count, dense_taps_1d, random_active_set};
use lift_core::pcd_io::{Point, PointCloud};
use lift_core::sparse::Rulebook;
use lift_core::synth::{synthetic_cloud, SceneParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_config(n: u32) -> (EngineConfig, PointCloud) {
    let mut cfg = EngineConfig::default();
    let half = 0.15 * n as f64 / 2.0;
    cfg.grid.x_min = -half;
    cfg.grid.x_max = half;
    cfg.grid.y_min = -half;
    cfg.grid.y_max = half;
    let mut points = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let x = -half + 0.15 * (i as f64 + 0.5);
            let y = -half + 0.15 * (j as f64 + 0.5);
            points.push(Point::new(x as f32, y as f32, 0.0, 1.0));
        }
    }
    (cfg, PointCloud::from_points(points))
}

#[test]
fn dense_grid_matches_closed_form() {
    for n in [24u32, 25, 13] {
        let (cfg, cloud) = dense_config(n);
        let report = count_macs_network(&cloud, &cfg).unwrap();
        let net = &cfg.network;
        let sq = |t: u64| t * t;
        let mut want = vec![(n * n) as u64 * 9 * 32];
        let mut size = n as u64;
        for s in 0..4 {
            let (cin, cout) = net.stage_io(s);
            want.push(sq(dense_taps_1d(size, 3, 2)) * (cin * cout) as u64);
            size = size.div_ceil(2);
            for _ in 0..net.stage_depths[s] {
                want.push(sq(dense_taps_1d(size, 3, 1)) * (cout * cout) as u64);
            }
        }
        let s2 = (n as u64).div_ceil(2).div_ceil(2);
        want.push(sq(s2) * 64 * 128);
        for out in [10u64, 8] {
            want.push(sq(dense_taps_1d(s2, 3, 1)) * 128 * 64);
            want.push(sq(dense_taps_1d(s2, 1, 1)) * 64 * out);
        }
        let got: Vec<u64> = report.layers.iter().map(|l| l.macs).collect();
        assert_eq!(got, want, "n = {n}");
        assert_eq!(report.total_macs, want.iter().sum::<u64>());
        assert_eq!(report.total_gmac, report.total_macs as f64 / 1e9);
    }
}

#[test]
fn layer_counts_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (w, h, occ) = (rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(0.05..0.95));
        let set = Arc::new(random_active_set(&mut rng, w, h, occ));
        let (cin, cout) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        for (rb, k, s, p) in [
            (Rulebook::submanifold(&set, 3).unwrap(), 3, 1, 1),
            (Rulebook::downsample(&set).unwrap(), 3, 2, 1),
            (Rulebook::regular(&set, 3).unwrap(), 3, 1, 1),
        ] {
            let want = brute_tap_count(&set, rb.output(), k, s, p) * (cin * cout) as u64;
            assert_eq!(count_macs_layer(cin, cout, &rb), want);
        }
    }
}

#[test]
fn adding_points_never_lowers_the_count() {
    let cfg = EngineConfig::default();
    let cloud = synthetic_cloud(4, &SceneParams::default());
    let mut prev = 0;
    for n in [0, 10, 100, 1000, cloud.len()] {
        let part = PointCloud::from_points(cloud.points[..n].to_vec());
        let r = count_macs_network(&part, &cfg).unwrap();
        assert!(r.total_macs >= prev);
        prev = r.total_macs;
    }
    assert!(prev > 0);
}

#[test]
fn budget_flag_uses_thirty_gmac() {
    assert_eq!(GMAC_BUDGET, 30.0);
    let at = MacReport::new(vec![LayerMacs { name: "x".into(), kind: "y".into(), taps: 0, macs: 30_000_000_000 }]);
    assert!(at.pass);
}
