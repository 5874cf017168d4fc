use std::time::Duration;

use danet::bench::{bench_pps, percentile, weight_connectivity, BenchOptions, BenchReport, ConnectivityMap};
use danet::{build_model, DANetConfig, Model, Tensor};
use proptest::prelude::*;

/// Tiny preset with deeper stages so the connectivity maps are non-trivial.
fn deep_tiny() -> DANetConfig {
    let mut cfg = DANetConfig::preset("tiny").unwrap();
    for (i, st) in cfg.stages.iter_mut().enumerate() {
        st.layers = 2 + i;
        st.growth = 4 + i;
        st.bottleneck = 6;
    }
    cfg.preset = None;
    cfg
}

fn model(seed: u64) -> Model<f32> {
    build_model(&deep_tiny(), seed).unwrap()
}

/// Reads the named bottleneck weight directly and averages |w| over the
/// channel range that carries `source`.
fn oracle_entry(m: &Model<f32>, stage: usize, source: usize, layer: usize) -> f64 {
    let flow = m.config().channel_flow()[stage];
    let id = m.params().find(&format!("stage{}/layer{layer}/conv1", stage + 1)).unwrap();
    let w = m.params().get(id);
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let channels: Vec<usize> = if source == 0 {
        (0..flow.input).collect()
    } else {
        let start = flow.input + (source - 1) * flow.growth;
        (start..start + flow.growth).collect()
    };
    let mut total = 0.0;
    let mut n = 0;
    for o in 0..cout {
        for &i in &channels {
            total += f64::from(w.data()[o * cin + i]).abs();
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn connectivity_support_is_lower_triangle() {
    let m = model(1);
    for stage in 0..4 {
        let map = weight_connectivity(&m, stage).unwrap();
        let d = m.config().stages[stage].layers;
        assert_eq!(map.layers(), d);
        assert_eq!(map.values.len(), d + 1);
        for s in 0..=d {
            for l in 0..d {
                assert_eq!(map.get(s, l).is_some(), s <= l, "stage {stage} source {s} layer {l}");
            }
        }
        let first_column: Vec<_> = (0..=d).filter(|&s| map.get(s, 0).is_some()).collect();
        assert_eq!(first_column, [0]);
    }
}

#[test]
fn connectivity_matches_direct_slicing() {
    let m = model(5);
    for stage in 0..4 {
        let map = weight_connectivity(&m, stage).unwrap();
        for l in 0..map.layers() {
            for s in 0..=l {
                let want = oracle_entry(&m, stage, s, l);
                let got = map.get(s, l).unwrap();
                assert!((got - want).abs() <= 1e-12 * want.max(1.0), "stage {stage} ({s},{l}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn connectivity_of_constant_weights() {
    let mut m = model(2);
    for (_, _, id) in m.bottleneck_weights() {
        let shape = m.params().get(id).shape().to_vec();
        m.params_mut().set(id, Tensor::full(&shape, -1.0)).unwrap();
    }
    let map = weight_connectivity(&m, 2).unwrap();
    assert!(map.values.iter().flatten().flatten().all(|&v| v == 1.0));
}

#[test]
fn connectivity_isolates_one_source_block() {
    let mut m = model(2);
    let stage = 3;
    let flow = m.config().channel_flow()[stage];
    for (s, _, id) in m.bottleneck_weights() {
        if s != stage {
            continue;
        }
        let w = m.params().get(id).clone();
        let cin = w.shape()[1];
        // Only the channels written by layer 0 (source 1) are nonzero.
        let lo = flow.input;
        let hi = lo + flow.growth;
        let masked = Tensor::from_fn(w.shape(), |i| if (lo..hi).contains(&(i % cin)) { 2.0 } else { 0.0 });
        m.params_mut().set(id, masked).unwrap();
    }
    let map = weight_connectivity(&m, stage).unwrap();
    for l in 0..map.layers() {
        for s in 0..=l {
            let want = if s == 1 { 2.0 } else { 0.0 };
            assert_eq!(map.get(s, l), Some(want), "({s},{l})");
        }
    }
}

#[test]
fn fresh_model_has_no_preferred_source() {
    let seeds = 32;
    let mut ratio_sum = 0.0;
    let mut columns = 0;
    for seed in 0..seeds {
        let m = model(seed);
        let map = weight_connectivity(&m, 3).unwrap();
        for l in 1..map.layers() {
            let col: Vec<f64> = (0..=l).map(|s| map.get(s, l).unwrap()).collect();
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            let min = col.iter().cloned().fold(f64::MAX, f64::min);
            ratio_sum += max / min;
            columns += 1;
        }
    }
    let mean = ratio_sum / columns as f64;
    assert!(mean < 3.0, "mean column max/min {mean}");
}

#[test]
fn connectivity_rejects_bad_stage() {
    assert!(weight_connectivity(&model(0), 4).is_err());
}

#[test]
fn single_cell_svg_and_csv() {
    let map = ConnectivityMap { stage: 0, values: vec![vec![Some(0.25)]] };
    let svg = map.to_svg();
    assert_eq!(svg.matches("<rect").count(), 1);
    assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    assert_eq!(map.to_csv(), "source,layer,value\n0,0,0.25\n");
}

#[test]
fn written_files_are_deterministic_and_round_trip() {
    let m = model(9);
    let map = weight_connectivity(&m, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("stage2");
    map.write(&stem).unwrap();
    let svg1 = std::fs::read(stem.with_extension("svg")).unwrap();
    let csv1 = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    map.write(&stem).unwrap();
    assert_eq!(svg1, std::fs::read(stem.with_extension("svg")).unwrap());
    assert_eq!(csv1, std::fs::read_to_string(stem.with_extension("csv")).unwrap());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);

    let mut rows = 0;
    for line in csv1.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (s, l, v): (usize, usize, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        assert_eq!(map.get(s, l), Some(v));
        rows += 1;
    }
    let d = map.layers();
    assert_eq!(rows, d * (d + 1) / 2);
}

#[test]
fn pps_is_persons_over_wall_time() {
    let m = build_model::<f32>(&DANetConfig::preset("tiny").unwrap(), 0).unwrap();
    let opts = BenchOptions { batch_size: 3, threads: 2, warmup: 1, persons: 10, replicate: false, seed: 4 };
    let r = bench_pps(&m, &opts).unwrap();
    // 10 persons round up to 4 batches of 3; warmup batches are not counted.
    assert_eq!(r.persons, 12);
    assert_eq!(r.latencies.len(), 4);
    assert!(r.wall_time > 0.0);
    assert_eq!(r.pps, r.persons as f64 / r.wall_time);
    assert!((r.pps * r.wall_time - 12.0).abs() < 1e-9);
    assert!(r.latencies.windows(2).all(|w| w[0] <= w[1]));
    assert!(r.p50 <= r.p90 && r.p90 <= r.p99);
    // A single batch can never take longer than the whole timed run.
    assert!(*r.latencies.last().unwrap() <= r.wall_time);
}

#[test]
fn pps_with_replicated_models() {
    let m = build_model::<f32>(&DANetConfig::preset("tiny").unwrap(), 0).unwrap();
    let opts = BenchOptions { batch_size: 1, threads: 3, warmup: 0, persons: 5, replicate: true, seed: 0 };
    let r = bench_pps(&m, &opts).unwrap();
    assert_eq!((r.persons, r.threads), (5, 3));
}

#[test]
fn bench_rejects_degenerate_options() {
    let m = build_model::<f32>(&DANetConfig::preset("tiny").unwrap(), 0).unwrap();
    for opts in [
        BenchOptions { threads: 0, ..BenchOptions::default() },
        BenchOptions { batch_size: 0, ..BenchOptions::default() },
        BenchOptions { batch_size: 4, persons: 3, ..BenchOptions::default() },
    ] {
        assert!(bench_pps(&m, &opts).is_err(), "{opts:?}");
    }
}

#[test]
fn report_csv_has_one_row() {
    let r = BenchReport::from_measurements(&BenchOptions::default(), 4, Duration::from_millis(500), vec![0.2, 0.1]);
    assert_eq!(r.pps, 8.0);
    assert_eq!(r.latencies, [0.1, 0.2]);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().nth(1).unwrap(), "1,1,2,4,0.5,8,0.1,0.2,0.2");
}

#[test]
fn nearest_rank_percentiles() {
    let v: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(percentile(&v, 50.0), 5.0);
    assert_eq!(percentile(&v, 90.0), 9.0);
    assert_eq!(percentile(&v, 99.0), 10.0);
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&[], 50.0), 0.0);
}

proptest! {
    #[test]
    fn percentile_is_a_member_and_monotone(mut v in prop::collection::vec(-1e3f64..1e3, 1..40), a in 0.0f64..100.0, b in 0.0f64..100.0) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (pl, ph) = (percentile(&v, lo), percentile(&v, hi));
        prop_assert!(v.contains(&pl));
        prop_assert!(pl <= ph);
        // At least q% of samples are at or below the q-th percentile.
        let below = v.iter().filter(|&&x| x <= ph).count() as f64;
        prop_assert!(below >= hi / 100.0 * v.len() as f64 - 1e-9);
    }
}
