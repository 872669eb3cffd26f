mod common;

use common::oracles::{close, instance, map_oracle, recall_oracle, rmse_oracle};
use crossrisk::data::{generate_city, weekly_cycle, Profile, SampleSet, HOURS_PER_WEEK};
use crossrisk::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rmse_examples() {
    assert!((rmse(&[3.0, 4.0], &[0.0, 0.0], &[true, true]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(rmse(&[1.0, 2.0, 7.0], &[1.0, 2.0, 7.0], &[true; 3]).unwrap(), 0.0);
    assert_eq!(rmse(&[5.0, 1.0], &[2.0, 1.0], &[true, true]).unwrap(), (4.5f64).sqrt());
    assert!(rmse(&[1.0], &[1.0], &[false]).is_err());
    assert!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[true, true]).is_err());
}

#[test]
fn recall_examples() {
    let truth = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    assert_eq!(recall_at_hotspots(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0], &truth, &[true; 6]).unwrap(), Some(100.0));
    let pred = [9.0, 8.0, 0.0, 0.0, 7.0, 6.0];
    assert_eq!(recall_at_hotspots(&pred, &truth, &[true; 6]).unwrap(), Some(50.0));
    assert_eq!(recall_at_hotspots(&pred, &[0.0; 6], &[true; 6]).unwrap(), None);
    // A step without hotspots is skipped, not scored as zero.
    let two = [pred, [0.0; 6]].concat();
    let truth2 = [truth, [0.0; 6]].concat();
    assert_eq!(recall_at_hotspots(&two, &truth2, &[true; 6]).unwrap(), Some(50.0));
}

#[test]
fn map_examples() {
    let ap = mean_average_precision(&[4.0, 3.0, 2.0, 1.0], &[1.0, 0.0, 1.0, 0.0], &[true; 4]).unwrap();
    assert!((ap.unwrap() - 5.0 / 6.0).abs() < 1e-15);
    let perfect = mean_average_precision(&[4.0, 3.0, 2.0, 1.0], &[2.0, 1.0, 0.0, 0.0], &[true; 4]).unwrap();
    assert_eq!(perfect, Some(1.0));
    assert_eq!(mean_average_precision(&[1.0, 2.0], &[0.0, 0.0], &[true; 2]).unwrap(), None);
}

#[test]
fn tradeoff_reproduces_published_rows() {
    let rows = [
        (8.5855, 1.137, 1.401, 4.927),
        (9.1195, 10.000, 10.000, 9.560),
        (10.6302, 1.759, 2.915, 6.484),
        (11.1277, 1.811, 3.573, 6.910),
        (9.4079, 1.000, 1.000, 5.204),
    ];
    for (r, f, b, expect) in rows {
        let score = tradeoff_score(r, f, b, TRADEOFF_WEIGHTS).unwrap();
        assert!((score - expect).abs() <= 1e-3, "{score} vs {expect}");
    }
    assert!(tradeoff_score(1.0, 1.0, 1.0, (-0.1, 0.5, 0.5)).is_err());
}

#[test]
fn normalize_times_examples() {
    assert_eq!(normalize_times(&[2.0, 4.0, 3.0]), vec![1.0, 10.0, 5.5]);
    assert_eq!(normalize_times(&[2.0, 2.0]), vec![1.0, 1.0]);
}

#[test]
fn high_frequency_examples() {
    let flat = high_frequency_buckets(&[1.0; HOURS_PER_WEEK]);
    assert_eq!(flat.iter().filter(|&&b| b).count(), 42);
    assert!(flat[..42].iter().all(|&b| b));

    let mut hour8 = [0.0; HOURS_PER_WEEK];
    for day in 0..7 {
        hour8[day * 24 + 8] = 5.0;
    }
    let kept = high_frequency_buckets(&hour8);
    assert_eq!(kept.iter().filter(|&&b| b).count(), 42);
    for day in 0..7 {
        assert!(kept[day * 24 + 8]);
    }
    // Remaining 35 slots go to the lowest-index zero buckets.
    let zeros_kept: Vec<usize> = (0..HOURS_PER_WEEK).filter(|&b| kept[b] && hour8[b] == 0.0).collect();
    let expect: Vec<usize> = (0..HOURS_PER_WEEK).filter(|&b| hour8[b] == 0.0).take(35).collect();
    assert_eq!(zeros_kept, expect);
}

#[test]
fn high_frequency_contains_both_daily_peaks() {
    let cycle = weekly_cycle(&Profile::default());
    let totals: [f64; HOURS_PER_WEEK] = std::array::from_fn(|b| cycle[b]);
    let kept = high_frequency_buckets(&totals);
    for day in 0..5 {
        let hours = &cycle[day * 24..(day + 1) * 24];
        let am = (0..12).max_by(|&a, &b| hours[a].total_cmp(&hours[b])).unwrap();
        let pm = (12..24).max_by(|&a, &b| hours[a].total_cmp(&hours[b])).unwrap();
        assert!(kept[day * 24 + am] && kept[day * 24 + pm], "day {day}");
    }
}

#[test]
fn high_frequency_filter_on_data() {
    let ds = generate_city("c", 3, 4, 4, 5, 4, &Profile::default()).unwrap();
    let s = SampleSet::new(ds.steps(), 12, 1).unwrap();
    let picked = high_frequency_filter(&ds, &s).unwrap();
    let buckets = high_frequency_buckets(&train_bucket_totals(&ds, &s).unwrap());
    assert!(!picked.is_empty() && picked.len() < s.n_test());
    for i in s.indices(crossrisk::data::Split::Test) {
        let hot = buckets[ds.hour_of_week(s.target_index(i))];
        assert_eq!(picked.contains(&i), hot);
    }
    let short = generate_city("c", 3, 4, 4, 5, 1, &Profile::default()).unwrap();
    let s = SampleSet::new(short.steps(), 12, 1).unwrap();
    assert!(high_frequency_filter(&short, &s).is_err());
}

proptest! {
    #[test]
    fn metrics_match_brute_force(seed in any::<u64>()) {
        let (pred, truth, mask) = instance(seed);
        prop_assert!((rmse(&pred, &truth, &mask).unwrap() - rmse_oracle(&pred, &truth, &mask)).abs() < 1e-12);
        prop_assert!(close(recall_at_hotspots(&pred, &truth, &mask).unwrap(), recall_oracle(&pred, &truth, &mask)));
        prop_assert!(close(mean_average_precision(&pred, &truth, &mask).unwrap(), map_oracle(&pred, &truth, &mask)));
    }

    #[test]
    fn metrics_ignore_invalid_cells(seed in any::<u64>()) {
        let (pred, truth, mask) = instance(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let scramble = |x: &[f64], r: &mut ChaCha8Rng| -> Vec<f64> {
            x.iter().enumerate().map(|(k, &v)| if mask[k % mask.len()] { v } else { r.random_range(-5.0..5.0) }).collect()
        };
        let (p2, t2) = (scramble(&pred, &mut r), scramble(&truth, &mut r));
        let a = MetricReport::compute("c", Period::AllDay, 0.0, &pred, &truth, &mask).unwrap();
        let b = MetricReport::compute("c", Period::AllDay, 0.0, &p2, &t2, &mask).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metric_ranges(seed in any::<u64>()) {
        let (pred, truth, mask) = instance(seed);
        let rep = MetricReport::compute("c", Period::AllDay, 0.0, &pred, &truth, &mask).unwrap();
        prop_assert!(rep.rmse >= 0.0);
        prop_assert!(rep.recall_pct.is_none_or(|v| (0.0..=100.0).contains(&v)));
        prop_assert!(rep.map.is_none_or(|v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn reports_round_trip_through_csv() {
    let mut a = MetricReport::compute("north", Period::HighFreq, 0.2, &[1.0, 2.0], &[0.0, 3.0], &[true, true]).unwrap();
    a.t_forward = Some(1.5);
    let b = MetricReport::compute("south", Period::AllDay, 0.0, &[1.0, 2.0], &[0.0, 0.0], &[true, false]).unwrap();
    assert_eq!(b.recall_pct, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_reports_csv(&[a.clone(), b.clone()], &path).unwrap();
    assert_eq!(read_reports_csv(&path).unwrap(), vec![a.clone(), b]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("city,period,noise_level,steps,rmse,recall_pct,map"));
    assert!(text.contains("high-freq"));
    let json = dir.path().join("r.json");
    write_reports_json(&[a], &json).unwrap();
    assert!(std::fs::read_to_string(json).unwrap().contains("\"period\": \"high-freq\""));
}

#[test]
fn period_names_parse() {
    assert_eq!("all-day".parse::<Period>().unwrap(), Period::AllDay);
    assert_eq!("high-freq".parse::<Period>().unwrap().name(), "high-freq");
    assert!("night".parse::<Period>().is_err());
}

#[test]
fn high_frequency_filter_ignores_invalid_cells() {
    let p = Profile { valid_fraction: 0.5, ..Profile::default() };
    let ds = generate_city("c", 5, 4, 4, 5, 3, &p).unwrap();
    let s = SampleSet::new(ds.steps(), 12, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let cells = ds.cells();
    let data: Vec<f64> = ds
        .targets
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if ds.mask[k % cells] { v } else { r.random_range(0.0..100.0) })
        .collect();
    let noisy = crossrisk::data::CityDataset {
        targets: crossrisk::Tensor::new(ds.targets.shape().to_vec(), data).unwrap(),
        ..ds.clone()
    };
    assert_eq!(ds.totals(), noisy.totals());
    assert_eq!(high_frequency_filter(&ds, &s).unwrap(), high_frequency_filter(&noisy, &s).unwrap());
}
