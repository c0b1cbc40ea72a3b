use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

fn record(index: usize, norm: f64, correct: bool) -> SampleRecord {
    SampleRecord {
        index,
        feature: vec![norm, 0.0],
        norm,
        label: 0,
        prediction: usize::from(!correct),
        correct,
        prob: 0.5,
    }
}

#[test]
fn partition_takes_bottom_fraction_by_norm() {
    let records: Vec<SampleRecord> = (0..10).map(|i| record(i, (i + 1) as f64, true)).collect();
    let p = partition_by_norm(&records, 0.2).unwrap();
    let low_norms: Vec<f64> = p.low.iter().map(|r| r.norm).collect();
    assert_eq!(low_norms, vec![1.0, 2.0]);
    assert_eq!(p.good.len(), 8);
}

#[test]
fn partition_breaks_ties_by_index() {
    let records: Vec<SampleRecord> = (0..10).map(|i| record(i, 5.0, true)).collect();
    let p = partition_by_norm(&records, 0.2).unwrap();
    let low_idx: Vec<usize> = p.low.iter().map(|r| r.index).collect();
    assert_eq!(low_idx, vec![0, 1]);
}

#[test]
fn partition_of_ten_thousand_at_fifth() {
    let records: Vec<SampleRecord> = (0..10_000)
        .map(|i| record(i, i as f64 * 0.01, true))
        .collect();
    let p = partition_by_norm(&records, 0.2).unwrap();
    assert_eq!(p.low.len(), 2_000);
    assert_eq!(p.low.len() + p.good.len(), 10_000);
}

#[test]
fn partition_is_exhaustive_and_disjoint() {
    let mut r = Xoshiro256StarStar::seed_from_u64(1);
    let records: Vec<SampleRecord> = (0..137)
        .map(|i| record(i, r.random_range(0.0..10.0), r.random_range(0.0..1.0) > 0.3))
        .collect();
    let p = partition_by_norm(&records, 0.2).unwrap();
    assert_eq!(p.low.len() + p.good.len(), records.len());
    let mut seen: Vec<usize> = p.low.iter().chain(&p.good).map(|r| r.index).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..137).collect::<Vec<_>>());
    let max_low = p.low.iter().map(|r| r.norm).fold(f64::NEG_INFINITY, f64::max);
    let min_good = p.good.iter().map(|r| r.norm).fold(f64::INFINITY, f64::min);
    assert!(max_low <= min_good);
}

#[test]
fn partition_rejects_bad_input() {
    assert!(matches!(partition_by_norm(&[], 0.2), Err(Error::Domain(_))));
    let records = vec![record(0, 1.0, true)];
    assert!(partition_by_norm(&records, 0.0).is_err());
    assert!(partition_by_norm(&records, 1.0).is_err());
}

#[test]
fn report_has_three_rows_in_fixed_order() {
    let records: Vec<SampleRecord> = (0..10).map(|i| record(i, (i + 1) as f64, true)).collect();
    let p = partition_by_norm(&records, 0.2).unwrap();
    let rows = subset_report(&p);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].subset, "good");
    assert_eq!(rows[1].subset, "low");
    assert_eq!(rows[2].subset, "overall");
    for row in &rows {
        assert_eq!(row.accuracy, 1.0);
    }
}

#[test]
fn report_mean_norm() {
    let records = vec![record(0, 3.0, true), record(1, 4.0, true), record(2, 5.0, false)];
    let p = partition_by_norm(&records, 0.34).unwrap();
    let rows = subset_report(&p);
    let overall = &rows[2];
    assert!((overall.mean_norm - 4.0).abs() < 1e-12);
}

#[test]
fn report_overall_accuracy_is_weighted_mean() {
    let mut r = Xoshiro256StarStar::seed_from_u64(2);
    let records: Vec<SampleRecord> = (0..533)
        .map(|i| record(i, r.random_range(0.0..10.0), r.random_range(0.0..1.0) > 0.4))
        .collect();
    let p = partition_by_norm(&records, 0.2).unwrap();
    let rows = subset_report(&p);
    let (good, low, overall) = (&rows[0], &rows[1], &rows[2]);
    let weighted = (good.accuracy * good.count as f64 + low.accuracy * low.count as f64)
        / (good.count + low.count) as f64;
    assert!((overall.accuracy - weighted).abs() < 1e-12);
}

fn candidate(scan_id: usize, score: f64, is_true: bool) -> FrocCandidate {
    FrocCandidate {
        scan_id,
        score,
        is_true_nodule: is_true,
    }
}

#[test]
fn froc_perfect_scorer_hits_full_sensitivity_at_zero_fps() {
    let input = FrocInput::new(
        vec![
            candidate(0, 0.9, true),
            candidate(0, 0.8, true),
            candidate(0, 0.3, false),
            candidate(0, 0.2, false),
        ],
        1,
        2,
    )
    .unwrap();
    let curve = froc(&input);
    assert!(curve.contains(&(0.0, 1.0)));
}

#[test]
fn froc_all_false_candidates_stay_at_zero_sensitivity() {
    let input = FrocInput::new(
        vec![candidate(0, 0.9, false), candidate(0, 0.5, false)],
        2,
        3,
    )
    .unwrap();
    let curve = froc(&input);
    for (_, sens) in curve {
        assert_eq!(sens, 0.0);
    }
}

#[test]
fn froc_hand_case_threshold_sweep() {
    // 1 scan, 2 ground-truth nodules, six candidates
    let input = FrocInput::new(
        vec![
            candidate(0, 0.9, true),
            candidate(0, 0.8, false),
            candidate(0, 0.7, true),
            candidate(0, 0.6, false),
            candidate(0, 0.5, false),
            candidate(0, 0.4, false),
        ],
        1,
        2,
    )
    .unwrap();
    let curve = froc(&input);
    assert_eq!(curve[0], (0.0, 0.5)); // threshold 0.9
    assert_eq!(curve[1], (1.0, 0.5)); // threshold 0.8
    assert_eq!(curve[2], (1.0, 1.0)); // threshold 0.7: sens 1.0, 1 FP/scan
    // monotone in both axes as the threshold loosens
    for w in curve.windows(2) {
        assert!(w[1].0 >= w[0].0);
        assert!(w[1].1 >= w[0].1);
    }
}

#[test]
fn froc_input_validation() {
    assert!(FrocInput::new(vec![], 0, 1).is_err());
    assert!(FrocInput::new(vec![], 1, 0).is_err());
    assert!(FrocInput::new(vec![candidate(0, f64::NAN, true)], 1, 1).is_err());
}

#[test]
fn cpm_hand_mean() {
    let sens = [0.8, 0.85, 0.9, 0.92, 0.95, 0.97, 0.98];
    let curve: Vec<(f64, f64)> = CPM_OPERATING_POINTS
        .iter()
        .zip(sens)
        .map(|(&fps, s)| (fps, s))
        .collect();
    assert!((cpm(&curve).unwrap() - 0.91).abs() < 1e-12);
}

#[test]
fn cpm_flat_curve() {
    let curve = vec![(0.0, 1.0), (10.0, 1.0)];
    assert_eq!(cpm(&curve).unwrap(), 1.0);
    assert!(matches!(cpm(&[]), Err(Error::Domain(_))));
}

/// Brute-force oracle: per-point lookup with its own dedup and interpolation
/// loops, no shortcuts shared with the implementation.
fn cpm_oracle(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &t in &CPM_OPERATING_POINTS {
        // max sensitivity per fps, collected the slow way
        let mut distinct: Vec<f64> = curve.iter().map(|p| p.0).collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let max_at = |x: f64| -> f64 {
            curve
                .iter()
                .filter(|p| p.0 == x)
                .map(|p| p.1)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let first = distinct[0];
        let last = distinct[distinct.len() - 1];
        let v = if t < first {
            0.0
        } else if t >= last {
            max_at(last)
        } else {
            let mut value = 0.0;
            for i in 0..distinct.len() - 1 {
                let (x0, x1) = (distinct[i], distinct[i + 1]);
                if t >= x0 && t <= x1 {
                    let (y0, y1) = (max_at(x0), max_at(x1));
                    value = y0 + (y1 - y0) * (t - x0) / (x1 - x0);
                    break;
                }
            }
            value
        };
        total += v;
    }
    total / 7.0
}

#[test]
fn cpm_matches_brute_force_oracle_on_random_curves() {
    let mut r = Xoshiro256StarStar::seed_from_u64(3);
    for _ in 0..50 {
        let candidates: Vec<FrocCandidate> = (0..200)
            .map(|_| {
                candidate(
                    r.random_range(0..10),
                    r.random_range(0.0..1.0),
                    r.random_range(0.0..1.0) < 0.3,
                )
            })
            .collect();
        let n_gt = candidates.iter().filter(|c| c.is_true_nodule).count().max(1);
        let input = FrocInput::new(candidates, 10, n_gt).unwrap();
        let curve = froc(&input);
        let fast = cpm(&curve).unwrap();
        let slow = cpm_oracle(&curve);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        assert!((0.0..=1.0).contains(&fast));
    }
}

#[test]
fn cpm_respects_domination() {
    let base = vec![(0.1, 0.3), (0.5, 0.5), (2.0, 0.8), (8.0, 0.9)];
    let dominating: Vec<(f64, f64)> = base.iter().map(|&(x, y)| (x, y + 0.05)).collect();
    assert!(cpm(&dominating).unwrap() >= cpm(&base).unwrap());
}

#[test]
fn scatter_svg_one_circle_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plot.svg");
    let records: Vec<SampleRecord> = (0..3)
        .map(|i| SampleRecord {
            index: i,
            feature: vec![i as f64, -(i as f64)],
            norm: 1.0,
            label: i,
            prediction: i,
            correct: true,
            prob: 0.9,
        })
        .collect();
    scatter_svg(&records, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.matches("<circle").count(), 3);
    assert!(text.starts_with("<?xml"));
    assert!(text.trim_end().ends_with("</svg>"));
    // palette is stable: class k uses palette[k % 10]
    assert!(text.contains("#1f77b4"));
    assert!(text.contains("#ff7f0e"));
    assert!(text.contains("#2ca02c"));
}

#[test]
fn scatter_svg_rejects_non_2d_features() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![SampleRecord {
        index: 0,
        feature: vec![1.0, 2.0, 3.0],
        norm: 1.0,
        label: 0,
        prediction: 0,
        correct: true,
        prob: 0.5,
    }];
    assert!(matches!(
        scatter_svg(&records, &dir.path().join("x.svg")),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn scatter_svg_degenerate_extent_still_has_canvas() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("point.svg");
    let records = vec![SampleRecord {
        index: 0,
        feature: vec![2.0, 2.0],
        norm: 1.0,
        label: 4,
        prediction: 4,
        correct: true,
        prob: 0.5,
    }];
    scatter_svg(&records, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains(r#"width="640""#));
}

#[test]
fn records_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    let records: Vec<SampleRecord> = (0..5)
        .map(|i| SampleRecord {
            index: i,
            feature: vec![i as f64 * 0.25, 1.0 - i as f64],
            norm: (i as f64 * 0.25f64).hypot(1.0 - i as f64),
            label: i % 3,
            prediction: (i + 1) % 3,
            correct: i % 3 == (i + 1) % 3,
            prob: 1.0 / (i + 1) as f64,
        })
        .collect();
    write_records_csv(&records, &path).unwrap();
    let back = read_records_csv(&path).unwrap();
    assert_eq!(back, records);
}
