use std::sync::Arc;

use memlab::dataset::{self, TrainingSet};
use memlab::emm::{estimate_emm, Censoring, MemCurve};
use memlab::kernel_score::KernelScoreModel;
use memlab::memorization::{memorization_ratio, nn2};
use memlab::model::ScoreModel;
use memlab::schedule::NoiseSchedule;
use proptest::prelude::*;

fn rows(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    n.prop_flat_map(move |n| prop::collection::vec(-5.0f64..5.0, n * dim))
}

/// Sorts every distance and reads off the two smallest.
fn full_sort_oracle(q: &[f64], set: &TrainingSet) -> (usize, f64, f64) {
    let mut d: Vec<(f64, usize)> = set
        .rows()
        .enumerate()
        .map(|(i, x)| (x.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (d[0].1, d[0].0, d[1].0)
}

fn non_increasing_curve() -> impl Strategy<Value = Vec<(u64, f64)>> {
    (2usize..8).prop_flat_map(|n| {
        (
            prop::collection::btree_set(1u64..100_000, n),
            prop::collection::vec(0.0f64..1.0, n),
        )
            .prop_map(|(sizes, mut ratios)| {
                ratios.sort_by(|a, b| b.partial_cmp(a).unwrap());
                sizes.into_iter().zip(ratios).collect()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn nn2_matches_full_sort(data in rows(2..40, 3), queries in rows(1..20, 3)) {
        let set = TrainingSet::unlabeled(data, 3).unwrap();
        let got = nn2(&queries, &set).unwrap();
        for (q, nn) in queries.chunks(3).zip(&got) {
            let (_, d1, d2) = full_sort_oracle(q, &set);
            prop_assert!((nn.nn1_dist - d1).abs() < 1e-12);
            prop_assert!((nn.nn2_dist - d2).abs() < 1e-12);
            let at_index = set.row(nn.nn1_index).iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!((at_index - d1).abs() < 1e-12);
        }
    }

    #[test]
    fn criterion_is_scale_equivariant(data in rows(2..30, 2), queries in rows(1..30, 2), c in 0.01f64..100.0) {
        // Powers of two scale exactly in floating point; other factors are
        // checked away from the decision boundary.
        let set = TrainingSet::unlabeled(data.clone(), 2).unwrap();
        let base = memorization_ratio(&queries, &set, 1.0 / 3.0).unwrap();
        for k in [c, 4.0, 0.125] {
            let scaled = TrainingSet::unlabeled(data.iter().map(|v| v * k).collect(), 2).unwrap();
            let q: Vec<f64> = queries.iter().map(|v| v * k).collect();
            let r = memorization_ratio(&q, &scaled, 1.0 / 3.0).unwrap();
            for ((a, b), nn) in base.memorized.iter().zip(&r.memorized).zip(&base.neighbors) {
                let margin = (nn.nn1_dist - nn.nn2_dist / 3.0).abs() / nn.nn2_dist.max(1e-300);
                if k == 4.0 || k == 0.125 || margin > 1e-9 {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn memorized_set_grows_with_tau(data in rows(2..30, 2), queries in rows(1..30, 2), t1 in 0.01f64..1.0, dt in 0.0f64..1.0) {
        let set = TrainingSet::unlabeled(data, 2).unwrap();
        let lo = memorization_ratio(&queries, &set, t1).unwrap();
        let hi = memorization_ratio(&queries, &set, t1 + dt).unwrap();
        for (a, b) in lo.memorized.iter().zip(&hi.memorized) {
            prop_assert!(!a || *b);
        }
    }

    #[test]
    fn exact_copies_are_all_memorized(data in rows(2..30, 2)) {
        let set = TrainingSet::unlabeled(data, 2).unwrap();
        let r = memorization_ratio(set.data(), &set, 1.0 / 3.0).unwrap();
        if r.neighbors.iter().all(|nn| nn.nn2_dist > 0.0) {
            prop_assert_eq!(r.ratio, 1.0);
        }
    }

    #[test]
    fn emm_is_monotone_in_epsilon(points in non_increasing_curve(), e1 in 0.001f64..0.999, de in 0.0f64..0.5) {
        let curve = MemCurve::new(points).unwrap();
        let e2 = (e1 + de).min(0.999);
        let a = estimate_emm(&curve, e1).unwrap();
        let b = estimate_emm(&curve, e2).unwrap();
        prop_assert!(b.value >= a.value - 1e-9 * a.value.abs().max(1.0), "{} then {}", a.value, b.value);
    }

    #[test]
    fn emm_ignores_points_outside_the_bracket(
        r1 in 0.6f64..1.0,
        r2 in 0.0f64..0.5,
        extra_hi in 0.0f64..1.0,
        extra_lo in 0.0f64..1.0,
    ) {
        let base = MemCurve::new(vec![(1000, r1), (2000, r2)]).unwrap();
        let level = 0.55;
        let eps = 1.0 - level;
        let e = estimate_emm(&base, eps).unwrap();
        prop_assert_eq!(e.censoring, Censoring::ExactInterpolated);
        // Points consistent with a non-increasing curve on either side.
        let head = (500, r1 + extra_hi * (1.0 - r1));
        let tail = (4000, r2 * extra_lo);
        let wider = MemCurve::new(vec![head, (1000, r1), (2000, r2), tail]).unwrap();
        let w = estimate_emm(&wider, eps).unwrap();
        prop_assert!((w.value - e.value).abs() < 1e-9);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact(
        data in rows(1..30, 3),
        labelled in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n = data.len() / 3;
        let f32_data: Vec<f64> = data.iter().map(|&v| f64::from(v as f32)).collect();
        let labels = labelled.then(|| (0..n as u32).map(|i| i % 4).collect::<Vec<_>>());
        let ts = TrainingSet::new(f32_data, 3, labels, labelled.then_some(4)).unwrap().with_seed(seed);
        let back = dataset::decode(&dataset::encode(&ts)).unwrap();
        prop_assert_eq!(back.dim(), ts.dim());
        prop_assert_eq!(back.labels(), ts.labels());
        for (a, b) in back.data().iter().zip(ts.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stabilized_kernel_matches_naive(
        data in rows(2..6, 2),
        z in prop::collection::vec(-3.0f64..3.0, 2),
        t in 0.5f64..10.0,
    ) {
        let schedule = NoiseSchedule::edm();
        let set = Arc::new(TrainingSet::unlabeled(data, 2).unwrap());
        let model = KernelScoreModel::new(set.clone(), schedule).unwrap();
        let (alpha, sigma) = (schedule.alpha(t).unwrap(), schedule.sigma(t).unwrap());
        let mut num = [0.0; 2];
        let mut den = 0.0;
        for x in set.rows() {
            let diff = [alpha * x[0] - z[0], alpha * x[1] - z[1]];
            let w = (-(diff[0] * diff[0] + diff[1] * diff[1]) / (2.0 * sigma * sigma)).exp();
            prop_assume!(w > 1e-200);
            den += w;
            num[0] += w * diff[0] / (sigma * sigma);
            num[1] += w * diff[1] / (sigma * sigma);
        }
        let s = model.score(&z, t, None).unwrap();
        for k in 0..2 {
            let want = num[k] / den;
            prop_assert!((s[k] - want).abs() <= 1e-8 * want.abs().max(1e-3), "{} vs {}", s[k], want);
        }
    }

    #[test]
    fn denoiser_stays_in_the_convex_hull(
        data in rows(2..12, 2),
        z in prop::collection::vec(-50.0f64..50.0, 2),
        t in 1e-3f64..80.0,
    ) {
        let set = Arc::new(TrainingSet::unlabeled(data, 2).unwrap());
        let model = KernelScoreModel::new(set.clone(), NoiseSchedule::edm()).unwrap();
        let w = model.weights(&z, t, None).unwrap();
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.weights.iter().all(|&v| v >= 0.0));
        // Every supporting line of the hull bounds the denoiser.
        let d = model.denoise(&z, t, None).unwrap();
        for k in 0..2 {
            let lo = set.rows().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            let hi = set.rows().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-9 * (hi - lo).abs().max(1.0);
            prop_assert!(d[k] >= lo - slack && d[k] <= hi + slack);
        }
    }

    #[test]
    fn unique_label_denoiser_returns_its_point(
        data in rows(2..10, 2),
        z in prop::collection::vec(-50.0f64..50.0, 2),
        t in 1e-3f64..80.0,
    ) {
        let n = data.len() / 2;
        let set = TrainingSet::new(data, 2, Some((0..n as u32).collect()), Some(n as u32)).unwrap();
        let set = Arc::new(set);
        let model = KernelScoreModel::conditional(set.clone(), NoiseSchedule::edm()).unwrap();
        for c in 0..n as u32 {
            let d = model.denoise(&z, t, Some(c)).unwrap();
            let x = set.row(c as usize);
            for k in 0..2 {
                prop_assert!((d[k] - x[k]).abs() <= 1e-9 * x[k].abs().max(1.0), "{d:?} vs {x:?}");
            }
        }
    }
}
