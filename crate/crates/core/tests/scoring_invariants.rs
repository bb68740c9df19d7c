use cssr::backbone::FeatureMap;
use cssr::scoring::{
    calibrate_scores, collect_class_stats, decide, fit_threshold, fused_score, gram_matrix, normalized_scores,
    score_gram, Decision, RawScores,
};
use proptest::prelude::*;

fn map_strategy(d: usize) -> impl Strategy<Value = FeatureMap> {
    (1usize..4, 1usize..4).prop_flat_map(move |(h, w)| {
        prop::collection::vec(-2.0f64..2.0, h * w * d).prop_map(move |v| FeatureMap::new(h, w, d, v).unwrap())
    })
}

fn outer_sum(map: &FeatureMap) -> Vec<f64> {
    let d = map.channels;
    let mut g = vec![0.0; d * d];
    for z in map.pixels() {
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] += z[i].abs() * z[j].abs();
            }
        }
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_power_one_is_sum_of_outer_products(map in map_strategy(3)) {
        let g = gram_matrix(&map, 1).unwrap();
        for (a, b) in g.iter().zip(outer_sum(&map)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn gram_score_decomposes_over_pixels(
        train in prop::collection::vec(map_strategy(3), 2..6),
        probe in map_strategy(3),
    ) {
        let samples: Vec<(FeatureMap, usize)> = train.into_iter().map(|m| (m, 0)).collect();
        let stats = collect_class_stats(&samples, 2, 1).unwrap();
        let s3 = score_gram(&probe, 0, &stats).unwrap();
        let t = &stats.gram_templates[0];
        let per_pixel: f64 = probe
            .pixels()
            .map(|z| {
                let single = FeatureMap::from_vector(z).unwrap();
                outer_sum(&single).iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        prop_assert!((s3 - per_pixel).abs() <= 1e-6 * (1.0 + per_pixel.abs()));
    }

    #[test]
    fn gram_is_symmetric(map in map_strategy(4), p in 1u32..9) {
        let g = gram_matrix(&map, p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(g[i * 4 + j], g[j * 4 + i]);
            }
        }
    }

    #[test]
    fn mu_tilde_rows_normalize(
        maps in prop::collection::vec(map_strategy(5), 3..12),
    ) {
        // every class receives samples; empty classes get a uniform fallback row
        let maps: Vec<(FeatureMap, usize)> = maps.into_iter().enumerate().map(|(i, m)| (m, i % 3)).collect();
        let stats = collect_class_stats(&maps, 3, 2).unwrap();
        for c in 0..5 {
            let column: f64 = (0..3).map(|k| stats.mu_tilde[k][c]).sum();
            let silent = (0..3).all(|k| stats.mu[k][c] == 0.0);
            if !silent {
                prop_assert!((column - 1.0).abs() <= 1e-9, "feature {} sums to {}", c, column);
            }
        }
    }

    #[test]
    fn threshold_hits_target_rate(scores in prop::collection::vec(-100.0f64..100.0, 1..300), tpr in 0.5f64..1.0) {
        let t = fit_threshold(&scores, tpr).unwrap();
        let n = scores.len() as f64;
        let accepted = scores.iter().filter(|&&s| s >= t).count() as f64;
        prop_assert!(accepted / n >= tpr - 1e-12);
        // any larger threshold drops below the target
        let next = scores.iter().copied().filter(|&s| s > t).fold(f64::INFINITY, f64::min);
        if next.is_finite() {
            let above = scores.iter().filter(|&&s| s >= next).count() as f64;
            prop_assert!(above / n < tpr);
        }
    }

    #[test]
    fn primary_only_fusion_is_the_normalized_primary(
        raws in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 3..40),
    ) {
        let raws: Vec<RawScores> = raws
            .into_iter()
            .map(|(a, b, c)| RawScores { primary: a, first_order: b, gram: c })
            .collect();
        let maps = vec![(FeatureMap::from_vector(&[1.0, 2.0]).unwrap(), 0), (FeatureMap::from_vector(&[2.0, 1.0]).unwrap(), 1)];
        let mut stats = collect_class_stats(&maps, 2, 1).unwrap();
        stats.weights = [1.0, 0.0, 0.0];
        if calibrate_scores(&mut stats, &raws).is_err() {
            return Ok(());
        }
        let fused: Vec<f64> = raws.iter().map(|r| fused_score(r, &stats).unwrap()).collect();
        let t = fit_threshold(&fused, 0.95).unwrap();
        for (r, f) in raws.iter().zip(&fused) {
            let s1 = normalized_scores(r, &stats).unwrap()[0];
            prop_assert_eq!(*f, s1);
            prop_assert_eq!(decide(1, *f, t), if s1 >= t { Decision::Known(1) } else { Decision::Unknown });
        }
    }
}
