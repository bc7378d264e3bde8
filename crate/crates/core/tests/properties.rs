//! Property tests for the spec-level invariants that hold across modules.

use proptest::prelude::*;

use gleason_core::finegrained::{quantitative_gp_smooth, quantitative_gp_verbatim};
use gleason_core::metrics::{accuracy, adjusted_accuracy, cohens_kappa, roc_auc, PopulationWeights};
use gleason_core::model::{
    derive_gleason_score, grade_group_from_score, resolve_region_label, GpPercentages, GradeGroup,
    LikelihoodMap, PatchGrid, PatternCategory, RegionLabel, ResolutionPolicy,
};
use gleason_core::sampler::WeightedIndex;
use gleason_core::stage1::{calibrate, geometric_mean_ensemble, CalibrationWeights};
use gleason_core::stage2::{argmax_category, extract_features};
use gleason_core::survival::{kaplan_meier, SurvivalDataset};

fn probability_vector() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.0f64..1.0)
        .prop_filter("not all zero", |v| v.iter().sum::<f64>() > 1e-9)
        .prop_map(|v| {
            let sum: f64 = v.iter().sum();
            [v[0] / sum, v[1] / sum, v[2] / sum, v[3] / sum]
        })
}

fn region_label() -> impl Strategy<Value = RegionLabel> {
    prop_oneof![
        prop::sample::select(vec![
            RegionLabel::Pattern(PatternCategory::NonTumor),
            RegionLabel::Pattern(PatternCategory::Gp3),
            RegionLabel::Pattern(PatternCategory::Gp4),
            RegionLabel::Pattern(PatternCategory::Gp5),
            RegionLabel::Artifact,
            RegionLabel::Consult,
            RegionLabel::NonGradableTumor,
            RegionLabel::Unlabeled,
        ]),
        prop::sample::select(vec![
            RegionLabel::mixed(PatternCategory::Gp3, PatternCategory::Gp4).unwrap(),
            RegionLabel::mixed(PatternCategory::Gp4, PatternCategory::Gp3).unwrap(),
            RegionLabel::mixed(PatternCategory::Gp4, PatternCategory::Gp5).unwrap(),
            RegionLabel::mixed(PatternCategory::Gp5, PatternCategory::Gp4).unwrap(),
        ]),
    ]
}

proptest! {
    #[test]
    fn training_resolution_is_permutation_invariant(
        labels in prop::collection::vec(region_label(), 1..12),
        seed in 0u64..1000,
    ) {
        let resolved = resolve_region_label(&labels, ResolutionPolicy::Training).unwrap();
        let mut shuffled = labels.clone();
        // Deterministic shuffle driven by the seed.
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        prop_assert_eq!(resolve_region_label(&shuffled, ResolutionPolicy::Training).unwrap(), resolved);
    }

    #[test]
    fn grading_is_total_on_positive_percentage_triples(
        raw in prop::array::uniform3(0.0f64..100.0),
    ) {
        let sum: f64 = raw.iter().sum();
        prop_assume!(sum > 0.0);
        let scale = if sum > 100.0 { 100.0 / sum } else { 1.0 };
        let pcts = GpPercentages::new(raw[0] * scale, raw[1] * scale, raw[2] * scale).unwrap();
        let score = derive_gleason_score(pcts).unwrap();
        let _ = grade_group_from_score(score);
    }

    #[test]
    fn derive_score_is_scale_invariant_for_unique_orderings(
        raw in prop::array::uniform3(0.1f64..100.0),
        scale in 0.05f64..1.0,
    ) {
        // Require unique maximum and unique second value.
        let mut sorted = raw;
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sorted[0] > sorted[1] * 1.001 && sorted[1] > sorted[2] * 1.001);
        let total: f64 = raw.iter().sum();
        let base = 100.0 / total.max(100.0);
        let full = derive_gleason_score(
            GpPercentages::new(raw[0] * base, raw[1] * base, raw[2] * base).unwrap(),
        )
        .unwrap();
        let shrunk = derive_gleason_score(
            GpPercentages::new(raw[0] * base * scale, raw[1] * base * scale, raw[2] * base * scale).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(full.primary(), shrunk.primary());
        prop_assert_eq!(full.secondary(), shrunk.secondary());
    }

    #[test]
    fn calibration_preserves_zeros_and_identity_argmax(
        likelihoods in probability_vector(),
        weights in prop::array::uniform4(0.01f64..100.0),
    ) {
        let calibrated = calibrate(likelihoods, &CalibrationWeights::new(weights).unwrap());
        for i in 0..4 {
            if likelihoods[i] == 0.0 {
                prop_assert_eq!(calibrated[i], 0.0);
            }
        }
        let identity = calibrate(likelihoods, &CalibrationWeights::identity());
        prop_assert_eq!(argmax_category(&identity), argmax_category(&likelihoods));
    }

    #[test]
    fn geometric_mean_lies_within_componentwise_envelope(
        predictions in prop::collection::vec(probability_vector(), 1..8),
    ) {
        // Before renormalization the geometric mean is bounded by the
        // componentwise min and max; verify on the unnormalized mean.
        let n = predictions.len() as f64;
        for i in 0..4 {
            let logs: Vec<f64> = predictions.iter().map(|p| p[i].max(1e-12).ln()).collect();
            let mean = (logs.iter().sum::<f64>() / n).exp();
            let lo = predictions.iter().map(|p| p[i].max(1e-12)).fold(f64::INFINITY, f64::min);
            let hi = predictions.iter().map(|p| p[i].max(1e-12)).fold(0.0f64, f64::max);
            prop_assert!(mean >= lo * (1.0 - 1e-9) && mean <= hi * (1.0 + 1e-9));
        }
        // And the normalized output is a probability vector.
        let out = geometric_mean_ensemble(&predictions).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extracted_features_satisfy_the_sum_invariant(
        vectors in prop::collection::vec(probability_vector(), 1..60),
    ) {
        let n = vectors.len();
        let grid = PatchGrid::new(1, n, 32.0, vectors).unwrap();
        let mask = PatchGrid::new(1, n, 32.0, vec![true; n]).unwrap();
        let features = extract_features(&LikelihoodMap::new(grid).unwrap(), &mask).unwrap();
        if features.pct_tumor > 0.0 {
            let sum = features.pct_gp3 + features.pct_gp4 + features.pct_gp5;
            prop_assert!((sum - 100.0).abs() < 1e-6, "sum {sum}");
        } else {
            prop_assert_eq!(features.as_array(), [0.0; 4]);
        }
    }

    #[test]
    fn smooth_qgp_stays_in_range_and_verbatim_in_extended_range(
        likelihoods in probability_vector(),
    ) {
        prop_assume!(likelihoods[1] + likelihoods[2] + likelihoods[3] > 0.0);
        let smooth = quantitative_gp_smooth(&likelihoods).unwrap();
        prop_assert!((3.0..=5.0).contains(&smooth), "smooth {smooth}");
        let verbatim = quantitative_gp_verbatim(&likelihoods).unwrap();
        prop_assert!((3.0..=6.0).contains(&verbatim), "verbatim {verbatim}");
    }

    #[test]
    fn agreement_metrics_are_permutation_invariant(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 2..40),
        seed in 0u64..1000,
    ) {
        let grades = |i: usize| GradeGroup::ALL[i];
        let predictions: Vec<GradeGroup> = pairs.iter().map(|&(p, _)| grades(p)).collect();
        let references: Vec<GradeGroup> = pairs.iter().map(|&(_, r)| grades(r)).collect();
        let mut permuted = pairs.clone();
        let mut state = seed;
        for i in (1..permuted.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            permuted.swap(i, j);
        }
        let permuted_predictions: Vec<GradeGroup> = permuted.iter().map(|&(p, _)| grades(p)).collect();
        let permuted_references: Vec<GradeGroup> = permuted.iter().map(|&(_, r)| grades(r)).collect();

        let base = accuracy(&predictions, &references).unwrap();
        prop_assert!((accuracy(&permuted_predictions, &permuted_references).unwrap() - base).abs() < 1e-12);

        let kappa = cohens_kappa(&predictions, &references).unwrap().value;
        let kappa_permuted = cohens_kappa(&permuted_predictions, &permuted_references).unwrap().value;
        prop_assert!((kappa - kappa_permuted).abs() < 1e-12);
    }

    #[test]
    fn adjusted_accuracy_with_empirical_weights_is_accuracy(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 8..60),
    ) {
        let predictions: Vec<GradeGroup> = pairs.iter().map(|&(p, _)| GradeGroup::ALL[p]).collect();
        let references: Vec<GradeGroup> = pairs.iter().map(|&(_, r)| GradeGroup::ALL[r]).collect();
        let mut counts = [0.0f64; 4];
        for &r in &references {
            counts[r as usize] += 1.0;
        }
        prop_assume!(counts.iter().all(|&c| c > 0.0));
        let empirical = PopulationWeights::new(counts).unwrap();
        let adjusted = adjusted_accuracy(&predictions, &references, &empirical).unwrap();
        let plain = accuracy(&predictions, &references).unwrap();
        prop_assert!((adjusted - plain).abs() < 1e-12);
    }

    #[test]
    fn auc_of_negated_scores_is_complement(
        entries in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 4..80),
    ) {
        let scores: Vec<f64> = entries.iter().map(|&(s, _)| s).collect();
        let mut labels: Vec<bool> = entries.iter().map(|&(_, l)| l).collect();
        labels[0] = true;
        labels[1] = false;
        // Continuous draws: score ties have probability zero.
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let (auc, _) = roc_auc(&scores, &labels).unwrap();
        let (complement, _) = roc_auc(&negated, &labels).unwrap();
        prop_assert!((auc + complement - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kaplan_meier_is_a_survival_curve(
        subjects in prop::collection::vec((1.0f64..60.0, prop::bool::ANY), 1..50),
    ) {
        let times: Vec<f64> = subjects.iter().map(|&(t, _)| t).collect();
        let events: Vec<bool> = subjects.iter().map(|&(_, e)| e).collect();
        let n = times.len();
        let data = SurvivalDataset::univariate(times, events, (0..n).map(|i| i as f64).collect()).unwrap();
        let curve = kaplan_meier(&data);
        let mut last = 1.0;
        for point in &curve {
            prop_assert!(point.survival <= last + 1e-12);
            prop_assert!((0.0..=1.0).contains(&point.survival));
            last = point.survival;
        }
    }

    #[test]
    fn weighted_index_total_tracks_updates(
        weights in prop::collection::vec(0.0f64..10.0, 1..64),
        updates in prop::collection::vec((0usize..64, 0.0f64..10.0), 0..32),
    ) {
        let mut index = WeightedIndex::new(&weights).unwrap();
        let mut shadow = weights.clone();
        for (slot, w) in updates {
            let slot = slot % shadow.len();
            index.set(slot, w).unwrap();
            shadow[slot] = w;
        }
        let expected: f64 = shadow.iter().sum();
        prop_assert!((index.total() - expected).abs() < 1e-9);
        for (slot, &w) in shadow.iter().enumerate() {
            prop_assert_eq!(index.weight(slot), Some(w));
        }
    }
}

/// Spec invariant: the weighted index's empirical distribution matches its
/// weights, checked by a chi-square goodness-of-fit test at significance
/// 0.001 on randomized weight vectors.
#[test]
fn weighted_index_chi_square_goodness_of_fit() {
    use rand::Rng;
    use rand::SeedableRng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(97);
    for &len in &[4usize, 37, 256, 1024] {
        // Mix of magnitudes plus a few zero slots.
        let weights: Vec<f64> = (0..len)
            .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random::<f64>() * 5.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        let index = WeightedIndex::new(&weights).unwrap();
        let draws = 1_000_000usize;
        let mut observed = vec![0usize; len];
        for _ in 0..draws {
            observed[index.sample(rng.random::<f64>()).unwrap()] += 1;
        }
        // Pool slots with tiny expectation into one bucket so the chi-square
        // approximation is sound.
        let mut stat = 0.0;
        let mut pooled_expected = 0.0;
        let mut pooled_observed = 0.0;
        let mut buckets = 0usize;
        for (slot, &w) in weights.iter().enumerate() {
            let expected = draws as f64 * w / total;
            if w == 0.0 {
                assert_eq!(observed[slot], 0, "zero-weight slot {slot} was sampled");
                continue;
            }
            if expected < 8.0 {
                pooled_expected += expected;
                pooled_observed += observed[slot] as f64;
                continue;
            }
            stat += (observed[slot] as f64 - expected).powi(2) / expected;
            buckets += 1;
        }
        if pooled_expected > 0.0 {
            stat += (pooled_observed - pooled_expected).powi(2) / pooled_expected;
            buckets += 1;
        }
        let dof = (buckets - 1).max(1) as f64;
        let critical = ChiSquared::new(dof).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "len {len}: chi-square {stat:.1} >= {critical:.1} (dof {dof})");
    }
}
