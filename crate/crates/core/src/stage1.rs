//! Stage-1 patch classification: the classifier contract, the synthetic
//! oracle standing in for a trained network, geometric-mean orientation
//! ensembling, and per-category likelihood calibration.

use thiserror::Error;

use crate::model::{GradeGroup, PatternCategory, SlideRecord};

#[derive(Debug, Error, PartialEq)]
pub enum Stage1Error {
    #[error("cannot ensemble an empty prediction list")]
    EmptyEnsemble,
    #[error("tuning set is empty")]
    EmptyTuningSet,
    #[error("tuning slide {0} has no reference grade group")]
    MissingReferenceGrade(String),
    #[error("noise_eps {0} outside [0, 1]")]
    InvalidNoiseEps(f64),
    #[error("confusion bias row {0} is not a probability vector")]
    InvalidConfusionRow(usize),
    #[error("calibration weights must all be positive")]
    NonPositiveWeight,
}

/// One of the eight dihedral views of a patch: four quarter-turn rotations,
/// each optionally left-right flipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Orientation {
    pub quarter_turns: u8,
    pub flipped: bool,
}

impl Orientation {
    pub const ALL: [Orientation; 8] = [
        Orientation { quarter_turns: 0, flipped: false },
        Orientation { quarter_turns: 1, flipped: false },
        Orientation { quarter_turns: 2, flipped: false },
        Orientation { quarter_turns: 3, flipped: false },
        Orientation { quarter_turns: 0, flipped: true },
        Orientation { quarter_turns: 1, flipped: true },
        Orientation { quarter_turns: 2, flipped: true },
        Orientation { quarter_turns: 3, flipped: true },
    ];
}

/// A stage-1 classifier scores one patch of one slide as a probability
/// vector over (non-tumor, GP3, GP4, GP5). `None` marks a patch without a
/// resolvable label; such patches are excluded downstream.
///
/// Implementations must be deterministic for a fixed seed, and outputs must
/// satisfy the [`crate::model::LikelihoodMap`] vector invariants.
pub trait PatchClassifier: Sync {
    fn classify(&self, slide: &SlideRecord, patch_index: usize, orientation: Orientation) -> Option<[f64; 4]>;
}

/// Configuration of the synthetic oracle classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracleConfig {
    /// Fraction of probability mass moved from the true category into its
    /// confusion-bias row; 0 reproduces the one-hot ground truth.
    pub noise_eps: f64,
    /// Row-stochastic 4x4 matrix; row `c` says where category `c`'s leaked
    /// mass goes.
    pub confusion_bias: [[f64; 4]; 4],
    /// Kept for the classifier contract; the oracle itself is a
    /// deterministic mixture and draws nothing from it.
    pub seed: u64,
}

/// Default confusion bias: mass leaks only to severity-adjacent categories.
/// Interior rows lean toward the nearer Gleason neighbor so misreads stay
/// plausible; endpoint rows have a single neighbor to leak to.
pub fn default_confusion_bias() -> [[f64; 4]; 4] {
    [
        [0.0, 1.0, 0.0, 0.0], // non-tumor -> GP3
        [0.3, 0.0, 0.7, 0.0], // GP3 -> non-tumor / GP4
        [0.0, 0.7, 0.0, 0.3], // GP4 -> GP3 / GP5
        [0.0, 0.0, 1.0, 0.0], // GP5 -> GP4
    ]
}

impl Default for SyntheticOracleConfig {
    fn default() -> Self {
        SyntheticOracleConfig { noise_eps: 0.0, confusion_bias: default_confusion_bias(), seed: 0 }
    }
}

impl SyntheticOracleConfig {
    pub fn with_noise(noise_eps: f64, seed: u64) -> Self {
        SyntheticOracleConfig { noise_eps, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), Stage1Error> {
        if !(0.0..=1.0).contains(&self.noise_eps) {
            return Err(Stage1Error::InvalidNoiseEps(self.noise_eps));
        }
        for (i, row) in self.confusion_bias.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Stage1Error::InvalidConfusionRow(i));
            }
        }
        Ok(())
    }
}

/// Deterministic stand-in for the trained patch classifier: it reads the
/// patch's resolved ground truth and returns the mixture
/// `(1 - eps) * onehot(true) + eps * bias_row(true)`, renormalized.
/// Orientation is ignored because label-derived likelihoods carry no pixel
/// content to rotate.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    cfg: SyntheticOracleConfig,
}

impl SyntheticOracle {
    pub fn new(cfg: SyntheticOracleConfig) -> Result<Self, Stage1Error> {
        cfg.validate()?;
        Ok(SyntheticOracle { cfg })
    }

    pub fn config(&self) -> &SyntheticOracleConfig {
        &self.cfg
    }

    pub fn classify_category(&self, truth: PatternCategory) -> [f64; 4] {
        let eps = self.cfg.noise_eps;
        let row = self.cfg.confusion_bias[truth.code()];
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = eps * row[i];
        }
        out[truth.code()] += 1.0 - eps;
        let sum: f64 = out.iter().sum();
        for x in &mut out {
            *x /= sum;
        }
        out
    }
}

impl PatchClassifier for SyntheticOracle {
    fn classify(&self, slide: &SlideRecord, patch_index: usize, _orientation: Orientation) -> Option<[f64; 4]> {
        slide.ground_truth(patch_index).map(|truth| self.classify_category(truth))
    }
}

/// Likelihoods are clamped to this floor before taking logarithms.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Componentwise geometric mean of probability vectors, renormalized to
/// sum 1. Zero entries are clamped to [`LIKELIHOOD_FLOOR`] first.
pub fn geometric_mean_ensemble(predictions: &[[f64; 4]]) -> Result<[f64; 4], Stage1Error> {
    if predictions.is_empty() {
        return Err(Stage1Error::EmptyEnsemble);
    }
    let n = predictions.len() as f64;
    let mut log_sum = [0.0f64; 4];
    for p in predictions {
        for i in 0..4 {
            log_sum[i] += p[i].max(LIKELIHOOD_FLOOR).ln();
        }
    }
    let mut out = [0.0f64; 4];
    for i in 0..4 {
        out[i] = (log_sum[i] / n).exp();
    }
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

/// Classify a patch under all eight orientations and pool with the
/// geometric mean. `None` when the patch is unresolvable under any view.
pub fn ensemble_orientations(
    classifier: &dyn PatchClassifier,
    slide: &SlideRecord,
    patch_index: usize,
) -> Option<[f64; 4]> {
    let mut predictions = Vec::with_capacity(Orientation::ALL.len());
    for orientation in Orientation::ALL {
        predictions.push(classifier.classify(slide, patch_index, orientation)?);
    }
    Some(geometric_mean_ensemble(&predictions).expect("eight predictions"))
}

/// Per-category multiplicative calibration weights, all positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationWeights {
    w: [f64; 4],
}

impl CalibrationWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, Stage1Error> {
        if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Stage1Error::NonPositiveWeight);
        }
        Ok(CalibrationWeights { w })
    }

    pub fn identity() -> Self {
        CalibrationWeights { w: [1.0; 4] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.w
    }
}

/// Reweight likelihoods: `out_i = w_i * l_i / sum_j w_j * l_j`.
pub fn calibrate(likelihoods: [f64; 4], weights: &CalibrationWeights) -> [f64; 4] {
    let mut out = [0.0f64; 4];
    for i in 0..4 {
        out[i] = weights.w[i] * likelihoods[i];
    }
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// Maps one slide's per-patch calibrated likelihoods (`None` for excluded
/// patches) to a slide-level grade group, or `None` when the slide cannot
/// be graded (e.g. no tumor found).
pub type SlideGrader<'a> = dyn Fn(&SlideRecord, &[Option<[f64; 4]>]) -> Option<GradeGroup> + 'a;

/// Result of the calibration grid search.
#[derive(Debug, Clone)]
pub struct CalibrationFit {
    pub weights: CalibrationWeights,
    /// Cohen's kappa the winning weights achieve on the tuning set.
    pub tuning_kappa: f64,
}

/// Exponent range of the calibration weight lattice: the non-tumor weight
/// is fixed at 1 and each tumor-category weight ranges over
/// `2^k, k in -3..=3`.
pub const CALIBRATION_EXPONENT_RANGE: std::ops::RangeInclusive<i32> = -3..=3;

/// Grid-search calibration weights maximizing the downstream grader's
/// slide-level Cohen's kappa on the tuning set. Ties keep the first lattice
/// point in lexicographic `(w_gp3, w_gp4, w_gp5)` order, so the search is
/// deterministic. Slides the grader cannot grade are skipped for that
/// candidate; a candidate that grades no slides scores negative infinity.
pub fn fit_calibration(
    tuning_slides: &[SlideRecord],
    classifier: &dyn PatchClassifier,
    grader: &SlideGrader<'_>,
) -> Result<CalibrationFit, Stage1Error> {
    if tuning_slides.is_empty() {
        return Err(Stage1Error::EmptyTuningSet);
    }
    let mut references = Vec::with_capacity(tuning_slides.len());
    for slide in tuning_slides {
        references.push(
            slide
                .reference_gg
                .ok_or_else(|| Stage1Error::MissingReferenceGrade(slide.slide_id.clone()))?,
        );
    }

    // Uncalibrated orientation-ensembled likelihoods are shared by every
    // lattice point.
    let raw: Vec<Vec<Option<[f64; 4]>>> = tuning_slides
        .iter()
        .map(|slide| {
            (0..slide.mask.len())
                .map(|idx| ensemble_orientations(classifier, slide, idx))
                .collect()
        })
        .collect();

    let exponents: Vec<f64> = CALIBRATION_EXPONENT_RANGE.map(|k| (k as f64).exp2()).collect();
    let mut best: Option<(f64, CalibrationWeights)> = None;
    let mut calibrated: Vec<Option<[f64; 4]>> = Vec::new();

    for &w3 in &exponents {
        for &w4 in &exponents {
            for &w5 in &exponents {
                let weights = CalibrationWeights::new([1.0, w3, w4, w5]).expect("positive lattice");
                let mut predicted = Vec::with_capacity(tuning_slides.len());
                let mut observed = Vec::with_capacity(tuning_slides.len());
                for (slide_pos, slide) in tuning_slides.iter().enumerate() {
                    calibrated.clear();
                    calibrated.extend(raw[slide_pos].iter().map(|p| p.map(|v| calibrate(v, &weights))));
                    if let Some(gg) = grader(slide, &calibrated) {
                        predicted.push(gg);
                        observed.push(references[slide_pos]);
                    }
                }
                let score = if predicted.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    crate::metrics::cohens_kappa(&predicted, &observed)
                        .expect("aligned non-empty sequences")
                        .value
                };
                if best.as_ref().map_or(true, |(s, _)| score > *s) {
                    best = Some((score, weights));
                }
            }
        }
    }

    let (tuning_kappa, weights) = best.expect("non-empty lattice");
    Ok(CalibrationFit { weights, tuning_kappa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabelMask, PatchGrid, RegionLabel};
    use PatternCategory::*;

    fn slide_of(labels: &[PatternCategory]) -> SlideRecord {
        let mask: LabelMask = PatchGrid::new(
            1,
            labels.len(),
            32.0,
            labels.iter().map(|&c| RegionLabel::Pattern(c)).collect(),
        )
        .unwrap();
        SlideRecord::new("s", mask)
    }

    fn assert_vec_close(a: [f64; 4], b: [f64; 4], tol: f64) {
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() <= tol, "{a:?} vs {b:?} at {i}");
        }
    }

    #[test]
    fn oracle_zero_noise_is_one_hot() {
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default()).unwrap();
        assert_eq!(oracle.classify_category(Gp4), [0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn oracle_pure_noise_returns_bias_row() {
        let cfg = SyntheticOracleConfig {
            noise_eps: 1.0,
            confusion_bias: [[0.25; 4]; 4],
            seed: 0,
        };
        let oracle = SyntheticOracle::new(cfg).unwrap();
        assert_vec_close(oracle.classify_category(Gp3), [0.25; 4], 1e-15);
    }

    #[test]
    fn oracle_mixture_matches_direct_arithmetic() {
        // 0.6 * onehot(GP3) + 0.4 * (0.1, 0.5, 0.3, 0.1)
        let mut bias = default_confusion_bias();
        bias[Gp3.code()] = [0.1, 0.5, 0.3, 0.1];
        let oracle = SyntheticOracle::new(SyntheticOracleConfig {
            noise_eps: 0.4,
            confusion_bias: bias,
            seed: 7,
        })
        .unwrap();
        assert_vec_close(oracle.classify_category(Gp3), [0.04, 0.80, 0.12, 0.04], 1e-12);
    }

    #[test]
    fn oracle_skips_unresolvable_patches() {
        let mask: LabelMask = PatchGrid::new(1, 1, 32.0, vec![RegionLabel::Consult]).unwrap();
        let slide = SlideRecord::new("s", mask);
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default()).unwrap();
        assert_eq!(oracle.classify(&slide, 0, Orientation::default()), None);
    }

    #[test]
    fn oracle_is_reproducible() {
        let cfg = SyntheticOracleConfig::with_noise(0.37, 99);
        let a = SyntheticOracle::new(cfg.clone()).unwrap();
        let b = SyntheticOracle::new(cfg).unwrap();
        let slide = slide_of(&[Gp5, Gp3, NonTumor]);
        for idx in 0..3 {
            assert_eq!(
                a.classify(&slide, idx, Orientation::default()),
                b.classify(&slide, idx, Orientation::default())
            );
        }
    }

    #[test]
    fn geometric_mean_is_idempotent() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let out = geometric_mean_ensemble(&[p, p, p]).unwrap();
        assert_vec_close(out, p, 1e-12);
    }

    #[test]
    fn geometric_mean_of_disjoint_supports_is_uniform() {
        let out = geometric_mean_ensemble(&[[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]]).unwrap();
        assert_vec_close(out, [0.25; 4], 1e-9);
    }

    #[test]
    fn geometric_mean_is_order_invariant() {
        let a = [0.7, 0.1, 0.1, 0.1];
        let b = [0.05, 0.15, 0.35, 0.45];
        let c = [0.25, 0.3, 0.25, 0.2];
        // The product commutes; summation order only perturbs the last ulps.
        let forward = geometric_mean_ensemble(&[a, b, c]).unwrap();
        let shuffled = geometric_mean_ensemble(&[c, a, b]).unwrap();
        assert_vec_close(forward, shuffled, 1e-15);
    }

    #[test]
    fn geometric_mean_rejects_empty_input() {
        assert_eq!(geometric_mean_ensemble(&[]), Err(Stage1Error::EmptyEnsemble));
    }

    #[test]
    fn orientation_ensemble_matches_single_call_for_oracle() {
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::with_noise(0.3, 1)).unwrap();
        let slide = slide_of(&[Gp4]);
        let single = oracle.classify(&slide, 0, Orientation::default()).unwrap();
        let pooled = ensemble_orientations(&oracle, &slide, 0).unwrap();
        assert_vec_close(pooled, single, 1e-12);
    }

    /// Orientation-sensitive classifier for checking the pooling itself.
    struct OrientationProbe;

    impl PatchClassifier for OrientationProbe {
        fn classify(&self, _: &SlideRecord, _: usize, o: Orientation) -> Option<[f64; 4]> {
            let k = o.quarter_turns as f64 + if o.flipped { 4.0 } else { 0.0 };
            let raw = [1.0 + k, 2.0, 3.0, 4.0 + k];
            let sum: f64 = raw.iter().sum();
            Some([raw[0] / sum, raw[1] / sum, raw[2] / sum, raw[3] / sum])
        }
    }

    #[test]
    fn orientation_ensemble_pools_distinct_views() {
        let slide = slide_of(&[Gp3]);
        let probe = OrientationProbe;
        let expected = geometric_mean_ensemble(
            &Orientation::ALL.map(|o| probe.classify(&slide, 0, o).unwrap()),
        )
        .unwrap();
        let got = ensemble_orientations(&probe, &slide, 0).unwrap();
        assert_eq!(got, expected);
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibrate_identity_weights_is_identity() {
        let l = [0.1, 0.2, 0.3, 0.4];
        assert_vec_close(calibrate(l, &CalibrationWeights::identity()), l, 1e-15);
    }

    #[test]
    fn calibrate_matches_direct_arithmetic() {
        let out = calibrate([0.25; 4], &CalibrationWeights::new([1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_vec_close(out, [0.1, 0.2, 0.3, 0.4], 1e-12);
    }

    #[test]
    fn calibrate_is_scale_invariant_in_weights() {
        let l = [0.4, 0.3, 0.2, 0.1];
        let w = CalibrationWeights::new([1.0, 2.0, 0.5, 4.0]).unwrap();
        let scaled = CalibrationWeights::new([3.0, 6.0, 1.5, 12.0]).unwrap();
        assert_vec_close(calibrate(l, &w), calibrate(l, &scaled), 1e-12);
    }

    #[test]
    fn calibrate_preserves_zero_entries() {
        let out = calibrate([0.0, 0.6, 0.4, 0.0], &CalibrationWeights::new([5.0, 0.2, 3.0, 7.0]).unwrap());
        assert_eq!(out[0], 0.0);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn calibration_weights_must_be_positive() {
        assert!(CalibrationWeights::new([1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(CalibrationWeights::new([1.0, -2.0, 1.0, 1.0]).is_err());
    }

    /// Grades by majority resolved-argmax pattern: enough for exercising the
    /// calibration search on single-pattern slides.
    fn toy_grader(_slide: &SlideRecord, patches: &[Option<[f64; 4]>]) -> Option<GradeGroup> {
        let mut counts = [0usize; 4];
        for v in patches.iter().flatten() {
            let mut arg = 0;
            for i in 0..4 {
                if v[i] >= v[arg] {
                    arg = i;
                }
            }
            counts[arg] += 1;
        }
        let tumor: usize = counts[1..].iter().sum();
        if tumor == 0 {
            return None;
        }
        let pattern = (1..4).rev().max_by_key(|&i| counts[i]).unwrap();
        Some(match pattern {
            1 => GradeGroup::Gg1,
            2 => GradeGroup::Gg4_5, // 4+4
            _ => GradeGroup::Gg4_5,
        })
    }

    fn tuning_slide(id: &str, pattern: PatternCategory, gg: GradeGroup) -> SlideRecord {
        let mut slide = slide_of(&[pattern; 6]);
        slide.slide_id = id.into();
        slide.reference_gg = Some(gg);
        slide
    }

    #[test]
    fn fit_calibration_perfect_classifier_reaches_kappa_one() {
        let slides = vec![
            tuning_slide("a", Gp3, GradeGroup::Gg1),
            tuning_slide("b", Gp4, GradeGroup::Gg4_5),
            tuning_slide("c", Gp3, GradeGroup::Gg1),
            tuning_slide("d", Gp4, GradeGroup::Gg4_5),
        ];
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default()).unwrap();
        let fit = fit_calibration(&slides, &oracle, &toy_grader).unwrap();
        assert_eq!(fit.tuning_kappa, 1.0);
        // Identity weights are among the maximizers: evaluating the
        // objective at identity also yields kappa 1 for one-hot inputs.
        let weights = fit.weights.as_array();
        for w in weights {
            assert!(w > 0.0);
        }
    }

    #[test]
    fn fit_calibration_single_slide_is_defined() {
        let slides = vec![tuning_slide("only", Gp3, GradeGroup::Gg1)];
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default()).unwrap();
        let fit = fit_calibration(&slides, &oracle, &toy_grader).unwrap();
        assert!(fit.weights.as_array().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn fit_calibration_is_order_invariant() {
        let mut slides = vec![
            tuning_slide("a", Gp3, GradeGroup::Gg1),
            tuning_slide("b", Gp4, GradeGroup::Gg4_5),
            tuning_slide("c", Gp3, GradeGroup::Gg1),
        ];
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default()).unwrap();
        let fit1 = fit_calibration(&slides, &oracle, &toy_grader).unwrap();
        slides.swap(0, 2);
        let fit2 = fit_calibration(&slides, &oracle, &toy_grader).unwrap();
        assert_eq!(fit1.weights, fit2.weights);
        assert_eq!(fit1.tuning_kappa, fit2.tuning_kappa);
    }

    #[test]
    fn fit_calibration_rejects_empty_or_unreferenced_input() {
        let oracle = SyntheticOracle::new(SyntheticOracleConfig::default()).unwrap();
        assert_eq!(
            fit_calibration(&[], &oracle, &toy_grader).unwrap_err(),
            Stage1Error::EmptyTuningSet
        );
        let slide = slide_of(&[Gp3]);
        assert!(matches!(
            fit_calibration(&[slide], &oracle, &toy_grader),
            Err(Stage1Error::MissingReferenceGrade(_))
        ));
    }
}
