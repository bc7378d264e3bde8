//! Slide-level agreement metrics and resampling machinery: accuracy,
//! population-adjusted accuracy, Cohen's kappa, quantitation MAE, ROC/AUC,
//! two-axis bootstrap confidence intervals, the rating-swap permutation
//! test against a rater cohort, and single-rating cohort sampling.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GpPercentages, GradeGroup, PatternCategory};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sequences are empty")]
    EmptyInput,
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("grade group {0} carries weight but never appears in the references")]
    MissingReferenceClass(GradeGroup),
    #[error("population weights must be positive")]
    NonPositiveWeight,
    #[error("labels contain a single class; ROC is undefined")]
    SingleClassLabels,
    #[error("pattern {0:?} has no quantitation percentage")]
    NonTumorPattern(PatternCategory),
    #[error("slide {slide_id} has {ten} subgroup-ten and {nineteen} subgroup-nineteen ratings; the cohort design requires 10 and 3")]
    CohortDesign { slide_id: String, ten: usize, nineteen: usize },
}

/// Which rater pool a rating came from: the subgroup whose members rate
/// every slide, or the one whose members collectively cover each slide
/// three times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaterSubgroup {
    Ten,
    Nineteen,
}

/// One rater's review of one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub rater_id: String,
    pub subgroup: RaterSubgroup,
    pub grade: GradeGroup,
    pub pcts: Option<GpPercentages>,
}

/// Everything known about one slide's reviews.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRatings {
    pub slide_id: String,
    pub reference: GradeGroup,
    pub dls: GradeGroup,
    pub ratings: Vec<Rating>,
    pub reference_pcts: Option<GpPercentages>,
    pub dls_pcts: Option<GpPercentages>,
}

/// Ratings for a slide set. The structure admits arbitrary rater designs;
/// the cohort operations validate the 10-plus-3-per-slide design they need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingTable {
    pub slides: Vec<SlideRatings>,
}

impl RatingTable {
    /// Distinct rater ids of one subgroup, in sorted order.
    pub fn rater_pool(&self, subgroup: RaterSubgroup) -> Vec<String> {
        let mut pool: Vec<String> = self
            .slides
            .iter()
            .flat_map(|s| s.ratings.iter())
            .filter(|r| r.subgroup == subgroup)
            .map(|r| r.rater_id.clone())
            .collect();
        pool.sort();
        pool.dedup();
        pool
    }

    /// Per-rater accuracy against the slide references, keyed by rater id.
    pub fn rater_accuracies(&self) -> BTreeMap<String, f64> {
        let mut correct: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for slide in &self.slides {
            for rating in &slide.ratings {
                let entry = correct.entry(rating.rater_id.clone()).or_insert((0, 0));
                entry.1 += 1;
                if rating.grade == slide.reference {
                    entry.0 += 1;
                }
            }
        }
        correct.into_iter().map(|(id, (c, n))| (id, c as f64 / n as f64)).collect()
    }

    fn validate_cohort_design(&self) -> Result<(), MetricsError> {
        for slide in &self.slides {
            let ten = slide.ratings.iter().filter(|r| r.subgroup == RaterSubgroup::Ten).count();
            let nineteen = slide.ratings.iter().filter(|r| r.subgroup == RaterSubgroup::Nineteen).count();
            if ten != 10 || nineteen != 3 {
                return Err(MetricsError::CohortDesign { slide_id: slide.slide_id.clone(), ten, nineteen });
            }
        }
        Ok(())
    }
}

/// Population grade-group weights for adjusted accuracy, normalized when
/// applied. The default is the published grade-group distribution
/// 7397:8353:3106:1968.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationWeights {
    weights: [f64; 4],
}

impl Default for PopulationWeights {
    fn default() -> Self {
        PopulationWeights { weights: [7397.0, 8353.0, 3106.0, 1968.0] }
    }
}

impl PopulationWeights {
    pub fn new(weights: [f64; 4]) -> Result<Self, MetricsError> {
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(MetricsError::NonPositiveWeight);
        }
        Ok(PopulationWeights { weights })
    }

    pub fn uniform() -> Self {
        PopulationWeights { weights: [1.0; 4] }
    }

    pub fn of(&self, gg: GradeGroup) -> f64 {
        self.weights[gg as usize]
    }
}

/// Exact-match fraction.
pub fn accuracy<T: PartialEq>(predictions: &[T], references: &[T]) -> Result<f64, MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), references.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let matches = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(matches as f64 / predictions.len() as f64)
}

/// Accuracy reweighted to a population grade-group distribution: the
/// weighted mean of per-reference-class recalls. Every weighted class must
/// appear among the references.
pub fn adjusted_accuracy(
    predictions: &[GradeGroup],
    references: &[GradeGroup],
    weights: &PopulationWeights,
) -> Result<f64, MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), references.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for gg in GradeGroup::ALL {
        let w = weights.of(gg);
        if w <= 0.0 {
            continue;
        }
        let mut total = 0usize;
        let mut correct = 0usize;
        for (p, r) in predictions.iter().zip(references) {
            if *r == gg {
                total += 1;
                if p == r {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return Err(MetricsError::MissingReferenceClass(gg));
        }
        numerator += w * correct as f64 / total as f64;
        denominator += w;
    }
    Ok(numerator / denominator)
}

/// Cohen's kappa value plus a flag for the degenerate chance-agreement
/// case (`p_e = 1`), where the statistic is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    pub chance_agreement_degenerate: bool,
}

/// Unweighted Cohen's kappa with expected agreement from the marginal
/// products.
pub fn cohens_kappa<T: Copy + Ord>(a: &[T], b: &[T]) -> Result<Kappa, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marginal_a: BTreeMap<T, f64> = BTreeMap::new();
    let mut marginal_b: BTreeMap<T, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *marginal_a.entry(x).or_insert(0.0) += 1.0;
        *marginal_b.entry(y).or_insert(0.0) += 1.0;
    }
    let expected: f64 = marginal_a
        .iter()
        .map(|(category, count_a)| count_a / n * marginal_b.get(category).copied().unwrap_or(0.0) / n)
        .sum();
    if (1.0 - expected).abs() < 1e-12 {
        return Ok(Kappa { value: 0.0, chance_agreement_degenerate: true });
    }
    Ok(Kappa { value: (observed - expected) / (1.0 - expected), chance_agreement_degenerate: false })
}

/// Mean absolute error of one pattern's quantitation percentage.
pub fn quantitation_mae(
    predicted: &[GpPercentages],
    reference: &[GpPercentages],
    pattern: PatternCategory,
) -> Result<f64, MetricsError> {
    if predicted.len() != reference.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), reference.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut total = 0.0;
    for (p, r) in predicted.iter().zip(reference) {
        let (pp, rp) = match (p.of_pattern(pattern), r.of_pattern(pattern)) {
            (Some(pp), Some(rp)) => (pp, rp),
            _ => return Err(MetricsError::NonTumorPattern(pattern)),
        };
        total += (pp - rp).abs();
    }
    Ok(total / predicted.len() as f64)
}

/// One operating point of a ROC curve; `threshold` is the smallest score
/// still classified positive at that point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over all distinct score thresholds and its trapezoidal area,
/// which equals the pair-counting estimator with ties scored one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<RocPoint>), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClassLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());

    let mut curve = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut k = 0usize;
    while k < order.len() {
        let threshold = scores[order[k]];
        // Consume the whole tie block at this threshold.
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }

    let mut auc = 0.0;
    for pair in curve.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok((auc, curve))
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over an arbitrary replicate statistic: the closure
/// performs its own resampling from the provided generator. Returns the
/// 2.5th and 97.5th percentiles over the replicates; deterministic in the
/// seed.
pub fn bootstrap_percentile_ci(
    replicates: usize,
    seed: u64,
    mut replicate_stat: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..replicates).map(|_| replicate_stat(&mut rng)).collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (percentile(&stats, 0.025), percentile(&stats, 0.975))
}

/// One bootstrap replicate of a rating table: slides are resampled with
/// replacement, and the two rater subgroups are resampled with replacement
/// separately (a rater drawn twice contributes every rating twice).
pub fn resample_rating_table(table: &RatingTable, rng: &mut ChaCha8Rng) -> RatingTable {
    let n = table.slides.len();
    let slide_draws: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();

    let mut rater_counts: BTreeMap<String, usize> = BTreeMap::new();
    for subgroup in [RaterSubgroup::Ten, RaterSubgroup::Nineteen] {
        let pool = table.rater_pool(subgroup);
        for _ in 0..pool.len() {
            let id = &pool[rng.random_range(0..pool.len())];
            *rater_counts.entry(id.clone()).or_insert(0) += 1;
        }
    }

    let slides = slide_draws
        .into_iter()
        .map(|idx| {
            let slide = &table.slides[idx];
            let ratings = slide
                .ratings
                .iter()
                .flat_map(|r| {
                    let count = rater_counts.get(&r.rater_id).copied().unwrap_or(0);
                    std::iter::repeat(r.clone()).take(count)
                })
                .collect();
            SlideRatings { ratings, ..slide.clone() }
        })
        .collect();
    RatingTable { slides }
}

/// Bootstrap CI of a rating-table metric under the two-axis resampling
/// scheme of [`resample_rating_table`].
pub fn bootstrap_ci_table(
    metric: impl Fn(&RatingTable) -> f64,
    table: &RatingTable,
    replicates: usize,
    seed: u64,
) -> (f64, f64) {
    bootstrap_percentile_ci(replicates, seed, |rng| metric(&resample_rating_table(table, rng)))
}

/// Difference between the model's accuracy and the mean of the individual
/// rater accuracies: the permutation test statistic.
fn cohort_statistic(
    references: &[GradeGroup],
    dls: &[GradeGroup],
    ratings: &[Vec<(usize, GradeGroup)>],
    rater_totals: &[usize],
) -> f64 {
    let n = references.len();
    let mut dls_correct = 0usize;
    let mut rater_correct = vec![0usize; rater_totals.len()];
    for i in 0..n {
        if dls[i] == references[i] {
            dls_correct += 1;
        }
        for &(rater, grade) in &ratings[i] {
            if grade == references[i] {
                rater_correct[rater] += 1;
            }
        }
    }
    let dls_accuracy = dls_correct as f64 / n as f64;
    let mean_rater_accuracy = rater_correct
        .iter()
        .zip(rater_totals)
        .map(|(&c, &t)| c as f64 / t as f64)
        .sum::<f64>()
        / rater_totals.len() as f64;
    dls_accuracy - mean_rater_accuracy
}

/// Number of swap choices per slide: the 13 pathologist ratings plus the
/// model's own rating.
const COHORT_SWAP_CHOICES: usize = 14;

/// Permutation test of the model against the rater cohort. The statistic
/// is the model's accuracy minus the mean individual rater accuracy. Each
/// iteration independently swaps, per slide, the model's rating with one of
/// the 14 ratings chosen uniformly (so the model keeps its own with
/// probability 1/14). Two-tailed p with the finite-sample +1 correction:
/// `(1 + #{|T_perm| >= |T_obs|}) / (1 + iterations)`.
pub fn permutation_test_vs_cohort(
    table: &RatingTable,
    iterations: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    table.validate_cohort_design()?;
    if table.slides.is_empty() {
        return Err(MetricsError::EmptyInput);
    }

    // Compact index representation.
    let mut rater_index: BTreeMap<&str, usize> = BTreeMap::new();
    for slide in &table.slides {
        for rating in &slide.ratings {
            let next = rater_index.len();
            rater_index.entry(rating.rater_id.as_str()).or_insert(next);
        }
    }
    let mut rater_totals = vec![0usize; rater_index.len()];
    let references: Vec<GradeGroup> = table.slides.iter().map(|s| s.reference).collect();
    let dls: Vec<GradeGroup> = table.slides.iter().map(|s| s.dls).collect();
    let ratings: Vec<Vec<(usize, GradeGroup)>> = table
        .slides
        .iter()
        .map(|slide| {
            slide
                .ratings
                .iter()
                .map(|r| {
                    let idx = rater_index[r.rater_id.as_str()];
                    rater_totals[idx] += 1;
                    (idx, r.grade)
                })
                .collect()
        })
        .collect();

    let observed = cohort_statistic(&references, &dls, &ratings, &rater_totals).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceedances = 0usize;
    let mut permuted_dls = dls.clone();
    let mut permuted_ratings = ratings.clone();
    for _ in 0..iterations {
        permuted_dls.copy_from_slice(&dls);
        for (slide, original) in permuted_ratings.iter_mut().zip(&ratings) {
            slide.clone_from(original);
        }
        for i in 0..references.len() {
            let choice = rng.random_range(0..COHORT_SWAP_CHOICES);
            if choice < permuted_ratings[i].len() {
                std::mem::swap(&mut permuted_dls[i], &mut permuted_ratings[i][choice].1);
            }
        }
        let stat = cohort_statistic(&references, &permuted_dls, &permuted_ratings, &rater_totals);
        if stat.abs() >= observed {
            exceedances += 1;
        }
    }
    Ok((1 + exceedances) as f64 / (1 + iterations) as f64)
}

/// One sampled rating per slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedRating {
    pub slide_id: String,
    pub rater_id: String,
    pub grade: GradeGroup,
}

/// Sample one rating per slide so each of the 29 raters is represented
/// approximately equally: each subgroup-ten rating is selected with
/// probability 1/29 and each of the three subgroup-nineteen ratings with
/// probability (19/29)/3. Deterministic in the seed.
pub fn cohort29_sample(table: &RatingTable, seed: u64) -> Result<Vec<SelectedRating>, MetricsError> {
    table.validate_cohort_design()?;
    if table.slides.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ten_probability = 1.0 / 29.0;
    let nineteen_probability = (19.0 / 29.0) / 3.0;
    let mut selected = Vec::with_capacity(table.slides.len());
    for slide in &table.slides {
        let ordered: Vec<&Rating> = slide
            .ratings
            .iter()
            .filter(|r| r.subgroup == RaterSubgroup::Ten)
            .chain(slide.ratings.iter().filter(|r| r.subgroup == RaterSubgroup::Nineteen))
            .collect();
        let u = rng.random::<f64>();
        let mut cumulative = 0.0;
        let mut chosen = *ordered.last().expect("13 ratings");
        for (pos, rating) in ordered.iter().enumerate() {
            cumulative += if pos < 10 { ten_probability } else { nineteen_probability };
            if u < cumulative {
                chosen = rating;
                break;
            }
        }
        selected.push(SelectedRating {
            slide_id: slide.slide_id.clone(),
            rater_id: chosen.rater_id.clone(),
            grade: chosen.grade,
        });
    }
    Ok(selected)
}

/// Index of the median value (lower middle for even lengths), used to pick
/// the sampling iteration whose downstream metric is the median.
pub fn median_index(values: &[f64]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    Some(order[(values.len() - 1) / 2])
}
