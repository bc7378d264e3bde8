//! Stage-2 slide grading: summarize a calibrated heatmap into the four
//! slide-level features, rescale them against the training range, and
//! classify the grade group with a k-nearest-neighbor model (plus binary
//! threshold scores for the ROC analyses).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GradeGroup, LikelihoodMap, PatchGrid, PatternCategory, SlideRecord};
use crate::stage1::{calibrate, ensemble_orientations, CalibrationWeights, PatchClassifier};

#[derive(Debug, Error, PartialEq)]
pub enum Stage2Error {
    #[error("heatmap and tissue mask shapes differ")]
    GridMismatch,
    #[error("slide has no tissue patches")]
    NoTissue,
    #[error("no training features provided")]
    EmptyTrainingSet,
    #[error("k must be between 1 and the number of training points, got k={k} with {n} points")]
    InvalidK { k: usize, n: usize },
}

/// The four slide-level features: tumor involvement over tissue and each
/// pattern's share of the tumor. Pattern percentages sum to 100 whenever
/// tumor is present; an all-benign slide is all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub pct_tumor: f64,
    pub pct_gp3: f64,
    pub pct_gp4: f64,
    pub pct_gp5: f64,
}

impl FeatureVector {
    pub fn zero() -> Self {
        FeatureVector { pct_tumor: 0.0, pct_gp3: 0.0, pct_gp4: 0.0, pct_gp5: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pct_tumor, self.pct_gp3, self.pct_gp4, self.pct_gp5]
    }
}

/// Predicted category of one likelihood vector; ties go to the more severe
/// category.
pub fn argmax_category(likelihoods: &[f64; 4]) -> PatternCategory {
    let mut best = PatternCategory::NonTumor;
    let mut best_value = f64::NEG_INFINITY;
    for category in PatternCategory::ALL {
        let v = likelihoods[category.code()];
        if v >= best_value {
            best_value = v;
            best = category;
        }
    }
    best
}

/// Features from per-category patch counts over `tissue` patches.
pub fn features_from_counts(counts: [usize; 4], tissue: usize) -> Result<FeatureVector, Stage2Error> {
    if tissue == 0 {
        return Err(Stage2Error::NoTissue);
    }
    let tumor = counts[1] + counts[2] + counts[3];
    if tumor == 0 {
        return Ok(FeatureVector::zero());
    }
    Ok(FeatureVector {
        pct_tumor: 100.0 * tumor as f64 / tissue as f64,
        pct_gp3: 100.0 * counts[1] as f64 / tumor as f64,
        pct_gp4: 100.0 * counts[2] as f64 / tumor as f64,
        pct_gp5: 100.0 * counts[3] as f64 / tumor as f64,
    })
}

/// Summarize a calibrated heatmap over the tissue patches: each patch
/// contributes its argmax category.
pub fn extract_features(
    calibrated: &LikelihoodMap,
    tissue_mask: &PatchGrid<bool>,
) -> Result<FeatureVector, Stage2Error> {
    if !calibrated.grid().same_shape(tissue_mask) {
        return Err(Stage2Error::GridMismatch);
    }
    let mut counts = [0usize; 4];
    let mut tissue = 0usize;
    for (likelihoods, &is_tissue) in calibrated.grid().values().iter().zip(tissue_mask.values()) {
        if is_tissue {
            tissue += 1;
            counts[argmax_category(likelihoods).code()] += 1;
        }
    }
    features_from_counts(counts, tissue)
}

/// Per-feature min/max learned on training features; applying it maps the
/// training range onto [0, 1], clamps values outside it, and sends a
/// degenerate (max = min) feature to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRescaler {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl FeatureRescaler {
    pub fn fit(training: &[FeatureVector]) -> Result<Self, Stage2Error> {
        if training.is_empty() {
            return Err(Stage2Error::EmptyTrainingSet);
        }
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for f in training {
            let x = f.as_array();
            for i in 0..4 {
                min[i] = min[i].min(x[i]);
                max[i] = max[i].max(x[i]);
            }
        }
        Ok(FeatureRescaler { min, max })
    }

    pub fn apply(&self, features: &FeatureVector) -> [f64; 4] {
        let x = features.as_array();
        let mut out = [0.0f64; 4];
        for i in 0..4 {
            let span = self.max[i] - self.min[i];
            out[i] = if span > 0.0 {
                ((x[i] - self.min[i]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        out
    }
}

/// Indices of the k nearest points under squared Euclidean distance, with
/// distance ties broken by insertion order.
fn k_nearest<'a>(points: impl Iterator<Item = &'a [f64; 4]>, query: &[f64; 4], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = points
        .enumerate()
        .map(|(i, p)| {
            let d2: f64 = (0..4).map(|j| (p[j] - query[j]) * (p[j] - query[j])).sum();
            (d2, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Paper-selected neighbor count.
pub const DEFAULT_K: usize = 24;

/// Four-way grade-group kNN over rescaled feature vectors with uniform
/// neighbor weighting. Label-vote ties go to the more severe group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    points: Vec<([f64; 4], GradeGroup)>,
    k: usize,
}

impl KnnModel {
    pub fn fit(points: Vec<([f64; 4], GradeGroup)>, k: usize) -> Result<Self, Stage2Error> {
        if points.is_empty() {
            return Err(Stage2Error::EmptyTrainingSet);
        }
        if k == 0 || k > points.len() {
            return Err(Stage2Error::InvalidK { k, n: points.len() });
        }
        Ok(KnnModel { points, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> &[([f64; 4], GradeGroup)] {
        &self.points
    }

    pub fn predict(&self, query: &[f64; 4]) -> GradeGroup {
        let neighbors = k_nearest(self.points.iter().map(|(x, _)| x), query, self.k);
        let mut votes = [0usize; 4];
        for i in neighbors {
            votes[self.points[i].1 as usize] += 1;
        }
        let mut best = GradeGroup::Gg1;
        let mut best_votes = 0usize;
        for gg in GradeGroup::ALL {
            let v = votes[gg as usize];
            if v >= best_votes && v > 0 {
                best_votes = v;
                best = gg;
            }
        }
        best
    }
}

/// Binary kNN over the same training points with labels thresholded at
/// `GG >= t`; its score is the positive fraction of the k nearest
/// neighbors, which is what the ROC analyses sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryKnnModel {
    points: Vec<([f64; 4], bool)>,
    k: usize,
    threshold: GradeGroup,
}

impl BinaryKnnModel {
    pub fn from_grade_points(
        points: &[([f64; 4], GradeGroup)],
        threshold: GradeGroup,
        k: usize,
    ) -> Result<Self, Stage2Error> {
        if points.is_empty() {
            return Err(Stage2Error::EmptyTrainingSet);
        }
        if k == 0 || k > points.len() {
            return Err(Stage2Error::InvalidK { k, n: points.len() });
        }
        Ok(BinaryKnnModel {
            points: points.iter().map(|&(x, gg)| (x, gg >= threshold)).collect(),
            k,
            threshold,
        })
    }

    pub fn threshold(&self) -> GradeGroup {
        self.threshold
    }

    /// Fraction of the k nearest neighbors labeled positive.
    pub fn score(&self, query: &[f64; 4]) -> f64 {
        let neighbors = k_nearest(self.points.iter().map(|(x, _)| x), query, self.k);
        let positives = neighbors.iter().filter(|&&i| self.points[i].1).count();
        positives as f64 / self.k as f64
    }
}

/// Binary threshold scores for GG >= 2, >= 3 and >= 4-5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub gg2: f64,
    pub gg3: f64,
    pub gg4: f64,
}

impl BinaryScores {
    pub fn of_threshold(&self, threshold: GradeGroup) -> f64 {
        match threshold {
            GradeGroup::Gg2 => self.gg2,
            GradeGroup::Gg3 => self.gg3,
            _ => self.gg4,
        }
    }
}

/// Output of grading one slide end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideGrade {
    pub grade_group: GradeGroup,
    pub features: FeatureVector,
    pub binary_scores: BinaryScores,
}

/// Calibrated heatmap plus the tissue mask marking patches the classifier
/// could score. Excluded patches hold a non-tumor one-hot placeholder so
/// the map stays a valid probability grid; the mask keeps them out of every
/// downstream summary.
pub fn infer_heatmap(
    slide: &SlideRecord,
    classifier: &dyn PatchClassifier,
    calibration: &CalibrationWeights,
) -> (LikelihoodMap, PatchGrid<bool>) {
    let rows = slide.mask.rows();
    let cols = slide.mask.cols();
    let stride = slide.mask.stride_um();
    let mut vectors = Vec::with_capacity(slide.mask.len());
    let mut tissue = Vec::with_capacity(slide.mask.len());
    for idx in 0..slide.mask.len() {
        match ensemble_orientations(classifier, slide, idx) {
            Some(raw) => {
                vectors.push(calibrate(raw, calibration));
                tissue.push(true);
            }
            None => {
                vectors.push([1.0, 0.0, 0.0, 0.0]);
                tissue.push(false);
            }
        }
    }
    let grid = PatchGrid::new(rows, cols, stride, vectors).expect("mask-shaped grid");
    let mask = PatchGrid::new(rows, cols, stride, tissue).expect("mask-shaped grid");
    (LikelihoodMap::new(grid).expect("calibrated probability vectors"), mask)
}

/// Classify every patch, ensemble, calibrate, summarize, rescale, and run
/// the kNN models. Deterministic end to end for a fixed classifier seed and
/// invariant to patch iteration order (the summary only counts categories).
pub fn grade_slide(
    slide: &SlideRecord,
    classifier: &dyn PatchClassifier,
    calibration: &CalibrationWeights,
    rescaler: &FeatureRescaler,
    knn: &KnnModel,
    binary_models: &[BinaryKnnModel; 3],
) -> Result<SlideGrade, Stage2Error> {
    let (heatmap, tissue_mask) = infer_heatmap(slide, classifier, calibration);
    let features = extract_features(&heatmap, &tissue_mask)?;
    let query = rescaler.apply(&features);
    Ok(SlideGrade {
        grade_group: knn.predict(&query),
        features,
        binary_scores: BinaryScores {
            gg2: binary_models[0].score(&query),
            gg3: binary_models[1].score(&query),
            gg4: binary_models[2].score(&query),
        },
    })
}
