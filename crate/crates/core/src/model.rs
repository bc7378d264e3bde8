//! Shared domain types: pattern categories, region labels, patch grids,
//! Gleason scores and grade groups, plus the label-resolution and
//! score-derivation rules every other module builds on.
//!
//! All types here are immutable value objects and all functions are pure,
//! so everything is safe to share across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("label list is empty")]
    EmptyLabels,
    #[error("slide has no tumor: all pattern percentages are zero")]
    NoTumor,
    #[error("percentage {0} outside [0, 100]")]
    PercentageOutOfRange(f64),
    #[error("pattern percentages sum to {0}, expected at most 100")]
    PercentageSumTooLarge(f64),
    #[error("grid of {rows}x{cols} patches cannot hold {len} values")]
    GridShape { rows: usize, cols: usize, len: usize },
    #[error("patch stride must be positive, got {0}")]
    NonPositiveStride(f64),
    #[error("likelihood vector {0:?} is not a probability vector")]
    InvalidLikelihood([f64; 4]),
    #[error("mixed grade must pair two distinct tumor patterns")]
    InvalidMixedGrade,
    #[error("Gleason score patterns must be tumor patterns, got {0:?}")]
    NonTumorScorePattern(PatternCategory),
    #[error("annotator mask shape differs from the reference mask")]
    AnnotatorMaskShape,
    #[error("clinical follow-up time must be finite and positive, got {0}")]
    InvalidFollowUpTime(f64),
}

/// Patch-level class. Variant order is severity order, so the derived `Ord`
/// ranks `NonTumor < Gp3 < Gp4 < Gp5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PatternCategory {
    NonTumor,
    Gp3,
    Gp4,
    Gp5,
}

impl PatternCategory {
    pub const ALL: [PatternCategory; 4] = [
        PatternCategory::NonTumor,
        PatternCategory::Gp3,
        PatternCategory::Gp4,
        PatternCategory::Gp5,
    ];

    /// Stable integer code 0..=3, also the index into likelihood vectors.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Gleason pattern number (3, 4 or 5); `None` for non-tumor.
    pub fn pattern_number(self) -> Option<u8> {
        match self {
            PatternCategory::NonTumor => None,
            PatternCategory::Gp3 => Some(3),
            PatternCategory::Gp4 => Some(4),
            PatternCategory::Gp5 => Some(5),
        }
    }

    pub fn from_pattern_number(number: u8) -> Option<Self> {
        match number {
            3 => Some(PatternCategory::Gp3),
            4 => Some(PatternCategory::Gp4),
            5 => Some(PatternCategory::Gp5),
            _ => None,
        }
    }

    pub fn is_tumor(self) -> bool {
        self != PatternCategory::NonTumor
    }
}

/// Region annotation as provided by a pathologist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Pattern(PatternCategory),
    /// Two patterns present at gland level; `primary` is the dominant one.
    /// Both must be tumor patterns and must differ (use [`RegionLabel::mixed`]).
    MixedGrade {
        primary: PatternCategory,
        secondary: PatternCategory,
    },
    Artifact,
    Consult,
    NonGradableTumor,
    Unlabeled,
}

impl RegionLabel {
    pub fn mixed(primary: PatternCategory, secondary: PatternCategory) -> Result<Self, ModelError> {
        if !primary.is_tumor() || !secondary.is_tumor() || primary == secondary {
            return Err(ModelError::InvalidMixedGrade);
        }
        Ok(RegionLabel::MixedGrade { primary, secondary })
    }

    /// The pattern this label contributes to resolution, if any: artifacts
    /// count as non-tumor, mixed grades as their primary pattern, and
    /// consult/non-gradable/unlabeled regions contribute nothing.
    pub fn mapped_pattern(self) -> Option<PatternCategory> {
        match self {
            RegionLabel::Pattern(p) => Some(p),
            RegionLabel::MixedGrade { primary, .. } => Some(primary),
            RegionLabel::Artifact => Some(PatternCategory::NonTumor),
            RegionLabel::Consult | RegionLabel::NonGradableTumor | RegionLabel::Unlabeled => None,
        }
    }
}

/// How multiple annotations for one region collapse to a single pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionPolicy {
    /// Majority vote over the mapped patterns, ties toward the more severe
    /// pattern; labels that map to nothing are dropped first.
    Training,
    /// A pattern only when every annotator supplied the same mapped pattern.
    Unanimous,
}

/// Collapse a region's labels to one pattern. `Ok(None)` means the region is
/// undefined under the policy and the caller should skip the patch.
pub fn resolve_region_label(
    labels: &[RegionLabel],
    policy: ResolutionPolicy,
) -> Result<Option<PatternCategory>, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyLabels);
    }
    match policy {
        ResolutionPolicy::Unanimous => {
            let mut resolved = None;
            for label in labels {
                match label.mapped_pattern() {
                    None => return Ok(None),
                    Some(p) => match resolved {
                        None => resolved = Some(p),
                        Some(prev) if prev != p => return Ok(None),
                        Some(_) => {}
                    },
                }
            }
            Ok(resolved)
        }
        ResolutionPolicy::Training => {
            let mut votes = [0usize; 4];
            for label in labels {
                if let Some(p) = label.mapped_pattern() {
                    votes[p.code()] += 1;
                }
            }
            // Ascending severity scan with `>=` keeps the most severe
            // category among tied vote counts.
            let mut winner = None;
            let mut best = 0usize;
            for category in PatternCategory::ALL {
                let count = votes[category.code()];
                if count > 0 && count >= best {
                    best = count;
                    winner = Some(category);
                }
            }
            Ok(winner)
        }
    }
}

/// Rectangular grid of per-patch payloads at a fixed physical stride.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    rows: usize,
    cols: usize,
    stride_um: f64,
    values: Vec<T>,
}

/// Assessed patch stride in micrometers.
pub const DEFAULT_STRIDE_UM: f64 = 32.0;
/// Scan resolution in micrometers per pixel.
pub const DEFAULT_RESOLUTION_UM_PER_PX: f64 = 0.25;

impl<T> PatchGrid<T> {
    pub fn new(rows: usize, cols: usize, stride_um: f64, values: Vec<T>) -> Result<Self, ModelError> {
        if !(stride_um > 0.0) {
            return Err(ModelError::NonPositiveStride(stride_um));
        }
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(ModelError::GridShape { rows, cols, len: values.len() });
        }
        Ok(PatchGrid { rows, cols, stride_um, values })
    }

    pub fn from_fn(rows: usize, cols: usize, stride_um: f64, f: impl FnMut(usize) -> T) -> Result<Self, ModelError> {
        let values = (0..rows * cols).map(f).collect();
        Self::new(rows, cols, stride_um, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn stride_um(&self) -> f64 {
        self.stride_um
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major patch lookup.
    pub fn get(&self, patch_index: usize) -> Option<&T> {
        self.values.get(patch_index)
    }

    pub fn get_rc(&self, row: usize, col: usize) -> Option<&T> {
        if row < self.rows && col < self.cols {
            self.values.get(row * self.cols + col)
        } else {
            None
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn same_shape<U>(&self, other: &PatchGrid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

pub type LabelMask = PatchGrid<RegionLabel>;

/// Tolerance for the probability-vector sum check.
pub const LIKELIHOOD_SUM_TOL: f64 = 1e-6;

/// Per-patch class likelihoods over a whole slide, ordered
/// (non-tumor, GP3, GP4, GP5).
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    grid: PatchGrid<[f64; 4]>,
}

impl LikelihoodMap {
    pub fn new(grid: PatchGrid<[f64; 4]>) -> Result<Self, ModelError> {
        for v in grid.values() {
            let sum: f64 = v.iter().sum();
            if v.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > LIKELIHOOD_SUM_TOL {
                return Err(ModelError::InvalidLikelihood(*v));
            }
        }
        Ok(LikelihoodMap { grid })
    }

    pub fn grid(&self) -> &PatchGrid<[f64; 4]> {
        &self.grid
    }
}

/// Slide-level pattern percentages (over tumor area), each in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPercentages {
    pub gp3: f64,
    pub gp4: f64,
    pub gp5: f64,
}

impl GpPercentages {
    pub fn new(gp3: f64, gp4: f64, gp5: f64) -> Result<Self, ModelError> {
        for &p in &[gp3, gp4, gp5] {
            if !(0.0..=100.0).contains(&p) {
                return Err(ModelError::PercentageOutOfRange(p));
            }
        }
        Ok(GpPercentages { gp3, gp4, gp5 })
    }

    pub fn of_pattern(&self, pattern: PatternCategory) -> Option<f64> {
        match pattern {
            PatternCategory::NonTumor => None,
            PatternCategory::Gp3 => Some(self.gp3),
            PatternCategory::Gp4 => Some(self.gp4),
            PatternCategory::Gp5 => Some(self.gp5),
        }
    }
}

/// One slide: its resolved ground-truth mask plus optional per-annotator
/// masks and reference grading.
#[derive(Debug, Clone)]
pub struct SlideRecord {
    pub slide_id: String,
    pub mask: LabelMask,
    pub annotator_masks: Option<Vec<LabelMask>>,
    pub reference_gg: Option<GradeGroup>,
    pub reference_pcts: Option<GpPercentages>,
    pub resolution_um_per_px: f64,
}

impl SlideRecord {
    pub fn new(slide_id: impl Into<String>, mask: LabelMask) -> Self {
        SlideRecord {
            slide_id: slide_id.into(),
            mask,
            annotator_masks: None,
            reference_gg: None,
            reference_pcts: None,
            resolution_um_per_px: DEFAULT_RESOLUTION_UM_PER_PX,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(masks) = &self.annotator_masks {
            if masks.iter().any(|m| !m.same_shape(&self.mask)) {
                return Err(ModelError::AnnotatorMaskShape);
            }
        }
        if let Some(p) = self.reference_pcts {
            GpPercentages::new(p.gp3, p.gp4, p.gp5)?;
        }
        Ok(())
    }

    /// Ground-truth pattern of a patch under the training resolution rules,
    /// or `None` when the label carries no pattern.
    pub fn ground_truth(&self, patch_index: usize) -> Option<PatternCategory> {
        let label = *self.mask.get(patch_index)?;
        resolve_region_label(&[label], ResolutionPolicy::Training).ok()?
    }

    /// Labels all annotators gave this patch; falls back to the resolved
    /// mask when no per-annotator masks are attached.
    pub fn annotator_labels(&self, patch_index: usize) -> Vec<RegionLabel> {
        match &self.annotator_masks {
            Some(masks) => masks.iter().filter_map(|m| m.get(patch_index).copied()).collect(),
            None => self.mask.get(patch_index).copied().into_iter().collect(),
        }
    }
}

/// Gleason score as an ordered (primary, secondary) pattern pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GleasonScore {
    primary: PatternCategory,
    secondary: PatternCategory,
}

impl GleasonScore {
    pub fn new(primary: PatternCategory, secondary: PatternCategory) -> Result<Self, ModelError> {
        if !primary.is_tumor() {
            return Err(ModelError::NonTumorScorePattern(primary));
        }
        if !secondary.is_tumor() {
            return Err(ModelError::NonTumorScorePattern(secondary));
        }
        Ok(GleasonScore { primary, secondary })
    }

    pub fn primary(&self) -> PatternCategory {
        self.primary
    }

    pub fn secondary(&self) -> PatternCategory {
        self.secondary
    }

    /// Numeric score in 6..=10, e.g. 3+4 = 7.
    pub fn numeric(&self) -> u8 {
        self.primary.pattern_number().unwrap() + self.secondary.pattern_number().unwrap()
    }
}

impl std::fmt::Display for GleasonScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}+{}",
            self.primary.pattern_number().unwrap(),
            self.secondary.pattern_number().unwrap()
        )
    }
}

/// Four-way grade group; groups 4 and 5 are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradeGroup {
    #[serde(rename = "1")]
    Gg1,
    #[serde(rename = "2")]
    Gg2,
    #[serde(rename = "3")]
    Gg3,
    #[serde(rename = "4-5")]
    Gg4_5,
}

impl GradeGroup {
    pub const ALL: [GradeGroup; 4] = [GradeGroup::Gg1, GradeGroup::Gg2, GradeGroup::Gg3, GradeGroup::Gg4_5];

    /// Ordinal risk rank 1..=4, used wherever grades act as an ordered scale.
    pub fn ordinal(self) -> u8 {
        self as u8 + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            GradeGroup::Gg1 => "1",
            GradeGroup::Gg2 => "2",
            GradeGroup::Gg3 => "3",
            GradeGroup::Gg4_5 => "4-5",
        }
    }
}

impl std::fmt::Display for GradeGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Follow-up for one slide: duration in months and whether the adverse
/// event (progression / biochemical recurrence) was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub slide_id: String,
    pub time_months: f64,
    pub event: bool,
}

impl ClinicalRecord {
    pub fn new(slide_id: impl Into<String>, time_months: f64, event: bool) -> Result<Self, ModelError> {
        if !time_months.is_finite() || time_months <= 0.0 {
            return Err(ModelError::InvalidFollowUpTime(time_months));
        }
        Ok(ClinicalRecord { slide_id: slide_id.into(), time_months, event })
    }
}

/// Score the slide from its pattern percentages: primary is the largest
/// percentage, secondary the next-largest strictly positive one (falling
/// back to the primary for single-pattern slides). Percentage ties break
/// toward the more severe pattern.
pub fn derive_gleason_score(pcts: GpPercentages) -> Result<GleasonScore, ModelError> {
    let entries = [
        (PatternCategory::Gp3, pcts.gp3),
        (PatternCategory::Gp4, pcts.gp4),
        (PatternCategory::Gp5, pcts.gp5),
    ];
    for &(_, p) in &entries {
        if !(0.0..=100.0).contains(&p) {
            return Err(ModelError::PercentageOutOfRange(p));
        }
    }
    let sum: f64 = entries.iter().map(|&(_, p)| p).sum();
    if sum > 100.0 + 1e-6 {
        return Err(ModelError::PercentageSumTooLarge(sum));
    }
    if entries.iter().all(|&(_, p)| p <= 0.0) {
        return Err(ModelError::NoTumor);
    }

    // Ascending severity with `>=` so ties land on the more severe pattern.
    let mut primary = entries[0].0;
    let mut best = f64::NEG_INFINITY;
    for &(pattern, p) in &entries {
        if p >= best {
            best = p;
            primary = pattern;
        }
    }

    let mut secondary = primary;
    let mut second_best = f64::NEG_INFINITY;
    for &(pattern, p) in &entries {
        if pattern != primary && p > 0.0 && p >= second_best {
            second_best = p;
            secondary = pattern;
        }
    }

    GleasonScore::new(primary, secondary)
}

/// ISUP-derived four-way bucketing: 3+3 is group 1, 3+4 group 2, 4+3
/// group 3, and every score of 8 or more the merged group 4-5.
pub fn grade_group_from_score(score: GleasonScore) -> GradeGroup {
    let p = score.primary().pattern_number().unwrap();
    let s = score.secondary().pattern_number().unwrap();
    match (p, s) {
        (3, 3) => GradeGroup::Gg1,
        (3, 4) => GradeGroup::Gg2,
        (4, 3) => GradeGroup::Gg3,
        _ => GradeGroup::Gg4_5,
    }
}

/// Pixel-space to patch-space mapping for a slide scanned at a fixed
/// resolution; with the defaults one patch covers 128x128 pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchGeometry {
    pub resolution_um_per_px: f64,
    pub stride_um: f64,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        PatchGeometry {
            resolution_um_per_px: DEFAULT_RESOLUTION_UM_PER_PX,
            stride_um: DEFAULT_STRIDE_UM,
        }
    }
}

impl PatchGeometry {
    pub fn stride_px(&self) -> f64 {
        self.stride_um / self.resolution_um_per_px
    }

    /// (row, col) of the patch containing a pixel coordinate.
    pub fn patch_of_pixel(&self, x_px: f64, y_px: f64) -> (usize, usize) {
        let stride = self.stride_px();
        ((y_px / stride).floor().max(0.0) as usize, (x_px / stride).floor().max(0.0) as usize)
    }

    /// Pixel coordinate of a patch's upper-left corner.
    pub fn pixel_origin_of_patch(&self, row: usize, col: usize) -> (f64, f64) {
        let stride = self.stride_px();
        (col as f64 * stride, row as f64 * stride)
    }
}
