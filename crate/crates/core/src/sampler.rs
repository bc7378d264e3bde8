//! Training-patch sampling with quasi-online hard-example mining: a
//! Fenwick-tree weighted index with O(log n) sample and point-update, the
//! three-level draw (category by ratio, slide uniformly, patch by weight),
//! and the loss-proportional weight update.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{PatternCategory, SlideRecord};
use crate::stage1::{Orientation, PatchClassifier};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("weights must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("weighted index is empty")]
    EmptyIndex,
    #[error("weight slot {0} out of bounds")]
    SlotOutOfBounds(usize),
    #[error("no slide contains category {0:?} after {1} redraws")]
    CategoryUnavailable(PatternCategory, usize),
    #[error("sampler contains no patches")]
    NoPatches,
    #[error("slide {0} not found in the mining input")]
    UnknownSlide(String),
}

/// Weighted sampling over patch slots backed by a Fenwick (binary indexed)
/// tree: `sample` and `set` both cost O(log n).
#[derive(Debug, Clone)]
pub struct WeightedIndex {
    weights: Vec<f64>,
    tree: Vec<f64>, // 1-based partial sums
}

impl WeightedIndex {
    pub fn new(weights: &[f64]) -> Result<Self, SamplerError> {
        if weights.is_empty() {
            return Err(SamplerError::EmptyIndex);
        }
        if let Some(&w) = weights.iter().find(|&&w| !(w >= 0.0)) {
            return Err(SamplerError::NegativeWeight(w));
        }
        let mut index = WeightedIndex { weights: weights.to_vec(), tree: vec![0.0; weights.len() + 1] };
        for (i, &w) in weights.iter().enumerate() {
            index.tree_add(i, w);
        }
        Ok(index)
    }

    pub fn uniform(len: usize) -> Result<Self, SamplerError> {
        Self::new(&vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, slot: usize) -> Option<f64> {
        self.weights.get(slot).copied()
    }

    pub fn total(&self) -> f64 {
        self.prefix_sum(self.weights.len())
    }

    fn tree_add(&mut self, slot: usize, delta: f64) {
        let mut i = slot + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum of weights in slots `0..end`.
    fn prefix_sum(&self, end: usize) -> f64 {
        let mut sum = 0.0;
        let mut i = end;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }

    /// Point-assign a slot's weight in O(log n).
    pub fn set(&mut self, slot: usize, weight: f64) -> Result<(), SamplerError> {
        if !(weight >= 0.0) {
            return Err(SamplerError::NegativeWeight(weight));
        }
        let old = *self.weights.get(slot).ok_or(SamplerError::SlotOutOfBounds(slot))?;
        self.weights[slot] = weight;
        self.tree_add(slot, weight - old);
        Ok(())
    }

    /// Map `u` in [0, 1) to a slot with probability `weight_i / total`.
    /// `None` when the total weight is not positive.
    pub fn sample(&self, u: f64) -> Option<usize> {
        let total = self.total();
        if !(total > 0.0) {
            return None;
        }
        let mut target = u * total;
        // Binary-lifted descent: find the first slot whose running prefix
        // exceeds the target.
        let n = self.weights.len();
        let mut pos = 0usize;
        let mut mask = n.next_power_of_two();
        while mask > 0 {
            let next = pos + mask;
            if next <= n && self.tree[next] <= target {
                target -= self.tree[next];
                pos = next;
            }
            mask >>= 1;
        }
        let mut slot = pos.min(n - 1);
        // Floating-point round-off can land on a zero-weight slot at bucket
        // boundaries; walk to the nearest positive-weight slot.
        if self.weights[slot] <= 0.0 {
            slot = (slot + 1..n)
                .chain((0..slot).rev())
                .find(|&s| self.weights[s] > 0.0)?;
        }
        Some(slot)
    }
}

/// Per-slide patches of one category plus their sampling weights.
#[derive(Debug, Clone)]
struct CategoryGroup {
    patch_indices: Vec<usize>,
    index: Option<WeightedIndex>, // None when the slide has no such patches
}

impl CategoryGroup {
    fn new(patch_indices: Vec<usize>) -> Self {
        let index = if patch_indices.is_empty() {
            None
        } else {
            Some(WeightedIndex::uniform(patch_indices.len()).expect("non-empty"))
        };
        CategoryGroup { patch_indices, index }
    }
}

#[derive(Debug, Clone)]
struct SlideGroups {
    slide_id: String,
    groups: [CategoryGroup; 4],
}

/// Default category draw ratios for (non-tumor, GP3, GP4, GP5).
pub const DEFAULT_CATEGORY_RATIOS: [f64; 4] = [4.0, 2.0, 2.0, 1.0];

/// Give up after this many category redraws.
pub const CATEGORY_REDRAW_BUDGET: usize = 1024;

/// One sampled training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub slide_id: String,
    pub patch_index: usize,
    pub category: PatternCategory,
}

/// Loss of one labeled patch, as emitted by a mining round.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLoss {
    pub slide_id: String,
    pub patch_index: usize,
    pub category: PatternCategory,
    pub loss: f64,
}

/// Sampler over every labeled patch of a slide set. Draws are a three-level
/// cascade: category with probability proportional to the configured
/// ratios, then a slide uniformly among slides containing that category,
/// then a patch from that slide's weighted index. All weights start
/// uniform within each (slide, category) group.
#[derive(Debug, Clone)]
pub struct SamplerState {
    category_ratios: [f64; 4],
    slides: Vec<SlideGroups>,
    /// Positions into `slides` that contain each category.
    category_slides: [Vec<usize>; 4],
    rng: ChaCha8Rng,
}

impl SamplerState {
    pub fn new(slides: &[SlideRecord], category_ratios: [f64; 4], seed: u64) -> Result<Self, SamplerError> {
        if category_ratios.iter().any(|&r| !(r >= 0.0)) {
            return Err(SamplerError::NegativeWeight(
                category_ratios.iter().copied().find(|&r| !(r >= 0.0)).unwrap(),
            ));
        }
        let mut slide_groups = Vec::with_capacity(slides.len());
        let mut category_slides: [Vec<usize>; 4] = Default::default();
        for slide in slides {
            let mut buckets: [Vec<usize>; 4] = Default::default();
            for idx in 0..slide.mask.len() {
                if let Some(category) = slide.ground_truth(idx) {
                    buckets[category.code()].push(idx);
                }
            }
            let position = slide_groups.len();
            for category in PatternCategory::ALL {
                if !buckets[category.code()].is_empty() {
                    category_slides[category.code()].push(position);
                }
            }
            let [b0, b1, b2, b3] = buckets;
            slide_groups.push(SlideGroups {
                slide_id: slide.slide_id.clone(),
                groups: [
                    CategoryGroup::new(b0),
                    CategoryGroup::new(b1),
                    CategoryGroup::new(b2),
                    CategoryGroup::new(b3),
                ],
            });
        }
        if slide_groups.iter().all(|s| s.groups.iter().all(|g| g.patch_indices.is_empty())) {
            return Err(SamplerError::NoPatches);
        }
        Ok(SamplerState {
            category_ratios,
            slides: slide_groups,
            category_slides,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_default_ratios(slides: &[SlideRecord], seed: u64) -> Result<Self, SamplerError> {
        Self::new(slides, DEFAULT_CATEGORY_RATIOS, seed)
    }

    fn draw_category(&mut self) -> PatternCategory {
        let total: f64 = self.category_ratios.iter().sum();
        let mut target = self.rng.random::<f64>() * total;
        for category in PatternCategory::ALL {
            let r = self.category_ratios[category.code()];
            if target < r {
                return category;
            }
            target -= r;
        }
        PatternCategory::Gp5
    }

    /// Draw one training patch. A category with no available slide is
    /// redrawn up to [`CATEGORY_REDRAW_BUDGET`] times.
    pub fn sample(&mut self) -> Result<TrainingDraw, SamplerError> {
        let mut last_category = PatternCategory::NonTumor;
        for _ in 0..CATEGORY_REDRAW_BUDGET {
            let category = self.draw_category();
            last_category = category;
            let candidates = &self.category_slides[category.code()];
            if candidates.is_empty() {
                continue;
            }
            let slide_pos = candidates[self.rng.random_range(0..candidates.len())];
            let group = &self.slides[slide_pos].groups[category.code()];
            let index = group.index.as_ref().expect("non-empty group");
            let u = self.rng.random::<f64>();
            let slot = index.sample(u).expect("positive total weight");
            return Ok(TrainingDraw {
                slide_id: self.slides[slide_pos].slide_id.clone(),
                patch_index: group.patch_indices[slot],
                category,
            });
        }
        Err(SamplerError::CategoryUnavailable(last_category, CATEGORY_REDRAW_BUDGET))
    }

    /// Sampling weights of one (slide, category) group, for inspection.
    pub fn group_weights(&self, slide_id: &str, category: PatternCategory) -> Option<Vec<(usize, f64)>> {
        let slide = self.slides.iter().find(|s| s.slide_id == slide_id)?;
        let group = &slide.groups[category.code()];
        let index = group.index.as_ref()?;
        Some(
            group
                .patch_indices
                .iter()
                .enumerate()
                .map(|(slot, &patch)| (patch, index.weight(slot).unwrap()))
                .collect(),
        )
    }
}

/// Softmax cross-entropy of a prediction against the true category, with
/// the shared 1e-12 likelihood floor.
pub fn cross_entropy_loss(prediction: &[f64; 4], true_category: PatternCategory) -> f64 {
    -prediction[true_category.code()].max(crate::stage1::LIKELIHOOD_FLOOR).ln()
}

/// One mining round: score every labeled patch with the current classifier
/// and make each (slide, category) group's sampling weights proportional to
/// the losses. Groups whose losses are all zero fall back to uniform so no
/// group becomes unsamplable. Returns the per-patch losses for inspection.
///
/// The round uses no randomness, so rerunning it with an unchanged
/// classifier leaves the sampler distribution identical.
pub fn mining_round(
    state: &mut SamplerState,
    classifier: &dyn PatchClassifier,
    slides: &[SlideRecord],
) -> Result<Vec<PatchLoss>, SamplerError> {
    let mut losses = Vec::new();
    for slide_groups in &mut state.slides {
        let slide = slides
            .iter()
            .find(|s| s.slide_id == slide_groups.slide_id)
            .ok_or_else(|| SamplerError::UnknownSlide(slide_groups.slide_id.clone()))?;
        for category in PatternCategory::ALL {
            let group = &mut slide_groups.groups[category.code()];
            let Some(index) = group.index.as_mut() else { continue };
            let mut group_losses = Vec::with_capacity(group.patch_indices.len());
            for &patch_index in &group.patch_indices {
                let prediction = classifier
                    .classify(slide, patch_index, Orientation::default())
                    .expect("group patches have resolvable labels");
                let loss = cross_entropy_loss(&prediction, category);
                group_losses.push(loss);
                losses.push(PatchLoss {
                    slide_id: slide_groups.slide_id.clone(),
                    patch_index,
                    category,
                    loss,
                });
            }
            let all_zero = group_losses.iter().all(|&l| l <= 0.0);
            for (slot, &loss) in group_losses.iter().enumerate() {
                index.set(slot, if all_zero { 1.0 } else { loss })?;
            }
        }
    }
    Ok(losses)
}
