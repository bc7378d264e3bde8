//! Synthetic dataset generation: label masks built from randomly grown
//! pattern blobs whose areas realize a sampled pattern composition, grade
//! references derived from those exact realized percentages, exponential
//! survival times whose hazard rises with the grade group, and an optional
//! synthetic 29-rater panel.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gleason_core::metrics::RaterSubgroup;
use gleason_core::model::{
    derive_gleason_score, grade_group_from_score, ClinicalRecord, GpPercentages, GradeGroup,
    PatchGrid, PatternCategory, RegionLabel, SlideRecord, DEFAULT_STRIDE_UM,
};

use crate::config::SyntheticConfig;
use crate::error::{CliError, Result};

/// One synthetic panel rating, as persisted to `ratings.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterRating {
    pub slide_id: String,
    pub rater_id: String,
    pub subgroup: RaterSubgroup,
    pub grade: GradeGroup,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub slides: Vec<SlideRecord>,
    pub clinical: Vec<ClinicalRecord>,
    pub ratings: Vec<RaterRating>,
}

const BLOB_START_RETRY_BUDGET: usize = 100_000;

fn draw_in_range(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

fn exponential_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    (-(1.0 - rng.random::<f64>()).ln() / rate).max(1e-6)
}

fn draw_grade_group(rng: &mut ChaCha8Rng, mix: &[f64; 4]) -> GradeGroup {
    let total: f64 = mix.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, &m) in mix.iter().enumerate() {
        if target < m {
            return GradeGroup::ALL[i];
        }
        target -= m;
    }
    GradeGroup::Gg4_5
}

/// (primary, secondary) pattern pair consistent with a grade group; the
/// merged 4-5 group draws uniformly among its four score pairs.
fn draw_score_pair(rng: &mut ChaCha8Rng, gg: GradeGroup) -> (PatternCategory, PatternCategory) {
    use PatternCategory::{Gp3, Gp4, Gp5};
    match gg {
        GradeGroup::Gg1 => (Gp3, Gp3),
        GradeGroup::Gg2 => (Gp3, Gp4),
        GradeGroup::Gg3 => (Gp4, Gp3),
        GradeGroup::Gg4_5 => [(Gp4, Gp4), (Gp4, Gp5), (Gp5, Gp4), (Gp5, Gp5)][rng.random_range(0..4)],
    }
}

/// Integer patch quota per tumor pattern realizing the drawn shares: floor
/// plus largest-remainder, then a guard that the primary strictly outcounts
/// the secondary so rounding can never flip the derived grade.
fn pattern_quotas(
    n_tumor: usize,
    primary: PatternCategory,
    secondary: PatternCategory,
    primary_share: f64,
) -> [usize; 4] {
    let mut quotas = [0usize; 4];
    if primary == secondary {
        quotas[primary.code()] = n_tumor;
        return quotas;
    }
    let primary_count = (primary_share * n_tumor as f64).round() as usize;
    let primary_count = primary_count.clamp(1, n_tumor - 1);
    quotas[primary.code()] = primary_count;
    quotas[secondary.code()] = n_tumor - primary_count;
    if quotas[primary.code()] <= quotas[secondary.code()] {
        quotas[primary.code()] += 1;
        quotas[secondary.code()] -= 1;
    }
    quotas
}

fn grid_neighbors(cell: usize, rows: usize, cols: usize, out: &mut Vec<usize>) {
    out.clear();
    let (r, c) = (cell / cols, cell % cols);
    if r > 0 {
        out.push(cell - cols);
    }
    if r + 1 < rows {
        out.push(cell + cols);
    }
    if c > 0 {
        out.push(cell - 1);
    }
    if c + 1 < cols {
        out.push(cell + 1);
    }
}

/// Grow random blobs of `pattern` until `quota` cells are claimed.
fn place_blobs(
    rng: &mut ChaCha8Rng,
    labels: &mut [PatternCategory],
    free: &mut [bool],
    rows: usize,
    cols: usize,
    pattern: PatternCategory,
    quota: usize,
    blob_size: [usize; 2],
) -> Result<()> {
    let cells = rows * cols;
    let mut remaining = quota;
    let mut retries = 0usize;
    let mut neighbors = Vec::with_capacity(4);
    while remaining > 0 {
        if retries > BLOB_START_RETRY_BUDGET {
            return Err(CliError::domain(format!(
                "infeasible blob packing: {remaining} patches of {pattern:?} left after retry budget"
            )));
        }
        let start = rng.random_range(0..cells);
        if !free[start] {
            retries += 1;
            continue;
        }
        let target = rng.random_range(blob_size[0]..=blob_size[1]).min(remaining);
        let mut frontier = vec![start];
        let mut grown = 0usize;
        while grown < target {
            if frontier.is_empty() {
                break;
            }
            let cell = frontier.swap_remove(rng.random_range(0..frontier.len()));
            if !free[cell] {
                continue;
            }
            free[cell] = false;
            labels[cell] = pattern;
            grown += 1;
            grid_neighbors(cell, rows, cols, &mut neighbors);
            for &n in &neighbors {
                if free[n] {
                    frontier.push(n);
                }
            }
        }
        remaining -= grown;
    }
    Ok(())
}

fn generate_slide(cfg: &SyntheticConfig, slide_id: &str, seed: u64) -> Result<(SlideRecord, GradeGroup)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = cfg.rows * cfg.cols;

    let gg = draw_grade_group(&mut rng, &cfg.gg_mix);
    let (primary, secondary) = draw_score_pair(&mut rng, gg);
    let primary_share = draw_in_range(&mut rng, cfg.primary_share);
    let tumor_fraction = draw_in_range(&mut rng, cfg.tumor_fraction);
    let n_tumor = ((tumor_fraction * cells as f64).round() as usize).clamp(4, cells);
    let quotas = pattern_quotas(n_tumor, primary, secondary, primary_share);

    let mut labels = vec![PatternCategory::NonTumor; cells];
    let mut free = vec![true; cells];
    // Severe patterns first so large blobs are not squeezed at the end.
    for pattern in [PatternCategory::Gp5, PatternCategory::Gp4, PatternCategory::Gp3] {
        let quota = quotas[pattern.code()];
        if quota > 0 {
            place_blobs(&mut rng, &mut labels, &mut free, cfg.rows, cfg.cols, pattern, quota, cfg.blob_size)?;
        }
    }

    // Reference percentages are the realized integer counts, so a perfect
    // classifier reproduces them exactly.
    let tumor = quotas.iter().sum::<usize>();
    let pct = |p: PatternCategory| 100.0 * quotas[p.code()] as f64 / tumor as f64;
    let realized = GpPercentages::new(pct(PatternCategory::Gp3), pct(PatternCategory::Gp4), pct(PatternCategory::Gp5))?;
    let derived_gg = grade_group_from_score(derive_gleason_score(realized)?);
    if derived_gg != gg {
        return Err(CliError::domain(format!(
            "slide {slide_id}: realized composition derives {derived_gg} but {gg} was drawn"
        )));
    }

    let mask = PatchGrid::new(
        cfg.rows,
        cfg.cols,
        DEFAULT_STRIDE_UM,
        labels.into_iter().map(RegionLabel::Pattern).collect(),
    )?;
    let mut slide = SlideRecord::new(slide_id, mask);
    slide.reference_gg = Some(gg);
    slide.reference_pcts = Some(realized);
    Ok((slide, gg))
}

fn generate_panel(cfg: &SyntheticConfig, slides: &[SlideRecord], seed: u64) -> Vec<RaterRating> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratings = Vec::new();
    let noisy_grade = |rng: &mut ChaCha8Rng, reference: GradeGroup| -> GradeGroup {
        if rng.random::<f64>() >= cfg.rater_noise {
            reference
        } else {
            let others: Vec<GradeGroup> = GradeGroup::ALL.iter().copied().filter(|&g| g != reference).collect();
            others[rng.random_range(0..others.len())]
        }
    };
    for (slide_index, slide) in slides.iter().enumerate() {
        let reference = slide.reference_gg.expect("generated slides carry references");
        for r in 0..10 {
            ratings.push(RaterRating {
                slide_id: slide.slide_id.clone(),
                rater_id: format!("T{:02}", r + 1),
                subgroup: RaterSubgroup::Ten,
                grade: noisy_grade(&mut rng, reference),
            });
        }
        // Three of the nineteen part-time raters per slide, round-robin so
        // coverage stays balanced.
        for j in 0..3 {
            let rater = (slide_index * 3 + j) % 19;
            ratings.push(RaterRating {
                slide_id: slide.slide_id.clone(),
                rater_id: format!("N{:02}", rater + 1),
                subgroup: RaterSubgroup::Nineteen,
                grade: noisy_grade(&mut rng, reference),
            });
        }
    }
    ratings
}

/// Generate the full synthetic dataset. Byte-deterministic in the seed.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slide_seeds: Vec<u64> = (0..cfg.n_slides).map(|_| master.random()).collect();
    let clinical_seed: u64 = master.random();
    let panel_seed: u64 = master.random();

    let mut slides = Vec::with_capacity(cfg.n_slides);
    let mut groups = Vec::with_capacity(cfg.n_slides);
    for (i, &seed) in slide_seeds.iter().enumerate() {
        let slide_id = format!("slide{:04}", i + 1);
        let (slide, gg) = generate_slide(cfg, &slide_id, seed)?;
        slides.push(slide);
        groups.push(gg);
    }

    let mut clinical_rng = ChaCha8Rng::seed_from_u64(clinical_seed);
    let mut clinical = Vec::with_capacity(cfg.n_slides);
    for (slide, &gg) in slides.iter().zip(&groups) {
        let rate = cfg.lambda_per_gg[gg as usize];
        let event_time = exponential_draw(&mut clinical_rng, rate);
        let censor_time = exponential_draw(&mut clinical_rng, cfg.censor_rate);
        clinical.push(ClinicalRecord::new(
            slide.slide_id.clone(),
            event_time.min(censor_time),
            event_time <= censor_time,
        )?);
    }

    let ratings = if cfg.rater_panel { generate_panel(cfg, &slides, panel_seed) } else { Vec::new() };
    Ok(SyntheticDataset { slides, clinical, ratings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig { n_slides: 24, rows: 16, cols: 16, blob_size: [4, 20], seed: 5, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.slides.len(), b.slides.len());
        for (x, y) in a.slides.iter().zip(&b.slides) {
            assert_eq!(x.slide_id, y.slide_id);
            assert_eq!(x.mask.values(), y.mask.values());
            assert_eq!(x.reference_pcts, y.reference_pcts);
        }
        assert_eq!(a.clinical, b.clinical);
        assert_eq!(a.ratings, b.ratings);
    }

    #[test]
    fn masks_realize_the_stored_reference_percentages() {
        let dataset = synth_generate(&small_config()).unwrap();
        for slide in &dataset.slides {
            let mut counts = [0usize; 4];
            for label in slide.mask.values() {
                if let RegionLabel::Pattern(p) = label {
                    counts[p.code()] += 1;
                }
            }
            let tumor = counts[1] + counts[2] + counts[3];
            assert!(tumor >= 4);
            let stored = slide.reference_pcts.unwrap();
            assert!((stored.gp3 - 100.0 * counts[1] as f64 / tumor as f64).abs() < 1e-9);
            assert!((stored.gp4 - 100.0 * counts[2] as f64 / tumor as f64).abs() < 1e-9);
            assert!((stored.gp5 - 100.0 * counts[3] as f64 / tumor as f64).abs() < 1e-9);
            // The stored grade group re-derives from the stored percentages.
            let derived = grade_group_from_score(derive_gleason_score(stored).unwrap());
            assert_eq!(Some(derived), slide.reference_gg);
        }
    }

    #[test]
    fn forced_mix_yields_only_that_group() {
        let cfg = SyntheticConfig { gg_mix: [1.0, 0.0, 0.0, 0.0], ..small_config() };
        let dataset = synth_generate(&cfg).unwrap();
        assert!(dataset.slides.iter().all(|s| s.reference_gg == Some(GradeGroup::Gg1)));
    }

    #[test]
    fn clinical_times_are_positive_with_both_outcomes() {
        let dataset = synth_generate(&small_config()).unwrap();
        assert!(dataset.clinical.iter().all(|c| c.time_months > 0.0));
        assert!(dataset.clinical.iter().any(|c| c.event));
    }

    #[test]
    fn panel_follows_the_ten_plus_three_design() {
        let dataset = synth_generate(&small_config()).unwrap();
        for slide in &dataset.slides {
            let ratings: Vec<&RaterRating> =
                dataset.ratings.iter().filter(|r| r.slide_id == slide.slide_id).collect();
            assert_eq!(ratings.iter().filter(|r| r.subgroup == RaterSubgroup::Ten).count(), 10);
            assert_eq!(ratings.iter().filter(|r| r.subgroup == RaterSubgroup::Nineteen).count(), 3);
        }
        let nineteen_ids: std::collections::BTreeSet<&str> = dataset
            .ratings
            .iter()
            .filter(|r| r.subgroup == RaterSubgroup::Nineteen)
            .map(|r| r.rater_id.as_str())
            .collect();
        assert_eq!(nineteen_ids.len(), 19);
    }

    #[test]
    fn quotas_never_let_rounding_flip_the_primary() {
        for n_tumor in 4..40 {
            for share in [0.55, 0.6, 0.666, 0.75] {
                let q = pattern_quotas(n_tumor, PatternCategory::Gp3, PatternCategory::Gp4, share);
                assert!(q[1] > q[2], "n={n_tumor} share={share}: {q:?}");
                assert!(q[2] >= 1);
                assert_eq!(q[1] + q[2], n_tumor);
            }
        }
    }
}
