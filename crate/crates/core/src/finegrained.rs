//! Fine-grained (quantitative) Gleason patterns: interpolation between the
//! two highest-confidence tumor patterns, the CIELAB colormap used to
//! render them, exemplar retrieval, and fine-grained quantitation features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LikelihoodMap, PatchGrid, PatternCategory};
use crate::stage2::{argmax_category, Stage2Error};

#[derive(Debug, Error, PartialEq)]
pub enum FineGrainedError {
    #[error("all tumor likelihoods are zero")]
    NoTumorLikelihood,
    #[error("patch list is empty")]
    EmptyPatchList,
    #[error(transparent)]
    Grid(#[from] Stage2Error),
}

/// The two highest-confidence tumor patterns ordered by pattern number:
/// `((lower_pattern, its_likelihood), (higher_pattern, its_likelihood))`.
/// Likelihood ties prefer the more severe pattern for the top-two cut.
fn top_two_tumor(likelihoods: &[f64; 4]) -> Result<((u8, f64), (u8, f64)), FineGrainedError> {
    let mut entries = [
        (3u8, likelihoods[PatternCategory::Gp3.code()]),
        (4u8, likelihoods[PatternCategory::Gp4.code()]),
        (5u8, likelihoods[PatternCategory::Gp5.code()]),
    ];
    if entries.iter().all(|&(_, l)| l <= 0.0) {
        return Err(FineGrainedError::NoTumorLikelihood);
    }
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
    let (a, b) = (entries[0], entries[1]);
    Ok(if a.0 < b.0 { (a, b) } else { (b, a) })
}

/// Quantitative GP by the literal interpolation formula: with the top two
/// tumor patterns `P_lo < P_hi` carrying likelihoods `l_lo` and `l_hi`,
/// returns `P_lo + l_lo / (l_lo + l_hi)`.
///
/// Note the formula maps a pure-pattern one-hot to `P_lo + 1`, so it is
/// discontinuous at pure patterns; [`quantitative_gp_smooth`] is the
/// continuity-repaired variant used for rendering and features.
pub fn quantitative_gp_verbatim(likelihoods: &[f64; 4]) -> Result<f64, FineGrainedError> {
    let ((p_lo, l_lo), (_, l_hi)) = top_two_tumor(likelihoods)?;
    Ok(p_lo as f64 + l_lo / (l_lo + l_hi))
}

/// Quantitative GP anchored at the lower pattern and pulled toward the
/// higher one by its likelihood share: `P_lo + l_hi / (l_lo + l_hi)`.
/// Continuous across the `l_lo = l_hi` crossing and exact at one-hot tumor
/// likelihoods.
pub fn quantitative_gp_smooth(likelihoods: &[f64; 4]) -> Result<f64, FineGrainedError> {
    let ((p_lo, l_lo), (_, l_hi)) = top_two_tumor(likelihoods)?;
    Ok(p_lo as f64 + l_hi / (l_lo + l_hi))
}

/// sRGB anchors for the colormap: GP3 green, GP4 yellow, GP5 red.
pub const ANCHOR_GP3_SRGB: [u8; 3] = [0, 128, 0];
pub const ANCHOR_GP4_SRGB: [u8; 3] = [255, 255, 0];
pub const ANCHOR_GP5_SRGB: [u8; 3] = [255, 0, 0];

// sRGB <-> XYZ (D65) per IEC 61966-2-1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404541621141045, -1.5371385127977166, -0.498531409556016],
    [-0.9692660305051868, 1.8760108454466942, 0.041556017530349834],
    [0.05564343095911469, -0.20402591351675387, 1.0572251882231791],
];
const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_channel_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_channel_to_srgb(c: f64) -> u8 {
    let c = c.max(0.0);
    let s = if c <= 0.0031308 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 };
    (s.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// sRGB (8-bit, D65) to CIELAB.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let linear = [
        srgb_channel_to_linear(rgb[0]),
        srgb_channel_to_linear(rgb[1]),
        srgb_channel_to_linear(rgb[2]),
    ];
    let xyz = mat_mul(&SRGB_TO_XYZ, linear);
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIELAB to sRGB, gamut-clipped and rounded to 8 bits per channel.
pub fn lab_to_srgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * D65_WHITE[0],
        lab_f_inv(fy) * D65_WHITE[1],
        lab_f_inv(fz) * D65_WHITE[2],
    ];
    let linear = mat_mul(&XYZ_TO_SRGB, xyz);
    [
        linear_channel_to_srgb(linear[0]),
        linear_channel_to_srgb(linear[1]),
        linear_channel_to_srgb(linear[2]),
    ]
}

/// Map a quantitative GP in [3, 5] to a color by linear interpolation in
/// CIELAB between the flanking anchors (green at 3, yellow at 4, red at 5).
/// Out-of-range values are clamped first.
pub fn colormap_cielab(qgp: f64) -> [u8; 3] {
    let q = qgp.clamp(3.0, 5.0);
    let lab3 = srgb_to_lab(ANCHOR_GP3_SRGB);
    let lab4 = srgb_to_lab(ANCHOR_GP4_SRGB);
    let lab5 = srgb_to_lab(ANCHOR_GP5_SRGB);
    let (from, to, t) = if q <= 4.0 { (lab3, lab4, q - 3.0) } else { (lab4, lab5, q - 4.0) };
    let lab = std::array::from_fn(|i| from[i] * (1.0 - t) + to[i] * t);
    lab_to_srgb(lab)
}

/// The patch whose quantitative GP most closely matches the target;
/// distance ties keep the first patch in input order.
pub fn exemplar_retrieval<'a, T>(target: f64, patches: &'a [(T, f64)]) -> Result<&'a T, FineGrainedError> {
    let mut best: Option<(&T, f64)> = None;
    for (patch, qgp) in patches {
        let d = (qgp - target).abs();
        if best.as_ref().map_or(true, |&(_, bd)| d < bd) {
            best = Some((patch, d));
        }
    }
    best.map(|(p, _)| p).ok_or(FineGrainedError::EmptyPatchList)
}

/// Tumor composition over the five half-pattern buckets, as percentages of
/// tumor patches. Sums to 100 whenever tumor is present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedFeatures {
    pub pct_gp3: f64,
    pub pct_gp35: f64,
    pub pct_gp4: f64,
    pub pct_gp45: f64,
    pub pct_gp5: f64,
}

impl FineGrainedFeatures {
    pub fn zero() -> Self {
        FineGrainedFeatures { pct_gp3: 0.0, pct_gp35: 0.0, pct_gp4: 0.0, pct_gp45: 0.0, pct_gp5: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.pct_gp3, self.pct_gp35, self.pct_gp4, self.pct_gp45, self.pct_gp5]
    }
}

/// Bucket of a quantitative GP: nearest of {3, 3.5, 4, 4.5, 5}, with
/// right-closed bin edges at the midpoints 3.25, 3.75, 4.25, 4.75.
pub fn finegrained_bucket(qgp: f64) -> usize {
    if qgp <= 3.25 {
        0
    } else if qgp <= 3.75 {
        1
    } else if qgp <= 4.25 {
        2
    } else if qgp <= 4.75 {
        3
    } else {
        4
    }
}

/// Fine-grained quantitation: every tumor-predicted tissue patch (argmax a
/// tumor pattern) contributes its smooth quantitative GP to one bucket.
/// Zero tumor patches yield all-zero features.
pub fn finegrained_features(
    calibrated: &LikelihoodMap,
    tissue_mask: &PatchGrid<bool>,
) -> Result<FineGrainedFeatures, FineGrainedError> {
    if !calibrated.grid().same_shape(tissue_mask) {
        return Err(Stage2Error::GridMismatch.into());
    }
    let mut tissue = 0usize;
    let mut counts = [0usize; 5];
    let mut tumor = 0usize;
    for (likelihoods, &is_tissue) in calibrated.grid().values().iter().zip(tissue_mask.values()) {
        if !is_tissue {
            continue;
        }
        tissue += 1;
        if argmax_category(likelihoods).is_tumor() {
            tumor += 1;
            let qgp = quantitative_gp_smooth(likelihoods)?;
            counts[finegrained_bucket(qgp)] += 1;
        }
    }
    if tissue == 0 {
        return Err(Stage2Error::NoTissue.into());
    }
    if tumor == 0 {
        return Ok(FineGrainedFeatures::zero());
    }
    let pct = |c: usize| 100.0 * c as f64 / tumor as f64;
    Ok(FineGrainedFeatures {
        pct_gp3: pct(counts[0]),
        pct_gp35: pct(counts[1]),
        pct_gp4: pct(counts[2]),
        pct_gp45: pct(counts[3]),
        pct_gp5: pct(counts[4]),
    })
}
