//! On-disk formats. Text where small and diffable, compact binary where
//! large:
//!
//! * label masks — CSV grids of integer codes (0 non-tumor, 1/2/3 for
//!   GP3/4/5, `10*p + s` for mixed grades such as 54 = 5+4, 98 artifact,
//!   97 consult, 96 non-gradable tumor, 99 unlabeled)
//! * heatmaps — a JSON header (dims, stride) plus row-major little-endian
//!   f32 quads in a sidecar `.bin`
//! * clinical data and ratings — CSV
//! * dataset manifest, models, grades, reports — JSON
//!
//! Every format round-trips bit-exactly; writers iterate in sorted slide
//! order so artifacts are byte-stable across runs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gleason_core::metrics::RaterSubgroup;
use gleason_core::model::{
    ClinicalRecord, GpPercentages, GradeGroup, LabelMask, LikelihoodMap, PatchGrid, PatternCategory,
    RegionLabel, SlideRecord, DEFAULT_RESOLUTION_UM_PER_PX, DEFAULT_STRIDE_UM,
};
use gleason_core::stage1::CalibrationWeights;
use gleason_core::stage2::{BinaryKnnModel, BinaryScores, FeatureVector, FeatureRescaler, KnnModel};
use gleason_core::finegrained::FineGrainedFeatures;

use crate::config::SyntheticConfig;
use crate::error::{CliError, Result};
use crate::synth::{RaterRating, SyntheticDataset};

pub const MASK_DIR: &str = "masks";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const CLINICAL_CSV: &str = "clinical.csv";
pub const RATINGS_CSV: &str = "ratings.csv";

// ---------------------------------------------------------------------------
// Label-mask codes

pub fn encode_label(label: RegionLabel) -> Result<i64> {
    Ok(match label {
        RegionLabel::Pattern(PatternCategory::NonTumor) => 0,
        RegionLabel::Pattern(PatternCategory::Gp3) => 1,
        RegionLabel::Pattern(PatternCategory::Gp4) => 2,
        RegionLabel::Pattern(PatternCategory::Gp5) => 3,
        RegionLabel::MixedGrade { primary, secondary } => {
            let p = primary.pattern_number().ok_or_else(|| CliError::domain("mixed grade with non-tumor part"))?;
            let s = secondary.pattern_number().ok_or_else(|| CliError::domain("mixed grade with non-tumor part"))?;
            (p as i64) * 10 + s as i64
        }
        RegionLabel::NonGradableTumor => 96,
        RegionLabel::Consult => 97,
        RegionLabel::Artifact => 98,
        RegionLabel::Unlabeled => 99,
    })
}

pub fn decode_label(code: i64) -> Option<RegionLabel> {
    match code {
        0 => Some(RegionLabel::Pattern(PatternCategory::NonTumor)),
        1 => Some(RegionLabel::Pattern(PatternCategory::Gp3)),
        2 => Some(RegionLabel::Pattern(PatternCategory::Gp4)),
        3 => Some(RegionLabel::Pattern(PatternCategory::Gp5)),
        96 => Some(RegionLabel::NonGradableTumor),
        97 => Some(RegionLabel::Consult),
        98 => Some(RegionLabel::Artifact),
        99 => Some(RegionLabel::Unlabeled),
        _ => {
            let primary = PatternCategory::from_pattern_number((code / 10) as u8)?;
            let secondary = PatternCategory::from_pattern_number((code % 10) as u8)?;
            RegionLabel::mixed(primary, secondary).ok()
        }
    }
}

pub fn write_mask_csv(path: &Path, mask: &LabelMask) -> Result<()> {
    let mut out = String::new();
    for row in 0..mask.rows() {
        for col in 0..mask.cols() {
            if col > 0 {
                out.push(',');
            }
            let code = encode_label(*mask.get_rc(row, col).expect("in bounds"))?;
            out.push_str(&code.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_mask_csv(path: &Path, stride_um: f64) -> Result<LabelMask> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut width = 0usize;
        for field in line.split(',') {
            let code: i64 = field
                .trim()
                .parse()
                .map_err(|_| CliError::schema(path, format!("line {}: bad code {field:?}", line_no + 1)))?;
            let label = decode_label(code)
                .ok_or_else(|| CliError::schema(path, format!("line {}: unknown label code {code}", line_no + 1)))?;
            values.push(label);
            width += 1;
        }
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(CliError::schema(path, format!("line {}: ragged row ({width} vs {c})", line_no + 1)))
            }
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CliError::schema(path, "empty mask"))?;
    PatchGrid::new(rows, cols, stride_um, values).map_err(|e| CliError::schema(path, e))
}

// ---------------------------------------------------------------------------
// Generic JSON

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::schema(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(path, e))
}

// ---------------------------------------------------------------------------
// Dataset directory

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub rows: usize,
    pub cols: usize,
    pub reference_gg: Option<GradeGroup>,
    pub reference_pcts: Option<GpPercentages>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub stride_um: f64,
    pub resolution_um_per_px: f64,
    pub config: SyntheticConfig,
    pub slides: Vec<SlideMeta>,
}

pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig, dataset: &SyntheticDataset) -> Result<()> {
    let mask_dir = dir.join(MASK_DIR);
    fs::create_dir_all(&mask_dir).map_err(|e| CliError::io(format!("creating {}", mask_dir.display()), e))?;

    let mut order: Vec<usize> = (0..dataset.slides.len()).collect();
    order.sort_by(|&a, &b| dataset.slides[a].slide_id.cmp(&dataset.slides[b].slide_id));

    let mut metas = Vec::with_capacity(order.len());
    for &i in &order {
        let slide = &dataset.slides[i];
        write_mask_csv(&mask_dir.join(format!("{}.csv", slide.slide_id)), &slide.mask)?;
        metas.push(SlideMeta {
            slide_id: slide.slide_id.clone(),
            rows: slide.mask.rows(),
            cols: slide.mask.cols(),
            reference_gg: slide.reference_gg,
            reference_pcts: slide.reference_pcts,
        });
    }
    let manifest = DatasetManifest {
        stride_um: DEFAULT_STRIDE_UM,
        resolution_um_per_px: DEFAULT_RESOLUTION_UM_PER_PX,
        config: cfg.clone(),
        slides: metas,
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    write_clinical_csv(&dir.join(CLINICAL_CSV), &dataset.clinical)?;
    if !dataset.ratings.is_empty() {
        write_ratings_csv(&dir.join(RATINGS_CSV), &dataset.ratings)?;
    }
    Ok(())
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub slides: Vec<SlideRecord>,
    pub clinical: Vec<ClinicalRecord>,
    pub ratings: Option<Vec<RaterRating>>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    let mut slides = Vec::with_capacity(manifest.slides.len());
    for meta in &manifest.slides {
        let mask_path = dir.join(MASK_DIR).join(format!("{}.csv", meta.slide_id));
        let mask = read_mask_csv(&mask_path, manifest.stride_um)?;
        if mask.rows() != meta.rows || mask.cols() != meta.cols {
            return Err(CliError::schema(
                &mask_path,
                format!("mask is {}x{} but the manifest says {}x{}", mask.rows(), mask.cols(), meta.rows, meta.cols),
            ));
        }
        let mut slide = SlideRecord::new(meta.slide_id.clone(), mask);
        slide.reference_gg = meta.reference_gg;
        slide.reference_pcts = meta.reference_pcts;
        slide.resolution_um_per_px = manifest.resolution_um_per_px;
        slide.validate()?;
        slides.push(slide);
    }
    let clinical = read_clinical_csv(&dir.join(CLINICAL_CSV))?;
    let ratings_path = dir.join(RATINGS_CSV);
    let ratings = if ratings_path.exists() { Some(read_ratings_csv(&ratings_path)?) } else { None };
    Ok(LoadedDataset { manifest, slides, clinical, ratings })
}

// ---------------------------------------------------------------------------
// Clinical + ratings CSV

pub fn write_clinical_csv(path: &Path, records: &[ClinicalRecord]) -> Result<()> {
    let mut rows: Vec<&ClinicalRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::schema(path, e))?;
    writer
        .write_record(["slide_id", "time_months", "event"])
        .map_err(|e| CliError::schema(path, e))?;
    for r in rows {
        writer
            .write_record([r.slide_id.as_str(), &format!("{:.6}", r.time_months), if r.event { "1" } else { "0" }])
            .map_err(|e| CliError::schema(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRecord>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), std::io::Error::other(e)))?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::schema(path, e))?;
        if row.len() != 3 {
            return Err(CliError::schema(path, format!("expected 3 columns, got {}", row.len())));
        }
        let time: f64 = row[1].parse().map_err(|_| CliError::schema(path, format!("bad time {:?}", &row[1])))?;
        let event = match &row[2] {
            "1" => true,
            "0" => false,
            other => return Err(CliError::schema(path, format!("bad event flag {other:?}"))),
        };
        records.push(ClinicalRecord::new(row[0].to_string(), time, event)?);
    }
    Ok(records)
}

fn subgroup_str(s: RaterSubgroup) -> &'static str {
    match s {
        RaterSubgroup::Ten => "ten",
        RaterSubgroup::Nineteen => "nineteen",
    }
}

fn grade_str(g: GradeGroup) -> &'static str {
    g.label()
}

fn parse_grade(text: &str) -> Option<GradeGroup> {
    GradeGroup::ALL.into_iter().find(|g| g.label() == text)
}

pub fn write_ratings_csv(path: &Path, ratings: &[RaterRating]) -> Result<()> {
    let mut rows: Vec<&RaterRating> = ratings.iter().collect();
    rows.sort_by(|a, b| (&a.slide_id, &a.rater_id).cmp(&(&b.slide_id, &b.rater_id)));
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::schema(path, e))?;
    writer
        .write_record(["slide_id", "rater_id", "subgroup", "grade_group"])
        .map_err(|e| CliError::schema(path, e))?;
    for r in rows {
        writer
            .write_record([r.slide_id.as_str(), r.rater_id.as_str(), subgroup_str(r.subgroup), grade_str(r.grade)])
            .map_err(|e| CliError::schema(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_ratings_csv(path: &Path) -> Result<Vec<RaterRating>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), std::io::Error::other(e)))?;
    let mut ratings = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::schema(path, e))?;
        if row.len() != 4 {
            return Err(CliError::schema(path, format!("expected 4 columns, got {}", row.len())));
        }
        let subgroup = match &row[2] {
            "ten" => RaterSubgroup::Ten,
            "nineteen" => RaterSubgroup::Nineteen,
            other => return Err(CliError::schema(path, format!("bad subgroup {other:?}"))),
        };
        let grade = parse_grade(&row[3])
            .ok_or_else(|| CliError::schema(path, format!("bad grade group {:?}", &row[3])))?;
        ratings.push(RaterRating {
            slide_id: row[0].to_string(),
            rater_id: row[1].to_string(),
            subgroup,
            grade,
        });
    }
    Ok(ratings)
}

// ---------------------------------------------------------------------------
// Heatmaps: JSON header + little-endian f32 quads

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapHeader {
    pub slide_id: String,
    pub rows: usize,
    pub cols: usize,
    pub stride_um: f64,
}

pub fn heatmap_paths(dir: &Path, slide_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{slide_id}.heatmap.json")), dir.join(format!("{slide_id}.heatmap.bin")))
}

pub fn write_heatmap(dir: &Path, slide_id: &str, map: &LikelihoodMap) -> Result<()> {
    let (header_path, bin_path) = heatmap_paths(dir, slide_id);
    let grid = map.grid();
    write_json(
        &header_path,
        &HeatmapHeader {
            slide_id: slide_id.to_string(),
            rows: grid.rows(),
            cols: grid.cols(),
            stride_um: grid.stride_um(),
        },
    )?;
    let mut bytes = Vec::with_capacity(grid.len() * 16);
    for quad in grid.values() {
        for &v in quad {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(&bin_path, bytes).map_err(|e| CliError::io(format!("writing {}", bin_path.display()), e))
}

pub fn read_heatmap(dir: &Path, slide_id: &str) -> Result<LikelihoodMap> {
    let (header_path, bin_path) = heatmap_paths(dir, slide_id);
    let header: HeatmapHeader = read_json(&header_path)?;
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(format!("reading {}", bin_path.display()), e))?;
    let expected = header.rows * header.cols * 16;
    if bytes.len() != expected {
        return Err(CliError::schema(&bin_path, format!("expected {expected} bytes, got {}", bytes.len())));
    }
    let mut values = Vec::with_capacity(header.rows * header.cols);
    for quad in bytes.chunks_exact(16) {
        let mut v = [0.0f64; 4];
        for (i, chunk) in quad.chunks_exact(4).enumerate() {
            v[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        // f32 quantization can leave the quad a few ulps off a unit sum.
        let sum: f64 = v.iter().sum();
        if sum > 0.0 {
            for x in &mut v {
                *x /= sum;
            }
        }
        values.push(v);
    }
    let grid = PatchGrid::new(header.rows, header.cols, header.stride_um, values)
        .map_err(|e| CliError::schema(&bin_path, e))?;
    LikelihoodMap::new(grid).map_err(|e| CliError::schema(&bin_path, e))
}

// ---------------------------------------------------------------------------
// Trained model

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingPoint {
    /// Rescaled feature vector.
    pub x: [f64; 4],
    pub grade: GradeGroup,
}

/// Single-document persistence of the trained stage-2 model: calibration
/// weights, rescaler bounds, k, and the rescaled training points. The
/// binary threshold models share the points with binarized labels, so they
/// are rebuilt at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub calibration_weights: [f64; 4],
    pub tuning_kappa: f64,
    pub rescaler: FeatureRescaler,
    pub k: usize,
    pub training_points: Vec<TrainingPoint>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub calibration: CalibrationWeights,
    pub tuning_kappa: f64,
    pub rescaler: FeatureRescaler,
    pub knn: KnnModel,
    pub binary: [BinaryKnnModel; 3],
}

impl TrainedModel {
    pub fn from_parts(
        calibration: CalibrationWeights,
        tuning_kappa: f64,
        rescaler: FeatureRescaler,
        points: Vec<([f64; 4], GradeGroup)>,
        k: usize,
    ) -> Result<Self> {
        let knn = KnnModel::fit(points.clone(), k)?;
        let binary = [
            BinaryKnnModel::from_grade_points(&points, GradeGroup::Gg2, k)?,
            BinaryKnnModel::from_grade_points(&points, GradeGroup::Gg3, k)?,
            BinaryKnnModel::from_grade_points(&points, GradeGroup::Gg4_5, k)?,
        ];
        Ok(TrainedModel { calibration, tuning_kappa, rescaler, knn, binary })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            calibration_weights: self.calibration.as_array(),
            tuning_kappa: self.tuning_kappa,
            rescaler: self.rescaler.clone(),
            k: self.knn.k(),
            training_points: self
                .knn
                .points()
                .iter()
                .map(|&(x, grade)| TrainingPoint { x, grade })
                .collect(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = read_json(path)?;
        let calibration = CalibrationWeights::new(file.calibration_weights)?;
        let points: Vec<([f64; 4], GradeGroup)> =
            file.training_points.iter().map(|p| (p.x, p.grade)).collect();
        Self::from_parts(calibration, file.tuning_kappa, file.rescaler, points, file.k)
    }
}

// ---------------------------------------------------------------------------
// Grades

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub slide_id: String,
    pub grade_group: GradeGroup,
    pub features: FeatureVector,
    pub binary_scores: BinaryScores,
    pub finegrained: FineGrainedFeatures,
}

pub fn write_grades(path: &Path, grades: &[GradeRecord]) -> Result<()> {
    write_json(path, &grades.to_vec())
}

pub fn read_grades(path: &Path) -> Result<Vec<GradeRecord>> {
    read_json(path)
}

/// Write CSV rows with a header; used for losses, ROC curves and KM curves.
pub fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::schema(path, e))?;
    writer.write_record(header).map_err(|e| CliError::schema(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| CliError::schema(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Format a float for CSV output: fixed precision, locale-free.
pub fn csv_f64(v: f64) -> String {
    format!("{v:.9}")
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

#[allow(unused_imports)]
use std::io::Write as _;

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn label_codes_round_trip() {
        use PatternCategory::*;
        let labels = [
            RegionLabel::Pattern(NonTumor),
            RegionLabel::Pattern(Gp3),
            RegionLabel::Pattern(Gp4),
            RegionLabel::Pattern(Gp5),
            RegionLabel::mixed(Gp3, Gp4).unwrap(),
            RegionLabel::mixed(Gp5, Gp4).unwrap(),
            RegionLabel::mixed(Gp4, Gp5).unwrap(),
            RegionLabel::NonGradableTumor,
            RegionLabel::Consult,
            RegionLabel::Artifact,
            RegionLabel::Unlabeled,
        ];
        for label in labels {
            let code = encode_label(label).unwrap();
            assert_eq!(decode_label(code), Some(label), "code {code}");
        }
        assert_eq!(encode_label(RegionLabel::mixed(Gp5, Gp4).unwrap()).unwrap(), 54);
        assert_eq!(decode_label(7), None);
        assert_eq!(decode_label(33), None); // mixed grade must differ
    }

    #[test]
    fn mask_csv_round_trips() {
        use PatternCategory::*;
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mask: LabelMask = PatchGrid::new(
            2,
            3,
            32.0,
            vec![
                RegionLabel::Pattern(NonTumor),
                RegionLabel::Pattern(Gp3),
                RegionLabel::mixed(Gp5, Gp4).unwrap(),
                RegionLabel::Artifact,
                RegionLabel::Consult,
                RegionLabel::Unlabeled,
            ],
        )
        .unwrap();
        write_mask_csv(&path, &mask).unwrap();
        let loaded = read_mask_csv(&path, 32.0).unwrap();
        assert_eq!(loaded.values(), mask.values());
        assert_eq!((loaded.rows(), loaded.cols()), (2, 3));
    }

    #[test]
    fn mask_csv_rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,1\n2\n").unwrap();
        assert!(matches!(read_mask_csv(&path, 32.0), Err(CliError::Schema { .. })));
        std::fs::write(&path, "0,x\n").unwrap();
        assert!(matches!(read_mask_csv(&path, 32.0), Err(CliError::Schema { .. })));
    }

    #[test]
    fn heatmap_round_trips_bit_exactly_at_f32() {
        let dir = tempdir().unwrap();
        let values = vec![[0.25, 0.25, 0.25, 0.25], [0.5, 0.125, 0.25, 0.125]];
        let map = LikelihoodMap::new(PatchGrid::new(1, 2, 32.0, values.clone()).unwrap()).unwrap();
        write_heatmap(dir.path(), "s1", &map).unwrap();
        let loaded = read_heatmap(dir.path(), "s1").unwrap();
        // These values are exactly representable in f32.
        assert_eq!(loaded.grid().values(), map.grid().values());
    }

    #[test]
    fn clinical_csv_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clinical.csv");
        let records = vec![
            ClinicalRecord::new("b", 12.5, true).unwrap(),
            ClinicalRecord::new("a", 3.125, false).unwrap(),
        ];
        write_clinical_csv(&path, &records).unwrap();
        let loaded = read_clinical_csv(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].slide_id, "a"); // sorted on write
        assert_eq!(loaded[1].time_months, 12.5);
        assert!(loaded[1].event);
    }

    #[test]
    fn model_file_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.json");
        let points = vec![
            ([0.1, 0.9, 0.0, 0.5], GradeGroup::Gg2),
            ([0.9, 0.0, 0.3, 0.1], GradeGroup::Gg4_5),
            ([0.2, 0.4, 0.4, 0.0], GradeGroup::Gg1),
        ];
        let model = TrainedModel::from_parts(
            CalibrationWeights::new([1.0, 2.0, 0.5, 4.0]).unwrap(),
            0.875,
            FeatureRescaler { min: [0.0; 4], max: [100.0, 100.0, 100.0, 50.0] },
            points,
            2,
        )
        .unwrap();
        model.save(&path).unwrap();
        let loaded = TrainedModel::load(&path).unwrap();
        assert_eq!(loaded.calibration.as_array(), model.calibration.as_array());
        assert_eq!(loaded.tuning_kappa, model.tuning_kappa);
        assert_eq!(loaded.rescaler, model.rescaler);
        assert_eq!(loaded.knn, model.knn);
        assert_eq!(loaded.binary, model.binary);
    }

    #[test]
    fn dataset_round_trips() {
        let cfg = SyntheticConfig { n_slides: 6, rows: 12, cols: 12, blob_size: [3, 12], ..Default::default() };
        let dataset = crate::synth::synth_generate(&cfg).unwrap();
        let dir = tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &dataset).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.slides.len(), 6);
        for (a, b) in loaded.slides.iter().zip(&dataset.slides) {
            assert_eq!(a.slide_id, b.slide_id);
            assert_eq!(a.mask.values(), b.mask.values());
            assert_eq!(a.reference_gg, b.reference_gg);
            assert_eq!(a.reference_pcts, b.reference_pcts);
        }
        assert_eq!(loaded.clinical.len(), 6);
        let ratings = loaded.ratings.unwrap();
        assert_eq!(ratings.len(), 6 * 13);
    }
}
