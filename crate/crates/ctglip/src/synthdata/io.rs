//! On-disk cohort layout: JSON header sidecars next to raw little-endian
//! arrays, plus a JSONL manifest tying each subject's files together.
//!
//! A volume is `{stem}.json` + `{stem}.raw` (f32, x-fastest); a mask uses
//! the same scheme with dtype `u16`. Manifest paths are relative to the
//! cohort directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{generate_subject, CohortSpec, GroundTruth, OrganMask, SubjectSample, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    byte_order: String,
}

impl ArrayHeader {
    fn check(&self, path: &Path, want_dtype: &str) -> Result<()> {
        if self.dtype != want_dtype {
            return Err(Error::parse(
                path,
                format!("dtype '{}' where '{want_dtype}' was expected", self.dtype),
            ));
        }
        if self.byte_order != "little" {
            return Err(Error::parse(
                path,
                format!("unsupported byte order '{}'", self.byte_order),
            ));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::parse(path, "zero extent in dims"));
        }
        Ok(())
    }
}

fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn read_header(path: &Path, want_dtype: &str) -> Result<ArrayHeader> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: ArrayHeader =
        serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
    header.check(path, want_dtype)?;
    Ok(header)
}

fn write_header(path: &Path, header: &ArrayHeader) -> Result<()> {
    let raw = serde_json::to_string_pretty(header).expect("header serializes");
    std::fs::write(path, raw).map_err(|e| Error::io(path, e))
}

/// Write `{stem}.json` + `{stem}.raw` under `dir`; returns the header
/// filename.
pub fn save_volume(dir: &Path, stem: &str, volume: &Volume) -> Result<String> {
    let [d, h, w] = volume.shape();
    let header = ArrayHeader {
        dims: [d, h, w],
        spacing: volume.spacing,
        dtype: "f32".to_string(),
        byte_order: "little".to_string(),
    };
    let header_name = format!("{stem}.json");
    write_header(&dir.join(&header_name), &header)?;
    let mut bytes = Vec::with_capacity(d * h * w * 4);
    for &v in volume.voxels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = dir.join(format!("{stem}.raw"));
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    Ok(header_name)
}

pub fn load_volume(header_path: &Path) -> Result<Volume> {
    let header = read_header(header_path, "f32")?;
    let raw = raw_path(header_path);
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let [d, h, w] = header.dims;
    let expected = d * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            &raw,
            format!("raw file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec((d, h, w), values).expect("length checked");
    Volume::new(voxels, header.spacing)
}

/// Write a mask as `{stem}.json` + `{stem}.raw` (dtype u16).
pub fn save_mask(dir: &Path, stem: &str, mask: &OrganMask) -> Result<String> {
    let (d, h, w) = mask.labels.dim();
    let header = ArrayHeader {
        dims: [d, h, w],
        spacing: [1.0, 1.0, 1.0],
        dtype: "u16".to_string(),
        byte_order: "little".to_string(),
    };
    let header_name = format!("{stem}.json");
    write_header(&dir.join(&header_name), &header)?;
    let mut bytes = Vec::with_capacity(d * h * w * 2);
    for &l in mask.labels.iter() {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    let raw = dir.join(format!("{stem}.raw"));
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    Ok(header_name)
}

pub fn load_mask(header_path: &Path) -> Result<OrganMask> {
    let header = read_header(header_path, "u16")?;
    let raw = raw_path(header_path);
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let [d, h, w] = header.dims;
    let expected = d * h * w * 2;
    if bytes.len() != expected {
        return Err(Error::parse(
            &raw,
            format!("raw file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let values: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let labels = Array3::from_shape_vec((d, h, w), values).expect("length checked");
    Ok(OrganMask { labels })
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: usize,
    pub volume_path: String,
    pub mask_path: String,
    pub report_path: String,
    pub ground_truth: GroundTruth,
}

/// Index of a generated cohort directory.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
            records.push(record);
        }
        let ids: BTreeSet<usize> = records.iter().map(|r| r.subject_id).collect();
        if ids.len() != records.len() {
            return Err(Error::parse(path, "duplicate subject_id"));
        }
        Ok(Manifest { records })
    }
}

/// Generate the cohort under `out_dir` and return the manifest (also
/// written there as `manifest.jsonl`). Re-running with the same spec
/// reproduces byte-identical files.
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<Manifest> {
    use rayon::prelude::*;
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<ManifestRecord> = (0..spec.n_subjects)
        .into_par_iter()
        .map(|index| -> Result<ManifestRecord> {
            let sample = generate_subject(spec, index)?;
            write_subject(out_dir, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { records };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Write one subject's files; returns its manifest record.
pub fn write_subject(out_dir: &Path, sample: &SubjectSample) -> Result<ManifestRecord> {
    let id = sample.subject_id;
    let volume_path = save_volume(out_dir, &format!("s{id:05}_volume"), &sample.volume)?;
    let mask_path = save_mask(out_dir, &format!("s{id:05}_mask"), &sample.mask)?;
    let report_path = format!("s{id:05}_report.txt");
    let report_file = out_dir.join(&report_path);
    std::fs::write(&report_file, &sample.report).map_err(|e| Error::io(&report_file, e))?;
    Ok(ManifestRecord {
        subject_id: id,
        volume_path,
        mask_path,
        report_path,
        ground_truth: sample.ground_truth.clone(),
    })
}

/// Rehydrate one subject from its manifest record.
pub fn load_subject(cohort_dir: &Path, record: &ManifestRecord) -> Result<SubjectSample> {
    let volume = load_volume(&cohort_dir.join(&record.volume_path))?;
    let mask = load_mask(&cohort_dir.join(&record.mask_path))?;
    let report_file = cohort_dir.join(&record.report_path);
    let report = std::fs::read_to_string(&report_file).map_err(|e| Error::io(&report_file, e))?;
    if volume.shape() != {
        let (d, h, w) = mask.labels.dim();
        [d, h, w]
    } {
        return Err(Error::validation(format!(
            "subject {}: volume and mask shapes differ",
            record.subject_id
        )));
    }
    Ok(SubjectSample {
        subject_id: record.subject_id,
        volume,
        mask,
        ground_truth: record.ground_truth.clone(),
        report,
    })
}

/// Load every subject listed in a cohort directory's manifest.
pub fn load_cohort(cohort_dir: &Path) -> Result<Vec<SubjectSample>> {
    let manifest = Manifest::load(&cohort_dir.join(MANIFEST_NAME))?;
    manifest
        .records
        .iter()
        .map(|r| load_subject(cohort_dir, r))
        .collect()
}
