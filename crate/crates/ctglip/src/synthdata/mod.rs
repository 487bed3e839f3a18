//! Deterministic synthetic CT-like cohort: 3D volumes, organ masks, and
//! structured reports with plantable abnormalities.
//!
//! Organs are non-overlapping axis-aligned ellipsoids on a lattice; each
//! organ's interior intensity encodes its identity, and an abnormal organ
//! additionally carries a high-frequency checkerboard perturbation keyed
//! to the abnormality name. Every subject is a pure function of
//! `(master_seed, index)`, so parallel and serial generation agree
//! bitwise.

pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reportproc::{self, OrganLexicon, DEFAULT_NEGATION_PATTERNS};
use crate::seeding::{fnv1a, mix2, rng_from, SplitMix64};

/// Additive amplitude of the abnormality checkerboard texture.
pub const ABNORMALITY_AMPLITUDE: f64 = 0.1;
/// Background intensity is uniform in [0, this).
pub const BACKGROUND_LEVEL: f64 = 0.02;
/// Lowest organ intensity code.
pub const BASE_INTENSITY: f64 = 0.12;
/// Half-width of the uniform noise added inside organs.
pub const INTERIOR_NOISE: f64 = 0.01;
/// Smallest permitted ellipsoid semi-axis, in voxels.
const MIN_SEMI_AXIS: f64 = 1.25;

/// A scan: normalized intensities on a (depth, height, width) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    /// Voxel spacing in mm, metadata only.
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("volume contains non-finite intensities"));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("volume spacing must be positive"));
        }
        Ok(Volume { voxels, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.voxels.dim();
        [d.0, d.1, d.2]
    }
}

/// Voxelwise organ labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganMask {
    pub labels: Array3<u16>,
}

impl OrganMask {
    /// Distinct nonzero labels, ascending.
    pub fn organ_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().map(u32::from).collect()
    }

    /// Number of voxels carrying `organ_id`.
    pub fn organ_volume(&self, organ_id: u32) -> usize {
        self.labels.iter().filter(|&&l| u32::from(l) == organ_id).count()
    }
}

/// Per-subject labels used by oracles and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Organ IDs present in the subject, ascending.
    pub present: Vec<u32>,
    /// Abnormal organs: organ ID -> planted abnormality name.
    pub abnormalities: BTreeMap<u32, String>,
    /// Planted mean interior intensity per present organ.
    pub intensity_codes: BTreeMap<u32, f64>,
}

impl GroundTruth {
    pub fn is_abnormal(&self, organ_id: u32) -> bool {
        self.abnormalities.contains_key(&organ_id)
    }

    fn check(&self) -> Result<()> {
        let present: BTreeSet<u32> = self.present.iter().copied().collect();
        if self.abnormalities.keys().any(|id| !present.contains(id)) {
            return Err(Error::validation(
                "ground truth lists an abnormality for an absent organ",
            ));
        }
        Ok(())
    }
}

/// One organ the generator can place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub id: u32,
    pub name: String,
    /// Abnormality names this organ can carry; empty means always normal.
    #[serde(default)]
    pub abnormalities: Vec<String>,
}

fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_margin() -> f64 {
    0.05
}

fn default_normal_sentence_rate() -> f64 {
    0.75
}

/// Recipe for a deterministic synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub organs: Vec<OrganSpec>,
    /// Per-organ probability of planting an abnormality.
    pub abnormality_rate: f64,
    /// Volume shape (depth, height, width).
    pub shape: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub master_seed: u64,
    /// Guaranteed gap between organ intensity codes.
    #[serde(default = "default_margin")]
    pub intensity_margin: f64,
    /// Probability that a normal organ gets a report sentence at all.
    #[serde(default = "default_normal_sentence_rate")]
    pub normal_sentence_rate: f64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abnormality_rate) {
            return Err(Error::validation(format!(
                "abnormality_rate {} outside [0, 1]",
                self.abnormality_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.normal_sentence_rate) {
            return Err(Error::validation(format!(
                "normal_sentence_rate {} outside [0, 1]",
                self.normal_sentence_rate
            )));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::validation("volume shape has a zero extent"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("voxel spacing must be positive"));
        }
        if !(self.intensity_margin > 0.0) {
            return Err(Error::validation("intensity_margin must be positive"));
        }
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for organ in &self.organs {
            if organ.id == 0 || organ.id > u32::from(u16::MAX) {
                return Err(Error::validation(format!(
                    "organ id {} outside 1..=65535 (0 is background; masks store u16)",
                    organ.id
                )));
            }
            if !ids.insert(organ.id) {
                return Err(Error::validation(format!("duplicate organ id {}", organ.id)));
            }
            let lower = organ.name.to_lowercase();
            if lower.trim().is_empty() {
                return Err(Error::validation(format!("organ {} has an empty name", organ.id)));
            }
            if !names.insert(lower.clone()) {
                return Err(Error::validation(format!(
                    "duplicate organ name '{}'",
                    organ.name
                )));
            }
            for pattern in DEFAULT_NEGATION_PATTERNS {
                if reportproc::mentions(&lower, pattern) {
                    return Err(Error::validation(format!(
                        "organ name '{}' contains negation pattern '{pattern}'",
                        organ.name
                    )));
                }
            }
            let mut seen = BTreeSet::new();
            for abn in &organ.abnormalities {
                let abn_lower = abn.to_lowercase();
                if abn_lower.trim().is_empty() {
                    return Err(Error::validation(format!(
                        "organ '{}' has an empty abnormality name",
                        organ.name
                    )));
                }
                if !seen.insert(abn_lower.clone()) {
                    return Err(Error::validation(format!(
                        "organ '{}' lists abnormality '{abn}' twice",
                        organ.name
                    )));
                }
                for pattern in DEFAULT_NEGATION_PATTERNS {
                    if reportproc::mentions(&abn_lower, pattern) {
                        return Err(Error::validation(format!(
                            "abnormality '{abn}' contains negation pattern '{pattern}'",
                        )));
                    }
                }
            }
        }
        // An abnormality naming a *different* organ would make the generated
        // sentence ambiguous and unparseable.
        for organ in &self.organs {
            for abn in &organ.abnormalities {
                let abn_lower = abn.to_lowercase();
                for other in &self.organs {
                    if other.id != organ.id
                        && reportproc::mentions(&abn_lower, &other.name.to_lowercase())
                    {
                        return Err(Error::validation(format!(
                            "abnormality '{abn}' of organ '{}' mentions organ '{}'",
                            organ.name, other.name
                        )));
                    }
                }
            }
        }
        let k = self.organs.len();
        if k > 0 {
            let top = BASE_INTENSITY
                + (k - 1) as f64 * 2.0 * self.intensity_margin
                + ABNORMALITY_AMPLITUDE
                + INTERIOR_NOISE;
            if top > 1.0 {
                return Err(Error::validation(format!(
                    "intensity codes for {k} organs at margin {} exceed 1.0; \
                     reduce the organ count or the margin",
                    self.intensity_margin
                )));
            }
        }
        Ok(())
    }

    /// Organs sorted by ID — the canonical generation and pooling order.
    pub fn sorted_organs(&self) -> Vec<&OrganSpec> {
        let mut organs: Vec<&OrganSpec> = self.organs.iter().collect();
        organs.sort_by_key(|o| o.id);
        organs
    }

    /// Planted mean interior intensity for the organ ranked `rank` by ID.
    pub fn intensity_code(&self, rank: usize) -> f64 {
        BASE_INTENSITY + rank as f64 * 2.0 * self.intensity_margin
    }

    /// Lexicon over this spec's organs (canonical names, no synonyms).
    pub fn lexicon(&self) -> Result<OrganLexicon> {
        OrganLexicon::new(
            self.organs
                .iter()
                .map(|o| (o.id, o.name.clone(), Vec::new()))
                .collect(),
        )
    }

    pub fn organ_name(&self, id: u32) -> Option<&str> {
        self.organs.iter().find(|o| o.id == id).map(|o| o.name.as_str())
    }
}

/// Everything generated for one subject.
#[derive(Debug, Clone)]
pub struct SubjectSample {
    pub subject_id: usize,
    pub volume: Volume,
    pub mask: OrganMask,
    pub ground_truth: GroundTruth,
    pub report: String,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let dz = (z as f64 + 0.5 - self.center[0]) / self.semi_axes[0];
        let dy = (y as f64 + 0.5 - self.center[1]) / self.semi_axes[1];
        let dx = (x as f64 + 0.5 - self.center[2]) / self.semi_axes[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

/// Smallest near-cubic lattice with at least `k` cells.
fn lattice_dims(k: usize) -> [usize; 3] {
    if k == 0 {
        return [1, 1, 1];
    }
    let mut gz = 1usize;
    while gz * gz * gz < k {
        gz += 1;
    }
    let mut gy = 1usize;
    while gz * gy * gy < k {
        gy += 1;
    }
    let mut gx = 1usize;
    while gz * gy * gx < k {
        gx += 1;
    }
    [gz, gy, gx]
}

/// Checkerboard sign (+1/-1) for the abnormality named by `hash`.
fn checker_sign(hash: u64, z: usize, y: usize, x: usize) -> f64 {
    let pz = 1 + ((hash >> 2) & 1) as usize;
    let py = 1 + ((hash >> 1) & 1) as usize;
    let px = 1 + (hash & 1) as usize;
    let phase = ((hash >> 3) & 1) as usize;
    if ((z / pz) + (y / py) + (x / px) + phase) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Generate one subject. Pure in `(spec.master_seed, index)`.
pub fn generate_subject(spec: &CohortSpec, index: usize) -> Result<SubjectSample> {
    spec.validate()?;
    if index >= spec.n_subjects {
        return Err(Error::validation(format!(
            "subject index {index} out of range for cohort of {}",
            spec.n_subjects
        )));
    }
    let subject_seed = mix2(spec.master_seed, index as u64);
    let organs = spec.sorted_organs();
    let [d, h, w] = spec.shape;

    // 1. Geometry: one ellipsoid per organ, strictly inside its lattice cell.
    let grid = lattice_dims(organs.len());
    let cell = [
        d as f64 / grid[0] as f64,
        h as f64 / grid[1] as f64,
        w as f64 / grid[2] as f64,
    ];
    let mut rng_geom = rng_from(mix2(subject_seed, 1));
    let mut placements = Vec::with_capacity(organs.len());
    for (rank, _organ) in organs.iter().enumerate() {
        let iz = rank / (grid[1] * grid[2]);
        let iy = (rank / grid[2]) % grid[1];
        let ix = rank % grid[2];
        let cell_min = [iz as f64 * cell[0], iy as f64 * cell[1], ix as f64 * cell[2]];
        let mut center = [0.0; 3];
        let mut semi_axes = [0.0; 3];
        for axis in 0..3 {
            let ratio = 0.55 + 0.25 * rng_geom.gen::<f64>();
            let a = ratio * cell[axis] / 2.0;
            if a < MIN_SEMI_AXIS {
                return Err(Error::PlacementInfeasible(format!(
                    "shape {:?} is too small to place {} organs: lattice cell \
                     extent {:.2} cannot hold a semi-axis of {MIN_SEMI_AXIS}",
                    spec.shape,
                    organs.len(),
                    cell[axis]
                )));
            }
            let lo = cell_min[axis] + a + 0.01;
            let hi = cell_min[axis] + cell[axis] - a - 0.01;
            center[axis] = lo + rng_geom.gen::<f64>() * (hi - lo);
            semi_axes[axis] = a;
        }
        placements.push(Ellipsoid { center, semi_axes });
    }

    // 2. Rasterize the mask.
    let mut labels = Array3::<u16>::zeros((d, h, w));
    for (rank, organ) in organs.iter().enumerate() {
        let e = placements[rank];
        let z0 = (e.center[0] - e.semi_axes[0]).floor().max(0.0) as usize;
        let z1 = ((e.center[0] + e.semi_axes[0]).ceil() as usize).min(d);
        let y0 = (e.center[1] - e.semi_axes[1]).floor().max(0.0) as usize;
        let y1 = ((e.center[1] + e.semi_axes[1]).ceil() as usize).min(h);
        let x0 = (e.center[2] - e.semi_axes[2]).floor().max(0.0) as usize;
        let x1 = ((e.center[2] + e.semi_axes[2]).ceil() as usize).min(w);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    if e.contains(z, y, x) {
                        labels[[z, y, x]] = organ.id as u16;
                    }
                }
            }
        }
    }

    // 3. Abnormality assignment, in organ-ID order.
    let mut rng_path = rng_from(mix2(subject_seed, 2));
    let mut abnormalities = BTreeMap::new();
    let mut intensity_codes = BTreeMap::new();
    for (rank, organ) in organs.iter().enumerate() {
        intensity_codes.insert(organ.id, spec.intensity_code(rank));
        let roll: f64 = rng_path.gen();
        if roll < spec.abnormality_rate && !organ.abnormalities.is_empty() {
            let pick = rng_path.gen_range(0..organ.abnormalities.len());
            abnormalities.insert(organ.id, organ.abnormalities[pick].clone());
        }
    }

    // 4. Fill the volume in one voxel pass over a dedicated noise stream.
    let code_of: BTreeMap<u16, f64> = organs
        .iter()
        .enumerate()
        .map(|(rank, o)| (o.id as u16, spec.intensity_code(rank)))
        .collect();
    let checker_of: BTreeMap<u16, u64> = organs
        .iter()
        .filter_map(|o| {
            abnormalities
                .get(&o.id)
                .map(|abn| (o.id as u16, fnv1a(abn.to_lowercase().as_bytes())))
        })
        .collect();
    let mut noise = SplitMix64::new(mix2(subject_seed, 3));
    let mut voxels = Array3::<f32>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = noise.next_unit_f64();
                let label = labels[[z, y, x]];
                let value = if label == 0 {
                    u * BACKGROUND_LEVEL
                } else {
                    let mut v = code_of[&label] + (2.0 * u - 1.0) * INTERIOR_NOISE;
                    if let Some(&hash) = checker_of.get(&label) {
                        v += ABNORMALITY_AMPLITUDE * checker_sign(hash, z, y, x);
                    }
                    v
                };
                voxels[[z, y, x]] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }

    // 5. Report: abnormal organs always get a sentence naming the
    //    abnormality; normal organs are sometimes silent.
    let mut rng_report = rng_from(mix2(subject_seed, 4));
    let mut sentences = Vec::new();
    for organ in &organs {
        let name = organ.name.to_lowercase();
        if let Some(abn) = abnormalities.get(&organ.id) {
            let abn = abn.to_lowercase();
            let s = match rng_report.gen_range(0..3u32) {
                0 => format!("The {name} shows {abn}."),
                1 => format!("There is {abn} in the {name}."),
                _ => format!("Findings in the {name} are consistent with {abn}."),
            };
            sentences.push(s);
        } else {
            let speak: f64 = rng_report.gen();
            if speak < spec.normal_sentence_rate {
                let s = match rng_report.gen_range(0..3u32) {
                    0 => format!("The {name} is unremarkable."),
                    1 => format!("No evident abnormality in the {name}."),
                    _ => format!("The {name} appears normal."),
                };
                sentences.push(s);
            }
        }
    }

    // Never emit an empty report: a subject whose normal organs all stay
    // silent still gets a global statement (it names no organ, so parsing
    // routes it to `unassigned`).
    if sentences.is_empty() {
        sentences.push("No significant findings.".to_string());
    }

    let ground_truth = GroundTruth {
        present: organs.iter().map(|o| o.id).collect(),
        abnormalities,
        intensity_codes,
    };
    ground_truth.check()?;
    Ok(SubjectSample {
        subject_id: index,
        volume: Volume::new(voxels, spec.spacing)?,
        mask: OrganMask { labels },
        ground_truth,
        report: sentences.join(" "),
    })
}

/// Generate the whole cohort in memory, in subject order.
pub fn generate_cohort_in_memory(spec: &CohortSpec) -> Result<Vec<SubjectSample>> {
    use rayon::prelude::*;
    spec.validate()?;
    (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i))
        .collect()
}
