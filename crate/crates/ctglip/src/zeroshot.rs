//! The two inference protocols: K-way organ classification of pooled
//! region embeddings against organ-name templates, and binary
//! abnormality detection by comparing one region against a
//! positive/negative text pair.
//!
//! Both are read-only over the model and trivially parallel across
//! subjects; evaluation drivers for whole cohorts live here too.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abnodict::AbnormalityDictionary;
use crate::encoders::{CtGlipModel, TextEncoder};
use crate::error::{Error, Result};
use crate::metrics::{auc, top1_accuracy, BinaryOutcomes};
use crate::reportproc::{normal_template, OrganLexicon, Polarity};
use crate::synthdata::{OrganMask, SubjectSample, Volume};

/// One abnormality query: a positive (abnormal) and negative (normal)
/// text for a specific organ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbnormalityProbe {
    pub organ_id: u32,
    pub abnormality: String,
    pub positive_text: String,
    pub negative_text: String,
}

impl AbnormalityProbe {
    pub fn new(
        organ_id: u32,
        abnormality: impl Into<String>,
        positive_text: impl Into<String>,
        negative_text: impl Into<String>,
    ) -> Result<Self> {
        let probe = AbnormalityProbe {
            organ_id,
            abnormality: abnormality.into(),
            positive_text: positive_text.into(),
            negative_text: negative_text.into(),
        };
        if probe.abnormality.trim().is_empty()
            || probe.positive_text.trim().is_empty()
            || probe.negative_text.trim().is_empty()
        {
            return Err(Error::validation("probe fields must be non-empty"));
        }
        if probe.positive_text == probe.negative_text {
            return Err(Error::validation(format!(
                "probe for '{}' has identical positive and negative texts",
                probe.abnormality
            )));
        }
        Ok(probe)
    }
}

/// On-disk probe row; organs are referenced by lexicon name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeRecord {
    organ: String,
    abnormality: String,
    positive_text: String,
    negative_text: String,
}

/// Load a JSON array of probes, resolving organ names via the lexicon.
pub fn load_probes(path: &Path, lexicon: &OrganLexicon) -> Result<Vec<AbnormalityProbe>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<ProbeRecord> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    records
        .into_iter()
        .map(|r| {
            let organ_id = lexicon.id_of(&r.organ).ok_or_else(|| {
                Error::parse(path, format!("probe organ '{}' is not in the lexicon", r.organ))
            })?;
            AbnormalityProbe::new(organ_id, r.abnormality, r.positive_text, r.negative_text)
                .map_err(|e| Error::parse(path, e.to_string()))
        })
        .collect()
}

/// Write probes as the JSON array format read by [`load_probes`].
pub fn save_probes(
    path: &Path,
    probes: &[AbnormalityProbe],
    lexicon: &OrganLexicon,
) -> Result<()> {
    let records: Vec<ProbeRecord> = probes
        .iter()
        .map(|p| {
            let organ = lexicon.name(p.organ_id).ok_or_else(|| {
                Error::validation(format!("probe organ {} is not in the lexicon", p.organ_id))
            })?;
            Ok(ProbeRecord {
                organ: organ.to_string(),
                abnormality: p.abnormality.clone(),
                positive_text: p.positive_text.clone(),
                negative_text: p.negative_text.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::validation(format!("unserializable probes: {e}")))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// One probe per dictionary entry: positive "{abnormality} in the
/// {organ}", negative the organ's normal template.
pub fn default_probes(
    dictionary: &AbnormalityDictionary,
    lexicon: &OrganLexicon,
) -> Result<Vec<AbnormalityProbe>> {
    let mut probes = Vec::new();
    for organ_id in dictionary.organ_ids() {
        let name = lexicon.name(organ_id).ok_or_else(|| {
            Error::validation(format!("dictionary organ {organ_id} is not in the lexicon"))
        })?;
        for abnormality in dictionary.entries_for(organ_id) {
            probes.push(AbnormalityProbe::new(
                organ_id,
                abnormality.clone(),
                format!("{abnormality} in the {name}"),
                normal_template(name)?,
            )?);
        }
    }
    Ok(probes)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Organ-template embeddings as an ascending-ID list.
pub fn organ_templates(
    lexicon: &OrganLexicon,
    encoder: &dyn TextEncoder,
) -> Result<Vec<(u32, Vec<f64>)>> {
    Ok(crate::trainer::encode_templates(lexicon, encoder)?
        .into_iter()
        .collect())
}

/// Cosine-nearest template; ties resolve to the lowest organ ID. The
/// query need not be normalized — cosine ignores its scale.
pub fn nearest_organ(embedding: &[f64], templates: &[(u32, Vec<f64>)]) -> Result<u32> {
    if templates.is_empty() {
        return Err(Error::validation("no organ templates to classify against"));
    }
    let norm = dot(embedding, embedding).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::validation(format!(
            "cannot classify a degenerate embedding (norm {norm})"
        )));
    }
    let mut best_id = templates[0].0;
    let mut best = f64::NEG_INFINITY;
    for (id, t) in templates {
        let cos = dot(embedding, t) / (norm * dot(t, t).sqrt());
        if cos > best || (cos == best && *id < best_id) {
            best = cos;
            best_id = *id;
        }
    }
    Ok(best_id)
}

/// Classify every masked region against precomputed templates: map from
/// the region's mask label (ground-truth ID) to the predicted organ ID.
pub fn classify_regions(
    model: &CtGlipModel,
    volume: &Volume,
    mask: &OrganMask,
    templates: &[(u32, Vec<f64>)],
) -> Result<BTreeMap<u32, u32>> {
    let feature_map = model.encode_volume(volume)?;
    let embeddings = model.organ_pool(&feature_map, mask)?;
    embeddings
        .iter()
        .map(|e| Ok((e.organ_id, nearest_organ(&e.vector, templates)?)))
        .collect()
}

/// K-way zero-shot organ classification of one subject's regions.
pub fn classify_organs(
    model: &CtGlipModel,
    volume: &Volume,
    mask: &OrganMask,
    lexicon: &OrganLexicon,
    encoder: &dyn TextEncoder,
) -> Result<BTreeMap<u32, u32>> {
    let templates = organ_templates(lexicon, encoder)?;
    classify_regions(model, volume, mask, &templates)
}

/// Two-way softmax of similarities at temperature τ, computed as a
/// stable sigmoid of the gap.
pub fn two_way_score(s_pos: f64, s_neg: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation(format!("tau {tau} must be positive")));
    }
    let gap = (s_pos - s_neg) / tau;
    Ok(if gap >= 0.0 {
        1.0 / (1.0 + (-gap).exp())
    } else {
        let e = gap.exp();
        e / (1.0 + e)
    })
}

/// Binary zero-shot abnormality detection on one subject: score in
/// (0, 1) and the higher-similarity label; an exact tie reads as normal.
pub fn detect_abnormality(
    model: &CtGlipModel,
    volume: &Volume,
    mask: &OrganMask,
    probe: &AbnormalityProbe,
    tau: f64,
    encoder: &dyn TextEncoder,
) -> Result<(f64, Polarity)> {
    let feature_map = model.encode_volume(volume)?;
    let embeddings = model.organ_pool(&feature_map, mask)?;
    let region = embeddings
        .iter()
        .find(|e| e.organ_id == probe.organ_id)
        .ok_or_else(|| {
            Error::validation(format!(
                "probe organ {} is absent from the subject's mask",
                probe.organ_id
            ))
        })?;
    let texts = encoder.encode(&[&probe.positive_text, &probe.negative_text])?;
    let s_pos = dot(&region.vector, &texts[0].vector);
    let s_neg = dot(&region.vector, &texts[1].vector);
    let score = two_way_score(s_pos, s_neg, tau)?;
    let label = if s_pos > s_neg {
        Polarity::Abnormal
    } else {
        Polarity::Normal
    };
    Ok((score, label))
}

/// One region's classification outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganPrediction {
    #[serde(rename = "subject")]
    pub subject_id: usize,
    #[serde(rename = "organ")]
    pub organ_id: u32,
    #[serde(rename = "predicted")]
    pub predicted_id: u32,
}

/// Classify every region of every subject; returns the per-region rows
/// and the cohort top-1 accuracy.
pub fn evaluate_organ_classification(
    model: &CtGlipModel,
    subjects: &[SubjectSample],
    lexicon: &OrganLexicon,
    encoder: &dyn TextEncoder,
) -> Result<(Vec<OrganPrediction>, f64)> {
    let templates = organ_templates(lexicon, encoder)?;
    let per_subject: Vec<Vec<OrganPrediction>> = subjects
        .par_iter()
        .map(|s| {
            let assignments = classify_regions(model, &s.volume, &s.mask, &templates)?;
            Ok(assignments
                .into_iter()
                .map(|(organ_id, predicted_id)| OrganPrediction {
                    subject_id: s.subject_id,
                    organ_id,
                    predicted_id,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<OrganPrediction> = per_subject.into_iter().flatten().collect();
    let pred: Vec<u32> = rows.iter().map(|r| r.predicted_id).collect();
    let truth: Vec<u32> = rows.iter().map(|r| r.organ_id).collect();
    let top1 = top1_accuracy(&pred, &truth)?;
    Ok((rows, top1))
}

/// One probe applied to one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    #[serde(rename = "subject")]
    pub subject_id: usize,
    #[serde(rename = "organ")]
    pub organ_id: u32,
    pub abnormality: String,
    pub score: f64,
    pub label: Polarity,
    pub ground_truth: Polarity,
}

/// Run every applicable probe on every subject. A probe applies when its
/// organ is in the subject's mask; ground truth is positive only when
/// the subject's recorded abnormality for that organ equals the probe's.
pub fn evaluate_abnormality_detection(
    model: &CtGlipModel,
    subjects: &[SubjectSample],
    probes: &[AbnormalityProbe],
    tau: f64,
    encoder: &dyn TextEncoder,
) -> Result<Vec<ProbeOutcome>> {
    let probe_texts: Vec<(Vec<f64>, Vec<f64>)> = probes
        .iter()
        .map(|p| {
            let e = encoder.encode(&[&p.positive_text, &p.negative_text])?;
            Ok((e[0].vector.clone(), e[1].vector.clone()))
        })
        .collect::<Result<_>>()?;
    let per_subject: Vec<Vec<ProbeOutcome>> = subjects
        .par_iter()
        .map(|s| {
            let feature_map = model.encode_volume(&s.volume)?;
            let embeddings = model.organ_pool(&feature_map, &s.mask)?;
            let by_id: BTreeMap<u32, &[f64]> = embeddings
                .iter()
                .map(|e| (e.organ_id, e.vector.as_slice()))
                .collect();
            let mut rows = Vec::new();
            for (probe, (pos, neg)) in probes.iter().zip(&probe_texts) {
                let Some(region) = by_id.get(&probe.organ_id) else {
                    continue;
                };
                let s_pos = dot(region, pos);
                let s_neg = dot(region, neg);
                let score = two_way_score(s_pos, s_neg, tau)?;
                let label = if s_pos > s_neg {
                    Polarity::Abnormal
                } else {
                    Polarity::Normal
                };
                let ground_truth = if s.ground_truth.abnormalities.get(&probe.organ_id)
                    == Some(&probe.abnormality)
                {
                    Polarity::Abnormal
                } else {
                    Polarity::Normal
                };
                rows.push(ProbeOutcome {
                    subject_id: s.subject_id,
                    organ_id: probe.organ_id,
                    abnormality: probe.abnormality.clone(),
                    score,
                    label,
                    ground_truth,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// AUC of probe scores against ground truth.
pub fn abnormality_auc(outcomes: &[ProbeOutcome]) -> Result<f64> {
    let mut binary = BinaryOutcomes::new();
    for o in outcomes {
        binary.push(o.score, o.ground_truth == Polarity::Abnormal);
    }
    auc(&binary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{HashedTextEncoder, ModelConfig};
    use crate::synthdata::{generate_subject, tests::demo_spec};
    use ndarray::Array3;
    use tempfile::tempdir;

    fn demo_lexicon() -> OrganLexicon {
        demo_spec(1, 0).lexicon().unwrap()
    }

    fn demo_dictionary(lexicon: &OrganLexicon) -> AbnormalityDictionary {
        let spec = demo_spec(1, 0);
        let named: std::collections::BTreeMap<String, Vec<String>> = spec
            .organs
            .iter()
            .map(|o| (o.name.clone(), o.abnormalities.clone()))
            .collect();
        AbnormalityDictionary::from_named(&named, lexicon).unwrap()
    }

    fn small_model() -> CtGlipModel {
        CtGlipModel::new(
            ModelConfig {
                channels: vec![4],
                kernel: 3,
                embed_dim: 16,
                hidden: 8,
                n_classes: 9,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn template_embedding_classifies_as_its_own_organ() {
        let lexicon = demo_lexicon();
        let encoder = HashedTextEncoder::new(16, 5).unwrap();
        let templates = organ_templates(&lexicon, &encoder).unwrap();
        for (id, vector) in &templates {
            assert_eq!(nearest_organ(vector, &templates).unwrap(), *id);
            // scale invariance: rescaling before normalization is a no-op
            let scaled: Vec<f64> = vector.iter().map(|v| v * 37.5).collect();
            assert_eq!(nearest_organ(&scaled, &templates).unwrap(), *id);
        }
    }

    #[test]
    fn exact_tie_prefers_the_lowest_organ_id() {
        let v = vec![1.0, 0.0];
        let templates = vec![(7u32, v.clone()), (3u32, v.clone())];
        assert_eq!(nearest_organ(&v, &templates).unwrap(), 3);
        assert!(nearest_organ(&v, &[]).is_err());
        assert!(nearest_organ(&[0.0, 0.0], &templates).is_err());
    }

    #[test]
    fn two_way_score_closed_forms() {
        assert_eq!(two_way_score(0.3, 0.3, 0.07).unwrap(), 0.5);
        let s = two_way_score(1.0, -1.0, 1.0).unwrap();
        let expected = std::f64::consts::E / (std::f64::consts::E + (-1.0f64).exp());
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.8808).abs() < 1e-4);
        // swap symmetry
        let a = two_way_score(0.9, 0.2, 0.07).unwrap();
        let b = two_way_score(0.2, 0.9, 0.07).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        // strictly increasing in the gap
        let mut last = 0.0;
        for k in 0..20 {
            let s = two_way_score(k as f64 * 0.1 - 1.0, 0.0, 0.07).unwrap();
            assert!(s > last);
            assert!(s > 0.0 && s < 1.0);
            last = s;
        }
        assert!(two_way_score(0.1, 0.2, 0.0).is_err());
    }

    #[test]
    fn classification_runs_and_predicts_lexicon_organs() {
        let spec = demo_spec(1, 41);
        let subject = generate_subject(&spec, 0).unwrap();
        let lexicon = spec.lexicon().unwrap();
        let encoder = HashedTextEncoder::new(16, 5).unwrap();
        let model = small_model();
        let before = model.params.clone();
        let assignments =
            classify_organs(&model, &subject.volume, &subject.mask, &lexicon, &encoder).unwrap();
        assert_eq!(assignments.len(), 8, "one prediction per masked organ");
        for (&truth, &pred) in &assignments {
            assert!(lexicon.contains(truth));
            assert!(lexicon.contains(pred), "prediction {pred} not a lexicon organ");
        }
        assert_eq!(before, model.params, "inference must not move the model");
    }

    #[test]
    fn empty_mask_yields_empty_assignment() {
        let spec = demo_spec(1, 42);
        let subject = generate_subject(&spec, 0).unwrap();
        let lexicon = spec.lexicon().unwrap();
        let encoder = HashedTextEncoder::new(16, 5).unwrap();
        let model = small_model();
        let empty = OrganMask {
            labels: Array3::zeros(subject.mask.labels.dim()),
        };
        let assignments =
            classify_organs(&model, &subject.volume, &empty, &lexicon, &encoder).unwrap();
        assert!(assignments.is_empty());
    }

    #[test]
    fn probe_construction_and_file_round_trip() {
        assert!(AbnormalityProbe::new(1, "x", "same", "same").is_err());
        assert!(AbnormalityProbe::new(1, "", "a", "b").is_err());

        let lexicon = demo_lexicon();
        let dictionary = demo_dictionary(&lexicon);
        let probes = default_probes(&dictionary, &lexicon).unwrap();
        assert_eq!(probes.len(), dictionary.total_size());
        let spleen = lexicon.id_of("spleen").unwrap();
        let spleen_probe = probes.iter().find(|p| p.organ_id == spleen).unwrap();
        assert_eq!(spleen_probe.positive_text, "splenomegaly in the spleen");
        assert_eq!(spleen_probe.negative_text, "no evident abnormality in spleen");

        let dir = tempdir().unwrap();
        let path = dir.path().join("probes.json");
        save_probes(&path, &probes, &lexicon).unwrap();
        let loaded = load_probes(&path, &lexicon).unwrap();
        assert_eq!(probes, loaded);

        std::fs::write(&path, r#"[{"organ":"nonexistent","abnormality":"a","positive_text":"p","negative_text":"n"}]"#).unwrap();
        assert!(load_probes(&path, &lexicon).is_err());
    }

    #[test]
    fn detection_flags_missing_organ_and_flips_on_swap() {
        let spec = demo_spec(1, 43);
        let subject = generate_subject(&spec, 0).unwrap();
        let encoder = HashedTextEncoder::new(16, 5).unwrap();
        let model = small_model();
        let probe =
            AbnormalityProbe::new(1, "splenomegaly", "splenomegaly in the spleen", "no evident abnormality in spleen")
                .unwrap();
        let (score, label) =
            detect_abnormality(&model, &subject.volume, &subject.mask, &probe, 0.07, &encoder)
                .unwrap();
        assert!(score > 0.0 && score < 1.0);

        let swapped = AbnormalityProbe::new(
            1,
            "splenomegaly",
            probe.negative_text.clone(),
            probe.positive_text.clone(),
        )
        .unwrap();
        let (score2, label2) =
            detect_abnormality(&model, &subject.volume, &subject.mask, &swapped, 0.07, &encoder)
                .unwrap();
        assert!((score + score2 - 1.0).abs() < 1e-12);
        assert_ne!(label, label2, "swapping texts must flip the decision");

        let absent = AbnormalityProbe::new(999, "x", "a", "b").unwrap();
        let err = detect_abnormality(&model, &subject.volume, &subject.mask, &absent, 0.07, &encoder)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cohort_evaluation_rows_cover_subjects_times_applicable_probes() {
        let spec = demo_spec(3, 44);
        let subjects = crate::synthdata::generate_cohort_in_memory(&spec).unwrap();
        let lexicon = spec.lexicon().unwrap();
        let dictionary = demo_dictionary(&lexicon);
        let probes = default_probes(&dictionary, &lexicon).unwrap();
        let encoder = HashedTextEncoder::new(16, 5).unwrap();
        let model = small_model();

        let outcomes =
            evaluate_abnormality_detection(&model, &subjects, &probes, 0.07, &encoder).unwrap();
        // every demo organ is present in every mask, so all probes apply
        assert_eq!(outcomes.len(), subjects.len() * probes.len());
        for o in &outcomes {
            assert!(o.score > 0.0 && o.score < 1.0);
            let expected = subjects[o.subject_id]
                .ground_truth
                .abnormalities
                .get(&o.organ_id)
                == Some(&o.abnormality);
            assert_eq!(expected, o.ground_truth == Polarity::Abnormal);
        }

        let (rows, top1) =
            evaluate_organ_classification(&model, &subjects, &lexicon, &encoder).unwrap();
        assert_eq!(rows.len(), subjects.len() * 8);
        assert!((0.0..=1.0).contains(&top1));
    }
}
