//! Abnormality dictionary: per-organ catalogs of abnormal descriptions,
//! sampled as hard negatives for normal organs when assembling the text
//! side of the abnormality-alignment batch.
//!
//! A batch over an image with `M` organs, `M'` of them abnormal, carries
//! `M` real texts (abnormal descriptions or normal templates) plus
//! `B = (M − M') × T` dictionary negatives, optionally capped by uniform
//! subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reportproc::{normal_template, DescriptionSource, OrganDescription, OrganLexicon, Polarity};
use crate::seeding::{mix2, rng_from};

/// Stream tag separating the cap-subsampling PRNG from per-organ ones.
const CAP_STREAM: u64 = 0x5ca1_ab1e;

/// Per-organ lists of abnormal description strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbnormalityDictionary {
    entries: BTreeMap<u32, Vec<String>>,
}

impl AbnormalityDictionary {
    /// Build from ID-keyed lists, validating entry well-formedness.
    pub fn new(entries: BTreeMap<u32, Vec<String>>) -> Result<Self> {
        for (&organ_id, list) in &entries {
            let mut seen = BTreeSet::new();
            for s in list {
                if s.trim().is_empty() {
                    return Err(Error::validation(format!(
                        "dictionary entry for organ {organ_id} is empty"
                    )));
                }
                if !seen.insert(s.as_str()) {
                    return Err(Error::validation(format!(
                        "dictionary entry '{s}' duplicated for organ {organ_id}"
                    )));
                }
            }
        }
        Ok(AbnormalityDictionary { entries })
    }

    /// Build from a name-keyed map, resolving names through the lexicon.
    pub fn from_named(
        named: &BTreeMap<String, Vec<String>>,
        lexicon: &OrganLexicon,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, list) in named {
            let id = lexicon.id_of(name).ok_or_else(|| {
                Error::validation(format!("dictionary organ '{name}' is not in the lexicon"))
            })?;
            if entries.insert(id, list.clone()).is_some() {
                return Err(Error::validation(format!(
                    "dictionary lists organ '{name}' (id {id}) twice"
                )));
            }
        }
        Self::new(entries)
    }

    /// Load a JSON map `{organ_name: [descriptions...]}`.
    pub fn load(path: &Path, lexicon: &OrganLexicon) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let named: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
        Self::from_named(&named, lexicon).map_err(|e| match e {
            Error::Validation(msg) => Error::parse(path, msg),
            other => other,
        })
    }

    pub fn save(&self, path: &Path, lexicon: &OrganLexicon) -> Result<()> {
        let mut named = BTreeMap::new();
        for (&id, list) in &self.entries {
            let name = lexicon.name(id).ok_or_else(|| {
                Error::validation(format!("dictionary organ id {id} is not in the lexicon"))
            })?;
            named.insert(name.to_string(), list.clone());
        }
        let raw = serde_json::to_string_pretty(&named).expect("dictionary serializes");
        std::fs::write(path, raw).map_err(|e| Error::io(path, e))
    }

    /// Total stored descriptions across all organs.
    pub fn total_size(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Organs with at least one entry.
    pub fn organ_count(&self) -> usize {
        self.entries.values().filter(|l| !l.is_empty()).count()
    }

    pub fn entries_for(&self, organ_id: u32) -> &[String] {
        self.entries.get(&organ_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn organ_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }
}

/// Draw up to `t` descriptions per normal organ, without replacement,
/// deterministically in `(seed, organ_id)`. Organs absent from the
/// dictionary contribute nothing. Output order: organ order as given,
/// then draw order.
pub fn sample_negatives(
    dict: &AbnormalityDictionary,
    normal_organ_ids: &[u32],
    t: usize,
    seed: u64,
) -> Vec<OrganDescription> {
    sample_negatives_excluding(dict, normal_organ_ids, t, seed, &BTreeSet::new())
}

fn sample_negatives_excluding(
    dict: &AbnormalityDictionary,
    normal_organ_ids: &[u32],
    t: usize,
    seed: u64,
    exclude: &BTreeSet<&str>,
) -> Vec<OrganDescription> {
    let mut out = Vec::new();
    for &organ_id in normal_organ_ids {
        let candidates: Vec<&String> = dict
            .entries_for(organ_id)
            .iter()
            .filter(|s| !exclude.contains(s.as_str()))
            .collect();
        if candidates.is_empty() || t == 0 {
            continue;
        }
        let take = t.min(candidates.len());
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        let mut rng = rng_from(mix2(seed, u64::from(organ_id)));
        for i in 0..take {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        for &k in &idx[..take] {
            out.push(OrganDescription {
                organ_id,
                polarity: Polarity::Abnormal,
                text: candidates[k].clone(),
                source: DescriptionSource::Dictionary,
            });
        }
    }
    out
}

/// Knobs for negative sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeSampling {
    /// Negatives looked up per normal organ (the `T` of the batch formula).
    pub per_organ: usize,
    /// Hard cap on the appended negatives; excess is uniformly subsampled.
    pub max_negatives: usize,
    pub seed: u64,
}

impl Default for NegativeSampling {
    fn default() -> Self {
        NegativeSampling {
            per_organ: 4,
            max_negatives: 512,
            seed: 0,
        }
    }
}

/// The text side of one image's alignment batch.
#[derive(Debug, Clone)]
pub struct TextBatch {
    /// Length `m + b`; first `m` entries match the image's organs in
    /// ascending-ID (pooling) order.
    pub descriptions: Vec<OrganDescription>,
    pub m: usize,
    pub m_prime: usize,
    pub t: usize,
    pub b: usize,
}

impl TextBatch {
    /// First `m` descriptions — the real per-organ texts.
    pub fn organ_texts(&self) -> &[OrganDescription] {
        &self.descriptions[..self.m]
    }

    /// Appended dictionary negatives.
    pub fn negatives(&self) -> &[OrganDescription] {
        &self.descriptions[self.m..]
    }

    /// Verify every structural invariant; used by tests and callers that
    /// construct batches manually.
    pub fn check_invariants(&self) -> Result<()> {
        if self.descriptions.len() != self.m + self.b {
            return Err(Error::validation(format!(
                "batch length {} != m + b = {}",
                self.descriptions.len(),
                self.m + self.b
            )));
        }
        let organ_texts = self.organ_texts();
        let ids: Vec<u32> = organ_texts.iter().map(|d| d.organ_id).collect();
        if !ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation(
                "first m organ ids are not strictly ascending",
            ));
        }
        let abnormal_count = organ_texts
            .iter()
            .filter(|d| d.polarity == Polarity::Abnormal)
            .count();
        if abnormal_count != self.m_prime {
            return Err(Error::validation(format!(
                "m_prime {} != abnormal organ count {abnormal_count}",
                self.m_prime
            )));
        }
        let normal_ids: BTreeSet<u32> = organ_texts
            .iter()
            .filter(|d| d.polarity == Polarity::Normal)
            .map(|d| d.organ_id)
            .collect();
        let real_texts: BTreeSet<&str> = organ_texts
            .iter()
            .filter(|d| d.polarity == Polarity::Abnormal)
            .map(|d| d.text.as_str())
            .collect();
        for neg in self.negatives() {
            if neg.source != DescriptionSource::Dictionary {
                return Err(Error::validation("appended entry not dictionary-sourced"));
            }
            if neg.polarity != Polarity::Abnormal {
                return Err(Error::validation("appended entry not abnormal-polarity"));
            }
            if !normal_ids.contains(&neg.organ_id) {
                return Err(Error::validation(format!(
                    "negative targets organ {} whose image polarity is not normal",
                    neg.organ_id
                )));
            }
            if real_texts.contains(neg.text.as_str()) {
                return Err(Error::validation(format!(
                    "negative '{}' duplicates a real abnormal description",
                    neg.text
                )));
            }
        }
        Ok(())
    }
}

/// Build the text batch for one image: per-organ real texts (parsed
/// abnormal description if present, else the normal template), then
/// dictionary negatives for the normal organs.
pub fn assemble_text_batch(
    parsed: &[OrganDescription],
    present_organs: &[u32],
    lexicon: &OrganLexicon,
    dict: &AbnormalityDictionary,
    sampling: &NegativeSampling,
) -> Result<TextBatch> {
    let present: BTreeSet<u32> = present_organs.iter().copied().collect();
    for d in parsed {
        if !present.contains(&d.organ_id) {
            return Err(Error::validation(format!(
                "parsed description references organ {} absent from the image",
                d.organ_id
            )));
        }
    }

    // First m entries, ascending organ ID: parsed abnormal text (first
    // occurrence) or the normal template.
    let mut organ_texts = Vec::with_capacity(present.len());
    let mut m_prime = 0usize;
    for &organ_id in &present {
        let name = lexicon.name(organ_id).ok_or_else(|| {
            Error::validation(format!("organ {organ_id} is not in the lexicon"))
        })?;
        let parsed_abnormal = parsed
            .iter()
            .find(|d| d.organ_id == organ_id && d.polarity == Polarity::Abnormal);
        match parsed_abnormal {
            Some(d) => {
                m_prime += 1;
                organ_texts.push(d.clone());
            }
            None => organ_texts.push(OrganDescription {
                organ_id,
                polarity: Polarity::Normal,
                text: normal_template(name)?,
                source: DescriptionSource::Template,
            }),
        }
    }

    let normal_ids: Vec<u32> = organ_texts
        .iter()
        .filter(|d| d.polarity == Polarity::Normal)
        .map(|d| d.organ_id)
        .collect();
    let exclude: BTreeSet<&str> = organ_texts
        .iter()
        .filter(|d| d.polarity == Polarity::Abnormal)
        .map(|d| d.text.as_str())
        .collect();
    let mut negatives = sample_negatives_excluding(
        dict,
        &normal_ids,
        sampling.per_organ,
        sampling.seed,
        &exclude,
    );

    // Cap by uniform subsampling, preserving relative order.
    if negatives.len() > sampling.max_negatives {
        let mut idx: Vec<usize> = (0..negatives.len()).collect();
        let mut rng = rng_from(mix2(sampling.seed, CAP_STREAM));
        for i in 0..sampling.max_negatives {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut keep: Vec<usize> = idx[..sampling.max_negatives].to_vec();
        keep.sort_unstable();
        negatives = keep.into_iter().map(|i| negatives[i].clone()).collect();
    }

    let m = organ_texts.len();
    let b = negatives.len();
    let mut descriptions = organ_texts;
    descriptions.extend(negatives);
    let batch = TextBatch {
        descriptions,
        m,
        m_prime,
        t: sampling.per_organ,
        b,
    };
    batch.check_invariants()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn asset(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
    }

    fn toy_lexicon() -> OrganLexicon {
        OrganLexicon::new(vec![
            (1, "spleen".into(), vec![]),
            (2, "kidney".into(), vec![]),
            (3, "liver".into(), vec![]),
            (4, "lung".into(), vec![]),
            (5, "stomach".into(), vec![]),
        ])
        .unwrap()
    }

    fn toy_dict() -> AbnormalityDictionary {
        let mut entries = BTreeMap::new();
        entries.insert(1, vec!["s1".into(), "s2".into(), "s3".into(), "s4".into()]);
        entries.insert(2, vec!["k1".into(), "k2".into(), "k3".into(), "k4".into()]);
        entries.insert(3, vec!["l1".into(), "l2".into(), "l3".into(), "l4".into()]);
        entries.insert(4, vec!["g1".into(), "g2".into(), "g3".into(), "g4".into()]);
        entries.insert(5, vec!["t1".into(), "t2".into(), "t3".into(), "t4".into()]);
        AbnormalityDictionary::new(entries).unwrap()
    }

    fn abnormal(organ_id: u32, text: &str) -> OrganDescription {
        OrganDescription {
            organ_id,
            polarity: Polarity::Abnormal,
            text: text.into(),
            source: DescriptionSource::Parsed,
        }
    }

    #[test]
    fn empty_dictionary_has_size_zero() {
        let d = AbnormalityDictionary::new(BTreeMap::new()).unwrap();
        assert_eq!(d.total_size(), 0);
        assert_eq!(d.organ_count(), 0);
    }

    #[test]
    fn two_entry_dictionary_counts() {
        let mut named = BTreeMap::new();
        named.insert("kidney".to_string(), vec!["kidney stone".into(), "renal cyst".into()]);
        let d = AbnormalityDictionary::from_named(&named, &toy_lexicon()).unwrap();
        assert_eq!(d.total_size(), 2);
        assert_eq!(d.entries_for(2), &["kidney stone".to_string(), "renal cyst".to_string()]);
    }

    #[test]
    fn duplicate_entry_rejected() {
        let mut entries = BTreeMap::new();
        entries.insert(1u32, vec!["x".to_string(), "x".to_string()]);
        assert!(AbnormalityDictionary::new(entries).is_err());
    }

    #[test]
    fn seed_dictionary_asset_counts() {
        let lexicon = OrganLexicon::load(&asset("lexicon.json")).unwrap();
        let dict = AbnormalityDictionary::load(&asset("abnormality_dictionary.json"), &lexicon).unwrap();
        assert_eq!(dict.total_size(), 16);
        assert_eq!(dict.organ_count(), 7);
        let count = |name: &str| dict.entries_for(lexicon.id_of(name).unwrap()).len();
        assert_eq!(count("spleen"), 2);
        assert_eq!(count("pancreas"), 3);
        assert_eq!(count("aorta"), 1);
        assert_eq!(count("kidney"), 2);
        assert_eq!(count("liver"), 3);
        assert_eq!(count("lung"), 3);
        assert_eq!(count("gallbladder"), 2);
        // the synthetic-generator dictionary covers all 8 organs
        let synth = AbnormalityDictionary::load(&asset("synthetic_dictionary.json"), &lexicon).unwrap();
        assert_eq!(synth.organ_count(), 8);
    }

    #[test]
    fn sample_t_zero_is_empty() {
        assert!(sample_negatives(&toy_dict(), &[1, 2], 0, 7).is_empty());
    }

    #[test]
    fn sample_is_deterministic_and_without_replacement() {
        let dict = toy_dict();
        let a = sample_negatives(&dict, &[2], 2, 41);
        let b = sample_negatives(&dict, &[2], 2, 41);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].text, a[1].text);
        assert!(a.iter().all(|d| d.organ_id == 2
            && d.polarity == Polarity::Abnormal
            && d.source == DescriptionSource::Dictionary));
        assert_eq!(
            a.iter().map(|d| &d.text).collect::<Vec<_>>(),
            b.iter().map(|d| &d.text).collect::<Vec<_>>()
        );
        // requesting more than available returns all, still unique
        let c = sample_negatives(&dict, &[2], 99, 41);
        assert_eq!(c.len(), 4);
    }

    #[test]
    fn per_organ_counts_follow_formula() {
        let out = sample_negatives(&toy_dict(), &[1, 3], 1, 5);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].organ_id, 1);
        assert_eq!(out[1].organ_id, 3);
    }

    #[test]
    fn organs_without_entries_contribute_nothing() {
        let mut entries = BTreeMap::new();
        entries.insert(1u32, vec!["only spleen".to_string()]);
        let dict = AbnormalityDictionary::new(entries).unwrap();
        let out = sample_negatives(&dict, &[1, 2, 3], 3, 9);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].organ_id, 1);
    }

    #[test]
    fn assemble_counts_match_formula() {
        let parsed = vec![abnormal(2, "kidney is bad"), abnormal(4, "lung is bad")];
        let batch = assemble_text_batch(
            &parsed,
            &[1, 2, 3, 4, 5],
            &toy_lexicon(),
            &toy_dict(),
            &NegativeSampling { per_organ: 4, max_negatives: 512, seed: 3 },
        )
        .unwrap();
        assert_eq!(batch.m, 5);
        assert_eq!(batch.m_prime, 2);
        assert_eq!(batch.b, (5 - 2) * 4);
        assert_eq!(batch.descriptions.len(), 17);
        batch.check_invariants().unwrap();
        // normal organs got the normal template
        assert_eq!(batch.organ_texts()[0].text, "no evident abnormality in spleen");
        assert_eq!(batch.organ_texts()[1].text, "kidney is bad");
    }

    #[test]
    fn all_abnormal_means_no_negatives() {
        let parsed = vec![abnormal(1, "a"), abnormal(2, "b")];
        let batch = assemble_text_batch(
            &parsed,
            &[1, 2],
            &toy_lexicon(),
            &toy_dict(),
            &NegativeSampling::default(),
        )
        .unwrap();
        assert_eq!(batch.b, 0);
        assert_eq!(batch.descriptions.len(), 2);
    }

    #[test]
    fn cap_subsamples_in_order() {
        let batch = assemble_text_batch(
            &[],
            &[1, 2, 3, 4, 5],
            &toy_lexicon(),
            &toy_dict(),
            &NegativeSampling { per_organ: 4, max_negatives: 7, seed: 11 },
        )
        .unwrap();
        assert_eq!(batch.b, 7);
        batch.check_invariants().unwrap();
        // order preserved: organ ids of negatives are non-descending
        let ids: Vec<u32> = batch.negatives().iter().map(|d| d.organ_id).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
        // deterministic
        let again = assemble_text_batch(
            &[],
            &[1, 2, 3, 4, 5],
            &toy_lexicon(),
            &toy_dict(),
            &NegativeSampling { per_organ: 4, max_negatives: 7, seed: 11 },
        )
        .unwrap();
        let texts: Vec<&str> = batch.negatives().iter().map(|d| d.text.as_str()).collect();
        let texts2: Vec<&str> = again.negatives().iter().map(|d| d.text.as_str()).collect();
        assert_eq!(texts, texts2);
    }

    #[test]
    fn negatives_never_duplicate_real_abnormal_texts() {
        // the parsed abnormal text for organ 2 collides with a dictionary
        // string of organ 1; the sampler must avoid it
        let mut entries = BTreeMap::new();
        entries.insert(1u32, vec!["shared text".to_string(), "other".to_string()]);
        let dict = AbnormalityDictionary::new(entries).unwrap();
        let parsed = vec![abnormal(2, "shared text")];
        let batch = assemble_text_batch(
            &parsed,
            &[1, 2],
            &toy_lexicon(),
            &dict,
            &NegativeSampling { per_organ: 2, max_negatives: 512, seed: 1 },
        )
        .unwrap();
        assert_eq!(batch.b, 1);
        assert_eq!(batch.negatives()[0].text, "other");
    }

    #[test]
    fn parsed_organ_outside_image_rejected() {
        let parsed = vec![abnormal(5, "x")];
        let err = assemble_text_batch(
            &parsed,
            &[1, 2],
            &toy_lexicon(),
            &toy_dict(),
            &NegativeSampling::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn organ_missing_from_lexicon_rejected() {
        let err = assemble_text_batch(
            &[],
            &[99],
            &toy_lexicon(),
            &toy_dict(),
            &NegativeSampling::default(),
        );
        assert!(err.is_err());
    }
}
