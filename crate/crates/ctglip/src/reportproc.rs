//! Report decomposition: splits structured radiology-style reports into
//! per-organ descriptions and provides the organ/normal text templates.
//!
//! Parsing is deterministic rules, not NLP: sentences split on `.` and
//! newlines, organs matched by word-bounded synonym lookup, polarity
//! decided by a fixed negation pattern list. Sentences that mention zero
//! or two-plus organs land in the `unassigned` list untouched.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-organ diagnostic description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganDescription {
    pub organ_id: u32,
    pub polarity: Polarity,
    pub text: String,
    pub source: DescriptionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    /// Extracted from a report sentence.
    Parsed,
    /// Generated from the organ or normal template.
    Template,
    /// Sampled from the abnormality dictionary as a negative.
    Dictionary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconEntry {
    name: String,
    #[serde(default)]
    synonyms: Vec<String>,
}

/// Organ vocabulary: id -> canonical name plus synonyms.
///
/// The canonical name always counts as a synonym for matching.
#[derive(Debug, Clone)]
pub struct OrganLexicon {
    entries: BTreeMap<u32, LexiconEntry>,
}

impl OrganLexicon {
    /// Build from (id, name, synonyms) triples, validating uniqueness.
    pub fn new(organs: Vec<(u32, String, Vec<String>)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (id, name, synonyms) in organs {
            if name.trim().is_empty() {
                return Err(Error::validation(format!("organ {id} has an empty name")));
            }
            if synonyms.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::validation(format!(
                    "organ {id} ({name}) has an empty synonym"
                )));
            }
            if entries.insert(id, LexiconEntry { name, synonyms }).is_some() {
                return Err(Error::validation(format!("duplicate organ id {id}")));
            }
        }
        let lex = OrganLexicon { entries };
        lex.validate()?;
        Ok(lex)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut terms: BTreeMap<String, u32> = BTreeMap::new();
        for (&id, entry) in &self.entries {
            if !names.insert(entry.name.to_lowercase()) {
                return Err(Error::validation(format!(
                    "canonical organ name '{}' used twice",
                    entry.name
                )));
            }
            for term in entry.match_terms() {
                if let Some(&other) = terms.get(&term) {
                    if other != id {
                        return Err(Error::validation(format!(
                            "synonym '{term}' shared by organs {other} and {id}"
                        )));
                    }
                } else {
                    terms.insert(term, id);
                }
            }
        }
        Ok(())
    }

    /// Load from a JSON map `{id: {name, synonyms[]}}`.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, LexiconEntry> = serde_json::from_str(&raw)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let mut organs = Vec::new();
        for (key, entry) in map {
            let id: u32 = key
                .parse()
                .map_err(|_| Error::parse(path, format!("organ id '{key}' is not an integer")))?;
            organs.push((id, entry.name, entry.synonyms));
        }
        Self::new(organs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, &LexiconEntry> = self
            .entries
            .iter()
            .map(|(id, e)| (id.to_string(), e))
            .collect();
        let raw = serde_json::to_string_pretty(&map).expect("lexicon serializes");
        std::fs::write(path, raw).map_err(|e| Error::io(path, e))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.entries.get(&id).map(|e| e.name.as_str())
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        let lower = name.to_lowercase();
        self.entries
            .iter()
            .find(|(_, e)| e.name.to_lowercase() == lower)
            .map(|(&id, _)| id)
    }

    /// Organ ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    /// (id, canonical name) in ascending id order.
    pub fn organs(&self) -> impl Iterator<Item = (u32, &str)> + '_ {
        self.entries.iter().map(|(&id, e)| (id, e.name.as_str()))
    }
}

impl LexiconEntry {
    fn match_terms(&self) -> Vec<String> {
        let mut terms = vec![self.name.to_lowercase()];
        terms.extend(self.synonyms.iter().map(|s| s.to_lowercase()));
        terms.sort();
        terms.dedup();
        terms
    }
}

/// Output of [`parse_report`]: assigned descriptions plus the sentences
/// that could not be attributed to exactly one organ.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParsedReport {
    pub descriptions: Vec<OrganDescription>,
    pub unassigned: Vec<String>,
}

impl ParsedReport {
    /// Organ ids whose parsed polarity is abnormal.
    pub fn abnormal_ids(&self) -> Vec<u32> {
        self.descriptions
            .iter()
            .filter(|d| d.polarity == Polarity::Abnormal)
            .map(|d| d.organ_id)
            .collect()
    }
}

/// Default negation patterns; a word-bounded hit flips a sentence to
/// normal polarity.
pub const DEFAULT_NEGATION_PATTERNS: &[&str] = &["no evident", "unremarkable", "normal"];

/// Organ identity template.
pub fn organ_template(name: &str) -> Result<String> {
    if name.trim().is_empty() {
        return Err(Error::validation("organ_template: empty organ name"));
    }
    Ok(format!("this is a {name} in the CT scan"))
}

/// Normal-finding template, also used for dictionary-probe negatives.
pub fn normal_template(name: &str) -> Result<String> {
    if name.trim().is_empty() {
        return Err(Error::validation("normal_template: empty organ name"));
    }
    Ok(format!("no evident abnormality in {name}"))
}

/// True if `term` occurs in `text` bounded by non-alphanumeric characters.
/// Both arguments must already be lowercase.
pub(crate) fn mentions(text: &str, term: &str) -> bool {
    let tb = text.as_bytes();
    let n = term.len();
    if n == 0 || n > tb.len() {
        return false;
    }
    let mut start = 0;
    while let Some(pos) = text[start..].find(term) {
        let at = start + pos;
        let before_ok = at == 0 || !tb[at - 1].is_ascii_alphanumeric();
        let after = at + n;
        let after_ok = after == tb.len() || !tb[after].is_ascii_alphanumeric();
        if before_ok && after_ok {
            return true;
        }
        start = at + 1;
    }
    false
}

/// Split on sentence-final periods and newlines, keeping the periods.
fn split_sentences(report: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    for line in report.split('\n') {
        let mut current = String::new();
        let mut chars = line.trim_end_matches('\r').chars().peekable();
        while let Some(c) = chars.next() {
            current.push(c);
            if c == '.' {
                let boundary = matches!(chars.peek(), None | Some(' '));
                if boundary {
                    if chars.peek() == Some(&' ') {
                        chars.next();
                    }
                    let s = current.trim().to_string();
                    if !s.is_empty() {
                        sentences.push(s);
                    }
                    current.clear();
                }
            }
        }
        let s = current.trim().to_string();
        if !s.is_empty() {
            sentences.push(s);
        }
    }
    sentences
}

/// Decompose a report into per-organ descriptions using the default
/// negation patterns.
pub fn parse_report(report: &str, lexicon: &OrganLexicon) -> Result<ParsedReport> {
    parse_report_with(report, lexicon, DEFAULT_NEGATION_PATTERNS)
}

/// As [`parse_report`] but with a caller-supplied negation pattern list.
pub fn parse_report_with(
    report: &str,
    lexicon: &OrganLexicon,
    negation_patterns: &[&str],
) -> Result<ParsedReport> {
    if lexicon.is_empty() {
        return Err(Error::validation("parse_report: empty lexicon"));
    }
    let patterns: Vec<String> = negation_patterns.iter().map(|p| p.to_lowercase()).collect();
    let mut result = ParsedReport::default();
    for sentence in split_sentences(report) {
        let lower = sentence.to_lowercase();
        let mut hit: Option<u32> = None;
        let mut ambiguous = false;
        for (&id, entry) in &lexicon.entries {
            if entry.match_terms().iter().any(|t| mentions(&lower, t)) {
                if hit.is_some() && hit != Some(id) {
                    ambiguous = true;
                    break;
                }
                hit = Some(id);
            }
        }
        match (hit, ambiguous) {
            (Some(id), false) => {
                let negated = patterns.iter().any(|p| mentions(&lower, p));
                result.descriptions.push(OrganDescription {
                    organ_id: id,
                    polarity: if negated {
                        Polarity::Normal
                    } else {
                        Polarity::Abnormal
                    },
                    text: sentence,
                    source: DescriptionSource::Parsed,
                });
            }
            _ => result.unassigned.push(sentence),
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kidney_liver() -> OrganLexicon {
        OrganLexicon::new(vec![
            (1, "kidney".into(), vec!["renal".into()]),
            (2, "liver".into(), vec!["hepatic".into()]),
        ])
        .unwrap()
    }

    #[test]
    fn templates_are_literal_substitution() {
        assert_eq!(
            organ_template("liver").unwrap(),
            "this is a liver in the CT scan"
        );
        assert_eq!(
            organ_template("left kidney").unwrap(),
            "this is a left kidney in the CT scan"
        );
        // no article correction
        assert_eq!(
            organ_template("aorta").unwrap(),
            "this is a aorta in the CT scan"
        );
        assert_eq!(
            normal_template("pancreas").unwrap(),
            "no evident abnormality in pancreas"
        );
        assert_eq!(
            normal_template("lung").unwrap(),
            "no evident abnormality in lung"
        );
    }

    #[test]
    fn templates_reject_empty_name() {
        assert!(organ_template("").is_err());
        assert!(normal_template("  ").is_err());
    }

    #[test]
    fn templates_differ_for_all_names() {
        for name in ["liver", "kidney", "x"] {
            assert_ne!(organ_template(name).unwrap(), normal_template(name).unwrap());
        }
    }

    #[test]
    fn empty_report_parses_to_nothing() {
        let parsed = parse_report("", &kidney_liver()).unwrap();
        assert!(parsed.descriptions.is_empty());
        assert!(parsed.unassigned.is_empty());
    }

    #[test]
    fn hand_traced_two_sentence_report() {
        let parsed =
            parse_report("Right kidney stone. Liver is unremarkable.", &kidney_liver()).unwrap();
        assert_eq!(parsed.descriptions.len(), 2);
        assert_eq!(parsed.descriptions[0].organ_id, 1);
        assert_eq!(parsed.descriptions[0].polarity, Polarity::Abnormal);
        assert_eq!(parsed.descriptions[0].text, "Right kidney stone.");
        assert_eq!(parsed.descriptions[1].organ_id, 2);
        assert_eq!(parsed.descriptions[1].polarity, Polarity::Normal);
        assert_eq!(parsed.descriptions[1].text, "Liver is unremarkable.");
        assert!(parsed.unassigned.is_empty());
    }

    #[test]
    fn normal_template_round_trips_as_normal() {
        let lex = kidney_liver();
        let text = normal_template("kidney").unwrap();
        let parsed = parse_report(&text, &lex).unwrap();
        assert_eq!(parsed.descriptions.len(), 1);
        assert_eq!(parsed.descriptions[0].organ_id, 1);
        assert_eq!(parsed.descriptions[0].polarity, Polarity::Normal);
    }

    #[test]
    fn multi_organ_and_no_organ_sentences_go_unassigned() {
        let parsed = parse_report(
            "Kidney and liver look swollen. The weather is fine.",
            &kidney_liver(),
        )
        .unwrap();
        assert!(parsed.descriptions.is_empty());
        assert_eq!(parsed.unassigned.len(), 2);
    }

    #[test]
    fn negation_requires_word_boundary() {
        // "abnormality" must not trigger the "normal" pattern
        let parsed = parse_report("Marked abnormality in the liver.", &kidney_liver()).unwrap();
        assert_eq!(parsed.descriptions[0].polarity, Polarity::Abnormal);
        // but a standalone "normal" does
        let parsed = parse_report("The liver is normal.", &kidney_liver()).unwrap();
        assert_eq!(parsed.descriptions[0].polarity, Polarity::Normal);
    }

    #[test]
    fn synonyms_match_and_same_organ_twice_is_unambiguous() {
        let parsed = parse_report("Renal calculus in the kidney.", &kidney_liver()).unwrap();
        assert_eq!(parsed.descriptions.len(), 1);
        assert_eq!(parsed.descriptions[0].organ_id, 1);
    }

    #[test]
    fn shared_synonym_rejected() {
        let err = OrganLexicon::new(vec![
            (1, "kidney".into(), vec!["organ".into()]),
            (2, "liver".into(), vec!["organ".into()]),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn empty_lexicon_rejected_by_parse() {
        let lex = OrganLexicon::new(vec![]).unwrap();
        assert!(parse_report("anything", &lex).is_err());
    }

    #[test]
    fn sentence_split_keeps_periods_and_handles_newlines() {
        let s = split_sentences("One sentence. Two\nthree without period");
        assert_eq!(s, vec!["One sentence.", "Two", "three without period"]);
    }
}
