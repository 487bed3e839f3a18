//! Parse free-text reports back into per-organ findings and check the
//! result against the generator's ground truth.
//!
//! Sentence attribution is lexicon-driven: a sentence naming exactly one
//! organ (by name or synonym) is assigned to it; negation patterns flip
//! the polarity to normal.

use ctglip::reportproc::{parse_report, OrganLexicon, Polarity};
use ctglip::synthdata::{generate_cohort_in_memory, CohortSpec, OrganSpec};

fn main() -> ctglip::Result<()> {
    let spec = CohortSpec {
        n_subjects: 50,
        organs: vec![
            OrganSpec {
                id: 1,
                name: "liver".into(),
                abnormalities: vec!["fatty liver".into()],
            },
            OrganSpec {
                id: 2,
                name: "kidney".into(),
                abnormalities: vec!["kidney stone".into()],
            },
            OrganSpec {
                id: 3,
                name: "spleen".into(),
                abnormalities: vec!["splenomegaly".into()],
            },
        ],
        abnormality_rate: 0.5,
        shape: [12, 12, 12],
        spacing: [1.0, 1.0, 1.0],
        master_seed: 9,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.75,
    };
    let lexicon: OrganLexicon = spec.lexicon()?;
    let subjects = generate_cohort_in_memory(&spec)?;

    let sample = &subjects[0];
    println!("subject 0 report: {}", sample.report);
    let parsed = parse_report(&sample.report, &lexicon)?;
    println!();
    println!("parsed descriptions:");
    for d in &parsed.descriptions {
        println!(
            "  organ {:>2} ({:<8}) {:>8?}  \"{}\"",
            d.organ_id,
            lexicon.name(d.organ_id).unwrap_or("?"),
            d.polarity,
            d.text
        );
    }
    if !parsed.unassigned.is_empty() {
        println!("unassigned sentences: {:?}", parsed.unassigned);
    }

    let mut sentences = 0usize;
    let mut abnormal = 0usize;
    let mut mismatches = 0usize;
    for s in &subjects {
        let parsed = parse_report(&s.report, &lexicon)?;
        sentences += parsed.descriptions.len();
        abnormal += parsed
            .descriptions
            .iter()
            .filter(|d| d.polarity == Polarity::Abnormal)
            .count();
        let truth: Vec<u32> = s.ground_truth.abnormalities.keys().copied().collect();
        if parsed.abnormal_ids() != truth {
            mismatches += 1;
        }
    }
    println!();
    println!(
        "round trip over {} subjects: {} organ sentences ({} abnormal), {} ground-truth mismatches",
        subjects.len(),
        sentences,
        abnormal,
        mismatches
    );
    Ok(())
}
