//! Assemble the per-image text batch: one real description per organ
//! (the parsed abnormal sentence, or the organ's normal template) plus
//! dictionary-sampled hard negatives for the normal organs.
//!
//! The negatives let every image see abnormal wording for organs that
//! are healthy in it, which is what makes the abnormality side of the
//! alignment discriminative instead of merely organ-matching.

use std::collections::BTreeMap;

use ctglip::abnodict::{assemble_text_batch, AbnormalityDictionary, NegativeSampling};
use ctglip::reportproc::{parse_report, Polarity};
use ctglip::synthdata::{generate_cohort_in_memory, CohortSpec, OrganSpec};

fn main() -> ctglip::Result<()> {
    let spec = CohortSpec {
        n_subjects: 6,
        organs: vec![
            OrganSpec {
                id: 1,
                name: "liver".into(),
                abnormalities: vec!["fatty liver".into(), "liver cyst".into()],
            },
            OrganSpec {
                id: 2,
                name: "kidney".into(),
                abnormalities: vec!["kidney stone".into(), "renal cyst".into()],
            },
            OrganSpec {
                id: 3,
                name: "spleen".into(),
                abnormalities: vec!["splenomegaly".into()],
            },
        ],
        abnormality_rate: 0.6,
        shape: [12, 12, 12],
        spacing: [1.0, 1.0, 1.0],
        master_seed: 4,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.75,
    };
    let lexicon = spec.lexicon()?;
    let named: BTreeMap<String, Vec<String>> = spec
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.abnormalities.clone()))
        .collect();
    let dictionary = AbnormalityDictionary::from_named(&named, &lexicon)?;
    println!(
        "dictionary: {} descriptions across {} organs",
        dictionary.total_size(),
        dictionary.organ_count()
    );

    // Pick a subject with at least one healthy organ so the batch gets
    // dictionary negatives appended.
    let subjects = generate_cohort_in_memory(&spec)?;
    let subject = subjects
        .iter()
        .find(|s| s.ground_truth.abnormalities.len() < s.ground_truth.present.len())
        .expect("some subject has a normal organ");
    println!();
    println!("subject {} report: {}", subject.subject_id, subject.report);

    let parsed = parse_report(&subject.report, &lexicon)?;
    let sampling = NegativeSampling {
        per_organ: 2,
        max_negatives: 8,
        seed: 11,
    };
    let batch = assemble_text_batch(
        &parsed.descriptions,
        &subject.ground_truth.present,
        &lexicon,
        &dictionary,
        &sampling,
    )?;
    batch.check_invariants()?;

    println!();
    println!(
        "text batch: m = {} organ texts ({} abnormal), b = {} negatives (t = {} per normal organ)",
        batch.m, batch.m_prime, batch.b, batch.t
    );
    for (i, d) in batch.descriptions.iter().enumerate() {
        let role = if i < batch.m {
            match d.polarity {
                Polarity::Abnormal => "real abnormal",
                Polarity::Normal => "normal template",
            }
        } else {
            "negative"
        };
        println!("  [{i}] organ {:>2} {:<16} \"{}\"", d.organ_id, role, d.text);
    }

    println!();
    println!("the same sampling seed reproduces the same batch:");
    let again = assemble_text_batch(
        &parsed.descriptions,
        &subject.ground_truth.present,
        &lexicon,
        &dictionary,
        &sampling,
    )?;
    println!(
        "  identical = {}",
        again.descriptions == batch.descriptions
    );
    Ok(())
}
