//! Generate a deterministic synthetic cohort and look inside one
//! subject: organ layout, planted abnormalities, and the paired report.
//!
//! Pass a directory argument to also write the cohort to disk in the
//! layout the CLI consumes (`manifest.jsonl` + per-subject files):
//!
//! ```text
//! cargo run --example generate_cohort -- /tmp/demo_cohort
//! ```

use ctglip::synthdata::io::generate_cohort;
use ctglip::synthdata::{generate_cohort_in_memory, CohortSpec, OrganSpec};

fn demo_spec() -> CohortSpec {
    CohortSpec {
        n_subjects: 8,
        organs: vec![
            OrganSpec {
                id: 1,
                name: "liver".into(),
                abnormalities: vec!["fatty liver".into(), "liver cyst".into()],
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
            OrganSpec {
                id: 4,
                name: "lung".into(),
                abnormalities: vec!["pulmonary nodules".into()],
            },
        ],
        abnormality_rate: 0.4,
        shape: [16, 16, 16],
        spacing: [1.0, 1.0, 1.0],
        master_seed: 42,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.75,
    }
}

fn main() -> ctglip::Result<()> {
    let spec = demo_spec();
    let subjects = generate_cohort_in_memory(&spec)?;

    println!(
        "generated {} subjects of shape {:?} from master seed {}",
        subjects.len(),
        spec.shape,
        spec.master_seed
    );
    println!();
    println!("{:<8} {:>8} {:>14}  abnormalities", "subject", "organs", "organ voxels");
    for s in &subjects {
        let organ_voxels = s.mask.labels.iter().filter(|&&l| l != 0).count();
        let abnormal: Vec<&str> = s
            .ground_truth
            .abnormalities
            .values()
            .map(String::as_str)
            .collect();
        println!(
            "{:<8} {:>8} {:>14}  {}",
            s.subject_id,
            s.ground_truth.present.len(),
            organ_voxels,
            if abnormal.is_empty() { "-".to_string() } else { abnormal.join(", ") }
        );
    }

    let sample = &subjects[0];
    println!();
    println!("subject 0 report:");
    for sentence in sample.report.split_inclusive(". ") {
        println!("  {}", sentence.trim());
    }
    println!();
    println!("subject 0 mean interior intensity per organ (the identity signal):");
    for (&organ_id, &code) in &sample.ground_truth.intensity_codes {
        println!("  organ {organ_id}: {code:.3}");
    }

    if let Some(dir) = std::env::args().nth(1) {
        let manifest = generate_cohort(&spec, std::path::Path::new(&dir))?;
        println!();
        println!("wrote {} subjects to {dir}", manifest.records.len());
    }
    Ok(())
}
