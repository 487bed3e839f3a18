//! Zero-shot organ classification: after grounded pretraining, each
//! pooled region embedding is matched against the organ identity
//! templates ("a computed tomography of a {organ}") by cosine
//! similarity — no classifier head, no fine-tuning.

use std::collections::BTreeMap;

use ctglip::abnodict::AbnormalityDictionary;
use ctglip::encoders::{CtGlipModel, HashedTextEncoder, ModelConfig};
use ctglip::losses::LossConfig;
use ctglip::synthdata::{generate_cohort_in_memory, CohortSpec, OrganSpec};
use ctglip::trainer::{TrainConfig, TrainSession};
use ctglip::zeroshot::evaluate_organ_classification;

fn spec(n_subjects: usize, master_seed: u64) -> CohortSpec {
    CohortSpec {
        n_subjects,
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
            OrganSpec {
                id: 4,
                name: "lung".into(),
                abnormalities: vec!["pulmonary nodules".into()],
            },
        ],
        abnormality_rate: 0.5,
        shape: [12, 12, 12],
        spacing: [1.0, 1.0, 1.0],
        master_seed,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.5,
    }
}

fn main() -> ctglip::Result<()> {
    let train_subjects = generate_cohort_in_memory(&spec(48, 31))?;
    let test_subjects = generate_cohort_in_memory(&spec(16, 99))?;
    let train_spec = spec(0, 0);
    let lexicon = train_spec.lexicon()?;
    let named: BTreeMap<String, Vec<String>> = train_spec
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.abnormalities.clone()))
        .collect();
    let dictionary = AbnormalityDictionary::from_named(&named, &lexicon)?;
    let encoder = HashedTextEncoder::new(48, 2024)?;

    let model_cfg = ModelConfig {
        channels: vec![8, 8],
        kernel: 3,
        embed_dim: 48,
        hidden: 32,
        n_classes: 5,
    };
    let mut train_cfg: TrainConfig = serde_json::from_str("{}").expect("defaults");
    train_cfg.epochs = 6;
    train_cfg.batch_size = 8;
    train_cfg.seed = 2;

    let model = CtGlipModel::new(model_cfg, train_cfg.seed)?;
    let (_, untrained_top1) =
        evaluate_organ_classification(&model, &test_subjects, &lexicon, &encoder)?;
    println!("top-1 before training: {:.1}% (chance is 25%)", 100.0 * untrained_top1);

    let mut session = TrainSession::new(
        model,
        train_cfg,
        LossConfig::default(),
        &lexicon,
        &dictionary,
        &encoder,
    )?;
    session.run(&train_subjects, |_| Ok(()))?;

    let (rows, top1) =
        evaluate_organ_classification(&session.model, &test_subjects, &lexicon, &encoder)?;
    println!("top-1 after {} training subjects: {:.1}%", train_subjects.len(), 100.0 * top1);

    println!();
    println!("{:<12} {:>8} {:>8}", "organ", "regions", "correct");
    let mut per_organ: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for row in &rows {
        let entry = per_organ.entry(row.organ_id).or_default();
        entry.0 += 1;
        if row.predicted_id == row.organ_id {
            entry.1 += 1;
        }
    }
    for (organ_id, (regions, correct)) in per_organ {
        println!(
            "{:<12} {:>8} {:>8}",
            lexicon.name(organ_id).unwrap_or("?"),
            regions,
            correct
        );
    }
    Ok(())
}
