//! Train the grounded model end to end on a small synthetic cohort and
//! inspect the artifacts: step metrics, the final checkpoint, and an
//! exact resume from a mid-run checkpoint.

use std::collections::BTreeMap;

use ctglip::abnodict::AbnormalityDictionary;
use ctglip::encoders::{CtGlipModel, HashedTextEncoder, ModelConfig};
use ctglip::losses::LossConfig;
use ctglip::synthdata::{generate_cohort_in_memory, CohortSpec, OrganSpec};
use ctglip::trainer::{checkpoint_bytes, load_checkpoint, TrainConfig, TrainSession};

fn main() -> ctglip::Result<()> {
    let spec = CohortSpec {
        n_subjects: 24,
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
        master_seed: 21,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.5,
    };
    let subjects = generate_cohort_in_memory(&spec)?;
    let lexicon = spec.lexicon()?;
    let named: BTreeMap<String, Vec<String>> = spec
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.abnormalities.clone()))
        .collect();
    let dictionary = AbnormalityDictionary::from_named(&named, &lexicon)?;

    let model_cfg = ModelConfig {
        channels: vec![8, 8],
        kernel: 3,
        embed_dim: 32,
        hidden: 24,
        n_classes: 4,
    };
    let mut train_cfg: TrainConfig = serde_json::from_str("{}").expect("defaults");
    train_cfg.epochs = 4;
    train_cfg.batch_size = 6;
    train_cfg.seed = 5;
    train_cfg.checkpoint_every = 8;
    let encoder = HashedTextEncoder::new(model_cfg.embed_dim, 2024)?;

    let model = CtGlipModel::new(model_cfg.clone(), train_cfg.seed)?;
    println!(
        "model: {} parameters, feature channels {:?}, embedding dim {}",
        model.n_params(),
        model_cfg.channels,
        model_cfg.embed_dim
    );

    let dir = tempfile::tempdir().expect("temp dir");
    let mut session = TrainSession::new(
        model,
        train_cfg.clone(),
        LossConfig::default(),
        &lexicon,
        &dictionary,
        &encoder,
    )?;
    let final_ckpt = session.fit(&subjects, dir.path())?;

    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
        .map_err(|e| ctglip::Error::io(dir.path(), e))?;
    let lines: Vec<&str> = metrics.lines().collect();
    println!();
    println!("trained {} steps; first and last step records:", lines.len());
    println!("  {}", lines.first().unwrap_or(&""));
    println!("  {}", lines.last().unwrap_or(&""));

    println!();
    println!(
        "final checkpoint: step {}, {} parameters, {} bytes on disk",
        final_ckpt.step,
        final_ckpt.params.len(),
        checkpoint_bytes(&final_ckpt)?.len()
    );

    // Resume from the step-8 snapshot and land on the identical bytes.
    let mid = load_checkpoint(&dir.path().join("checkpoint_000008.bin"))?;
    let mut resumed = TrainSession::from_checkpoint(mid, &lexicon, &dictionary, &encoder)?;
    let resume_dir = tempfile::tempdir().expect("temp dir");
    let resumed_ckpt = resumed.fit(&subjects, resume_dir.path())?;
    println!(
        "resume from step 8 reproduces the final checkpoint byte for byte: {}",
        checkpoint_bytes(&resumed_ckpt)? == checkpoint_bytes(&final_ckpt)?
    );
    Ok(())
}
