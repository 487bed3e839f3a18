//! Batch command-line workflow: synthesize a cohort, train, run the
//! zero-shot evaluations, and audit report parsing — one binary with
//! subcommands so batch jobs have a single reproducibility surface.
//!
//! Exit codes are a stable contract for CI: 0 success, 1 I/O failure,
//! 2 validation or parse failure (including missing input files),
//! 3 numeric divergence. All randomness flows from the seeds in the run
//! config; outputs carry no timestamps, so every command is idempotent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::abnodict::AbnormalityDictionary;
use crate::encoders::{
    CtGlipModel, HashedTextEncoder, ModelConfig, PrecomputedTextEncoder, TextEncoder,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{binary_stats, BinaryOutcomes};
use crate::reportproc::{parse_report, OrganLexicon, Polarity};
use crate::synthdata::io::{generate_cohort, load_cohort, MANIFEST_NAME};
use crate::synthdata::CohortSpec;
use crate::trainer::{load_checkpoint, TrainConfig, TrainSession, FINAL_CHECKPOINT_NAME};
use crate::zeroshot::{
    abnormality_auc, default_probes, evaluate_abnormality_detection,
    evaluate_organ_classification, load_probes, AbnormalityProbe,
};

fn default_text_seed() -> u64 {
    2024
}

/// Unified configuration document shared by every subcommand. Relative
/// paths inside the file resolve against the file's own directory, so a
/// config travels with its assets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic cohort recipe; also the fallback source for the organ
    /// lexicon, abnormality dictionary, probes, and segmentation class
    /// count when no explicit files are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<CohortSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Vision model; when absent, the default architecture is used with
    /// `n_classes` sized to the cohort's largest organ id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Organ lexicon JSON; overrides the cohort-derived lexicon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Abnormality dictionary JSON (`{organ name: [descriptions…]}`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
    /// Probe file for eval-abnormality; when absent, one probe per
    /// dictionary entry is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<PathBuf>,
    /// Precomputed text-embedding table; when absent, a hashed
    /// bag-of-words encoder seeded by `text_seed` embeds texts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default = "default_text_seed")]
    pub text_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("default config parses")
    }
}

impl RunConfig {
    /// Parse and validate a config file, resolving its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        require_file("config", path)?;
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
        if let Some(cohort) = &cfg.cohort {
            cohort.validate()?;
        }
        cfg.train.validate()?;
        cfg.loss.validate()?;
        if let Some(model) = &cfg.model {
            model.validate()?;
        }
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        for slot in [
            &mut cfg.lexicon,
            &mut cfg.dictionary,
            &mut cfg.probes,
            &mut cfg.text_embeddings,
        ] {
            if let Some(p) = slot {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
        }
        Ok(cfg)
    }

    /// The organ lexicon: the configured file, else derived from the
    /// cohort section.
    pub fn lexicon(&self) -> Result<OrganLexicon> {
        if let Some(path) = &self.lexicon {
            require_file("lexicon", path)?;
            return OrganLexicon::load(path);
        }
        match &self.cohort {
            Some(spec) => spec.lexicon(),
            None => Err(Error::validation(
                "missing lexicon: no lexicon file configured and no cohort section to derive one",
            )),
        }
    }

    /// The abnormality dictionary: the configured file, else the cohort
    /// organs' abnormality lists.
    pub fn dictionary(&self, lexicon: &OrganLexicon) -> Result<AbnormalityDictionary> {
        if let Some(path) = &self.dictionary {
            require_file("dictionary", path)?;
            return AbnormalityDictionary::load(path, lexicon);
        }
        match &self.cohort {
            Some(spec) => {
                let named: BTreeMap<String, Vec<String>> = spec
                    .organs
                    .iter()
                    .filter(|o| !o.abnormalities.is_empty())
                    .map(|o| (o.name.clone(), o.abnormalities.clone()))
                    .collect();
                AbnormalityDictionary::from_named(&named, lexicon)
            }
            None => Err(Error::validation(
                "missing dictionary: no dictionary file configured and no cohort section to derive one",
            )),
        }
    }

    /// Detection probes: the configured file, else one default probe per
    /// dictionary entry.
    pub fn probes(
        &self,
        lexicon: &OrganLexicon,
        dictionary: &AbnormalityDictionary,
    ) -> Result<Vec<AbnormalityProbe>> {
        match &self.probes {
            Some(path) => {
                require_file("probes", path)?;
                load_probes(path, lexicon)
            }
            None => default_probes(dictionary, lexicon),
        }
    }

    /// The vision-model architecture; without an explicit section the
    /// default architecture gets `n_classes` = largest cohort organ id + 1.
    pub fn model_config(&self) -> Result<ModelConfig> {
        if let Some(model) = &self.model {
            return Ok(model.clone());
        }
        match &self.cohort {
            Some(spec) => {
                let max_id = spec.organs.iter().map(|o| o.id).max().unwrap_or(0);
                Ok(ModelConfig {
                    n_classes: max_id as usize + 1,
                    ..ModelConfig::default()
                })
            }
            None => Err(Error::validation(
                "missing model: no model section and no cohort section to size n_classes",
            )),
        }
    }

    /// The frozen text encoder, checked against the joint embedding width.
    pub fn text_encoder(&self, embed_dim: usize) -> Result<Box<dyn TextEncoder>> {
        if let Some(path) = &self.text_embeddings {
            require_file("text embeddings", path)?;
            let enc = PrecomputedTextEncoder::load(path)?;
            if enc.dim() != embed_dim {
                return Err(Error::validation(format!(
                    "text embedding table dim {} != model embed_dim {embed_dim}",
                    enc.dim()
                )));
            }
            return Ok(Box::new(enc));
        }
        Ok(Box::new(HashedTextEncoder::new(embed_dim, self.text_seed)?))
    }
}

/// Organ-grounded vision-language pretraining on synthetic CT phantoms.
#[derive(Debug, Parser)]
#[command(name = "ctglip", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write its manifest.
    Synth(SynthArgs),
    /// Train on a generated cohort; writes metrics and checkpoints.
    Train(TrainArgs),
    /// Zero-shot organ classification against organ name templates.
    EvalOrgans(EvalOrgansArgs),
    /// Zero-shot abnormality detection over a probe set.
    EvalAbnormality(EvalAbnormalityArgs),
    /// Parse cohort reports and audit them against ground truth.
    ReportParse(ReportParseArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Run config with a `cohort` section.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for volumes, masks, reports, and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Whole-volume image-text contrastive baseline.
    Vanilla,
    /// Organ-level alignment with segmentation (the default).
    Grounded,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Cohort directory (or its manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Override the training mode from the config.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Disable dictionary negatives (every logged batch has b = 0).
    #[arg(long)]
    no_dict: bool,
    /// Disable organ-text alignment.
    #[arg(long)]
    no_ot: bool,
    /// Resume from a checkpoint; the checkpoint fixes the training
    /// config, so mode flags cannot be combined with this.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalOrgansArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cohort directory (or its manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Write the full results document (JSON) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalAbnormalityArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cohort directory (or its manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Probe file; overrides the config's probe path.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Write one JSON row per (subject, applicable probe) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportParseArgs {
    #[arg(long)]
    config: PathBuf,
    /// Cohort directory (or its manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Write one JSON row per parsed report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::EvalOrgans(args) => cmd_eval_organs(args),
        Command::EvalAbnormality(args) => cmd_eval_abnormality(args),
        Command::ReportParse(args) => cmd_report_parse(args),
    }
}

/// Cap the global worker pool when CTGLIP_THREADS is set.
fn init_thread_pool() -> Result<()> {
    let Some(raw) = std::env::var_os("CTGLIP_THREADS") else {
        return Ok(());
    };
    let raw = raw.to_string_lossy();
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::validation(format!(
                "CTGLIP_THREADS must be a positive integer, got '{raw}'"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation(format!("thread pool setup failed: {e}")))
}

/// Missing input files are configuration errors (exit 2), not I/O
/// failures (exit 1), and the message names which input is missing.
fn require_file(kind: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "missing {kind}: {}",
            path.display()
        )))
    }
}

/// Accept either a cohort directory or its manifest file.
fn cohort_dir(data: &Path) -> PathBuf {
    if data.is_file() {
        match data.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    } else {
        data.to_path_buf()
    }
}

fn load_subjects(data: &Path) -> Result<Vec<crate::synthdata::SubjectSample>> {
    let dir = cohort_dir(data);
    require_file("cohort manifest", &dir.join(MANIFEST_NAME))?;
    load_cohort(&dir)
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Rebuild the trained model from a checkpoint, returning it with the
/// text digest and loss config it was trained under.
fn load_model(path: &Path) -> Result<(CtGlipModel, u64, LossConfig)> {
    require_file("checkpoint", path)?;
    let ckpt = load_checkpoint(path)?;
    let digest = ckpt.text_digest;
    let loss = ckpt.loss_config;
    let model = CtGlipModel::from_params(ckpt.model_config, ckpt.params)?;
    Ok((model, digest, loss))
}

/// Zero-shot scores are meaningless in a different text space, so eval
/// commands insist the encoder matches the one trained against.
fn check_text_digest(expected: u64, encoder: &dyn TextEncoder) -> Result<()> {
    if encoder.state_digest() != expected {
        return Err(Error::validation(
            "checkpoint was trained with a different text encoder (digest mismatch)",
        ));
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let spec = cfg
        .cohort
        .as_ref()
        .ok_or_else(|| Error::validation("config has no cohort section"))?;
    generate_cohort(spec, &args.out)?;
    println!(
        "wrote {} subjects; manifest: {}",
        spec.n_subjects,
        args.out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let lexicon = cfg.lexicon()?;
    let dictionary = cfg.dictionary(&lexicon)?;
    let subjects = load_subjects(&args.data)?;

    let mut train_cfg = cfg.train.clone();
    match args.mode {
        Some(Mode::Vanilla) => train_cfg.vanilla_clip = true,
        Some(Mode::Grounded) => train_cfg.vanilla_clip = false,
        None => {}
    }
    if args.no_dict {
        train_cfg.enable_dict = false;
    }
    if args.no_ot {
        train_cfg.enable_ot = false;
    }

    let (final_step, encoder);
    if let Some(resume) = &args.resume {
        if args.mode.is_some() || args.no_dict || args.no_ot {
            return Err(Error::validation(
                "--mode/--no-dict/--no-ot cannot be combined with --resume: \
                 the checkpoint fixes the training config",
            ));
        }
        require_file("checkpoint", resume)?;
        let ckpt = load_checkpoint(resume)?;
        encoder = cfg.text_encoder(ckpt.model_config.embed_dim)?;
        let mut session =
            TrainSession::from_checkpoint(ckpt, &lexicon, &dictionary, encoder.as_ref())?;
        final_step = session.fit(&subjects, &args.out)?.step;
    } else {
        let model_cfg = cfg.model_config()?;
        encoder = cfg.text_encoder(model_cfg.embed_dim)?;
        let model = CtGlipModel::new(model_cfg, train_cfg.seed)?;
        let mut session = TrainSession::new(
            model,
            train_cfg,
            cfg.loss,
            &lexicon,
            &dictionary,
            encoder.as_ref(),
        )?;
        final_step = session.fit(&subjects, &args.out)?.step;
    }
    println!(
        "trained to step {final_step} on {} subjects; final checkpoint: {}",
        subjects.len(),
        args.out.join(FINAL_CHECKPOINT_NAME).display()
    );
    Ok(())
}

/// Results document for eval-organs.
#[derive(Debug, Serialize)]
struct OrganEvalDoc {
    top1_accuracy: f64,
    n_regions: usize,
    per_organ: Vec<OrganRow>,
    predictions: Vec<crate::zeroshot::OrganPrediction>,
}

#[derive(Debug, Serialize)]
struct OrganRow {
    organ: u32,
    name: String,
    regions: usize,
    correct: usize,
    accuracy: f64,
}

fn cmd_eval_organs(args: EvalOrgansArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let lexicon = cfg.lexicon()?;
    let (model, digest, _) = load_model(&args.checkpoint)?;
    let encoder = cfg.text_encoder(model.config.embed_dim)?;
    check_text_digest(digest, encoder.as_ref())?;
    let subjects = load_subjects(&args.data)?;

    let (rows, top1) =
        evaluate_organ_classification(&model, &subjects, &lexicon, encoder.as_ref())?;

    let mut per_organ: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for row in &rows {
        let e = per_organ.entry(row.organ_id).or_default();
        e.0 += 1;
        e.1 += usize::from(row.predicted_id == row.organ_id);
    }
    let per_organ: Vec<OrganRow> = per_organ
        .into_iter()
        .map(|(organ, (regions, correct))| OrganRow {
            organ,
            name: lexicon.name(organ).unwrap_or("?").to_string(),
            regions,
            correct,
            accuracy: correct as f64 / regions as f64,
        })
        .collect();

    let mut table = String::new();
    let _ = writeln!(table, "{:<16} {:>8} {:>8} {:>8}", "organ", "regions", "correct", "top-1");
    for r in &per_organ {
        let _ = writeln!(
            table,
            "{:<16} {:>8} {:>8} {:>7.1}%",
            r.name,
            r.regions,
            r.correct,
            100.0 * r.accuracy
        );
    }
    let _ = writeln!(
        table,
        "{:<16} {:>8} {:>8} {:>7.1}%",
        "overall",
        rows.len(),
        rows.iter().filter(|r| r.predicted_id == r.organ_id).count(),
        100.0 * top1
    );
    print!("{table}");

    if let Some(out) = &args.out {
        let doc = OrganEvalDoc {
            top1_accuracy: top1,
            n_regions: rows.len(),
            per_organ,
            predictions: rows,
        };
        let json =
            serde_json::to_string_pretty(&doc).expect("results serialize");
        write_text(out, &(json + "\n"))?;
        println!("results: {}", out.display());
    }
    Ok(())
}

fn cmd_eval_abnormality(args: EvalAbnormalityArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let lexicon = cfg.lexicon()?;
    let probes = match &args.probes {
        Some(path) => {
            require_file("probes", path)?;
            load_probes(path, &lexicon)?
        }
        None => cfg.probes(&lexicon, &cfg.dictionary(&lexicon)?)?,
    };
    let (model, digest, loss_cfg) = load_model(&args.checkpoint)?;
    let encoder = cfg.text_encoder(model.config.embed_dim)?;
    check_text_digest(digest, encoder.as_ref())?;
    let subjects = load_subjects(&args.data)?;

    let outcomes = evaluate_abnormality_detection(
        &model,
        &subjects,
        &probes,
        loss_cfg.tau,
        encoder.as_ref(),
    )?;

    let mut scored = BinaryOutcomes::new();
    for o in &outcomes {
        scored.push(o.score, o.ground_truth == Polarity::Abnormal);
    }
    let n_abnormal = outcomes
        .iter()
        .filter(|o| o.ground_truth == Polarity::Abnormal)
        .count();
    // A smoke cohort can be single-class; report "n/a" rather than fail.
    let auc = abnormality_auc(&outcomes).ok();
    let stats = binary_stats(&scored, 0.5);

    println!(
        "probes: {}  rows: {}  abnormal: {}",
        probes.len(),
        outcomes.len(),
        n_abnormal
    );
    println!("auc: {}", auc.map_or("n/a".into(), |v| format!("{v:.4}")));
    println!(
        "threshold 0.5: ppv {}  sensitivity {}  f1 {}",
        fmt_opt(stats.ppv),
        fmt_opt(stats.sensitivity),
        fmt_opt(stats.f1)
    );

    if let Some(out) = &args.out {
        let mut doc = String::new();
        for o in &outcomes {
            doc.push_str(&serde_json::to_string(o).expect("outcome serializes"));
            doc.push('\n');
        }
        write_text(out, &doc)?;
        println!("results: {}", out.display());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

/// One report's parse audit row.
#[derive(Debug, Serialize)]
struct ReportRow {
    subject: usize,
    descriptions: Vec<crate::reportproc::OrganDescription>,
    unassigned: Vec<String>,
    matches_ground_truth: bool,
}

fn cmd_report_parse(args: ReportParseArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let lexicon = cfg.lexicon()?;
    let subjects = load_subjects(&args.data)?;

    let mut rows = Vec::with_capacity(subjects.len());
    let mut mismatches = 0usize;
    let mut n_descriptions = 0usize;
    let mut n_unassigned = 0usize;
    for s in &subjects {
        let parsed = parse_report(&s.report, &lexicon)?;
        let abnormal: Vec<u32> = parsed.abnormal_ids();
        let truth: Vec<u32> = s.ground_truth.abnormalities.keys().copied().collect();
        let matches = abnormal == truth;
        mismatches += usize::from(!matches);
        n_descriptions += parsed.descriptions.len();
        n_unassigned += parsed.unassigned.len();
        rows.push(ReportRow {
            subject: s.subject_id,
            descriptions: parsed.descriptions,
            unassigned: parsed.unassigned,
            matches_ground_truth: matches,
        });
    }

    println!(
        "reports: {}  descriptions: {}  unassigned sentences: {}",
        rows.len(),
        n_descriptions,
        n_unassigned
    );
    println!("ground-truth mismatches: {mismatches}");

    if let Some(out) = &args.out {
        let mut doc = String::new();
        for row in &rows {
            doc.push_str(&serde_json::to_string(row).expect("row serializes"));
            doc.push('\n');
        }
        write_text(out, &doc)?;
        println!("results: {}", out.display());
    }
    Ok(())
}
