//! Acceptance gate: nine numbered criteria covering loss correctness,
//! gradient exactness, pinned constants, metric oracles, the end-to-end
//! synthetic experiment, determinism, text-side freezing, and report
//! round-tripping. Each test prints one `PASS criterion N: ...` line
//! with its measured numbers.
//!
//! Every numeric check is made against an oracle implemented here with
//! naive loops, independent of the library's vectorized paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use ctglip::abnodict::AbnormalityDictionary;
use ctglip::encoders::{pooled_means, CtGlipModel, HashedTextEncoder, ModelConfig, TextEncoder};
use ctglip::losses::{
    abnormality_text_loss, abnormality_text_loss_with_grad, clip_batch_loss,
    clip_batch_loss_with_grad, organ_text_loss, organ_text_loss_with_grad, segmentation_loss,
    segmentation_loss_with_grad, total_loss, LossConfig,
};
use ctglip::metrics::{auc, dice_score, f1_score, BinaryOutcomes};
use ctglip::reportproc::{parse_report, Polarity};
use ctglip::synthdata::io::generate_cohort;
use ctglip::synthdata::{
    generate_cohort_in_memory, CohortSpec, OrganMask, OrganSpec, SubjectSample,
};
use ctglip::trainer::{
    checkpoint_bytes, cosine_lr, load_checkpoint, TrainConfig, TrainSession,
    FINAL_CHECKPOINT_NAME,
};
use ctglip::zeroshot::{
    abnormality_auc, default_probes, evaluate_abnormality_detection,
    evaluate_organ_classification,
};

// ---------------------------------------------------------------- helpers

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random embeddings in [-1, 1]^d, L2-normalized like the library's
/// projection heads produce.
fn unit_vecs(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE by direct exponential sums — no log-sum-exp shortcut, so any
/// algebraic slip in the library shows up as a mismatch.
fn naive_symmetric_infonce(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut den_i2t = 0.0;
        for tj in t {
            den_i2t += (dot(&v[i], tj) / tau).exp();
        }
        total += -((dot(&v[i], &t[i]) / tau).exp() / den_i2t).ln();
        let mut den_t2i = 0.0;
        for vj in v {
            den_t2i += (dot(vj, &t[i]) / tau).exp();
        }
        total += -((dot(&v[i], &t[i]) / tau).exp() / den_t2i).ln();
    }
    total / n as f64
}

/// Organ-text alignment with `t.len() - z.len()` extra texts entering
/// only the image-side denominators.
fn naive_asymmetric_infonce(z: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let mut total = 0.0;
    for j in 0..m {
        let mut den_i2t = 0.0;
        for tk in t {
            den_i2t += (dot(&z[j], tk) / tau).exp();
        }
        total += -((dot(&z[j], &t[j]) / tau).exp() / den_i2t).ln();
        let mut den_t2i = 0.0;
        for zk in z {
            den_t2i += (dot(zk, &t[j]) / tau).exp();
        }
        total += -((dot(&z[j], &t[j]) / tau).exp() / den_t2i).ln();
    }
    total / m as f64
}

/// Central finite differences on every coordinate of a flat copy of the
/// inputs; returns the worst relative error against the analytic grads.
fn max_fd_error(
    flat: &[f64],
    analytic: &[f64],
    mut loss_at: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(flat.len(), analytic.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = flat.to_vec();
        plus[i] += h;
        let mut minus = flat.to_vec();
        minus[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn flatten(sets: &[&[Vec<f64>]]) -> Vec<f64> {
    sets.iter()
        .flat_map(|s| s.iter().flat_map(|v| v.iter().copied()))
        .collect()
}

fn unflatten(flat: &[f64], n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let first: Vec<Vec<f64>> = (0..n).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect();
    let rest: Vec<Vec<f64>> = flat[n * d..]
        .chunks(d)
        .map(|c| c.to_vec())
        .collect();
    (first, rest)
}

// ------------------------------------------------- criterion 1: oracles

#[test]
fn criterion_1_contrastive_losses_match_naive_oracles() {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = 8;
        let tau = 0.07;

        let n = r.gen_range(1..=6);
        let v = unit_vecs(&mut r, n, d);
        let t = unit_vecs(&mut r, n, d);
        let lib = clip_batch_loss(&v, &t, tau).unwrap();
        worst = worst.max((lib - naive_symmetric_infonce(&v, &t, tau)).abs());

        let m = r.gen_range(1..=6);
        let z = unit_vecs(&mut r, m, d);
        let tm = unit_vecs(&mut r, m, d);
        let lib = organ_text_loss(&z, &tm, tau).unwrap();
        worst = worst.max((lib - naive_symmetric_infonce(&z, &tm, tau)).abs());

        let b = r.gen_range(0..=12);
        let tb = unit_vecs(&mut r, m + b, d);
        let lib = abnormality_text_loss(&z, &tb, tau).unwrap();
        worst = worst.max((lib - naive_asymmetric_infonce(&z, &tb, tau)).abs());
    }
    assert!(worst <= 1e-10, "loss oracle mismatch: {worst:e}");
    println!("PASS criterion 1: 100 random instances of all three contrastive losses match naive-loop oracles (worst |diff| = {worst:.2e} <= 1e-10)");
}

// ---------------------------------------- criterion 2: analytic gradients

#[test]
fn criterion_2_analytic_gradients_match_finite_differences() {
    let mut r = rng(202);
    let d = 6;
    let tau = 0.07;
    let mut worst = [0.0f64; 4];

    for _ in 0..20 {
        let n = r.gen_range(2..=4);
        let v = unit_vecs(&mut r, n, d);
        let t = unit_vecs(&mut r, n, d);
        let (_, dv, dt) = clip_batch_loss_with_grad(&v, &t, tau).unwrap();
        let analytic = flatten(&[&dv, &dt]);
        let flat = flatten(&[&v, &t]);
        worst[0] = worst[0].max(max_fd_error(&flat, &analytic, |x| {
            let (v2, t2) = unflatten(x, n, d);
            clip_batch_loss(&v2, &t2, tau).unwrap()
        }));
    }

    for _ in 0..20 {
        let m = r.gen_range(2..=4);
        let z = unit_vecs(&mut r, m, d);
        let t = unit_vecs(&mut r, m, d);
        let (_, dz, dt) = organ_text_loss_with_grad(&z, &t, tau).unwrap();
        let analytic = flatten(&[&dz, &dt]);
        let flat = flatten(&[&z, &t]);
        worst[1] = worst[1].max(max_fd_error(&flat, &analytic, |x| {
            let (z2, t2) = unflatten(x, m, d);
            organ_text_loss(&z2, &t2, tau).unwrap()
        }));
    }

    for _ in 0..20 {
        let m = r.gen_range(2..=3);
        let b = r.gen_range(0..=4);
        let z = unit_vecs(&mut r, m, d);
        let t = unit_vecs(&mut r, m + b, d);
        let (_, dz, dt) = abnormality_text_loss_with_grad(&z, &t, tau).unwrap();
        let analytic = flatten(&[&dz, &dt]);
        let flat = flatten(&[&z, &t]);
        worst[2] = worst[2].max(max_fd_error(&flat, &analytic, |x| {
            let (z2, t2) = unflatten(x, m, d);
            abnormality_text_loss(&z2, &t2, tau).unwrap()
        }));
    }

    for _ in 0..20 {
        let (classes, dd, hh, ww) = (3usize, 3usize, 3usize, 3usize);
        let logits =
            Array4::from_shape_fn((classes, dd, hh, ww), |_| r.gen_range(-2.0..2.0));
        let labels =
            Array3::from_shape_fn((dd, hh, ww), |_| r.gen_range(0..classes) as u16);
        let mask = OrganMask { labels };
        let (_, grad) = segmentation_loss_with_grad(&logits, &mask, 1e-5).unwrap();
        let flat: Vec<f64> = logits.iter().copied().collect();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        worst[3] = worst[3].max(max_fd_error(&flat, &analytic, |x| {
            let l = Array4::from_shape_vec((classes, dd, hh, ww), x.to_vec()).unwrap();
            segmentation_loss(&l, &mask, 1e-5).unwrap()
        }));
    }

    for (name, w) in ["batch", "organ-text", "abnormality-text", "segmentation"]
        .iter()
        .zip(&worst)
    {
        assert!(*w <= 1e-4, "{name} gradient off by {w:e}");
    }
    println!(
        "PASS criterion 2: analytic gradients of all four losses match central differences \
         (worst rel err: batch {:.1e}, organ-text {:.1e}, abnormality-text {:.1e}, segmentation {:.1e}; all <= 1e-4)",
        worst[0], worst[1], worst[2], worst[3]
    );
}

// ------------------------------------- criterion 3: B = 0 degeneration

#[test]
fn criterion_3_abnormality_loss_without_extra_texts_reduces_to_organ_loss() {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = r.gen_range(1..=6);
        let z = unit_vecs(&mut r, m, 8);
        let t = unit_vecs(&mut r, m, 8);
        let at = abnormality_text_loss(&z, &t, 0.07).unwrap();
        let ot = organ_text_loss(&z, &t, 0.07).unwrap();
        worst = worst.max((at - ot).abs());
    }
    assert!(worst <= 1e-12, "B=0 reduction broke: {worst:e}");
    println!("PASS criterion 3: with zero appended texts the abnormality loss equals the organ loss on 50 instances (worst |diff| = {worst:.2e} <= 1e-12)");
}

// ------------------------------------------- criterion 4: pinned values

#[test]
fn criterion_4_pinned_constants_and_schedule_endpoints() {
    let f1 = f1_score(0.3947, 0.7859);
    assert!(
        (f1 - 0.5255).abs() <= 1e-4,
        "f1(0.3947, 0.7859) = {f1}, expected 0.5255 ± 1e-4"
    );

    let first = cosine_lr(0, 1000, 1e-3, 1e-6).unwrap();
    let last = cosine_lr(1000, 1000, 1e-3, 1e-6).unwrap();
    assert_eq!(first.to_bits(), (1e-3f64).to_bits(), "schedule start not exact");
    assert_eq!(last.to_bits(), (1e-6f64).to_bits(), "schedule end not exact");

    let cfg = LossConfig::default();
    assert_eq!(cfg.tau, 0.07);
    assert_eq!(cfg.lambda_ot, 0.5);
    assert_eq!(cfg.lambda_at, 0.5);
    assert_eq!(cfg.lambda_segm, 1.0);

    let breakdown = total_loss(1.0, 1.0, 1.0, &cfg).unwrap();
    assert_eq!(breakdown.total, 2.0, "0.5 + 0.5 + 1.0 weighting broken");

    println!("PASS criterion 4: f1(0.3947, 0.7859) = {f1:.4}; cosine schedule endpoints exactly 1e-3 / 1e-6; default weights (tau 0.07, 0.5/0.5/1.0) give total_loss(1,1,1) = 2.0");
}

// ------------------------------------------ criterion 5: metric oracles

#[test]
fn criterion_5_metrics_match_counting_oracles() {
    let mut r = rng(505);

    // AUC against O(n^2) pair counting, with heavy score ties.
    let mut worst_auc = 0.0f64;
    for _ in 0..200 {
        let n = r.gen_range(4..=40);
        let mut outcomes = BinaryOutcomes::new();
        loop {
            outcomes.items.clear();
            for _ in 0..n {
                let score = r.gen_range(0..8) as f64 / 10.0;
                outcomes.push(score, r.gen_bool(0.5));
            }
            let pos = outcomes.items.iter().filter(|(_, l)| *l).count();
            if pos > 0 && pos < n {
                break;
            }
        }
        let lib = auc(&outcomes).unwrap();
        let mut num = 0.0;
        let mut pairs = 0u64;
        for &(sp, lp) in &outcomes.items {
            if !lp {
                continue;
            }
            for &(sn, ln) in &outcomes.items {
                if ln {
                    continue;
                }
                pairs += 1;
                if sp > sn {
                    num += 1.0;
                } else if sp == sn {
                    num += 0.5;
                }
            }
        }
        worst_auc = worst_auc.max((lib - num / pairs as f64).abs());
    }
    assert!(worst_auc <= 1e-12, "auc oracle mismatch: {worst_auc:e}");

    // Dice against direct overlap counting.
    let mut worst_dice = 0.0f64;
    for _ in 0..50 {
        let pred = Array3::from_shape_fn((6, 6, 6), |_| r.gen_range(0..3) as u16);
        let truth = Array3::from_shape_fn((6, 6, 6), |_| r.gen_range(0..3) as u16);
        for class in 1..3u16 {
            let lib = dice_score(&pred, &truth, class).unwrap();
            let inter = pred
                .iter()
                .zip(truth.iter())
                .filter(|(p, t)| **p == class && **t == class)
                .count();
            let total = pred.iter().filter(|p| **p == class).count()
                + truth.iter().filter(|t| **t == class).count();
            worst_dice = worst_dice.max((lib - 2.0 * inter as f64 / total as f64).abs());
        }
    }
    assert!(worst_dice <= 1e-6, "dice oracle mismatch: {worst_dice:e}");

    // Masked mean-pooling against naive per-voxel accumulation.
    let mut worst_pool = 0.0f64;
    for _ in 0..20 {
        let (c, d, h, w) = (5usize, 4usize, 4usize, 4usize);
        let fm = Array4::from_shape_fn((c, d, h, w), |_| r.gen_range(-1.0..1.0));
        let labels = Array3::from_shape_fn((d, h, w), |_| r.gen_range(0..4) as u16);
        let mask = OrganMask { labels };
        let pooled = pooled_means(&fm, &mask);
        let mut sums: BTreeMap<u16, (usize, Vec<f64>)> = BTreeMap::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let label = mask.labels[[z, y, x]];
                    if label == 0 {
                        continue;
                    }
                    let entry = sums.entry(label).or_insert((0, vec![0.0; c]));
                    entry.0 += 1;
                    for ch in 0..c {
                        entry.1[ch] += fm[[ch, z, y, x]];
                    }
                }
            }
        }
        assert_eq!(pooled.len(), sums.len());
        for (organ_id, _, mean) in &pooled {
            let (count, sum) = &sums[&(*organ_id as u16)];
            for ch in 0..c {
                worst_pool = worst_pool.max((mean[ch] - sum[ch] / *count as f64).abs());
            }
        }
    }
    assert!(worst_pool <= 1e-6, "pooling oracle mismatch: {worst_pool:e}");

    println!("PASS criterion 5: auc matches pair counting on 200 tied instances ({worst_auc:.1e}), dice matches overlap counting ({worst_dice:.1e}), organ pooling matches voxel loops ({worst_pool:.1e})");
}

// --------------------------------- criterion 6: end-to-end experiment

fn experiment_organs() -> Vec<OrganSpec> {
    let table: [(u32, &str, &str); 8] = [
        (1, "spleen", "splenomegaly"),
        (2, "pancreas", "acute pancreatitis"),
        (3, "aorta", "arteriosclerosis of aorta"),
        (4, "kidney", "kidney stone"),
        (5, "liver", "fatty liver"),
        (6, "lung", "pulmonary nodules"),
        (7, "gallbladder", "gallbladder stones"),
        (8, "stomach", "gastric distension"),
    ];
    table
        .into_iter()
        .map(|(id, name, abn)| OrganSpec {
            id,
            name: name.to_string(),
            abnormalities: vec![abn.to_string()],
        })
        .collect()
}

fn experiment_spec(n_subjects: usize, master_seed: u64) -> CohortSpec {
    CohortSpec {
        n_subjects,
        organs: experiment_organs(),
        abnormality_rate: 0.5,
        shape: [16, 16, 16],
        spacing: [1.0, 1.0, 1.0],
        master_seed,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.15,
    }
}

fn experiment_model() -> ModelConfig {
    ModelConfig {
        channels: vec![12, 12],
        kernel: 3,
        embed_dim: 128,
        hidden: 64,
        n_classes: 9,
    }
}

fn train_arm(
    subjects: &[SubjectSample],
    lexicon: &ctglip::reportproc::OrganLexicon,
    dictionary: &AbnormalityDictionary,
    encoder: &dyn TextEncoder,
    configure: impl FnOnce(&mut TrainConfig),
) -> CtGlipModel {
    let mut cfg: TrainConfig = serde_json::from_str("{}").unwrap();
    cfg.epochs = 10;
    cfg.batch_size = 8;
    cfg.seed = 3;
    configure(&mut cfg);
    let model = CtGlipModel::new(experiment_model(), cfg.seed).unwrap();
    let mut session = TrainSession::new(
        model,
        cfg,
        LossConfig::default(),
        lexicon,
        dictionary,
        encoder,
    )
    .unwrap();
    session.run(subjects, |_| Ok(())).unwrap();
    session.model
}

#[test]
fn criterion_6_grounded_pretraining_beats_image_level_baseline() {
    let train_subjects = generate_cohort_in_memory(&experiment_spec(200, 42)).unwrap();
    let test_subjects = generate_cohort_in_memory(&experiment_spec(50, 777)).unwrap();
    let spec = experiment_spec(0, 0);
    let lexicon = spec.lexicon().unwrap();
    let named: BTreeMap<String, Vec<String>> = spec
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.abnormalities.clone()))
        .collect();
    let dictionary = AbnormalityDictionary::from_named(&named, &lexicon).unwrap();
    let encoder = HashedTextEncoder::new(128, 2024).unwrap();
    let probes = default_probes(&dictionary, &lexicon).unwrap();
    let tau = LossConfig::default().tau;

    let evaluate = |model: &CtGlipModel| -> (f64, f64) {
        let (_, top1) =
            evaluate_organ_classification(model, &test_subjects, &lexicon, &encoder).unwrap();
        let outcomes =
            evaluate_abnormality_detection(model, &test_subjects, &probes, tau, &encoder).unwrap();
        (abnormality_auc(&outcomes).unwrap(), top1)
    };

    let at_only = train_arm(&train_subjects, &lexicon, &dictionary, &encoder, |c| {
        c.enable_ot = false;
        c.enable_dict = false;
    });
    let (auc_at, top1_at) = evaluate(&at_only);

    let at_ot = train_arm(&train_subjects, &lexicon, &dictionary, &encoder, |c| {
        c.enable_dict = false;
    });
    let (auc_atot, top1_atot) = evaluate(&at_ot);

    let full = train_arm(&train_subjects, &lexicon, &dictionary, &encoder, |_| {});
    let (auc_full, top1_full) = evaluate(&full);

    let baseline = train_arm(&train_subjects, &lexicon, &dictionary, &encoder, |c| {
        c.vanilla_clip = true;
    });
    let (auc_base, top1_base) = evaluate(&baseline);

    assert!(
        top1_full >= 0.95,
        "full model organ top-1 {top1_full:.3} below 0.95"
    );
    assert!(
        auc_full >= 0.90,
        "full model abnormality AUC {auc_full:.3} below 0.90"
    );
    assert!(
        top1_base < top1_full,
        "image-level baseline top-1 {top1_base:.3} not below grounded {top1_full:.3}"
    );
    assert!(
        auc_base < auc_full,
        "image-level baseline AUC {auc_base:.3} not below grounded {auc_full:.3}"
    );
    // Ablation ordering, each rung allowed +-0.02 of seed noise.
    assert!(
        auc_at <= auc_atot + 0.02,
        "ablation ordering broke: AUC(at) {auc_at:.4} > AUC(at+ot) {auc_atot:.4} + 0.02"
    );
    assert!(
        auc_atot <= auc_full + 0.02,
        "ablation ordering broke: AUC(at+ot) {auc_atot:.4} > AUC(full) {auc_full:.4} + 0.02"
    );
    assert!(
        auc_at < auc_full,
        "adding alignment terms did not improve AUC end to end: {auc_at:.4} vs {auc_full:.4}"
    );

    println!(
        "PASS criterion 6: grounded pretraining beats the image-level baseline \
         (auc/top1 — at {auc_at:.4}/{top1_at:.3}, at+ot {auc_atot:.4}/{top1_atot:.3}, \
         full {auc_full:.4}/{top1_full:.3}, image-level {auc_base:.4}/{top1_base:.3})"
    );
}

// --------------------------------- criterion 7: determinism and resume

fn small_spec(seed: u64) -> CohortSpec {
    CohortSpec {
        n_subjects: 16,
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
        master_seed: seed,
        intensity_margin: 0.05,
        normal_sentence_rate: 0.5,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: vec![6],
        kernel: 3,
        embed_dim: 16,
        hidden: 12,
        n_classes: 4,
    }
}

fn small_train_cfg() -> TrainConfig {
    let mut cfg: TrainConfig = serde_json::from_str("{}").unwrap();
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.seed = 9;
    cfg.checkpoint_every = 8;
    cfg
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut hashes = BTreeMap::new();
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in names {
        let bytes = fs::read(dir.join(&name)).unwrap();
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hashes.insert(name, hex);
    }
    hashes
}

#[test]
fn criterion_7_identical_seeds_reproduce_bitwise_and_resume_is_exact() {
    let spec = small_spec(11);
    let tmp = tempfile::tempdir().unwrap();

    // Same spec written twice produces byte-identical files.
    let dir_a = tmp.path().join("cohort_a");
    let dir_b = tmp.path().join("cohort_b");
    generate_cohort(&spec, &dir_a).unwrap();
    generate_cohort(&spec, &dir_b).unwrap();
    let hashes_a = hash_dir(&dir_a);
    let hashes_b = hash_dir(&dir_b);
    assert!(!hashes_a.is_empty());
    assert_eq!(hashes_a, hashes_b, "cohort files differ between runs");

    // Same seed trains to bit-identical parameters with an identical
    // step trajectory.
    let subjects = generate_cohort_in_memory(&spec).unwrap();
    let lexicon = spec.lexicon().unwrap();
    let named: BTreeMap<String, Vec<String>> = spec
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.abnormalities.clone()))
        .collect();
    let dictionary = AbnormalityDictionary::from_named(&named, &lexicon).unwrap();
    let encoder = HashedTextEncoder::new(16, 5).unwrap();

    let run_once = || {
        let model = CtGlipModel::new(small_model(), small_train_cfg().seed).unwrap();
        let mut session = TrainSession::new(
            model,
            small_train_cfg(),
            LossConfig::default(),
            &lexicon,
            &dictionary,
            &encoder,
        )
        .unwrap();
        let mut trajectory = Vec::new();
        session
            .run(&subjects, |rec| {
                trajectory.push(serde_json::to_string(rec).unwrap());
                Ok(())
            })
            .unwrap();
        let bits: Vec<u64> = session.model.params.iter().map(|p| p.to_bits()).collect();
        (trajectory, bits)
    };
    let (traj_1, bits_1) = run_once();
    let (traj_2, bits_2) = run_once();
    assert_eq!(traj_1, traj_2, "step trajectories diverged");
    assert_eq!(bits_1, bits_2, "final parameters differ in some bit");

    // Resuming from a mid-run checkpoint lands on the same bytes as the
    // uninterrupted run, optimizer state included.
    let out_full = tmp.path().join("run_full");
    let model = CtGlipModel::new(small_model(), small_train_cfg().seed).unwrap();
    let mut straight = TrainSession::new(
        model,
        small_train_cfg(),
        LossConfig::default(),
        &lexicon,
        &dictionary,
        &encoder,
    )
    .unwrap();
    let final_straight = straight.fit(&subjects, &out_full).unwrap();

    let mid = load_checkpoint(&out_full.join("checkpoint_000008.bin")).unwrap();
    assert_eq!(mid.step, 8);
    let mut resumed =
        TrainSession::from_checkpoint(mid, &lexicon, &dictionary, &encoder).unwrap();
    let out_resumed = tmp.path().join("run_resumed");
    let final_resumed = resumed.fit(&subjects, &out_resumed).unwrap();

    let bytes_straight = checkpoint_bytes(&final_straight).unwrap();
    let bytes_resumed = checkpoint_bytes(&final_resumed).unwrap();
    assert_eq!(
        bytes_straight, bytes_resumed,
        "resumed run does not reproduce the straight run"
    );
    let final_on_disk = load_checkpoint(&out_resumed.join(FINAL_CHECKPOINT_NAME)).unwrap();
    assert_eq!(checkpoint_bytes(&final_on_disk).unwrap(), bytes_straight);

    println!(
        "PASS criterion 7: cohorts are byte-identical across runs ({} files), training is \
         bit-reproducible over {} steps, and a step-8 resume matches the straight run's \
         final checkpoint byte for byte ({} bytes)",
        hashes_a.len(),
        traj_1.len(),
        bytes_straight.len()
    );
}

// ----------------------------------------- criterion 8: frozen text side

#[test]
fn criterion_8_text_encoder_state_is_untouched_by_training() {
    let spec = small_spec(13);
    let subjects = generate_cohort_in_memory(&spec).unwrap();
    let lexicon = spec.lexicon().unwrap();
    let named: BTreeMap<String, Vec<String>> = spec
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.abnormalities.clone()))
        .collect();
    let dictionary = AbnormalityDictionary::from_named(&named, &lexicon).unwrap();
    let encoder = HashedTextEncoder::new(16, 7).unwrap();
    let digest_before = encoder.state_digest();

    let model = CtGlipModel::new(small_model(), 1).unwrap();
    let mut session = TrainSession::new(
        model,
        small_train_cfg(),
        LossConfig::default(),
        &lexicon,
        &dictionary,
        &encoder,
    )
    .unwrap();
    session.run(&subjects, |_| Ok(())).unwrap();
    let ckpt = session.checkpoint();

    assert_eq!(
        encoder.state_digest(),
        digest_before,
        "text encoder state changed during training"
    );
    assert_eq!(
        ckpt.text_digest, digest_before,
        "checkpoint does not carry the frozen text digest"
    );
    println!(
        "PASS criterion 8: text encoder digest {digest_before:#018x} is unchanged by a full \
         training run and is stamped into the checkpoint"
    );
}

// ------------------------------------- criterion 9: report round-trip

#[test]
fn criterion_9_reports_round_trip_on_five_hundred_subjects() {
    let mut spec = experiment_spec(500, 2025);
    spec.normal_sentence_rate = 0.75;
    let subjects = generate_cohort_in_memory(&spec).unwrap();
    let lexicon = spec.lexicon().unwrap();

    let mut errors = 0usize;
    let mut descriptions = 0usize;
    for s in &subjects {
        let parsed = parse_report(&s.report, &lexicon).unwrap();
        descriptions += parsed.descriptions.len();
        let truth: Vec<u32> = s.ground_truth.abnormalities.keys().copied().collect();
        if parsed.abnormal_ids() != truth {
            errors += 1;
            continue;
        }
        for d in &parsed.descriptions {
            let listed = s.ground_truth.abnormalities.contains_key(&d.organ_id);
            let ok = match d.polarity {
                Polarity::Abnormal => listed,
                Polarity::Normal => {
                    !listed && s.ground_truth.present.contains(&d.organ_id)
                }
            };
            if !ok {
                errors += 1;
                break;
            }
        }
        if !parsed.unassigned.is_empty()
            && !(parsed.descriptions.is_empty() && s.ground_truth.abnormalities.is_empty())
        {
            errors += 1;
        }
    }
    assert_eq!(errors, 0, "{errors} of 500 reports failed to round-trip");
    println!(
        "PASS criterion 9: 500 generated reports ({descriptions} organ sentences) parse back \
         to the generator's organ / polarity ground truth with 0 errors"
    );
}
