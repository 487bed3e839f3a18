//! The three contrastive objectives on hand-built embeddings: the
//! image-level batch loss, the symmetric organ-text loss, and the
//! asymmetric abnormality-text loss whose appended negatives enter only
//! the image-to-text denominators.

use ctglip::losses::{
    abnormality_text_loss, clip_batch_loss, organ_text_loss, total_loss, LossConfig,
};

/// Unit vector with a single bump, slightly rotated toward its neighbor
/// so the losses have something to discriminate.
fn embedding(dim: usize, hot: usize, bleed: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[hot] = 1.0;
    v[(hot + 1) % dim] = bleed;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn main() -> ctglip::Result<()> {
    let cfg = LossConfig::default();
    println!(
        "defaults: tau = {}, weights = {}/{}/{} (organ/abnormality/segmentation)",
        cfg.tau, cfg.lambda_ot, cfg.lambda_at, cfg.lambda_segm
    );

    // Batch of four image embeddings vs. their four report embeddings.
    let images: Vec<Vec<f64>> = (0..4).map(|i| embedding(8, i, 0.3)).collect();
    let reports: Vec<Vec<f64>> = (0..4).map(|i| embedding(8, i, 0.25)).collect();
    println!();
    println!(
        "image-level batch loss (4 pairs, aligned):    {:.4}",
        clip_batch_loss(&images, &reports, cfg.tau)?
    );
    let mut shuffled = reports.clone();
    shuffled.swap(0, 2);
    println!(
        "image-level batch loss (two pairs swapped):   {:.4}",
        clip_batch_loss(&images, &shuffled, cfg.tau)?
    );

    // One image with three pooled organ embeddings and their texts, in
    // a crowded low-dimensional space so nothing is trivially separable.
    let organs: Vec<Vec<f64>> = (0..3).map(|i| embedding(4, i, 0.6)).collect();
    let texts: Vec<Vec<f64>> = (0..3).map(|i| embedding(4, i, 0.5)).collect();
    let l_ot = organ_text_loss(&organs, &texts, cfg.tau)?;
    println!();
    println!("organ-text loss over 3 organs:                {l_ot:.4}");

    // The abnormality loss on the same pairs, without negatives, is the
    // organ loss exactly.
    let l_at_plain = abnormality_text_loss(&organs, &texts, cfg.tau)?;
    println!("abnormality-text loss, no negatives:          {l_at_plain:.4}  (identical)");

    // Appending dictionary negatives grows only the image-side
    // denominators, so the loss rises: the model must push organ
    // embeddings away from abnormal wording that was never paired with
    // this image.
    let mut with_negatives = texts.clone();
    with_negatives.push(embedding(4, 0, 0.9));
    with_negatives.push(embedding(4, 1, 0.9));
    let l_at = abnormality_text_loss(&organs, &with_negatives, cfg.tau)?;
    println!("abnormality-text loss, 2 negatives appended:  {l_at:.4}");

    let breakdown = total_loss(l_ot, l_at, 0.9, &cfg)?;
    println!();
    println!(
        "total = {} * {:.4} + {} * {:.4} + {} * 0.9000 = {:.4}",
        cfg.lambda_ot, breakdown.l_ot, cfg.lambda_at, breakdown.l_at, cfg.lambda_segm,
        breakdown.total
    );
    Ok(())
}
