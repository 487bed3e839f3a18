//! Training objectives: pairwise image-text InfoNCE, organ-text
//! alignment, abnormality-text alignment with appended dictionary
//! negatives, the segmentation auxiliary (cross-entropy + soft dice),
//! and their weighted total.
//!
//! All similarities are dot products of unit vectors scaled by `1/τ`;
//! log-sum-exp uses max subtraction so τ = 0.07 stays well-conditioned.
//! The organ-text and abnormality-text losses are written independently
//! on purpose: the reduction of the latter to the former at B = 0 is a
//! tested property, not a code-sharing artifact.
//!
//! A deliberate asymmetry in the abnormality-text loss: the image→text
//! term normalizes over all M+B texts, while the text→image term
//! normalizes over only the M organ embeddings, so dictionary negatives
//! never serve as anchors.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::OrganMask;

fn default_tau() -> f64 {
    0.07
}

fn default_lambda_ot() -> f64 {
    0.5
}

fn default_lambda_at() -> f64 {
    0.5
}

fn default_lambda_segm() -> f64 {
    1.0
}

fn default_dice_epsilon() -> f64 {
    1e-5
}

/// Loss weights and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda_ot")]
    pub lambda_ot: f64,
    #[serde(default = "default_lambda_at")]
    pub lambda_at: f64,
    #[serde(default = "default_lambda_segm")]
    pub lambda_segm: f64,
    #[serde(default = "default_dice_epsilon")]
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: default_tau(),
            lambda_ot: default_lambda_ot(),
            lambda_at: default_lambda_at(),
            lambda_segm: default_lambda_segm(),
            dice_epsilon: default_dice_epsilon(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::validation(format!("tau {} must be positive", self.tau)));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::validation("dice_epsilon must be positive"));
        }
        for (name, l) in [
            ("lambda_ot", self.lambda_ot),
            ("lambda_at", self.lambda_at),
            ("lambda_segm", self.lambda_segm),
        ] {
            if !(l >= 0.0) {
                return Err(Error::validation(format!("{name} {l} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// One training step's loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ot: f64,
    pub l_at: f64,
    pub l_segm: f64,
    pub total: f64,
}

/// Weighted sum of the components; rejects non-finite inputs as
/// divergence and negative inputs as invalid.
pub fn total_loss(l_ot: f64, l_at: f64, l_segm: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    for (name, v) in [("l_ot", l_ot), ("l_at", l_at), ("l_segm", l_segm)] {
        if v.is_nan() || v.is_infinite() {
            return Err(Error::Divergence(format!("{name} is {v}")));
        }
        if v < 0.0 {
            return Err(Error::validation(format!("{name} {v} is negative")));
        }
    }
    Ok(LossBreakdown {
        l_ot,
        l_at,
        l_segm,
        total: cfg.lambda_ot * l_ot + cfg.lambda_at * l_at + cfg.lambda_segm * l_segm,
    })
}

fn check_embedding_sets(a_name: &str, a: &[Vec<f64>], b_name: &str, b: &[Vec<f64>]) -> Result<usize> {
    let dim = a
        .first()
        .or_else(|| b.first())
        .map(Vec::len)
        .ok_or_else(|| Error::validation(format!("{a_name} and {b_name} are both empty")))?;
    for (name, set) in [(a_name, a), (b_name, b)] {
        for (i, v) in set.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::validation(format!(
                    "{name}[{i}] has dim {} but {dim} expected",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("{name}[{i}] is not finite")));
            }
        }
    }
    Ok(dim)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// log Σ e^{x_i} with max subtraction.
fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction, written into `out`.
fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation(format!("tau {tau} must be positive")));
    }
    Ok(())
}

/// Batch-level symmetric InfoNCE over N matched image/text pairs:
/// mean over i of [−log softmax over row i − log softmax over column i]
/// of the N×N similarity matrix scaled by 1/τ.
pub fn clip_batch_loss(v_emb: &[Vec<f64>], t_emb: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if v_emb.len() != t_emb.len() || v_emb.is_empty() {
        return Err(Error::validation(format!(
            "need equally many image and text embeddings, got {} and {}",
            v_emb.len(),
            t_emb.len()
        )));
    }
    check_embedding_sets("image", v_emb, "text", t_emb)?;
    let n = v_emb.len();
    let s: Vec<Vec<f64>> = v_emb
        .iter()
        .map(|v| t_emb.iter().map(|t| dot(v, t) / tau).collect())
        .collect();
    let mut loss = 0.0;
    for i in 0..n {
        let row = &s[i];
        let col: Vec<f64> = (0..n).map(|j| s[j][i]).collect();
        loss += (lse(row) - row[i]) + (lse(&col) - col[i]);
    }
    Ok(loss / n as f64)
}

/// [`clip_batch_loss`] plus gradients w.r.t. both embedding sets.
pub fn clip_batch_loss_with_grad(
    v_emb: &[Vec<f64>],
    t_emb: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let loss = clip_batch_loss(v_emb, t_emb, tau)?;
    let n = v_emb.len();
    let dim = v_emb[0].len();
    let s: Vec<Vec<f64>> = v_emb
        .iter()
        .map(|v| t_emb.iter().map(|t| dot(v, t) / tau).collect())
        .collect();
    // d total / d s[i][j], already averaged over the batch
    let mut ds = vec![vec![0.0; n]; n];
    let mut p = vec![0.0; n];
    for i in 0..n {
        softmax_into(&s[i], &mut p);
        for j in 0..n {
            ds[i][j] += p[j];
        }
        ds[i][i] -= 1.0;
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| s[i][j]).collect();
        softmax_into(&col, &mut p);
        for i in 0..n {
            ds[i][j] += p[i];
        }
        ds[j][j] -= 1.0;
    }
    let scale = 1.0 / (n as f64 * tau);
    let mut d_v = vec![vec![0.0; dim]; n];
    let mut d_t = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in 0..n {
            let g = ds[i][j] * scale;
            if g == 0.0 {
                continue;
            }
            for k in 0..dim {
                d_v[i][k] += g * t_emb[j][k];
                d_t[j][k] += g * v_emb[i][k];
            }
        }
    }
    Ok((loss, d_v, d_t))
}

/// Organ-level symmetric InfoNCE within one image: M organ embeddings
/// against their M index-aligned texts, both denominators over the M
/// candidates, averaged over M.
pub fn organ_text_loss(z: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if z.is_empty() {
        return Err(Error::validation(
            "organ_text_loss needs at least one organ (skip images with none)",
        ));
    }
    if z.len() != t.len() {
        return Err(Error::validation(format!(
            "organ_text_loss: {} organs vs {} texts",
            z.len(),
            t.len()
        )));
    }
    check_embedding_sets("organ", z, "text", t)?;
    let m = z.len();
    let mut loss = 0.0;
    for j in 0..m {
        let img_row: Vec<f64> = (0..m).map(|k| dot(&z[j], &t[k]) / tau).collect();
        let txt_row: Vec<f64> = (0..m).map(|k| dot(&z[k], &t[j]) / tau).collect();
        loss += (lse(&img_row) - img_row[j]) + (lse(&txt_row) - txt_row[j]);
    }
    Ok(loss / m as f64)
}

/// [`organ_text_loss`] plus gradients w.r.t. organ and text embeddings.
pub fn organ_text_loss_with_grad(
    z: &[Vec<f64>],
    t: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let loss = organ_text_loss(z, t, tau)?;
    let m = z.len();
    let dim = z[0].len();
    let scale = 1.0 / (m as f64 * tau);
    let mut d_z = vec![vec![0.0; dim]; m];
    let mut d_t = vec![vec![0.0; dim]; m];
    let mut p = vec![0.0; m];
    for j in 0..m {
        // image→text: softmax over texts k for anchor organ j
        let img_row: Vec<f64> = (0..m).map(|k| dot(&z[j], &t[k]) / tau).collect();
        softmax_into(&img_row, &mut p);
        for k in 0..m {
            let g = (p[k] - if k == j { 1.0 } else { 0.0 }) * scale;
            for x in 0..dim {
                d_z[j][x] += g * t[k][x];
                d_t[k][x] += g * z[j][x];
            }
        }
        // text→image: softmax over organs k for anchor text j
        let txt_row: Vec<f64> = (0..m).map(|k| dot(&z[k], &t[j]) / tau).collect();
        softmax_into(&txt_row, &mut p);
        for k in 0..m {
            let g = (p[k] - if k == j { 1.0 } else { 0.0 }) * scale;
            for x in 0..dim {
                d_z[k][x] += g * t[j][x];
                d_t[j][x] += g * z[k][x];
            }
        }
    }
    Ok((loss, d_z, d_t))
}

/// The two averaged terms of the abnormality-text loss, separated so the
/// asymmetry is observable: `(image→text term, text→image term)`. The
/// first normalizes each anchor organ over all `M+B` texts; the second
/// normalizes each of the first `M` texts over only the `M` organs.
pub fn abnormality_text_terms(z: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<(f64, f64)> {
    check_tau(tau)?;
    if z.is_empty() {
        return Err(Error::validation(
            "abnormality_text_loss needs at least one organ (skip images with none)",
        ));
    }
    if t.len() < z.len() {
        return Err(Error::validation(format!(
            "abnormality_text_loss: {} texts cannot cover {} organs",
            t.len(),
            z.len()
        )));
    }
    check_embedding_sets("organ", z, "text", t)?;
    let m = z.len();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for j in 0..m {
        let img_row: Vec<f64> = t.iter().map(|tk| dot(&z[j], tk) / tau).collect();
        i2t += lse(&img_row) - img_row[j];
        let txt_row: Vec<f64> = z.iter().map(|zk| dot(zk, &t[j]) / tau).collect();
        t2i += lse(&txt_row) - txt_row[j];
    }
    Ok((i2t / m as f64, t2i / m as f64))
}

/// Organ-level alignment with `B = t.len() − z.len()` appended abnormal
/// texts as extra negatives on the image→text side only.
pub fn abnormality_text_loss(z: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<f64> {
    let (i2t, t2i) = abnormality_text_terms(z, t, tau)?;
    Ok(i2t + t2i)
}

/// [`abnormality_text_loss`] plus gradients; `d_t[k]` for `k ≥ M` flows
/// only through the image→text denominators.
pub fn abnormality_text_loss_with_grad(
    z: &[Vec<f64>],
    t: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let loss = abnormality_text_loss(z, t, tau)?;
    let m = z.len();
    let n_t = t.len();
    let dim = z[0].len();
    let scale = 1.0 / (m as f64 * tau);
    let mut d_z = vec![vec![0.0; dim]; m];
    let mut d_t = vec![vec![0.0; dim]; n_t];
    for j in 0..m {
        // image→text over all M+B texts
        let img_row: Vec<f64> = t.iter().map(|tk| dot(&z[j], tk) / tau).collect();
        let mut p = vec![0.0; n_t];
        softmax_into(&img_row, &mut p);
        for k in 0..n_t {
            let g = (p[k] - if k == j { 1.0 } else { 0.0 }) * scale;
            for x in 0..dim {
                d_z[j][x] += g * t[k][x];
                d_t[k][x] += g * z[j][x];
            }
        }
        // text→image over only the M organs
        let txt_row: Vec<f64> = z.iter().map(|zk| dot(zk, &t[j]) / tau).collect();
        let mut q = vec![0.0; m];
        softmax_into(&txt_row, &mut q);
        for k in 0..m {
            let g = (q[k] - if k == j { 1.0 } else { 0.0 }) * scale;
            for x in 0..dim {
                d_z[k][x] += g * t[j][x];
                d_t[j][x] += g * z[k][x];
            }
        }
    }
    Ok((loss, d_z, d_t))
}

fn seg_shapes(logits: &Array4<f64>, mask: &OrganMask) -> Result<(usize, usize)> {
    let (classes, d, h, w) = logits.dim();
    if mask.labels.dim() != (d, h, w) {
        return Err(Error::validation(
            "segmentation logits and mask are not spatially aligned",
        ));
    }
    if classes < 1 {
        return Err(Error::validation("segmentation needs at least one class"));
    }
    if let Some(&max_label) = mask.labels.iter().max() {
        if usize::from(max_label) >= classes {
            return Err(Error::validation(format!(
                "mask label {max_label} out of range for {classes} classes"
            )));
        }
    }
    Ok((classes, d * h * w))
}

/// Mean voxel cross-entropy plus (1 − mean soft dice over the foreground
/// classes): dice_k = (2·Σ p_k g_k + ε) / (Σ p_k + Σ g_k + ε).
pub fn segmentation_loss(logits: &Array4<f64>, mask: &OrganMask, dice_epsilon: f64) -> Result<f64> {
    if !(dice_epsilon > 0.0) {
        return Err(Error::validation("dice_epsilon must be positive"));
    }
    let (classes, vol) = seg_shapes(logits, mask)?;
    let logits_flat = logits.as_slice().expect("standard layout");
    let mask_flat = mask.labels.as_slice().expect("standard layout");
    let mut ce = 0.0;
    let mut inter = vec![0.0; classes]; // Σ p_k · g_k
    let mut p_sum = vec![0.0; classes];
    let mut g_sum = vec![0.0; classes];
    let mut row = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for v in 0..vol {
        for c in 0..classes {
            row[c] = logits_flat[c * vol + v];
        }
        softmax_into(&row, &mut p);
        let label = usize::from(mask_flat[v]);
        ce -= p[label].max(f64::MIN_POSITIVE).ln();
        for c in 0..classes {
            p_sum[c] += p[c];
        }
        inter[label] += p[label];
        g_sum[label] += 1.0;
    }
    ce /= vol as f64;
    let foreground = classes - 1;
    let dice_term = if foreground == 0 {
        0.0
    } else {
        let mut mean_dice = 0.0;
        for c in 1..classes {
            mean_dice +=
                (2.0 * inter[c] + dice_epsilon) / (p_sum[c] + g_sum[c] + dice_epsilon);
        }
        1.0 - mean_dice / foreground as f64
    };
    Ok(ce + dice_term)
}

/// [`segmentation_loss`] plus the gradient w.r.t. the logits.
pub fn segmentation_loss_with_grad(
    logits: &Array4<f64>,
    mask: &OrganMask,
    dice_epsilon: f64,
) -> Result<(f64, Array4<f64>)> {
    let loss = segmentation_loss(logits, mask, dice_epsilon)?;
    let (classes, vol) = seg_shapes(logits, mask)?;
    let logits_flat = logits.as_slice().expect("standard layout");
    let mask_flat = mask.labels.as_slice().expect("standard layout");

    // First pass: dice bookkeeping (probabilities recomputed per voxel to
    // avoid materializing a (classes × volume) buffer twice).
    let mut inter = vec![0.0; classes];
    let mut p_sum = vec![0.0; classes];
    let mut g_sum = vec![0.0; classes];
    let mut row = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for v in 0..vol {
        for c in 0..classes {
            row[c] = logits_flat[c * vol + v];
        }
        softmax_into(&row, &mut p);
        let label = usize::from(mask_flat[v]);
        for c in 0..classes {
            p_sum[c] += p[c];
        }
        inter[label] += p[label];
        g_sum[label] += 1.0;
    }
    let foreground = classes - 1;
    // ∂(1 − mean dice)/∂p_k(v) = −(1/K)·[2 g_k(v) (B_k+ε) − (2 A_k+ε)] / (B_k+ε)²
    // with A_k = inter, B_k = p_sum + g_sum: every voxel gets a per-class
    // constant, voxels labeled k get an extra −(1/K)·2/(B_k+ε).
    let mut dice_const = vec![0.0; classes];
    let mut dice_on_label = vec![0.0; classes];
    if foreground > 0 {
        for c in 1..classes {
            let b = p_sum[c] + g_sum[c] + dice_epsilon;
            let a2 = 2.0 * inter[c] + dice_epsilon;
            dice_const[c] = (a2 / (b * b)) / foreground as f64;
            dice_on_label[c] = -(2.0 / b) / foreground as f64;
        }
    }
    let inv_vol = 1.0 / vol as f64;
    let mut d_logits = Array4::<f64>::zeros(logits.dim());
    let d_flat = d_logits.as_slice_mut().expect("standard layout");
    let mut d_p = vec![0.0; classes];
    for v in 0..vol {
        for c in 0..classes {
            row[c] = logits_flat[c * vol + v];
        }
        softmax_into(&row, &mut p);
        let label = usize::from(mask_flat[v]);
        // cross-entropy contributes (p - onehot)/V directly on logits
        // dice contributes through dL/dp then the softmax Jacobian
        for c in 0..classes {
            d_p[c] = dice_const[c];
        }
        if label > 0 {
            d_p[label] += dice_on_label[label];
        }
        let dot_dp_p: f64 = d_p.iter().zip(&p).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            let ce_part = (p[c] - if c == label { 1.0 } else { 0.0 }) * inv_vol;
            let dice_part = p[c] * (d_p[c] - dot_dp_p);
            d_flat[c * vol + v] = ce_part + dice_part;
        }
    }
    Ok((loss, d_logits))
}
