//! The trainable model: a stride-1 3D CNN over the volume, masked
//! organ-average pooling, a two-layer projection head emitting unit-norm
//! embeddings, and a 1×1×1 segmentation head — with hand-rolled f64
//! backward passes throughout.
//!
//! All parameters live in one flat `Vec<f64>`; gradients use an
//! identically-shaped vector. That makes the optimizer, checkpointing,
//! and finite-difference checks uniform across layers.

pub mod conv;
pub mod text;

pub use text::{stub_encode_text, HashedTextEncoder, PrecomputedTextEncoder, TextEncoder};

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{mix2, rng_from};
use crate::synthdata::{OrganMask, Volume};
use conv::{conv3d_backward, conv3d_forward, relu_backward, relu_forward};

/// Embedding of one pooled organ region; unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganEmbedding {
    pub organ_id: u32,
    pub vector: Vec<f64>,
}

/// Embedding of one text; unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
}

fn default_channels() -> Vec<usize> {
    vec![12, 12]
}

fn default_kernel() -> usize {
    3
}

fn default_embed_dim() -> usize {
    128
}

fn default_hidden() -> usize {
    768
}

/// Architecture knobs for the vision tower and heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each conv layer; ReLU between layers, none after
    /// the last, so the feature map keeps signed values.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Cubic kernel side; must be odd so "same" padding is symmetric.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Joint embedding dimension d.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Projection MLP hidden width.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Segmentation classes including background 0.
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: default_channels(),
            kernel: default_kernel(),
            embed_dim: default_embed_dim(),
            hidden: default_hidden(),
            n_classes: 9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::validation("channels must be non-empty and positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::validation(format!(
                "kernel {} must be odd for symmetric same-padding",
                self.kernel
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::validation("embed_dim must be at least 2"));
        }
        if self.hidden == 0 {
            return Err(Error::validation("hidden width must be positive"));
        }
        if self.n_classes == 0 {
            return Err(Error::validation("n_classes must include background"));
        }
        Ok(())
    }

    /// Output channel count of the vision tower.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }
}

/// (offset, length) pairs into the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    conv_w: Vec<(usize, usize)>,
    conv_b: Vec<(usize, usize)>,
    w1: (usize, usize),
    b1: (usize, usize),
    w2: (usize, usize),
    b2: (usize, usize),
    seg_w: (usize, usize),
    seg_b: (usize, usize),
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Layout {
        let k3 = cfg.kernel * cfg.kernel * cfg.kernel;
        let mut offset = 0usize;
        let mut claim = |len: usize| {
            let span = (offset, len);
            offset += len;
            span
        };
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = 1usize;
        for &c_out in &cfg.channels {
            conv_w.push(claim(c_out * c_in * k3));
            conv_b.push(claim(c_out));
            c_in = c_out;
        }
        let c = c_in;
        let w1 = claim(cfg.hidden * c);
        let b1 = claim(cfg.hidden);
        let w2 = claim(cfg.embed_dim * cfg.hidden);
        let b2 = claim(cfg.embed_dim);
        let seg_w = claim(cfg.n_classes * c);
        let seg_b = claim(cfg.n_classes);
        Layout {
            conv_w,
            conv_b,
            w1,
            b1,
            w2,
            b2,
            seg_w,
            seg_b,
            total: offset,
        }
    }
}

fn slice(params: &[f64], span: (usize, usize)) -> &[f64] {
    &params[span.0..span.0 + span.1]
}

fn slice_mut(params: &mut [f64], span: (usize, usize)) -> &mut [f64] {
    &mut params[span.0..span.0 + span.1]
}

/// Two disjoint mutable views, `a` strictly before `b`.
fn two_spans_mut(
    buf: &mut [f64],
    a: (usize, usize),
    b: (usize, usize),
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.0 + a.1 <= b.0);
    let (head, tail) = buf.split_at_mut(b.0);
    (&mut head[a.0..a.0 + a.1], &mut tail[..b.1])
}

/// `y = W x + b` with `W` row-major `(out, in)`.
fn linear_forward(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        y.push(acc);
    }
    y
}

/// Accumulates `d_w`/`d_b`; returns `d_x = Wᵀ d_y`.
fn linear_backward(
    w: &[f64],
    x: &[f64],
    d_y: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
) -> Vec<f64> {
    let in_dim = x.len();
    let out_dim = d_y.len();
    let mut d_x = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = d_y[o];
        d_b[o] += g;
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let d_row = &mut d_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            d_row[i] += g * x[i];
            d_x[i] += row[i] * g;
        }
    }
    d_x
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean of the feature map over each organ's voxels, ascending organ ID.
/// Returns `(organ_id, flat spatial voxel indices, mean vector)` triples.
pub fn pooled_means(fm: &Array4<f64>, mask: &OrganMask) -> Vec<(u32, Vec<usize>, Vec<f64>)> {
    let (c, d, h, w) = fm.dim();
    assert_eq!(
        (d, h, w),
        mask.labels.dim(),
        "feature map and mask are not spatially aligned"
    );
    let vol = d * h * w;
    let mask_flat = mask.labels.as_slice().expect("standard layout");
    let mut voxels: std::collections::BTreeMap<u16, Vec<usize>> = std::collections::BTreeMap::new();
    for (idx, &label) in mask_flat.iter().enumerate() {
        if label != 0 {
            voxels.entry(label).or_default().push(idx);
        }
    }
    let fm_flat = fm.as_slice().expect("standard layout");
    voxels
        .into_iter()
        .map(|(label, idxs)| {
            let count = idxs.len() as f64;
            let mut mean = vec![0.0; c];
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = ch * vol;
                let mut acc = 0.0;
                for &i in &idxs {
                    acc += fm_flat[base + i];
                }
                *m = acc / count;
            }
            (u32::from(label), idxs, mean)
        })
        .collect()
}

/// Every intermediate needed to run the backward pass.
pub struct ForwardTrace {
    /// Input to conv layer i (index 0 is the raw volume as 1-channel).
    conv_inputs: Vec<Array4<f64>>,
    /// Pre-activation of each layer that is followed by ReLU.
    pre_relu: Vec<Array4<f64>>,
    /// Final conv output (C, D, H, W).
    pub feature_map: Array4<f64>,
    pub organ_ids: Vec<u32>,
    organ_voxels: Vec<Vec<usize>>,
    pooled: Vec<Vec<f64>>,
    hidden_pre: Vec<Vec<f64>>,
    embed_pre: Vec<Vec<f64>>,
    /// Unit-norm organ embeddings, ascending organ ID.
    pub embeddings: Vec<OrganEmbedding>,
    pub seg_logits: Option<Array4<f64>>,
}

/// The full model over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct CtGlipModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl CtGlipModel {
    /// Fresh model with fan-in-scaled uniform weights and zero biases,
    /// deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let k3 = config.kernel.pow(3);
        let mut c_in = 1usize;
        let mut tensor = 0u64;
        for (i, &c_out) in config.channels.iter().enumerate() {
            init_uniform(
                slice_mut(&mut params, layout.conv_w[i]),
                c_in * k3,
                mix2(seed, tensor),
            );
            tensor += 1;
            c_in = c_out;
        }
        let c = c_in;
        init_uniform(slice_mut(&mut params, layout.w1), c, mix2(seed, tensor));
        tensor += 1;
        init_uniform(
            slice_mut(&mut params, layout.w2),
            config.hidden,
            mix2(seed, tensor),
        );
        tensor += 1;
        init_uniform(slice_mut(&mut params, layout.seg_w), c, mix2(seed, tensor));
        Ok(CtGlipModel {
            config,
            params,
            layout,
        })
    }

    /// Rebuild from a saved parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::validation(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(CtGlipModel {
            config,
            params,
            layout,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Zeroed gradient vector matching `params`.
    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    /// Forward pass of the vision tower only: (1,D,H,W) → (C,D,H,W) at
    /// input resolution.
    pub fn encode_volume(&self, volume: &Volume) -> Result<Array4<f64>> {
        Ok(self.run_tower(volume)?.1)
    }

    fn run_tower(&self, volume: &Volume) -> Result<(Vec<Array4<f64>>, Array4<f64>, Vec<Array4<f64>>)> {
        let [d, h, w] = volume.shape();
        let input = Array4::from_shape_fn((1, d, h, w), |(_, z, y, x)| {
            f64::from(volume.voxels[[z, y, x]])
        });
        let n_layers = self.config.channels.len();
        let mut conv_inputs = Vec::with_capacity(n_layers);
        let mut pre_relu = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut current = input;
        for (i, &c_out) in self.config.channels.iter().enumerate() {
            let pre = conv3d_forward(
                &current,
                slice(&self.params, self.layout.conv_w[i]),
                slice(&self.params, self.layout.conv_b[i]),
                c_out,
                self.config.kernel,
            );
            conv_inputs.push(current);
            if i + 1 < n_layers {
                current = relu_forward(&pre);
                pre_relu.push(pre);
            } else {
                current = pre;
            }
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(
                "vision tower produced non-finite activations".to_string(),
            ));
        }
        Ok((conv_inputs, current, pre_relu))
    }

    /// Pool, project, and L2-normalize each organ present in the mask.
    pub fn organ_pool(
        &self,
        feature_map: &Array4<f64>,
        mask: &OrganMask,
    ) -> Result<Vec<OrganEmbedding>> {
        let pooled = pooled_means(feature_map, mask);
        pooled
            .into_iter()
            .map(|(organ_id, _, mean)| {
                let (_, _, z) = self.project(&mean)?;
                Ok(OrganEmbedding {
                    organ_id,
                    vector: z,
                })
            })
            .collect()
    }

    /// Projection head on one pooled vector: returns (hidden pre-ReLU,
    /// embedding pre-norm, unit embedding).
    fn project(&self, pooled: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        let hidden_pre = linear_forward(
            slice(&self.params, self.layout.w1),
            slice(&self.params, self.layout.b1),
            pooled,
            cfg.hidden,
        );
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let embed_pre = linear_forward(
            slice(&self.params, self.layout.w2),
            slice(&self.params, self.layout.b2),
            &hidden,
            cfg.embed_dim,
        );
        let norm = l2_norm(&embed_pre);
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::Divergence(format!(
                "projection produced a degenerate embedding (norm {norm})"
            )));
        }
        let z: Vec<f64> = embed_pre.iter().map(|&v| v / norm).collect();
        Ok((hidden_pre, embed_pre, z))
    }

    /// Per-voxel linear segmentation head: (C,D,H,W) → (n_classes,D,H,W).
    pub fn seg_forward(&self, feature_map: &Array4<f64>) -> Array4<f64> {
        let (c, d, h, w) = feature_map.dim();
        let n = self.config.n_classes;
        let vol = d * h * w;
        let fm = feature_map.as_slice().expect("standard layout");
        let w_seg = slice(&self.params, self.layout.seg_w);
        let b_seg = slice(&self.params, self.layout.seg_b);
        let mut logits = Array4::<f64>::zeros((n, d, h, w));
        let out = logits.as_slice_mut().expect("standard layout");
        for class in 0..n {
            let dst = &mut out[class * vol..(class + 1) * vol];
            dst.fill(b_seg[class]);
            for ch in 0..c {
                let wv = w_seg[class * c + ch];
                let src = &fm[ch * vol..(ch + 1) * vol];
                for i in 0..vol {
                    dst[i] += wv * src[i];
                }
            }
        }
        logits
    }

    /// Full traced forward over one subject.
    pub fn forward(
        &self,
        volume: &Volume,
        mask: &OrganMask,
        with_seg: bool,
    ) -> Result<ForwardTrace> {
        let (d, h, w) = mask.labels.dim();
        if volume.shape() != [d, h, w] {
            return Err(Error::validation(
                "volume and mask shapes differ in forward pass",
            ));
        }
        let (conv_inputs, feature_map, pre_relu) = self.run_tower(volume)?;
        let pooled_triples = pooled_means(&feature_map, mask);
        let mut organ_ids = Vec::with_capacity(pooled_triples.len());
        let mut organ_voxels = Vec::with_capacity(pooled_triples.len());
        let mut pooled = Vec::with_capacity(pooled_triples.len());
        let mut hidden_pre = Vec::with_capacity(pooled_triples.len());
        let mut embed_pre = Vec::with_capacity(pooled_triples.len());
        let mut embeddings = Vec::with_capacity(pooled_triples.len());
        for (organ_id, voxels, mean) in pooled_triples {
            let (h_pre, e_pre, z) = self.project(&mean)?;
            organ_ids.push(organ_id);
            organ_voxels.push(voxels);
            pooled.push(mean);
            hidden_pre.push(h_pre);
            embed_pre.push(e_pre);
            embeddings.push(OrganEmbedding {
                organ_id,
                vector: z,
            });
        }
        let seg_logits = if with_seg {
            Some(self.seg_forward(&feature_map))
        } else {
            None
        };
        Ok(ForwardTrace {
            conv_inputs,
            pre_relu,
            feature_map,
            organ_ids,
            organ_voxels,
            pooled,
            hidden_pre,
            embed_pre,
            embeddings,
            seg_logits,
        })
    }

    /// Traced forward with a single whole-volume region (global average
    /// pool, pseudo-ID 0) instead of per-organ regions; the image-level
    /// contrastive baseline trains through this path.
    pub fn forward_global(&self, volume: &Volume) -> Result<ForwardTrace> {
        let (conv_inputs, feature_map, pre_relu) = self.run_tower(volume)?;
        let (c, d, h, w) = feature_map.dim();
        let vol = d * h * w;
        let fm = feature_map.as_slice().expect("standard layout");
        let mean: Vec<f64> = (0..c)
            .map(|ch| fm[ch * vol..(ch + 1) * vol].iter().sum::<f64>() / vol as f64)
            .collect();
        let (h_pre, e_pre, z) = self.project(&mean)?;
        Ok(ForwardTrace {
            conv_inputs,
            pre_relu,
            feature_map,
            organ_ids: vec![0],
            organ_voxels: vec![(0..vol).collect()],
            pooled: vec![mean],
            hidden_pre: vec![h_pre],
            embed_pre: vec![e_pre],
            embeddings: vec![OrganEmbedding {
                organ_id: 0,
                vector: z,
            }],
            seg_logits: None,
        })
    }

    /// Backward pass: `d_embeddings[j]` is ∂L/∂(unit embedding j),
    /// `d_seg_logits` is ∂L/∂(seg logits); accumulates into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_embeddings: &[Vec<f64>],
        d_seg_logits: Option<&Array4<f64>>,
        grads: &mut [f64],
    ) {
        assert_eq!(grads.len(), self.layout.total);
        assert_eq!(d_embeddings.len(), trace.embeddings.len());
        let cfg = &self.config;
        let (c, d, h, w) = trace.feature_map.dim();
        let vol = d * h * w;
        let mut d_fm = Array4::<f64>::zeros((c, d, h, w));

        // Segmentation head.
        if let Some(d_logits) = d_seg_logits {
            let fm = trace.feature_map.as_slice().expect("standard layout");
            let dl = d_logits.as_slice().expect("standard layout");
            let w_seg = slice(&self.params, self.layout.seg_w).to_vec();
            {
                let d_fm_flat = d_fm.as_slice_mut().expect("standard layout");
                for class in 0..cfg.n_classes {
                    let dl_ch = &dl[class * vol..(class + 1) * vol];
                    let db = slice_mut(grads, self.layout.seg_b);
                    db[class] += dl_ch.iter().sum::<f64>();
                    for ch in 0..c {
                        let fm_ch = &fm[ch * vol..(ch + 1) * vol];
                        let mut wacc = 0.0;
                        let wv = w_seg[class * c + ch];
                        let d_fm_ch = &mut d_fm_flat[ch * vol..(ch + 1) * vol];
                        for i in 0..vol {
                            wacc += dl_ch[i] * fm_ch[i];
                            d_fm_ch[i] += wv * dl_ch[i];
                        }
                        slice_mut(grads, self.layout.seg_w)[class * c + ch] += wacc;
                    }
                }
            }
        }

        // Projection head and pooling, organ by organ.
        for j in 0..trace.embeddings.len() {
            let d_z = &d_embeddings[j];
            let e = &trace.embed_pre[j];
            let norm = l2_norm(e);
            let z = &trace.embeddings[j].vector;
            let zdot: f64 = z.iter().zip(d_z).map(|(a, b)| a * b).sum();
            let d_e: Vec<f64> = d_z
                .iter()
                .zip(z)
                .map(|(&g, &zi)| (g - zi * zdot) / norm)
                .collect();
            let hidden: Vec<f64> = trace.hidden_pre[j].iter().map(|&v| v.max(0.0)).collect();
            let d_hidden_post = {
                let w2 = slice(&self.params, self.layout.w2).to_vec();
                let (d_w2, d_b2) = two_spans_mut(grads, self.layout.w2, self.layout.b2);
                linear_backward(&w2, &hidden, &d_e, d_w2, d_b2)
            };
            let d_hidden_pre: Vec<f64> = d_hidden_post
                .iter()
                .zip(&trace.hidden_pre[j])
                .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
                .collect();
            let d_pooled = {
                let w1 = slice(&self.params, self.layout.w1).to_vec();
                let (d_w1, d_b1) = two_spans_mut(grads, self.layout.w1, self.layout.b1);
                linear_backward(&w1, &trace.pooled[j], &d_hidden_pre, d_w1, d_b1)
            };
            // pooling: mean over the organ's voxels
            let voxels = &trace.organ_voxels[j];
            let inv = 1.0 / voxels.len() as f64;
            let d_fm_flat = d_fm.as_slice_mut().expect("standard layout");
            for (ch, &g) in d_pooled.iter().enumerate() {
                let contrib = g * inv;
                let base = ch * vol;
                for &idx in voxels {
                    d_fm_flat[base + idx] += contrib;
                }
            }
        }

        // Conv tower, last layer to first.
        let mut grad = d_fm;
        for i in (0..cfg.channels.len()).rev() {
            let w_span = self.layout.conv_w[i];
            let b_span = self.layout.conv_b[i];
            let weight = slice(&self.params, w_span).to_vec();
            let d_in = {
                let (d_w, d_b) = two_spans_mut(grads, w_span, b_span);
                conv3d_backward(&trace.conv_inputs[i], &weight, &grad, cfg.kernel, d_w, d_b)
            };
            grad = if i > 0 {
                relu_backward(&trace.pre_relu[i - 1], &d_in)
            } else {
                d_in
            };
        }
    }
}

fn init_uniform(dst: &mut [f64], fan_in: usize, seed: u64) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = rng_from(seed);
    for v in dst.iter_mut() {
        *v = bound * (2.0 * rng.gen::<f64>() - 1.0);
    }
}
