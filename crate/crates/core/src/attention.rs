//! Region-to-region attention.
//!
//! Instead of token-grid self-attention, the block predicts L soft region
//! masks (softmax-competing per pixel), pools convolutional features under
//! each mask into one query per region, scores the queries against learnable
//! prototype key vectors, and rebuilds the output feature map from learnable
//! prototype value vectors weighted by the attention-mixed masks. Keys and
//! values are plain parameters: they never depend on the input.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Spatial kernel extent of the feature-branch depthwise convolution.
pub const FEATURE_KERNEL: usize = 3;

/// Standard deviation used for Gaussian parameter initialization.
pub const INIT_STD: f64 = 0.02;

/// Parameters of one region-to-region attention block.
pub struct R2RAttentionLayer {
    /// Mask branch: 1×1 conv mapping in_channels → n_masks. [L×c]
    pub mask_weight: Tensor,
    /// Mask branch bias. [L]
    pub mask_bias: Tensor,
    /// Feature branch depthwise kernels. [c×3×3]
    pub feat_depthwise: Tensor,
    /// Feature branch 1×1 mixing. [d×c]
    pub feat_pointwise: Tensor,
    /// Prototype key vectors, one per mask. [L×d]
    pub keys: Tensor,
    /// Prototype value vectors, one column per mask. [z×L]
    pub values: Tensor,
    pub in_channels: usize,
    pub n_masks: usize,
    pub query_dim: usize,
    pub out_channels: usize,
    /// Divide each pooled query row by the mask area (plus 1e-6).
    pub normalize_queries: bool,
}

impl R2RAttentionLayer {
    /// Initializes a block: Gaussian(0, 0.02) keys/values/feature weights,
    /// zeroed mask branch so every pixel starts with a uniform mask split.
    pub fn init(
        rng: &mut impl rand::Rng,
        in_channels: usize,
        n_masks: usize,
        query_dim: usize,
        out_channels: usize,
        normalize_queries: bool,
    ) -> Result<Self> {
        if n_masks < 2 {
            return Err(Error::Config(format!(
                "attention block needs at least 2 masks, got {n_masks}"
            )));
        }
        if query_dim < 1 || out_channels < 1 || in_channels < 1 {
            return Err(Error::Config(format!(
                "attention block extents must be positive: c={in_channels}, d={query_dim}, z={out_channels}"
            )));
        }
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            let normal = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        // Prototypes start small and symmetric; the convolutional feature
        // branch uses fan-in scaling so pooled queries carry signal from
        // the first step.
        let dw_std = (2.0 / (FEATURE_KERNEL * FEATURE_KERNEL) as f64).sqrt();
        let pw_std = (2.0 / in_channels as f64).sqrt();
        Ok(R2RAttentionLayer {
            mask_weight: Tensor::param(vec![n_masks, in_channels], vec![0.0; n_masks * in_channels])?,
            mask_bias: Tensor::param(vec![n_masks], vec![0.0; n_masks])?,
            feat_depthwise: Tensor::param(
                vec![in_channels, FEATURE_KERNEL, FEATURE_KERNEL],
                gauss(in_channels * FEATURE_KERNEL * FEATURE_KERNEL, dw_std),
            )?,
            feat_pointwise: Tensor::param(
                vec![query_dim, in_channels],
                gauss(query_dim * in_channels, pw_std),
            )?,
            keys: Tensor::param(vec![n_masks, query_dim], gauss(n_masks * query_dim, INIT_STD))?,
            values: Tensor::param(vec![out_channels, n_masks], gauss(out_channels * n_masks, INIT_STD))?,
            in_channels,
            n_masks,
            query_dim,
            out_channels,
            normalize_queries,
        })
    }

    /// Named parameters in a stable order.
    pub fn parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.mask_weight"), self.mask_weight.clone()),
            (format!("{prefix}.mask_bias"), self.mask_bias.clone()),
            (format!("{prefix}.feat_depthwise"), self.feat_depthwise.clone()),
            (format!("{prefix}.feat_pointwise"), self.feat_pointwise.clone()),
            (format!("{prefix}.keys"), self.keys.clone()),
            (format!("{prefix}.values"), self.values.clone()),
        ]
    }
}

/// Intermediates of one block forward, kept for explanation export.
pub struct R2RForwardTrace {
    /// Soft region masks. [L×h×w]
    pub masks: Tensor,
    /// Feature-branch output. [d×h×w]
    pub features: Tensor,
    /// Pooled region queries. [L×d]
    pub queries: Tensor,
    /// Raw query–key scores before scaling and row softmax. [L×L]
    pub scores: Tensor,
    /// Row-normalized attention. [L×L]
    pub attn: Tensor,
    /// Attention-mixed masks. [L×h×w]
    pub weighted_masks: Tensor,
    /// Reconstructed block output. [z×h×w]
    pub output: Tensor,
}

/// Predicts L soft masks: 1×1 conv to mask logits, then softmax across the
/// mask axis at every pixel, so exactly one unit of mass is split per pixel.
pub fn compute_masks(tape: &mut Tape, x: &Tensor, layer: &R2RAttentionLayer) -> Result<Tensor> {
    let logits = tape.pointwise_conv2d(x, &layer.mask_weight)?;
    let logits = tape.bias_ch(&logits, &layer.mask_bias)?;
    tape.softmax(&logits, 0)
}

/// Projects the input to d feature channels with a stride-1, same-size
/// depthwise separable convolution.
pub fn compute_features(tape: &mut Tape, x: &Tensor, layer: &R2RAttentionLayer) -> Result<Tensor> {
    tape.depthwise_separable_conv2d(
        x,
        &layer.feat_depthwise,
        &layer.feat_pointwise,
        1,
        FEATURE_KERNEL / 2,
    )
}

/// Pools features under each mask: q[i][c] = Σ_{h,w} m[i]·f[c]. With
/// `normalize` set, each row is divided by the mask's total mass plus 1e-6.
pub fn masked_pool_queries(
    tape: &mut Tape,
    masks: &Tensor,
    features: &Tensor,
    normalize: bool,
) -> Result<Tensor> {
    let (sm, sf) = (masks.shape(), features.shape());
    if sm.len() != 3 || sf.len() != 3 || sm[1..] != sf[1..] {
        return Err(Error::Dimension(format!(
            "masked_pool_queries: spatial extents disagree: masks {sm:?}, features {sf:?}"
        )));
    }
    let hw = sm[1] * sm[2];
    let m_flat = tape.reshape(masks, vec![sm[0], hw])?;
    let f_flat = tape.reshape(features, vec![sf[0], hw])?;
    let f_t = tape.transpose2(&f_flat)?;
    let q = tape.matmul(&m_flat, &f_t)?;
    if normalize {
        let area = tape.reduce_sum(masks, &[1, 2])?;
        tape.row_div_shift(&q, &area, 1e-6)
    } else {
        Ok(q)
    }
}

/// Query–prototype attention: row softmax of (q ⊗ keysᵀ)/√d.
pub fn region_attention(tape: &mut Tape, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let (attn, _) = region_attention_with_scores(tape, queries, keys)?;
    Ok(attn)
}

/// Same as [`region_attention`] but also returns the raw scores q ⊗ keysᵀ.
pub fn region_attention_with_scores(
    tape: &mut Tape,
    queries: &Tensor,
    keys: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (sq, sk) = (queries.shape(), keys.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::Dimension(format!(
            "region_attention: query/key widths disagree: {sq:?} vs {sk:?}"
        )));
    }
    let k_t = tape.transpose2(keys)?;
    let scores = tape.matmul(queries, &k_t)?;
    let scaled = tape.scale(&scores, 1.0 / (sq[1] as f64).sqrt())?;
    let attn = tape.softmax(&scaled, 1)?;
    Ok((attn, scores))
}

/// Mixes masks with attention coefficients: wm[i] = Σ_j attn[i][j]·m[j].
pub fn weight_masks(tape: &mut Tape, attn: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (sa, sm) = (attn.shape(), masks.shape());
    if sa.len() != 2 || sm.len() != 3 || sa[1] != sm[0] {
        return Err(Error::Dimension(format!(
            "weight_masks: mask counts disagree: attn {sa:?}, masks {sm:?}"
        )));
    }
    let hw = sm[1] * sm[2];
    let m_flat = tape.reshape(masks, vec![sm[0], hw])?;
    let wm_flat = tape.matmul(attn, &m_flat)?;
    tape.reshape(&wm_flat, vec![sa[0], sm[1], sm[2]])
}

/// Rebuilds output features from prototype values: o[:,p] = Σ_i wm[i][p]·vᵢ.
pub fn reconstruct_output(tape: &mut Tape, values: &Tensor, weighted: &Tensor) -> Result<Tensor> {
    let (sv, sw) = (values.shape(), weighted.shape());
    if sv.len() != 2 || sw.len() != 3 || sv[1] != sw[0] {
        return Err(Error::Dimension(format!(
            "reconstruct_output: mask counts disagree: values {sv:?}, weighted masks {sw:?}"
        )));
    }
    let hw = sw[1] * sw[2];
    let wm_flat = tape.reshape(weighted, vec![sw[0], hw])?;
    let o_flat = tape.matmul(values, &wm_flat)?;
    tape.reshape(&o_flat, vec![sv[0], sw[1], sw[2]])
}

/// Full block forward: masks → features → queries → attention → weighted
/// masks → reconstructed output. The trace is captured only on request.
pub fn forward(
    tape: &mut Tape,
    x: &Tensor,
    layer: &R2RAttentionLayer,
    capture_trace: bool,
) -> Result<(Tensor, Option<R2RForwardTrace>)> {
    let masks = compute_masks(tape, x, layer)?;
    let features = compute_features(tape, x, layer)?;
    let queries = masked_pool_queries(tape, &masks, &features, layer.normalize_queries)?;
    let (attn, scores) = region_attention_with_scores(tape, &queries, &layer.keys)?;
    let weighted = weight_masks(tape, &attn, &masks)?;
    let output = reconstruct_output(tape, &layer.values, &weighted)?;
    let trace = capture_trace.then(|| R2RForwardTrace {
        masks,
        features,
        queries,
        scores,
        attn,
        weighted_masks: weighted,
        output: output.clone(),
    });
    Ok((output, trace))
}
