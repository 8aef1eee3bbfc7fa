//! Staged convolutional classifier with region-to-region attention blocks.
//!
//! Each stage downsamples with a strided convolutional token embedding, then
//! runs pre-norm residual blocks in which the usual self-attention layer is
//! replaced by an [`R2RAttentionLayer`]. The head global-average-pools the
//! final feature map and applies a linear layer, emitting one logit per
//! class for multi-label classification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, R2RAttentionLayer, R2RForwardTrace};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Query pooling variant used by every attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Plain masked sum over pixels.
    Sum,
    /// Masked sum divided by the mask area (plus 1e-6).
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub embed_channels: usize,
    pub blocks: usize,
    /// Region masks per attention block (L).
    pub masks: usize,
    /// Query/key width (d).
    pub query_dim: usize,
    /// Stride of the stage's convolutional token embedding.
    pub patch_stride: usize,
    pub mlp_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub n_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

/// Kernel/padding of a stage embedding, derived from its stride: stride 1
/// keeps a cheap 1×1 channel projection (blocks supply spatial mixing via
/// their depthwise convolutions), stride s>1 uses k=2s−1 with padding s−1
/// so an input divisible by s shrinks exactly s-fold.
pub fn embed_kernel(stride: usize) -> (usize, usize) {
    if stride <= 1 {
        (1, 0)
    } else {
        (2 * stride - 1, stride - 1)
    }
}

impl ModelConfig {
    /// Desk-scale default: 3 stages at 16/32/64 channels with 1/1/2 blocks,
    /// 8 masks each, for 64×64 single-channel inputs and 2 classes.
    pub fn desk_default() -> Self {
        let stage = |ch: usize, blocks: usize, stride: usize| StageConfig {
            embed_channels: ch,
            blocks,
            masks: 8,
            query_dim: ch,
            patch_stride: stride,
            mlp_ratio: 2.0,
        };
        ModelConfig {
            stages: vec![stage(16, 1, 4), stage(32, 1, 2), stage(64, 2, 1)],
            n_classes: 2,
            input_channels: 1,
            input_size: 64,
            pooling: Pooling::Sum,
            seed: 0,
        }
    }

    /// Smallest model the gradient checker exercises: 1×8×8 input, two
    /// attention blocks with 4 masks and 8-wide queries.
    pub fn micro(seed: u64) -> Self {
        let stage = |ch: usize, stride: usize| StageConfig {
            embed_channels: ch,
            blocks: 1,
            masks: 4,
            query_dim: 8,
            patch_stride: stride,
            mlp_ratio: 2.0,
        };
        ModelConfig {
            stages: vec![stage(6, 2), stage(8, 1)],
            n_classes: 2,
            input_channels: 1,
            input_size: 8,
            pooling: Pooling::Sum,
            seed,
        }
    }

    /// Spatial size after each stage; errors on the first stage that would
    /// collapse to zero extent.
    pub fn stage_sizes(&self) -> Result<Vec<usize>> {
        let mut size = self.input_size;
        let mut sizes = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.patch_stride == 0 {
                return Err(Error::Config(format!("stage {i}: patch_stride must be >= 1")));
            }
            if stage.patch_stride > size {
                return Err(Error::Config(format!(
                    "stage {i}: stride {} exceeds the incoming feature extent {size}, \
                     leaving no valid output pixels",
                    stage.patch_stride
                )));
            }
            let (k, p) = embed_kernel(stage.patch_stride);
            let padded = size + 2 * p;
            if padded < k {
                return Err(Error::Config(format!(
                    "stage {i}: spatial extent {size} too small for embedding kernel {k}"
                )));
            }
            size = (padded - k) / stage.patch_stride + 1;
            sizes.push(size);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.n_classes < 1 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        if self.input_channels < 1 || self.input_size < 1 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.blocks < 1 {
                return Err(Error::Config(format!("stage {i}: blocks must be >= 1")));
            }
            if stage.masks < 2 {
                return Err(Error::Config(format!("stage {i}: needs at least 2 masks")));
            }
            if stage.query_dim < 1 || stage.embed_channels < 1 {
                return Err(Error::Config(format!("stage {i}: extents must be positive")));
            }
            if !(stage.mlp_ratio.is_finite() && stage.mlp_ratio > 0.0) {
                return Err(Error::Config(format!("stage {i}: mlp_ratio must be positive")));
            }
        }
        self.stage_sizes().map(|_| ())
    }
}

struct Block {
    norm1_gamma: Tensor,
    norm1_beta: Tensor,
    attn: R2RAttentionLayer,
    norm2_gamma: Tensor,
    norm2_beta: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

struct Stage {
    embed_weight: Tensor,
    embed_norm_gamma: Tensor,
    embed_norm_beta: Tensor,
    blocks: Vec<Block>,
    stride: usize,
    padding: usize,
}

/// Trace of one attention block, tagged with its position in the model.
pub struct BlockTrace {
    pub stage: usize,
    pub block: usize,
    /// Spatial extent of this block's feature map.
    pub resolution: usize,
    pub trace: R2RForwardTrace,
}

pub struct Model {
    pub config: ModelConfig,
    stages: Vec<Stage>,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("stages", &self.stages.len())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds a model with deterministic, seed-driven initialization.
pub fn build(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Fan-in (He) scaling for the convolutional and MLP weights; prototype
    // keys/values are initialized inside the attention block.
    fn gauss(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        (0..n).map(|_| normal.sample(rng)).collect()
    }

    let mut stages = Vec::with_capacity(config.stages.len());
    let mut in_channels = config.input_channels;
    for stage_cfg in &config.stages {
        let (kernel, padding) = embed_kernel(stage_cfg.patch_stride);
        let ch = stage_cfg.embed_channels;
        let embed_weight = Tensor::param(
            vec![ch, in_channels, kernel, kernel],
            gauss(&mut rng, ch * in_channels * kernel * kernel, in_channels * kernel * kernel),
        )?;
        let mut blocks = Vec::with_capacity(stage_cfg.blocks);
        for _ in 0..stage_cfg.blocks {
            let attn = R2RAttentionLayer::init(
                &mut rng,
                ch,
                stage_cfg.masks,
                stage_cfg.query_dim,
                ch,
                config.pooling == Pooling::Normalized,
            )?;
            let hidden = ((ch as f64 * stage_cfg.mlp_ratio).round() as usize).max(1);
            blocks.push(Block {
                norm1_gamma: Tensor::param(vec![ch], vec![1.0; ch])?,
                norm1_beta: Tensor::param(vec![ch], vec![0.0; ch])?,
                attn,
                norm2_gamma: Tensor::param(vec![ch], vec![1.0; ch])?,
                norm2_beta: Tensor::param(vec![ch], vec![0.0; ch])?,
                mlp_w1: Tensor::param(vec![hidden, ch], gauss(&mut rng, hidden * ch, ch))?,
                mlp_b1: Tensor::param(vec![hidden], vec![0.0; hidden])?,
                mlp_w2: Tensor::param(vec![ch, hidden], gauss(&mut rng, ch * hidden, hidden))?,
                mlp_b2: Tensor::param(vec![ch], vec![0.0; ch])?,
            });
        }
        let _ = kernel;
        stages.push(Stage {
            embed_weight,
            embed_norm_gamma: Tensor::param(vec![ch], vec![1.0; ch])?,
            embed_norm_beta: Tensor::param(vec![ch], vec![0.0; ch])?,
            blocks,
            stride: stage_cfg.patch_stride,
            padding,
        });
        in_channels = ch;
    }
    let last_ch = config.stages.last().unwrap().embed_channels;
    let head_weight = Tensor::param(
        vec![config.n_classes, last_ch],
        gauss(&mut rng, config.n_classes * last_ch, last_ch),
    )?;
    let head_bias = Tensor::param(vec![config.n_classes], vec![0.0; config.n_classes])?;
    Ok(Model {
        config: config.clone(),
        stages,
        head_weight,
        head_bias,
    })
}

impl Model {
    /// Runs the classifier. With `capture_traces`, returns one trace per
    /// attention block in execution order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        capture_traces: bool,
    ) -> Result<(Tensor, Option<Vec<BlockTrace>>)> {
        let expected = vec![
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size,
        ];
        if x.shape() != expected {
            return Err(Error::Dimension(format!(
                "forward: input shape {:?} does not match configured {:?}",
                x.shape(),
                expected
            )));
        }
        let mut traces = capture_traces.then(Vec::new);
        let mut cur = x.clone();
        for (si, stage) in self.stages.iter().enumerate() {
            cur = tape.dense_conv2d(&cur, &stage.embed_weight, stage.stride, stage.padding)?;
            cur = tape.layer_norm_ch(&cur, &stage.embed_norm_gamma, &stage.embed_norm_beta)?;
            let resolution = cur.shape()[1];
            for (bi, block) in stage.blocks.iter().enumerate() {
                let normed = tape.layer_norm_ch(&cur, &block.norm1_gamma, &block.norm1_beta)?;
                let (attn_out, trace) =
                    attention::forward(tape, &normed, &block.attn, capture_traces)?;
                cur = tape.add(&cur, &attn_out)?;
                let normed = tape.layer_norm_ch(&cur, &block.norm2_gamma, &block.norm2_beta)?;
                let hidden = tape.pointwise_conv2d(&normed, &block.mlp_w1)?;
                let hidden = tape.bias_ch(&hidden, &block.mlp_b1)?;
                let hidden = tape.gelu(&hidden)?;
                let mixed = tape.pointwise_conv2d(&hidden, &block.mlp_w2)?;
                let mixed = tape.bias_ch(&mixed, &block.mlp_b2)?;
                cur = tape.add(&cur, &mixed)?;
                if let (Some(list), Some(trace)) = (traces.as_mut(), trace) {
                    list.push(BlockTrace {
                        stage: si,
                        block: bi,
                        resolution,
                        trace,
                    });
                }
            }
        }
        let shape = cur.shape();
        let spatial = (shape[1] * shape[2]) as f64;
        let pooled = tape.reduce_sum(&cur, &[1, 2])?;
        let pooled = tape.scale(&pooled, 1.0 / spatial)?;
        let col = tape.reshape(&pooled, vec![shape[0], 1])?;
        let logits = tape.matmul(&self.head_weight, &col)?;
        let logits = tape.reshape(&logits, vec![self.config.n_classes])?;
        let logits = tape.add(&logits, &self.head_bias)?;
        Ok((logits, traces))
    }

    /// Named parameters in a stable order (the checkpoint/optimizer order).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let sp = format!("stage{si}");
            params.push((format!("{sp}.embed.weight"), stage.embed_weight.clone()));
            params.push((format!("{sp}.embed.norm_gamma"), stage.embed_norm_gamma.clone()));
            params.push((format!("{sp}.embed.norm_beta"), stage.embed_norm_beta.clone()));
            for (bi, block) in stage.blocks.iter().enumerate() {
                let bp = format!("{sp}.block{bi}");
                params.push((format!("{bp}.norm1_gamma"), block.norm1_gamma.clone()));
                params.push((format!("{bp}.norm1_beta"), block.norm1_beta.clone()));
                params.extend(block.attn.parameters(&format!("{bp}.attn")));
                params.push((format!("{bp}.norm2_gamma"), block.norm2_gamma.clone()));
                params.push((format!("{bp}.norm2_beta"), block.norm2_beta.clone()));
                params.push((format!("{bp}.mlp_w1"), block.mlp_w1.clone()));
                params.push((format!("{bp}.mlp_b1"), block.mlp_b1.clone()));
                params.push((format!("{bp}.mlp_w2"), block.mlp_w2.clone()));
                params.push((format!("{bp}.mlp_b2"), block.mlp_b2.clone()));
            }
        }
        params.push(("head.weight".into(), self.head_weight.clone()));
        params.push(("head.bias".into(), self.head_bias.clone()));
        params
    }

    /// Name and shape of every parameter.
    pub fn parameter_inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.parameters()
            .into_iter()
            .map(|(name, t)| (name, t.shape()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }

    /// Total number of attention blocks.
    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Mutable access used by the gradient-check sabotage fixture.
    pub fn parameter_by_name(&self, name: &str) -> Option<Tensor> {
        self.parameters()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}
