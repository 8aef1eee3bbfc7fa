//! Optimization loop: AdamW with decoupled weight decay, cosine-annealed
//! learning rate, mean binary cross-entropy over classes, deterministic
//! validation splits, and best-epoch checkpointing.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::data::{batch_iterator, Sample};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, Model, ModelConfig, Pooling, StageConfig};
use crate::tensor::{Tape, Tensor};

/// AdamW hyperparameters. Defaults: lr₀ 2.5e-4, weight decay 0.05,
/// β₁ 0.9, β₂ 0.999, ε 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr0: 0.00025,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct MomentSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: step count plus first/second moment buffers aligned
/// with the model's parameter order.
#[derive(Debug)]
pub struct OptimState {
    pub hyper: AdamWParams,
    pub step: u64,
    slots: Vec<MomentSlot>,
}

impl OptimState {
    pub fn new(params: &[(String, Tensor)], hyper: AdamWParams) -> Self {
        let slots = params
            .iter()
            .map(|(_, t)| MomentSlot {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
            .collect();
        OptimState {
            hyper,
            step: 0,
            slots,
        }
    }
}

/// One AdamW update: decoupled decay p ← p − lr·wd·p plus the bias-corrected
/// Adam step. Gradients must be populated and finite; a non-finite gradient
/// aborts with the parameter's name.
pub fn adamw_step(params: &[(String, Tensor)], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != state.slots.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} parameters vs {} optimizer slots",
            params.len(),
            state.slots.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    for ((name, param), slot) in params.iter().zip(&mut state.slots) {
        let grad = param.grad_vec().ok_or_else(|| {
            Error::Contract(format!("adamw_step: missing gradient for {name}"))
        })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "adamw_step: non-finite gradient in {name}"
            )));
        }
        param.with_data_mut(|data| {
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = h.beta1 * slot.m[i] + (1.0 - h.beta1) * g;
                slot.v[i] = h.beta2 * slot.v[i] + (1.0 - h.beta2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                data[i] -= lr * h.weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        });
    }
    Ok(())
}

/// Cosine annealing: lr_min + ½(lr0−lr_min)(1+cos(π·step/total_steps)).
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("cosine_lr: total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step} exceeds total_steps {total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Learning rate of the epoch's first optimizer step.
    pub lr: f64,
    pub val_auc: Vec<Option<f64>>,
    pub val_mean_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub class_names: Vec<String>,
    pub hyper: AdamWParams,
    pub lr_min: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose checkpoint was kept (best validation mean AUC, or the
    /// final epoch when no validation AUC was ever defined).
    pub best_epoch: Option<usize>,
    pub best_val_mean_auc: Option<f64>,
    pub train_samples: usize,
    pub val_samples: usize,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the dataset held out for validation (0 disables).
    pub val_fraction: f64,
    pub shuffle_seed: u64,
    pub hyper: AdamWParams,
    pub lr_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            val_fraction: 0.1,
            shuffle_seed: 0,
            hyper: AdamWParams::default(),
            lr_min: 0.0,
        }
    }
}

/// Deterministic validation split: a seeded permutation's tail becomes the
/// validation set. Returns (train indices, val indices).
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5357_4150); // split stream
    order.shuffle(&mut rng);
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if n_val >= n {
        n_val = n - 1;
    }
    let train = order[..n - n_val].to_vec();
    let val = order[n - n_val..].to_vec();
    (train, val)
}

/// Trains in place. Deterministic given the seeds in `cfg` and the model's
/// initialization. A checkpoint is written to `checkpoint_path` at each new
/// best validation mean AUC (or once at the end when validation is empty or
/// never defines an AUC). A NaN loss aborts after writing a diagnostic
/// checkpoint next to the target path.
pub fn train(
    model: &Model,
    samples: &[Sample],
    class_names: &[String],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<(TrainReport, OptimState)> {
    if samples.is_empty() {
        return Err(Error::Contract("train: empty dataset".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Contract("train: epochs must be >= 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Contract("train: batch_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Contract(format!(
            "train: val_fraction must lie in [0,1), got {}",
            cfg.val_fraction
        )));
    }
    let params = model.parameters();
    let mut state = OptimState::new(&params, cfg.hyper);

    let (train_idx, val_idx) = split_indices(samples.len(), cfg.val_fraction, cfg.shuffle_seed);
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut global_step = 0usize;

    let mut report = TrainReport {
        class_names: class_names.to_vec(),
        hyper: cfg.hyper,
        lr_min: cfg.lr_min,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_mean_auc: None,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut epoch_loss_sum = 0.0;
        let mut epoch_first_lr = None;
        let batches = batch_iterator(
            &train_set,
            cfg.batch_size,
            cfg.shuffle_seed.wrapping_add(epoch as u64 + 1),
        )?;
        for batch in batches {
            model.zero_grad();
            let mut tape = Tape::new();
            let mut batch_loss: Option<Tensor> = None;
            for sample in &batch {
                let (logits, _) = model.forward(&mut tape, &sample.image, false)?;
                let targets = Tensor::from_vec(vec![sample.labels.len()], sample.labels.clone())?;
                let loss = tape.bce_with_logits(&logits, &targets)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(&acc, &loss)?,
                    None => loss,
                });
            }
            let sum_loss = batch_loss.expect("batches are non-empty");
            let mean_loss = tape.scale(&sum_loss, 1.0 / batch.len() as f64)?;
            let loss_value = mean_loss.scalar_value();
            if !loss_value.is_finite() {
                if let Some(path) = checkpoint_path {
                    let diag = diagnostic_path(path);
                    save_checkpoint(model, &state, &diag)?;
                }
                return Err(Error::Numeric(format!(
                    "train: loss diverged to {loss_value} at epoch {epoch}"
                )));
            }
            epoch_loss_sum += loss_value * batch.len() as f64;
            tape.backward(&mean_loss)?;
            let lr = cosine_lr(global_step, total_steps, cfg.hyper.lr0, cfg.lr_min)?;
            epoch_first_lr.get_or_insert(lr);
            adamw_step(&params, &mut state, lr)?;
            global_step += 1;
        }

        let (val_auc, val_mean) = if val_set.is_empty() {
            (vec![None; model.config.n_classes], None)
        } else {
            let scores = {
                let mut all = Vec::with_capacity(val_set.len());
                for sample in &val_set {
                    let mut tape = Tape::inference();
                    let (logits, _) = model.forward(&mut tape, &sample.image, false)?;
                    all.push(
                        logits
                            .to_vec()
                            .iter()
                            .map(|&l| crate::tensor::kernels::sigmoid(l))
                            .collect::<Vec<f64>>(),
                    );
                }
                all
            };
            let mut per_class = Vec::with_capacity(model.config.n_classes);
            for class in 0..model.config.n_classes {
                let class_scores: Vec<f64> = scores.iter().map(|s| s[class]).collect();
                let labels: Vec<bool> = val_set.iter().map(|s| s.labels[class] == 1.0).collect();
                match metrics::roc_auc(&class_scores, &labels) {
                    Ok(a) => per_class.push(Some(a)),
                    Err(Error::UndefinedMetric(_)) => per_class.push(None),
                    Err(other) => return Err(other),
                }
            }
            let mean = metrics::mean_auc(&per_class).ok();
            (per_class, mean)
        };

        if let Some(mean) = val_mean {
            let improved = report.best_val_mean_auc.is_none_or(|best| mean > best);
            if improved {
                report.best_val_mean_auc = Some(mean);
                report.best_epoch = Some(epoch);
                if let Some(path) = checkpoint_path {
                    save_checkpoint(model, &state, path)?;
                }
            }
        }

        report.epochs.push(EpochStats {
            epoch,
            loss: epoch_loss_sum / train_set.len() as f64,
            lr: epoch_first_lr.unwrap_or(cfg.hyper.lr0),
            val_auc,
            val_mean_auc: val_mean,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    if report.best_epoch.is_none() {
        report.best_epoch = Some(cfg.epochs - 1);
        if let Some(path) = checkpoint_path {
            save_checkpoint(model, &state, path)?;
        }
    }
    Ok((report, state))
}

fn diagnostic_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".diverged");
    path.with_file_name(name)
}

// ── Checkpoint format ────────────────────────────────────────────────
//
// magic "R2RP" | u32 version=1 | u32 tensor count | tensor records |
// u32 CRC32 of the tensor-record region. Per record: u16 name length,
// UTF-8 name, u8 rank, u32 dims, little-endian f32 payload. The model
// configuration rides along as numeric `config/...` tensors so a
// checkpoint alone rebuilds the model.

const MAGIC: &[u8; 4] = b"R2RP";
const VERSION: u32 = 1;

struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn config_tensors(config: &ModelConfig) -> Vec<NamedTensor> {
    let pooling = match config.pooling {
        Pooling::Sum => 0.0,
        Pooling::Normalized => 1.0,
    };
    let seed_limbs: Vec<f32> = (0..4)
        .map(|i| ((config.seed >> (16 * i)) & 0xffff) as f32)
        .collect();
    let mut stage_rows = Vec::with_capacity(config.stages.len() * 6);
    for s in &config.stages {
        stage_rows.extend_from_slice(&[
            s.embed_channels as f32,
            s.blocks as f32,
            s.masks as f32,
            s.query_dim as f32,
            s.patch_stride as f32,
            s.mlp_ratio as f32,
        ]);
    }
    vec![
        NamedTensor {
            name: "config/n_classes".into(),
            dims: vec![1],
            values: vec![config.n_classes as f32],
        },
        NamedTensor {
            name: "config/input_channels".into(),
            dims: vec![1],
            values: vec![config.input_channels as f32],
        },
        NamedTensor {
            name: "config/input_size".into(),
            dims: vec![1],
            values: vec![config.input_size as f32],
        },
        NamedTensor {
            name: "config/pooling".into(),
            dims: vec![1],
            values: vec![pooling],
        },
        NamedTensor {
            name: "config/seed".into(),
            dims: vec![4],
            values: seed_limbs,
        },
        NamedTensor {
            name: "config/stages".into(),
            dims: vec![config.stages.len(), 6],
            values: stage_rows,
        },
    ]
}

fn decode_config(table: &[NamedTensor]) -> Result<ModelConfig> {
    let find = |name: &str| -> Result<&NamedTensor> {
        table
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint: missing {name} tensor")))
    };
    let scalar = |name: &str| -> Result<f32> {
        let t = find(name)?;
        t.values
            .first()
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint: empty {name} tensor")))
    };
    let seed_t = find("config/seed")?;
    if seed_t.values.len() != 4 {
        return Err(Error::Format("checkpoint: config/seed must hold 4 limbs".into()));
    }
    let seed = seed_t
        .values
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &limb)| acc | ((limb as u64 & 0xffff) << (16 * i)));
    let stages_t = find("config/stages")?;
    if stages_t.dims.len() != 2 || stages_t.dims[1] != 6 {
        return Err(Error::Format(format!(
            "checkpoint: config/stages has dims {:?}, want [n,6]",
            stages_t.dims
        )));
    }
    let stages = stages_t
        .values
        .chunks_exact(6)
        .map(|row| StageConfig {
            embed_channels: row[0] as usize,
            blocks: row[1] as usize,
            masks: row[2] as usize,
            query_dim: row[3] as usize,
            patch_stride: row[4] as usize,
            mlp_ratio: row[5] as f64,
        })
        .collect();
    let pooling = if scalar("config/pooling")? == 1.0 {
        Pooling::Normalized
    } else {
        Pooling::Sum
    };
    Ok(ModelConfig {
        stages,
        n_classes: scalar("config/n_classes")? as usize,
        input_channels: scalar("config/input_channels")? as usize,
        input_size: scalar("config/input_size")? as usize,
        pooling,
        seed,
    })
}

/// Serializes model parameters, configuration, and optimizer state.
pub fn save_checkpoint(model: &Model, state: &OptimState, path: &Path) -> Result<()> {
    let mut table = config_tensors(&model.config);
    let params = model.parameters();
    for (name, tensor) in &params {
        table.push(NamedTensor {
            name: format!("param/{name}"),
            dims: tensor.shape(),
            values: tensor.to_vec().iter().map(|&v| v as f32).collect(),
        });
    }
    table.push(NamedTensor {
        name: "adamw/step".into(),
        dims: vec![1],
        values: vec![state.step as f32],
    });
    for ((name, _), slot) in params.iter().zip(&state.slots) {
        table.push(NamedTensor {
            name: format!("adamw/m/{name}"),
            dims: vec![slot.m.len()],
            values: slot.m.iter().map(|&v| v as f32).collect(),
        });
        table.push(NamedTensor {
            name: format!("adamw/v/{name}"),
            dims: vec![slot.v.len()],
            values: slot.v.iter().map(|&v| v as f32).collect(),
        });
    }

    let mut body = Vec::new();
    for t in &table {
        let name = t.name.as_bytes();
        body.extend_from_slice(&(name.len() as u16).to_le_bytes());
        body.extend_from_slice(name);
        body.push(t.dims.len() as u8);
        for &d in &t.dims {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    std::fs::write(path, out).map_err(Error::Io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint: truncated {what} at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_table(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "checkpoint: header needs 12 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(
            "checkpoint: bad magic at offset 0 (want R2RP)".into(),
        ));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32_le("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported version {version} at offset 4"
        )));
    }
    let count = cur.u32_le("tensor count")?;
    if count == 0 {
        return Err(Error::Format(
            "checkpoint: empty tensor table at offset 8".into(),
        ));
    }
    let body_start = cur.pos;
    let mut table = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16_le("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format(format!("checkpoint: non-UTF8 name at offset {}", cur.pos)))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32_le("dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4, "payload")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        table.push(NamedTensor { name, dims, values });
    }
    let body_end = cur.pos;
    let stored_crc = cur.u32_le("crc")?;
    let actual = crc32fast::hash(&bytes[body_start..body_end]);
    if stored_crc != actual {
        return Err(Error::Format(format!(
            "checkpoint: crc mismatch at offset {body_end} (stored {stored_crc:#010x}, computed {actual:#010x})"
        )));
    }
    Ok(table)
}

/// Rebuilds the model and optimizer state from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Model, OptimState)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let table = read_table(&bytes)?;
    let config = decode_config(&table)?;
    let model = model::build(&config)?;
    let params = model.parameters();

    let lookup = |name: &str| -> Result<&NamedTensor> {
        table
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint: missing {name} tensor")))
    };
    for (name, tensor) in &params {
        let stored = lookup(&format!("param/{name}"))?;
        if stored.dims != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint: {name} has dims {:?}, model expects {:?}",
                stored.dims,
                tensor.shape()
            )));
        }
        tensor.set_data(stored.values.iter().map(|&v| v as f64).collect())?;
    }
    let mut state = OptimState::new(&params, AdamWParams::default());
    state.step = lookup("adamw/step")?.values[0] as u64;
    for ((name, _), slot) in params.iter().zip(&mut state.slots) {
        let m = lookup(&format!("adamw/m/{name}"))?;
        let v = lookup(&format!("adamw/v/{name}"))?;
        if m.values.len() != slot.m.len() || v.values.len() != slot.v.len() {
            return Err(Error::Format(format!(
                "checkpoint: moment buffers for {name} have the wrong size"
            )));
        }
        slot.m = m.values.iter().map(|&x| x as f64).collect();
        slot.v = v.values.iter().map(|&x| x as f64).collect();
    }
    Ok((model, state))
}
