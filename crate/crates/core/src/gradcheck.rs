//! Central finite-difference verification of the analytic gradients of a
//! full model forward + loss, reported per parameter group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{self, Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Relative-error tolerance every parameter group must meet.
pub const TOLERANCE: f64 = 1e-4;

const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against max(|analytic|, |numeric|, this),
/// so near-zero gradients are not dominated by finite-difference noise.
const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn loss_value(model: &Model, x: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::inference();
    let (logits, _) = model.forward(&mut tape, x, false)?;
    Ok(tape.bce_with_logits(&logits, targets)?.scalar_value())
}

/// Compares analytic gradients of loss = BCE(forward(x), targets) against
/// central finite differences for every parameter of the model.
///
/// `sabotage` corrupts one parameter group's analytic gradients before the
/// comparison; it exists so the failure path of the checker is testable.
pub fn finite_difference_check(
    config: &ModelConfig,
    seed: u64,
    sabotage: bool,
) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.seed = seed;
    let model = model::build(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x17A9));
    let n_in = config.input_channels * config.input_size * config.input_size;
    let x = Tensor::from_vec(
        vec![config.input_channels, config.input_size, config.input_size],
        (0..n_in).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let target_bits: Vec<f64> = (0..config.n_classes)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let targets = Tensor::from_vec(vec![config.n_classes], target_bits)?;

    // Analytic pass.
    model.zero_grad();
    let mut tape = Tape::new();
    let (logits, _) = model.forward(&mut tape, &x, false)?;
    let loss = tape.bce_with_logits(&logits, &targets)?;
    tape.backward(&loss)?;

    let params = model.parameters();
    let sabotaged_group = params.len() / 2;
    let mut groups = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (gi, (name, param)) in params.iter().enumerate() {
        let mut analytic = param
            .grad_vec()
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        if sabotage && gi == sabotaged_group {
            for a in analytic.iter_mut() {
                *a = *a * 1.05 + 1e-3;
            }
        }
        let mut group_max: f64 = 0.0;
        for i in 0..param.numel() {
            let original = param.to_vec()[i];
            param.with_data_mut(|d| d[i] = original + FD_STEP);
            let plus = loss_value(&model, &x, &targets)?;
            param.with_data_mut(|d| d[i] = original - FD_STEP);
            let minus = loss_value(&model, &x, &targets)?;
            param.with_data_mut(|d| d[i] = original);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (analytic[i] - numeric).abs()
                / analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
            group_max = group_max.max(rel);
        }
        overall = overall.max(group_max);
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_error: group_max,
        });
    }
    Ok(GradCheckReport {
        groups,
        max_rel_error: overall,
        tolerance: TOLERANCE,
    })
}
