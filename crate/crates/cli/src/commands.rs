//! The four subcommands: train, eval, explain, gradcheck.

use std::path::{Path, PathBuf};

use serde_json::json;

use r2r_core::gradcheck;
use r2r_core::metrics::{self, ActivityMeasure, ExplanationSet};
use r2r_core::model::build;
use r2r_core::tensor::Tape;
use r2r_core::train::{load_checkpoint, train};
use r2r_core::{Error, Result};

use crate::config::{load_data, RunConfig};

/// Creates `<output_dir>/<timestamp>-<seed>/`, suffixing on collision.
fn create_run_dir(output_dir: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    std::fs::create_dir_all(output_dir)?;
    let base = output_dir.join(format!("{stamp}-{seed}"));
    for attempt in 0..1000u32 {
        let candidate = if attempt == 0 {
            base.clone()
        } else {
            output_dir.join(format!("{stamp}-{seed}-{attempt}"))
        };
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Err(Error::Contract("run directory collisions exhausted".into()))
}

pub fn cmd_train(config: RunConfig) -> Result<()> {
    let effective = serde_json::to_string_pretty(&config).expect("config serializes");
    println!("{effective}");

    let model_config = config.model.to_model_config(config.seed);
    let train_config = config.training.to_train_config(config.seed);
    let data = load_data(&config.data)?;
    if data.class_names.len() != model_config.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model is configured for {}",
            data.class_names.len(),
            model_config.n_classes
        )));
    }

    let run_dir = create_run_dir(&config.output_dir, config.seed)?;
    std::fs::write(run_dir.join("effective_config.json"), &effective)?;
    eprintln!("run dir: {}", run_dir.display());

    let model = build(&model_config)?;
    eprintln!(
        "model: {} parameters over {} blocks",
        model.parameter_count(),
        model.block_count()
    );
    let checkpoint = run_dir.join("model.ckpt");
    let (report, _state) = train(
        &model,
        &data.samples,
        &data.class_names,
        &train_config,
        Some(&checkpoint),
    )
    .inspect(|(report, _)| {
        for e in &report.epochs {
            eprintln!(
                "epoch {:3}  loss {:.5}  lr {:.6}  val mean AUC {}  ({:.1}s)",
                e.epoch,
                e.loss,
                e.lr,
                e.val_mean_auc
                    .map_or_else(|| "-".into(), |v| format!("{v:.4}")),
                e.seconds
            );
        }
    })?;
    std::fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    eprintln!(
        "best epoch {:?} (val mean AUC {:?}); checkpoint {}",
        report.best_epoch,
        report.best_val_mean_auc,
        checkpoint.display()
    );
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data_config: RunConfig,
    out_file: Option<&Path>,
) -> Result<()> {
    eprintln!(
        "{}",
        json!({
            "command": "eval",
            "checkpoint": checkpoint.display().to_string(),
            "data": data_config.data,
        })
    );
    let (model, _state) = load_checkpoint(checkpoint)?;
    let data = load_data(&data_config.data)?;
    let report = metrics::evaluate(&model, &data.samples, &data.class_names)?;
    let text = serde_json::to_string_pretty(&report.to_json()).expect("json serializes");
    println!("{text}");
    let out = out_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_sibling(checkpoint, "metrics.json"));
    std::fs::write(&out, &text)?;
    eprintln!("metrics written to {}", out.display());
    Ok(())
}

fn default_sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint
        .parent()
        .map(|d| d.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

#[derive(Debug, Clone)]
pub enum StageSelector {
    All,
    Index(usize),
    Last,
}

impl std::str::FromStr for StageSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(StageSelector::All),
            "last" => Ok(StageSelector::Last),
            other => other
                .parse::<usize>()
                .map(StageSelector::Index)
                .map_err(|_| format!("stage must be an index, `all`, or `last`, got {other:?}")),
        }
    }
}

pub fn cmd_explain(
    checkpoint: &Path,
    image_path: &Path,
    stage: &StageSelector,
    topk: usize,
    activity: ActivityMeasure,
    out_dir: &Path,
) -> Result<()> {
    eprintln!(
        "{}",
        json!({
            "command": "explain",
            "checkpoint": checkpoint.display().to_string(),
            "image": image_path.display().to_string(),
            "topk": topk,
            "activity": format!("{activity:?}"),
            "out_dir": out_dir.display().to_string(),
        })
    );
    let (model, _) = load_checkpoint(checkpoint)?;
    let image = r2r_core::data::read_image_pgm(image_path)?;
    let expected = vec![
        model.config.input_channels,
        model.config.input_size,
        model.config.input_size,
    ];
    if image.shape() != expected {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match the model input {:?}",
            image.shape(),
            expected
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut tape = Tape::inference();
    let (_, traces) = model.forward(&mut tape, &image, true)?;
    let traces = traces.expect("traces requested");
    let last_stage = model.n_stages() - 1;
    let selected: Vec<_> = traces
        .iter()
        .filter(|bt| match stage {
            StageSelector::All => true,
            StageSelector::Last => bt.stage == last_stage,
            StageSelector::Index(i) => bt.stage == *i,
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "no blocks selected; the model has stages 0..{last_stage}"
        )));
    }

    let size = model.config.input_size;
    let gray = image.to_vec();
    println!("stage block mask     activity");
    for bt in selected {
        let expl = ExplanationSet::from_trace(bt, activity);
        let picked = metrics::select_active_masks(&expl, topk, size, size)?;
        for mask in &picked {
            let stem = format!(
                "stage{}_block{}_mask{}",
                bt.stage, bt.block, mask.index
            );
            let ppm = out_dir.join(format!("{stem}.ppm"));
            metrics::render_overlay(&gray, &mask.heatmap, size, size, &ppm)?;
            println!(
                "{:5} {:5} {:4} {:12.6}{}",
                bt.stage,
                bt.block,
                mask.index,
                mask.activity,
                if mask.flat { "  (flat heatmap)" } else { "" }
            );
        }
    }
    eprintln!("overlays written to {}", out_dir.display());
    Ok(())
}

/// Runs the finite-difference suite on the micro model; returns the exit
/// code (0 pass, 1 fail).
pub fn cmd_gradcheck(seed: u64, break_adjoint: bool) -> Result<i32> {
    eprintln!(
        "{}",
        json!({ "command": "gradcheck", "seed": seed, "break_adjoint": break_adjoint })
    );
    let config = r2r_core::model::ModelConfig::micro(seed);
    let report = gradcheck::finite_difference_check(&config, seed, break_adjoint)?;
    println!("{:<40} max relative error", "parameter group");
    for group in &report.groups {
        println!("{:<40} {:.3e}", group.name, group.max_rel_error);
    }
    println!(
        "overall max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_error, report.tolerance
    );
    if report.passed() {
        println!("gradcheck PASS");
        Ok(0)
    } else {
        println!("gradcheck FAIL");
        Ok(1)
    }
}
