//! Implementations of the five subcommands. Each one loads the experiment
//! configuration, applies flag overrides, guards its output paths and writes
//! a resolved-config snapshot beside the artifacts.

use std::path::{Path, PathBuf};

use camloc_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use camloc_core::data::{
    export_dataset, generate_synthetic, load_dataset, save_gray16, Image, Sample, Split,
};
use camloc_core::error::{CoreError, Result};
use camloc_core::eval::{
    average_reports, evaluate_scored, score_dataset, score_normals, EvalReport, ThresholdRegime,
};
use camloc_core::inference::threshold_fixed;
use camloc_core::model::ModelConfig;
use camloc_core::training::{resume as train_resume, train, AdamState, TrainConfig};
use ndarray::Array2;

use crate::config::{guard_overwrite, parse_method, ExperimentConfig};

fn config_err(msg: String) -> CoreError {
    CoreError::Config(msg)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Loads the dataset named by the config, generating and exporting the
/// synthetic one under `outdir/dataset` on first use.
fn resolve_dataset(cfg: &ExperimentConfig, outdir: &Path) -> Result<Vec<Sample>> {
    if let Some(path) = &cfg.dataset {
        return load_dataset(path);
    }
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| config_err("config has neither [synth] nor dataset".to_string()))?;
    let manifest = outdir.join("dataset").join("manifest.json");
    if manifest.exists() {
        return load_dataset(&manifest);
    }
    let samples = generate_synthetic(synth)?;
    ensure_dir(&outdir.join("dataset"))?;
    export_dataset(&samples, &outdir.join("dataset"))?;
    Ok(samples)
}

fn train_images(samples: &[Sample]) -> Vec<Image> {
    samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.image.clone())
        .collect()
}

pub fn cmd_synth(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    force: bool,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    let synth = cfg
        .synth
        .as_mut()
        .ok_or_else(|| config_err("synth command needs a [synth] section".to_string()))?;
    if let Some(s) = seed {
        synth.seed = s;
    }
    let outdir = cfg.resolved_outdir(out);
    let dataset_dir = outdir.join("dataset");
    guard_overwrite(&dataset_dir, force)?;
    if dataset_dir.exists() {
        std::fs::remove_dir_all(&dataset_dir)?;
    }
    ensure_dir(&dataset_dir)?;

    let samples = generate_synthetic(cfg.synth.as_ref().expect("checked above"))?;
    let manifest = export_dataset(&samples, &dataset_dir)?;
    cfg.snapshot(&outdir.join("resolved-synth.toml"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn constraint_override(cfg: &mut TrainConfig, name: &str) -> Result<()> {
    use camloc_core::constraints::ConstraintKind::*;
    cfg.constraint.kind = match name {
        "barrier" | "log_barrier" => Barrier,
        "l2_image" => L2Image,
        "l2_pixel" => L2Pixel,
        "l1_expansion" => L1Expansion,
        "none" => None,
        other => {
            return Err(config_err(format!(
                "unknown constraint kind {other:?}"
            )))
        }
    };
    Ok(())
}

pub struct TrainFlags<'a> {
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub force: bool,
    pub constraint: Option<&'a str>,
    pub resume: Option<&'a Path>,
}

pub fn cmd_train(config_path: &Path, flags: TrainFlags<'_>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    if let Some(kind) = flags.constraint {
        constraint_override(&mut cfg.train, kind)?;
    }
    let outdir = cfg.resolved_outdir(flags.out);
    ensure_dir(&outdir)?;
    let samples = resolve_dataset(&cfg, &outdir)?;
    let images = train_images(&samples);

    if flags.resume.is_some() && cfg.repetitions != 1 {
        return Err(config_err(
            "--resume requires repetitions = 1".to_string(),
        ));
    }

    cfg.snapshot(&outdir.join("resolved-train.toml"))?;

    let mut aborted: Option<(usize, usize)> = None;
    for rep in 0..cfg.repetitions {
        let rep_dir = outdir.join(format!("rep{rep}"));
        let ckpt_path = rep_dir.join("model.ckpt");
        guard_overwrite(&ckpt_path, flags.force)?;
        ensure_dir(&rep_dir)?;

        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = cfg.train.seed + rep as u64;

        let outcome = match flags.resume {
            Some(path) => {
                let ckpt = load_checkpoint(path)?;
                if *ckpt.model.config() != cfg.model {
                    return Err(config_err(format!(
                        "checkpoint {} was trained with a different model config",
                        path.display()
                    )));
                }
                let adam = ckpt
                    .adam
                    .unwrap_or_else(|| AdamState::new(&ckpt.model));
                train_resume(ckpt.model, adam, ckpt.step, &train_cfg, &images)?
            }
            None => train(&cfg.model, &train_cfg, &images)?,
        };

        let completed = match outcome.aborted_at {
            Some(step) => step - 1,
            None => train_cfg.total_steps,
        };
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                model: outcome.model,
                step: completed,
                adam: Some(outcome.adam),
            },
        )?;
        outcome.log.write_jsonl(&rep_dir.join("log.jsonl"))?;
        println!("{}", ckpt_path.display());
        if let Some(step) = outcome.aborted_at {
            aborted = Some((rep, step));
            break;
        }
    }

    if let Some((rep, step)) = aborted {
        return Err(CoreError::NonFinite {
            context: "training aborted; last good checkpoint saved",
            step: step + rep * cfg.train.total_steps,
        });
    }
    Ok(())
}

fn sanitize_regime(regime: &str) -> String {
    regime.replace(':', "_")
}

/// Side-by-side grayscale strip: input, saliency, prediction, ground truth.
fn panel(image: &Image, saliency: &Image, pred: &Array2<bool>, truth: &Array2<bool>) -> Image {
    let (h, w) = image.dim();
    let gap = 2;
    let mut out = Array2::from_elem((h, 4 * w + 3 * gap), 1.0);
    let mut paste = |slot: usize, values: &Image| {
        let x0 = slot * (w + gap);
        out.slice_mut(ndarray::s![.., x0..x0 + w]).assign(values);
    };
    paste(0, image);
    paste(1, saliency);
    paste(2, &pred.mapv(|v| if v { 1.0 } else { 0.0 }));
    paste(3, &truth.mapv(|v| if v { 1.0 } else { 0.0 }));
    out
}

pub struct EvalFlags<'a> {
    pub out: Option<&'a Path>,
    pub force: bool,
    pub checkpoint: Option<&'a Path>,
    pub dataset: Option<&'a Path>,
    pub regimes: &'a [String],
    pub method: Option<&'a str>,
    pub panels: Option<usize>,
    pub split: Split,
}

pub fn cmd_eval(config_path: &Path, flags: EvalFlags<'_>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(p) = flags.dataset {
        cfg.dataset = Some(p.to_path_buf());
    }
    if let Some(m) = flags.method {
        cfg.method = m.to_string();
    }
    if !flags.regimes.is_empty() {
        cfg.regimes = flags.regimes.to_vec();
    }
    cfg.validate()?;
    let method = parse_method(&cfg.method)?;
    let panels = flags.panels.unwrap_or(cfg.panels);

    let outdir = cfg.resolved_outdir(flags.out);
    let samples = resolve_dataset(&cfg, &outdir)?;
    let eval_samples: Vec<Sample> = samples
        .iter()
        .filter(|s| s.split == flags.split)
        .cloned()
        .collect();
    if eval_samples.is_empty() {
        return Err(CoreError::Domain {
            context: "eval",
            message: format!("no samples in the {} split", flags.split.name()),
        });
    }

    let default_ckpt = outdir.join("rep0").join("model.ckpt");
    let ckpt_path = flags.checkpoint.unwrap_or(&default_ckpt);
    let ckpt = load_checkpoint(ckpt_path)?;

    let eval_dir = outdir.join("eval");
    guard_overwrite(&eval_dir, flags.force)?;
    if eval_dir.exists() {
        std::fs::remove_dir_all(&eval_dir)?;
    }
    ensure_dir(&eval_dir)?;

    let scored = score_dataset(&ckpt.model, &eval_samples, method, cfg.train.cam_depth)?;
    let needs_normals = cfg
        .regimes
        .iter()
        .any(|r| matches!(r.parse(), Ok(ThresholdRegime::Percentile(_))));
    let normal_maps = if needs_normals {
        let normals = train_images(&samples);
        Some(score_normals(&ckpt.model, &normals, method, cfg.train.cam_depth)?)
    } else {
        None
    };

    let mut first_threshold = None;
    for regime_str in &cfg.regimes {
        let regime: ThresholdRegime = regime_str.parse()?;
        let report = evaluate_scored(&scored, &regime, normal_maps.as_deref())?;
        if first_threshold.is_none() {
            first_threshold = Some(report.threshold);
        }
        let path = eval_dir.join(format!("report-{}.json", sanitize_regime(regime_str)));
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        println!(
            "{regime_str}: auroc {:.4} auprc {:.4} dice {:.4} iou {:.4} (threshold {:.4})",
            report.auroc, report.auprc, report.dice_dataset, report.iou_dataset, report.threshold
        );
    }

    let tau = first_threshold.expect("at least one regime");
    for (i, (sample, map)) in eval_samples.iter().zip(&scored.maps).take(panels).enumerate() {
        let pred = threshold_fixed(map, tau.clamp(0.0, 1.0))?;
        let truth = sample.anomaly_mask.as_ref().expect("eval samples have masks");
        let strip = panel(&sample.image, &map.values, &pred.mask, truth);
        save_gray16(&eval_dir.join(format!("panel{i}.png")), &strip)?;
    }

    cfg.snapshot(&eval_dir.join("resolved-eval.toml"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    P,
    T,
    Lambda,
    CamDepth,
    ConstraintKind,
    ReconLoss,
    LatentDim,
}

impl std::str::FromStr for AblationAxis {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<AblationAxis> {
        Ok(match s {
            "p" => AblationAxis::P,
            "t" => AblationAxis::T,
            "lambda" => AblationAxis::Lambda,
            "cam_depth" => AblationAxis::CamDepth,
            "constraint_kind" => AblationAxis::ConstraintKind,
            "recon_loss" => AblationAxis::ReconLoss,
            "latent_dim" => AblationAxis::LatentDim,
            other => {
                return Err(config_err(format!(
                    "unknown ablation axis {other:?}; expected p, t, lambda, cam_depth, \
                     constraint_kind, recon_loss or latent_dim"
                )))
            }
        })
    }
}

impl AblationAxis {
    fn name(self) -> &'static str {
        match self {
            AblationAxis::P => "p",
            AblationAxis::T => "t",
            AblationAxis::Lambda => "lambda",
            AblationAxis::CamDepth => "cam_depth",
            AblationAxis::ConstraintKind => "constraint_kind",
            AblationAxis::ReconLoss => "recon_loss",
            AblationAxis::LatentDim => "latent_dim",
        }
    }

    fn default_grid(self, model: &ModelConfig) -> Vec<String> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            AblationAxis::P => strs(&["0", "0.05", "0.1", "0.15", "0.2", "0.25", "0.3"]),
            AblationAxis::T => strs(&["10", "15", "20", "25", "50"]),
            AblationAxis::Lambda => strs(&["0.01", "0.1", "1", "10", "100"]),
            AblationAxis::CamDepth => (1..=model.n_blocks()).map(|d| d.to_string()).collect(),
            AblationAxis::ConstraintKind => {
                strs(&["barrier", "l2_image", "l2_pixel", "l1_expansion"])
            }
            AblationAxis::ReconLoss => strs(&["bce", "l2", "ssim"]),
            AblationAxis::LatentDim => strs(&["8", "16", "32", "64"]),
        }
    }

    /// Applies one grid value to the experiment configuration.
    fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| config_err(format!("bad numeric grid value {v:?}")))
        };
        match self {
            AblationAxis::P => cfg.train.constraint.p = num(value)?,
            AblationAxis::T => cfg.train.constraint.t = num(value)?,
            AblationAxis::Lambda => cfg.train.constraint.lambda = num(value)?,
            AblationAxis::CamDepth => {
                cfg.train.cam_depth = value
                    .parse()
                    .map_err(|_| config_err(format!("bad depth {value:?}")))?
            }
            AblationAxis::ConstraintKind => constraint_override(&mut cfg.train, value)?,
            AblationAxis::ReconLoss => {
                use camloc_core::model::ReconLoss::*;
                cfg.model.recon_loss = match value {
                    "bce" => Bce,
                    "l2" => L2,
                    "ssim" => Ssim,
                    other => return Err(config_err(format!("unknown recon loss {other:?}"))),
                }
            }
            AblationAxis::LatentDim => {
                cfg.model.latent_dim = value
                    .parse()
                    .map_err(|_| config_err(format!("bad latent dim {value:?}")))?
            }
        }
        cfg.validate()
    }
}

pub struct AblateFlags<'a> {
    pub out: Option<&'a Path>,
    pub force: bool,
    pub axis: AblationAxis,
    pub values: Option<&'a str>,
}

pub fn cmd_ablate(config_path: &Path, flags: AblateFlags<'_>) -> Result<()> {
    let base = ExperimentConfig::load(config_path)?;
    let method = parse_method(&base.method)?;
    let outdir = base.resolved_outdir(flags.out);
    ensure_dir(&outdir)?;
    let table_path = outdir.join(format!("ablate-{}.csv", flags.axis.name()));
    guard_overwrite(&table_path, flags.force)?;

    let samples = resolve_dataset(&base, &outdir)?;
    let images = train_images(&samples);
    let eval_samples: Vec<Sample> = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .cloned()
        .collect();

    let grid: Vec<String> = match flags.values {
        Some(csv) => csv.split(',').map(|v| v.trim().to_string()).collect(),
        None => flags.axis.default_grid(&base.model),
    };
    if grid.is_empty() {
        return Err(config_err("empty ablation grid".to_string()));
    }

    let mut rows = vec!["axis,value,seed,auprc,dice_op".to_string()];
    for value in &grid {
        let mut cfg = base.clone();
        flags.axis.apply(&mut cfg, value)?;
        let mut auprcs = Vec::new();
        let mut dices = Vec::new();
        for rep in 0..cfg.repetitions {
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = cfg.train.seed + rep as u64;
            let outcome = train(&cfg.model, &train_cfg, &images)?;
            if let Some(step) = outcome.aborted_at {
                return Err(CoreError::NonFinite {
                    context: "ablation cell diverged",
                    step,
                });
            }
            let scored =
                score_dataset(&outcome.model, &eval_samples, method, train_cfg.cam_depth)?;
            let report = evaluate_scored(&scored, &ThresholdRegime::OperatingPoint, None)?;
            rows.push(format!(
                "{},{},{},{},{}",
                flags.axis.name(),
                value,
                train_cfg.seed,
                report.auprc,
                report.dice_dataset
            ));
            auprcs.push(report.auprc);
            dices.push(report.dice_dataset);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(format!(
            "{},{},mean,{},{}",
            flags.axis.name(),
            value,
            mean(&auprcs),
            mean(&dices)
        ));
        println!(
            "{}={}: auprc {:.4} dice {:.4}",
            flags.axis.name(),
            value,
            mean(&auprcs),
            mean(&dices)
        );
    }
    std::fs::write(&table_path, rows.join("\n") + "\n")?;
    base.snapshot(&outdir.join(format!("resolved-ablate-{}.toml", flags.axis.name())))?;
    println!("{}", table_path.display());
    Ok(())
}

pub fn cmd_report(inputs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    guard_overwrite(out, force)?;
    let mut reports = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let r: EvalReport = serde_json::from_str(&text)?;
        reports.push(r);
    }
    let avg = average_reports(&reports)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_vec_pretty(&avg)?)?;
    println!(
        "{} reports -> {}: auroc {:.4} auprc {:.4} dice {:.4}",
        reports.len(),
        out.display(),
        avg.auroc,
        avg.auprc,
        avg.dice_dataset
    );
    Ok(())
}
