//! Dataset-level evaluation: scores every test image with a chosen saliency
//! method, pools pixels, and reports ranking metrics plus overlap metrics at
//! a threshold chosen by one of three regimes.
//!
//! The ranking metrics (AUROC, AUPRC) are threshold-free and therefore
//! identical across regimes on the same maps; only the overlap metrics
//! depend on the regime. The operating-point regime fits its threshold on
//! ground truth and is flagged as such in the report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{anatomy_mask, Image, Mask, Sample};
use crate::error::{CoreError, Result};
use crate::inference::{
    attention_saliency, inverted_attention_saliency, residual_saliency, threshold_operating_point,
    threshold_percentile, AnomalyMap,
};
use crate::metrics::{auprc, auroc, dice_by_group, Confusion};
use crate::model::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    /// Min-max-normalized raw attention (the proposed scorer).
    Attention,
    /// 1 - sigmoid(attention), the prior-work convention. Baseline only.
    InvertedAttention,
    /// Masked reconstruction residual.
    Residual,
}

impl ScoringMethod {
    pub fn name(self) -> &'static str {
        match self {
            ScoringMethod::Attention => "attention",
            ScoringMethod::InvertedAttention => "inverted_attention",
            ScoringMethod::Residual => "residual",
        }
    }
}

/// How the binarization threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRegime {
    Fixed(f64),
    OperatingPoint,
    Percentile(f64),
}

impl fmt::Display for ThresholdRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdRegime::Fixed(tau) => write!(f, "fixed:{tau}"),
            ThresholdRegime::OperatingPoint => write!(f, "op"),
            ThresholdRegime::Percentile(q) => write!(f, "percentile:{q}"),
        }
    }
}

impl FromStr for ThresholdRegime {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<ThresholdRegime> {
        let bad = |m: String| CoreError::Config(m);
        if s == "op" {
            return Ok(ThresholdRegime::OperatingPoint);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let tau: f64 = v
                .parse()
                .map_err(|_| bad(format!("bad fixed threshold {v:?}")))?;
            if !(0.0..=1.0).contains(&tau) {
                return Err(bad(format!("fixed threshold {tau} outside [0, 1]")));
            }
            return Ok(ThresholdRegime::Fixed(tau));
        }
        if let Some(v) = s.strip_prefix("percentile:") {
            let q: f64 = v
                .parse()
                .map_err(|_| bad(format!("bad percentile {v:?}")))?;
            if !(0.0 < q && q < 100.0) {
                return Err(bad(format!("percentile {q} outside (0, 100)")));
            }
            return Ok(ThresholdRegime::Percentile(q));
        }
        Err(bad(format!(
            "unknown threshold regime {s:?}; expected op, fixed:<tau> or percentile:<q>"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub threshold_regime: String,
    /// True when the threshold was fit using ground-truth masks.
    pub uses_anomalous_images: bool,
    pub auroc: f64,
    pub auprc: f64,
    pub threshold: f64,
    pub dice_dataset: f64,
    pub iou_dataset: f64,
    pub dice_per_scan_mean: f64,
    pub dice_per_scan_std: f64,
    pub n_images: usize,
    pub n_pixels: usize,
}

/// Saliency maps paired with ground truth, ready for metric computation.
pub struct ScoredDataset {
    pub maps: Vec<AnomalyMap>,
    pub truths: Vec<Mask>,
    pub scan_ids: Vec<String>,
    pub method: ScoringMethod,
}

/// Scores all samples with the chosen method. Every sample must carry a
/// ground-truth mask.
pub fn score_dataset(
    model: &Vae,
    samples: &[Sample],
    method: ScoringMethod,
    cam_depth: usize,
) -> Result<ScoredDataset> {
    if samples.is_empty() {
        return Err(CoreError::Domain {
            context: "score_dataset",
            message: "no samples to evaluate".to_string(),
        });
    }
    let mut maps = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    let mut scan_ids = Vec::with_capacity(samples.len());
    for s in samples {
        let truth = s.anomaly_mask.as_ref().ok_or(CoreError::Domain {
            context: "score_dataset",
            message: format!(
                "sample from scan {} has no ground-truth mask; overlap metrics and \
                 anomaly-derived thresholds such as the operating point need labeled \
                 images (only the percentile regime works from normal data alone)",
                s.scan_id
            ),
        })?;
        let map = match method {
            ScoringMethod::Attention => attention_saliency(model, &s.image, cam_depth)?,
            ScoringMethod::InvertedAttention => {
                inverted_attention_saliency(model, &s.image, cam_depth)?
            }
            ScoringMethod::Residual => {
                residual_saliency(model, &s.image, &anatomy_mask(&s.image))?
            }
        };
        maps.push(map);
        truths.push(truth.clone());
        scan_ids.push(s.scan_id.clone());
    }
    Ok(ScoredDataset {
        maps,
        truths,
        scan_ids,
        method,
    })
}

/// Saliency maps of normal images, as needed by the percentile regime.
pub fn score_normals(
    model: &Vae,
    images: &[Image],
    method: ScoringMethod,
    cam_depth: usize,
) -> Result<Vec<AnomalyMap>> {
    images
        .iter()
        .map(|x| match method {
            ScoringMethod::Attention => attention_saliency(model, x, cam_depth),
            ScoringMethod::InvertedAttention => inverted_attention_saliency(model, x, cam_depth),
            ScoringMethod::Residual => residual_saliency(model, x, &anatomy_mask(x)),
        })
        .collect()
}

fn resolve_threshold(
    scored: &ScoredDataset,
    regime: &ThresholdRegime,
    normal_maps: Option<&[AnomalyMap]>,
) -> Result<f64> {
    match regime {
        ThresholdRegime::Fixed(tau) => {
            if !(0.0..=1.0).contains(tau) {
                return Err(CoreError::Domain {
                    context: "evaluate",
                    message: format!("fixed threshold {tau} outside [0, 1]"),
                });
            }
            Ok(*tau)
        }
        ThresholdRegime::OperatingPoint => threshold_operating_point(&scored.maps, &scored.truths),
        ThresholdRegime::Percentile(q) => {
            let maps = normal_maps.ok_or(CoreError::Domain {
                context: "evaluate",
                message: "percentile regime needs saliency maps of normal images".to_string(),
            })?;
            threshold_percentile(maps, *q)
        }
    }
}

/// Full report for already-scored data.
pub fn evaluate_scored(
    scored: &ScoredDataset,
    regime: &ThresholdRegime,
    normal_maps: Option<&[AnomalyMap]>,
) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, t) in scored.maps.iter().zip(&scored.truths) {
        if m.values.dim() != t.dim() {
            return Err(CoreError::Shape {
                context: "evaluate",
                expected: vec![m.values.dim().0, m.values.dim().1],
                got: vec![t.dim().0, t.dim().1],
            });
        }
        scores.extend(m.values.iter().copied());
        labels.extend(t.iter().copied());
    }

    let auroc_v = auroc(&scores, &labels)?;
    let auprc_v = auprc(&scores, &labels)?;
    let threshold = resolve_threshold(scored, regime, normal_maps)?;

    let pred: Vec<bool> = scores.iter().map(|&v| v >= threshold).collect();
    let pooled = Confusion::from_masks(&pred, &labels)?;

    let mut by_scan: BTreeMap<&str, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for ((m, t), id) in scored.maps.iter().zip(&scored.truths).zip(&scored.scan_ids) {
        let entry = by_scan.entry(id.as_str()).or_default();
        entry.0.extend(m.values.iter().map(|&v| v >= threshold));
        entry.1.extend(t.iter().copied());
    }
    let groups: Vec<(&[bool], &[bool])> = by_scan
        .values()
        .map(|(p, t)| (p.as_slice(), t.as_slice()))
        .collect();
    let per_scan = dice_by_group(&groups)?;

    Ok(EvalReport {
        method: scored.method.name().to_string(),
        threshold_regime: regime.to_string(),
        uses_anomalous_images: matches!(regime, ThresholdRegime::OperatingPoint),
        auroc: auroc_v,
        auprc: auprc_v,
        threshold,
        dice_dataset: pooled.dice(),
        iou_dataset: pooled.iou(),
        dice_per_scan_mean: per_scan.mean,
        dice_per_scan_std: per_scan.std,
        n_images: scored.maps.len(),
        n_pixels: scores.len(),
    })
}

/// Scores and evaluates in one call. `normal_images` is consulted only by
/// the percentile regime.
pub fn evaluate(
    model: &Vae,
    samples: &[Sample],
    method: ScoringMethod,
    cam_depth: usize,
    regime: &ThresholdRegime,
    normal_images: Option<&[Image]>,
) -> Result<EvalReport> {
    let scored = score_dataset(model, samples, method, cam_depth)?;
    let normal_maps = match (regime, normal_images) {
        (ThresholdRegime::Percentile(_), Some(images)) => {
            Some(score_normals(model, images, method, cam_depth)?)
        }
        _ => None,
    };
    evaluate_scored(&scored, regime, normal_maps.as_deref())
}

/// Arithmetic mean over repetitions. All reports must share the method and
/// regime and have equal counts.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(CoreError::Domain {
        context: "average_reports",
        message: "no reports".to_string(),
    })?;
    for r in reports {
        if r.method != first.method
            || r.threshold_regime != first.threshold_regime
            || r.n_images != first.n_images
            || r.n_pixels != first.n_pixels
        {
            return Err(CoreError::Domain {
                context: "average_reports",
                message: "reports disagree on method, regime or counts".to_string(),
            });
        }
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        method: first.method.clone(),
        threshold_regime: first.threshold_regime.clone(),
        uses_anomalous_images: first.uses_anomalous_images,
        auroc: mean(|r| r.auroc),
        auprc: mean(|r| r.auprc),
        threshold: mean(|r| r.threshold),
        dice_dataset: mean(|r| r.dice_dataset),
        iou_dataset: mean(|r| r.iou_dataset),
        dice_per_scan_mean: mean(|r| r.dice_per_scan_mean),
        dice_per_scan_std: mean(|r| r.dice_per_scan_std),
        n_images: first.n_images,
        n_pixels: first.n_pixels,
    })
}
