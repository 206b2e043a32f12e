//! End-to-end library walkthrough on a tiny synthetic dataset: generate
//! scans, train a constrained model, score the test split two ways and
//! print the headline metrics. Runs in seconds on one CPU core.
//!
//!     cargo run --release -p camloc-core --example pipeline

use camloc_core::data::{generate_synthetic, Image, Split, SynthConfig};
use camloc_core::eval::{evaluate_scored, score_dataset, ScoringMethod, ThresholdRegime};
use camloc_core::model::ModelConfig;
use camloc_core::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig {
        image_size: 24,
        train_scans: 6,
        val_scans: 1,
        test_scans: 4,
        slices_per_scan: 3,
        anomaly_count: (1, 2),
        anomaly_radius: (2.0, 4.5),
        intensity_shift: (0.15, 0.35),
        seed: 11,
        ..SynthConfig::default()
    };
    let samples = generate_synthetic(&synth)?;
    let train_images: Vec<Image> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.image.clone())
        .collect();
    let test: Vec<_> = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .cloned()
        .collect();
    println!("dataset: {} train / {} test images", train_images.len(), test.len());

    let model_cfg = ModelConfig {
        latent_dim: 8,
        input_size: 24,
        encoder_widths: vec![6, 12],
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        warmup_steps: 15,
        total_steps: 90,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train(&model_cfg, &train_cfg, &train_images)?;
    let last = outcome.log.records.last().unwrap();
    println!(
        "trained {} steps: vae loss {:.4}, mean attention {:.3}",
        last.step, last.vae_loss, last.mean_attention
    );

    for method in [ScoringMethod::Attention, ScoringMethod::Residual] {
        let scored = score_dataset(&outcome.model, &test, method, 1)?;
        let report = evaluate_scored(&scored, &ThresholdRegime::OperatingPoint, None)?;
        println!(
            "{:?}: AUROC {:.3}, AUPRC {:.3}, DICE {:.3} at threshold {:.3}",
            method, report.auroc, report.auprc, report.dice_dataset, report.threshold
        );
    }
    Ok(())
}
