//! Anomaly saliency maps from a trained model and the three thresholding
//! regimes used to binarize them.
//!
//! Attention scoring upsamples the raw (pre-squash) map and rescales it to
//! [0, 1] by min-max; high values mark anomaly candidates directly, with no
//! inversion. Residual scoring is the classical |x - xhat| masked by a
//! slightly eroded anatomy mask. The inverted-attention variant reproduces
//! prior work's 1 - sigmoid(map) convention and exists only as a baseline.

use ndarray::Array2;

use crate::attention::{grad_cam, minmax_normalize, training_attention};
use crate::autodiff::{bilinear_upsample, Graph, GraphExt, Var};
use crate::data::{default_erosion_radius, erode_mask, Image, Mask};
use crate::error::{CoreError, Result};
use crate::metrics::optimal_threshold;
use crate::model::{image_to_tensor, tensor_to_image, LatentStats, Vae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Attention,
    Residual,
}

/// Per-pixel anomaly scores in [0, 1], same size as the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub values: Array2<f64>,
    pub provenance: Provenance,
}

/// Binary segmentation together with the threshold that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub mask: Mask,
    pub threshold: f64,
}

fn encode_mean(model: &Vae, x: &Image) -> Result<(Var, LatentStats, crate::model::FeatureStack)> {
    let g = Graph::new();
    let bound = model.bind(&g);
    let xv = g.leaf(image_to_tensor(x));
    let (stats, features) = bound.encode(&xv)?;
    Ok((xv, stats, features))
}

fn upsampled_raw_cam(model: &Vae, x: &Image, depth: usize) -> Result<Array2<f64>> {
    let (_, stats, features) = encode_mean(model, x)?;
    let cam = grad_cam(&stats, &features, depth)?;
    let s = cam.shape();
    let size = model.config().input_size;
    let up = bilinear_upsample(&cam.reshape(&[1, s[0], s[1]]), size, size);
    Ok(tensor_to_image(&up.value()))
}

/// Min-max-normalized upsampled raw attention; high = anomalous.
pub fn attention_saliency(model: &Vae, x: &Image, depth: usize) -> Result<AnomalyMap> {
    let raw = upsampled_raw_cam(model, x, depth)?;
    let norm = minmax_normalize(&raw.into_dyn());
    let (h, w) = x.dim();
    Ok(AnomalyMap {
        values: norm.into_shape_with_order((h, w)).expect("same shape"),
        provenance: Provenance::Attention,
    })
}

/// Prior-work convention: 1 minus the sigmoid-squashed attention map.
/// Baseline evaluation only.
pub fn inverted_attention_saliency(model: &Vae, x: &Image, depth: usize) -> Result<AnomalyMap> {
    let (_, stats, features) = encode_mean(model, x)?;
    let cam = grad_cam(&stats, &features, depth)?;
    let a = training_attention(&cam, model.config().input_size);
    let values = a.value().mapv(|v| 1.0 - v);
    let (h, w) = x.dim();
    Ok(AnomalyMap {
        values: values.into_shape_with_order((h, w)).expect("square map"),
        provenance: Provenance::Attention,
    })
}

/// `|x - xhat|` inside the eroded anatomy mask, min-max normalized. The
/// reconstruction uses the posterior mean, so the map is deterministic.
pub fn residual_saliency(model: &Vae, x: &Image, anatomy: &Mask) -> Result<AnomalyMap> {
    if anatomy.dim() != x.dim() {
        return Err(CoreError::Shape {
            context: "residual_saliency",
            expected: vec![x.dim().0, x.dim().1],
            got: vec![anatomy.dim().0, anatomy.dim().1],
        });
    }
    let g = Graph::new();
    let bound = model.bind(&g);
    let xv = g.leaf(image_to_tensor(x));
    let (stats, _) = bound.encode(&xv)?;
    let xhat = bound.decode(&stats.mu)?;
    let recon = tensor_to_image(&xhat.value());

    let eroded = erode_mask(anatomy, default_erosion_radius(model.config().input_size));
    let mut resid = Array2::zeros(x.dim());
    ndarray::Zip::from(&mut resid)
        .and(x)
        .and(&recon)
        .and(&eroded)
        .for_each(|r, &a, &b, &keep| {
            *r = if keep { (a - b).abs() } else { 0.0 };
        });
    let norm = minmax_normalize(&resid.into_dyn());
    let (h, w) = x.dim();
    Ok(AnomalyMap {
        values: norm.into_shape_with_order((h, w)).expect("same shape"),
        provenance: Provenance::Residual,
    })
}

/// `values >= tau`; `tau` must lie in [0, 1].
pub fn threshold_fixed(map: &AnomalyMap, tau: f64) -> Result<SegMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::Domain {
            context: "threshold_fixed",
            message: format!("tau must be in [0, 1], got {tau}"),
        });
    }
    Ok(SegMask {
        mask: map.values.mapv(|v| v >= tau),
        threshold: tau,
    })
}

/// Pooled-DICE-maximizing threshold over all candidate scores. Requires
/// ground truth, so reports using it must be flagged as supervised.
pub fn threshold_operating_point(maps: &[AnomalyMap], gts: &[Mask]) -> Result<f64> {
    if maps.is_empty() || maps.len() != gts.len() {
        return Err(CoreError::Domain {
            context: "threshold_operating_point",
            message: format!("need matched non-empty maps/masks, got {}/{}", maps.len(), gts.len()),
        });
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, t) in maps.iter().zip(gts) {
        if m.values.dim() != t.dim() {
            return Err(CoreError::Shape {
                context: "threshold_operating_point",
                expected: vec![m.values.dim().0, m.values.dim().1],
                got: vec![t.dim().0, t.dim().1],
            });
        }
        scores.extend(m.values.iter().copied());
        labels.extend(t.iter().copied());
    }
    Ok(optimal_threshold(&scores, &labels)?.threshold)
}

/// Average over images of the per-image q-th percentile (nearest rank) of
/// saliency values. Uses normal images only, by construction.
pub fn threshold_percentile(normal_maps: &[AnomalyMap], q: f64) -> Result<f64> {
    if normal_maps.is_empty() {
        return Err(CoreError::Domain {
            context: "threshold_percentile",
            message: "no maps given".to_string(),
        });
    }
    if !(0.0 < q && q < 100.0) {
        return Err(CoreError::Domain {
            context: "threshold_percentile",
            message: format!("percentile must be in (0, 100), got {q}"),
        });
    }
    let mut acc = 0.0;
    for m in normal_maps {
        let mut v: Vec<f64> = m.values.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
        acc += v[rank.clamp(1, v.len()) - 1];
    }
    Ok(acc / normal_maps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> Vae {
        let cfg = ModelConfig {
            latent_dim: 4,
            input_size: 8,
            encoder_widths: vec![4, 8],
            ..ModelConfig::default()
        };
        Vae::init(cfg, seed).unwrap()
    }

    fn toy_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.1..0.9))
    }

    fn map_of(values: Array2<f64>) -> AnomalyMap {
        AnomalyMap {
            values,
            provenance: Provenance::Attention,
        }
    }

    #[test]
    fn attention_saliency_normalized_and_deterministic() {
        let model = tiny_model(1);
        let x = toy_image(2);
        let a = attention_saliency(&model, &x, 1).unwrap();
        let b = attention_saliency(&model, &x, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.dim(), (8, 8));
        assert_eq!(a.provenance, Provenance::Attention);
        let max = a.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = a.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(max, 1.0);
        assert_eq!(min, 0.0);
    }

    /// The raw map's maximum survives upsampling at the exact lattice
    /// points, so normalization puts saliency 1 there (never inverted).
    #[test]
    fn attention_saliency_peaks_where_raw_cam_peaks() {
        let model = tiny_model(3);
        let x = toy_image(4);
        let raw = upsampled_raw_cam(&model, &x, 1).unwrap();
        let sal = attention_saliency(&model, &x, 1).unwrap();
        let argmax = |m: &Array2<f64>| {
            let mut best = (0, 0);
            let mut bv = f64::NEG_INFINITY;
            for ((y, x), &v) in m.indexed_iter() {
                if v > bv {
                    bv = v;
                    best = (y, x);
                }
            }
            best
        };
        assert_eq!(argmax(&raw), argmax(&sal.values));
        assert_eq!(sal.values[argmax(&raw)], 1.0);
    }

    #[test]
    fn residual_saliency_masks_and_normalizes() {
        let model = tiny_model(5);
        let x = toy_image(6);
        let anatomy = Array2::from_elem((8, 8), true);
        let m = residual_saliency(&model, &x, &anatomy).unwrap();
        assert_eq!(m.provenance, Provenance::Residual);
        // Erosion with radius 1 clears the one-pixel border.
        for i in 0..8 {
            assert_eq!(m.values[[0, i]], 0.0);
            assert_eq!(m.values[[7, i]], 0.0);
            assert_eq!(m.values[[i, 0]], 0.0);
            assert_eq!(m.values[[i, 7]], 0.0);
        }
        let max = m.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 1.0);

        let empty = Array2::from_elem((8, 8), false);
        let z = residual_saliency(&model, &x, &empty).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));

        let wrong = Array2::from_elem((4, 4), true);
        assert!(residual_saliency(&model, &x, &wrong).is_err());
    }

    #[test]
    fn inverted_attention_is_one_minus_sigmoid_map() {
        let model = tiny_model(7);
        let x = toy_image(8);
        let inv = inverted_attention_saliency(&model, &x, 1).unwrap();
        assert!(inv.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Recompute the squashed map directly and compare.
        let g = Graph::new();
        let bound = model.bind(&g);
        let xv = g.leaf(image_to_tensor(&x));
        let (stats, features) = bound.encode(&xv).unwrap();
        let cam = grad_cam(&stats, &features, 1).unwrap();
        let a = training_attention(&cam, 8);
        for (got, want) in inv.values.iter().zip(a.value().iter()) {
            assert!((got - (1.0 - want)).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_fixed_examples() {
        let m = map_of(Array2::from_shape_vec((1, 2), vec![0.2, 0.7]).unwrap());
        let s = threshold_fixed(&m, 0.5).unwrap();
        assert_eq!(s.mask.as_slice().unwrap(), &[false, true]);
        assert_eq!(s.threshold, 0.5);

        let all = threshold_fixed(&m, 0.0).unwrap();
        assert!(all.mask.iter().all(|&v| v));

        assert!(threshold_fixed(&m, 1.5).is_err());
        assert!(threshold_fixed(&m, -0.1).is_err());
    }

    #[test]
    fn threshold_fixed_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = map_of(Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0..1.0)));
        let mut last = usize::MAX;
        for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let count = threshold_fixed(&m, tau).unwrap().mask.iter().filter(|&&v| v).count();
            assert!(count <= last);
            last = count;
        }
    }

    #[test]
    fn operating_point_examples() {
        let m = |v: Vec<f64>| map_of(Array2::from_shape_vec((1, 4), v).unwrap());
        let g = |v: Vec<bool>| Array2::from_shape_vec((1, 4), v).unwrap();

        let t = threshold_operating_point(
            &[m(vec![0.9, 0.6, 0.4, 0.1])],
            &[g(vec![true, true, false, false])],
        )
        .unwrap();
        assert_eq!(t, 0.6);

        let t = threshold_operating_point(
            &[m(vec![0.9, 0.2, 0.6, 0.1])],
            &[g(vec![true, false, false, false])],
        )
        .unwrap();
        assert_eq!(t, 0.9);

        assert!(threshold_operating_point(&[], &[]).is_err());
        // Single-class pooled labels are rejected.
        assert!(threshold_operating_point(
            &[m(vec![0.1, 0.2, 0.3, 0.4])],
            &[g(vec![false, false, false, false])]
        )
        .is_err());
    }

    #[test]
    fn percentile_examples() {
        let constant = map_of(Array2::from_elem((3, 3), 0.4));
        for q in [50.0, 85.0, 95.0] {
            assert_eq!(threshold_percentile(&[constant.clone()], q).unwrap(), 0.4);
        }

        // Uniform ramp of 100 values 0.00..0.99: nearest-rank p90 is the
        // 90th smallest, 0.89.
        let ramp = map_of(Array2::from_shape_fn((10, 10), |(y, x)| {
            (y * 10 + x) as f64 / 100.0
        }));
        let t = threshold_percentile(&[ramp], 90.0).unwrap();
        assert!((t - 0.89).abs() < 1e-12, "{t}");

        let a = map_of(Array2::from_elem((2, 2), 0.4));
        let b = map_of(Array2::from_elem((2, 2), 0.6));
        assert!((threshold_percentile(&[a, b], 95.0).unwrap() - 0.5).abs() < 1e-12);

        assert!(threshold_percentile(&[], 95.0).is_err());
        let c = map_of(Array2::from_elem((2, 2), 0.4));
        assert!(threshold_percentile(&[c.clone()], 0.0).is_err());
        assert!(threshold_percentile(&[c], 100.0).is_err());
    }
}
