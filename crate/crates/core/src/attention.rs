//! Attention maps from encoder gradients.
//!
//! The map for one image is a class-activation map of the latent summary
//! target `sum_d mu[d]` with respect to a chosen encoder feature layer:
//! channel weights are the spatial means of the target's gradient, and the
//! raw map is the channel-weighted sum of the features. Because the weights
//! are themselves graph values, losses built on these maps differentiate
//! through the gradient (double backpropagation).
//!
//! Training squashes the raw map with a logistic before upsampling so the
//! size constraint sees values in (0, 1). Inference rescales the raw map to
//! [0, 1] by min-max instead; see the saliency functions in `inference`.

use crate::autodiff::{bilinear_upsample, grad, Tensor, Var};
use crate::error::{CoreError, Result};
use crate::model::{FeatureStack, LatentStats};

/// Resolves `depth` (1 = first, highest-resolution block) to a feature index.
fn resolve_depth(features: &FeatureStack, depth: usize) -> Result<usize> {
    let n = features.blocks.len();
    if depth == 0 || depth > n {
        return Err(CoreError::Config(format!(
            "cam_depth must be in 1..={n}, got {depth}"
        )));
    }
    Ok(depth - 1)
}

fn weighted_cam(target: &Var, f: &Var) -> Var {
    let s = f.shape();
    let (h, w) = (s[1], s[2]);
    let g = grad(target, &[f]).pop().expect("one gradient requested");
    let alpha = g.sum_spatial().scale(1.0 / (h * w) as f64);
    alpha.broadcast_spatial(h, w).mul(f).sum_axis0()
}

/// Raw (pre-squash) attention map `[h, w]` at the feature layer selected by
/// `depth`, for the summed-latent target.
pub fn grad_cam(stats: &LatentStats, features: &FeatureStack, depth: usize) -> Result<Var> {
    let idx = resolve_depth(features, depth)?;
    let target = stats.mu.sum_all();
    Ok(weighted_cam(&target, &features.blocks[idx]))
}

/// Average of the per-latent-dimension raw maps, taken before any
/// squashing. Equals [`grad_cam`] only when the latent has one dimension.
pub fn grad_cam_disentangled(
    stats: &LatentStats,
    features: &FeatureStack,
    depth: usize,
) -> Result<Var> {
    let idx = resolve_depth(features, depth)?;
    let f = &features.blocks[idx];
    let d = stats.mu.shape()[0];
    let mut acc: Option<Var> = None;
    for i in 0..d {
        let cam = weighted_cam(&stats.mu.take(i), f);
        acc = Some(match acc {
            None => cam,
            Some(a) => a.add(&cam),
        });
    }
    Ok(acc.expect("latent_dim >= 1").scale(1.0 / d as f64))
}

/// Logistic squash followed by bilinear upsampling to `[out_size, out_size]`;
/// this is the map the size constraint acts on during training.
pub fn training_attention(cam: &Var, out_size: usize) -> Var {
    let s = cam.shape();
    let (h, w) = (s[0], s[1]);
    bilinear_upsample(&cam.sigmoid().reshape(&[1, h, w]), out_size, out_size)
        .reshape(&[out_size, out_size])
}

/// Rescales to [0, 1] by the observed range; a constant map becomes zeros.
pub fn minmax_normalize(t: &Tensor) -> Tensor {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in t.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Tensor::zeros(t.raw_dim());
    }
    t.mapv(|v| (v - lo) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, GraphExt};
    use crate::constraints::barrier_penalty;
    use crate::model::{reparameterize, vae_loss, ModelConfig, Vae};
    use ndarray::{ArrayD, IxDyn};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    fn tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0f64, 1.0);
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng))
    }

    /// Single-channel mean-pool encoder: the channel weight is exactly
    /// 1 / (h * w) and the map is the feature scaled by it.
    #[test]
    fn mean_pool_encoder_oracle() {
        let g = Graph::new();
        let f = g.leaf(tensor(&[1, 3, 3], 1));
        let n = 9.0;
        let stats = LatentStats {
            mu: f.sum_all().scale(1.0 / n).reshape(&[1]),
            logvar: g.leaf(ArrayD::zeros(IxDyn(&[1]))),
        };
        let features = FeatureStack {
            blocks: vec![f.clone()],
        };
        let cam = grad_cam(&stats, &features, 1).unwrap();
        assert_eq!(cam.shape(), vec![3, 3]);
        for (got, want) in cam.value().iter().zip(f.value().iter()) {
            assert!((got - want / n).abs() < 1e-14);
        }
    }

    /// Two mean-pool dimensions over separate channels: the summed target
    /// weights both channels, the per-dimension average halves the scale.
    #[test]
    fn disentangled_differs_from_summed_target()  {
        let g = Graph::new();
        let f = g.leaf(tensor(&[2, 2, 2], 2));
        let n = 4.0;
        let mu = f
            .sum_spatial()
            .scale(1.0 / n); // [2]: per-channel spatial means
        let stats = LatentStats {
            mu,
            logvar: g.leaf(ArrayD::zeros(IxDyn(&[2]))),
        };
        let features = FeatureStack {
            blocks: vec![f.clone()],
        };

        let plain = grad_cam(&stats, &features, 1).unwrap();
        let dis = grad_cam_disentangled(&stats, &features, 1).unwrap();

        let fv = f.value();
        for y in 0..2 {
            for x in 0..2 {
                let both = (fv[[0, y, x]] + fv[[1, y, x]]) / n;
                assert!((plain.value()[[y, x]] - both).abs() < 1e-14);
                assert!((dis.value()[[y, x]] - both / 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn disentangled_equals_plain_for_one_dimension() {
        let g = Graph::new();
        let f = g.leaf(tensor(&[1, 3, 3], 3));
        let stats = LatentStats {
            mu: f.sum_all().scale(1.0 / 9.0).reshape(&[1]),
            logvar: g.leaf(ArrayD::zeros(IxDyn(&[1]))),
        };
        let features = FeatureStack {
            blocks: vec![f.clone()],
        };
        let a = grad_cam(&stats, &features, 1).unwrap();
        let b = grad_cam_disentangled(&stats, &features, 1).unwrap();
        assert_eq!(*a.value(), *b.value());
    }

    #[test]
    fn depth_selects_layer_and_is_validated() {
        let cfg = ModelConfig {
            latent_dim: 4,
            input_size: 8,
            encoder_widths: vec![4, 8],
            ..ModelConfig::default()
        };
        let model = Vae::init(cfg, 4).unwrap();
        let g = Graph::new();
        let bound = model.bind(&g);
        let x = g.leaf(tensor(&[1, 8, 8], 5).mapv(|v| 0.5 + 0.4 * v));
        let (stats, features) = bound.encode(&x).unwrap();

        assert_eq!(grad_cam(&stats, &features, 1).unwrap().shape(), vec![4, 4]);
        assert_eq!(grad_cam(&stats, &features, 2).unwrap().shape(), vec![2, 2]);
        assert!(matches!(
            grad_cam(&stats, &features, 0),
            Err(CoreError::Config(_))
        ));
        assert!(matches!(
            grad_cam(&stats, &features, 3),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn training_attention_shape_and_range() {
        let g = Graph::new();
        let cam = g.leaf(tensor(&[2, 2], 6).mapv(|v| 3.0 * v));
        let a = training_attention(&cam, 8);
        assert_eq!(a.shape(), vec![8, 8]);
        assert!(a.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Corner pixels keep the squashed corner values exactly.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert!((a.value()[[0, 0]] - sig(cam.value()[[0, 0]])).abs() < 1e-12);
        assert!((a.value()[[7, 7]] - sig(cam.value()[[1, 1]])).abs() < 1e-12);
    }

    #[test]
    fn minmax_normalize_behaviour() {
        let t = ArrayD::from_shape_vec(IxDyn(&[4]), vec![2.0, 4.0, 3.0, 2.0]).unwrap();
        let n = minmax_normalize(&t);
        assert_eq!(
            n.as_slice().unwrap(),
            &[0.0, 1.0, 0.5, 0.0]
        );
        let c = ArrayD::from_elem(IxDyn(&[3, 3]), 7.0);
        assert!(minmax_normalize(&c).iter().all(|&v| v == 0.0));
    }

    /// The full training objective (reconstruction + KL + barrier on the
    /// attention coverage) must have parameter gradients that survive the
    /// inner gradient computation. Checked by central finite differences.
    #[test]
    fn constrained_objective_gradients_match_finite_difference() {
        let cfg = ModelConfig {
            latent_dim: 4,
            input_size: 8,
            encoder_widths: vec![4, 8],
            ..ModelConfig::default()
        };
        let model = Vae::init(cfg.clone(), 7).unwrap();
        let x = tensor(&[1, 8, 8], 8).mapv(|v| 0.5 + 0.4 * v);
        let noise = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let normal = Normal::new(0.0, 1.0).unwrap();
            ArrayD::from_shape_fn(IxDyn(&[4]), |_| normal.sample(&mut rng))
        };

        let objective = |m: &Vae| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
            let g = Graph::new();
            let bound = m.bind(&g);
            let xv = g.leaf(x.clone());
            let (stats, features) = bound.encode(&xv).unwrap();
            let z = reparameterize(&stats, &noise).unwrap();
            let xhat = bound.decode(&z).unwrap();
            let vae = vae_loss(&xv, &xhat, &stats, &cfg).unwrap();
            let cam = grad_cam(&stats, &features, 1).unwrap();
            let a = training_attention(&cam, 8);
            let penalty = barrier_penalty(&a, 0.2, 20.0);
            let total = vae.add(&penalty.scale(10.0));

            let names: Vec<String> = bound.param_vars().keys().cloned().collect();
            let vars: Vec<&Var> = names.iter().map(|n| bound.param(n)).collect();
            let grads = grad(&total, &vars);
            let map = names
                .into_iter()
                .zip(grads.into_iter().map(|v| (*v.value()).clone()))
                .collect();
            (total.scalar(), Some(map))
        };

        let (_, analytic) = objective(&model);
        let analytic = analytic.unwrap();

        let eval = |m: &Vae| -> f64 {
            let g = Graph::new();
            let bound = m.bind(&g);
            let xv = g.leaf(x.clone());
            let (stats, features) = bound.encode(&xv).unwrap();
            let z = reparameterize(&stats, &noise).unwrap();
            let xhat = bound.decode(&z).unwrap();
            let vae = vae_loss(&xv, &xhat, &stats, &cfg).unwrap();
            let cam = grad_cam(&stats, &features, 1).unwrap();
            let a = training_attention(&cam, 8);
            let penalty = barrier_penalty(&a, 0.2, 20.0);
            vae.add(&penalty.scale(10.0)).scalar()
        };

        let eps = 1e-5;
        for name in ["enc0.conv1.w", "enc1.conv2.w", "enc.mu.w", "enc.logvar.b"] {
            let len = model.params()[name].len();
            for probe in 0..3 {
                let k = (probe * 17 + 3) % len;
                let mut plus = model.clone();
                *plus.params_mut().get_mut(name).unwrap().iter_mut().nth(k).unwrap() += eps;
                let mut minus = model.clone();
                *minus.params_mut().get_mut(name).unwrap().iter_mut().nth(k).unwrap() -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = analytic[name].iter().copied().nth(k).unwrap();
                assert!(
                    (an - fd).abs() <= 1e-3 * (1.0 + an.abs().max(fd.abs())),
                    "{name}[{k}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
