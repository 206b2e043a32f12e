//! Variational autoencoder: residual downsampling encoder with a dense
//! latent head, a mirrored interpolation+convolution decoder, and the
//! two-term loss (reconstruction + beta * KL).
//!
//! Parameters live in a [`Vae`] as plain tensors keyed by stable names. A
//! forward pass binds them as leaves on a caller-supplied graph
//! ([`Vae::bind`]), so the same code path serves plain evaluation, training
//! gradients and the second-order attention objective.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear_upsample, conv2d, Graph, GraphExt, Tensor, Var};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    Bce,
    L2,
    Ssim,
}

impl ReconLoss {
    pub const ALL: [ReconLoss; 3] = [ReconLoss::Bce, ReconLoss::L2, ReconLoss::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            ReconLoss::Bce => "bce",
            ReconLoss::L2 => "l2",
            ReconLoss::Ssim => "ssim",
        }
    }
}

/// Decoder upsampling operator, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub input_size: usize,
    /// Channel widths of the encoder blocks; each block halves the spatial
    /// size. The decoder mirrors these widths in reverse.
    pub encoder_widths: Vec<usize>,
    pub recon_loss: ReconLoss,
    /// KL weight in the two-term loss.
    pub beta: f64,
    pub upsample: UpsampleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            input_size: 64,
            encoder_widths: vec![16, 32, 64, 128],
            recon_loss: ReconLoss::Bce,
            beta: 1.0,
            upsample: UpsampleKind::Bilinear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.latent_dim == 0 {
            return err("latent_dim must be at least 1".to_string());
        }
        if self.beta < 0.0 {
            return err(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.encoder_widths.len() < 2 {
            return err("need at least 2 encoder blocks".to_string());
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return err("encoder widths must be positive".to_string());
        }
        let down = 1usize << self.encoder_widths.len();
        if self.input_size % down != 0 || self.input_size / down == 0 {
            return err(format!(
                "input_size {} must be a positive multiple of 2^{} (block count)",
                self.input_size,
                self.encoder_widths.len()
            ));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Spatial side of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.encoder_widths.len()
    }

    /// Flattened bottleneck length feeding the latent heads.
    pub fn bottleneck_len(&self) -> usize {
        let s = self.bottleneck_size();
        self.encoder_widths[self.n_blocks() - 1] * s * s
    }
}

/// Spatial side of each encoder block output.
pub fn feature_sizes(cfg: &ModelConfig) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(cfg.n_blocks());
    let mut s = cfg.input_size;
    for _ in 0..cfg.n_blocks() {
        s /= 2;
        sizes.push(s);
    }
    sizes
}

fn decoder_widths(encoder_widths: &[usize]) -> Vec<usize> {
    let n = encoder_widths.len();
    let mut out: Vec<usize> = (0..n - 1).rev().map(|i| encoder_widths[i]).collect();
    out.push((encoder_widths[0] / 2).max(4));
    out
}

/// Parameter names and shapes in construction order (the order RNG draws
/// happen during initialization).
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push_conv = |name: &str, cout: usize, cin: usize, k: usize| {
        out.push((format!("{name}.w"), vec![cout, cin, k, k]));
        out.push((format!("{name}.b"), vec![cout]));
    };

    let mut cin = 1;
    for (i, &w) in cfg.encoder_widths.iter().enumerate() {
        push_conv(&format!("enc{i}.conv1"), w, cin, 3);
        push_conv(&format!("enc{i}.conv2"), w, w, 3);
        push_conv(&format!("enc{i}.skip"), w, cin, 1);
        cin = w;
    }

    let n = cfg.bottleneck_len();
    let d = cfg.latent_dim;
    out.push(("enc.mu.w".to_string(), vec![n, d]));
    out.push(("enc.mu.b".to_string(), vec![d]));
    out.push(("enc.logvar.w".to_string(), vec![n, d]));
    out.push(("enc.logvar.b".to_string(), vec![d]));

    out.push(("dec.fc.w".to_string(), vec![d, n]));
    out.push(("dec.fc.b".to_string(), vec![n]));

    let dec = decoder_widths(&cfg.encoder_widths);
    let mut cin = *cfg.encoder_widths.last().expect("validated");
    let mut push_conv = |name: &str, cout: usize, cin: usize, k: usize| {
        out.push((format!("{name}.w"), vec![cout, cin, k, k]));
        out.push((format!("{name}.b"), vec![cout]));
    };
    for (i, &w) in dec.iter().enumerate() {
        push_conv(&format!("dec{i}.conv1"), w, cin, 3);
        push_conv(&format!("dec{i}.conv2"), w, w, 3);
        push_conv(&format!("dec{i}.skip"), w, cin, 1);
        cin = w;
    }
    push_conv("dec.out", 1, cin, 3);
    out
}

/// Model parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Vae {
    /// He-style initialization for convolutions, scaled-normal for dense
    /// layers, zero biases. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Vae> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in parameter_shapes(&config) {
            let tensor = match shape.len() {
                1 => ArrayD::zeros(IxDyn(&shape)),
                2 => {
                    let std = (1.0 / shape[0] as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    ArrayD::from_shape_fn(IxDyn(&shape), |_| dist.sample(&mut rng))
                }
                4 => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    ArrayD::from_shape_fn(IxDyn(&shape), |_| dist.sample(&mut rng))
                }
                r => unreachable!("unexpected parameter rank {r}"),
            };
            params.insert(name, tensor);
        }
        Ok(Vae { config, params })
    }

    /// Rebuilds a model from stored tensors, checking the parameter set
    /// matches the configuration exactly.
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Vae> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(CoreError::Config(format!(
                "parameter count mismatch: expected {}, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(CoreError::Config(format!("missing parameter {name}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CoreError::Shape {
                        context: "model parameters",
                        expected: shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        Ok(Vae { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Loads every parameter as a leaf on `graph`.
    pub fn bind(&self, graph: &Rc<Graph>) -> BoundVae<'_> {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone())))
            .collect();
        BoundVae {
            config: &self.config,
            vars,
        }
    }
}

/// Posterior statistics of one input, as graph variables of shape `[d]`.
pub struct LatentStats {
    pub mu: Var,
    pub logvar: Var,
}

/// Post-activation output of every encoder block, shallow to deep.
pub struct FeatureStack {
    pub blocks: Vec<Var>,
}

/// A model's parameters materialized on one graph.
pub struct BoundVae<'a> {
    config: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl BoundVae<'_> {
    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn param(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn conv_block(&self, h: &Var, name: &str, stride: usize) -> Var {
        let w1 = self.param(&format!("{name}.conv1.w"));
        let b1 = self.param(&format!("{name}.conv1.b"));
        let w2 = self.param(&format!("{name}.conv2.w"));
        let b2 = self.param(&format!("{name}.conv2.b"));
        let ws = self.param(&format!("{name}.skip.w"));
        let bs = self.param(&format!("{name}.skip.b"));

        let add_bias = |y: &Var, b: &Var| {
            let s = y.shape();
            y.add(&b.broadcast_spatial(s[1], s[2]))
        };

        let main = add_bias(&conv2d(h, w1, stride, 1), b1).silu();
        let main = add_bias(&conv2d(&main, w2, 1, 1), b2);
        let skip = add_bias(&conv2d(h, ws, stride, 0), bs);
        main.add(&skip).silu()
    }

    /// `[1, size, size] -> (posterior stats, per-block features)`.
    pub fn encode(&self, x: &Var) -> Result<(LatentStats, FeatureStack)> {
        let size = self.config.input_size;
        if x.shape() != [1, size, size] {
            return Err(CoreError::Shape {
                context: "encode",
                expected: vec![1, size, size],
                got: x.shape(),
            });
        }

        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.config.n_blocks());
        for i in 0..self.config.n_blocks() {
            h = self.conv_block(&h, &format!("enc{i}"), 2);
            blocks.push(h.clone());
        }

        let n = self.config.bottleneck_len();
        let d = self.config.latent_dim;
        let flat = h.reshape(&[1, n]);
        let dense = |w: &Var, b: &Var| {
            flat.matmul(w).add(&b.reshape(&[1, d])).reshape(&[d])
        };
        let mu = dense(self.param("enc.mu.w"), self.param("enc.mu.b"));
        let logvar = dense(self.param("enc.logvar.w"), self.param("enc.logvar.b"));
        Ok((LatentStats { mu, logvar }, FeatureStack { blocks }))
    }

    /// `[d] -> [1, size, size]` with values in (0, 1).
    pub fn decode(&self, z: &Var) -> Result<Var> {
        let d = self.config.latent_dim;
        if z.shape() != [d] {
            return Err(CoreError::Shape {
                context: "decode",
                expected: vec![d],
                got: z.shape(),
            });
        }

        let n = self.config.bottleneck_len();
        let s = self.config.bottleneck_size();
        let c0 = *self.config.encoder_widths.last().expect("validated");
        let h = z
            .reshape(&[1, d])
            .matmul(self.param("dec.fc.w"))
            .add(&self.param("dec.fc.b").reshape(&[1, n]))
            .reshape(&[c0, s, s])
            .silu();

        let dec = decoder_widths(&self.config.encoder_widths);
        let mut h = h;
        for i in 0..dec.len() {
            let sh = h.shape();
            let up = bilinear_upsample(&h, 2 * sh[1], 2 * sh[2]);
            h = self.conv_block(&up, &format!("dec{i}"), 1);
        }

        let w = self.param("dec.out.w");
        let b = self.param("dec.out.b");
        let y = conv2d(&h, w, 1, 1);
        let ys = y.shape();
        Ok(y.add(&b.broadcast_spatial(ys[1], ys[2])).sigmoid())
    }
}

/// `z = mu + exp(logvar / 2) * noise` with `noise` entering as a constant.
pub fn reparameterize(stats: &LatentStats, noise: &Tensor) -> Result<Var> {
    if noise.shape() != stats.mu.shape().as_slice() {
        return Err(CoreError::Shape {
            context: "reparameterize",
            expected: stats.mu.shape(),
            got: noise.shape().to_vec(),
        });
    }
    let noise = stats.mu.graph().leaf(noise.clone());
    Ok(stats.mu.add(&stats.logvar.scale(0.5).exp().mul(&noise)))
}

/// `-1/2 sum_d (1 + logvar - mu^2 - exp(logvar))`, non-negative, zero iff
/// the posterior equals the standard-normal prior.
pub fn kl_divergence(stats: &LatentStats) -> Var {
    stats
        .logvar
        .add_const(1.0)
        .sub(&stats.mu.mul(&stats.mu))
        .sub(&stats.logvar.exp())
        .sum_all()
        .scale(-0.5)
}

const BCE_EPS: f64 = 1e-6;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;
const SSIM_WINDOW: usize = 11;

fn bce_loss(x: &Var, xhat: &Var) -> Var {
    let xh = xhat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = x.mul(&xh.log());
    let neg = x.rsub_const(1.0).mul(&xh.rsub_const(1.0).log());
    pos.add(&neg).mean_all().neg()
}

fn l2_loss(x: &Var, xhat: &Var) -> Var {
    let d = x.sub(xhat);
    d.mul(&d).mean_all()
}

/// `1 - mean SSIM` over valid windows, uniform window of side
/// `min(11, h, w)` on the [0, 1] intensity range.
fn ssim_loss(x: &Var, xhat: &Var) -> Var {
    let s = x.shape();
    let k = SSIM_WINDOW.min(s[1]).min(s[2]);
    let kernel = ArrayD::from_elem(IxDyn(&[1, 1, k, k]), 1.0 / (k * k) as f64);
    let kernel = x.graph().leaf(kernel);
    let window_mean = |v: &Var| conv2d(v, &kernel, 1, 0);

    let mx = window_mean(x);
    let my = window_mean(xhat);
    let vx = window_mean(&x.mul(x)).sub(&mx.mul(&mx));
    let vy = window_mean(&xhat.mul(xhat)).sub(&my.mul(&my));
    let cxy = window_mean(&x.mul(xhat)).sub(&mx.mul(&my));

    let num = mx
        .mul(&my)
        .scale(2.0)
        .add_const(SSIM_C1)
        .mul(&cxy.scale(2.0).add_const(SSIM_C2));
    let den = mx
        .mul(&mx)
        .add(&my.mul(&my))
        .add_const(SSIM_C1)
        .mul(&vx.add(&vy).add_const(SSIM_C2));
    num.div(&den).mean_all().rsub_const(1.0)
}

pub fn reconstruction_loss(x: &Var, xhat: &Var, kind: ReconLoss) -> Result<Var> {
    if x.shape() != xhat.shape() {
        return Err(CoreError::Shape {
            context: "reconstruction_loss",
            expected: x.shape(),
            got: xhat.shape(),
        });
    }
    Ok(match kind {
        ReconLoss::Bce => bce_loss(x, xhat),
        ReconLoss::L2 => l2_loss(x, xhat),
        ReconLoss::Ssim => ssim_loss(x, xhat),
    })
}

/// `L_R + beta * KL` for one image.
pub fn vae_loss(x: &Var, xhat: &Var, stats: &LatentStats, cfg: &ModelConfig) -> Result<Var> {
    let recon = reconstruction_loss(x, xhat, cfg.recon_loss)?;
    Ok(recon.add(&kl_divergence(stats).scale(cfg.beta)))
}

/// Image tensor `[1, h, w]` from a 2-d array.
pub fn image_to_tensor(image: &crate::data::Image) -> Tensor {
    let (h, w) = image.dim();
    image
        .view()
        .to_shape(IxDyn(&[1, h, w]))
        .expect("image reshape")
        .to_owned()
}

/// Back to a 2-d array, dropping the channel axis.
pub fn tensor_to_image(t: &Tensor) -> crate::data::Image {
    assert_eq!(t.shape()[0], 1, "expected single-channel tensor");
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.view()
        .to_shape((h, w))
        .expect("image reshape")
        .to_owned()
}
