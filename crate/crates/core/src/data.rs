//! Synthetic benchmark generation, dataset IO and mask morphology.
//!
//! Normal images are smoothed random fields inside a disk-shaped "anatomy"
//! on a black background; anomalous validation/test images add 1-3
//! intensity-shifted elliptical blobs with exact ground-truth masks. Pixel
//! values are quantized to 16-bit depth at generation time, so exporting to
//! PNG and loading back reproduces samples bit for bit.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Image = Array2<f64>;
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One 2-d slice with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Absent for training samples (normals only).
    pub anomaly_mask: Option<Mask>,
    pub scan_id: String,
    pub split: Split,
}

/// Geometry and texture parameters for the synthetic benchmark. Pixel-unit
/// defaults target `image_size = 64`; scale them when changing the size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub train_scans: usize,
    pub val_scans: usize,
    pub test_scans: usize,
    pub slices_per_scan: usize,
    /// Inclusive range for the number of blobs per anomalous image.
    pub anomaly_count: (usize, usize),
    /// Ellipse semi-axis range in pixels.
    pub anomaly_radius: (f64, f64),
    /// Additive intensity shift range for blob pixels.
    pub intensity_shift: (f64, f64),
    /// Multiplier range for the texture amplitude inside blobs. 1 keeps the
    /// background texture; values below 1 make blobs locally smoother than
    /// their surroundings, turning them into structural rather than purely
    /// intensity anomalies.
    pub texture_damp: (f64, f64),
    /// Gaussian blur sigma (pixels) of the background texture.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            train_scans: 20,
            val_scans: 5,
            test_scans: 10,
            slices_per_scan: 10,
            anomaly_count: (1, 3),
            anomaly_radius: (4.0, 9.0),
            intensity_shift: (0.25, 0.45),
            texture_damp: (1.0, 1.0),
            smoothness: 4.0,
            seed: 7,
        }
    }
}

/// Anatomy disk radius as a fraction of the image size.
const ANATOMY_RADIUS_FRAC: f64 = 0.42;
/// Background texture: intensity = MID + SCALE * standardized field, clamped.
const TEXTURE_MID: f64 = 0.45;
const TEXTURE_SCALE: f64 = 0.12;
const TEXTURE_CLAMP: (f64, f64) = (0.05, 0.85);
/// Pixels above this intensity count as anatomy (background is exactly 0).
pub const ANATOMY_THRESHOLD: f64 = 0.01;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.image_size < 8 {
            return err(format!("image_size {} too small", self.image_size));
        }
        if self.slices_per_scan == 0 {
            return err("slices_per_scan must be positive".to_string());
        }
        if self.val_scans == 0 && self.test_scans == 0 {
            return err("need at least one evaluation scan".to_string());
        }
        if self.anomaly_count.0 > self.anomaly_count.1 || self.anomaly_count.0 == 0 {
            return err(format!("bad anomaly_count range {:?}", self.anomaly_count));
        }
        if self.anomaly_radius.0 < 1.0 || self.anomaly_radius.0 > self.anomaly_radius.1 {
            return err(format!("bad anomaly_radius range {:?}", self.anomaly_radius));
        }
        if self.intensity_shift.0 > self.intensity_shift.1
            || self.intensity_shift.1 > 1.0
            || self.intensity_shift.0 <= 0.0
        {
            return err(format!(
                "bad intensity_shift range {:?}",
                self.intensity_shift
            ));
        }
        if self.texture_damp.0 < 0.0
            || self.texture_damp.0 > self.texture_damp.1
            || self.texture_damp.1 > 1.0
        {
            return err(format!("bad texture_damp range {:?}", self.texture_damp));
        }
        if self.smoothness <= 0.0 {
            return err("smoothness must be positive".to_string());
        }
        let anatomy_r = ANATOMY_RADIUS_FRAC * self.image_size as f64;
        if self.anomaly_radius.1 + 1.0 >= anatomy_r {
            return err(format!(
                "anomaly radius {} does not fit inside anatomy radius {anatomy_r:.1}",
                self.anomaly_radius.1
            ));
        }
        Ok(())
    }
}

/// Quantize to the value a 16-bit PNG round trip would produce.
fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with clamp-to-edge boundary handling.
fn gaussian_blur(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (h, w) = field.dim();
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;

    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * field[[y, sx]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * rows[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn standardize(field: &mut Array2<f64>) {
    let n = field.len() as f64;
    let mean = field.sum() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    field.mapv_inplace(|v| (v - mean) / std);
}

fn noise_field(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |_| rng.gen::<f64>() - 0.5)
}

/// Smooth standardized texture from a dedicated RNG stream.
fn textured_field(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut f = gaussian_blur(&noise_field(size, rng), sigma);
    standardize(&mut f);
    f
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    shift: f64,
    damp: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn sample_ellipses(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let size = cfg.image_size as f64;
    let center = (size - 1.0) / 2.0;
    let anatomy_r = ANATOMY_RADIUS_FRAC * size;
    let (lo_n, hi_n) = cfg.anomaly_count;
    let n = rng.gen_range(lo_n..=hi_n);
    (0..n)
        .map(|_| {
            let a = rng.gen_range(cfg.anomaly_radius.0..=cfg.anomaly_radius.1);
            let b = rng.gen_range(cfg.anomaly_radius.0..=cfg.anomaly_radius.1);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            // Uniform placement in the disk that keeps the blob fully inside
            // the anatomy (margin = larger semi-axis + 1 px).
            let max_d = anatomy_r - a.max(b) - 1.0;
            let d = max_d * rng.gen::<f64>().sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let shift = rng.gen_range(cfg.intensity_shift.0..=cfg.intensity_shift.1);
            let damp = rng.gen_range(cfg.texture_damp.0..=cfg.texture_damp.1);
            Ellipse {
                cy: center + d * phi.sin(),
                cx: center + d * phi.cos(),
                a,
                b,
                theta,
                shift,
                damp,
            }
        })
        .collect()
}

/// Stable per-sample stream ids: scan texture, slice texture, anomaly layout.
fn stream_ids(split: Split, scan: usize, slice: usize) -> (u64, u64, u64) {
    let split_tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    let base = (split_tag << 40) | ((scan as u64) << 20) | slice as u64;
    (
        (split_tag << 40) | ((scan as u64) << 20) | 0xFFFFF,
        base,
        base | (1 << 60),
    )
}

fn render_sample(cfg: &SynthConfig, split: Split, scan: usize, slice: usize) -> Sample {
    let size = cfg.image_size;
    let center = (size as f64 - 1.0) / 2.0;
    let anatomy_r = ANATOMY_RADIUS_FRAC * size as f64;

    let (scan_stream, slice_stream, anomaly_stream) = stream_ids(split, scan, slice);
    let scan_field = textured_field(size, cfg.smoothness, &mut stream_rng(cfg.seed, scan_stream));
    let slice_field =
        textured_field(size, cfg.smoothness, &mut stream_rng(cfg.seed, slice_stream));
    let mut field = &scan_field * 0.7 + &slice_field * 0.3;
    standardize(&mut field);

    let ellipses = if split == Split::Train {
        Vec::new()
    } else {
        sample_ellipses(cfg, &mut stream_rng(cfg.seed, anomaly_stream))
    };

    let mut image = Array2::<f64>::zeros((size, size));
    let mut mask = Array2::<bool>::from_elem((size, size), false);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            if dy * dy + dx * dx > anatomy_r * anatomy_r {
                continue;
            }
            let mut damp = 1.0;
            let mut shift = 0.0;
            for e in &ellipses {
                if e.contains(y as f64, x as f64) {
                    damp = f64::min(damp, e.damp);
                    shift += e.shift;
                    mask[[y, x]] = true;
                }
            }
            let v = (TEXTURE_MID + TEXTURE_SCALE * damp * field[[y, x]])
                .clamp(TEXTURE_CLAMP.0, TEXTURE_CLAMP.1)
                + shift;
            image[[y, x]] = quantize16(v);
        }
    }

    Sample {
        image,
        anomaly_mask: if split == Split::Train { None } else { Some(mask) },
        scan_id: format!("{}_{scan:03}", split.name()),
        split,
    }
}

/// Deterministic synthetic dataset: train scans hold only normal slices,
/// val/test slices each carry blob anomalies with exact masks.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (split, scans) in [
        (Split::Train, cfg.train_scans),
        (Split::Val, cfg.val_scans),
        (Split::Test, cfg.test_scans),
    ] {
        for scan in 0..scans {
            for slice in 0..cfg.slices_per_scan {
                jobs.push((split, scan, slice));
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(split, scan, slice)| render_sample(cfg, split, scan, slice))
        .collect())
}

/// Keeps every train sample; keeps a val/test sample iff its anomaly-pixel
/// fraction is at least `min_fraction`.
pub fn filter_small_anomalies(samples: Vec<Sample>, min_fraction: f64) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| {
            if s.split == Split::Train {
                return true;
            }
            let fraction = match &s.anomaly_mask {
                None => 0.0,
                Some(m) => {
                    m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
                }
            };
            fraction >= min_fraction
        })
        .collect()
}

/// Morphological erosion by a disk structuring element; out-of-frame pixels
/// count as background, so radius 1 strips the image border.
pub fn erode_mask(mask: &Mask, radius_px: usize) -> Mask {
    if radius_px == 0 {
        return mask.clone();
    }
    let r = radius_px as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        offsets.iter().all(|&(dy, dx)| {
            let ny = y as i64 + dy;
            let nx = x as i64 + dx;
            ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64
                && mask[[ny as usize, nx as usize]]
        })
    })
}

/// Non-background pixels of an image; the synthetic anatomy disk recovered
/// from intensities alone.
pub fn anatomy_mask(image: &Image) -> Mask {
    image.mapv(|v| v > ANATOMY_THRESHOLD)
}

///// Erosion radius used for residual baselines: 3 px at 224 scale.
pub fn default_erosion_radius(image_size: usize) -> usize {
    ((3.0 * image_size as f64 / 224.0).round() as usize).max(1)
}

// ---------------------------------------------------------------------------
// Manifest and image IO
// ---------------------------------------------------------------------------

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    image_path: String,
    mask_path: Option<String>,
    scan_id: String,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    entries: Vec<ManifestEntry>,
}

fn data_err(path: &Path, message: impl Into<String>) -> CoreError {
    CoreError::Data {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes a 16-bit grayscale PNG; values are clamped to [0, 1].
pub fn save_gray16(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dim();
    let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = image[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path).map_err(CoreError::from)
}

/// Writes a 0/255 8-bit grayscale PNG.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255u8 } else { 0 }])
    });
    buf.save(path).map_err(CoreError::from)
}

/// Loads an 8- or 16-bit grayscale PNG, rescaled to [0, 1].
pub fn load_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| data_err(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            }))
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            }))
        }
        _ => Err(data_err(path, "expected an 8- or 16-bit grayscale image")),
    }
}

/// Loads a mask image, binarizing at half intensity.
pub fn load_mask(path: &Path) -> Result<Mask> {
    Ok(load_gray(path)?.mapv(|v| v >= 0.5))
}

fn sample_stem(sample: &Sample, index_in_scan: usize) -> String {
    format!("{}_s{index_in_scan:02}", sample.scan_id)
}

/// Writes images, masks and a `manifest.json` under `dir`; returns the
/// manifest path. Pixel data survives the PNG round trip exactly because
/// generation already quantized to 16-bit depth.
pub fn export_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    if samples.is_empty() {
        return Err(data_err(dir, "refusing to export an empty dataset"));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;

    let mut entries = Vec::with_capacity(samples.len());
    let mut per_scan_index: std::collections::BTreeMap<&str, usize> = Default::default();
    for sample in samples {
        let idx = per_scan_index.entry(sample.scan_id.as_str()).or_insert(0);
        let stem = sample_stem(sample, *idx);
        *idx += 1;

        let image_rel = format!("images/{stem}.png");
        save_gray16(&dir.join(&image_rel), &sample.image)?;
        let mask_rel = match &sample.anomaly_mask {
            Some(mask) => {
                let rel = format!("masks/{stem}.png");
                save_mask_png(&dir.join(&rel), mask)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image_path: image_rel,
            mask_path: mask_rel,
            scan_id: sample.scan_id.clone(),
            split: sample.split,
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a dataset from a manifest; paths resolve relative to the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| data_err(manifest_path, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| data_err(manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(data_err(
            manifest_path,
            format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        ));
    }
    if manifest.entries.is_empty() {
        return Err(data_err(manifest_path, "manifest lists no samples"));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    manifest
        .entries
        .par_iter()
        .map(|entry| {
            let image_path = root.join(&entry.image_path);
            let image = load_gray(&image_path)?;
            let anomaly_mask = match &entry.mask_path {
                Some(rel) => {
                    let mask_path = root.join(rel);
                    let mask = load_mask(&mask_path)?;
                    if mask.dim() != image.dim() {
                        return Err(data_err(
                            &mask_path,
                            format!(
                                "mask size {:?} does not match image size {:?}",
                                mask.dim(),
                                image.dim()
                            ),
                        ));
                    }
                    Some(mask)
                }
                None => None,
            };
            Ok(Sample {
                image,
                anomaly_mask,
                scan_id: entry.scan_id.clone(),
                split: entry.split,
            })
        })
        .collect()
}

/// Scan ids per split must not overlap.
pub fn check_split_disjointness(samples: &[Sample]) -> Result<()> {
    let mut seen: std::collections::BTreeMap<&str, Split> = Default::default();
    for s in samples {
        if let Some(&prev) = seen.get(s.scan_id.as_str()) {
            if prev != s.split {
                return Err(CoreError::Domain {
                    context: "split_disjointness",
                    message: format!(
                        "scan {} appears in both {} and {}",
                        s.scan_id,
                        prev.name(),
                        s.split.name()
                    ),
                });
            }
        } else {
            seen.insert(s.scan_id.as_str(), s.split);
        }
    }
    Ok(())
}

/// Distinct scan ids in stable order.
pub fn scan_ids(samples: &[Sample]) -> Vec<String> {
    let set: BTreeSet<&str> = samples.iter().map(|s| s.scan_id.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 32,
            train_scans: 2,
            val_scans: 1,
            test_scans: 2,
            slices_per_scan: 3,
            anomaly_radius: (2.0, 4.5),
            smoothness: 2.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), (2 + 1 + 2) * 3);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_cfg();
        let other = SynthConfig {
            seed: cfg.seed + 1,
            ..cfg.clone()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&other).unwrap();
        assert_ne!(a[0].image, b[0].image);
    }

    #[test]
    fn train_samples_are_normal() {
        let samples = generate_synthetic(&small_cfg()).unwrap();
        for s in &samples {
            match s.split {
                Split::Train => assert!(s.anomaly_mask.is_none()),
                _ => {
                    let m = s.anomaly_mask.as_ref().unwrap();
                    assert!(m.iter().any(|&b| b), "{} has an empty mask", s.scan_id);
                }
            }
        }
        check_split_disjointness(&samples).unwrap();
    }

    #[test]
    fn anatomy_is_recoverable_from_intensity() {
        let samples = generate_synthetic(&small_cfg()).unwrap();
        let s = &samples[0];
        let anatomy = anatomy_mask(&s.image);
        let size = s.image.dim().0;
        let center = (size as f64 - 1.0) / 2.0;
        let r = ANATOMY_RADIUS_FRAC * size as f64;
        for y in 0..size {
            for x in 0..size {
                let inside =
                    (y as f64 - center).powi(2) + (x as f64 - center).powi(2) <= r * r;
                assert_eq!(anatomy[[y, x]], inside, "pixel ({y},{x})");
                if !inside {
                    assert_eq!(s.image[[y, x]], 0.0);
                }
            }
        }
    }

    #[test]
    fn pixels_are_quantized_to_16bit() {
        let samples = generate_synthetic(&small_cfg()).unwrap();
        for s in &samples {
            for &v in s.image.iter() {
                assert_eq!(v, quantize16(v));
            }
        }
    }

    #[test]
    fn blob_area_fraction_is_sane() {
        let cfg = SynthConfig {
            val_scans: 0,
            test_scans: 10,
            slices_per_scan: 10,
            train_scans: 0,
            ..SynthConfig::default()
        };
        let samples = generate_synthetic(&cfg).unwrap();
        assert_eq!(samples.len(), 100);
        let mean_fraction: f64 = samples
            .iter()
            .map(|s| {
                let m = s.anomaly_mask.as_ref().unwrap();
                m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
            })
            .sum::<f64>()
            / samples.len() as f64;
        assert!(
            (0.005..=0.25).contains(&mean_fraction),
            "mean anomaly fraction {mean_fraction}"
        );
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let cfg = SynthConfig {
            image_size: 16,
            anomaly_radius: (4.0, 9.0),
            ..small_cfg()
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn round_trip_through_png_is_exact() {
        let dir = TempDir::new().unwrap();
        let samples = generate_synthetic(&small_cfg()).unwrap();
        let manifest = export_dataset(&samples, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn load_rejects_empty_manifest() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"version":1,"entries":[]}"#).unwrap();
        assert!(matches!(load_dataset(&path), Err(CoreError::Data { .. })));
    }

    #[test]
    fn load_rejects_unknown_version() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"version":2,"entries":[]}"#).unwrap();
        assert!(matches!(load_dataset(&path), Err(CoreError::Data { .. })));
    }

    #[test]
    fn eight_bit_images_rescale_to_unit() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("gray8.png");
        let buf =
            image::ImageBuffer::from_fn(2, 1, |x, _| image::Luma([if x == 0 { 255u8 } else { 0 }]));
        buf.save(&path).unwrap();
        let img = load_gray(&path).unwrap();
        assert_eq!(img[[0, 0]], 1.0);
        assert_eq!(img[[0, 1]], 0.0);
    }

    #[test]
    fn filter_keeps_boundary_fraction() {
        let size = 64;
        let make = |n_pixels: usize, split: Split| {
            let mut mask = Array2::from_elem((size, size), false);
            for i in 0..n_pixels {
                mask[[0, i]] = true;
            }
            Sample {
                image: Array2::zeros((size, size)),
                anomaly_mask: Some(mask),
                scan_id: format!("s{n_pixels}"),
                split,
            }
        };
        // 1 / 4096 ~ 2.4e-4 >= 1e-4: a single anomalous pixel passes.
        let kept = filter_small_anomalies(vec![make(1, Split::Test)], 1e-4);
        assert_eq!(kept.len(), 1);
        // Zero anomalous pixels: removed from test, kept in train.
        let kept = filter_small_anomalies(vec![make(0, Split::Test)], 1e-4);
        assert!(kept.is_empty());
        let kept = filter_small_anomalies(vec![make(0, Split::Train)], 1e-4);
        assert_eq!(kept.len(), 1);
        // Fraction exactly at the cutoff is kept.
        let kept = filter_small_anomalies(vec![make(41, Split::Val)], 41.0 / 4096.0);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn erosion_radius_zero_is_identity() {
        let mask = Array2::from_shape_fn((5, 5), |(y, x)| (y + x) % 2 == 0);
        assert_eq!(erode_mask(&mask, 0), mask);
    }

    #[test]
    fn erosion_strips_border() {
        let mask = Array2::from_elem((6, 6), true);
        let eroded = erode_mask(&mask, 1);
        for y in 0..6 {
            for x in 0..6 {
                let interior = y >= 1 && y <= 4 && x >= 1 && x <= 4;
                assert_eq!(eroded[[y, x]], interior, "pixel ({y},{x})");
            }
        }
    }

    fn disk(size: usize, r: f64) -> Mask {
        let c = (size as f64 - 1.0) / 2.0;
        Array2::from_shape_fn((size, size), |(y, x)| {
            (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r
        })
    }

    #[test]
    fn erosion_of_disk_shrinks_radius() {
        let eroded = erode_mask(&disk(25, 10.0), 3);
        let outer = disk(25, 8.0);
        let inner = disk(25, 6.0);
        for y in 0..25 {
            for x in 0..25 {
                if eroded[[y, x]] {
                    assert!(outer[[y, x]], "eroded not within radius 7+1 at ({y},{x})");
                }
                if inner[[y, x]] {
                    assert!(eroded[[y, x]], "radius 6 not within eroded at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn erosion_is_anti_extensive_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>() < 0.7);
        let e1 = erode_mask(&mask, 1);
        let e2 = erode_mask(&mask, 2);
        for y in 0..16 {
            for x in 0..16 {
                assert!(!e1[[y, x]] || mask[[y, x]]);
                assert!(!e2[[y, x]] || e1[[y, x]]);
            }
        }
    }

    #[test]
    fn default_erosion_radius_scales() {
        assert_eq!(default_erosion_radius(224), 3);
        assert_eq!(default_erosion_radius(64), 1);
        assert_eq!(default_erosion_radius(8), 1);
    }
}
