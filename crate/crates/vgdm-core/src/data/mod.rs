//! Synthetic phantom generation, intensity normalization, dataset splitting
//! and the on-disk dataset layout (`<id>_img.vgdv` + `<id>_msk.vgdv` with a
//! `manifest.csv` of ids and seeds).

mod volume;

pub use volume::{
    read_volume, write_volume, VolumeError, VolumeFormat, VolumeMeta, VGDV_DTYPE_F32, VGDV_MAGIC,
    VGDV_VERSION,
};

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::{Array, Array2, Array3, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("foreground must contain at least 2 pixels, got {0}")]
    TooFewForeground(usize),
    #[error("zero-variance foreground: normalization undefined")]
    ZeroVarianceForeground,
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("train fraction must lie strictly in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("mask values must be 0 or 1, found {0}")]
    BadMaskValue(f32),
    #[error("image contains a non-finite value: {0}")]
    NonFiniteImage(f32),
    #[error("{what}: image shape {image:?} vs mask shape {mask:?}")]
    MismatchedPair {
        what: String,
        image: Vec<usize>,
        mask: Vec<usize>,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error at line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
}

/// One training/eval item.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Multi-channel image, `[C × H × W]`.
    pub image: Array3<f32>,
    /// Binary ground-truth mask, `[H × W]`, values 0/1.
    pub mask: Array2<u8>,
}

impl Sample {
    pub fn validate(&self) -> Result<(), DataError> {
        let (_, h, w) = self.image.dim();
        if self.mask.dim() != (h, w) {
            return Err(DataError::MismatchedPair {
                what: format!("sample '{}'", self.id),
                image: self.image.shape().to_vec(),
                mask: self.mask.shape().to_vec(),
            });
        }
        if let Some(v) = self.image.iter().find(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteImage(*v));
        }
        if let Some(v) = self.mask.iter().find(|v| **v > 1) {
            return Err(DataError::BadMaskValue(*v as f32));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.image.dim().0
    }

    pub fn size(&self) -> usize {
        self.image.dim().1
    }
}

/// Geometry and intensity recipe for synthetic phantoms.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub channels: usize,
    pub tumor_count_range: (usize, usize),
    /// Ellipse semi-axis range in pixels.
    pub radius_range: (f64, f64),
    /// Intensity offset added inside tumors, one per channel.
    pub contrast_per_channel: Vec<f64>,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    /// Defaults for a given image side: 4 channels, 1–3 tumors, radii scaled
    /// to the image and capped below the size/3 validity bound.
    pub fn default_for(size: usize) -> Self {
        let cap = size as f64 / 3.0;
        let r_min = (size as f64 / 16.0).max(1.2).min(cap * 0.9);
        let r_max = (size as f64 / 6.0).max(r_min * 1.3).min(cap * 0.95);
        Self {
            size,
            channels: 4,
            tumor_count_range: (1, 3),
            radius_range: (r_min, r_max),
            contrast_per_channel: vec![1.8, -1.4, 1.6, 2.2],
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::InvalidSpec(m));
        if self.size < 4 {
            return err(format!("size {} too small", self.size));
        }
        if self.channels < 1 {
            return err("channels must be >= 1".into());
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 1.0 && hi < self.size as f64 / 3.0 && lo <= hi) {
            return err(format!(
                "radius_range ({lo}, {hi}) must lie within (1, {})",
                self.size as f64 / 3.0
            ));
        }
        let (tmin, tmax) = self.tumor_count_range;
        if tmin < 1 || tmin > tmax {
            return err(format!("tumor_count_range ({tmin}, {tmax}) invalid"));
        }
        if self.contrast_per_channel.len() != self.channels {
            return err(format!(
                "contrast_per_channel has {} entries for {} channels",
                self.contrast_per_channel.len(),
                self.channels
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return err(format!("noise_sigma {} invalid", self.noise_sigma));
        }
        Ok(())
    }
}

/// Generate one phantom: a disc-shaped "brain" with a smooth per-channel
/// intensity gradient, 1..k elliptical "tumors" with per-channel contrast
/// offsets, additive Gaussian pixel noise, and the tumor union as mask.
/// Deterministic per `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Sample, DataError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let s = spec.size;
    let center = (s as f64 - 1.0) / 2.0;
    let brain_r = 0.45 * s as f64;

    // Channel background recipes.
    let mut base = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let b = rng.gen_range(0.4..0.8);
        let theta = rng.gen_range(0.0..TAU);
        let slope = rng.gen_range(0.2..0.5);
        base.push((b, theta, slope));
    }

    // Tumor geometry, fully inside the brain disc.
    let count = rng.gen_range(spec.tumor_count_range.0..=spec.tumor_count_range.1);
    let mut tumors = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
        let b = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
        let phi = rng.gen_range(0.0..TAU);
        let max_extent = a.max(b);
        let placement_r = (brain_r - max_extent - 1.0).max(0.0);
        let rho = placement_r * rng.gen_range(0.0f64..1.0).sqrt();
        let ang = rng.gen_range(0.0..TAU);
        let cy = center + rho * ang.sin();
        let cx = center + rho * ang.cos();
        tumors.push((cy, cx, a, b, phi));
    }

    let mut mask = Array2::<u8>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let fy = y as f64;
            let fx = x as f64;
            for &(cy, cx, a, b, phi) in &tumors {
                let dy = fy - cy;
                let dx = fx - cx;
                let u = dx * phi.cos() + dy * phi.sin();
                let v = -dx * phi.sin() + dy * phi.cos();
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    mask[[y, x]] = 1;
                    break;
                }
            }
        }
    }

    let mut image = Array3::<f32>::zeros((spec.channels, s, s));
    for (c, &(b, theta, slope)) in base.iter().enumerate() {
        let contrast = spec.contrast_per_channel[c];
        for y in 0..s {
            for x in 0..s {
                let dy = y as f64 - center;
                let dx = x as f64 - center;
                let inside_brain = dy * dy + dx * dx <= brain_r * brain_r;
                let mut v = 0.0;
                if inside_brain {
                    let xn = dx / brain_r;
                    let yn = dy / brain_r;
                    v = b + slope * (theta.cos() * xn + theta.sin() * yn);
                    if mask[[y, x]] != 0 {
                        v += contrast;
                    }
                }
                image[[c, y, x]] = v as f32;
            }
        }
    }
    // Noise last, per channel in raster order, so geometry draws are
    // unaffected by sigma.
    for v in image.iter_mut() {
        *v += (spec.noise_sigma * f64::standard_normal(&mut rng)) as f32;
    }

    let sample = Sample {
        id: format!("phantom_{seed}"),
        image,
        mask,
    };
    sample.validate()?;
    Ok(sample)
}

/// Z-score `volume` over the pixels where `foreground` is true (population
/// statistics); everything else becomes 0.
pub fn normalize_intensity<F: Real, D: Dimension>(
    volume: &Array<F, D>,
    foreground: &Array<bool, D>,
) -> Result<Array<F, D>, DataError> {
    if volume.raw_dim() != foreground.raw_dim() {
        return Err(DataError::MismatchedPair {
            what: "normalize_intensity".into(),
            image: volume.shape().to_vec(),
            mask: foreground.shape().to_vec(),
        });
    }
    let mut n = 0usize;
    let mut mean = 0.0f64;
    for (v, f) in volume.iter().zip(foreground.iter()) {
        if *f {
            mean += v.as_f64();
            n += 1;
        }
    }
    if n < 2 {
        return Err(DataError::TooFewForeground(n));
    }
    mean /= n as f64;
    let mut var = 0.0f64;
    for (v, f) in volume.iter().zip(foreground.iter()) {
        if *f {
            let d = v.as_f64() - mean;
            var += d * d;
        }
    }
    var /= n as f64;
    if var == 0.0 {
        return Err(DataError::ZeroVarianceForeground);
    }
    let sd = var.sqrt();
    let mut out = volume.clone();
    for (v, f) in out.iter_mut().zip(foreground.iter()) {
        *v = if *f {
            F::from_f64((v.as_f64() - mean) / sd)
        } else {
            F::zero()
        };
    }
    Ok(out)
}

/// Seeded shuffle, then split at `floor(n · train_fraction)` clamped so both
/// halves are non-empty. Disjoint and exhaustive.
pub fn split_dataset(
    samples: Vec<Sample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let n = samples.len();
    if n < 2 {
        return Err(DataError::TooFewSamples(n));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let cut = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
    let mut items: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut train = Vec::with_capacity(cut);
    let mut val = Vec::with_capacity(n - cut);
    for (k, &idx) in order.iter().enumerate() {
        let item = items[idx].take().expect("each index visited once");
        if k < cut {
            train.push(item);
        } else {
            val.push(item);
        }
    }
    Ok((train, val))
}

fn image_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}_img.vgdv"))
}

fn mask_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}_msk.vgdv"))
}

/// Write a sample pair in the dataset layout.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<(), DataError> {
    sample.validate()?;
    write_volume(&image_path(dir, &sample.id), &sample.image)?;
    let (h, w) = sample.mask.dim();
    let mask_vol = Array3::from_shape_fn((1, h, w), |(_, y, x)| sample.mask[[y, x]] as f32);
    write_volume(&mask_path(dir, &sample.id), &mask_vol)?;
    Ok(())
}

/// Read one sample pair by id.
pub fn load_sample(dir: &Path, id: &str) -> Result<Sample, DataError> {
    let (image, _) = read_volume(&image_path(dir, id))?;
    let (mask_vol, _) = read_volume(&mask_path(dir, id))?;
    let mask3 = mask_vol;
    let (c, h, w) = mask3.dim();
    if c != 1 {
        return Err(DataError::MismatchedPair {
            what: format!("mask '{id}'"),
            image: image.shape().to_vec(),
            mask: mask3.shape().to_vec(),
        });
    }
    let mut mask = Array2::<u8>::zeros((h, w));
    for ((_, y, x), v) in mask3.indexed_iter() {
        if *v != 0.0 && *v != 1.0 {
            return Err(DataError::BadMaskValue(*v));
        }
        mask[[y, x]] = (*v != 0.0) as u8;
    }
    let sample = Sample {
        id: id.to_string(),
        image,
        mask,
    };
    sample.validate()?;
    Ok(sample)
}

/// Write `manifest.csv` (header `id,seed`), one row per sample.
pub fn write_manifest(dir: &Path, entries: &[(String, u64)]) -> Result<(), DataError> {
    let mut text = String::from("id,seed\n");
    for (id, seed) in entries {
        text.push_str(&format!("{id},{seed}\n"));
    }
    std::fs::write(dir.join("manifest.csv"), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, u64)>, DataError> {
    let text = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "id,seed" {
                return Err(DataError::BadManifest {
                    line: 1,
                    reason: format!("header '{line}' is not 'id,seed'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, seed) = line.split_once(',').ok_or(DataError::BadManifest {
            line: i + 1,
            reason: "missing comma".into(),
        })?;
        let seed: u64 = seed.trim().parse().map_err(|_| DataError::BadManifest {
            line: i + 1,
            reason: format!("bad seed '{seed}'"),
        })?;
        out.push((id.trim().to_string(), seed));
    }
    Ok(out)
}

/// Load every sample listed in the directory's manifest; without a manifest,
/// scan for `*_img.vgdv` pairs in lexicographic id order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let ids: Vec<String> = if dir.join("manifest.csv").exists() {
        read_manifest(dir)?.into_iter().map(|(id, _)| id).collect()
    } else {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix("_img.vgdv") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        ids
    };
    ids.iter().map(|id| load_sample(dir, id)).collect()
}
