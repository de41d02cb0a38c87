//! Synthetic per-client datasets with controllable domain shift, k-space
//! undersampling masks, and the measurement forward model.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::tensor::{fft2, ifft2, load_tensor, Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Uniform1d,
    Cartesian1d,
    Radial2d,
    Random2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub acceleration: f64,
    #[serde(default = "default_center_fraction")]
    pub center_fraction: f64,
    #[serde(default = "default_shape")]
    pub shape: (usize, usize),
}

fn default_center_fraction() -> f64 {
    0.08
}

fn default_shape() -> (usize, usize) {
    (64, 64)
}

impl MaskSpec {
    pub fn new(kind: MaskKind, acceleration: f64) -> Self {
        MaskSpec {
            kind,
            acceleration,
            center_fraction: default_center_fraction(),
            shape: default_shape(),
        }
    }
}

/// Binary sampling pattern, deterministic given (spec, seed).
#[derive(Debug, Clone)]
pub struct Mask<T> {
    pub bits: Tensor<T>,
    pub spec: MaskSpec,
}

impl<T: Scalar> Mask<T> {
    pub fn sampled_fraction(&self) -> f64 {
        let ones: f64 = self.bits.data().iter().map(|v| v.as_f64()).sum();
        ones / self.bits.data().len() as f64
    }
}

fn validate_mask_spec(spec: &MaskSpec) -> Result<()> {
    if spec.acceleration <= 1.0 {
        return Err(Error::Config(format!(
            "acceleration must exceed 1, got {}",
            spec.acceleration
        )));
    }
    if !(0.0..1.0).contains(&spec.center_fraction) {
        return Err(Error::Config(format!(
            "center_fraction must lie in [0,1), got {}",
            spec.center_fraction
        )));
    }
    if spec.shape.0 == 0 || spec.shape.1 == 0 {
        return Err(Error::Config("mask shape must be nonzero".into()));
    }
    Ok(())
}

fn set_columns<T: Scalar>(bits: &mut Tensor<T>, h: usize, w: usize, cols: &[bool]) {
    let d = bits.data_mut();
    for y in 0..h {
        for (x, &on) in cols.iter().enumerate() {
            if on {
                d[y * w + x] = T::one();
            }
        }
    }
}

/// Center block of `count` columns (or a no-op for count 0).
fn center_columns(w: usize, count: usize, cols: &mut [bool]) {
    let count = count.min(w);
    let start = (w - count) / 2;
    for c in cols.iter_mut().skip(start).take(count) {
        *c = true;
    }
}

pub fn make_mask<T: Scalar>(spec: &MaskSpec, seed: u64) -> Result<Mask<T>> {
    validate_mask_spec(spec)?;
    let (h, w) = spec.shape;
    let r = spec.acceleration;
    let mut bits = Tensor::zeros(&[h, w]);
    let mut rng = rng::stream(seed, &[tag::MASK]);

    match spec.kind {
        MaskKind::Uniform1d => {
            let step = r.ceil() as usize;
            let mut cols = vec![false; w];
            for x in (0..w).step_by(step.max(1)) {
                cols[x] = true;
            }
            center_columns(w, (spec.center_fraction * w as f64).round() as usize, &mut cols);
            set_columns(&mut bits, h, w, &cols);
        }
        MaskKind::Cartesian1d => {
            let mut cols = vec![false; w];
            center_columns(w, (spec.center_fraction * w as f64).round() as usize, &mut cols);
            let need = |cols: &[bool]| {
                (cols.iter().filter(|&&c| c).count() as f64) / (w as f64) < 1.0 / r
            };
            while need(&cols) {
                cols[rng.gen_range(0..w)] = true;
            }
            set_columns(&mut bits, h, w, &cols);
        }
        MaskKind::Radial2d => {
            let n_lines = ((h * w) as f64 / (r * h.max(w) as f64)).ceil() as usize;
            let offset = rng.gen_range(0.0..std::f64::consts::PI);
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let half = h.max(w) as f64; // long enough to cross the grid
            let d = bits.data_mut();
            for li in 0..n_lines {
                let ang = offset + std::f64::consts::PI * li as f64 / n_lines as f64;
                let (dy, dx) = (ang.sin(), ang.cos());
                // one pixel per major-axis step across the full diameter
                let steps = (2.0 * half) as usize;
                for s in 0..=steps {
                    let t = s as f64 - half;
                    let y = (cy + t * dy).round();
                    let x = (cx + t * dx).round();
                    if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                        d[y as usize * w + x as usize] = T::one();
                    }
                }
            }
        }
        MaskKind::Random2d => {
            let side = ((spec.center_fraction * (h * w) as f64).sqrt()).round() as usize;
            let side = side.min(h).min(w);
            let (y0, x0) = ((h - side) / 2, (w - side) / 2);
            {
                let d = bits.data_mut();
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        d[y * w + x] = T::one();
                    }
                }
            }
            let total = (h * w) as f64;
            loop {
                let ones: f64 = bits.data().iter().map(|v| v.as_f64()).sum();
                if ones / total >= 1.0 / r {
                    break;
                }
                let i = rng.gen_range(0..h * w);
                bits.data_mut()[i] = T::one();
            }
        }
    }
    Ok(Mask { bits, spec: *spec })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomStyle {
    Ellipses,
    Rects,
    Mixed,
}

/// Everything that makes one client's data distribution its own: shape
/// vocabulary, intensity statistics, texture noise, sampling pattern,
/// dataset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub client_id: usize,
    pub phantom_style: PhantomStyle,
    pub intensity_mean: f64,
    pub intensity_std: f64,
    #[serde(default)]
    pub texture_noise_std: f64,
    pub mask_spec: MaskSpec,
    pub n_train: usize,
    pub n_test: usize,
}

/// One data pair: ground truth y, measured k-space, zero-filled recon x.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub y: Tensor<T>,
    pub k_meas: Tensor<T>,
    pub x: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ClientDataset<T> {
    pub mask: Mask<T>,
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

/// Phantom with an explicit shape count (0 permitted, giving a blank image
/// modulo texture noise).
pub fn gen_phantom_shapes<T: Scalar>(
    profile: &ClientProfile,
    n_shapes: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let (h, w) = profile.mask_spec.shape;
    let mut img = vec![0.0f64; h * w];
    let smin = h.min(w) as f64;
    let intensity = Normal::new(profile.intensity_mean, profile.intensity_std.max(0.0))
        .expect("finite intensity params");

    for _ in 0..n_shapes {
        let rect = match profile.phantom_style {
            PhantomStyle::Ellipses => false,
            PhantomStyle::Rects => true,
            PhantomStyle::Mixed => rng.gen::<bool>(),
        };
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let a = rng.gen_range(0.15..0.40) * smin;
        let b = rng.gen_range(0.15..0.40) * smin;
        let v = intensity.sample(rng).clamp(0.0, 1.0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if rect {
                    dx.abs() <= a && dy.abs() <= b
                } else {
                    (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0
                };
                if inside {
                    img[y * w + x] = v;
                }
            }
        }
    }

    if profile.texture_noise_std > 0.0 {
        let noise = Normal::new(0.0, profile.texture_noise_std).expect("finite noise std");
        for p in img.iter_mut() {
            *p += noise.sample(rng);
        }
    }
    let data = img.into_iter().map(|p| T::cast(p.clamp(0.0, 1.0))).collect();
    Tensor::from_vec(&[h, w], data).expect("phantom buffer fills its shape")
}

/// 3 to 8 seeded random shapes in the profile's style, plus texture noise,
/// clipped to [0,1].
pub fn gen_phantom<T: Scalar>(profile: &ClientProfile, rng: &mut impl Rng) -> Tensor<T> {
    let n = rng.gen_range(3..=8);
    gen_phantom_shapes(profile, n, rng)
}

/// Measurement model: k_meas = mask o (fft2(y) + eps), x = |ifft2(k_meas)|,
/// with eps complex Gaussian (std `noise_sigma` per component) drawn before
/// masking so unsampled points carry no information.
pub fn undersample<T: Scalar>(
    y: &Tensor<T>,
    mask: &Mask<T>,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise_sigma must be nonnegative, got {noise_sigma}")));
    }
    if y.dtype() != Dtype::Real || y.rank() != 2 {
        return Err(Error::Dtype("undersample wants a real rank-2 image".into()));
    }
    if y.shape() != mask.bits.shape() {
        return Err(Error::Dimension(format!(
            "image {:?} vs mask {:?}",
            y.shape(),
            mask.bits.shape()
        )));
    }
    let mut k = fft2(&y.to_complex()?)?;
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("finite noise sigma");
        for v in k.data_mut() {
            *v += T::cast(noise.sample(rng));
        }
    }
    let k_meas = k.mask_mul(&mask.bits)?;
    let x = ifft2(&k_meas)?.magnitude()?;
    Ok((x, k_meas))
}

/// Generate a client's dataset: n_train + n_test phantoms pushed through the
/// measurement model with the client's own mask. Deterministic in
/// (profile, seed, noise_sigma).
pub fn build_client_dataset<T: Scalar>(
    profile: &ClientProfile,
    seed: u64,
    noise_sigma: f64,
) -> Result<ClientDataset<T>> {
    if profile.n_train + profile.n_test < 2 {
        return Err(Error::Config("dataset needs at least 2 images".into()));
    }
    if profile.n_train == 0 {
        return Err(Error::Config("dataset needs a nonempty train split".into()));
    }
    let cid = profile.client_id as u64;
    let mask_seed = rng::stream(seed, &[tag::MASK, cid]).gen::<u64>();
    let mask = make_mask::<T>(&profile.mask_spec, mask_seed)?;

    let mut samples = Vec::with_capacity(profile.n_train + profile.n_test);
    for i in 0..profile.n_train + profile.n_test {
        let mut prng = rng::stream(seed, &[tag::PHANTOM, cid, i as u64]);
        let y = gen_phantom::<T>(profile, &mut prng);
        let mut nrng = rng::stream(seed, &[tag::NOISE, cid, i as u64]);
        let (x, k_meas) = undersample(&y, &mask, noise_sigma, &mut nrng)?;
        samples.push(Sample { y, k_meas, x });
    }
    let test = samples.split_off(profile.n_train);
    Ok(ClientDataset {
        mask,
        train: samples,
        test,
    })
}

/// Index document for loading a directory of real images.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientDirIndex {
    pub client_id: usize,
    pub mask_spec: MaskSpec,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Load fully sampled images (TensorFile real32, values in [0,1]) listed by
/// `index.json` and push them through the measurement model.
pub fn load_client_dir(
    dir: impl AsRef<Path>,
    seed: u64,
    noise_sigma: f64,
) -> Result<ClientDataset<f32>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("index.json"))?;
    let index: ClientDirIndex = serde_json::from_str(&text).map_err(Error::from)?;

    let cid = index.client_id as u64;
    let mask_seed = rng::stream(seed, &[tag::MASK, cid]).gen::<u64>();
    let mask = make_mask::<f32>(&index.mask_spec, mask_seed)?;

    let load_split = |files: &[String], split_tag: u64| -> Result<Vec<Sample<f32>>> {
        let mut out = Vec::with_capacity(files.len());
        for (i, f) in files.iter().enumerate() {
            let y = load_tensor(dir.join(f))?;
            let mut nrng = rng::stream(seed, &[tag::NOISE, cid, split_tag, i as u64]);
            let (x, k_meas) = undersample(&y, &mask, noise_sigma, &mut nrng)?;
            out.push(Sample { y, k_meas, x });
        }
        Ok(out)
    };
    let train = load_split(&index.train, 0)?;
    let test = load_split(&index.test, 1)?;
    if train.is_empty() {
        return Err(Error::Config("index lists no training images".into()));
    }
    Ok(ClientDataset { mask, train, test })
}
