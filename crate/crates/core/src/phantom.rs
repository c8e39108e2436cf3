//! Procedural paired-modality phantom volumes.
//!
//! Real clinical-CT / micro-CT data is not distributable, so the pipeline is
//! exercised on desk-scale phantoms instead: a porous alveoli-like texture
//! (thresholded multi-octave value noise) inside a capped cylindrical body
//! envelope, plus a paired low-resolution volume derived from it.
//!
//! The low-resolution half is *not* a plain downsample: after Gaussian-pyramid
//! reduction a configurable modality gap (blur, gamma contrast change,
//! additive noise, intensity shift) is applied slice by slice, mimicking the
//! systematic appearance difference between scanners. With the gap zeroed the
//! pair degenerates to an exact downsample, which is what the tests pin.
//!
//! Slice correspondence: LR axial slice `k` is derived from HR axial slice
//! `8 k`, so `lr[k] == gaussian_downsample(hr[8k])` holds exactly in the
//! zero-gap case.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, gaussian_downsample, PyramidSpec};
use crate::util::derive_rng;
use crate::volume::{Dtype, Modality, Volume};

/// Native intensity window of phantom volumes (HU-like units).
pub const PHANTOM_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// Fraction of the z half-extent covered by the porous cavity.
pub const CAVITY_Z_EXTENT: f64 = 0.80;

/// Appearance difference applied to the LR volume on top of downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityGap {
    /// Extra in-plane Gaussian blur, in LR pixels.
    pub blur_sigma: f64,
    /// Gamma applied to intensities mapped into [0, 1] over the phantom window.
    pub contrast_gamma: f64,
    /// Additive Gaussian noise, native units.
    pub noise_sigma: f64,
    /// Additive offset, native units.
    pub intensity_shift: f64,
}

impl Default for ModalityGap {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            contrast_gamma: 0.7,
            noise_sigma: 20.0,
            intensity_shift: 150.0,
        }
    }
}

impl ModalityGap {
    pub fn zero() -> Self {
        Self {
            blur_sigma: 0.0,
            contrast_gamma: 1.0,
            noise_sigma: 0.0,
            intensity_shift: 0.0,
        }
    }
}

/// Everything that determines a phantom pair; identical specs produce
/// bit-identical volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// HR dims ordered (x, y, z); each must be divisible by 8.
    pub hr_dims: [usize; 3],
    /// Characteristic alveoli-like cell size in HR voxels.
    pub structure_scale: f64,
    pub gap: ModalityGap,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            hr_dims: [64, 64, 64],
            structure_scale: 6.0,
            gap: ModalityGap::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hr_dims.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(Error::InvalidInput(format!(
                "phantom hr_dims must be nonzero and divisible by 8 (got {:?})",
                self.hr_dims
            )));
        }
        if !(self.structure_scale > 0.0) {
            return Err(Error::InvalidInput(
                "phantom structure_scale must be > 0".to_string(),
            ));
        }
        if self.gap.noise_sigma < 0.0 || self.gap.blur_sigma < 0.0 {
            return Err(Error::InvalidInput(
                "phantom gap sigmas must be >= 0".to_string(),
            ));
        }
        if !(self.gap.contrast_gamma > 0.0) {
            return Err(Error::InvalidInput(
                "phantom contrast_gamma must be > 0".to_string(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Value noise
// ---------------------------------------------------------------------------

/// Hash a lattice corner to a value in [0, 1); pure function of its inputs,
/// independent of platform.
fn lattice_value(seed: u64, channel: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ channel.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= (x as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = h.rotate_left(23) ^ (y as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    h = h.rotate_left(29) ^ (z as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smootherstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Trilinear value noise at a continuous lattice coordinate.
fn value_noise(seed: u64, channel: u64, px: f64, py: f64, pz: f64) -> f64 {
    let (x0, y0, z0) = (px.floor(), py.floor(), pz.floor());
    let (tx, ty, tz) = (
        smootherstep(px - x0),
        smootherstep(py - y0),
        smootherstep(pz - z0),
    );
    let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let w = (if dx == 1 { tx } else { 1.0 - tx })
                    * (if dy == 1 { ty } else { 1.0 - ty })
                    * (if dz == 1 { tz } else { 1.0 - tz });
                acc += w * lattice_value(seed, channel, xi + dx, yi + dy, zi + dz);
            }
        }
    }
    acc
}

/// Three-octave fractal value noise in roughly [0, 1].
fn fbm(seed: u64, channel: u64, px: f64, py: f64, pz: f64) -> f64 {
    let mut acc = 0.0;
    let mut weight = 1.0;
    let mut total = 0.0;
    let mut freq = 1.0;
    for octave in 0..3u64 {
        acc += weight * value_noise(seed, channel * 8 + octave, px * freq, py * freq, pz * freq);
        total += weight;
        weight *= 0.5;
        freq *= 2.0;
    }
    acc / total
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Generate a deterministic (HR, LR) phantom pair.
///
/// The HR volume is a porous wall/air texture inside a body envelope; the LR
/// volume is its 8x Gaussian-pyramid downsample with the modality gap applied
/// (so the two modalities differ by more than resolution whenever the gap
/// parameters are nonzero).
pub fn generate_phantom_pair(spec: &PhantomSpec, pyramid: &PyramidSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    pyramid.validate()?;
    if pyramid.factor != 8 {
        return Err(Error::InvalidInput(format!(
            "phantom pairing requires pyramid factor 8 (got {})",
            pyramid.factor
        )));
    }
    let [nx, ny, nz] = spec.hr_dims;
    let (lo, hi) = PHANTOM_WINDOW;
    let scale = spec.structure_scale;

    // HR: capped cylindrical body with a porous cavity and a guaranteed air
    // core. The cylinder keeps interior slices statistically alike along z,
    // which is what the appearance-gap checks compare against.
    let mut hr = Array3::<f32>::zeros((nz, ny, nx));
    for z in 0..nz {
        let uz = ((z as f64 + 0.5) / nz as f64) * 2.0 - 1.0;
        for y in 0..ny {
            let uy = ((y as f64 + 0.5) / ny as f64) * 2.0 - 1.0;
            for x in 0..nx {
                let ux = ((x as f64 + 0.5) / nx as f64) * 2.0 - 1.0;
                let radial = (ux / 0.92).powi(2) + (uy / 0.92).powi(2);
                let in_body = radial <= 1.0 && uz.abs() <= 0.95;
                let cavity_radial = (ux / 0.72).powi(2) + (uy / 0.72).powi(2);
                let in_cavity = cavity_radial <= 1.0 && uz.abs() <= CAVITY_Z_EXTENT;
                let core = ux * ux + uy * uy + uz * uz;
                let n = fbm(
                    spec.seed,
                    1,
                    x as f64 / scale,
                    y as f64 / scale,
                    z as f64 / scale,
                );
                let n2 = fbm(
                    spec.seed,
                    2,
                    x as f64 / (scale * 2.0),
                    y as f64 / (scale * 2.0),
                    z as f64 / (scale * 2.0),
                );
                let value = if !in_body {
                    // Exterior air: touches the boundary, excluded by masking.
                    -1000.0 + 20.0 * (n2 - 0.5)
                } else if !in_cavity {
                    // Solid tissue shell keeps the cavity off the boundary.
                    -120.0 + 120.0 * (n2 - 0.5)
                } else if core <= 0.02 || n < 0.5 {
                    // Alveolar air (core forced so a lung region always exists).
                    -960.0 + 80.0 * (n.min(0.5) - 0.5)
                } else {
                    // Alveolar walls.
                    -150.0 + 250.0 * (n - 0.5)
                };
                hr[[z, y, x]] = value.clamp(lo, hi) as f32;
            }
        }
    }
    let hr = Volume::new(hr, [52.0, 52.0, 52.0], Modality::PhantomHr, Dtype::Float32)?;

    // LR: per-slice pyramid downsample of HR slice 8k, then the gap.
    let mut noise_rng = derive_rng(spec.seed, "phantom-gap-noise");
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let (lnz, lny, lnx) = (nz / 8, ny / 8, nx / 8);
    let mut lr = Array3::<f32>::zeros((lnz, lny, lnx));
    for k in 0..lnz {
        let hr_slice = hr.slice2d(crate::volume::Axis::Z, 8 * k)?.mapv(f64::from);
        let mut slice = gaussian_downsample(&hr_slice.view(), pyramid)?;
        slice = apply_gap(&slice.view(), &spec.gap, |_| {
            gauss.sample(&mut noise_rng)
        });
        for y in 0..lny {
            for x in 0..lnx {
                lr[[k, y, x]] = slice[[y, x]].clamp(lo, hi) as f32;
            }
        }
    }
    let lr = Volume::new(
        lr,
        [52.0 * 8.0, 52.0 * 8.0, 52.0 * 8.0],
        Modality::PhantomLr,
        Dtype::Float32,
    )?;
    Ok((hr, lr))
}

/// Blur, gamma, noise, shift — in that order — on one LR slice.
fn apply_gap(
    slice: &ArrayView2<'_, f64>,
    gap: &ModalityGap,
    mut noise: impl FnMut(()) -> f64,
) -> Array2<f64> {
    let (lo, hi) = PHANTOM_WINDOW;
    let mut out = if gap.blur_sigma > 0.0 {
        gaussian_blur(slice, gap.blur_sigma)
    } else {
        slice.to_owned()
    };
    if gap.contrast_gamma != 1.0 {
        out.mapv_inplace(|v| {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            lo + t.powf(gap.contrast_gamma) * (hi - lo)
        });
    }
    if gap.noise_sigma > 0.0 {
        out.mapv_inplace(|v| v + gap.noise_sigma * noise(()));
    }
    if gap.intensity_shift != 0.0 {
        out += gap.intensity_shift;
    }
    out
}

// ---------------------------------------------------------------------------
// Trivial appearance classifier
// ---------------------------------------------------------------------------

/// Nearest-centroid classifier on (mean, variance) features, z-scored by the
/// pooled training spread. Deliberately weak: if even this separates the LR
/// modality from plain downsamples, the translation network has a real job.
#[derive(Debug, Clone)]
pub struct MeanVarClassifier {
    centroid_a: [f64; 2],
    centroid_b: [f64; 2],
    scale: [f64; 2],
}

fn mean_var_features(img: &ArrayView2<'_, f32>) -> [f64; 2] {
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    [mean, var]
}

impl MeanVarClassifier {
    pub fn fit(class_a: &[ArrayView2<'_, f32>], class_b: &[ArrayView2<'_, f32>]) -> Self {
        let feats_a: Vec<[f64; 2]> = class_a.iter().map(mean_var_features).collect();
        let feats_b: Vec<[f64; 2]> = class_b.iter().map(mean_var_features).collect();
        let centroid = |feats: &[[f64; 2]]| -> [f64; 2] {
            let n = feats.len() as f64;
            [
                feats.iter().map(|f| f[0]).sum::<f64>() / n,
                feats.iter().map(|f| f[1]).sum::<f64>() / n,
            ]
        };
        let centroid_a = centroid(&feats_a);
        let centroid_b = centroid(&feats_b);
        let mut scale = [0.0f64; 2];
        for k in 0..2 {
            let pooled: f64 = feats_a
                .iter()
                .map(|f| (f[k] - centroid_a[k]).powi(2))
                .chain(feats_b.iter().map(|f| (f[k] - centroid_b[k]).powi(2)))
                .sum::<f64>()
                / (feats_a.len() + feats_b.len()) as f64;
            scale[k] = pooled.sqrt().max(1e-12);
        }
        Self {
            centroid_a,
            centroid_b,
            scale,
        }
    }

    /// True if the image looks like class A.
    pub fn is_class_a(&self, img: &ArrayView2<'_, f32>) -> bool {
        let f = mean_var_features(img);
        let dist = |c: &[f64; 2]| -> f64 {
            (0..2)
                .map(|k| ((f[k] - c[k]) / self.scale[k]).powi(2))
                .sum()
        };
        dist(&self.centroid_a) <= dist(&self.centroid_b)
    }

    /// Fraction of held-out images labeled correctly.
    pub fn accuracy(
        &self,
        test_a: &[ArrayView2<'_, f32>],
        test_b: &[ArrayView2<'_, f32>],
    ) -> f64 {
        let correct = test_a.iter().filter(|img| self.is_class_a(img)).count()
            + test_b.iter().filter(|img| !self.is_class_a(img)).count();
        correct as f64 / (test_a.len() + test_b.len()) as f64
    }
}
