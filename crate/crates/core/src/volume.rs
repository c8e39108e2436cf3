//! Volume persistence, intensity normalization, lung-region extraction,
//! patch sampling, and SR-tile stitching.
//!
//! The on-disk volume format is a plain text header (one `key: value` per
//! line) separated from a raw little-endian voxel payload by a blank line.
//! Voxels are stored x-fastest; in memory that is an `Array3<f32>` indexed
//! `[z, y, x]`.
//!
//! ```text
//! format: volume/1
//! dims: 64 64 64
//! spacing_um: 625 625 600
//! dtype: int16
//! byte_order: little
//! modality: clinical_ct
//! normalized: false
//! <blank line><raw payload>
//! ```

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_rng, Fingerprint};

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ClinicalCt,
    MicroCt,
    PhantomHr,
    PhantomLr,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::ClinicalCt => "clinical_ct",
            Modality::MicroCt => "micro_ct",
            Modality::PhantomHr => "phantom_hr",
            Modality::PhantomLr => "phantom_lr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clinical_ct" => Ok(Modality::ClinicalCt),
            "micro_ct" => Ok(Modality::MicroCt),
            "phantom_hr" => Ok(Modality::PhantomHr),
            "phantom_lr" => Ok(Modality::PhantomLr),
            other => Err(Error::Format(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// On-disk voxel representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Int16,
    Float32,
}

impl Dtype {
    fn as_str(&self) -> &'static str {
        match self {
            Dtype::Int16 => "int16",
            Dtype::Float32 => "float32",
        }
    }

    fn byte_size(&self) -> usize {
        match self {
            Dtype::Int16 => 2,
            Dtype::Float32 => 4,
        }
    }
}

/// A 3D scalar grid with physical spacing and a modality tag.
///
/// Voxel values are HU-like native units until [`normalize_intensity`] maps
/// them into [-1, 1] and flips `normalized`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Voxels indexed `[z, y, x]` (x-fastest storage order).
    pub data: Array3<f32>,
    /// Per-axis voxel size in micrometers, ordered (x, y, z).
    pub spacing_um: [f64; 3],
    pub modality: Modality,
    pub normalized: bool,
    /// Representation used when the volume is written to disk.
    pub dtype: Dtype,
}

impl Volume {
    pub fn new(
        data: Array3<f32>,
        spacing_um: [f64; 3],
        modality: Modality,
        dtype: Dtype,
    ) -> Result<Self> {
        let v = Self {
            data,
            spacing_um,
            modality,
            normalized: false,
            dtype,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (nz, ny, nx) = self.data.dim();
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::InvalidInput(
                "volume dims must be >= 1 on every axis".to_string(),
            ));
        }
        if self.spacing_um.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "all spacing entries must be > 0 (got {:?})",
                self.spacing_um
            )));
        }
        if self.normalized {
            if let Some(bad) = self.data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!(
                    "normalized volume contains value {bad} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Dims ordered (x, y, z) to match the file header.
    pub fn dims(&self) -> [usize; 3] {
        let (nz, ny, nx) = self.data.dim();
        [nx, ny, nz]
    }

    /// Content-addressed identifier over voxels, dims, and metadata.
    pub fn fingerprint(&self) -> String {
        let (nz, ny, nx) = self.data.dim();
        let mut fp = Fingerprint::new();
        fp.push_str("volume");
        fp.push_usizes(&[nx, ny, nz]);
        fp.push_f64s(self.spacing_um.iter().copied());
        fp.push_str(self.modality.as_str());
        fp.push_str(if self.normalized { "1" } else { "0" });
        fp.push_f32s(self.data.iter().copied());
        fp.finish()
    }

    /// 2D slice perpendicular to `axis` at `index`.
    ///
    /// Orientation: Z slices are (y, x), Y slices are (z, x), X slices are
    /// (z, y).
    pub fn slice2d(&self, axis: Axis, index: usize) -> Result<Array2<f32>> {
        let (nz, ny, nx) = self.data.dim();
        let limit = match axis {
            Axis::Z => nz,
            Axis::Y => ny,
            Axis::X => nx,
        };
        if index >= limit {
            return Err(Error::InvalidInput(format!(
                "slice index {index} out of range for axis {axis:?} (extent {limit})"
            )));
        }
        let out = match axis {
            Axis::Z => self.data.index_axis(ndarray::Axis(0), index).to_owned(),
            Axis::Y => self.data.index_axis(ndarray::Axis(1), index).to_owned(),
            Axis::X => self.data.index_axis(ndarray::Axis(2), index).to_owned(),
        };
        Ok(out)
    }
}

/// Slicing axis for 2D patch extraction. Z (axial) is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Boolean companion volume marking the extracted lung region.
#[derive(Debug, Clone)]
pub struct Mask {
    pub data: Array3<bool>,
    pub source_volume_id: String,
}

impl Mask {
    /// Full-volume mask, for data that is entirely region of interest
    /// (e.g. resected-specimen micro-CT scans).
    pub fn full(volume: &Volume) -> Self {
        Self {
            data: Array3::from_elem(volume.data.dim(), true),
            source_volume_id: volume.fingerprint(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive-exclusive bounding box `([z, y, x] lo, [z, y, x] hi)`.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ((z, y, x), &m) in self.data.indexed_iter() {
            if m {
                any = true;
                let p = [z, y, x];
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k] + 1);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

const FORMAT_TAG: &str = "volume/1";

/// Write a volume in the header + raw payload format.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    v.validate()?;
    let [nx, ny, nz] = v.dims();
    let mut header = String::new();
    header.push_str(&format!("format: {FORMAT_TAG}\n"));
    header.push_str(&format!("dims: {nx} {ny} {nz}\n"));
    header.push_str(&format!(
        "spacing_um: {} {} {}\n",
        v.spacing_um[0], v.spacing_um[1], v.spacing_um[2]
    ));
    header.push_str(&format!("dtype: {}\n", v.dtype.as_str()));
    header.push_str("byte_order: little\n");
    header.push_str(&format!("modality: {}\n", v.modality));
    header.push_str(&format!("normalized: {}\n", v.normalized));
    header.push('\n');

    let mut bytes = Vec::with_capacity(header.len() + v.data.len() * v.dtype.byte_size());
    bytes.extend_from_slice(header.as_bytes());
    match v.dtype {
        Dtype::Float32 => {
            for &val in v.data.iter() {
                bytes.extend_from_slice(&val.to_le_bytes());
            }
        }
        Dtype::Int16 => {
            for &val in v.data.iter() {
                let q = val.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                bytes.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a volume written by [`save_volume`].
pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("missing blank-line header terminator".to_string()))?;
    let header = std::str::from_utf8(&bytes[..sep])
        .map_err(|_| Error::Format("header is not valid UTF-8".to_string()))?;
    let payload = &bytes[sep + 2..];

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing: Option<[f64; 3]> = None;
    let mut dtype: Option<Dtype> = None;
    let mut byte_order_ok = false;
    let mut modality = Modality::ClinicalCt;
    let mut normalized = false;

    for line in header.lines() {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("malformed header line `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "format" => {
                if value != FORMAT_TAG {
                    return Err(Error::Format(format!("unsupported format `{value}`")));
                }
            }
            "dims" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::Format(format!("bad dims entry `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Format("dims must have 3 entries".to_string()));
                }
                dims = Some([parts[0], parts[1], parts[2]]);
            }
            "spacing_um" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::Format(format!("bad spacing entry `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Format("spacing_um must have 3 entries".to_string()));
                }
                spacing = Some([parts[0], parts[1], parts[2]]);
            }
            "dtype" => {
                dtype = Some(match value {
                    "int16" => Dtype::Int16,
                    "float32" => Dtype::Float32,
                    other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
                });
            }
            "byte_order" => {
                if value != "little" {
                    return Err(Error::Format(format!("unsupported byte_order `{value}`")));
                }
                byte_order_ok = true;
            }
            "modality" => modality = Modality::parse(value)?,
            "normalized" => {
                normalized = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad normalized flag `{value}`")))?;
            }
            other => return Err(Error::Format(format!("unknown header key `{other}`"))),
        }
    }

    let dims = dims.ok_or_else(|| Error::Format("missing header key `dims`".to_string()))?;
    let spacing =
        spacing.ok_or_else(|| Error::Format("missing header key `spacing_um`".to_string()))?;
    let dtype = dtype.ok_or_else(|| Error::Format("missing header key `dtype`".to_string()))?;
    if !byte_order_ok {
        return Err(Error::Format("missing header key `byte_order`".to_string()));
    }

    let [nx, ny, nz] = dims;
    let count = nx
        .checked_mul(ny)
        .and_then(|p| p.checked_mul(nz))
        .ok_or_else(|| Error::Format("dims overflow".to_string()))?;
    if payload.len() != count * dtype.byte_size() {
        return Err(Error::Format(format!(
            "payload size mismatch: expected {} bytes for dims {}x{}x{} {}, found {}",
            count * dtype.byte_size(),
            nx,
            ny,
            nz,
            dtype.as_str(),
            payload.len()
        )));
    }

    let mut values = Vec::with_capacity(count);
    match dtype {
        Dtype::Float32 => {
            for chunk in payload.chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        Dtype::Int16 => {
            for chunk in payload.chunks_exact(2) {
                values.push(i16::from_le_bytes(chunk.try_into().unwrap()) as f32);
            }
        }
    }
    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| Error::Format(format!("payload reshape failed: {e}")))?;
    let v = Volume {
        data,
        spacing_um: spacing,
        modality,
        normalized,
        dtype,
    };
    v.validate()?;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Intensity normalization
// ---------------------------------------------------------------------------

/// Affine map of `[lo, hi]` onto `[-1, +1]`, clamping values outside the
/// source range. The result always stores as float32.
pub fn normalize_intensity(v: &Volume, source_range: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = source_range;
    if !(hi > lo) {
        return Err(Error::InvalidInput(format!(
            "zero or negative dynamic range: [{lo}, {hi}]"
        )));
    }
    let lo = lo as f32;
    let hi = hi as f32;
    let data = v
        .data
        .mapv(|x| (2.0 * (x.clamp(lo, hi) - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0));
    Ok(Volume {
        data,
        spacing_um: v.spacing_um,
        modality: v.modality,
        normalized: true,
        dtype: Dtype::Float32,
    })
}

/// Normalization driven by the volume's own min/max.
pub fn normalize_minmax(v: &Volume) -> Result<Volume> {
    let lo = v.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = v.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    normalize_intensity(v, (lo, hi))
}

// ---------------------------------------------------------------------------
// Lung-region extraction
// ---------------------------------------------------------------------------

/// Seeding rule for region growing.
#[derive(Debug, Clone)]
pub enum SeedPolicy {
    /// Grow from every voxel below the threshold (full labeling).
    AllBelowThreshold,
    /// Grow only from the given `[z, y, x]` voxels; each must be below the
    /// threshold.
    Voxels(Vec<[usize; 3]>),
}

/// Region growing for the lung air space: 6-connected components of voxels
/// below `air_threshold`, keeping only components that do not touch the
/// volume boundary (which excludes exterior air).
///
/// The threshold is in native units, so the volume must not be normalized.
pub fn extract_lung_mask(v: &Volume, air_threshold: f32, seeds: &SeedPolicy) -> Result<Mask> {
    if v.normalized {
        return Err(Error::InvalidInput(
            "lung extraction needs native intensities; volume is normalized".to_string(),
        ));
    }
    let (nz, ny, nx) = v.data.dim();
    let air = |z: usize, y: usize, x: usize| v.data[[z, y, x]] < air_threshold;

    if let SeedPolicy::Voxels(list) = seeds {
        for &[z, y, x] in list {
            if z >= nz || y >= ny || x >= nx {
                return Err(Error::InvalidInput(format!(
                    "seed voxel [{z}, {y}, {x}] out of bounds"
                )));
            }
            if !air(z, y, x) {
                return Err(Error::InvalidInput(format!(
                    "seed voxel [{z}, {y}, {x}] is not below the air threshold"
                )));
            }
        }
    }

    // Label 6-connected air components with one BFS per unvisited air voxel.
    let mut label = Array3::<u32>::zeros((nz, ny, nx));
    let mut next_label = 1u32;
    let mut touches_boundary: Vec<bool> = vec![false]; // slot 0 = background
    let mut queue = VecDeque::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !air(z, y, x) || label[[z, y, x]] != 0 {
                    continue;
                }
                let id = next_label;
                next_label += 1;
                touches_boundary.push(false);
                label[[z, y, x]] = id;
                queue.push_back([z, y, x]);
                while let Some([cz, cy, cx]) = queue.pop_front() {
                    if cz == 0
                        || cz == nz - 1
                        || cy == 0
                        || cy == ny - 1
                        || cx == 0
                        || cx == nx - 1
                    {
                        touches_boundary[id as usize] = true;
                    }
                    let mut visit = |z: usize, y: usize, x: usize| {
                        if air(z, y, x) && label[[z, y, x]] == 0 {
                            label[[z, y, x]] = id;
                            queue.push_back([z, y, x]);
                        }
                    };
                    if cz > 0 {
                        visit(cz - 1, cy, cx);
                    }
                    if cz + 1 < nz {
                        visit(cz + 1, cy, cx);
                    }
                    if cy > 0 {
                        visit(cz, cy - 1, cx);
                    }
                    if cy + 1 < ny {
                        visit(cz, cy + 1, cx);
                    }
                    if cx > 0 {
                        visit(cz, cy, cx - 1);
                    }
                    if cx + 1 < nx {
                        visit(cz, cy, cx + 1);
                    }
                }
            }
        }
    }

    // Interior components only; with explicit seeds, also only seeded ones.
    let mut keep = vec![false; next_label as usize];
    match seeds {
        SeedPolicy::AllBelowThreshold => {
            for (id, &touches) in touches_boundary.iter().enumerate().skip(1) {
                keep[id] = !touches;
            }
        }
        SeedPolicy::Voxels(list) => {
            for &[z, y, x] in list {
                let id = label[[z, y, x]] as usize;
                keep[id] = !touches_boundary[id];
            }
        }
    }

    let data = label.mapv(|id| keep[id as usize]);
    if !data.iter().any(|&b| b) {
        return Err(Error::NoLungRegion);
    }
    Ok(Mask {
        data,
        source_volume_id: v.fingerprint(),
    })
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

/// Patch geometry: LR side `i`, HR side `j = 8 i`, and how many patches to
/// draw per case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub lr_size: usize,
    pub hr_size: usize,
    pub count_per_case: usize,
    pub rng_seed: u64,
}

impl PatchSpec {
    /// The HR side is pinned to 8x the LR side.
    pub fn new(lr_size: usize, count_per_case: usize, rng_seed: u64) -> Result<Self> {
        let spec = Self {
            lr_size,
            hr_size: 8 * lr_size,
            count_per_case,
            rng_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hr_size != 8 * self.lr_size {
            return Err(Error::InvalidInput(format!(
                "hr_size must be 8 * lr_size (got {} vs {})",
                self.hr_size, self.lr_size
            )));
        }
        if self.lr_size < 8 {
            return Err(Error::InvalidInput(format!(
                "lr patch size must be >= 8 (got {})",
                self.lr_size
            )));
        }
        if self.count_per_case == 0 {
            return Err(Error::InvalidInput(
                "count_per_case must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn size_for(&self, side: PatchSide) -> usize {
        match side {
            PatchSide::Lr => self.lr_size,
            PatchSide::Hr => self.hr_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSide {
    Lr,
    Hr,
}

/// Where a patch was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub axis: Axis,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

/// A square 2D crop with provenance.
#[derive(Debug, Clone)]
pub struct Patch {
    pub data: Array2<f32>,
    pub origin: PatchOrigin,
    pub source_volume_id: String,
}

/// A pool of patches drawn under one spec. May span several volumes
/// (provenance lives on each patch).
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub spec: PatchSpec,
    pub side: PatchSide,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn images(&self) -> Vec<ArrayView2<'_, f32>> {
        self.patches.iter().map(|p| p.data.view()).collect()
    }

    /// Merge pools sampled under the same spec and side.
    pub fn concat(sets: Vec<PatchSet>) -> Result<PatchSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concat zero patch sets".to_string()))?;
        let (spec, side) = (first.spec, first.side);
        if sets.iter().any(|s| s.spec != spec || s.side != side) {
            return Err(Error::InvalidInput(
                "patch sets to concat must share spec and side".to_string(),
            ));
        }
        let patches = sets.into_iter().flat_map(|s| s.patches).collect();
        Ok(PatchSet {
            spec,
            side,
            patches,
        })
    }
}

/// Draw `spec.count_per_case` square patches whose centers lie inside the
/// mask, deterministic in `spec.rng_seed`.
///
/// Patch windows are clamped to stay within the slice, so a center near the
/// mask edge still yields a full in-bounds patch containing that center.
pub fn sample_patches(
    v: &Volume,
    m: &Mask,
    spec: &PatchSpec,
    side: PatchSide,
    axis: Axis,
) -> Result<PatchSet> {
    spec.validate()?;
    if !v.normalized {
        return Err(Error::InvalidInput(
            "patch sampling requires a normalized volume".to_string(),
        ));
    }
    if m.data.dim() != v.data.dim() {
        return Err(Error::InvalidInput(format!(
            "mask dims {:?} do not match volume dims {:?}",
            m.data.dim(),
            v.data.dim()
        )));
    }
    let size = spec.size_for(side);
    let (lo, hi) = m
        .bounding_box()
        .ok_or_else(|| Error::InvalidInput("mask is empty".to_string()))?;
    // In-plane bbox extents for the chosen axis: Z slices are (y, x),
    // Y slices are (z, x), X slices are (z, y).
    let (bbox_h, bbox_w) = match axis {
        Axis::Z => (hi[1] - lo[1], hi[2] - lo[2]),
        Axis::Y => (hi[0] - lo[0], hi[2] - lo[2]),
        Axis::X => (hi[0] - lo[0], hi[1] - lo[1]),
    };
    if size > bbox_h || size > bbox_w {
        return Err(Error::PatchDoesNotFit {
            patch: size,
            bbox_h,
            bbox_w,
        });
    }

    let voxels: Vec<[usize; 3]> = m
        .data
        .indexed_iter()
        .filter_map(|((z, y, x), &b)| b.then_some([z, y, x]))
        .collect();

    let (nz, ny, nx) = v.data.dim();
    let (plane_h, plane_w) = match axis {
        Axis::Z => (ny, nx),
        Axis::Y => (nz, nx),
        Axis::X => (nz, ny),
    };

    let volume_id = v.fingerprint();
    let mut rng = derive_rng(spec.rng_seed, "sample-patches");
    let mut patches = Vec::with_capacity(spec.count_per_case);
    for _ in 0..spec.count_per_case {
        let [z, y, x] = voxels[rng.random_range(0..voxels.len())];
        let (slice_idx, center_r, center_c) = match axis {
            Axis::Z => (z, y, x),
            Axis::Y => (y, z, x),
            Axis::X => (x, z, y),
        };
        let r0 = center_r
            .saturating_sub(size / 2)
            .min(plane_h - size);
        let c0 = center_c
            .saturating_sub(size / 2)
            .min(plane_w - size);
        let plane = v.slice2d(axis, slice_idx)?;
        let data = plane
            .slice(ndarray::s![r0..r0 + size, c0..c0 + size])
            .to_owned();
        patches.push(Patch {
            data,
            origin: PatchOrigin {
                axis,
                slice: slice_idx,
                row: r0,
                col: c0,
            },
            source_volume_id: volume_id.clone(),
        });
    }
    Ok(PatchSet {
        spec: *spec,
        side,
        patches,
    })
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

/// Non-overlapping row-major tiling of uniform tiles into one image.
pub fn stitch_patches(tiles: &[Array2<f32>], grid: (usize, usize)) -> Result<Array2<f32>> {
    let (rows, cols) = grid;
    if rows * cols != tiles.len() {
        return Err(Error::InvalidInput(format!(
            "tile count mismatch: {} tiles for a {}x{} grid",
            tiles.len(),
            rows,
            cols
        )));
    }
    let (th, tw) = tiles
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stitch zero tiles".to_string()))?
        .dim();
    if tiles.iter().any(|t| t.dim() != (th, tw)) {
        return Err(Error::InvalidInput("non-uniform tile sizes".to_string()));
    }
    let mut out = Array2::<f32>::zeros((rows * th, cols * tw));
    for (idx, tile) in tiles.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        out.slice_mut(ndarray::s![r * th..(r + 1) * th, c * tw..(c + 1) * tw])
            .assign(tile);
    }
    Ok(out)
}

/// Exact inverse of [`stitch_patches`]: cut an image into a grid of
/// `tile x tile` tiles (dims must divide evenly).
pub fn split_into_tiles(
    img: &ArrayView2<f32>,
    tile: usize,
) -> Result<(Vec<Array2<f32>>, (usize, usize))> {
    let (h, w) = img.dim();
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} does not split into {tile}x{tile} tiles"
        )));
    }
    let grid = (h / tile, w / tile);
    let mut tiles = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            tiles.push(
                img.slice(ndarray::s![r * tile..(r + 1) * tile, c * tile..(c + 1) * tile])
                    .to_owned(),
            );
        }
    }
    Ok((tiles, grid))
}

// ---------------------------------------------------------------------------
// Patch-set persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PatchEntry {
    file: String,
    origin: PatchOrigin,
    source_volume_id: String,
}

#[derive(Serialize, Deserialize)]
struct PatchSetManifest {
    spec: PatchSpec,
    side: PatchSide,
    size: usize,
    dtype: String,
    patches: Vec<PatchEntry>,
}

impl PatchSet {
    /// Persist as a directory: JSON manifest plus one raw f32 file per patch.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let size = self.spec.size_for(self.side);
        let mut entries = Vec::with_capacity(self.patches.len());
        for (i, p) in self.patches.iter().enumerate() {
            if p.data.dim() != (size, size) {
                return Err(Error::InvalidInput(format!(
                    "patch {i} has dims {:?}, expected {size}x{size}",
                    p.data.dim()
                )));
            }
            let file = format!("patch_{i:05}.raw");
            let mut bytes = Vec::with_capacity(p.data.len() * 4);
            for &v in p.data.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(&file), bytes)?;
            entries.push(PatchEntry {
                file,
                origin: p.origin,
                source_volume_id: p.source_volume_id.clone(),
            });
        }
        let manifest = PatchSetManifest {
            spec: self.spec,
            side: self.side,
            size,
            dtype: "float32".to_string(),
            patches: entries,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<PatchSet> {
        let json = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: PatchSetManifest = serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("bad patch-set manifest: {e}")))?;
        let size = manifest.size;
        let mut patches = Vec::with_capacity(manifest.patches.len());
        for entry in &manifest.patches {
            let bytes = fs::read(dir.join(&entry.file))?;
            if bytes.len() != size * size * 4 {
                return Err(Error::Format(format!(
                    "patch file `{}` has {} bytes, expected {}",
                    entry.file,
                    bytes.len(),
                    size * size * 4
                )));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let data = Array2::from_shape_vec((size, size), values)
                .map_err(|e| Error::Format(format!("patch reshape failed: {e}")))?;
            patches.push(Patch {
                data,
                origin: entry.origin,
                source_volume_id: entry.source_volume_id.clone(),
            });
        }
        Ok(PatchSet {
            spec: manifest.spec,
            side: manifest.side,
            patches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn test_volume(data: Array3<f32>) -> Volume {
        Volume::new(data, [625.0, 625.0, 600.0], Modality::ClinicalCt, Dtype::Float32).unwrap()
    }

    /// Body at intensity `body` filling the volume, with the given cavities
    /// carved at intensity `cavity`.
    fn body_with_cavities(
        dims: (usize, usize, usize),
        body: f32,
        cavity: f32,
        cavities: &[([usize; 3], [usize; 3])],
    ) -> Volume {
        let mut data = Array3::from_elem(dims, body);
        for &(lo, hi) in cavities {
            for z in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for x in lo[2]..hi[2] {
                        data[[z, y, x]] = cavity;
                    }
                }
            }
        }
        test_volume(data)
    }

    /// Independent oracle: flood from boundary air to find exterior, then
    /// interior air = all sub-threshold voxels not reached.
    fn lung_oracle(v: &Volume, threshold: f32) -> Array3<bool> {
        let (nz, ny, nx) = v.data.dim();
        let air = |z: usize, y: usize, x: usize| v.data[[z, y, x]] < threshold;
        let mut exterior = Array3::<bool>::from_elem((nz, ny, nx), false);
        let mut stack = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let on_boundary =
                        z == 0 || z == nz - 1 || y == 0 || y == ny - 1 || x == 0 || x == nx - 1;
                    if on_boundary && air(z, y, x) && !exterior[[z, y, x]] {
                        exterior[[z, y, x]] = true;
                        stack.push([z, y, x]);
                        while let Some([cz, cy, cx]) = stack.pop() {
                            let neighbors = [
                                (cz.wrapping_sub(1), cy, cx),
                                (cz + 1, cy, cx),
                                (cz, cy.wrapping_sub(1), cx),
                                (cz, cy + 1, cx),
                                (cz, cy, cx.wrapping_sub(1)),
                                (cz, cy, cx + 1),
                            ];
                            for (z2, y2, x2) in neighbors {
                                if z2 < nz
                                    && y2 < ny
                                    && x2 < nx
                                    && air(z2, y2, x2)
                                    && !exterior[[z2, y2, x2]]
                                {
                                    exterior[[z2, y2, x2]] = true;
                                    stack.push([z2, y2, x2]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
            air(z, y, x) && !exterior[[z, y, x]]
        })
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let mut rng = crate::util::derive_rng(1, "volume-test");
        let data = Array3::from_shape_fn((6, 5, 4), |_| rng.random_range(-1000.0f32..400.0));
        let v = test_volume(data);
        let path = dir.path().join("v.vol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.spacing_um, [625.0, 625.0, 600.0]);
    }

    #[test]
    fn int16_round_trip_preserves_integral_values() {
        let dir = tempdir().unwrap();
        let data = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x) as f32 - 32.0);
        let mut v = test_volume(data);
        v.dtype = Dtype::Int16;
        let path = dir.path().join("v.vol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn truncated_payload_is_a_size_mismatch() {
        let dir = tempdir().unwrap();
        let v = test_volume(Array3::zeros((4, 4, 4)));
        let path = dir.path().join("v.vol");
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, bytes).unwrap();
        let err = load_volume(&path).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("payload size mismatch"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.vol");
        std::fs::write(&path, b"dims 4 4 4\n\n").unwrap();
        assert!(matches!(load_volume(&path).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_volume(Path::new("/nonexistent/v.vol")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let v = test_volume(Array3::zeros((2, 2, 2)));
        assert!(save_volume(&v, Path::new("/nonexistent/dir/v.vol")).is_err());
    }

    #[test]
    fn normalize_maps_endpoints_and_midpoint_exactly() {
        let mut data = Array3::zeros((1, 1, 3));
        data[[0, 0, 0]] = -1000.0;
        data[[0, 0, 1]] = -300.0; // midpoint of [-1000, 400]
        data[[0, 0, 2]] = 400.0;
        let v = test_volume(data);
        let n = normalize_intensity(&v, (-1000.0, 400.0)).unwrap();
        assert_eq!(n.data[[0, 0, 0]], -1.0);
        assert_eq!(n.data[[0, 0, 1]], 0.0);
        assert_eq!(n.data[[0, 0, 2]], 1.0);
        assert!(n.normalized);
    }

    #[test]
    fn normalize_matches_direct_formula_oracle_and_clamps() {
        let mut rng = crate::util::derive_rng(2, "volume-test");
        let data = Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(-1500.0f32..800.0));
        let v = test_volume(data.clone());
        let (lo, hi) = (-1000.0f64, 400.0f64);
        let n = normalize_intensity(&v, (lo, hi)).unwrap();
        for (&raw, &got) in data.iter().zip(n.data.iter()) {
            let oracle = (2.0 * (raw as f64 - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
            assert!((got as f64 - oracle).abs() < 1e-6, "raw {raw}: {got} vs {oracle}");
        }
    }

    #[test]
    fn normalize_rejects_empty_range() {
        let v = test_volume(Array3::zeros((2, 2, 2)));
        let err = normalize_intensity(&v, (10.0, 10.0)).unwrap_err();
        match err {
            Error::InvalidInput(msg) => {
                assert!(msg.contains("zero or negative dynamic range"), "{msg}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lung_mask_is_exactly_the_interior_cavity() {
        let v = body_with_cavities((12, 12, 12), 0.0, -900.0, &[([3, 3, 3], [8, 8, 8])]);
        let mask = extract_lung_mask(&v, -400.0, &SeedPolicy::AllBelowThreshold).unwrap();
        for ((z, y, x), &m) in mask.data.indexed_iter() {
            let inside = (3..8).contains(&z) && (3..8).contains(&y) && (3..8).contains(&x);
            assert_eq!(m, inside, "mismatch at [{z}, {y}, {x}]");
        }
    }

    #[test]
    fn solid_volume_has_no_lung_region() {
        let v = test_volume(Array3::zeros((8, 8, 8)));
        let err = extract_lung_mask(&v, -400.0, &SeedPolicy::AllBelowThreshold).unwrap_err();
        assert!(matches!(err, Error::NoLungRegion));
    }

    #[test]
    fn two_disjoint_cavities_are_both_present() {
        let v = body_with_cavities(
            (16, 16, 16),
            0.0,
            -900.0,
            &[([2, 2, 2], [6, 6, 6]), ([9, 9, 9], [14, 14, 14])],
        );
        let mask = extract_lung_mask(&v, -400.0, &SeedPolicy::AllBelowThreshold).unwrap();
        assert!(mask.data[[3, 3, 3]]);
        assert!(mask.data[[11, 11, 11]]);
        let oracle = lung_oracle(&v, -400.0);
        assert_eq!(mask.data, oracle);
    }

    #[test]
    fn exterior_air_is_excluded() {
        // Body occupying the middle, cavity inside it, exterior air around.
        let mut data = Array3::from_elem((16, 16, 16), -1000.0f32);
        for z in 2..14 {
            for y in 2..14 {
                for x in 2..14 {
                    data[[z, y, x]] = 0.0;
                }
            }
        }
        for z in 5..11 {
            for y in 5..11 {
                for x in 5..11 {
                    data[[z, y, x]] = -900.0;
                }
            }
        }
        let v = test_volume(data);
        let mask = extract_lung_mask(&v, -400.0, &SeedPolicy::AllBelowThreshold).unwrap();
        assert!(mask.data[[7, 7, 7]]);
        assert!(!mask.data[[0, 0, 0]], "exterior air must not be in the mask");
        assert_eq!(mask.data, lung_oracle(&v, -400.0));
    }

    #[test]
    fn seeded_extraction_keeps_only_seeded_components() {
        let v = body_with_cavities(
            (16, 16, 16),
            0.0,
            -900.0,
            &[([2, 2, 2], [6, 6, 6]), ([9, 9, 9], [14, 14, 14])],
        );
        let mask =
            extract_lung_mask(&v, -400.0, &SeedPolicy::Voxels(vec![[3, 3, 3]])).unwrap();
        assert!(mask.data[[3, 3, 3]]);
        assert!(!mask.data[[11, 11, 11]]);
    }

    #[test]
    fn normalized_volume_is_rejected_for_lung_extraction() {
        let v = body_with_cavities((8, 8, 8), 0.0, -900.0, &[([2, 2, 2], [6, 6, 6])]);
        let n = normalize_intensity(&v, (-1000.0, 400.0)).unwrap();
        assert!(extract_lung_mask(&n, -400.0, &SeedPolicy::AllBelowThreshold).is_err());
    }

    fn sampling_fixture() -> (Volume, Mask) {
        let v = body_with_cavities((24, 48, 48), 0.0, -900.0, &[([4, 8, 8], [20, 40, 40])]);
        let mask = extract_lung_mask(&v, -400.0, &SeedPolicy::AllBelowThreshold).unwrap();
        let n = normalize_intensity(&v, (-1000.0, 400.0)).unwrap();
        (n, mask)
    }

    #[test]
    fn sampling_yields_exact_count_with_centers_in_mask() {
        let (v, mask) = sampling_fixture();
        let spec = PatchSpec::new(8, 100, 7).unwrap();
        let set = sample_patches(&v, &mask, &spec, PatchSide::Lr, Axis::Z).unwrap();
        assert_eq!(set.patches.len(), 100);
        for p in &set.patches {
            assert_eq!(p.data.dim(), (8, 8));
            assert!(p.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let (v, mask) = sampling_fixture();
        let spec = PatchSpec::new(8, 50, 99).unwrap();
        let a = sample_patches(&v, &mask, &spec, PatchSide::Lr, Axis::Z).unwrap();
        let b = sample_patches(&v, &mask, &spec, PatchSide::Lr, Axis::Z).unwrap();
        for (pa, pb) in a.patches.iter().zip(b.patches.iter()) {
            assert_eq!(pa.origin, pb.origin);
            assert_eq!(pa.data, pb.data);
        }
        let spec2 = PatchSpec::new(8, 50, 100).unwrap();
        let c = sample_patches(&v, &mask, &spec2, PatchSide::Lr, Axis::Z).unwrap();
        assert!(
            a.patches.iter().zip(c.patches.iter()).any(|(x, y)| x.origin != y.origin),
            "different seeds should draw different patches"
        );
    }

    #[test]
    fn patch_larger_than_mask_bbox_does_not_fit() {
        let v = body_with_cavities((24, 24, 24), 0.0, -900.0, &[([4, 4, 4], [20, 20, 20])]);
        let mask = extract_lung_mask(&v, -400.0, &SeedPolicy::AllBelowThreshold).unwrap();
        let n = normalize_intensity(&v, (-1000.0, 400.0)).unwrap();
        // Mask bbox is 16x16 in-plane; a 32x32 patch cannot fit.
        let spec = PatchSpec {
            lr_size: 32,
            hr_size: 256,
            count_per_case: 1,
            rng_seed: 0,
        };
        let err = sample_patches(&n, &mask, &spec, PatchSide::Lr, Axis::Z).unwrap_err();
        assert!(matches!(err, Error::PatchDoesNotFit { .. }));
    }

    #[test]
    fn stitch_2x2_grid_of_tiles() {
        let tiles: Vec<Array2<f32>> = (0..4)
            .map(|i| Array2::from_elem((256, 256), i as f32))
            .collect();
        let img = stitch_patches(&tiles, (2, 2)).unwrap();
        assert_eq!(img.dim(), (512, 512));
        assert_eq!(img[[0, 0]], 0.0);
        assert_eq!(img[[0, 511]], 1.0);
        assert_eq!(img[[511, 0]], 2.0);
        assert_eq!(img[[511, 511]], 3.0);
    }

    #[test]
    fn stitch_count_mismatch_is_rejected() {
        let tiles: Vec<Array2<f32>> = (0..3).map(|_| Array2::zeros((4, 4))).collect();
        assert!(stitch_patches(&tiles, (2, 2)).is_err());
    }

    #[test]
    fn stitch_nonuniform_tiles_are_rejected() {
        let tiles = vec![Array2::<f32>::zeros((4, 4)), Array2::<f32>::zeros((4, 5))];
        assert!(stitch_patches(&tiles, (1, 2)).is_err());
    }

    #[test]
    fn split_then_stitch_is_identity() {
        let mut rng = crate::util::derive_rng(3, "volume-test");
        let img = Array2::from_shape_fn((32, 48), |_| rng.random_range(-1.0f32..1.0));
        let (tiles, grid) = split_into_tiles(&img.view(), 16).unwrap();
        let back = stitch_patches(&tiles, grid).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn patch_set_round_trips_through_directory() {
        let (v, mask) = sampling_fixture();
        let spec = PatchSpec::new(8, 10, 5).unwrap();
        let set = sample_patches(&v, &mask, &spec, PatchSide::Lr, Axis::Z).unwrap();
        let dir = tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let loaded = PatchSet::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.spec, set.spec);
        assert_eq!(loaded.patches.len(), set.patches.len());
        for (a, b) in set.patches.iter().zip(loaded.patches.iter()) {
            assert_eq!(a.data, b.data);
            assert_eq!(a.origin, b.origin);
            assert_eq!(a.source_volume_id, b.source_volume_id);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_volume_round_trip(seed in 0u64..1000) {
            let dir = tempdir().unwrap();
            let mut rng = crate::util::derive_rng(seed, "prop-volume");
            let nz = rng.random_range(1..5usize);
            let ny = rng.random_range(1..6usize);
            let nx = rng.random_range(1..6usize);
            let data = Array3::from_shape_fn((nz, ny, nx), |_| rng.random_range(-2000.0f32..2000.0));
            let v = test_volume(data);
            let path = dir.path().join("v.vol");
            save_volume(&v, &path).unwrap();
            prop_assert_eq!(load_volume(&path).unwrap(), v);
        }

        #[test]
        fn prop_normalize_monotone_and_bounded(seed in 0u64..1000) {
            let mut rng = crate::util::derive_rng(seed, "prop-norm");
            let lo = rng.random_range(-2000.0f64..0.0);
            let hi = lo + rng.random_range(1.0f64..3000.0);
            let mut values: Vec<f32> = (0..16).map(|_| rng.random_range(lo as f32..hi as f32)).collect();
            values.sort_by(f32::total_cmp);
            let data = Array3::from_shape_vec((1, 1, 16), values.clone()).unwrap();
            let v = test_volume(data);
            let n = normalize_intensity(&v, (lo, hi)).unwrap();
            let out: Vec<f32> = n.data.iter().copied().collect();
            for w in out.windows(2) {
                prop_assert!(w[0] <= w[1], "normalization must be monotone");
            }
            for &x in &out {
                prop_assert!((-1.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn prop_split_stitch_identity(th in 1usize..5, tw in 1usize..5, tile in 1usize..5) {
            let (h, w) = (th * tile, tw * tile);
            let img = Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f32);
            let (tiles, grid) = split_into_tiles(&img.view(), tile).unwrap();
            let back = stitch_patches(&tiles, grid).unwrap();
            prop_assert_eq!(img, back);
        }
    }
}
