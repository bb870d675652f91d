//! Volumetric images on a regular grid with a voxel-to-world affine (mm).

mod nifti;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nifti::{load_labels, load_nifti, load_volume, save_labels, save_volume, save_volume_as, DataType, NiftiData};

/// Background value of normalized MR intensities; used as out-of-grid fill.
pub const MR_FILL: f64 = -1.0;
/// Out-of-grid fill for label sampling.
pub const LABEL_FILL: u8 = 0;

/// MR sequence carried by a [`Volume3D`]. Ordering is ceT1, T2, FLAIR, then
/// any other name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    CeT1,
    T2,
    Flair,
    Other(String),
}

impl Channel {
    pub fn as_str(&self) -> &str {
        match self {
            Channel::CeT1 => "ceT1",
            Channel::T2 => "T2",
            Channel::Flair => "FLAIR",
            Channel::Other(name) => name,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ceT1" => Channel::CeT1,
            "T2" => Channel::T2,
            "FLAIR" => Channel::Flair,
            "" => return Err(Error::InvalidArgument("empty channel name".into())),
            other if other.contains(['/', '\\', '-', ',', '+']) => {
                return Err(Error::InvalidArgument(format!("invalid channel name {other:?}")))
            }
            other => Channel::Other(other.to_string()),
        })
    }
}

impl Serialize for Channel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Channel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Regular 3D grid: dimensions, spacing, and the voxel-to-world affine.
#[derive(Clone, Debug)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.affine == other.affine
    }
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into_owned();
        let det = linear.determinant();
        let homogeneous = affine[(3, 0)] == 0.0 && affine[(3, 1)] == 0.0 && affine[(3, 2)] == 0.0 && affine[(3, 3)] == 1.0;
        if !(det.abs() > 0.0) || !det.is_finite() || !homogeneous {
            return Err(Error::SingularAffine(det.abs()));
        }
        let inverse = affine.try_inverse().ok_or(Error::SingularAffine(det.abs()))?;
        Ok(Self {
            dims,
            spacing,
            affine,
            inverse,
        })
    }

    /// Axis-aligned grid whose voxel `(0,0,0)` sits at `origin`.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Self::new(dims, spacing, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Matrix4<f64> {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn voxel_to_world(&self, ijk: [f64; 3]) -> Point3<f64> {
        let h = self.affine * Vector4::new(ijk[0], ijk[1], ijk[2], 1.0);
        Point3::new(h.x, h.y, h.z)
    }

    pub fn world_to_voxel(&self, p: &Point3<f64>) -> [f64; 3] {
        let h = self.inverse * Vector4::new(p.x, p.y, p.z, 1.0);
        [h.x, h.y, h.z]
    }

    /// Voxel-space displacement for a world-space displacement.
    pub fn world_vector_to_voxel(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.inverse.fixed_view::<3, 3>(0, 0) * d
    }

    /// Physical extent along each axis, voxel edge to voxel edge.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }
}

/// Scalar MR volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub grid: Grid,
    pub data: Vec<f64>,
    pub channel: Channel,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>, channel: Channel) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "volume data length {} does not match grid {:?}",
                data.len(),
                grid.dims()
            )));
        }
        Ok(Self {
            grid,
            data,
            channel,
        })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// Integer label volume. `label_set` lists the declared foreground labels;
/// 0 is always background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub data: Vec<u8>,
    pub label_set: BTreeSet<u8>,
}

impl LabelVolume {
    /// Builds a label volume whose label set is the set of nonzero values present.
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        let label_set = data.iter().copied().filter(|&l| l != 0).collect();
        Self::with_label_set(grid, data, label_set)
    }

    pub fn with_label_set(grid: Grid, data: Vec<u8>, mut label_set: BTreeSet<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "label data length {} does not match grid {:?}",
                data.len(),
                grid.dims()
            )));
        }
        label_set.remove(&0);
        if let Some(&bad) = data.iter().find(|&&l| l != 0 && !label_set.contains(&l)) {
            return Err(Error::InvalidLabel(bad as i64));
        }
        Ok(Self {
            grid,
            data,
            label_set,
        })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

/// Co-registered pre-operative inputs for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseData {
    pub channels: BTreeMap<Channel, Volume3D>,
    pub tumor: LabelVolume,
    pub brain_mask: LabelVolume,
}

impl CaseData {
    pub fn new(
        channels: BTreeMap<Channel, Volume3D>,
        tumor: LabelVolume,
        brain_mask: LabelVolume,
    ) -> Result<Self> {
        if channels.is_empty() || channels.len() > 3 {
            return Err(Error::InvalidArgument(format!(
                "a case needs 1 to 3 MR channels, found {}",
                channels.len()
            )));
        }
        for (name, vol) in &channels {
            if &vol.channel != name {
                return Err(Error::InvalidArgument(format!(
                    "channel key {name} holds a {} volume",
                    vol.channel
                )));
            }
            if vol.grid != tumor.grid {
                return Err(Error::GridMismatch(format!("channel {name} vs tumor")));
            }
        }
        if brain_mask.grid != tumor.grid {
            return Err(Error::GridMismatch("brain mask vs tumor".into()));
        }
        if tumor.foreground_count() == 0 {
            return Err(Error::Empty("tumor segmentation"));
        }
        if brain_mask.foreground_count() == 0 {
            return Err(Error::Empty("brain mask"));
        }
        Ok(Self {
            channels,
            tumor,
            brain_mask,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.tumor.grid
    }

    pub fn available_channels(&self) -> BTreeSet<Channel> {
        self.channels.keys().cloned().collect()
    }
}

/// How a case directory is turned into [`CaseData`].
#[derive(Clone, Debug, PartialEq)]
pub struct CaseLoadOptions {
    /// Isotropic resampling target in mm; `None` keeps the native grid.
    pub resample_mm: Option<f64>,
    pub normalization: Normalization,
}

impl Default for CaseLoadOptions {
    fn default() -> Self {
        Self {
            resample_mm: Some(0.5),
            normalization: Normalization::MinMax,
        }
    }
}

pub const TUMOR_FILE_STEM: &str = "tumor";
pub const BRAIN_MASK_FILE_STEM: &str = "brain_mask";

fn find_nifti(dir: &Path, stem: &str) -> Option<std::path::PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Load `<dir>/{ceT1,T2,FLAIR}.nii[.gz]`, `tumor.nii[.gz]` and
/// `brain_mask.nii[.gz]`, then resample and normalize the MR channels.
pub fn load_case(dir: &Path, opts: &CaseLoadOptions) -> Result<CaseData> {
    let mut channels = BTreeMap::new();
    for channel in [Channel::CeT1, Channel::T2, Channel::Flair] {
        if let Some(path) = find_nifti(dir, channel.as_str()) {
            let mut vol = load_volume(&path)?;
            vol.channel = channel.clone();
            channels.insert(channel, vol);
        }
    }
    let missing = |stem: &str| {
        Error::io(
            dir.join(format!("{stem}.nii.gz")),
            std::io::Error::new(std::io::ErrorKind::NotFound, "required case file not found"),
        )
    };
    let tumor_path = find_nifti(dir, TUMOR_FILE_STEM).ok_or_else(|| missing(TUMOR_FILE_STEM))?;
    let brain_path = find_nifti(dir, BRAIN_MASK_FILE_STEM).ok_or_else(|| missing(BRAIN_MASK_FILE_STEM))?;
    let tumor = load_labels(&tumor_path)?;
    let brain = load_labels(&brain_path)?;
    prepare_case(&CaseData::new(channels, tumor, brain)?, opts)
}

/// Resample (MR trilinear, labels nearest) and normalize an in-memory case.
pub fn prepare_case(case: &CaseData, opts: &CaseLoadOptions) -> Result<CaseData> {
    let mut channels = BTreeMap::new();
    for (name, vol) in &case.channels {
        let vol = match opts.resample_mm {
            Some(mm) => vol.resample_isotropic(mm, Interp::Trilinear)?,
            None => vol.clone(),
        };
        channels.insert(name.clone(), normalize_intensity(&vol, opts.normalization));
    }
    let (tumor, brain) = match opts.resample_mm {
        Some(mm) => (
            case.tumor.resample_isotropic(mm, Interp::Nearest)?,
            case.brain_mask.resample_isotropic(mm, Interp::Nearest)?,
        ),
        None => (case.tumor.clone(), case.brain_mask.clone()),
    };
    CaseData::new(channels, tumor, brain)
}

/// Write a case in the layout read by [`load_case`]. MR channels are stored
/// as float32.
pub fn save_case(case: &CaseData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, vol) in &case.channels {
        save_volume_as(vol, &dir.join(format!("{name}.nii.gz")), DataType::Float32)?;
    }
    save_labels(&case.tumor, &dir.join(format!("{TUMOR_FILE_STEM}.nii.gz")))?;
    save_labels(&case.brain_mask, &dir.join(format!("{BRAIN_MASK_FILE_STEM}.nii.gz")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampling

/// Trilinear interpolation at world point `p`; `fill` outside `[0, n-1]^3`
/// in voxel space.
pub fn sample_trilinear(vol: &Volume3D, p: &Point3<f64>, fill: f64) -> f64 {
    let c = vol.grid.world_to_voxel(p);
    trilinear_at_voxel(vol, c, fill)
}

/// Split a continuous coordinate into a base index and fraction along an axis
/// of length `n`, or `None` if outside `[0, n-1]`.
#[inline]
fn axis_cell(c: f64, n: usize) -> Option<(usize, f64)> {
    if !(c >= 0.0 && c <= (n - 1) as f64) {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let base = (c.floor() as usize).min(n - 2);
    Some((base, c - base as f64))
}

/// Trilinear interpolation at a continuous voxel coordinate.
#[inline]
pub fn trilinear_at_voxel(vol: &Volume3D, c: [f64; 3], fill: f64) -> f64 {
    let [nx, ny, nz] = vol.grid.dims;
    let (Some((i, fx)), Some((j, fy)), Some((k, fz))) =
        (axis_cell(c[0], nx), axis_cell(c[1], ny), axis_cell(c[2], nz))
    else {
        return fill;
    };
    let (di, dj, dk) = ((nx > 1) as usize, ((ny > 1) as usize) * nx, ((nz > 1) as usize) * nx * ny);
    let base = vol.grid.index(i, j, k);
    let d = &vol.data;
    let c00 = d[base] * (1.0 - fx) + d[base + di] * fx;
    let c10 = d[base + dj] * (1.0 - fx) + d[base + dj + di] * fx;
    let c01 = d[base + dk] * (1.0 - fx) + d[base + dk + di] * fx;
    let c11 = d[base + dk + dj] * (1.0 - fx) + d[base + dk + dj + di] * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Nearest voxel index along one axis; ties round toward negative infinity.
#[inline]
fn nearest_index(c: f64, n: usize) -> Option<usize> {
    let r = (c - 0.5).ceil();
    if r >= 0.0 && r < n as f64 {
        Some(r as usize)
    } else {
        None
    }
}

/// Nearest-voxel label at world point `p`; `fill` outside the grid.
pub fn sample_nearest(vol: &LabelVolume, p: &Point3<f64>, fill: u8) -> u8 {
    nearest_at_voxel(vol, vol.grid.world_to_voxel(p), fill)
}

#[inline]
pub fn nearest_at_voxel(vol: &LabelVolume, c: [f64; 3], fill: u8) -> u8 {
    let [nx, ny, nz] = vol.grid.dims;
    match (nearest_index(c[0], nx), nearest_index(c[1], ny), nearest_index(c[2], nz)) {
        (Some(i), Some(j), Some(k)) => vol.at(i, j, k),
        _ => fill,
    }
}

// ---------------------------------------------------------------------------
// Normalization

/// Intensity normalization into `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    MinMax,
    /// Clip to the `lo`/`hi` percentiles (in percent) before min/max mapping.
    Percentile { lo: f64, hi: f64 },
}

/// Linear-interpolation quantile (type 7) of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn normalize_intensity(vol: &Volume3D, mode: Normalization) -> Volume3D {
    let (lo, hi) = match mode {
        Normalization::MinMax => vol
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        Normalization::Percentile { lo, hi } => {
            let mut sorted = vol.data.clone();
            sorted.sort_by(f64::total_cmp);
            (quantile_sorted(&sorted, lo / 100.0), quantile_sorted(&sorted, hi / 100.0))
        }
    };
    let data = if !(hi > lo) {
        vec![0.0; vol.data.len()]
    } else {
        let scale = 2.0 / (hi - lo);
        vol.data
            .iter()
            .map(|&v| {
                if v >= hi {
                    1.0
                } else if v <= lo {
                    -1.0
                } else {
                    ((v - lo) * scale - 1.0).clamp(-1.0, 1.0)
                }
            })
            .collect()
    };
    Volume3D {
        grid: vol.grid.clone(),
        data,
        channel: vol.channel.clone(),
    }
}

// ---------------------------------------------------------------------------
// Resampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Output grid for isotropic resampling to `target` mm.
///
/// Each axis keeps its direction; the output count is `round(n * s / target)`
/// (at least 1) and the first output voxel center sits half an output voxel
/// inside the input's first voxel edge, so the physical extent is preserved
/// within one voxel.
pub fn isotropic_grid(grid: &Grid, target: f64) -> Result<Grid> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("resampling target must be > 0, got {target}")));
    }
    let mut dims = [0usize; 3];
    let mut index_map = Matrix4::identity();
    for a in 0..3 {
        let n = grid.dims[a];
        let s = grid.spacing[a];
        dims[a] = ((n as f64 * s / target).round() as usize).max(1);
        let ratio = target / s;
        index_map[(a, a)] = ratio;
        index_map[(a, 3)] = 0.5 * ratio - 0.5;
    }
    let affine = if grid.spacing == [target; 3] {
        grid.affine
    } else {
        grid.affine * index_map
    };
    Grid::new(dims, [target; 3], affine)
}

/// Isotropic resampling of a volume onto [`isotropic_grid`].
pub trait Resample: Sized {
    fn resample_isotropic(&self, target: f64, interp: Interp) -> Result<Self>;
}

/// Output voxel centers expressed in input voxel coordinates, clamped to the
/// input grid so edge voxels replicate.
fn for_each_source_coord(src: &Grid, dst: &Grid, mut f: impl FnMut([f64; 3])) {
    let to_src = src.inverse * dst.affine;
    let [nx, ny, nz] = dst.dims;
    let limit = src.dims.map(|n| (n - 1) as f64);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let h = to_src * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                f([
                    h.x.clamp(0.0, limit[0]),
                    h.y.clamp(0.0, limit[1]),
                    h.z.clamp(0.0, limit[2]),
                ]);
            }
        }
    }
}

impl Resample for Volume3D {
    fn resample_isotropic(&self, target: f64, interp: Interp) -> Result<Self> {
        let grid = isotropic_grid(&self.grid, target)?;
        if grid == self.grid {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(grid.len());
        match interp {
            Interp::Trilinear => {
                for_each_source_coord(&self.grid, &grid, |c| data.push(trilinear_at_voxel(self, c, MR_FILL)))
            }
            Interp::Nearest => {
                let dims = self.grid.dims;
                for_each_source_coord(&self.grid, &grid, |c| {
                    let idx = [0, 1, 2].map(|a| nearest_index(c[a], dims[a]).unwrap_or(0));
                    data.push(self.at(idx[0], idx[1], idx[2]));
                })
            }
        }
        Volume3D::new(grid, data, self.channel.clone())
    }
}

impl Resample for LabelVolume {
    fn resample_isotropic(&self, target: f64, interp: Interp) -> Result<Self> {
        if interp != Interp::Nearest {
            return Err(Error::InvalidArgument(
                "label volumes can only be resampled with nearest-neighbour interpolation".into(),
            ));
        }
        let grid = isotropic_grid(&self.grid, target)?;
        if grid == self.grid {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(grid.len());
        for_each_source_coord(&self.grid, &grid, |c| data.push(nearest_at_voxel(self, c, LABEL_FILL)));
        LabelVolume::with_label_set(grid, data, self.label_set.clone())
    }
}
