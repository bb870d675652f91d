//! Reference sweep templates, probe placement on the cortical surface, and
//! oblique slice-series extraction.
//!
//! A reference sweep lives in its own local frame: the probe face runs along
//! local `x` from `L1` to `R1`, imaging depth grows along local `y`, and the
//! frames are stacked along the trajectory direction `n1` (local `z`). Pixel
//! `(u, v)` of frame `f` samples the local point
//!
//! ```text
//! x = (u + 0.5)·pixel − cols·pixel/2,   y = (v + 0.5)·pixel,   z = (f − (F−1)/2)·spacing
//! ```
//!
//! so the probe face is the top image row and `v` indexes depth.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_rigid, extract_surface, sample_contact_point, solve_extremities, tumor_stats, PointSet, RigidTransform,
    TumorStats,
};
use crate::raster::Image2;
use crate::volume::{nearest_at_voxel, trilinear_at_voxel, CaseData, Channel, LABEL_FILL, MR_FILL};

pub const FRAME_SHAPE: (usize, usize) = (192, 192);
pub const FRAME_PIXEL_MM: f64 = 0.5;
pub const DEFAULT_FRAME_COUNT: usize = 70;
pub const DEFAULT_FRAME_SPACING_MM: f64 = 0.5;
pub const DEFAULT_WIDTH_MM: f64 = 30.0;
pub const DEFAULT_DEPTH_MM: f64 = 96.0;
/// Default contact-point length scale, in mm².
pub const DEFAULT_LAMBDA: f64 = 100.0;

const UNIT_TOLERANCE: f64 = 1e-9;

/// Imaging region of the probe, in the sweep-local `(x, y)` plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Fov {
    /// `|x| ≤ width/2` and `0 ≤ y ≤ depth`.
    Rect { width_mm: f64, depth_mm: f64 },
    /// Curvilinear sector with its apex `apex_offset_mm` above the probe face.
    Fan {
        apex_offset_mm: f64,
        half_angle_deg: f64,
        depth_mm: f64,
    },
}

impl Fov {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Fov::Rect { width_mm, depth_mm } => width_mm > 0.0 && depth_mm > 0.0,
            Fov::Fan {
                apex_offset_mm,
                half_angle_deg,
                depth_mm,
            } => apex_offset_mm >= 0.0 && half_angle_deg > 0.0 && half_angle_deg < 90.0 && depth_mm > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSweep(format!("invalid field of view {self:?}")))
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Fov::Rect { width_mm, depth_mm } => x.abs() <= 0.5 * width_mm && (0.0..=depth_mm).contains(&y),
            Fov::Fan {
                apex_offset_mm,
                half_angle_deg,
                depth_mm,
            } => {
                let dy = y + apex_offset_mm;
                let r = x.hypot(dy);
                dy >= 0.0
                    && x.atan2(dy).abs() <= half_angle_deg.to_radians()
                    && r >= apex_offset_mm
                    && r <= apex_offset_mm + depth_mm
            }
        }
    }
}

/// Probe geometry and trajectory template.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSweep {
    pub width: f64,
    pub frame_count: usize,
    pub frame_spacing: f64,
    /// `(columns, rows)`.
    pub frame_shape: (usize, usize),
    pub frame_pixel: f64,
    pub l1: Point3<f64>,
    pub r1: Point3<f64>,
    pub n1: Vector3<f64>,
    pub fov: Fov,
}

/// Parameters of a canonical reference sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepParams {
    pub width: f64,
    pub frame_count: usize,
    pub frame_spacing: f64,
    /// `None` selects `rect(width, 96 mm)`.
    pub fov: Option<Fov>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH_MM,
            frame_count: DEFAULT_FRAME_COUNT,
            frame_spacing: DEFAULT_FRAME_SPACING_MM,
            fov: None,
        }
    }
}

/// Canonical template: median plane `z = 0`, `L1 = (−w/2, 0, 0)`,
/// `R1 = (w/2, 0, 0)`, `n1 = +z`.
pub fn synth_reference_sweep(params: &SweepParams) -> Result<ReferenceSweep> {
    let sweep = ReferenceSweep {
        width: params.width,
        frame_count: params.frame_count,
        frame_spacing: params.frame_spacing,
        frame_shape: FRAME_SHAPE,
        frame_pixel: FRAME_PIXEL_MM,
        l1: Point3::new(-0.5 * params.width, 0.0, 0.0),
        r1: Point3::new(0.5 * params.width, 0.0, 0.0),
        n1: Vector3::z(),
        fov: params.fov.unwrap_or(Fov::Rect {
            width_mm: params.width,
            depth_mm: DEFAULT_DEPTH_MM,
        }),
    };
    sweep.validate()?;
    Ok(sweep)
}

/// On-disk sweep template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub width_mm: f64,
    pub frame_count: usize,
    pub frame_spacing_mm: f64,
    /// Defaults to a rectangle as wide as the probe and 96 mm deep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov: Option<Fov>,
    #[serde(rename = "L1", default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<[f64; 3]>,
    #[serde(rename = "R1", default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<[f64; 3]>,
}

impl ReferenceSweep {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidSweep(format!("width must be > 0, got {}", self.width)));
        }
        if self.frame_count == 0 {
            return Err(Error::InvalidSweep("frame_count must be >= 1".into()));
        }
        if !(self.frame_spacing > 0.0) {
            return Err(Error::InvalidSweep(format!(
                "frame spacing must be > 0, got {}",
                self.frame_spacing
            )));
        }
        if self.frame_shape.0 == 0 || self.frame_shape.1 == 0 || !(self.frame_pixel > 0.0) {
            return Err(Error::InvalidSweep("frame shape and pixel size must be positive".into()));
        }
        if (self.n1.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidSweep(format!(
                "non-unit trajectory direction (|n1| = {})",
                self.n1.norm()
            )));
        }
        let lr = self.r1 - self.l1;
        if (lr.norm() - self.width).abs() > 1e-9 * self.width.max(1.0) {
            return Err(Error::InvalidSweep(format!(
                "|R1 - L1| = {} does not match width {}",
                lr.norm(),
                self.width
            )));
        }
        if (lr / lr.norm()).dot(&self.n1).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidSweep(
                "trajectory direction n1 is not orthogonal to R1 - L1".into(),
            ));
        }
        self.fov.validate()
    }

    pub fn from_file_repr(file: SweepFile) -> Result<Self> {
        let half = 0.5 * file.width_mm;
        let l1 = file.l1.map_or(Point3::new(-half, 0.0, 0.0), Point3::from);
        let r1 = file.r1.map_or(Point3::new(half, 0.0, 0.0), Point3::from);
        if file.l1.is_some() != file.r1.is_some() {
            return Err(Error::InvalidSweep("L1 and R1 must be given together".into()));
        }
        let sweep = ReferenceSweep {
            width: file.width_mm,
            frame_count: file.frame_count,
            frame_spacing: file.frame_spacing_mm,
            frame_shape: FRAME_SHAPE,
            frame_pixel: FRAME_PIXEL_MM,
            l1,
            r1,
            n1: file.n1.map_or(Vector3::z(), Vector3::from),
            fov: file.fov.unwrap_or(Fov::Rect {
                width_mm: file.width_mm,
                depth_mm: DEFAULT_DEPTH_MM,
            }),
        };
        sweep.validate()?;
        Ok(sweep)
    }

    pub fn to_file_repr(&self) -> SweepFile {
        SweepFile {
            width_mm: self.width,
            frame_count: self.frame_count,
            frame_spacing_mm: self.frame_spacing,
            fov: Some(self.fov),
            l1: Some(self.l1.coords.into()),
            r1: Some(self.r1.coords.into()),
            n1: Some(self.n1.into()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SweepFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidSweep(format!("reference sweep JSON: {e}")))?;
        Self::from_file_repr(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_repr()).expect("sweep template serializes")
    }

    pub fn midpoint(&self) -> Point3<f64> {
        Point3::from((self.l1.coords + self.r1.coords) * 0.5)
    }

    /// Local axes: probe face direction, depth direction, trajectory direction.
    pub fn axes(&self) -> [Vector3<f64>; 3] {
        let ex = (self.r1 - self.l1) / self.width;
        let ez = self.n1;
        [ex, ez.cross(&ex), ez]
    }

    /// Trajectory offset of frame `f` from the median frame.
    pub fn frame_offset(&self, f: usize) -> f64 {
        (f as f64 - (self.frame_count as f64 - 1.0) / 2.0) * self.frame_spacing
    }

    /// In-plane local coordinates `(x, y)` of pixel `(u, v)`.
    pub fn pixel_local(&self, u: usize, v: usize) -> (f64, f64) {
        let px = self.frame_pixel;
        let x = (u as f64 + 0.5) * px - 0.5 * self.frame_shape.0 as f64 * px;
        let y = (v as f64 + 0.5) * px;
        (x, y)
    }

    /// Sweep-local 3D position of pixel `(u, v)` on frame `f`.
    pub fn pixel_point(&self, u: usize, v: usize, f: usize) -> Point3<f64> {
        let (x, y) = self.pixel_local(u, v);
        let [ex, ey, ez] = self.axes();
        self.midpoint() + ex * x + ey * y + ez * self.frame_offset(f)
    }

    pub fn fov_mask(&self) -> Image2<bool> {
        let (w, h) = self.frame_shape;
        Image2::from_fn(w, h, |u, v| {
            let (x, y) = self.pixel_local(u, v);
            self.fov.contains(x, y)
        })
    }

    /// Distance of each pixel row from the probe face, in mm.
    pub fn depth_map(&self) -> Image2<f64> {
        let (w, h) = self.frame_shape;
        Image2::from_fn(w, h, |u, v| self.pixel_local(u, v).1)
    }

    /// Correspondence points used for placement: `L1, R1, Mid1, Mid1 + δ·n1`.
    pub fn anchor_points(&self) -> PointSet {
        let mid = self.midpoint();
        PointSet(vec![self.l1, self.r1, mid, mid + self.n1 * self.width])
    }
}

pub fn load_reference_sweep(path: &Path) -> Result<ReferenceSweep> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ReferenceSweep::from_json(&text).map_err(|e| match e {
        Error::InvalidSweep(msg) => Error::InvalidSweep(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_reference_sweep(sweep: &ReferenceSweep, path: &Path) -> Result<()> {
    std::fs::write(path, sweep.to_json()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Placement

/// Solved placement of a reference sweep in patient space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlacement {
    /// Sweep-local to world (mm).
    pub transform: RigidTransform,
    #[serde(rename = "C2", with = "crate::serde_util::point")]
    pub c2: Point3<f64>,
    #[serde(rename = "L2", with = "crate::serde_util::point")]
    pub l2: Point3<f64>,
    #[serde(rename = "R2", with = "crate::serde_util::point")]
    pub r2: Point3<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub n2: Vector3<f64>,
    /// Tumor centroid.
    #[serde(rename = "M2", with = "crate::serde_util::point")]
    pub m2: Point3<f64>,
    pub contact_index: usize,
    pub left_index: usize,
    pub right_index: usize,
    /// RMS distance of the fitted anchor correspondences, mm.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementOptions {
    /// Contact-point length scale, mm².
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the distance-to-contact term when choosing `R2`.
    #[serde(default)]
    pub beta: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for PlacementOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: 0.0,
        }
    }
}

/// Per-case quantities shared by every placement: cortical surface and
/// tumor statistics.
#[derive(Clone, Debug)]
pub struct PlacementContext {
    pub surface: PointSet,
    pub stats: TumorStats,
    /// Half thickness of the slab around the median plane from which probe
    /// extremities are chosen, mm.
    pub plane_tolerance: f64,
}

impl PlacementContext {
    pub fn new(case: &CaseData) -> Result<Self> {
        let surface = extract_surface(&case.brain_mask)?;
        if surface.len() < 2 {
            return Err(Error::InvalidArgument("brain surface has fewer than 2 points".into()));
        }
        let spacing = case.grid().spacing();
        Ok(Self {
            surface,
            stats: tumor_stats(&case.tumor)?,
            plane_tolerance: 0.5 * spacing.iter().copied().fold(0.0, f64::max),
        })
    }

    /// Indices of surface points within `plane_tolerance` of the plane
    /// through `c2` orthogonal to `normal`.
    pub fn in_plane(&self, c2: &Point3<f64>, normal: &Vector3<f64>) -> Vec<usize> {
        self.surface
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - c2).dot(normal).abs() <= self.plane_tolerance)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sample a contact point `C2`, choose the probe extremities among the
    /// surface points of the median plane (through `C2`, orthogonal to the
    /// tumor principal axis `n2`), and fit the rigid transform from the
    /// reference anchors onto the patient anchors. The patient anchors use
    /// the extremities projected onto the median plane, so the placed median
    /// slice lies exactly in that plane.
    ///
    /// Both left/right assignments are fitted. The lower residual wins; when
    /// the residuals agree to 1e-9 mm (always the case for anchors symmetric
    /// under a half-turn about the trajectory axis) the assignment whose depth
    /// axis points toward the tumor centroid is kept.
    pub fn place<R: Rng + ?Sized>(
        &self,
        sweep: &ReferenceSweep,
        opts: &PlacementOptions,
        rng: &mut R,
    ) -> Result<SweepPlacement> {
        let (c2, contact_index) = sample_contact_point(&self.surface, &self.stats.centroid, opts.lambda, rng)?;
        let n2 = self.stats.principal_axis;
        let mut candidates = self.in_plane(&c2, &n2);
        if candidates.len() < 2 {
            log::warn!("median plane holds {} surface points; using the whole surface", candidates.len());
            candidates = (0..self.surface.len()).collect();
        }
        let subset = PointSet(candidates.iter().map(|&i| self.surface.0[i]).collect());
        let (li, ri) = solve_extremities(&subset, &c2, sweep.width, opts.beta)?;
        let (li, ri) = (candidates[li], candidates[ri]);

        let project = |p: &Point3<f64>| p - n2 * (p - c2).dot(&n2);
        let src = sweep.anchor_points();
        let depth_axis = sweep.axes()[1];
        let fit = |a: usize, b: usize| -> Result<(RigidTransform, f64, f64)> {
            let (pa, pb) = (project(&self.surface.0[a]), project(&self.surface.0[b]));
            let mid = Point3::from((pa.coords + pb.coords) * 0.5);
            let dst = PointSet(vec![pa, pb, mid, mid + n2 * sweep.width]);
            let t = estimate_rigid(&src, &dst)?;
            let residual = t.rms_residual(&src, &dst);
            let toward_tumor = t.apply_vector(&depth_axis).dot(&(self.stats.centroid - mid));
            Ok((t, residual, toward_tumor))
        };
        let direct = fit(li, ri)?;
        let swapped = fit(ri, li)?;
        let use_swapped = if (direct.1 - swapped.1).abs() > 1e-9 {
            swapped.1 < direct.1
        } else {
            swapped.2 > direct.2
        };
        let ((transform, residual, _), (left_index, right_index)) =
            if use_swapped { (swapped, (ri, li)) } else { (direct, (li, ri)) };
        Ok(SweepPlacement {
            transform,
            c2,
            l2: self.surface.0[left_index],
            r2: self.surface.0[right_index],
            n2,
            m2: self.stats.centroid,
            contact_index,
            left_index,
            right_index,
            residual,
        })
    }
}

/// One-shot placement; builds a [`PlacementContext`] for the case.
pub fn place_sweep<R: Rng + ?Sized>(
    case: &CaseData,
    sweep: &ReferenceSweep,
    opts: &PlacementOptions,
    rng: &mut R,
) -> Result<SweepPlacement> {
    PlacementContext::new(case)?.place(sweep, opts, rng)
}

// ---------------------------------------------------------------------------
// Slicing

/// World-space geometry of one frame: pixel `(u, v)` sits at
/// `origin + u·axis_u + v·axis_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    #[serde(with = "crate::serde_util::point")]
    pub origin: Point3<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub axis_u: Vector3<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub axis_v: Vector3<f64>,
}

impl FrameGeometry {
    pub fn pixel_world(&self, u: usize, v: usize) -> Point3<f64> {
        self.origin + self.axis_u * u as f64 + self.axis_v * v as f64
    }
}

/// Per-frame MR slices and labels within the probe field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSeries {
    pub channel_names: Vec<Channel>,
    /// `frames[f][c]`.
    pub frames: Vec<Vec<Image2<f64>>>,
    pub labels: Vec<Image2<u8>>,
    pub fov_mask: Image2<bool>,
    pub depth_map: Image2<f64>,
    pub geometry: Vec<FrameGeometry>,
    pub label_set: BTreeSet<u8>,
    pub pixel_mm: f64,
}

impl SliceSeries {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// `(columns, rows)`.
    pub fn shape(&self) -> (usize, usize) {
        self.fov_mask.shape()
    }
}

/// Frame geometry of `sweep` placed by `transform`.
pub fn frame_geometry(sweep: &ReferenceSweep, transform: &RigidTransform) -> Vec<FrameGeometry> {
    let [ex, ey, _] = sweep.axes();
    (0..sweep.frame_count)
        .map(|f| FrameGeometry {
            origin: transform.apply(&sweep.pixel_point(0, 0, f)),
            axis_u: transform.apply_vector(&(ex * sweep.frame_pixel)),
            axis_v: transform.apply_vector(&(ey * sweep.frame_pixel)),
        })
        .collect()
}

/// Resample the case along the placed sweep: MR channels trilinearly (fill
/// −1), tumor labels by nearest voxel (fill 0). Pixels outside the field of
/// view carry the fill values.
pub fn slice_series(
    case: &CaseData,
    placement: &SweepPlacement,
    sweep: &ReferenceSweep,
    channels: &[Channel],
) -> Result<SliceSeries> {
    if channels.is_empty() {
        return Err(Error::InvalidArgument("no channels selected for slicing".into()));
    }
    let volumes = channels
        .iter()
        .map(|c| case.channels.get(c).ok_or_else(|| Error::MissingChannel(c.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let grid = case.grid();
    let fov_mask = sweep.fov_mask();
    let (w, h) = sweep.frame_shape;
    let geometry = frame_geometry(sweep, &placement.transform);

    let per_frame: Vec<(Vec<Image2<f64>>, Image2<u8>)> = geometry
        .par_iter()
        .map(|g| {
            let origin = grid.world_to_voxel(&g.origin);
            let origin = Vector3::new(origin[0], origin[1], origin[2]);
            let du = grid.world_vector_to_voxel(&g.axis_u);
            let dv = grid.world_vector_to_voxel(&g.axis_v);
            let mut images: Vec<Vec<f64>> = vec![vec![MR_FILL; w * h]; volumes.len()];
            let mut labels = vec![LABEL_FILL; w * h];
            for v in 0..h {
                let row = origin + dv * v as f64;
                for u in 0..w {
                    if !*fov_mask.get(u, v) {
                        continue;
                    }
                    let c = row + du * u as f64;
                    let c = [c.x, c.y, c.z];
                    let idx = v * w + u;
                    for (img, vol) in images.iter_mut().zip(&volumes) {
                        img[idx] = trilinear_at_voxel(vol, c, MR_FILL);
                    }
                    labels[idx] = nearest_at_voxel(&case.tumor, c, LABEL_FILL);
                }
            }
            let images = images
                .into_iter()
                .map(|d| Image2::from_vec(w, h, d).expect("frame buffer sized to shape"))
                .collect();
            (images, Image2::from_vec(w, h, labels).expect("label buffer sized to shape"))
        })
        .collect();

    let (frames, labels) = per_frame.into_iter().unzip();
    Ok(SliceSeries {
        channel_names: channels.to_vec(),
        frames,
        labels,
        fov_mask,
        depth_map: sweep.depth_map(),
        geometry,
        label_set: case.tumor.label_set.clone(),
        pixel_mm: sweep.frame_pixel,
    })
}
