//! Cortical surface points, tumor statistics, contact-point sampling,
//! probe-extremity selection and least-squares rigid fitting.

use nalgebra::{Matrix3, Point3, Rotation3, SymmetricEigen, Vector3, SVD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// World-space points (mm) in a fixed enumeration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet(pub Vec<Point3<f64>>);

impl PointSet {
    pub fn points(&self) -> &[Point3<f64>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.0.is_empty() {
            return None;
        }
        let sum = self.0.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.0.len() as f64))
    }
}

impl From<Vec<Point3<f64>>> for PointSet {
    fn from(points: Vec<Point3<f64>>) -> Self {
        PointSet(points)
    }
}

const NEIGHBORS_6: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Foreground voxels with at least one background 6-neighbour (the volume
/// border counts as background), as world coordinates of voxel centers in
/// x-fastest scan order.
pub fn extract_surface(mask: &LabelVolume) -> Result<PointSet> {
    let grid = &mask.grid;
    let [nx, ny, nz] = grid.dims();
    let mut points = Vec::new();
    let mut any = false;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if mask.at(i, j, k) == 0 {
                    continue;
                }
                any = true;
                let on_surface = NEIGHBORS_6.iter().any(|d| {
                    let (a, b, c) = (i as isize + d[0], j as isize + d[1], k as isize + d[2]);
                    a < 0
                        || b < 0
                        || c < 0
                        || a >= nx as isize
                        || b >= ny as isize
                        || c >= nz as isize
                        || mask.at(a as usize, b as usize, c as usize) == 0
                });
                if on_surface {
                    points.push(grid.voxel_to_world([i as f64, j as f64, k as f64]));
                }
            }
        }
    }
    if !any {
        return Err(Error::Empty("mask"));
    }
    Ok(PointSet(points))
}

/// Foreground voxel centers in world coordinates.
pub fn foreground_points(mask: &LabelVolume) -> PointSet {
    let grid = &mask.grid;
    PointSet(
        mask.data
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(idx, _)| {
                let [i, j, k] = grid.coords(idx);
                grid.voxel_to_world([i as f64, j as f64, k as f64])
            })
            .collect(),
    )
}

/// Centroid and principal axes of a tumor segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorStats {
    #[serde(with = "crate::serde_util::point")]
    pub centroid: Point3<f64>,
    /// Unit eigenvector of the largest covariance eigenvalue.
    #[serde(with = "crate::serde_util::vector")]
    pub principal_axis: Vector3<f64>,
    /// Covariance eigenvalues (mm^2), descending.
    pub eigenvalues: [f64; 3],
}

/// Flip `axis` so its largest-magnitude component is positive; among equal
/// magnitudes the first axis (x, then y, then z) decides.
pub fn canonical_sign(axis: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for a in 1..3 {
        if axis[a].abs() > axis[best].abs() {
            best = a;
        }
    }
    if axis[best] < 0.0 {
        -axis
    } else {
        axis
    }
}

pub fn tumor_stats(tumor: &LabelVolume) -> Result<TumorStats> {
    let points = foreground_points(tumor);
    let centroid = points.centroid().ok_or(Error::Empty("tumor"))?;
    let n = points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points.points() {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.map(|i| eig.eigenvalues[i].max(0.0));
    let principal_axis = if eigenvalues[0] > 0.0 {
        canonical_sign(eig.eigenvectors.column(order[0]).normalize())
    } else {
        Vector3::x()
    };
    Ok(TumorStats {
        centroid,
        principal_axis,
        eigenvalues,
    })
}

/// Probabilities `p_i ∝ exp(-‖S_i - M‖² / lambda)`, computed with a max shift.
pub fn contact_probabilities(surface: &PointSet, target: &Point3<f64>, lambda: f64) -> Vec<f64> {
    let logits: Vec<f64> = surface
        .points()
        .iter()
        .map(|p| -(p - target).norm_squared() / lambda)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Draw a contact point from `surface` with probability proportional to
/// `exp(-‖S_i - M‖² / lambda)`. Returns the point and its index.
pub fn sample_contact_point<R: Rng + ?Sized>(
    surface: &PointSet,
    target: &Point3<f64>,
    lambda: f64,
    rng: &mut R,
) -> Result<(Point3<f64>, usize)> {
    if surface.is_empty() {
        return Err(Error::Empty("surface point set"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    let probs = contact_probabilities(surface, target, lambda);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            chosen = i;
            break;
        }
    }
    // rounding can leave `acc` just below 1; fall back to the last point with mass
    if u >= acc {
        chosen = probs.iter().rposition(|&p| p > 0.0).unwrap_or(chosen);
    }
    Ok((surface.0[chosen], chosen))
}

#[inline]
pub fn distance(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Indices of the probe extremities on the surface.
///
/// `L = argmin_i |‖S_i - C‖ - w/2|`, then
/// `R = argmin_{i ≠ L} |‖S_i - L‖ - w| + beta·|‖S_i - C‖ - w/2|`.
/// Ties go to the lowest index.
pub fn solve_extremities(surface: &PointSet, contact: &Point3<f64>, width: f64, beta: f64) -> Result<(usize, usize)> {
    if surface.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "extremity search needs at least 2 surface points, got {}",
            surface.len()
        )));
    }
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("probe width must be > 0, got {width}")));
    }
    let half = 0.5 * width;
    let pts = surface.points();
    let left = argmin(pts.iter().enumerate().map(|(i, p)| (i, (distance(p, contact) - half).abs())));
    let lp = pts[left];
    let right = argmin(pts.iter().enumerate().filter(|&(i, _)| i != left).map(|(i, p)| {
        let mut cost = (distance(p, &lp) - width).abs();
        if beta != 0.0 {
            cost += beta * (distance(p, contact) - half).abs();
        }
        (i, cost)
    }));
    Ok((left, right))
}

fn argmin(costs: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, c) in costs {
        if c < best.1 || best.0 == usize::MAX {
            best = (i, c);
        }
    }
    best.0
}

/// Proper rigid motion `p ↦ rotation·p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    #[serde(with = "crate::serde_util::matrix_rows")]
    pub rotation: Matrix3<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn apply_all(&self, set: &PointSet) -> PointSet {
        PointSet(set.points().iter().map(|p| self.apply(p)).collect())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// RMS distance between the transformed `src` and `dst`.
    pub fn rms_residual(&self, src: &PointSet, dst: &PointSet) -> f64 {
        let sum: f64 = src
            .points()
            .iter()
            .zip(dst.points())
            .map(|(s, d)| (self.apply(s) - d).norm_squared())
            .sum();
        (sum / src.len().max(1) as f64).sqrt()
    }
}

/// Least-squares proper rigid transform taking `src` onto `dst`: centroid
/// subtraction, SVD of the cross-covariance, and a sign fix on the weakest
/// singular direction when the unconstrained optimum is a reflection.
pub fn estimate_rigid(src: &PointSet, dst: &PointSet) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::SizeMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rigid fitting needs at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let cs = src.centroid().unwrap();
    let cd = dst.centroid().unwrap();
    let mut h = Matrix3::zeros();
    for (s, d) in src.points().iter().zip(dst.points()) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(sv[order[0]] > 0.0) || sv[order[1]] <= 1e-12 * sv[order[0]] {
        return Err(Error::Collinear);
    }
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(order[2], order[2])] = -1.0;
        rotation = v * flip * u.transpose();
    }
    // Newton steps on the rotation manifold; the SVD alone leaves ~1e-10 error
    for _ in 0..2 {
        let mut k = Matrix3::zeros();
        for (s, d) in src.points().iter().zip(dst.points()) {
            k += (rotation * (s - cs)) * (d - cd).transpose();
        }
        let g = Vector3::new(k[(1, 2)] - k[(2, 1)], k[(2, 0)] - k[(0, 2)], k[(0, 1)] - k[(1, 0)]);
        let hess = Matrix3::identity() * k.trace() - (k + k.transpose()) * 0.5;
        match hess.try_inverse() {
            Some(inv) => rotation = Rotation3::new(inv * g).into_inner() * rotation,
            None => break,
        }
    }
    let translation = cd.coords - rotation * cs.coords;
    Ok(RigidTransform { rotation, translation })
}
