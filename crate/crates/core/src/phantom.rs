//! Synthetic ellipsoidal phantoms: a brain mask, an embedded tumor and up to
//! three MR-like channels with piecewise-constant tissue intensities.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CaseData, Channel, Grid, LabelVolume, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    /// Direction of the first semi-axis. The frame is the smallest rotation
    /// taking `+x` onto this direction, so the default keeps the semi-axes
    /// along `x`, `y`, `z`.
    #[serde(default = "x_axis")]
    pub direction: [f64; 3],
}

fn x_axis() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

impl Ellipsoid {
    pub fn sphere(center_mm: [f64; 3], radius: f64) -> Self {
        Self {
            center_mm,
            semi_axes_mm: [radius; 3],
            direction: x_axis(),
        }
    }

    fn frame(&self) -> Result<Matrix3<f64>> {
        let d = Vector3::from(self.direction);
        if !(d.norm() > 0.0) {
            return Err(Error::InvalidArgument("ellipsoid direction must be non-zero".into()));
        }
        if self.semi_axes_mm.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid semi-axes must be > 0, got {:?}",
                self.semi_axes_mm
            )));
        }
        let a = d.normalize();
        let rot = Rotation3::rotation_between(&Vector3::x(), &a)
            .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI));
        Ok(rot.into_inner())
    }
}

/// Inside test for an ellipsoid, with the frame precomputed.
struct EllipsoidTest {
    center: Point3<f64>,
    frame_t: Matrix3<f64>,
    inv_axes2: Vector3<f64>,
}

impl EllipsoidTest {
    fn new(e: &Ellipsoid) -> Result<Self> {
        let [a, b, c] = e.semi_axes_mm;
        Ok(Self {
            center: Point3::from(e.center_mm),
            frame_t: e.frame()?.transpose(),
            inv_axes2: Vector3::new(1.0 / (a * a), 1.0 / (b * b), 1.0 / (c * c)),
        })
    }

    fn contains(&self, p: &Point3<f64>) -> bool {
        let q = self.frame_t * (p - self.center);
        q.component_mul(&q).dot(&self.inv_axes2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRecipe {
    pub channel: Channel,
    pub background: f64,
    pub brain: f64,
    pub tumor: f64,
    /// Linear intensity ramp added inside the brain, per mm of world position.
    #[serde(default)]
    pub gradient_per_mm: [f64; 3],
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub brain: Ellipsoid,
    pub tumor: Ellipsoid,
    pub tumor_label: u8,
    pub channels: Vec<ChannelRecipe>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let recipe = |channel, brain, tumor, noise_sigma| ChannelRecipe {
            channel,
            background: 0.0,
            brain,
            tumor,
            gradient_per_mm: [0.0, 0.0, 0.002],
            noise_sigma,
        };
        Self {
            dims: [128; 3],
            spacing_mm: 0.5,
            brain: Ellipsoid::sphere([0.0; 3], 28.0),
            tumor: Ellipsoid {
                center_mm: [4.0, 2.0, 14.0],
                semi_axes_mm: [8.0, 3.0, 3.0],
                direction: x_axis(),
            },
            tumor_label: 1,
            channels: vec![
                recipe(Channel::CeT1, 0.4, 0.9, 0.01),
                recipe(Channel::T2, 0.5, 0.8, 0.01),
                recipe(Channel::Flair, 0.35, 0.7, 0.01),
            ],
        }
    }
}

impl PhantomSpec {
    /// Grid centered on the world origin.
    pub fn grid(&self) -> Result<Grid> {
        let s = self.spacing_mm;
        let origin = self.dims.map(|n| -(n as f64 - 1.0) / 2.0 * s);
        Grid::axis_aligned(self.dims, [s; 3], origin)
    }
}

/// Rasterize the phantom. Voxel values are rounded to `f32` so the case
/// survives a float32 NIfTI round trip unchanged.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<CaseData> {
    if spec.tumor_label == 0 {
        return Err(Error::InvalidArgument("tumor label must be non-zero".into()));
    }
    let grid = spec.grid()?;
    let brain_test = EllipsoidTest::new(&spec.brain)?;
    let tumor_test = EllipsoidTest::new(&spec.tumor)?;

    let n = grid.len();
    let mut brain = vec![0u8; n];
    let mut tumor = vec![0u8; n];
    let mut outside = 0;
    for (idx, (b, t)) in brain.iter_mut().zip(tumor.iter_mut()).enumerate() {
        let p = grid.voxel_to_world(grid.coords(idx).map(|c| c as f64));
        let in_brain = brain_test.contains(&p);
        *b = in_brain as u8;
        if tumor_test.contains(&p) {
            *t = spec.tumor_label;
            outside += !in_brain as usize;
        }
    }
    if outside > 0 {
        return Err(Error::TumorOutsideBrain(outside));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = BTreeMap::new();
    for recipe in &spec.channels {
        if channels.contains_key(&recipe.channel) {
            return Err(Error::InvalidArgument(format!("channel {} listed twice", recipe.channel)));
        }
        let noise = Normal::new(0.0, recipe.noise_sigma.max(0.0))
            .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
        let g = Vector3::from(recipe.gradient_per_mm);
        let data = (0..n)
            .map(|idx| {
                let mut v = if tumor[idx] != 0 {
                    recipe.tumor
                } else if brain[idx] != 0 {
                    recipe.brain
                } else {
                    recipe.background
                };
                if brain[idx] != 0 {
                    let p = grid.voxel_to_world(grid.coords(idx).map(|c| c as f64));
                    v += g.dot(&p.coords);
                }
                if recipe.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                v as f32 as f64
            })
            .collect();
        channels.insert(
            recipe.channel.clone(),
            Volume3D::new(grid.clone(), data, recipe.channel.clone())?,
        );
    }
    CaseData::new(channels, LabelVolume::new(grid.clone(), tumor)?, LabelVolume::new(grid, brain)?)
}
