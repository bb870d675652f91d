use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepforge::geometry::{tumor_stats, RigidTransform};
use sweepforge::phantom::{generate_phantom, Ellipsoid, PhantomSpec};
use sweepforge::sweep::*;
use sweepforge::volume::*;

fn sphere_case(dims: usize, spacing: f64, brain_r: f64, tumor: Ellipsoid) -> CaseData {
    let spec = PhantomSpec {
        dims: [dims; 3],
        spacing_mm: spacing,
        brain: Ellipsoid::sphere([0.0; 3], brain_r),
        tumor,
        ..Default::default()
    };
    prepare_case(
        &generate_phantom(&spec, 1).unwrap(),
        &CaseLoadOptions {
            resample_mm: None,
            ..Default::default()
        },
    )
    .unwrap()
}

fn elongated_case() -> CaseData {
    sphere_case(
        100,
        1.0,
        40.0,
        Ellipsoid {
            center_mm: [0.0, 5.0, 20.0],
            semi_axes_mm: [10.0, 3.0, 3.0],
            direction: [1.0, 0.0, 0.0],
        },
    )
}

fn all_channels(case: &CaseData) -> Vec<Channel> {
    case.available_channels().into_iter().collect()
}

fn place(case: &CaseData, sweep: &ReferenceSweep, seed: u64) -> SweepPlacement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    place_sweep(case, sweep, &PlacementOptions::default(), &mut rng).unwrap()
}

#[test]
fn placement_is_deterministic_for_a_point_tumor() {
    let case = sphere_case(65, 1.0, 25.0, Ellipsoid::sphere([0.0; 3], 0.4));
    assert_eq!(case.tumor.foreground_count(), 1);
    let sweep = synth_reference_sweep(&SweepParams::default()).unwrap();
    let a = place(&case, &sweep, 11);
    let b = place(&case, &sweep, 11);
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_ne!(a, place(&case, &sweep, 12));
}

#[test]
fn elongated_tumor_orients_the_sweep() {
    let case = elongated_case();
    let stats = tumor_stats(&case.tumor).unwrap();
    assert!(stats.principal_axis.dot(&Vector3::x()).abs() > 2f64.to_radians().cos());
    let sweep = synth_reference_sweep(&SweepParams::default()).unwrap();
    let ctx = PlacementContext::new(&case).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ctx.place(&sweep, &PlacementOptions::default(), &mut rng).unwrap();
        assert_eq!(p.n2, stats.principal_axis);
        let normal = p.transform.apply_vector(&sweep.n1);
        assert!(normal.cross(&Vector3::x()).norm() < 1e-6, "seed {seed}: normal {normal:?}");
        assert!(p.transform.rotation.determinant() > 0.0);
        worst = worst.max(p.residual);
    }
    // measured on this phantom: 0.129 mm worst case over the 20 seeds
    assert!(worst <= 2.0, "residual {worst}");
    assert!(worst < 0.25, "residual {worst}");
}

#[test]
fn contact_point_lies_in_the_median_frame() {
    let case = elongated_case();
    let sweep = synth_reference_sweep(&SweepParams::default()).unwrap();
    let Fov::Rect { width_mm, depth_mm } = sweep.fov else { unreachable!() };
    for seed in 0..10 {
        let p = place(&case, &sweep, seed);
        let local = p.transform.invert().apply(&p.c2);
        assert!(local.z.abs() < 1e-9, "C2 off the median plane by {}", local.z);
        assert!(local.x.hypot(local.y) <= 0.5 * width_mm.hypot(depth_mm));
        // extremities are one probe width apart within a voxel
        assert!(((p.l2 - p.r2).norm() - sweep.width).abs() <= 1.0);
        // the probe looks toward the tumor
        assert!(p.transform.invert().apply(&p.m2).y > 0.0);
    }
}

#[test]
fn frames_form_a_rigid_stack() {
    let case = elongated_case();
    let sweep = synth_reference_sweep(&SweepParams::default()).unwrap();
    let p = place(&case, &sweep, 3);
    let geom = frame_geometry(&sweep, &p.transform);
    let probes = [(0, 0), (191, 0), (0, 191), (96, 120), (191, 191)];
    let dist = |g: &FrameGeometry, a: (usize, usize), b: (usize, usize)| (g.pixel_world(a.0, a.1) - g.pixel_world(b.0, b.1)).norm();
    for g in &geom {
        for &a in &probes {
            for &b in &probes {
                assert_abs_diff_eq!(dist(g, a, b), dist(&geom[0], a, b), epsilon = 1e-9);
            }
        }
    }
    for w in geom.windows(2) {
        let step = w[1].origin - w[0].origin;
        assert_abs_diff_eq!(step.norm(), sweep.frame_spacing, epsilon = 1e-9);
        assert_abs_diff_eq!(step.dot(&w[0].axis_u), 0.0, epsilon = 1e-9);
    }
}

/// Independent per-pixel resampling: local point, rigid map, explicit inverse
/// of the voxel affine, 8-corner weights.
fn oracle_pixel(vol: &Volume3D, sweep: &ReferenceSweep, t: &RigidTransform, u: usize, v: usize, f: usize) -> f64 {
    let px = sweep.frame_pixel;
    let local = Vector3::new(
        u as f64 * px - sweep.frame_shape.0 as f64 * px / 2.0 + px / 2.0,
        v as f64 * px + px / 2.0,
        (f as f64 - (sweep.frame_count as f64 - 1.0) / 2.0) * sweep.frame_spacing,
    );
    let [ex, ey, ez] = sweep.axes();
    let mid = (sweep.l1.coords + sweep.r1.coords) / 2.0;
    let world = t.rotation * (mid + ex * local.x + ey * local.y + ez * local.z) + t.translation;
    let inv = vol.grid.affine().try_inverse().unwrap();
    let c = inv * Vector4::new(world.x, world.y, world.z, 1.0);
    let dims = vol.grid.dims();
    let c = [c.x, c.y, c.z];
    for a in 0..3 {
        if c[a] < 0.0 || c[a] > (dims[a] - 1) as f64 {
            return MR_FILL;
        }
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let lo = (c[a].floor() as usize).min(dims[a].saturating_sub(2));
            let hi = (lo + 1).min(dims[a] - 1);
            let frac = c[a] - lo as f64;
            if corner >> a & 1 == 1 {
                idx[a] = hi;
                w *= frac;
            } else {
                idx[a] = lo;
                w *= 1.0 - frac;
            }
        }
        acc += w * vol.at(idx[0], idx[1], idx[2]);
    }
    acc
}

fn check_against_oracle(case: &CaseData, sweep: &ReferenceSweep, p: &SweepPlacement) {
    let channels = all_channels(case);
    let series = slice_series(case, p, sweep, &channels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mask = sweep.fov_mask();
    let mut inside = 0;
    for _ in 0..4000 {
        let (u, v, f) = (rng.gen_range(0..192), rng.gen_range(0..192), rng.gen_range(0..sweep.frame_count));
        for (c, name) in channels.iter().enumerate() {
            let got = *series.frames[f][c].get(u, v);
            if *mask.get(u, v) {
                let want = oracle_pixel(&case.channels[name], sweep, &p.transform, u, v, f);
                assert_abs_diff_eq!(got, want, epsilon = 1e-9);
                inside += (want != MR_FILL) as usize;
            } else {
                assert_eq!(got, MR_FILL);
            }
        }
    }
    assert!(inside > 500, "only {inside} samples landed inside the volume");
}

#[test]
fn slicing_matches_brute_force_oracle() {
    let case = elongated_case();
    let sweep = synth_reference_sweep(&SweepParams::default()).unwrap();
    check_against_oracle(&case, &sweep, &place(&case, &sweep, 5));
}

#[test]
fn slicing_matches_oracle_on_oblique_grid() {
    let base = elongated_case();
    let rot = Rotation3::from_euler_angles(0.3, -0.2, 0.7).into_inner() * 1.0;
    let mut affine = Matrix4::identity();
    affine.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    affine.fixed_view_mut::<3, 1>(0, 3).copy_from(&(rot * Vector3::repeat(-49.5)));
    let grid = Grid::new([100; 3], [1.0; 3], affine).unwrap();
    let channels: BTreeMap<Channel, Volume3D> = base
        .channels
        .iter()
        .map(|(k, v)| (k.clone(), Volume3D::new(grid.clone(), v.data.clone(), k.clone()).unwrap()))
        .collect();
    let case = CaseData::new(
        channels,
        LabelVolume::new(grid.clone(), base.tumor.data.clone()).unwrap(),
        LabelVolume::new(grid, base.brain_mask.data.clone()).unwrap(),
    )
    .unwrap();
    let sweep = synth_reference_sweep(&SweepParams {
        fov: Some(Fov::Fan {
            apex_offset_mm: 10.0,
            half_angle_deg: 35.0,
            depth_mm: 60.0,
        }),
        ..Default::default()
    })
    .unwrap();
    check_against_oracle(&case, &sweep, &place(&case, &sweep, 8));
}

/// Random volume on a grid whose voxel centers coincide with the pixel
/// centers of the canonical sweep under `transform`.
fn aligned_case(grid: Grid, seed: u64) -> CaseData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.len();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let channels = BTreeMap::from([(Channel::T2, Volume3D::new(grid.clone(), data, Channel::T2).unwrap())]);
    CaseData::new(
        channels,
        LabelVolume::new(grid.clone(), labels).unwrap(),
        LabelVolume::new(grid.clone(), vec![1; n]).unwrap(),
    )
    .unwrap()
}

fn wide_sweep(frames: usize) -> ReferenceSweep {
    synth_reference_sweep(&SweepParams {
        width: 30.0,
        frame_count: frames,
        frame_spacing: 0.5,
        fov: Some(Fov::Rect {
            width_mm: 96.0,
            depth_mm: 96.0,
        }),
    })
    .unwrap()
}

fn manual_placement(transform: RigidTransform) -> SweepPlacement {
    SweepPlacement {
        transform,
        c2: Point3::origin(),
        l2: Point3::origin(),
        r2: Point3::origin(),
        n2: Vector3::z(),
        m2: Point3::origin(),
        contact_index: 0,
        left_index: 0,
        right_index: 0,
        residual: 0.0,
    }
}

#[test]
fn identity_placement_reproduces_array_slices() {
    let sweep = wide_sweep(5);
    let grid = Grid::axis_aligned([192, 192, 5], [0.5; 3], [-47.75, 0.25, -1.0]).unwrap();
    let case = aligned_case(grid, 4);
    let series = slice_series(&case, &manual_placement(RigidTransform::identity()), &sweep, &[Channel::T2]).unwrap();
    let vol = &case.channels[&Channel::T2];
    for f in 0..5 {
        for v in 0..192 {
            for u in 0..192 {
                assert_abs_diff_eq!(*series.frames[f][0].get(u, v), vol.at(u, v, f), epsilon = 1e-9);
                assert_eq!(*series.labels[f].get(u, v), case.tumor.at(u, v, f));
            }
        }
    }
    assert_eq!(*series.depth_map.get(0, 10), 5.25);
}

#[test]
fn quarter_turn_placement_transposes_slices() {
    let sweep = wide_sweep(3);
    // R_z(90°): local (x, y) -> world (-y, x)
    let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let grid = Grid::axis_aligned([192, 192, 3], [0.5; 3], [-95.75, -47.75, -0.5]).unwrap();
    let case = aligned_case(grid, 6);
    let placement = manual_placement(RigidTransform::new(rot, Vector3::zeros()));
    let series = slice_series(&case, &placement, &sweep, &[Channel::T2]).unwrap();
    let vol = &case.channels[&Channel::T2];
    for f in 0..3 {
        for v in 0..192 {
            for u in 0..192 {
                assert_abs_diff_eq!(*series.frames[f][0].get(u, v), vol.at(191 - v, u, f), epsilon = 1e-9);
                assert_eq!(*series.labels[f].get(u, v), case.tumor.at(191 - v, u, f));
            }
        }
    }
}

#[test]
fn shallow_fov_misses_deep_tumor() {
    let case = elongated_case();
    let sweep = synth_reference_sweep(&SweepParams {
        fov: Some(Fov::Rect {
            width_mm: 30.0,
            depth_mm: 3.0,
        }),
        ..Default::default()
    })
    .unwrap();
    let p = place(&case, &sweep, 2);
    let series = slice_series(&case, &p, &sweep, &all_channels(&case)).unwrap();
    assert!(series.labels.iter().all(|l| l.data().iter().all(|&v| v == 0)));

    let deep = synth_reference_sweep(&SweepParams::default()).unwrap();
    let series = slice_series(&case, &place(&case, &deep, 2), &deep, &all_channels(&case)).unwrap();
    assert!(series.labels.iter().any(|l| l.data().iter().any(|&v| v != 0)));
}

#[test]
fn slice_values_stay_in_range() {
    let case = elongated_case();
    let sweep = synth_reference_sweep(&SweepParams::default()).unwrap();
    let series = slice_series(&case, &place(&case, &sweep, 1), &sweep, &all_channels(&case)).unwrap();
    assert_eq!(series.frame_count(), 70);
    assert_eq!(series.shape(), (192, 192));
    for (frame, labels) in series.frames.iter().zip(&series.labels) {
        assert!(frame.iter().all(|img| img.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert!(labels.data().iter().all(|l| *l == 0 || series.label_set.contains(l)));
    }
    let err = slice_series(&case, &place(&case, &sweep, 1), &sweep, &[Channel::Other("DWI".into())]).unwrap_err();
    assert!(err.to_string().contains("DWI"));
}
