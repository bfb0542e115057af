//! Pinhole cameras, ray generation, and sampling of points along rays.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! * The camera looks along its local -z axis with y up; image x grows to
//!   the right, image y grows downward.
//! * Pixel `(row, col)` is sampled at its center, i.e. at half-integer
//!   offsets from the top-left corner.
//! * A pixel's camera-space direction is
//!   `((col + 0.5 - W/2) / f, -(row + 0.5 - H/2) / f, -1)`, normalized after
//!   rotation into world space.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maximum deviation of the rotation block from orthonormality accepted by
/// [`Camera::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-8;

/// A pinhole camera: a rigid camera-to-world transform plus intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    world_from_camera: [[f64; 4]; 4],
    focal: f64,
    width: usize,
    height: usize,
}

impl Camera {
    /// Validates and stores a camera pose. The matrix must be a rigid
    /// transform: orthonormal rotation block (within [`ROTATION_TOLERANCE`]),
    /// positive determinant, and a `[0, 0, 0, 1]` bottom row.
    pub fn new(
        world_from_camera: [[f64; 4]; 4],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::Config(format!("focal must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let m = &world_from_camera;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("camera matrix contains non-finite values".into()));
        }
        let bottom = [m[3][0], m[3][1], m[3][2], m[3][3] - 1.0];
        if bottom.iter().any(|v| v.abs() > ROTATION_TOLERANCE) {
            return Err(Error::Config(format!(
                "camera matrix bottom row must be [0, 0, 0, 1], got {:?}",
                m[3]
            )));
        }
        let r = rotation_block(m);
        let err = orthonormality_error(&r);
        if err > ROTATION_TOLERANCE {
            return Err(Error::Config(format!(
                "camera rotation is not orthonormal (deviation {err:.3e})"
            )));
        }
        if det3(&r) <= 0.0 {
            return Err(Error::Config(
                "camera rotation must be right-handed (determinant > 0)".into(),
            ));
        }
        Ok(Camera {
            world_from_camera,
            focal,
            width,
            height,
        })
    }

    /// Camera positioned at `eye`, aimed at `target`, with `up` fixing roll.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let back = normalize(sub3(eye, target))
            .ok_or_else(|| Error::Domain("look_at: eye coincides with target".into()))?;
        let right = normalize(cross(up, back))
            .ok_or_else(|| Error::Domain("look_at: up is parallel to the view direction".into()))?;
        let true_up = cross(back, right);
        let m = [
            [right[0], true_up[0], back[0], eye[0]],
            [right[1], true_up[1], back[1], eye[1]],
            [right[2], true_up[2], back[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera::new(m, focal, width, height)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.world_from_camera
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn position(&self) -> [f64; 3] {
        let m = &self.world_from_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Unit world-space direction through the center of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Result<[f64; 3]> {
        if row >= self.height || col >= self.width {
            return Err(Error::Bounds(format!(
                "pixel ({row}, {col}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let y = -(row as f64 + 0.5 - self.height as f64 / 2.0) / self.focal;
        let cam = [x, y, -1.0];
        let m = &self.world_from_camera;
        let world = [
            m[0][0] * cam[0] + m[0][1] * cam[1] + m[0][2] * cam[2],
            m[1][0] * cam[0] + m[1][1] * cam[1] + m[1][2] * cam[2],
            m[2][0] * cam[0] + m[2][1] * cam[1] + m[2][2] * cam[2],
        ];
        Ok(normalize(world).expect("pinhole direction is never zero"))
    }
}

fn rotation_block(m: &[[f64; 4]; 4]) -> [[f64; 3]; 3] {
    [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ]
}

/// Largest absolute entry of R^T R - I.
pub(crate) fn orthonormality_error(r: &[[f64; 3]; 3]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot3(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some([v[0] / n, v[1] / n, v[2] / n])
}

/// A batch of rays: origins and unit directions, one row per ray.
#[derive(Clone, Debug)]
pub struct RayBatch {
    /// Shape `(N, 3)`.
    pub origins: Tensor,
    /// Shape `(N, 3)`, rows have unit norm.
    pub directions: Tensor,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin(&self, i: usize) -> [f64; 3] {
        let v = &self.origins.values()[i * 3..(i + 1) * 3];
        [v[0], v[1], v[2]]
    }

    pub fn direction(&self, i: usize) -> [f64; 3] {
        let v = &self.directions.values()[i * 3..(i + 1) * 3];
        [v[0], v[1], v[2]]
    }
}

/// One ray per listed pixel, through the pixel center.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<RayBatch> {
    let n = pixels.len();
    let mut origins = Vec::with_capacity(n * 3);
    let mut directions = Vec::with_capacity(n * 3);
    let position = camera.position();
    for &(row, col) in pixels {
        let dir = camera.pixel_direction(row, col)?;
        origins.extend_from_slice(&position);
        directions.extend_from_slice(&dir);
    }
    Ok(RayBatch {
        origins: Tensor::new([n, 3], origins)?,
        directions: Tensor::new([n, 3], directions)?,
    })
}

/// How depths are placed inside the `N_r` equal-width bins of `[near, far]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Bin midpoints; deterministic, used for rendering and evaluation.
    Uniform,
    /// One uniform draw per bin, seeded; the training default.
    Stratified { seed: u64 },
}

/// Points sampled along rays, ready to feed the model.
#[derive(Clone, Debug)]
pub struct RayPointBatch {
    /// Shape `(N_p, N_r, 6)`: position then unit direction per point.
    pub points: Tensor,
    /// Shape `(N_p, N_r)`, strictly increasing along each ray.
    pub t_values: Tensor,
    /// Shape `(N_p, N_r)`: forward differences of `t`, with the last entry
    /// closed off by `far - t[N_r - 1]` so every delta is finite.
    pub deltas: Tensor,
}

impl RayPointBatch {
    pub fn n_rays(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.points.shape()[1]
    }
}

/// Samples `n_r` depths per ray in `[near, far]` and materializes the
/// 6-D point features (position, direction).
pub fn sample_ray_points(
    rays: &RayBatch,
    n_r: usize,
    near: f64,
    far: f64,
    mode: SampleMode,
) -> Result<RayPointBatch> {
    if n_r == 0 {
        return Err(Error::Config("need at least one sample per ray".into()));
    }
    if !(near.is_finite() && far.is_finite() && 0.0 < near && near < far) {
        return Err(Error::Config(format!(
            "invalid depth range [{near}, {far}]; need 0 < near < far"
        )));
    }
    let n_p = rays.len();
    let bin = (far - near) / n_r as f64;
    let mut rng = match mode {
        SampleMode::Uniform => None,
        SampleMode::Stratified { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };

    let mut t_values = Vec::with_capacity(n_p * n_r);
    let mut deltas = Vec::with_capacity(n_p * n_r);
    let mut points = Vec::with_capacity(n_p * n_r * 6);
    for p in 0..n_p {
        let origin = rays.origin(p);
        let dir = rays.direction(p);
        let row_start = t_values.len();
        for i in 0..n_r {
            let offset = match &mut rng {
                None => 0.5,
                // Draw order is fixed: rays in batch order, bins front to
                // back, one draw each.
                Some(rng) => rng.gen_range(0.0..1.0),
            };
            let t = near + (i as f64 + offset) * bin;
            t_values.push(t);
            points.extend_from_slice(&[
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
                dir[0],
                dir[1],
                dir[2],
            ]);
        }
        let row = &t_values[row_start..];
        for i in 0..n_r {
            let next = if i + 1 < n_r { row[i + 1] } else { far };
            deltas.push(next - row[i]);
        }
    }

    Ok(RayPointBatch {
        points: Tensor::new([n_p, n_r, 6], points)?,
        t_values: Tensor::new([n_p, n_r], t_values)?,
        deltas: Tensor::new([n_p, n_r], deltas)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_camera(focal: f64, width: usize, height: usize) -> Camera {
        let m = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Camera::new(m, focal, width, height).unwrap()
    }

    #[test]
    fn center_pixel_of_odd_image_looks_straight_down_negative_z() {
        let cam = identity_camera(1.0, 3, 3);
        let dir = cam.pixel_direction(1, 1).unwrap();
        assert_eq!(dir, [0.0, 0.0, -1.0]);
    }

    #[test]
    fn pixel_directions_follow_image_axes() {
        let cam = identity_camera(1.0, 2, 2);
        // Top-left pixel: left of center (negative x) and above center
        // (positive y, since image y grows downward).
        let expected = normalize([-0.5, 0.5, -1.0]).unwrap();
        let dir = cam.pixel_direction(0, 0).unwrap();
        for (a, b) in dir.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Bottom-right pixel mirrors it.
        let expected = normalize([0.5, -0.5, -1.0]).unwrap();
        let dir = cam.pixel_direction(1, 1).unwrap();
        for (a, b) in dir.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_bounds_pixels_are_rejected() {
        let cam = identity_camera(1.0, 4, 4);
        assert!(matches!(
            cam.pixel_direction(4, 0),
            Err(Error::Bounds(_))
        ));
        assert!(generate_rays(&cam, &[(0, 4)]).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut m = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        m[0][0] = 1.0 + 1e-7;
        let err = Camera::new(m, 1.0, 2, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn reflections_are_rejected() {
        let m = [
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(Camera::new(m, 1.0, 2, 2).is_err());
    }

    #[test]
    fn look_at_from_positive_z_gives_identity_rotation() {
        let cam = Camera::look_at([0.0, 0.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 2.0, 4, 4).unwrap();
        let m = cam.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((m[i][j] - expected).abs() < 1e-12, "m[{i}][{j}] = {}", m[i][j]);
            }
        }
        assert_eq!(cam.position(), [0.0, 0.0, 4.0]);
    }

    #[test]
    fn look_at_points_toward_target_from_any_ring_angle() {
        for k in 0..8 {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            let eye = [4.0 * angle.sin(), 0.0, 4.0 * angle.cos()];
            let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 3.0, 3, 3).unwrap();
            // The center pixel of a 3x3 image looks along -z in camera
            // space, which must point from eye to target.
            let dir = cam.pixel_direction(1, 1).unwrap();
            let expected = normalize(sub3([0.0; 3], eye)).unwrap();
            for (a, b) in dir.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ray_directions_are_unit_norm() {
        let cam = Camera::look_at([1.0, 2.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 5.0, 7, 5).unwrap();
        let pixels: Vec<(usize, usize)> =
            (0..5).flat_map(|r| (0..7).map(move |c| (r, c))).collect();
        let rays = generate_rays(&cam, &pixels).unwrap();
        for i in 0..rays.len() {
            let d = rays.direction(i);
            assert!((dot3(d, d).sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_sampling_hits_bin_midpoints() {
        let cam = identity_camera(1.0, 1, 1);
        let rays = generate_rays(&cam, &[(0, 0)]).unwrap();
        let batch = sample_ray_points(&rays, 4, 2.0, 6.0, SampleMode::Uniform).unwrap();
        assert_eq!(batch.t_values.values(), &[2.5, 3.5, 4.5, 5.5]);
        assert_eq!(batch.deltas.values(), &[1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn sampled_points_lie_on_their_rays() {
        let cam = Camera::look_at([0.5, -1.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 2.0, 5, 4).unwrap();
        let pixels = [(0, 0), (3, 4), (2, 2)];
        let rays = generate_rays(&cam, &pixels).unwrap();
        let batch =
            sample_ray_points(&rays, 6, 2.0, 6.0, SampleMode::Stratified { seed: 9 }).unwrap();
        for p in 0..rays.len() {
            let o = rays.origin(p);
            let d = rays.direction(p);
            for i in 0..6 {
                let t = batch.t_values.at(&[p, i]).unwrap();
                for k in 0..3 {
                    let pos = batch.points.at(&[p, i, k]).unwrap();
                    let back = (pos - o[k]) / t;
                    assert!((back - d[k]).abs() < 1e-10, "ray {p} sample {i} axis {k}");
                    let stored_dir = batch.points.at(&[p, i, 3 + k]).unwrap();
                    assert_eq!(stored_dir, d[k]);
                }
            }
        }
    }

    #[test]
    fn stratified_sampling_is_seed_deterministic() {
        let cam = identity_camera(1.0, 2, 2);
        let rays = generate_rays(&cam, &[(0, 0), (1, 1)]).unwrap();
        let a = sample_ray_points(&rays, 8, 2.0, 6.0, SampleMode::Stratified { seed: 7 }).unwrap();
        let b = sample_ray_points(&rays, 8, 2.0, 6.0, SampleMode::Stratified { seed: 7 }).unwrap();
        let c = sample_ray_points(&rays, 8, 2.0, 6.0, SampleMode::Stratified { seed: 8 }).unwrap();
        assert_eq!(a.t_values.values(), b.t_values.values());
        assert_ne!(a.t_values.values(), c.t_values.values());
    }

    #[test]
    fn invalid_depth_ranges_are_rejected() {
        let cam = identity_camera(1.0, 1, 1);
        let rays = generate_rays(&cam, &[(0, 0)]).unwrap();
        assert!(sample_ray_points(&rays, 4, 6.0, 2.0, SampleMode::Uniform).is_err());
        assert!(sample_ray_points(&rays, 0, 2.0, 6.0, SampleMode::Uniform).is_err());
        assert!(sample_ray_points(&rays, 4, -1.0, 6.0, SampleMode::Uniform).is_err());
    }

    proptest! {
        #[test]
        fn stratified_depths_stay_sorted_inside_their_bins(
            seed in 0u64..1000,
            n_r in 1usize..12,
        ) {
            let cam = identity_camera(1.0, 2, 2);
            let rays = generate_rays(&cam, &[(0, 1)]).unwrap();
            let batch =
                sample_ray_points(&rays, n_r, 2.0, 6.0, SampleMode::Stratified { seed }).unwrap();
            let bin = 4.0 / n_r as f64;
            let t = batch.t_values.values();
            for i in 0..n_r {
                prop_assert!(t[i] >= 2.0 + i as f64 * bin);
                prop_assert!(t[i] < 2.0 + (i + 1) as f64 * bin);
                if i > 0 {
                    prop_assert!(t[i] > t[i - 1]);
                }
            }
            // Deltas close the interval: they sum to far - t[0].
            let sum: f64 = batch.deltas.values().iter().sum();
            prop_assert!((sum - (6.0 - t[0])).abs() < 1e-12);
            for &d in batch.deltas.values() {
                prop_assert!(d > 0.0);
            }
        }
    }
}
