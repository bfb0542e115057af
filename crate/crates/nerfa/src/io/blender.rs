//! Loader for the synthetic `transforms_*.json` dataset layout.
//!
//! A dataset directory holds `transforms_train.json`, `transforms_val.json`
//! and `transforms_test.json`, each listing frames as a camera-to-world
//! matrix plus an image path relative to the directory. The horizontal
//! field of view gives the focal length: `0.5 * W / tan(0.5 * angle_x)`.

use crate::error::{Error, Result};
use crate::io::image_file::read_png;
use crate::rays::{cross, dot3, normalize, orthonormality_error, Camera};
use crate::scene::{Scene, Split, View};
use serde::Deserialize;
use std::path::Path;

/// Loose orthonormality bound for incoming rotations. Within it, the
/// rotation is re-orthonormalized; beyond it the frame is rejected.
pub const POSE_TOLERANCE: f64 = 1e-4;

const DEFAULT_NEAR: f64 = 2.0;
const DEFAULT_FAR: f64 = 6.0;

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Focal length in pixels from the horizontal field of view.
pub fn focal_from_angle(camera_angle_x: f64, width: usize) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

/// Loads all three splits from `dir`. Every split file must exist; poses
/// with rotations off by more than [`POSE_TOLERANCE`] are rejected, milder
/// drift is projected back onto an exact rotation.
pub fn load_blender_dataset(dir: &Path) -> Result<Scene> {
    let mut views = Vec::new();
    for (split, file) in [
        (Split::Train, "transforms_train.json"),
        (Split::Val, "transforms_val.json"),
        (Split::Test, "transforms_test.json"),
    ] {
        let path = dir.join(file);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let transforms: TransformsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if !(transforms.camera_angle_x > 0.0 && transforms.camera_angle_x < std::f64::consts::PI)
        {
            return Err(Error::Format(format!(
                "{}: camera_angle_x {} is outside (0, pi)",
                path.display(),
                transforms.camera_angle_x
            )));
        }
        for (index, frame) in transforms.frames.iter().enumerate() {
            let image = read_png(&image_path(dir, &frame.file_path))?;
            let focal = focal_from_angle(transforms.camera_angle_x, image.width());
            let matrix = rectify_pose(frame.transform_matrix).map_err(|e| {
                Error::Format(format!("{}, frame {index}: {e}", path.display()))
            })?;
            let camera = Camera::new(matrix, focal, image.width(), image.height())?;
            views.push(View {
                camera,
                image,
                split,
            });
        }
    }
    Scene::new(views, DEFAULT_NEAR, DEFAULT_FAR)
}

fn image_path(dir: &Path, file_path: &str) -> std::path::PathBuf {
    let mut path = dir.join(file_path);
    if path.extension().is_none() {
        path.set_extension("png");
    }
    path
}

/// Checks the rotation block against [`POSE_TOLERANCE`], then rebuilds it
/// as an exact orthonormal basis (Gram-Schmidt on the columns) so the
/// strict camera invariant holds.
fn rectify_pose(m: [[f64; 4]; 4]) -> Result<[[f64; 4]; 4]> {
    let r = [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ];
    let deviation = orthonormality_error(&r);
    if deviation > POSE_TOLERANCE {
        return Err(Error::Format(format!(
            "rotation deviates from orthonormal by {deviation:.2e} (limit {POSE_TOLERANCE:.0e})"
        )));
    }
    let col = |j: usize| [r[0][j], r[1][j], r[2][j]];
    let x = normalize(col(0))
        .ok_or_else(|| Error::Format("rotation has a zero column".into()))?;
    let mut y = col(1);
    let xy = dot3(x, y);
    for k in 0..3 {
        y[k] -= xy * x[k];
    }
    let y = normalize(y)
        .ok_or_else(|| Error::Format("rotation columns are collinear".into()))?;
    let z_given = col(2);
    let z = cross(x, y);
    // Keep the incoming handedness; Camera::new rejects reflections.
    let z = if dot3(z, z_given) < 0.0 {
        [-z[0], -z[1], -z[2]]
    } else {
        z
    };
    Ok([
        [x[0], y[0], z[0], m[0][3]],
        [x[1], y[1], z[1], m[1][3]],
        [x[2], y[2], z[2], m[2][3]],
        [0.0, 0.0, 0.0, 1.0],
    ])
}
