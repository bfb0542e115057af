//! Images, posed views, and the procedural sphere scene.
//!
//! The toy scene renders opaque, unshaded colored spheres on a white
//! background by exact ray-sphere intersection. It is small enough to
//! overfit in minutes yet has real occlusion and parallax, which is all the
//! training and ablation tests need.

use crate::error::{Error, Result};
use crate::rays::{dot3, sub3, Camera};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// An RGB image with components in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} components, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "image component {bad} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Which protocol split a view belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A posed image.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

/// A collection of posed views sharing image dimensions and a depth range.
#[derive(Clone, Debug)]
pub struct Scene {
    views: Vec<View>,
    near: f64,
    far: f64,
}

impl Scene {
    pub fn new(views: Vec<View>, near: f64, far: f64) -> Result<Self> {
        if !(near.is_finite() && far.is_finite() && 0.0 < near && near < far) {
            return Err(Error::Config(format!(
                "invalid depth range [{near}, {far}]; need 0 < near < far"
            )));
        }
        let Some(first) = views.first() else {
            return Err(Error::Config("scene has no views".into()));
        };
        let (h, w) = (first.image.height(), first.image.width());
        for (i, view) in views.iter().enumerate() {
            if view.image.height() != h || view.image.width() != w {
                return Err(Error::Config(format!(
                    "view {i} is {}x{}, scene is {h}x{w}",
                    view.image.height(),
                    view.image.width()
                )));
            }
        }
        if !views.iter().any(|v| v.split == Split::Train) {
            return Err(Error::Config("scene has no training views".into()));
        }
        Ok(Scene { views, near, far })
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn split_views(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn train_views(&self) -> Vec<&View> {
        self.split_views(Split::Train).collect()
    }
}

/// An opaque, flat-colored sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Shape of a generated sphere scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySceneSpec {
    /// Images are square, `image_size` pixels a side. At least 8.
    pub image_size: usize,
    /// Cameras on a ring around the origin. At least 2.
    pub n_views: usize,
    pub spheres: Vec<Sphere>,
}

impl ToySceneSpec {
    pub fn new(image_size: usize, n_views: usize) -> ToySceneSpec {
        ToySceneSpec {
            image_size,
            n_views,
            spheres: default_spheres(),
        }
    }
}

/// Three overlapping-depth spheres with distinct colors; enough occlusion
/// to make view synthesis non-trivial.
pub fn default_spheres() -> Vec<Sphere> {
    vec![
        Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 1.0,
            color: [0.9, 0.1, 0.1],
        },
        Sphere {
            center: [1.2, 0.6, -0.4],
            radius: 0.5,
            color: [0.1, 0.2, 0.9],
        },
        Sphere {
            center: [-1.1, -0.5, 0.5],
            radius: 0.4,
            color: [0.1, 0.8, 0.2],
        },
    ]
}

const RING_RADIUS: f64 = 4.0;
const TOY_NEAR: f64 = 2.0;
const TOY_FAR: f64 = 6.0;

/// Nearest positive ray-sphere intersection depth, if any.
fn hit_depth(origin: [f64; 3], dir: [f64; 3], sphere: &Sphere) -> Option<f64> {
    let oc = sub3(origin, sphere.center);
    // Unit direction, so the quadratic is t^2 + 2 b t + c = 0.
    let b = dot3(dir, oc);
    let c = dot3(oc, oc) - sphere.radius * sphere.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sqrt_disc = disc.sqrt();
    let t_near = -b - sqrt_disc;
    if t_near > 0.0 {
        return Some(t_near);
    }
    let t_far = -b + sqrt_disc;
    (t_far > 0.0).then_some(t_far)
}

/// Renders the exact ground-truth view of `spheres` from `camera`:
/// nearest hit wins, misses are white.
pub fn render_ground_truth(camera: &Camera, spheres: &[Sphere]) -> Result<Image> {
    let (h, w) = (camera.height(), camera.width());
    let origin = camera.position();
    let mut image = Image::filled(h, w, [1.0, 1.0, 1.0])?;
    for row in 0..h {
        for col in 0..w {
            let dir = camera.pixel_direction(row, col)?;
            let mut best: Option<(f64, [f64; 3])> = None;
            for sphere in spheres {
                if let Some(t) = hit_depth(origin, dir, sphere) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, sphere.color));
                    }
                }
            }
            if let Some((_, color)) = best {
                image.set_pixel(row, col, color);
            }
        }
    }
    Ok(image)
}

/// Generates the seeded sphere scene: `n_views` cameras on a ring of radius
/// 4 in the y = 0 plane, all aimed at the origin, ring phase drawn from the
/// seed. Every view is ground truth from [`render_ground_truth`] and tagged
/// as a training view.
pub fn generate_toy_scene(seed: u64, spec: &ToySceneSpec) -> Result<Scene> {
    if spec.image_size < 8 {
        return Err(Error::Config(format!(
            "toy scene images must be at least 8x8, got {}",
            spec.image_size
        )));
    }
    if spec.n_views < 2 {
        return Err(Error::Config(format!(
            "toy scene needs at least 2 views, got {}",
            spec.n_views
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let focal = spec.image_size as f64;
    let mut views = Vec::with_capacity(spec.n_views);
    for k in 0..spec.n_views {
        let angle = phase + std::f64::consts::TAU * k as f64 / spec.n_views as f64;
        let eye = [RING_RADIUS * angle.sin(), 0.0, RING_RADIUS * angle.cos()];
        let camera = Camera::look_at(
            eye,
            [0.0; 3],
            [0.0, 1.0, 0.0],
            focal,
            spec.image_size,
            spec.image_size,
        )?;
        let image = render_ground_truth(&camera, &spec.spheres)?;
        views.push(View {
            camera,
            image,
            split: Split::Train,
        });
    }
    Scene::new(views, TOY_NEAR, TOY_FAR)
}
