//! Procedurally textured planar scenes with exact ground truth.
//!
//! Scenes are built from textured planar patches; views are rendered by ray
//! casting, so depth and normals are known in closed form for every pixel.

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Camera, PlaneHypothesis};
use crate::image::{RgbImage, View};
use crate::map::{DepthMap, DepthNormalMap, NormalMap};

#[derive(Debug, Clone, Copy)]
struct Wave {
    freq: Vector2<f64>,
    phase: [f64; 3],
    amp: f64,
}

/// Band-limited color texture: a sum of randomly oriented sinusoids with
/// wavelengths between 0.04 and 0.5 texture units.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
        let waves = (0..14)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let wavelength = (rng.random_range(0.04f64.ln()..0.5f64.ln())).exp();
                let k = std::f64::consts::TAU / wavelength;
                Wave {
                    freq: Vector2::new(angle.cos() * k, angle.sin() * k),
                    phase: [
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    ],
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        Self { waves }
    }

    pub fn color(&self, u: f64, v: f64) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        let norm: f64 = self.waves.iter().map(|w| w.amp).sum::<f64>();
        for w in &self.waves {
            let arg = w.freq.x * u + w.freq.y * v;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += w.amp * (arg + w.phase[c]).sin();
            }
        }
        acc.map(|a| (0.5 + 1.2 * a / norm).clamp(0.0, 1.0) as f32)
    }
}

/// A textured, optionally bounded plane.
#[derive(Debug, Clone)]
pub struct Surface {
    pub origin: Vector3<f64>,
    pub normal: Vector3<f64>,
    axis_u: Vector3<f64>,
    axis_v: Vector3<f64>,
    /// `(u_min, u_max, v_min, v_max)` in plane coordinates; unbounded if `None`.
    pub extent: Option<(f64, f64, f64, f64)>,
    pub texture: Texture,
    /// Range of `u` rendered in a constant color.
    pub flat_band: Option<(f64, f64)>,
    /// Plane units per texture unit.
    pub texture_scale: f64,
}

impl Surface {
    pub fn new(origin: Vector3<f64>, normal: Vector3<f64>, texture_seed: u64) -> Self {
        let normal = normal.normalize();
        let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let axis_u = (helper - normal * normal.dot(&helper)).normalize();
        let axis_v = normal.cross(&axis_u);
        Self {
            origin,
            normal,
            axis_u,
            axis_v,
            extent: None,
            texture: Texture::new(texture_seed),
            flat_band: None,
            texture_scale: 1.0,
        }
    }

    /// Stretches the texture by `scale`, lowering its frequencies.
    pub fn with_texture_scale(mut self, scale: f64) -> Self {
        self.texture_scale = scale;
        self
    }

    pub fn with_extent(mut self, u: (f64, f64), v: (f64, f64)) -> Self {
        self.extent = Some((u.0, u.1, v.0, v.1));
        self
    }

    pub fn with_flat_band(mut self, u_min: f64, u_max: f64) -> Self {
        self.flat_band = Some((u_min, u_max));
        self
    }

    /// Ray parameter and plane coordinates of the hit, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.origin - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let rel = origin + dir * t - self.origin;
        let (u, v) = (rel.dot(&self.axis_u), rel.dot(&self.axis_v));
        if let Some((u0, u1, v0, v1)) = self.extent {
            if u < u0 || u > u1 || v < v0 || v > v1 {
                return None;
            }
        }
        Some((t, u, v))
    }

    fn color(&self, u: f64, v: f64) -> [f32; 3] {
        match self.flat_band {
            Some((a, b)) if u >= a && u <= b => [0.55, 0.5, 0.45],
            _ => self.texture.color(u / self.texture_scale, v / self.texture_scale),
        }
    }
}

/// Ground truth hit for one pixel.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub depth: f64,
    /// Camera-frame normal facing the camera.
    pub normal: Vector3<f64>,
    pub surface: usize,
    pub color: [f32; 3],
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub surfaces: Vec<Surface>,
    pub cameras: Vec<Camera>,
    /// Suggested depth search interval.
    pub depth_range: (f64, f64),
}

fn look_rotation(yaw: f64, pitch: f64) -> nalgebra::Matrix3<f64> {
    // world-to-camera rotation of a camera turned by yaw (about y) and pitch
    Rotation3::from_euler_angles(pitch, yaw, 0.0).inverse().into_inner()
}

/// Keeps the finest texture wavelength at a few pixels for images narrower
/// than `native` pixels.
fn texture_scale(width: usize, native: usize) -> f64 {
    (native as f64 / width as f64).max(1.0)
}

/// Camera at `center` with world-to-camera rotation `rot`.
fn camera_at(fx: f64, w: usize, h: usize, rot: nalgebra::Matrix3<f64>, center: Vector3<f64>) -> Camera {
    let t = -(rot * center);
    Camera::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, rot, t, w, h).expect("valid synthetic camera")
}

impl SyntheticScene {
    /// Slanted plane seen by a reference camera at the origin and a
    /// wider-angle source camera displaced sideways and turned toward the
    /// plane, so that the source covers the whole reference footprint.
    pub fn slanted_two_view(width: usize, height: usize, seed: u64) -> Self {
        let f = 0.95 * width as f64;
        let reference = camera_at(f, width, height, nalgebra::Matrix3::identity(), Vector3::zeros());
        let source = camera_at(0.8 * f, width, height, look_rotation(-0.1, 0.0), Vector3::new(0.25, 0.02, 0.0));
        let plane = Surface::new(Vector3::new(0.0, 0.0, 2.5), Vector3::new(0.25, -0.35, -1.0), seed)
            .with_texture_scale(texture_scale(width, 320));
        Self {
            surfaces: vec![plane],
            cameras: vec![reference, source],
            depth_range: (1.0, 5.0),
        }
    }

    /// Two same-intrinsics views converging on a slanted plane 0.64 units
    /// away, 0.08 units apart; used for fusion and the bundled end-to-end
    /// workspace.
    pub fn converging_pair(width: usize, height: usize, seed: u64) -> Self {
        let f = 0.9 * width as f64;
        let a = camera_at(f, width, height, look_rotation(0.06, 0.0), Vector3::new(-0.04, 0.0, 0.0));
        let b = camera_at(f, width, height, look_rotation(-0.06, 0.0), Vector3::new(0.04, 0.0, 0.0));
        let plane = Surface::new(Vector3::new(0.0, 0.0, 0.64), Vector3::new(0.2, -0.3, -1.0), seed)
            .with_texture_scale(0.4 * texture_scale(width, 160));
        Self {
            surfaces: vec![plane],
            cameras: vec![a, b],
            depth_range: (0.32, 1.2),
        }
    }

    /// `n` cameras on a horizontal arc of `arc` radians looking at a plane.
    pub fn arc(n: usize, width: usize, height: usize, arc: f64, seed: u64) -> Self {
        let f = 0.9 * width as f64;
        let target = Vector3::new(0.0, 0.0, 3.0);
        let radius = 3.0;
        let cameras = (0..n)
            .map(|i| {
                let a = if n == 1 { 0.0 } else { -arc / 2.0 + arc * i as f64 / (n - 1) as f64 };
                let center = target + Vector3::new(-a.sin() * radius, 0.0, -a.cos() * radius);
                camera_at(f, width, height, look_rotation(a, 0.0), center)
            })
            .collect();
        let plane = Surface::new(Vector3::new(0.0, 0.0, 3.4), Vector3::new(0.1, -0.2, -1.0), seed)
            .with_texture_scale(texture_scale(width, 320));
        Self {
            surfaces: vec![plane],
            cameras,
            depth_range: (1.0, 8.0),
        }
    }

    /// Adds a constant-color band `[u_min, u_max]` to the first surface.
    pub fn with_flat_band(mut self, u_min: f64, u_max: f64) -> Self {
        self.surfaces[0] = self.surfaces[0].clone().with_flat_band(u_min, u_max);
        self
    }

    pub fn with_surface(mut self, s: Surface) -> Self {
        self.surfaces.push(s);
        self
    }

    /// First surface hit by the ray through pixel `(x, y)` of view `view`.
    pub fn hit(&self, view: usize, x: f64, y: f64) -> Option<Hit> {
        let cam = &self.cameras[view];
        let ray_cam = cam.ray(&Vector2::new(x, y));
        let dir = cam.rotation.transpose() * ray_cam;
        let origin = cam.center();
        let (t, idx, u, v) = self
            .surfaces
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(&origin, &dir).map(|(t, u, v)| (t, i, u, v)))
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        let s = &self.surfaces[idx];
        let mut normal = cam.rotation * s.normal;
        if normal.dot(&ray_cam) > 0.0 {
            normal = -normal;
        }
        Some(Hit {
            depth: t,
            normal,
            surface: idx,
            color: s.color(u, v),
        })
    }

    pub fn hypothesis(&self, view: usize, x: usize, y: usize) -> Option<PlaneHypothesis> {
        self.hit(view, x as f64, y as f64)
            .map(|h| PlaneHypothesis::new(h.depth, h.normal))
    }

    /// Renders a view with 2x2 supersampling.
    pub fn render(&self, view: usize) -> RgbImage {
        let cam = &self.cameras[view];
        RgbImage::from_fn(cam.width, cam.height, |x, y| {
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let c = self
                    .hit(view, x as f64 + sx, y as f64 + sy)
                    .map_or([0.0; 3], |h| h.color);
                for k in 0..3 {
                    acc[k] += c[k] / 4.0;
                }
            }
            acc
        })
    }

    pub fn render_views(&self) -> Vec<View> {
        (0..self.cameras.len())
            .map(|i| View::new(format!("view{i:03}"), self.render(i), self.cameras[i].clone()))
            .collect()
    }

    pub fn depth_map(&self, view: usize) -> DepthMap {
        let cam = &self.cameras[view];
        DepthMap::from_fn(cam.width, cam.height, 0.0, |x, y| {
            self.hit(view, x as f64, y as f64).map(|h| h.depth)
        })
    }

    pub fn normal_map(&self, view: usize) -> NormalMap {
        let cam = &self.cameras[view];
        NormalMap::from_fn(cam.width, cam.height, Vector3::zeros(), |x, y| {
            self.hit(view, x as f64, y as f64).map(|h| h.normal)
        })
    }

    pub fn depth_normal_map(&self, view: usize) -> DepthNormalMap {
        DepthNormalMap::from_depth_normal(&self.depth_map(view), &self.normal_map(view))
    }

    /// World points of every ground-truth pixel of `view` that also projects
    /// inside all of `also_seen_by`.
    pub fn ground_truth_points(&self, view: usize, also_seen_by: &[usize]) -> Vec<Vector3<f64>> {
        let cam = &self.cameras[view];
        let mut pts = Vec::new();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let Some(hit) = self.hit(view, x as f64, y as f64) else {
                    continue;
                };
                let p = cam.unproject(&Vector2::new(x as f64, y as f64), hit.depth).unwrap();
                let visible = also_seen_by.iter().all(|&o| {
                    self.cameras[o]
                        .project(&p)
                        .map(|(q, _)| self.cameras[o].contains(&q))
                        .unwrap_or(false)
                });
                if visible {
                    pts.push(p);
                }
            }
        }
        pts
    }

    /// Distance of a world point to the nearest surface plane.
    pub fn distance_to_surface(&self, p: &Vector3<f64>) -> f64 {
        self.surfaces
            .iter()
            .map(|s| s.normal.dot(&(p - s.origin)).abs())
            .fold(f64::INFINITY, f64::min)
    }
}
