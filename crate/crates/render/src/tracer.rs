//! Whitted-style ray tracing of RGB, first-hit z-depth and camera-space
//! normals.
//!
//! Diffuse surfaces take direct light with shadow rays, metals mirror-reflect
//! scaled by albedo, and dielectrics split into a Schlick-weighted reflection
//! and a refraction. Depth and normals always come from the first surface hit
//! of the pixel-centre ray, whatever its material, so they do not depend on
//! the shading sample count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use clearflow_core::Video;

use crate::error::{RenderError, Result};
use crate::geometry::{Mat3, Shape, Vec3};
use crate::scene::{Environment, Light, MaterialClass, MaterialSpec, SceneSpec, TableTexture};
use crate::trajectory::{CameraPose, CameraTrajectory};

/// Surface offset for secondary rays.
const EPS: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-6;
/// Branches carrying less throughput than this are not traced.
const MIN_THROUGHPUT: f64 = 1e-3;
/// Distance over which Beer-Lambert absorption applies the full albedo.
const ABSORPTION_LENGTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub medium_ior: f64,
    pub depth_budget: u32,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, medium_ior: f64, depth_budget: u32) -> Result<Self> {
        check_unit("ray direction", &direction)?;
        if !(medium_ior >= 1.0) {
            return Err(RenderError::InvalidArgument(format!("medium ior {medium_ior} below 1")));
        }
        Ok(Self {
            origin,
            direction,
            medium_ior,
            depth_budget,
        })
    }
}

fn check_unit(what: &str, v: &Vec3) -> Result<()> {
    let n = v.norm();
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(RenderError::InvalidArgument(format!(
            "{what} has length {n}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Refraction {
    Transmitted(Vec3),
    TotalInternalReflection,
}

/// Snell refraction of unit `dir` at a surface with unit normal `n` (either
/// orientation), passing from index `ior_in` to `ior_out`.
pub fn refract(dir: &Vec3, n: &Vec3, ior_in: f64, ior_out: f64) -> Result<Refraction> {
    check_unit("direction", dir)?;
    check_unit("normal", n)?;
    if !(ior_in >= 1.0 && ior_out >= 1.0) {
        return Err(RenderError::InvalidArgument(format!(
            "indices of refraction {ior_in}, {ior_out} must be at least 1"
        )));
    }
    let n = if dir.dot(n) > 0.0 { -n } else { *n };
    let eta = ior_in / ior_out;
    let cos_i = -dir.dot(&n);
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i).max(0.0);
    if sin2_t > 1.0 {
        return Ok(Refraction::TotalInternalReflection);
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    Ok(Refraction::Transmitted(
        (eta * dir + (eta * cos_i - cos_t) * n).normalize(),
    ))
}

/// `R0 + (1 - R0)(1 - cos)^5` with `R0 = ((n1 - n2) / (n1 + n2))^2`.
pub fn fresnel_schlick(cos_theta: f64, ior_in: f64, ior_out: f64) -> f64 {
    let r0 = ((ior_in - ior_out) / (ior_in + ior_out)).powi(2);
    let c = 1.0 - cos_theta.clamp(0.0, 1.0);
    r0 + (1.0 - r0) * c.powi(5)
}

fn reflect(d: &Vec3, n: &Vec3) -> Vec3 {
    (d - 2.0 * d.dot(n) * n).normalize()
}

/// Pinhole intrinsics in pixels; the principal point is the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Camera axes: x right, y up, z toward the viewer (the camera looks down -z).
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub eye: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub intrinsics: Intrinsics,
}

impl Camera {
    pub fn look_at(pose: &CameraPose, width: usize, height: usize, fov_deg: f64) -> Result<Self> {
        let eye = Vec3::from(pose.position);
        let to = Vec3::from(pose.look_at) - eye;
        if to.norm() < 1e-12 {
            return Err(RenderError::InvalidArgument("camera looks at its own position".into()));
        }
        let forward = to.normalize();
        let right = forward.cross(&Vec3::from(pose.up));
        if right.norm() < 1e-9 {
            return Err(RenderError::InvalidArgument(
                "camera up vector is parallel to the view".into(),
            ));
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Ok(Self {
            eye,
            right,
            up,
            forward,
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: 0.5 * width as f64,
                cy: 0.5 * height as f64,
                width,
                height,
            },
        })
    }

    /// Unit direction through image position `(u, v)` in pixels, v downward.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        (self.forward + (u - k.cx) / k.fx * self.right - (v - k.cy) / k.fy * self.up).normalize()
    }

    /// Camera-to-world `[R | t]`, rows of a 3x4 matrix.
    pub fn extrinsics(&self) -> [[f64; 4]; 3] {
        let back = -self.forward;
        std::array::from_fn(|i| [self.right[i], self.up[i], back[i], self.eye[i]])
    }

    pub fn to_camera_frame(&self, n: &Vec3) -> Vec3 {
        Vec3::new(n.dot(&self.right), n.dot(&self.up), -n.dot(&self.forward))
    }
}

#[derive(Clone, Debug)]
pub struct Object {
    pub shape: Shape,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub material: MaterialSpec,
}

impl Object {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        let rt = self.rotation.transpose();
        let h = self.shape.intersect(&(rt * (o - self.translation)), &(rt * d))?;
        Some((h.t, (self.rotation * h.normal).normalize()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Object(usize),
    Table,
    Wall,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    point: Vec3,
    /// Geometric normal; outward for objects.
    normal: Vec3,
    surface: Surface,
}

/// A scene ready for tracing.
#[derive(Clone, Debug)]
pub struct CompiledScene {
    pub objects: Vec<Object>,
    pub environment: Option<Environment>,
    pub table: TableTexture,
    pub lights: Vec<Light>,
    pub ambient: f64,
}

impl CompiledScene {
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let objects = spec
            .placements
            .iter()
            .map(|p| {
                Ok(Object {
                    shape: p.asset.shape()?,
                    rotation: p.pose.rotation(),
                    translation: p.pose.translation(),
                    material: p.asset.material.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            objects,
            environment: Some(spec.environment),
            table: spec.table.clone(),
            lights: spec.lights.clone(),
            ambient: spec.ambient,
        })
    }

    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut offer = |t: f64, normal: Vec3, surface: Surface| {
            if t > EPS && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    point: o + t * d,
                    normal,
                    surface,
                });
            }
        };
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, n)) = obj.intersect(o, d) {
                offer(t, n, Surface::Object(i));
            }
        }
        if let Some(env) = &self.environment {
            let e = env.half_extent();
            if d.z.abs() > 1e-15 {
                let t = -o.z / d.z;
                let p = o + t * d;
                if p.x.abs() <= e && p.y.abs() <= e {
                    offer(t, Vec3::z(), Surface::Table);
                }
            }
            if let Environment::Container { wall_height, .. } = *env {
                for axis in 0..2 {
                    if d[axis].abs() < 1e-15 {
                        continue;
                    }
                    for side in [-e, e] {
                        let t = (side - o[axis]) / d[axis];
                        let p = o + t * d;
                        if p[1 - axis].abs() <= e && (0.0..=wall_height).contains(&p.z) {
                            let mut n = Vec3::zeros();
                            n[axis] = -side.signum();
                            offer(t, n, Surface::Wall);
                        }
                    }
                }
            }
        }
        best
    }

    fn table_albedo(&self, p: &Vec3) -> Vec3 {
        let tile = self.table.tile.max(1e-9);
        let parity = ((p.x / tile).floor() + (p.y / tile).floor()).rem_euclid(2.0) as usize;
        Vec3::from(self.table.albedo[parity])
    }

    fn background(d: &Vec3) -> Vec3 {
        let s = d.z.clamp(0.0, 1.0);
        Vec3::new(0.82, 0.82, 0.8) * (1.0 - s) + Vec3::new(0.45, 0.55, 0.75) * s
    }

    /// Light transmitted from `p` toward a light at distance `dist`:
    /// opaque blockers stop it, dielectrics pass a tinted fraction.
    fn visibility(&self, p: &Vec3, dir: &Vec3, dist: f64) -> Vec3 {
        let mut v = Vec3::repeat(1.0);
        let mut o = *p;
        let mut remaining = dist;
        for _ in 0..16 {
            let Some(h) = self.intersect(&o, dir) else { return v };
            if h.t >= remaining {
                return v;
            }
            match h.surface {
                Surface::Object(i) if self.objects[i].material.class.is_dielectric() => {
                    let a = Vec3::from(self.objects[i].material.albedo);
                    v = v.component_mul(&(0.9 * a.map(f64::sqrt)));
                }
                _ => return Vec3::zeros(),
            }
            o = h.point + EPS * dir;
            remaining -= h.t + EPS;
        }
        v
    }

    fn direct(&self, p: &Vec3, n: &Vec3, albedo: &Vec3) -> Vec3 {
        let mut c = Vec3::repeat(self.ambient);
        for l in &self.lights {
            let to = Vec3::from(l.position) - p;
            let dist = to.norm();
            let ldir = to / dist;
            let ndl = n.dot(&ldir);
            if ndl <= 0.0 {
                continue;
            }
            let vis = self.visibility(&(p + EPS * n), &ldir, dist);
            c += (l.intensity * ndl / (dist * dist)) * Vec3::from(l.color).component_mul(&vis);
        }
        albedo.component_mul(&c)
    }

    /// Radiance along `ray`.
    pub fn trace(&self, ray: &Ray, absorption: bool) -> Vec3 {
        self.radiance(ray, 1.0, absorption)
    }

    fn radiance(&self, ray: &Ray, throughput: f64, absorption: bool) -> Vec3 {
        if ray.depth_budget == 0 {
            return Vec3::repeat(self.ambient);
        }
        let d = ray.direction;
        let Some(hit) = self.intersect(&ray.origin, &d) else {
            return Self::background(&d);
        };
        let entering = d.dot(&hit.normal) < 0.0;
        let facing = if entering { hit.normal } else { -hit.normal };
        let next = |origin: Vec3, direction: Vec3, medium_ior: f64| Ray {
            origin,
            direction,
            medium_ior,
            depth_budget: ray.depth_budget - 1,
        };
        let obj = match hit.surface {
            Surface::Object(i) => &self.objects[i],
            Surface::Table => return self.direct(&hit.point, &facing, &self.table_albedo(&hit.point)),
            Surface::Wall => return self.direct(&hit.point, &facing, &Vec3::from(self.table.albedo[0])),
        };
        let albedo = Vec3::from(obj.material.albedo);
        let above = hit.point + EPS * facing;
        let below = hit.point - EPS * facing;
        match obj.material.class {
            MaterialClass::Diffuse => self.direct(&hit.point, &facing, &albedo),
            MaterialClass::Metal => {
                let r = obj.material.roughness;
                let mirror = if throughput * (1.0 - r) >= MIN_THROUGHPUT {
                    let refl = reflect(&d, &facing);
                    self.radiance(&next(above, refl, ray.medium_ior), throughput * (1.0 - r), absorption)
                } else {
                    Vec3::zeros()
                };
                albedo.component_mul(&mirror) * (1.0 - r) + self.direct(&hit.point, &facing, &albedo) * r
            }
            MaterialClass::Glass | MaterialClass::Plastic => {
                let ior = obj.material.ior.unwrap_or(1.5);
                let (n1, n2) = if entering { (ray.medium_ior, ior) } else { (ior, 1.0) };
                let refl_dir = reflect(&d, &facing);
                let mut c = match refract(&d, &facing, n1, n2) {
                    Ok(Refraction::Transmitted(t)) => {
                        let cos = if n1 <= n2 { -d.dot(&facing) } else { -t.dot(&facing) };
                        let r = fresnel_schlick(cos, n1, n2);
                        let mut c = Vec3::zeros();
                        if throughput * r >= MIN_THROUGHPUT {
                            c += r * self.radiance(&next(above, refl_dir, n1), throughput * r, absorption);
                        }
                        if throughput * (1.0 - r) >= MIN_THROUGHPUT {
                            let mut tr = self.radiance(&next(below, t, n2), throughput * (1.0 - r), absorption);
                            if entering && obj.material.class == MaterialClass::Plastic {
                                tr = tr.component_mul(&albedo);
                            }
                            c += (1.0 - r) * tr;
                        }
                        c
                    }
                    _ => self.radiance(&next(above, refl_dir, n1), throughput, absorption),
                };
                if absorption && !entering {
                    // the ray arrived here through the interior
                    let k = hit.t / ABSORPTION_LENGTH;
                    c = c.component_mul(&albedo.map(|a| a.max(1e-6).powf(k)));
                }
                c
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Shading samples per pixel.
    pub spp: usize,
    pub fov_deg: f64,
    pub max_bounces: u32,
    /// Beer-Lambert tinting inside dielectrics.
    pub absorption: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            spp: 1,
            fov_deg: 50.0,
            max_bounces: 8,
            absorption: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.spp == 0 {
            return Err(RenderError::InvalidArgument(
                "resolution and samples per pixel must be positive".into(),
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(RenderError::InvalidArgument(format!(
                "fov {} outside (0, 180)",
                self.fov_deg
            )));
        }
        Ok(())
    }
}

/// One frame. Depth is z-depth along the optical axis (0 where nothing is
/// hit); normals are camera-space unit vectors (zero where nothing is hit).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub normal: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Renders one view. Shading samples are stratified on a `ceil(sqrt(spp))`
/// grid, jittered with a stream derived from `(seed, stream)`.
pub fn render_frame(
    scene: &CompiledScene,
    camera: &Camera,
    config: &RenderConfig,
    seed: u64,
    stream: u64,
) -> Result<RenderedFrame> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    if camera.intrinsics.width != w || camera.intrinsics.height != h {
        return Err(RenderError::InvalidArgument(
            "camera resolution differs from the render config".into(),
        ));
    }
    let grid = (config.spp as f64).sqrt().ceil() as usize;
    let rows: Vec<Vec<(Vec3, f32, Vec3)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream.wrapping_mul(1 << 20).wrapping_add(y as u64));
            (0..w)
                .map(|x| {
                    let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                    let centre = camera.direction(u, v);
                    let (depth, normal) = match scene.intersect(&camera.eye, &centre) {
                        Some(hit) => {
                            let z = hit.t * centre.dot(&camera.forward);
                            let n = if centre.dot(&hit.normal) < 0.0 {
                                hit.normal
                            } else {
                                -hit.normal
                            };
                            (z as f32, camera.to_camera_frame(&n).normalize())
                        }
                        None => (0.0, Vec3::zeros()),
                    };
                    let mut c = Vec3::zeros();
                    for s in 0..config.spp {
                        let dir = if config.spp == 1 {
                            centre
                        } else {
                            let (gx, gy) = ((s % grid) as f64, (s / grid) as f64);
                            let jx = (gx + rng.random::<f64>()) / grid as f64;
                            let jy = (gy + rng.random::<f64>()) / grid as f64;
                            camera.direction(x as f64 + jx, y as f64 + jy)
                        };
                        let ray = Ray {
                            origin: camera.eye,
                            direction: dir,
                            medium_ior: 1.0,
                            depth_budget: config.max_bounces,
                        };
                        c += scene.trace(&ray, config.absorption);
                    }
                    (c / config.spp as f64, depth, normal)
                })
                .collect()
        })
        .collect();
    let mut f = RenderedFrame {
        width: w,
        height: h,
        rgb: Vec::with_capacity(w * h * 3),
        depth: Vec::with_capacity(w * h),
        normal: Vec::with_capacity(w * h * 3),
        valid: Vec::with_capacity(w * h),
    };
    for (c, d, n) in rows.into_iter().flatten() {
        f.rgb.extend(c.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
        f.depth.push(d);
        f.normal.extend(n.iter().map(|&v| v as f32));
        f.valid.push(d > 0.0);
    }
    Ok(f)
}

/// A rendered sequence: RGB in `[0, 1]`, metric z-depth, camera-space normals
/// and the hit mask, with per-frame camera parameters.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub rgb: Video,
    pub depth: Video,
    pub normal: Video,
    pub mask: Vec<bool>,
    pub intrinsics: Intrinsics,
    pub extrinsics: Vec<[[f64; 4]; 3]>,
}

impl ScenePair {
    /// Mask, depth and normal consistency.
    pub fn check(&self) -> Result<()> {
        let n = self.depth.data().len();
        if self.mask.len() != n || self.normal.data().len() != 3 * n || self.rgb.data().len() != 3 * n {
            return Err(RenderError::InvalidArgument("channel sizes disagree".into()));
        }
        for (i, (&d, &m)) in self.depth.data().iter().zip(&self.mask).enumerate() {
            let nv = &self.normal.data()[3 * i..3 * i + 3];
            let len = nv.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let ok = d >= 0.0 && (m == (d > 0.0)) && if m { (len - 1.0).abs() <= 1e-4 } else { len == 0.0 };
            if !ok {
                return Err(RenderError::InvalidArgument(format!(
                    "pixel {i}: depth {d}, mask {m}, normal length {len}"
                )));
            }
        }
        if self.rgb.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RenderError::InvalidArgument("rgb outside [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn render_sequence(
    scene: &SceneSpec,
    trajectory: &CameraTrajectory,
    config: &RenderConfig,
    seed: u64,
) -> Result<ScenePair> {
    config.validate()?;
    let compiled = CompiledScene::from_spec(scene)?;
    let (w, h) = (config.width, config.height);
    let frames = trajectory.frames();
    let (mut rgb, mut depth, mut normal, mut mask) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut extrinsics = Vec::with_capacity(frames);
    let mut intrinsics = None;
    for (k, pose) in trajectory.poses.iter().enumerate() {
        let cam = Camera::look_at(pose, w, h, config.fov_deg)?;
        let f = render_frame(&compiled, &cam, config, seed, k as u64)?;
        rgb.extend(f.rgb);
        depth.extend(f.depth);
        normal.extend(f.normal);
        mask.extend(f.valid);
        extrinsics.push(cam.extrinsics());
        intrinsics = Some(cam.intrinsics);
    }
    let intrinsics = intrinsics.ok_or_else(|| RenderError::Trajectory("trajectory has no poses".into()))?;
    Ok(ScenePair {
        rgb: Video::new(frames, h, w, 3, rgb)?,
        depth: Video::new(frames, h, w, 1, depth)?,
        normal: Video::new(frames, h, w, 3, normal)?,
        mask,
        intrinsics,
        extrinsics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snell_and_total_internal_reflection() {
        let a = 30f64.to_radians();
        let d = Vec3::new(a.sin(), 0.0, -a.cos());
        let Refraction::Transmitted(t) = refract(&d, &Vec3::z(), 1.0, 1.5).unwrap() else {
            panic!("expected transmission")
        };
        let angle = t.x.atan2(-t.z).to_degrees();
        assert!((angle - (0.5f64 / 1.5).asin().to_degrees()).abs() < 1e-9);
        let b = 45f64.to_radians();
        let d = Vec3::new(b.sin(), 0.0, -b.cos());
        assert_eq!(
            refract(&d, &Vec3::z(), 1.5, 1.0).unwrap(),
            Refraction::TotalInternalReflection
        );
        assert!(refract(&(2.0 * d), &Vec3::z(), 1.0, 1.5).is_err());
    }

    #[test]
    fn schlick_limits() {
        assert!((fresnel_schlick(1.0, 1.0, 1.5) - 0.04).abs() < 1e-12);
        assert_eq!(fresnel_schlick(0.0, 1.0, 1.5), 1.0);
        assert_eq!(fresnel_schlick(1.0, 1.33, 1.33), 0.0);
    }

    #[test]
    fn camera_frame_convention() {
        let pose = CameraPose {
            position: [0.0, 0.0, 0.0],
            look_at: [2.0, 0.0, 0.0],
            up: [0.0, 0.0, 1.0],
        };
        let cam = Camera::look_at(&pose, 9, 9, 40.0).unwrap();
        let toward = cam.to_camera_frame(&-cam.forward);
        assert!((toward - Vec3::z()).norm() < 1e-12);
        assert!((cam.direction(4.5, 4.5) - cam.forward).norm() < 1e-12);
        assert!(cam.direction(4.5, 0.0).z > 0.0, "image v grows downward");
    }
}
