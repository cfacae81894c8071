//! Procedural tabletop scenes: a parametric asset bank, randomized materials
//! and poses, and a gravity relaxation that settles objects onto the table.
//!
//! Collision uses each asset's bounding sphere; contact with the table uses
//! the exact support function of the posed shape, so objects stand on their
//! real base rather than on their proxy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RenderError, Result};
use crate::geometry::{rotation_between, Mat3, Shape, Vec3};

/// Allowed penetration and support gap after settling, in scene units (m).
pub const CONTACT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialClass {
    Glass,
    Plastic,
    Metal,
    Diffuse,
}

impl MaterialClass {
    pub const ALL: [MaterialClass; 4] = [Self::Glass, Self::Plastic, Self::Metal, Self::Diffuse];

    pub fn is_dielectric(self) -> bool {
        matches!(self, Self::Glass | Self::Plastic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub class: MaterialClass,
    /// Index of refraction for glass and plastic; absent otherwise.
    pub ior: Option<f64>,
    pub albedo: [f64; 3],
    pub roughness: f64,
}

impl MaterialSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RenderError::InvalidAsset(m));
        match (self.class, self.ior) {
            (MaterialClass::Glass, Some(n)) if !(1.3..=1.7).contains(&n) => {
                return bad(format!("glass ior {n} outside [1.3, 1.7]"))
            }
            (MaterialClass::Plastic, Some(n)) if !(n >= 1.0) => return bad(format!("plastic ior {n} below 1")),
            (MaterialClass::Glass | MaterialClass::Plastic, None) => {
                return bad(format!("{:?} needs an ior", self.class))
            }
            (MaterialClass::Metal | MaterialClass::Diffuse, Some(_)) => {
                return bad(format!("{:?} is not refractive and takes no ior", self.class))
            }
            _ => {}
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad(format!("albedo {:?} outside [0, 1]", self.albedo));
        }
        if !(0.0..=1.0).contains(&self.roughness) {
            return bad(format!("roughness {} outside [0, 1]", self.roughness));
        }
        Ok(())
    }

    /// Draws a material of the given class.
    pub fn sample<R: Rng + ?Sized>(class: MaterialClass, rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        match class {
            MaterialClass::Glass => {
                let ior = u(1.4, 1.6);
                let tint = [u(0.9, 1.0), u(0.92, 1.0), u(0.9, 1.0)];
                Self {
                    class,
                    ior: Some(ior),
                    albedo: tint,
                    roughness: 0.0,
                }
            }
            MaterialClass::Plastic => {
                let ior = u(1.45, 1.6);
                let albedo = [u(0.3, 1.0), u(0.3, 1.0), u(0.3, 1.0)];
                Self {
                    class,
                    ior: Some(ior),
                    albedo,
                    roughness: u(0.0, 0.2),
                }
            }
            MaterialClass::Metal => {
                let base = u(0.6, 0.95);
                let warm = u(0.0, 0.25);
                Self {
                    class,
                    ior: None,
                    albedo: [base, base * (1.0 - 0.3 * warm), base * (1.0 - warm)],
                    roughness: u(0.0, 0.3),
                }
            }
            MaterialClass::Diffuse => Self {
                class,
                ior: None,
                albedo: [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)],
                roughness: 1.0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Sphere,
    Box,
    Cylinder,
    RevolutionSurface,
}

/// One placed asset. `params` are in unscaled units:
/// sphere `[r]`, box `[hx, hy, hz]`, cylinder `[r, half_height]`,
/// revolution surface `[r0, z0, r1, z1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSpec {
    pub name: String,
    pub kind: AssetKind,
    pub params: Vec<f64>,
    pub material: MaterialSpec,
    pub scale: f64,
}

impl AssetSpec {
    /// Scaled shape in a local frame centred on the asset.
    pub fn shape(&self) -> Result<Shape> {
        let bad = |m: String| Err(RenderError::InvalidAsset(format!("`{}`: {m}", self.name)));
        if !(self.scale > 0.0) {
            return bad(format!("scale {} must be positive", self.scale));
        }
        let s = self.scale;
        let p = &self.params;
        if p.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        let positive = |n: usize| p.len() == n && p.iter().all(|&v| v > 0.0);
        match self.kind {
            AssetKind::Sphere if positive(1) => Ok(Shape::Sphere { radius: s * p[0] }),
            AssetKind::Box if positive(3) => Ok(Shape::Box {
                half: Vec3::new(p[0], p[1], p[2]) * s,
            }),
            AssetKind::Cylinder if positive(2) => Ok(Shape::Cylinder {
                radius: s * p[0],
                half_height: s * p[1],
            }),
            AssetKind::RevolutionSurface => {
                if p.len() < 4 || !p.len().is_multiple_of(2) {
                    return bad("revolution profile needs at least two (r, z) pairs".into());
                }
                let rings: Vec<(f64, f64)> = p.chunks(2).map(|c| (c[0], c[1])).collect();
                if rings.iter().any(|&(r, _)| r <= 0.0) {
                    return bad("revolution profile radii must be strictly positive".into());
                }
                if rings.windows(2).any(|w| w[1].1 <= w[0].1) {
                    return bad("revolution profile heights must strictly increase".into());
                }
                let mid = 0.5 * (rings[0].1 + rings[rings.len() - 1].1);
                Ok(Shape::Revolution {
                    profile: rings.iter().map(|&(r, z)| (s * r, s * (z - mid))).collect(),
                })
            }
            kind => bad(format!("{kind:?} parameters {p:?} have the wrong count or sign")),
        }
    }
}

/// Rigid pose: `world = rotation * local + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn new(rotation: &Mat3, translation: &Vec3) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rotation[(i, j)];
            }
        }
        Self {
            rotation: r,
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub asset: AssetSpec,
    pub pose: Pose,
}

/// The support the objects rest on, a square table centred at the origin
/// with its top at `z = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Environment {
    Tabletop {
        half_extent: f64,
    },
    /// A table with walls of the given height along its edges.
    Container {
        half_extent: f64,
        wall_height: f64,
    },
}

impl Environment {
    pub fn half_extent(&self) -> f64 {
        match *self {
            Environment::Tabletop { half_extent } | Environment::Container { half_extent, .. } => half_extent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Light {
    pub position: [f64; 3],
    pub intensity: f64,
    pub color: [f64; 3],
}

/// Checkerboard table texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableTexture {
    pub albedo: [[f64; 3]; 2],
    pub tile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub placements: Vec<Placement>,
    pub environment: Environment,
    pub table: TableTexture,
    pub lights: Vec<Light>,
    pub ambient: f64,
    pub settled: bool,
}

impl SceneSpec {
    /// Number of placed assets.
    pub fn m(&self) -> usize {
        self.placements.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.placements.is_empty() {
            return Err(RenderError::InvalidScene(
                "M ≥ 1 violated: the scene has no assets".into(),
            ));
        }
        for p in &self.placements {
            p.asset.shape()?;
            p.asset.material.validate()?;
        }
        if !(self.environment.half_extent() > 0.0) {
            return Err(RenderError::InvalidScene("environment extent must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| RenderError::InvalidScene(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| RenderError::InvalidScene(format!("scene manifest: {e}")))
    }
}

/// A parametric family; every draw jitters the parameters so one template
/// yields many distinct shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetTemplate {
    pub name: String,
    pub kind: AssetKind,
    pub params: Vec<f64>,
    /// Relative parameter jitter.
    pub jitter: f64,
    pub materials: Vec<MaterialClass>,
}

impl AssetTemplate {
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let j = self.jitter;
        let mut f = |w: f64| {
            if w > 0.0 {
                rng.random_range(1.0 - w..=1.0 + w)
            } else {
                1.0
            }
        };
        match self.kind {
            AssetKind::RevolutionSurface => {
                let (fr, fz) = (f(j), f(j));
                self.params
                    .chunks(2)
                    .flat_map(|c| [c[0] * fr * f(0.5 * j), c[1] * fz])
                    .collect()
            }
            _ => self.params.iter().map(|&p| p * f(j)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetBank {
    pub templates: Vec<AssetTemplate>,
}

impl AssetBank {
    /// Primitive families plus goblet, bottle and bowl profiles, sized in metres.
    pub fn standard() -> Self {
        let all = MaterialClass::ALL.to_vec();
        let t = |name: &str, kind, params: &[f64]| AssetTemplate {
            name: name.into(),
            kind,
            params: params.to_vec(),
            jitter: 0.2,
            materials: all.clone(),
        };
        Self {
            templates: vec![
                t("sphere", AssetKind::Sphere, &[0.04]),
                t("box", AssetKind::Box, &[0.035, 0.03, 0.025]),
                t("cylinder", AssetKind::Cylinder, &[0.03, 0.045]),
                t(
                    "goblet",
                    AssetKind::RevolutionSurface,
                    &[
                        0.03, 0.0, 0.03, 0.006, 0.006, 0.012, 0.005, 0.06, 0.012, 0.07, 0.035, 0.1, 0.04, 0.14,
                    ],
                ),
                t(
                    "bottle",
                    AssetKind::RevolutionSurface,
                    &[
                        0.03, 0.0, 0.032, 0.01, 0.032, 0.11, 0.02, 0.14, 0.011, 0.16, 0.011, 0.19,
                    ],
                ),
                t(
                    "bowl",
                    AssetKind::RevolutionSurface,
                    &[0.025, 0.0, 0.045, 0.02, 0.06, 0.045, 0.065, 0.06],
                ),
            ],
        }
    }

    /// The same families with materials restricted to `classes`.
    pub fn restricted_to(mut self, classes: &[MaterialClass]) -> Self {
        for t in &mut self.templates {
            t.materials = classes.to_vec();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(RenderError::InvalidScene("asset bank is empty".into()));
        }
        if let Some(t) = self.templates.iter().find(|t| t.materials.is_empty()) {
            return Err(RenderError::InvalidScene(format!(
                "template `{}` allows no material",
                t.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Inclusive range of the asset count `M`.
    pub m_range: [usize; 2],
    pub scale_range: [f64; 2],
    pub half_extent: f64,
    pub container_probability: f64,
    pub wall_height: f64,
    /// Inclusive range of point-light count.
    pub light_range: [usize; 2],
    pub ambient: f64,
    /// Drop height of an asset's lowest point above the table.
    pub drop_height: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            m_range: [3, 6],
            scale_range: [0.8, 1.25],
            half_extent: 0.35,
            container_probability: 0.3,
            wall_height: 0.05,
            light_range: [1, 3],
            ambient: 0.15,
            drop_height: [0.02, 0.2],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RenderError::InvalidScene(m.into()));
        if self.m_range[0] < 1 || self.m_range[0] > self.m_range[1] {
            return bad("m_range must satisfy 1 <= min <= max");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return bad("scale_range must be positive and ordered");
        }
        if self.light_range[0] < 1 || self.light_range[0] > self.light_range[1] {
            return bad("light_range must satisfy 1 <= min <= max");
        }
        if !(self.half_extent > 0.0) || !(0.0..=1.0).contains(&self.container_probability) {
            return bad("half_extent must be positive and container_probability in [0, 1]");
        }
        Ok(())
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Draws an unsettled scene: `M` assets with random 6-DOF poses held above
/// the table, materials, lights and table texture.
pub fn sample_scene(bank: &AssetBank, config: &SceneConfig, seed: u64) -> Result<SceneSpec> {
    bank.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(config.m_range[0]..=config.m_range[1]);
    let e = config.half_extent;
    let mut placements = Vec::with_capacity(m);
    for i in 0..m {
        let tpl = &bank.templates[rng.random_range(0..bank.templates.len())];
        let class = tpl.materials[rng.random_range(0..tpl.materials.len())];
        let asset = AssetSpec {
            name: format!("{}_{i}", tpl.name),
            kind: tpl.kind,
            params: tpl.sample_params(&mut rng),
            material: MaterialSpec::sample(class, &mut rng),
            scale: rng.random_range(config.scale_range[0]..=config.scale_range[1]),
        };
        let shape = asset.shape()?;
        let rot = random_rotation(&mut rng);
        let bottom = shape.support(&(rot.transpose() * -Vec3::z()));
        let lift = rng.random_range(config.drop_height[0]..=config.drop_height[1]);
        let xy = 0.6 * e;
        let pos = Vec3::new(
            rng.random_range(-xy..=xy),
            rng.random_range(-xy..=xy),
            bottom + lift + 0.5 * i as f64 * shape.bounding_radius(),
        );
        placements.push(Placement {
            asset,
            pose: Pose::new(&rot, &pos),
        });
    }
    let environment = if rng.random::<f64>() < config.container_probability {
        Environment::Container {
            half_extent: e,
            wall_height: config.wall_height,
        }
    } else {
        Environment::Tabletop { half_extent: e }
    };
    let shade = rng.random_range(0.35..=0.8);
    let hue: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..=1.0));
    let table = TableTexture {
        albedo: [hue.map(|h| h * shade), hue.map(|h| h * shade * 0.45)],
        tile: rng.random_range(0.025..=0.06),
    };
    let n_lights = rng.random_range(config.light_range[0]..=config.light_range[1]);
    let lights = (0..n_lights)
        .map(|_| {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.2..=0.6);
            let warm = rng.random_range(-0.1..=0.1);
            Light {
                position: [r * az.cos(), r * az.sin(), rng.random_range(0.5..=0.9)],
                intensity: rng.random_range(0.25..=0.5) / n_lights as f64,
                color: [1.0 + warm, 1.0, 1.0 - warm],
            }
        })
        .collect();
    let scene = SceneSpec {
        seed,
        placements,
        environment,
        table,
        lights,
        ambient: config.ambient,
        settled: false,
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettleConfig {
    /// Gravity displacement per iteration.
    pub step: f64,
    pub max_iterations: usize,
    /// Constraint projection sweeps per iteration.
    pub sweeps: usize,
}

impl Default for SettleConfig {
    fn default() -> Self {
        Self {
            step: 0.002,
            max_iterations: 20_000,
            sweeps: 8,
        }
    }
}

/// Snaps an orientation to the nearest resting orientation: boxes and
/// cylinders onto a face (or a cylinder onto its side), solids of revolution
/// upright. Spheres keep any orientation.
fn resting_rotation(kind: AssetKind, rot: &Mat3) -> Mat3 {
    let down = -Vec3::z();
    match kind {
        AssetKind::Sphere => *rot,
        AssetKind::Box => {
            let mut best = (f64::NEG_INFINITY, Vec3::z());
            for i in 0..3 {
                for s in [-1.0, 1.0] {
                    let a = s * rot.column(i).into_owned();
                    if a.dot(&down) > best.0 {
                        best = (a.dot(&down), a);
                    }
                }
            }
            rotation_between(&best.1, &down) * rot
        }
        AssetKind::Cylinder => {
            let axis = rot.column(2).into_owned();
            if axis.z.abs() >= std::f64::consts::FRAC_1_SQRT_2 {
                let a = axis * axis.z.signum();
                rotation_between(&a, &Vec3::z()) * rot
            } else {
                let flat = Vec3::new(axis.x, axis.y, 0.0).normalize();
                rotation_between(&axis, &flat) * rot
            }
        }
        AssetKind::RevolutionSurface => {
            let axis = rot.column(2).into_owned();
            rotation_between(&axis, &Vec3::z()) * rot
        }
    }
}

struct Body {
    center: Vec3,
    radius: f64,
    /// Support distances below and around the centre: `[-z, +x, -x, +y, -y]`.
    reach: [f64; 5],
}

impl Body {
    fn on_table(&self) -> bool {
        self.center.z - self.reach[0] <= CONTACT_TOLERANCE
    }
}

fn project_bounds(b: &mut Body, e: f64) {
    b.center.z = b.center.z.max(b.reach[0]);
    b.center.x = b.center.x.clamp(-e + b.reach[2], e - b.reach[1]);
    b.center.y = b.center.y.clamp(-e + b.reach[4], e - b.reach[3]);
}

/// Gravity relaxation with bounding-sphere collisions. Every iteration moves
/// all assets down by `step`, then repeatedly resolves pairwise overlap
/// (splitting the correction evenly) and table/extent constraints. A scene is
/// at rest once no asset moves for 20 consecutive iterations.
pub fn settle(scene: &SceneSpec, config: &SettleConfig, seed: u64) -> Result<SceneSpec> {
    scene.validate()?;
    let e = scene.environment.half_extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e77_1e00);
    let mut out = scene.clone();
    let mut bodies = Vec::with_capacity(scene.m());
    for p in &mut out.placements {
        let shape = p.asset.shape()?;
        let rot = resting_rotation(p.asset.kind, &p.pose.rotation());
        let rt = rot.transpose();
        let reach = [-Vec3::z(), Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()].map(|u| shape.support(&(rt * u)));
        if reach[1] + reach[2] > 2.0 * e || reach[3] + reach[4] > 2.0 * e {
            return Err(RenderError::InvalidScene(format!(
                "`{}` is wider than the environment",
                p.asset.name
            )));
        }
        p.pose = Pose::new(&rot, &p.pose.translation());
        bodies.push(Body {
            center: p.pose.translation(),
            radius: shape.bounding_radius(),
            reach,
        });
    }
    let n = bodies.len();
    let mut still = 0;
    let mut converged_at = None;
    for iter in 0..config.max_iterations {
        let before: Vec<Vec3> = bodies.iter().map(|b| b.center).collect();
        for b in &mut bodies {
            b.center.z -= config.step;
        }
        for _ in 0..config.sweeps {
            for i in 0..n {
                for j in i + 1..n {
                    let diff = bodies[j].center - bodies[i].center;
                    let dist = diff.norm();
                    let pen = bodies[i].radius + bodies[j].radius - dist;
                    if pen <= 0.0 {
                        continue;
                    }
                    let mut dir = if dist > 1e-12 { diff / dist } else { Vec3::z() };
                    if dir.x.hypot(dir.y) < 1e-3 {
                        // balanced stack: break the symmetry sideways so the upper body can roll off
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        dir = (dir + 0.05 * Vec3::new(a.cos(), a.sin(), 0.0)).normalize();
                    }
                    bodies[i].center -= 0.5 * pen * dir;
                    bodies[j].center += 0.5 * pen * dir;
                }
            }
            for b in &mut bodies {
                project_bounds(b, e);
            }
        }
        let moved = bodies
            .iter()
            .zip(&before)
            .map(|(b, c)| (b.center - c).norm())
            .fold(0.0, f64::max);
        still = if moved < 1e-3 * config.step { still + 1 } else { 0 };
        if still >= 20 {
            converged_at = Some(iter);
            break;
        }
    }
    let Some(iterations) = converged_at else {
        return Err(RenderError::SettleFailed {
            iterations: config.max_iterations,
            msg: "assets still moving".into(),
        });
    };
    for i in 0..n {
        for j in i + 1..n {
            let gap = (bodies[j].center - bodies[i].center).norm() - bodies[i].radius - bodies[j].radius;
            if gap < -CONTACT_TOLERANCE {
                return Err(RenderError::SettleFailed {
                    iterations,
                    msg: format!("assets {i} and {j} interpenetrate by {:.2e}", -gap),
                });
            }
        }
    }
    for i in 0..n {
        let supported = bodies[i].on_table()
            || (0..n).any(|j| {
                j != i
                    && bodies[j].center.z < bodies[i].center.z
                    && (bodies[j].center - bodies[i].center).norm() - bodies[i].radius - bodies[j].radius
                        <= CONTACT_TOLERANCE
            });
        if !supported {
            return Err(RenderError::SettleFailed {
                iterations,
                msg: format!("asset {i} rests on nothing"),
            });
        }
    }
    for (p, b) in out.placements.iter_mut().zip(&bodies) {
        let mut c = b.center;
        if b.on_table() {
            c.z = b.reach[0];
        }
        p.pose.translation = [c.x, c.y, c.z];
    }
    out.settled = true;
    log::debug!("scene {} settled after {iterations} iterations", scene.seed);
    Ok(out)
}

/// Samples and settles a scene, redrawing with a derived seed when settling
/// rejects the arrangement.
pub fn generate_scene(
    bank: &AssetBank,
    config: &SceneConfig,
    settle_config: &SettleConfig,
    seed: u64,
    attempts: usize,
) -> Result<SceneSpec> {
    let mut last = None;
    for k in 0..attempts.max(1) as u64 {
        let s = seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let scene = sample_scene(bank, config, s)?;
        match settle(&scene, settle_config, s) {
            Ok(mut settled) => {
                settled.seed = seed;
                return Ok(settled);
            }
            Err(e @ RenderError::SettleFailed { .. }) => {
                log::warn!("scene seed {s} rejected: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
