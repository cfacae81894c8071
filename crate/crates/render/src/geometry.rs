//! Analytic ray intersection for the primitive families, in each shape's
//! local frame. Solids are closed, so every hit carries an outward normal and
//! a ray started inside finds its exit point.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest accepted ray parameter, guarding against self-intersection.
pub const T_MIN: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalHit {
    pub t: f64,
    /// Outward unit normal in the local frame.
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Box {
        half: Vec3,
    },
    /// Capped cylinder along local z.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Solid of revolution about local z: `(radius, z)` rings with strictly
    /// increasing z, closed by flat caps at both ends.
    Revolution {
        profile: Vec<(f64, f64)>,
    },
}

fn closer(best: &mut Option<LocalHit>, t: f64, normal: Vec3) {
    if t > T_MIN && best.is_none_or(|b| t < b.t) {
        *best = Some(LocalHit { t, normal });
    }
}

/// Real roots of `a t^2 + 2 b t + c = 0`, degrading to the linear case.
fn half_quadratic(a: f64, b: f64, c: f64, scale: f64) -> [Option<f64>; 2] {
    if a.abs() <= 1e-12 * scale {
        if b.abs() <= f64::MIN_POSITIVE {
            return [None, None];
        }
        return [Some(-c / (2.0 * b)), None];
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return [None, None];
    }
    let s = disc.sqrt();
    // avoid cancellation in the smaller-magnitude root
    let q = -(b + b.signum() * s);
    if q == 0.0 {
        return [Some(0.0), None];
    }
    [Some(q / a), Some(c / q)]
}

impl Shape {
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<LocalHit> {
        let mut best = None;
        let dd = d.norm_squared();
        match self {
            Shape::Sphere { radius } => {
                let b = o.dot(d);
                let c = o.norm_squared() - radius * radius;
                for t in half_quadratic(dd, b, c, dd).into_iter().flatten() {
                    closer(&mut best, t, (o + t * d) / *radius);
                }
            }
            Shape::Box { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let mut a = (-half[i] - o[i]) / d[i];
                    let mut b = (half[i] - o[i]) / d[i];
                    let mut axis = Vec3::zeros();
                    axis[i] = 1.0;
                    let (mut na, mut nb) = (-axis, axis);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if a > t0 {
                        t0 = a;
                        n0 = na;
                    }
                    if b < t1 {
                        t1 = b;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                closer(&mut best, t0, n0);
                if best.is_none() {
                    closer(&mut best, t1, n1);
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let a = d.x * d.x + d.y * d.y;
                let b = o.x * d.x + o.y * d.y;
                let c = o.x * o.x + o.y * o.y - radius * radius;
                for t in half_quadratic(a, b, c, dd).into_iter().flatten() {
                    let p = o + t * d;
                    if p.z.abs() <= *half_height {
                        closer(&mut best, t, Vec3::new(p.x, p.y, 0.0) / *radius);
                    }
                }
                disk_hits(&mut best, o, d, -half_height, *radius, -1.0);
                disk_hits(&mut best, o, d, *half_height, *radius, 1.0);
            }
            Shape::Revolution { profile } => {
                for w in profile.windows(2) {
                    let ((r0, z0), (r1, z1)) = (w[0], w[1]);
                    let k = (r1 - r0) / (z1 - z0);
                    let m = r0 - k * z0;
                    let base = m + k * o.z;
                    let a = d.x * d.x + d.y * d.y - k * k * d.z * d.z;
                    let b = o.x * d.x + o.y * d.y - k * d.z * base;
                    let c = o.x * o.x + o.y * o.y - base * base;
                    for t in half_quadratic(a, b, c, dd).into_iter().flatten() {
                        let p = o + t * d;
                        if p.z >= z0 && p.z <= z1 {
                            let n = Vec3::new(p.x, p.y, -k * (m + k * p.z));
                            closer(&mut best, t, n.normalize());
                        }
                    }
                }
                let (rb, zb) = profile[0];
                let (rt, zt) = profile[profile.len() - 1];
                disk_hits(&mut best, o, d, zb, rb, -1.0);
                disk_hits(&mut best, o, d, zt, rt, 1.0);
            }
        }
        best
    }

    /// Radius of a sphere about the local origin enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half } => half.norm(),
            Shape::Cylinder { radius, half_height } => radius.hypot(*half_height),
            Shape::Revolution { profile } => profile.iter().map(|(r, z)| r.hypot(*z)).fold(0.0, f64::max),
        }
    }

    /// Support function `max_p p . u` over the solid for a local direction `u`.
    pub fn support(&self, u: &Vec3) -> f64 {
        let radial = u.x.hypot(u.y);
        match self {
            Shape::Sphere { radius } => radius * u.norm(),
            Shape::Box { half } => half.x * u.x.abs() + half.y * u.y.abs() + half.z * u.z.abs(),
            Shape::Cylinder { radius, half_height } => half_height * u.z.abs() + radius * radial,
            Shape::Revolution { profile } => profile
                .iter()
                .map(|(r, z)| z * u.z + r * radial)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Point-in-solid test in the local frame.
    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Sphere { radius } => p.norm() <= *radius,
            Shape::Box { half } => (0..3).all(|i| p[i].abs() <= half[i]),
            Shape::Cylinder { radius, half_height } => p.z.abs() <= *half_height && p.x.hypot(p.y) <= *radius,
            Shape::Revolution { profile } => profile.windows(2).any(|w| {
                let ((r0, z0), (r1, z1)) = (w[0], w[1]);
                p.z >= z0 && p.z <= z1 && p.x.hypot(p.y) <= r0 + (r1 - r0) * (p.z - z0) / (z1 - z0)
            }),
        }
    }
}

fn disk_hits(best: &mut Option<LocalHit>, o: &Vec3, d: &Vec3, z: f64, radius: f64, side: f64) {
    if d.z.abs() < 1e-15 {
        return;
    }
    let t = (z - o.z) / d.z;
    let p = o + t * d;
    if p.x * p.x + p.y * p.y <= radius * radius {
        closer(best, t, Vec3::new(0.0, 0.0, side));
    }
}

/// Minimal rotation taking unit `from` onto unit `to`.
pub fn rotation_between(from: &Vec3, to: &Vec3) -> Mat3 {
    let c = from.dot(to);
    let v = from.cross(to);
    if c < -1.0 + 1e-12 {
        // antiparallel: half turn about any axis orthogonal to `from`
        let axis = if from.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let a = from.cross(&axis).normalize();
        return 2.0 * a * a.transpose() - Mat3::identity();
    }
    let vx = Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    Mat3::identity() + vx + vx * vx / (1.0 + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> Vec<Shape> {
        vec![
            Shape::Sphere { radius: 0.7 },
            Shape::Box {
                half: Vec3::new(0.3, 0.5, 0.2),
            },
            Shape::Cylinder {
                radius: 0.4,
                half_height: 0.6,
            },
            Shape::Revolution {
                profile: vec![(0.3, -0.5), (0.1, -0.1), (0.4, 0.2), (0.45, 0.5)],
            },
        ]
    }

    #[test]
    fn hits_lie_on_the_boundary_and_exit_from_inside() {
        for s in shapes() {
            for k in 0..200 {
                let a = k as f64 * 0.731;
                let d = Vec3::new(a.cos() * 0.8, a.sin() * 0.8, (a * 1.7).sin() * 0.6).normalize();
                let o = -2.5 * d + Vec3::new(0.05 * a.sin(), 0.04, -0.03);
                let Some(h) = s.intersect(&o, &d) else { continue };
                let p = o + h.t * d;
                let eps = 1e-7;
                assert!(s.contains(&(p - eps * h.normal)), "{s:?} inside");
                assert!(!s.contains(&(p + 1e-6 * h.normal)), "{s:?} outside");
                assert!(h.normal.dot(&d) <= 1e-9, "{s:?} faces the ray");
                let inner = p + 1e-5 * d;
                let exit = s.intersect(&inner, &d).expect("solid is closed");
                assert!(exit.normal.dot(&d) >= -1e-9);
            }
        }
    }

    #[test]
    fn support_matches_axis_extents() {
        let c = Shape::Cylinder {
            radius: 0.4,
            half_height: 0.6,
        };
        assert!((c.support(&Vec3::z()) - 0.6).abs() < 1e-12);
        assert!((c.support(&Vec3::x()) - 0.4).abs() < 1e-12);
        let b = Shape::Box {
            half: Vec3::new(0.3, 0.5, 0.2),
        };
        assert!((b.support(&-Vec3::y()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_between_maps_vectors() {
        let pairs = [
            (Vec3::x(), Vec3::z()),
            (Vec3::z(), -Vec3::z()),
            (
                Vec3::new(1.0, 2.0, 3.0).normalize(),
                Vec3::new(-1.0, 0.5, 0.1).normalize(),
            ),
        ];
        for (a, b) in pairs {
            let r = rotation_between(&a, &b);
            assert!((r * a - b).norm() < 1e-12);
            assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
        }
    }
}
