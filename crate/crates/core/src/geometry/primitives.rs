use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type V3 = Vector3<f64>;

/// Surface primitive used to assemble synthetic objects.
///
/// Solids (cylinder, box, torus) expose a signed distance for overlap
/// checks; a disk is a zero-thickness patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Lateral surface around `axis`, plus optional end caps.
    Cylinder {
        center: V3,
        axis: V3,
        radius: f64,
        height: f64,
        bottom_cap: bool,
        top_cap: bool,
    },
    /// Axis-aligned box surface.
    Box {
        center: V3,
        half: V3,
    },
    /// Tube of radius `minor` swept along a circular arc of radius `major`.
    /// The arc lies in the plane spanned by `u` and `normal × u`, from
    /// angle `arc.0` to `arc.1` (radians, measured from `u`).
    Torus {
        center: V3,
        normal: V3,
        u: V3,
        major: f64,
        minor: f64,
        arc: (f64, f64),
    },
    Disk {
        center: V3,
        normal: V3,
        radius: f64,
    },
}

/// Two unit vectors completing `axis` to an orthonormal frame.
fn frame(axis: &V3) -> (V3, V3) {
    let a = axis.normalize();
    let helper = if a.x.abs() < 0.9 { V3::x() } else { V3::y() };
    let u = a.cross(&helper).normalize();
    let v = a.cross(&u);
    (u, v)
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match self {
            Primitive::Cylinder {
                radius,
                height,
                bottom_cap,
                top_cap,
                ..
            } => {
                let caps = (*bottom_cap as u8 + *top_cap as u8) as f64;
                TAU * radius * height + caps * PI * radius * radius
            }
            Primitive::Box { half, .. } => {
                8.0 * (half.x * half.y + half.y * half.z + half.x * half.z)
            }
            Primitive::Torus {
                major, minor, arc, ..
            } => TAU * minor * major * (arc.1 - arc.0),
            Primitive::Disk { radius, .. } => PI * radius * radius,
        }
    }

    /// One point drawn uniformly from the surface.
    pub fn sample(&self, rng: &mut impl Rng) -> V3 {
        match self {
            Primitive::Cylinder {
                center,
                axis,
                radius,
                height,
                bottom_cap,
                top_cap,
            } => {
                let a = axis.normalize();
                let (u, v) = frame(&a);
                let side = TAU * radius * height;
                let cap = PI * radius * radius;
                let caps = (*bottom_cap as u8 + *top_cap as u8) as f64;
                let pick = rng.random::<f64>() * (side + caps * cap);
                if pick < side {
                    let t: f64 = rng.random::<f64>() * TAU;
                    let h = (rng.random::<f64>() - 0.5) * height;
                    center + a * h + (u * t.cos() + v * t.sin()) * *radius
                } else {
                    let top = if *bottom_cap && *top_cap {
                        pick >= side + cap
                    } else {
                        *top_cap
                    };
                    let r = radius * rng.random::<f64>().sqrt();
                    let t: f64 = rng.random::<f64>() * TAU;
                    let h = if top { height / 2.0 } else { -height / 2.0 };
                    center + a * h + (u * t.cos() + v * t.sin()) * r
                }
            }
            Primitive::Box { center, half } => {
                let faces = [half.y * half.z, half.x * half.z, half.x * half.y];
                let total = 2.0 * faces.iter().sum::<f64>();
                let mut pick = rng.random::<f64>() * total;
                let mut face = 0;
                while face < 5 && pick >= faces[face / 2] {
                    pick -= faces[face / 2];
                    face += 1;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = V3::zeros();
                for k in 0..3 {
                    p[k] = if k == axis {
                        sign * half[k]
                    } else {
                        (rng.random::<f64>() * 2.0 - 1.0) * half[k]
                    };
                }
                center + p
            }
            Primitive::Torus {
                center,
                normal,
                u,
                major,
                minor,
                arc,
            } => {
                let n = normal.normalize();
                let u = u.normalize();
                let v = n.cross(&u);
                // Rejection on the tube angle makes the density uniform in area.
                loop {
                    let phi = arc.0 + rng.random::<f64>() * (arc.1 - arc.0);
                    let theta: f64 = rng.random::<f64>() * TAU;
                    let accept = (major + minor * theta.cos()) / (major + minor);
                    if rng.random::<f64>() <= accept {
                        let radial = u * phi.cos() + v * phi.sin();
                        return center
                            + radial * (major + minor * theta.cos())
                            + n * (minor * theta.sin());
                    }
                }
            }
            Primitive::Disk {
                center,
                normal,
                radius,
            } => {
                let (u, v) = frame(normal);
                let r = radius * rng.random::<f64>().sqrt();
                let t: f64 = rng.random::<f64>() * TAU;
                center + (u * t.cos() + v * t.sin()) * r
            }
        }
    }

    /// Signed distance to the solid (negative inside). Disks have no interior.
    pub fn signed_distance(&self, p: &V3) -> f64 {
        match self {
            Primitive::Cylinder {
                center,
                axis,
                radius,
                height,
                ..
            } => {
                let a = axis.normalize();
                let d = p - center;
                let h = d.dot(&a);
                let radial = (d - a * h).norm();
                let dx = radial - radius;
                let dy = h.abs() - height / 2.0;
                dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
            Primitive::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Primitive::Torus {
                center,
                normal,
                u,
                major,
                minor,
                arc,
            } => {
                let n = normal.normalize();
                let u = u.normalize();
                let v = n.cross(&u);
                let d = p - center;
                let h = d.dot(&n);
                let w = d - n * h;
                let mut phi = w.dot(&v).atan2(w.dot(&u));
                while phi < arc.0 {
                    phi += TAU;
                }
                if phi <= arc.1 {
                    ((w.norm() - major).powi(2) + h * h).sqrt() - minor
                } else {
                    let end = |angle: f64| center + (u * angle.cos() + v * angle.sin()) * *major;
                    (p - end(arc.0)).norm().min((p - end(arc.1)).norm()) - minor
                }
            }
            Primitive::Disk {
                center,
                normal,
                radius,
            } => {
                let n = normal.normalize();
                let d = p - center;
                let h = d.dot(&n);
                let radial = (d - n * h).norm();
                (h * h + (radial - radius).max(0.0).powi(2)).sqrt()
            }
        }
    }
}
