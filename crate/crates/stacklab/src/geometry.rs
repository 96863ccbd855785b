//! Minimal 3D math for cuboid towers.
//!
//! World frame is right-handed with z up; the ground plane is z = 0 and the
//! image plane is x-z. One world unit is the canonical block's short edge,
//! so the canonical 1x1x3 block has half-extents (0.5, 0.5, 1.5).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Rigid placement: a translation plus a unit-quaternion rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quat) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: Quat::identity(),
        }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self {
            position,
            orientation: Quat::identity(),
        }
    }

    /// Map a body-frame point into the world frame.
    pub fn apply(&self, local: &Vec3) -> Vec3 {
        self.orientation * local + self.position
    }

    /// Map a world-frame point back into the body frame.
    pub fn apply_inverse(&self, world: &Vec3) -> Vec3 {
        self.orientation.inverse() * (world - self.position)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    /// Renormalize the quaternion; call after any incremental update.
    pub fn renormalize(&mut self) {
        self.orientation = UnitQuaternion::new_normalize(self.orientation.into_inner());
    }

    /// True when the rotation maps body axes onto world axes (up to sign).
    pub fn is_axis_aligned(&self, tol: f64) -> bool {
        let r = self.rotation_matrix();
        r.iter()
            .all(|v| v.abs() < tol || (v.abs() - 1.0).abs() < tol)
    }
}

/// Box shape given by strictly positive half-extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub half_extents: Vec3,
}

impl Cuboid {
    pub fn new(half_extents: Vec3) -> Self {
        assert!(
            half_extents.iter().all(|&h| h > 0.0),
            "cuboid half-extents must be strictly positive, got {half_extents:?}"
        );
        Self { half_extents }
    }

    /// The canonical block: full extents 1 x 1 x 3.
    pub fn canonical_block() -> Self {
        Self::new(Vec3::new(0.5, 0.5, 1.5))
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }

    /// Body-frame corners, in a fixed order: bit i of the index selects the
    /// sign of axis i (0 = -, 1 = +), x being bit 0.
    pub fn local_corners(&self) -> [Vec3; 8] {
        let h = self.half_extents;
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
        }
        out
    }
}

/// The eight world-space corners of a posed cuboid.
pub fn cuboid_corners(c: &Cuboid, p: &Pose) -> [Vec3; 8] {
    let mut corners = c.local_corners();
    for v in &mut corners {
        *v = p.apply(v);
    }
    corners
}

/// Axis-aligned box, stored as componentwise min/max.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn overlaps(&self, other: &Aabb, tol: f64) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] - tol && other.min[i] < self.max[i] - tol)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// Tight axis-aligned box over the posed cuboid's corners.
pub fn world_aabb(c: &Cuboid, p: &Pose) -> Aabb {
    let corners = cuboid_corners(c, p);
    let mut min = corners[0];
    let mut max = corners[0];
    for v in &corners[1..] {
        min = min.inf(v);
        max = max.sup(v);
    }
    Aabb { min, max }
}

/// Axis-aligned rectangle in horizontal-plane coordinates, with an explicit
/// empty variant so a disjoint overlap is unambiguous.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rect2 {
    Empty,
    Span { min: Vec2, max: Vec2 },
}

impl Rect2 {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        assert!(min.x <= max.x && min.y <= max.y, "rect min must be <= max");
        Rect2::Span { min, max }
    }

    pub fn from_center(center: Vec2, half: Vec2) -> Self {
        Rect2::Span {
            min: center - half,
            max: center + half,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Rect2::Empty)
    }

    pub fn area(&self) -> f64 {
        match self {
            Rect2::Empty => 0.0,
            Rect2::Span { min, max } => (max.x - min.x) * (max.y - min.y),
        }
    }

    pub fn center(&self) -> Option<Vec2> {
        match self {
            Rect2::Empty => None,
            Rect2::Span { min, max } => Some((min + max) * 0.5),
        }
    }

    pub fn extents(&self) -> Option<Vec2> {
        match self {
            Rect2::Empty => None,
            Rect2::Span { min, max } => Some(max - min),
        }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        match self {
            Rect2::Empty => false,
            Rect2::Span { min, max } => {
                p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y
            }
        }
    }

    /// Shrink (positive `amount`) or grow (negative) by the same amount on
    /// every side. Shrinking past the midlines yields `Empty`.
    pub fn inset(&self, amount: f64) -> Rect2 {
        match self {
            Rect2::Empty => Rect2::Empty,
            Rect2::Span { min, max } => {
                let lo = Vec2::new(min.x + amount, min.y + amount);
                let hi = Vec2::new(max.x - amount, max.y - amount);
                if lo.x > hi.x || lo.y > hi.y {
                    Rect2::Empty
                } else {
                    Rect2::Span { min: lo, max: hi }
                }
            }
        }
    }
}

/// Componentwise max-of-mins / min-of-maxes; `Empty` when disjoint.
pub fn rect_overlap(a: &Rect2, b: &Rect2) -> Rect2 {
    match (a, b) {
        (Rect2::Empty, _) | (_, Rect2::Empty) => Rect2::Empty,
        (
            Rect2::Span {
                min: amin,
                max: amax,
            },
            Rect2::Span {
                min: bmin,
                max: bmax,
            },
        ) => {
            let min = amin.sup(bmin);
            let max = amax.inf(bmax);
            if min.x > max.x || min.y > max.y {
                Rect2::Empty
            } else {
                Rect2::Span { min, max }
            }
        }
    }
}

/// Serde helpers for quaternions stored as (w, x, y, z).
pub mod quat_serde {
    use super::*;

    pub fn pack(q: &Quat) -> [f64; 4] {
        let c = q.as_ref().coords;
        [c.w, c.x, c.y, c.z]
    }

    pub fn unpack(v: [f64; 4]) -> Quat {
        UnitQuaternion::new_normalize(Quaternion::new(v[0], v[1], v[2], v[3]))
    }
}
