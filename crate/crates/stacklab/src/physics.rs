//! Deterministic fixed-step rigid-body simulation of cuboid towers.
//!
//! The engine is the labeling oracle for the whole pipeline, so it favors
//! reproducibility over speed: a single simulation is strictly sequential,
//! contacts are generated and solved in a fixed order, and warm-start state
//! is keyed by deterministic feature ids. Velocities integrate with
//! semi-implicit Euler; contacts are resolved by projected Gauss-Seidel over
//! accumulated impulses with a Coulomb friction clamp and Baumgarte
//! positional correction. Angular velocity is reprojected through the
//! inertia tensor after each rotation update so free bodies conserve
//! angular momentum exactly.

use crate::geometry::{cuboid_corners, world_aabb, Cuboid, Pose, Vec3};
use crate::scenegen::Scene;
use crate::seeds;
use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

/// One simulated block.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidBody {
    pub shape: Cuboid,
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub mass: f64,
    pub inv_mass: f64,
    pub inertia_body: Matrix3<f64>,
    pub inv_inertia_body: Matrix3<f64>,
}

impl RigidBody {
    /// Body at rest with uniform density 1, so mass equals volume.
    pub fn new(shape: Cuboid, pose: Pose) -> Self {
        let m = shape.volume();
        let h = shape.half_extents;
        let diag = Vec3::new(
            m / 3.0 * (h.y * h.y + h.z * h.z),
            m / 3.0 * (h.x * h.x + h.z * h.z),
            m / 3.0 * (h.x * h.x + h.y * h.y),
        );
        Self {
            shape,
            pose,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            mass: m,
            inv_mass: 1.0 / m,
            inertia_body: Matrix3::from_diagonal(&diag),
            inv_inertia_body: Matrix3::from_diagonal(&diag.map(|v| 1.0 / v)),
        }
    }

    pub fn world_inertia(&self) -> Matrix3<f64> {
        let r = self.pose.rotation_matrix();
        r * self.inertia_body * r.transpose()
    }

    pub fn world_inv_inertia(&self) -> Matrix3<f64> {
        let r = self.pose.rotation_matrix();
        r * self.inv_inertia_body * r.transpose()
    }
}

/// Contact participant: the static ground plane or a block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BodyRef {
    Ground,
    Body(usize),
}

impl BodyRef {
    fn index(&self) -> Option<usize> {
        match self {
            BodyRef::Ground => None,
            BodyRef::Body(i) => Some(*i),
        }
    }
}

/// One contact point inside a manifold. `feature` identifies the geometric
/// origin of the point (corner id, clip intersection, edge pair) and keys
/// warm-start impulse transfer across steps.
#[derive(Clone, Copy, Debug)]
pub struct ManifoldPoint {
    pub point: Vec3,
    pub penetration: f64,
    pub feature: u64,
    pub normal_impulse: f64,
    pub tangent_impulse: [f64; 2],
}

impl ManifoldPoint {
    fn new(point: Vec3, penetration: f64, feature: u64) -> Self {
        Self {
            point,
            penetration,
            feature,
            normal_impulse: 0.0,
            tangent_impulse: [0.0; 2],
        }
    }
}

/// Contact manifold between one pair; the normal points from `a` toward `b`.
#[derive(Clone, Debug)]
pub struct Manifold {
    pub a: BodyRef,
    pub b: BodyRef,
    pub normal: Vec3,
    pub points: Vec<ManifoldPoint>,
}

/// Simulation parameters. Defaults are the declared pipeline constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub gravity: Vec3,
    pub friction_mu: f64,
    pub solver_iterations: u32,
    pub restitution: f64,
    /// Baumgarte positional-correction factor.
    pub baumgarte: f64,
    /// Penetration depth tolerated without positional correction.
    pub slop: f64,
    /// Separation below which a contact is generated.
    pub contact_margin: f64,
    /// When set, record block positions every this many steps.
    pub record_every: Option<u32>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 2.0,
            gravity: Vec3::new(0.0, 0.0, -9.81),
            friction_mu: 0.5,
            solver_iterations: 10,
            restitution: 0.0,
            baumgarte: 0.2,
            slop: 1e-3,
            contact_margin: 1e-4,
            record_every: None,
        }
    }
}

impl SimConfig {
    pub fn num_steps(&self) -> u32 {
        (self.duration / self.dt).round() as u32
    }
}

/// Mutable simulation state: bodies plus last-step manifolds for warm starts.
#[derive(Clone, Debug)]
pub struct World {
    pub bodies: Vec<RigidBody>,
    pub manifolds: Vec<Manifold>,
}

impl World {
    pub fn new(bodies: Vec<RigidBody>) -> Self {
        Self {
            bodies,
            manifolds: Vec::new(),
        }
    }

    pub fn from_scene(scene: &Scene) -> Self {
        Self::new(
            scene
                .blocks
                .iter()
                .map(|b| RigidBody::new(b.shape, b.pose))
                .collect(),
        )
    }
}

/// Position threshold beyond which a simulation counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// Outcome of a full simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub initial_poses: Vec<Pose>,
    pub final_poses: Vec<Pose>,
    /// Block positions sampled every `record_every` steps, starting with the
    /// initial state, when recording was requested.
    pub per_step_positions: Option<Vec<Vec<Vec3>>>,
    pub diverged: bool,
}

// Corner indices (geometry::local_corners bit order) of each box face, in
// cyclic winding. Face id = axis * 2 + (0 for +, 1 for -).
const FACES: [[usize; 4]; 6] = [
    [1, 3, 7, 5], // +x
    [0, 4, 6, 2], // -x
    [2, 6, 7, 3], // +y
    [0, 1, 5, 4], // -y
    [4, 5, 7, 6], // +z
    [0, 2, 3, 1], // -z
];

fn column(m: &Matrix3<f64>, k: usize) -> Vec3 {
    Vec3::new(m[(0, k)], m[(1, k)], m[(2, k)])
}

/// Detect all contact manifolds: each body against the ground plane z = 0,
/// then every body pair via separating-axis tests. Output order is fixed
/// (ground manifolds by body index, then pairs in lexicographic order).
pub fn detect_contacts(bodies: &[RigidBody], margin: f64) -> Vec<Manifold> {
    let mut out = Vec::new();
    for (i, body) in bodies.iter().enumerate() {
        let corners = cuboid_corners(&body.shape, &body.pose);
        let mut pts: Vec<ManifoldPoint> = corners
            .iter()
            .enumerate()
            .filter(|(_, c)| c.z < margin)
            .map(|(k, c)| ManifoldPoint::new(*c, -c.z, k as u64))
            .collect();
        if !pts.is_empty() {
            if pts.len() > 4 {
                pts.sort_by(|x, y| {
                    y.penetration
                        .partial_cmp(&x.penetration)
                        .unwrap()
                        .then(x.feature.cmp(&y.feature))
                });
                pts.truncate(4);
            }
            pts.sort_by_key(|p| p.feature);
            out.push(Manifold {
                a: BodyRef::Ground,
                b: BodyRef::Body(i),
                normal: Vec3::new(0.0, 0.0, 1.0),
                points: pts,
            });
        }
    }
    for i in 0..bodies.len() {
        let aabb_i = world_aabb(&bodies[i].shape, &bodies[i].pose);
        for j in (i + 1)..bodies.len() {
            let aabb_j = world_aabb(&bodies[j].shape, &bodies[j].pose);
            if !aabb_i.overlaps(&aabb_j, -2.0 * margin) {
                continue;
            }
            if let Some((normal, points)) = box_box_manifold(&bodies[i], &bodies[j], margin) {
                out.push(Manifold {
                    a: BodyRef::Body(i),
                    b: BodyRef::Body(j),
                    normal,
                    points,
                });
            }
        }
    }
    out
}

/// Projected radius of a box onto a world-frame unit axis.
fn proj_radius(half: &Vec3, cols: &[Vec3; 3], axis: &Vec3) -> f64 {
    (0..3).map(|k| half[k] * cols[k].dot(axis).abs()).sum()
}

fn box_box_manifold(
    a: &RigidBody,
    b: &RigidBody,
    margin: f64,
) -> Option<(Vec3, Vec<ManifoldPoint>)> {
    let ra = a.pose.rotation_matrix();
    let rb = b.pose.rotation_matrix();
    let ac: [Vec3; 3] = std::array::from_fn(|k| column(&ra, k));
    let bc: [Vec3; 3] = std::array::from_fn(|k| column(&rb, k));
    let ha = a.shape.half_extents;
    let hb = b.shape.half_extents;
    let d = b.pose.position - a.pose.position;

    // Face axes of both boxes: 0..3 from a, 3..6 from b.
    let mut best_face = (f64::MAX, 0usize);
    for idx in 0..6 {
        let axis = if idx < 3 { ac[idx] } else { bc[idx - 3] };
        let overlap =
            proj_radius(&ha, &ac, &axis) + proj_radius(&hb, &bc, &axis) - d.dot(&axis).abs();
        if overlap < -margin {
            return None;
        }
        if overlap < best_face.0 {
            best_face = (overlap, idx);
        }
    }

    // Edge-edge cross axes.
    let mut best_edge: Option<(f64, usize, usize, Vec3)> = None;
    for (ka, ea) in ac.iter().enumerate() {
        for (kb, eb) in bc.iter().enumerate() {
            let c = ea.cross(eb);
            let n2 = c.norm_squared();
            if n2 < 1e-10 {
                continue;
            }
            let axis = c / n2.sqrt();
            let overlap =
                proj_radius(&ha, &ac, &axis) + proj_radius(&hb, &bc, &axis) - d.dot(&axis).abs();
            if overlap < -margin {
                return None;
            }
            if best_edge.is_none() || overlap < best_edge.unwrap().0 {
                best_edge = Some((overlap, ka, kb, axis));
            }
        }
    }

    // Prefer face manifolds; an edge axis must win by a clear relative margin,
    // otherwise stacked boxes would flicker between manifold kinds.
    let (face_overlap, face_idx) = best_face;
    if let Some((eo, ka, kb, eaxis)) = best_edge {
        if eo < 0.95 * face_overlap - 1e-6 {
            let n_sep = if eaxis.dot(&d) >= 0.0 { eaxis } else { -eaxis };
            let (ea, ida) = support_edge(a, &ac, ka, &n_sep);
            let (eb, idb) = support_edge(b, &bc, kb, &(-n_sep));
            let (pa, pb) = closest_segment_points(ea[0], ea[1], eb[0], eb[1]);
            let point = (pa + pb) * 0.5;
            let feature = (1u64 << 32) | (ida << 8) | idb;
            return Some((n_sep, vec![ManifoldPoint::new(point, eo, feature)]));
        }
    }

    let face_axis_world = if face_idx < 3 {
        ac[face_idx]
    } else {
        bc[face_idx - 3]
    };
    let n_sep = if face_axis_world.dot(&d) >= 0.0 {
        face_axis_world
    } else {
        -face_axis_world
    };
    let (points, _) = if face_idx < 3 {
        (face_clip(a, &ac, b, &bc, &n_sep, face_idx, margin), false)
    } else {
        (
            face_clip(b, &bc, a, &ac, &(-n_sep), face_idx - 3, margin),
            true,
        )
    };
    if points.is_empty() {
        None
    } else {
        Some((n_sep, points))
    }
}

/// Clip the incident box face onto the reference face and keep points at or
/// below the reference plane. `n_ref` is the outward normal of the reference
/// face (it points toward the incident box).
fn face_clip(
    rbox: &RigidBody,
    rcols: &[Vec3; 3],
    ibox: &RigidBody,
    icols: &[Vec3; 3],
    n_ref: &Vec3,
    axis: usize,
    margin: f64,
) -> Vec<ManifoldPoint> {
    // Incident face: outward normal most anti-parallel to the reference normal.
    let mut k_star = 0;
    let mut d_star = 0.0f64;
    for (k, col) in icols.iter().enumerate() {
        let dk = col.dot(n_ref);
        if dk.abs() > d_star.abs() {
            d_star = dk;
            k_star = k;
        }
    }
    let inc_face = k_star * 2 + if d_star < 0.0 { 0 } else { 1 };
    let corners = cuboid_corners(&ibox.shape, &ibox.pose);
    let mut poly: Vec<(Vec3, u64)> = FACES[inc_face]
        .iter()
        .map(|&ci| (corners[ci], 0x100 + ci as u64))
        .collect();

    // Clip against the four side planes of the reference face.
    let cr = rbox.pose.position;
    let hr = rbox.shape.half_extents;
    let mut plane_id = 0u64;
    for u in 0..3 {
        if u == axis {
            continue;
        }
        for sgn in [1.0, -1.0] {
            let pn = rcols[u] * sgn;
            let off = pn.dot(&cr) + hr[u];
            poly = clip_polygon(poly, &pn, off, plane_id);
            plane_id += 1;
            if poly.is_empty() {
                return Vec::new();
            }
        }
    }

    let face_level = n_ref.dot(&cr) + hr[axis];
    let mut pts: Vec<ManifoldPoint> = poly
        .into_iter()
        .filter_map(|(p, tag)| {
            let pen = face_level - n_ref.dot(&p);
            (pen >= -margin).then(|| ManifoldPoint::new(p, pen, tag))
        })
        .collect();
    if pts.len() > 4 {
        pts.sort_by(|x, y| {
            y.penetration
                .partial_cmp(&x.penetration)
                .unwrap()
                .then(x.feature.cmp(&y.feature))
        });
        pts.truncate(4);
    }
    pts.sort_by_key(|p| p.feature);
    pts
}

/// Sutherland-Hodgman clip of a tagged polygon against n·x <= off.
/// Intersection points get a tag mixed from the edge endpoints and plane id,
/// which is stable across steps for warm starting.
fn clip_polygon(poly: Vec<(Vec3, u64)>, n: &Vec3, off: f64, plane: u64) -> Vec<(Vec3, u64)> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (p, tp) = poly[i];
        let (q, tq) = poly[(i + 1) % poly.len()];
        let dp = n.dot(&p) - off;
        let dq = n.dot(&q) - off;
        let in_p = dp <= 0.0;
        let in_q = dq <= 0.0;
        if in_p {
            out.push((p, tp));
        }
        if in_p != in_q {
            let t = dp / (dp - dq);
            let x = p + (q - p) * t;
            out.push((x, seeds::child(0x51ab, &[tp.min(tq), tp.max(tq), plane])));
        }
    }
    out
}

/// The box edge parallel to local axis `k` whose midpoint is most extreme in
/// direction `dir`; returns world endpoints and a deterministic edge id.
fn support_edge(body: &RigidBody, cols: &[Vec3; 3], k: usize, dir: &Vec3) -> ([Vec3; 2], u64) {
    let mut bits = 0usize;
    let mut id = 0u64;
    for (slot, u) in (0..3).filter(|&u| u != k).enumerate() {
        if cols[u].dot(dir) >= 0.0 {
            bits |= 1 << u;
            id |= 1 << slot;
        }
    }
    let corners = cuboid_corners(&body.shape, &body.pose);
    (
        [corners[bits], corners[bits | (1 << k)]],
        ((k as u64) << 2) | id,
    )
}

/// Closest points between segments [p1,q1] and [p2,q2].
fn closest_segment_points(p1: Vec3, q1: Vec3, p2: Vec3, q2: Vec3) -> (Vec3, Vec3) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (mut s, mut t);
    if a <= 1e-12 && e <= 1e-12 {
        return (p1, p2);
    }
    if a <= 1e-12 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-12 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            s = if denom > 1e-12 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
        }
    }
    (p1 + d1 * s, p2 + d2 * t)
}

/// Copy accumulated impulses from the previous step's manifolds into matching
/// points of the new ones (same pair, same feature id).
pub fn transfer_warm_start(new: &mut [Manifold], prev: &[Manifold]) {
    for m in new.iter_mut() {
        if let Some(old) = prev.iter().find(|o| o.a == m.a && o.b == m.b) {
            for p in m.points.iter_mut() {
                if let Some(q) = old.points.iter().find(|q| q.feature == p.feature) {
                    p.normal_impulse = q.normal_impulse;
                    p.tangent_impulse = q.tangent_impulse;
                }
            }
        }
    }
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let t1 = if n.x.abs() > 0.577 {
        Vec3::new(n.y, -n.x, 0.0)
    } else {
        Vec3::new(0.0, n.z, -n.y)
    }
    .normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

struct SolveBody {
    inv_mass: f64,
    inv_inertia: Matrix3<f64>,
    position: Vec3,
    v: Vec3,
    w: Vec3,
}

const GROUND_SOLVE: SolveBody = SolveBody {
    inv_mass: 0.0,
    inv_inertia: Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    position: Vec3::new(0.0, 0.0, 0.0),
    v: Vec3::new(0.0, 0.0, 0.0),
    w: Vec3::new(0.0, 0.0, 0.0),
};

struct PointPre {
    ra: Vec3,
    rb: Vec3,
    inv_kn: f64,
    inv_kt: [f64; 2],
}

struct ManifoldPre {
    t: [Vec3; 2],
    points: Vec<PointPre>,
}

fn rel_velocity(sb: &[SolveBody], ia: Option<usize>, ib: Option<usize>, pre: &PointPre) -> Vec3 {
    let va = match ia {
        Some(k) => sb[k].v + sb[k].w.cross(&pre.ra),
        None => Vec3::zeros(),
    };
    let vb = match ib {
        Some(k) => sb[k].v + sb[k].w.cross(&pre.rb),
        None => Vec3::zeros(),
    };
    vb - va
}

fn apply_impulse(
    sb: &mut [SolveBody],
    ia: Option<usize>,
    ib: Option<usize>,
    pre: &PointPre,
    impulse: &Vec3,
) {
    if let Some(k) = ia {
        sb[k].v -= impulse * sb[k].inv_mass;
        let dw = sb[k].inv_inertia * pre.ra.cross(impulse);
        sb[k].w -= dw;
    }
    if let Some(k) = ib {
        sb[k].v += impulse * sb[k].inv_mass;
        let dw = sb[k].inv_inertia * pre.rb.cross(impulse);
        sb[k].w += dw;
    }
}

fn effective_mass(sa: &SolveBody, sb_: &SolveBody, pre: &PointPre, dir: &Vec3) -> f64 {
    let term_a = (sa.inv_inertia * pre.ra.cross(dir)).cross(&pre.ra).dot(dir);
    let term_b = (sb_.inv_inertia * pre.rb.cross(dir))
        .cross(&pre.rb)
        .dot(dir);
    sa.inv_mass + sb_.inv_mass + term_a + term_b
}

/// Resolve all manifolds by sequential impulses, mutating body velocities and
/// the accumulated impulses stored on the manifold points. Pre-seeded
/// impulses (from warm starting) are applied before the iterations.
pub fn solve_contacts(bodies: &mut [RigidBody], manifolds: &mut [Manifold], cfg: &SimConfig) {
    if manifolds.is_empty() {
        return;
    }
    let mut sb: Vec<SolveBody> = bodies
        .iter()
        .map(|b| SolveBody {
            inv_mass: b.inv_mass,
            inv_inertia: b.world_inv_inertia(),
            position: b.pose.position,
            v: b.linear_velocity,
            w: b.angular_velocity,
        })
        .collect();

    let pre: Vec<ManifoldPre> = manifolds
        .iter()
        .map(|m| {
            let (t1, t2) = tangent_basis(&m.normal);
            let ia = m.a.index();
            let ib = m.b.index();
            let points = m
                .points
                .iter()
                .map(|p| {
                    let ra = match ia {
                        Some(k) => p.point - sb[k].position,
                        None => Vec3::zeros(),
                    };
                    let rb = match ib {
                        Some(k) => p.point - sb[k].position,
                        None => Vec3::zeros(),
                    };
                    let mut pp = PointPre {
                        ra,
                        rb,
                        inv_kn: 0.0,
                        inv_kt: [0.0; 2],
                    };
                    let sa = ia.map_or(&GROUND_SOLVE, |k| &sb[k]);
                    let sb_ = ib.map_or(&GROUND_SOLVE, |k| &sb[k]);
                    pp.inv_kn = 1.0 / effective_mass(sa, sb_, &pp, &m.normal);
                    pp.inv_kt = [
                        1.0 / effective_mass(sa, sb_, &pp, &t1),
                        1.0 / effective_mass(sa, sb_, &pp, &t2),
                    ];
                    pp
                })
                .collect();
            ManifoldPre {
                t: [t1, t2],
                points,
            }
        })
        .collect();

    // Apply warm-start impulses.
    for (m, mp) in manifolds.iter().zip(&pre) {
        let (ia, ib) = (m.a.index(), m.b.index());
        for (p, pp) in m.points.iter().zip(&mp.points) {
            let imp = m.normal * p.normal_impulse
                + mp.t[0] * p.tangent_impulse[0]
                + mp.t[1] * p.tangent_impulse[1];
            apply_impulse(&mut sb, ia, ib, pp, &imp);
        }
    }

    for _ in 0..cfg.solver_iterations {
        for (m, mp) in manifolds.iter_mut().zip(&pre) {
            let (ia, ib) = (m.a.index(), m.b.index());
            for (p, pp) in m.points.iter_mut().zip(&mp.points) {
                // Normal impulse with Baumgarte bias, accumulated and clamped
                // to stay nonnegative.
                let vn = rel_velocity(&sb, ia, ib, pp).dot(&m.normal);
                let bias = cfg.baumgarte / cfg.dt * (p.penetration - cfg.slop).max(0.0);
                let target = (p.normal_impulse + (bias - vn) * pp.inv_kn).max(0.0);
                let dl = target - p.normal_impulse;
                p.normal_impulse = target;
                apply_impulse(&mut sb, ia, ib, pp, &(m.normal * dl));

                // Friction, clamped per tangent to the Coulomb bound.
                let max_f = cfg.friction_mu * p.normal_impulse;
                for k in 0..2 {
                    let vt = rel_velocity(&sb, ia, ib, pp).dot(&mp.t[k]);
                    let target = (p.tangent_impulse[k] - vt * pp.inv_kt[k]).clamp(-max_f, max_f);
                    let dl = target - p.tangent_impulse[k];
                    p.tangent_impulse[k] = target;
                    apply_impulse(&mut sb, ia, ib, pp, &(mp.t[k] * dl));
                }
            }
        }
    }

    for (b, s) in bodies.iter_mut().zip(&sb) {
        b.linear_velocity = s.v;
        b.angular_velocity = s.w;
    }
}

/// One fixed step: integrate gravity into velocities, detect and solve
/// contacts (warm-started from the previous step), then integrate poses.
/// Angular velocity is reprojected through the world inertia tensor after
/// the rotation update, which conserves angular momentum for free bodies.
pub fn step(world: &mut World, cfg: &SimConfig) {
    for b in &mut world.bodies {
        b.linear_velocity += cfg.gravity * cfg.dt;
    }
    let mut manifolds = detect_contacts(&world.bodies, cfg.contact_margin);
    transfer_warm_start(&mut manifolds, &world.manifolds);
    solve_contacts(&mut world.bodies, &mut manifolds, cfg);
    for b in &mut world.bodies {
        let momentum = b.world_inertia() * b.angular_velocity;
        b.pose.position += b.linear_velocity * cfg.dt;
        let q = b.pose.orientation.into_inner();
        let dq = Quaternion::from_parts(0.0, b.angular_velocity * (0.5 * cfg.dt)) * q;
        b.pose.orientation = UnitQuaternion::new_normalize(q + dq);
        b.angular_velocity = b.world_inv_inertia() * momentum;
    }
    world.manifolds = manifolds;
}

fn state_diverged(world: &World) -> bool {
    world.bodies.iter().any(|b| {
        let p = b.pose.position;
        !p.iter().all(|v| v.is_finite())
            || p.norm() > DIVERGENCE_LIMIT
            || !b.pose.orientation.coords.iter().all(|v| v.is_finite())
    })
}

/// Run the full fixed-step simulation of a scene. Divergence (a position
/// beyond 10^3 units or a non-finite value) truncates the run and is flagged
/// on the trace rather than raised, so batch builds are total.
pub fn simulate(scene: &Scene, cfg: &SimConfig) -> SimTrace {
    let mut world = World::from_scene(scene);
    let initial_poses: Vec<Pose> = world.bodies.iter().map(|b| b.pose).collect();
    let mut samples = cfg.record_every.map(|_| {
        vec![world
            .bodies
            .iter()
            .map(|b| b.pose.position)
            .collect::<Vec<_>>()]
    });
    let mut diverged = false;
    for s in 0..cfg.num_steps() {
        step(&mut world, cfg);
        if state_diverged(&world) {
            diverged = true;
            break;
        }
        if let (Some(every), Some(samples)) = (cfg.record_every, samples.as_mut()) {
            if (s + 1) % every == 0 {
                samples.push(world.bodies.iter().map(|b| b.pose.position).collect());
            }
        }
    }
    SimTrace {
        initial_poses,
        final_poses: world.bodies.iter().map(|b| b.pose).collect(),
        per_step_positions: samples,
        diverged,
    }
}
