//! Stability labeling and an independent quasi-static equilibrium oracle.
//!
//! The dynamic label compares block centers before and after simulation: a
//! scene is unstable when any block moved more than `TAU`. The quasi-static
//! oracle never simulates; it asks whether nonnegative contact forces at the
//! corners of every support patch can balance every block's weight and
//! torque, solving one joint linear feasibility problem per scene. The two
//! must agree on clear-cut scenes, which is the main verification lever for
//! the physics engine.

use crate::geometry::{Rect2, Vec2, Vec3};
use crate::physics::SimTrace;
use crate::scenegen::Scene;
use crate::seeds;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Displacement threshold separating stable from unstable scenes, in short
/// block edges. Far above solver jitter, far below any topple displacement.
pub const TAU: f64 = 0.25;

/// Half-width of the Marginal band around zero equilibrium margin.
pub const MARGIN_EPSILON: f64 = 0.05;

/// Friction coefficient assumed by the quasi-static oracle (matches the
/// dynamic engine's default).
pub const ORACLE_MU: f64 = 0.5;

const GRAVITY: f64 = 9.81;

/// Plane-coincidence tolerance when enumerating support patches.
const PLANE_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StabilityError {
    #[error("trace has no per-step positions; rerun the simulation with recording enabled")]
    MissingTrace,
    #[error("quasi-static oracle requires axis-aligned block poses")]
    UnsupportedGeometry,
    #[error("equilibrium feasibility program failed to converge")]
    Numerical,
}

/// Boolean stability label plus the per-block displacement magnitudes it was
/// computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityLabel {
    pub unstable: bool,
    pub per_block_displacement: Vec<f64>,
    pub tau: f64,
}

/// Label a trace: unstable when any block's center moved strictly more than
/// `tau` between the initial and final state. Diverged traces are unstable
/// by convention, with infinite displacement.
pub fn label_stability(trace: &SimTrace, tau: f64) -> StabilityLabel {
    let per_block_displacement: Vec<f64> = if trace.diverged {
        vec![f64::INFINITY; trace.initial_poses.len()]
    } else {
        trace
            .initial_poses
            .iter()
            .zip(&trace.final_poses)
            .map(|(a, b)| (b.position - a.position).norm())
            .collect()
    };
    let unstable = per_block_displacement.iter().any(|&d| d > tau);
    StabilityLabel {
        unstable,
        per_block_displacement,
        tau,
    }
}

/// The block whose displacement first exceeded a threshold, at sample
/// resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionOnset {
    pub block: usize,
    /// Index into the trace's per-step position samples.
    pub sample_index: usize,
}

/// Find the earliest sample where some block's displacement from its initial
/// position exceeds `threshold`. Within that sample, the block with the
/// largest displacement wins (lowest index on ties).
pub fn motion_onset(
    trace: &SimTrace,
    threshold: f64,
) -> Result<Option<MotionOnset>, StabilityError> {
    let samples = trace
        .per_step_positions
        .as_ref()
        .ok_or(StabilityError::MissingTrace)?;
    let Some(initial) = samples.first() else {
        return Ok(None);
    };
    for (s, frame) in samples.iter().enumerate().skip(1) {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in frame.iter().enumerate() {
            let d = (p - initial[i]).norm();
            if d > threshold && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((block, _)) = best {
            return Ok(Some(MotionOnset {
                block,
                sample_index: s,
            }));
        }
    }
    Ok(None)
}

/// Per-block displacement field plus the motion-onset annotation when the
/// trace carries per-step samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementMap {
    pub magnitudes: Vec<f64>,
    pub onset: Option<MotionOnset>,
}

/// Displacement magnitudes (identical to the labeling definition) with the
/// onset block, detected at threshold `tau / 2`, when per-step samples exist.
pub fn displacement_map(scene: &Scene, trace: &SimTrace, tau: f64) -> DisplacementMap {
    assert_eq!(
        scene.blocks.len(),
        trace.initial_poses.len(),
        "trace does not belong to this scene"
    );
    let magnitudes = label_stability(trace, tau).per_block_displacement;
    let onset = match motion_onset(trace, tau * 0.5) {
        Ok(o) => o,
        Err(StabilityError::MissingTrace) => None,
        Err(_) => None,
    };
    DisplacementMap { magnitudes, onset }
}

/// Quasi-static verdict with the equilibrium margin: the largest uniform
/// inset of every support patch that still admits a balancing force system
/// (negative when the patches must grow instead).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub verdict: Verdict,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Stable,
    Unstable,
    Marginal,
}

/// A support interface: the ground or a lower block carrying an upper block.
/// `lo`/`hi` span the footprint intersection and may be inverted (lo > hi)
/// when the footprints are disjoint at the shared plane; growing the patch
/// (negative inset) can then still materialize it, which is what gives
/// overhanging scenes a meaningful negative margin.
struct Patch {
    lower: Option<usize>,
    upper: usize,
    lo: Vec2,
    hi: Vec2,
    z: f64,
}

impl Patch {
    /// Corner points after insetting each side by `m`, or None when the
    /// inset patch is empty.
    fn corners(&self, m: f64) -> Option<[Vec2; 4]> {
        let lo = Vec2::new(self.lo.x + m, self.lo.y + m);
        let hi = Vec2::new(self.hi.x - m, self.hi.y - m);
        if lo.x > hi.x || lo.y > hi.y {
            return None;
        }
        Some([
            Vec2::new(lo.x, lo.y),
            Vec2::new(hi.x, lo.y),
            Vec2::new(hi.x, hi.y),
            Vec2::new(lo.x, hi.y),
        ])
    }
}

fn footprint_span(scene: &Scene, i: usize) -> (Vec2, Vec2) {
    match scene.blocks[i].footprint() {
        Rect2::Span { min, max } => (min, max),
        Rect2::Empty => unreachable!("block footprints are never empty"),
    }
}

fn collect_patches(scene: &Scene) -> Vec<Patch> {
    let mut patches = Vec::new();
    for (i, b) in scene.blocks.iter().enumerate() {
        if b.bottom_z().abs() < PLANE_TOL {
            let (lo, hi) = footprint_span(scene, i);
            patches.push(Patch {
                lower: None,
                upper: i,
                lo,
                hi,
                z: 0.0,
            });
        }
    }
    for upper in 0..scene.blocks.len() {
        for lower in 0..scene.blocks.len() {
            if upper == lower {
                continue;
            }
            let ub = scene.blocks[upper].bottom_z();
            let lt = scene.blocks[lower].top_z();
            if (ub - lt).abs() < PLANE_TOL {
                let (alo, ahi) = footprint_span(scene, lower);
                let (blo, bhi) = footprint_span(scene, upper);
                patches.push(Patch {
                    lower: Some(lower),
                    upper,
                    lo: alo.sup(&blo),
                    hi: ahi.inf(&bhi),
                    z: 0.5 * (ub + lt),
                });
            }
        }
    }
    patches
}

/// Check whether every block can be held in equilibrium by nonnegative
/// corner forces on the patches inset by `m`, with box-pyramid friction.
fn equilibrium_feasible(scene: &Scene, patches: &[Patch], m: f64) -> Result<bool, StabilityError> {
    // Materialized corners for this inset.
    let mut corners: Vec<(usize, [Vec2; 4])> = Vec::new();
    for (pi, p) in patches.iter().enumerate() {
        if let Some(c) = p.corners(m) {
            corners.push((pi, c));
        }
    }
    let n_blocks = scene.blocks.len();
    let n_corners = 4 * corners.len();
    // Per corner: n, fx+, fx-, fy+, fy-, sx, sy  (all >= 0).
    let n_vars = 7 * n_corners;
    let n_rows = 6 * n_blocks + 2 * n_corners;
    let mut a = vec![vec![0.0; n_vars]; n_rows];
    let mut b = vec![0.0; n_rows];

    // Rows 0..6N: per block, force balance (x,y,z) then torque (x,y,z).
    let row_f = |blk: usize, axis: usize| 6 * blk + axis;
    let row_t = |blk: usize, axis: usize| 6 * blk + 3 + axis;
    for (i, blk) in scene.blocks.iter().enumerate() {
        b[row_f(i, 2)] = blk.shape.volume() * GRAVITY;
        let _ = i;
    }

    let mu = ORACLE_MU;
    let mut corner_id = 0usize;
    for (pi, quad) in &corners {
        let patch = &patches[*pi];
        for corner in quad {
            let base = 7 * corner_id;
            let v_n = base;
            let v_fxp = base + 1;
            let v_fxm = base + 2;
            let v_fyp = base + 3;
            let v_fym = base + 4;
            let v_sx = base + 5;
            let v_sy = base + 6;

            // Friction pyramid rows: fx+ + fx- + sx - mu n = 0 (same for y).
            let rx = 6 * n_blocks + 2 * corner_id;
            a[rx][v_fxp] = 1.0;
            a[rx][v_fxm] = 1.0;
            a[rx][v_sx] = 1.0;
            a[rx][v_n] = -mu;
            let ry = rx + 1;
            a[ry][v_fyp] = 1.0;
            a[ry][v_fym] = 1.0;
            a[ry][v_sy] = 1.0;
            a[ry][v_n] = -mu;

            // The force (fx, fy, n) acts on the upper block at the corner;
            // the lower block sees the reaction.
            let point = Vec3::new(corner.x, corner.y, patch.z);
            for (body, sign) in [(Some(patch.upper), 1.0), (patch.lower, -1.0)] {
                let Some(bi) = body else { continue };
                let com = scene.blocks[bi].pose.position;
                let r = point - com;
                a[row_f(bi, 0)][v_fxp] += sign;
                a[row_f(bi, 0)][v_fxm] -= sign;
                a[row_f(bi, 1)][v_fyp] += sign;
                a[row_f(bi, 1)][v_fym] -= sign;
                a[row_f(bi, 2)][v_n] += sign;
                // tau = r x F with F = (fx, fy, n).
                a[row_t(bi, 0)][v_n] += sign * r.y;
                a[row_t(bi, 0)][v_fyp] -= sign * r.z;
                a[row_t(bi, 0)][v_fym] += sign * r.z;
                a[row_t(bi, 1)][v_n] -= sign * r.x;
                a[row_t(bi, 1)][v_fxp] += sign * r.z;
                a[row_t(bi, 1)][v_fxm] -= sign * r.z;
                a[row_t(bi, 2)][v_fyp] += sign * r.x;
                a[row_t(bi, 2)][v_fym] -= sign * r.x;
                a[row_t(bi, 2)][v_fxp] -= sign * r.y;
                a[row_t(bi, 2)][v_fxm] += sign * r.y;
            }
            corner_id += 1;
        }
    }

    lp_feasible(&mut a, &mut b)
}

/// Phase-1 simplex feasibility for {x >= 0 : A x = b}, destructive on its
/// inputs. Bland's rule prevents cycling; rows are scaled to unit max.
fn lp_feasible(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<bool, StabilityError> {
    let m = b.len();
    if m == 0 {
        return Ok(true);
    }
    let n = a[0].len();
    for i in 0..m {
        let scale = a[i].iter().map(|v| v.abs()).fold(b[i].abs(), f64::max);
        if scale > 0.0 {
            for v in a[i].iter_mut() {
                *v /= scale;
            }
            b[i] /= scale;
        }
        // Deterministic generic perturbation: breaks the degenerate ties that
        // make the simplex cycle on forked towers, while moving the
        // feasibility boundary by far less than the margin search resolves.
        let u = (seeds::child(0x1bfe, &[i as u64]) >> 11) as f64 / (1u64 << 53) as f64;
        b[i] += 1e-9 * (0.5 + u);
    }

    // Tableau with one artificial per row; artificials form the basis.
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m];
    for i in 0..m {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = s * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][n + m] = s * b[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    // Reduced-cost row for minimizing the artificial sum.
    let mut obj = vec![0.0; width];
    for j in 0..width {
        let col_sum: f64 = (0..m).map(|i| t[i][j]).sum();
        let c = if (n..n + m).contains(&j) { 1.0 } else { 0.0 };
        obj[j] = c - col_sum;
    }
    obj[n + m] = -(0..m).map(|i| t[i][n + m]).sum::<f64>();

    // Exact reduced costs from the current tableau; artifacts cost 1.
    let refresh_obj = |t: &[Vec<f64>], basis: &[usize], obj: &mut [f64]| {
        for (j, o) in obj.iter_mut().enumerate().take(width) {
            let col_sum: f64 = basis
                .iter()
                .enumerate()
                .filter(|(_, &bv)| bv >= n)
                .map(|(i, _)| t[i][j])
                .sum();
            let c = if (n..n + m).contains(&j) { 1.0 } else { 0.0 };
            *o = c - col_sum;
        }
    };

    const EPS: f64 = 1e-7;
    // Min-ratio row for an entering column; ratio ties go to the smallest
    // basis variable (Bland). None when no entry is a usable pivot.
    let ratio_row = |t: &[Vec<f64>], basis: &[usize], col: usize| -> Option<usize> {
        let mut row: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][col] > 1e-8 {
                let ratio = t[i][n + m] / t[i][col];
                let better = match row {
                    None => true,
                    Some(r) => {
                        ratio < best - 1e-12
                            || ((ratio - best).abs() <= 1e-12 && basis[i] < basis[r])
                    }
                };
                if better {
                    row = Some(i);
                    best = ratio;
                }
            }
        }
        row
    };

    let max_iter = 200 * (m + n) + 1000;
    let mut refreshed_while_stuck = false;
    let mut done = false;
    for _ in 0..max_iter {
        // Bland's rule over columns that actually admit a pivot: the
        // smallest-index descent column. Columns with negative reduced cost
        // but no usable entry are floating-point noise (phase 1 is bounded),
        // so they are skipped rather than declared unbounded.
        let mut chosen: Option<(usize, usize)> = None;
        for j in 0..n + m {
            if obj[j] < -EPS {
                if let Some(r) = ratio_row(&t, &basis, j) {
                    chosen = Some((j, r));
                    break;
                }
            }
        }
        let Some((col, r)) = chosen else {
            if !refreshed_while_stuck {
                // Rule out reduced-cost drift before accepting the optimum.
                refresh_obj(&t, &basis, &mut obj);
                refreshed_while_stuck = true;
                continue;
            }
            done = true;
            break;
        };
        refreshed_while_stuck = false;
        // Pivot on (r, col).
        let piv = t[r][col];
        for v in t[r].iter_mut() {
            *v /= piv;
        }
        for i in 0..m {
            if i != r {
                let f = t[i][col];
                if f != 0.0 {
                    for j in 0..width {
                        t[i][j] -= f * t[r][j];
                    }
                }
            }
        }
        let f = obj[col];
        if f != 0.0 {
            for j in 0..width {
                obj[j] -= f * t[r][j];
            }
        }
        basis[r] = col;
    }
    if !done {
        return Err(StabilityError::Numerical);
    }
    let infeasibility: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &bv)| bv >= n)
        .map(|(i, _)| t[i][n + m])
        .sum();
    Ok(infeasibility <= 1e-6)
}

/// Margin search bound: verdicts beyond this are clamped.
const MARGIN_LIMIT: f64 = 8.0;

/// Quasi-static equilibrium check. Stable when balancing forces exist with
/// every support patch shrunk by at least `MARGIN_EPSILON`; Unstable when
/// even growing the patches by that much does not help; Marginal between.
pub fn quasi_static_check(scene: &Scene) -> Result<Equilibrium, StabilityError> {
    for b in &scene.blocks {
        if !b.pose.is_axis_aligned(1e-7) {
            return Err(StabilityError::UnsupportedGeometry);
        }
    }
    let patches = collect_patches(scene);
    let feasible_at = |m: f64| equilibrium_feasible(scene, &patches, m);

    // Bisect the sign change of feasibility; it is monotone in the inset.
    let (mut lo, mut hi);
    if feasible_at(0.0)? {
        lo = 0.0;
        hi = MARGIN_LIMIT;
    } else {
        lo = -MARGIN_LIMIT;
        hi = 0.0;
        if !feasible_at(lo)? {
            return Ok(Equilibrium {
                verdict: Verdict::Unstable,
                margin: -MARGIN_LIMIT,
            });
        }
    }
    for _ in 0..32 {
        let mid = 0.5 * (lo + hi);
        if feasible_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    let margin = 0.5 * (lo + hi);
    let verdict = if margin >= MARGIN_EPSILON {
        Verdict::Stable
    } else if margin <= -MARGIN_EPSILON {
        Verdict::Unstable
    } else {
        Verdict::Marginal
    };
    Ok(Equilibrium { verdict, margin })
}
