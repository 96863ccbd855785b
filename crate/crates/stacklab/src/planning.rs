//! Placement planning: detect the stacking surface in a scene's mask,
//! enumerate the canonical candidate placements of a new block, predict
//! their stability with the trained classifier, and score predictions
//! against simulated ground truth with the manipulation success-rate
//! metric.
//!
//! The placed block is always the canonical 1x1x3 block, either lying along
//! x (Horizontal, 9 slots) or upright (Vertical, 5 slots). Slot centers are
//! spread evenly along the detected surface, inset from both ends by half
//! the block's footprint so no candidate overhangs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Cuboid, Pose, Quat, Vec3};
use crate::imaging::{self, Mask, FRAME_MARGIN, TRAIN_RESOLUTION};
use crate::learning::{self, LearnError, Model, CLASS_STABLE};
use crate::physics::{simulate, SimConfig};
use crate::scenegen::{Block, Scene};
use crate::seeds;
use crate::stability::{label_stability, TAU};

/// Fraction of the mask width a foreground run must reach to count as a
/// stacking surface (suppresses single-pixel rasterization ridges).
pub const MIN_RUN_FRACTION: f64 = 0.10;
/// Number of lying-block slots along the surface.
pub const HORIZONTAL_SLOTS: usize = 9;
/// Number of upright-block slots along the surface.
pub const VERTICAL_SLOTS: usize = 5;
/// Executor actuation noise: uniform horizontal offset bound, world units.
pub const NOISE_DX: f64 = 0.1;
/// Executor actuation noise: uniform yaw bound, degrees.
pub const NOISE_YAW_DEG: f64 = 2.0;
/// Placement attempts per predicted-stable candidate.
pub const DEFAULT_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no foreground run of at least {min_run} pixels found in the mask")]
    NoSurface { min_run: usize },
    #[error(transparent)]
    Learn(#[from] LearnError),
}

/// Orientation of the placed canonical block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Lying along x: half-extents (1.5, 0.5, 0.5).
    Horizontal,
    /// Upright: half-extents (0.5, 0.5, 1.5).
    Vertical,
}

impl Orientation {
    pub fn slots(self) -> usize {
        match self {
            Orientation::Horizontal => HORIZONTAL_SLOTS,
            Orientation::Vertical => VERTICAL_SLOTS,
        }
    }

    /// Half-extent of the placed block along x.
    pub fn half_footprint(self) -> f64 {
        match self {
            Orientation::Horizontal => 1.5,
            Orientation::Vertical => 0.5,
        }
    }

    /// Half-extent of the placed block along z.
    pub fn half_height(self) -> f64 {
        match self {
            Orientation::Horizontal => 0.5,
            Orientation::Vertical => 1.5,
        }
    }

    pub fn shape(self) -> Cuboid {
        Cuboid::new(Vec3::new(self.half_footprint(), 0.5, self.half_height()))
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Vertical => "vertical",
        })
    }
}

/// The detected stacking surface: a horizontal foreground pixel run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Surface {
    /// Image row (0 = top of the image).
    pub row: usize,
    /// First column of the run.
    pub col_start: usize,
    /// Last column of the run (inclusive).
    pub col_end: usize,
}

impl Surface {
    pub fn width(&self) -> usize {
        self.col_end - self.col_start + 1
    }
}

/// Find the topmost image row holding a foreground run of at least 10% of
/// the image width; within that row, the longest run wins (leftmost on
/// ties).
pub fn detect_stacking_surface(mask: &Mask) -> Result<Surface, PlanError> {
    let min_run = (MIN_RUN_FRACTION * mask.width as f64).ceil() as usize;
    for row in 0..mask.height {
        let mut best: Option<Surface> = None;
        let mut col = 0usize;
        while col < mask.width {
            if mask.get(row, col) {
                let start = col;
                while col < mask.width && mask.get(row, col) {
                    col += 1;
                }
                let run = Surface {
                    row,
                    col_start: start,
                    col_end: col - 1,
                };
                if run.width() >= min_run && best.is_none_or(|b| run.width() > b.width()) {
                    best = Some(run);
                }
            } else {
                col += 1;
            }
        }
        if let Some(surface) = best {
            return Ok(surface);
        }
    }
    Err(PlanError::NoSurface { min_run })
}

/// One hypothetical placement: the posed new block plus the composite mask
/// the classifier sees.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub orientation: Orientation,
    pub slot_index: usize,
    pub block: Block,
    pub mask: Mask,
}

/// All candidates of a scene plus the surface geometry they rest on.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub surface: Surface,
    /// World z of the surface plane candidates rest on.
    pub plane_z: f64,
    /// Horizontal slots 0..9 first, then vertical slots 0..5.
    pub candidates: Vec<Candidate>,
    /// Orientations whose slots did not fit on the surface (flagged, never
    /// silently dropped).
    pub too_narrow: Vec<Orientation>,
}

/// Detect the surface on the scene's own training-resolution mask and
/// enumerate the 9 + 5 canonical placements.
pub fn generate_candidates(scene: &Scene) -> Result<CandidateSet, PlanError> {
    let mask = imaging::render_training_mask(&scene.blocks);
    let camera = imaging::frame_camera(&scene.blocks, TRAIN_RESOLUTION, FRAME_MARGIN);
    let surface = detect_stacking_surface(&mask)?;
    let px = camera.pixel_size();

    // World x-range of the run, outer pixel edges.
    let x_lo_edge = camera.pixel_center(surface.row, surface.col_start).x - 0.5 * px.x;
    let x_hi_edge = camera.pixel_center(surface.row, surface.col_end).x + 0.5 * px.x;

    // Surface plane: snap to the nearest block top near the row's world
    // height so placed blocks rest exactly on geometry, not on a pixel
    // quantization of it; fall back to the row height if nothing is near.
    let row_z = camera.pixel_center(surface.row, surface.col_start).y;
    let plane_z = scene
        .blocks
        .iter()
        .map(|b| b.top_z())
        .filter(|top| (top - row_z).abs() <= 2.0 * px.y)
        .min_by(|a, b| {
            (a - row_z)
                .abs()
                .partial_cmp(&(b - row_z).abs())
                .expect("finite tops")
        })
        .unwrap_or(row_z);

    let mut candidates = Vec::new();
    let mut too_narrow = Vec::new();
    for orientation in [Orientation::Horizontal, Orientation::Vertical] {
        let half_fp = orientation.half_footprint();
        let lo = x_lo_edge + half_fp;
        let hi = x_hi_edge - half_fp;
        if hi < lo {
            too_narrow.push(orientation);
            continue;
        }
        let n = orientation.slots();
        for slot_index in 0..n {
            let x = lo + (hi - lo) * slot_index as f64 / (n - 1) as f64;
            let block = Block {
                shape: orientation.shape(),
                pose: Pose::from_translation(Vec3::new(
                    x,
                    0.0,
                    plane_z + orientation.half_height(),
                )),
            };
            let mut blocks = scene.blocks.clone();
            blocks.push(block);
            let mask = imaging::render_training_mask(&blocks);
            candidates.push(Candidate {
                orientation,
                slot_index,
                block,
                mask,
            });
        }
    }
    Ok(CandidateSet {
        surface,
        plane_z,
        candidates,
        too_narrow,
    })
}

/// Per-candidate stability predictions from the trained classifier.
pub fn predict_candidates(model: &Model, set: &CandidateSet) -> Result<Vec<bool>, LearnError> {
    set.candidates
        .iter()
        .map(|c| Ok(learning::predict(model, &c.mask)?.class == CLASS_STABLE))
        .collect()
}

/// Compose one candidate onto the scene.
pub fn composite_scene(scene: &Scene, candidate: &Candidate) -> Scene {
    let mut composite = scene.clone();
    composite.blocks.push(candidate.block);
    composite
}

/// Ground-truth stability per candidate: simulate each composite and apply
/// the displacement-threshold rule over all blocks including the placed
/// one (divergence counts as unstable).
pub fn ground_truth_candidates(
    scene: &Scene,
    candidates: &[Candidate],
    sim: &SimConfig,
) -> Vec<bool> {
    candidates
        .iter()
        .map(|c| {
            let composite = composite_scene(scene, c);
            let trace = simulate(&composite, sim);
            !label_stability(&trace, TAU).unstable
        })
        .collect()
}

/// Simulated placement executor: tries a candidate with uniform actuation
/// noise on horizontal position and yaw, up to `attempts` times, stopping
/// at the first stable outcome.
#[derive(Clone, Debug)]
pub struct Executor {
    pub sim: SimConfig,
    pub seed: u64,
    pub noise_dx: f64,
    pub noise_yaw_deg: f64,
    pub attempts: u32,
}

impl Executor {
    pub fn new(seed: u64) -> Self {
        Self {
            sim: SimConfig::default(),
            seed,
            noise_dx: NOISE_DX,
            noise_yaw_deg: NOISE_YAW_DEG,
            attempts: DEFAULT_ATTEMPTS,
        }
    }

    /// Noise-free executor (every attempt places exactly at the slot).
    pub fn exact(seed: u64) -> Self {
        Self {
            noise_dx: 0.0,
            noise_yaw_deg: 0.0,
            ..Self::new(seed)
        }
    }

    /// Attempt the placement; returns (success, attempts_used).
    pub fn execute(
        &self,
        scene: &Scene,
        candidate: &Candidate,
        candidate_index: usize,
    ) -> (bool, u32) {
        for attempt in 0..self.attempts {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::child(
                self.seed,
                &[0x91ac, candidate_index as u64, attempt as u64],
            ));
            let dx = rng.gen_range(-self.noise_dx..=self.noise_dx);
            let yaw_deg = rng.gen_range(-self.noise_yaw_deg..=self.noise_yaw_deg);
            let yaw = Quat::from_axis_angle(&Vec3::z_axis(), yaw_deg.to_radians());
            let mut block = candidate.block;
            block.pose.position.x += dx;
            block.pose.orientation = yaw * block.pose.orientation;
            let mut composite = scene.clone();
            composite.blocks.push(block);
            let trace = simulate(&composite, &self.sim);
            if !label_stability(&trace, TAU).unstable {
                return (true, attempt + 1);
            }
        }
        (false, self.attempts)
    }
}

/// Everything recorded about one candidate in a planning run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub orientation: Orientation,
    pub slot_index: usize,
    pub predicted: bool,
    pub ground_truth: bool,
    /// Whether the executor attempted it (predicted-stable candidates only).
    pub executed: bool,
    /// Any attempt produced a stable composite.
    pub success: bool,
    pub attempts_used: u32,
}

/// Scoreboard of a planning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub outcomes: Vec<CandidateOutcome>,
    /// Percent of candidates with predicted == ground truth, rounded 0.1.
    pub prediction_accuracy_pct: f64,
    /// Successful placements / ground-truth-stable placements, percent.
    pub success_rate_pct: f64,
    pub gt_stable: u32,
    /// Successes among ground-truth-stable candidates (the rate numerator).
    pub successes: u32,
    /// Lucky placements of candidates that are not ground-truth stable;
    /// reported separately, never in the success rate.
    pub false_positive_successes: u32,
    pub attempts_total: u32,
    /// True when the model rejected every candidate (no attempts at all).
    pub all_rejected: bool,
}

impl PlacementReport {
    /// Assemble the metrics from raw per-candidate outcomes.
    pub fn from_outcomes(outcomes: Vec<CandidateOutcome>) -> Self {
        let n = outcomes.len();
        let agree = outcomes
            .iter()
            .filter(|o| o.predicted == o.ground_truth)
            .count();
        let gt_stable = outcomes.iter().filter(|o| o.ground_truth).count() as u32;
        let successes = outcomes
            .iter()
            .filter(|o| o.ground_truth && o.success)
            .count() as u32;
        let false_positive_successes = outcomes
            .iter()
            .filter(|o| !o.ground_truth && o.success)
            .count() as u32;
        let attempts_total = outcomes.iter().map(|o| o.attempts_used).sum();
        let all_rejected = outcomes.iter().all(|o| !o.predicted);
        let round1 = |x: f64| (x * 10.0).round() / 10.0;
        PlacementReport {
            prediction_accuracy_pct: if n > 0 {
                round1(100.0 * agree as f64 / n as f64)
            } else {
                0.0
            },
            success_rate_pct: if gt_stable > 0 {
                round1(100.0 * successes as f64 / gt_stable as f64)
            } else {
                0.0
            },
            gt_stable,
            successes,
            false_positive_successes,
            attempts_total,
            all_rejected,
            outcomes,
        }
    }

    /// Per-candidate CSV plus a summary row.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "kind,orientation,slot,predicted,ground_truth,executed,success,attempts_used,prediction_accuracy_pct,success_rate_pct\n",
        );
        for o in &self.outcomes {
            out.push_str(&format!(
                "candidate,{},{},{},{},{},{},{},,\n",
                o.orientation,
                o.slot_index,
                o.predicted as u8,
                o.ground_truth as u8,
                o.executed as u8,
                o.success as u8,
                o.attempts_used
            ));
        }
        out.push_str(&format!(
            "summary,,,,,,,,{:.1},{:.1}\n",
            self.prediction_accuracy_pct, self.success_rate_pct
        ));
        out
    }
}

/// Run the executor over aligned prediction/ground-truth vectors and
/// assemble the report. Only predicted-stable candidates are attempted; a
/// run where the model rejects everything reports rate 0 with the
/// all-rejected flag.
pub fn manipulation_report(
    scene: &Scene,
    set: &CandidateSet,
    predicted: &[bool],
    ground_truth: &[bool],
    executor: &Executor,
) -> PlacementReport {
    assert_eq!(
        predicted.len(),
        set.candidates.len(),
        "prediction per candidate"
    );
    assert_eq!(
        ground_truth.len(),
        set.candidates.len(),
        "ground truth per candidate"
    );
    let outcomes = set
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (success, attempts_used) = if predicted[i] {
                executor.execute(scene, c, i)
            } else {
                (false, 0)
            };
            CandidateOutcome {
                orientation: c.orientation,
                slot_index: c.slot_index,
                predicted: predicted[i],
                ground_truth: ground_truth[i],
                executed: predicted[i],
                success,
                attempts_used,
            }
        })
        .collect();
    PlacementReport::from_outcomes(outcomes)
}

/// The six scripted single-layer evaluation scenes. Each offers a flat top
/// surface at least 3.2 units wide, so every scene hosts all 9 + 5
/// candidates (84 in total). The group tag is nominal — these scenes are
/// hand-built, not generated.
pub fn scripted_scenes() -> Vec<Scene> {
    use crate::scenegen::SceneConfig;
    let config = SceneConfig {
        group: "4B-2D-Uni".parse().expect("valid group"),
        seed: 0,
    };
    let block = |hx: f64, hy: f64, hz: f64, x: f64, z: f64| Block {
        shape: Cuboid::new(Vec3::new(hx, hy, hz)),
        pose: Pose::from_translation(Vec3::new(x, 0.0, z)),
    };
    let scenes: Vec<Vec<Block>> = vec![
        // 1: one wide slab on the ground.
        vec![block(2.0, 0.5, 0.5, 0.0, 0.5)],
        // 2: table — slab bridging two cube legs.
        vec![
            block(0.5, 0.5, 0.5, -1.25, 0.5),
            block(0.5, 0.5, 0.5, 1.25, 0.5),
            block(2.0, 0.5, 0.5, 0.0, 1.5),
        ],
        // 3: offset slab on a narrower base.
        vec![
            block(1.0, 0.5, 0.5, 0.0, 0.5),
            block(1.75, 0.5, 0.5, 0.2, 1.5),
        ],
        // 4: wide slab with a lower bystander cube.
        vec![
            block(2.5, 0.5, 0.5, 0.0, 0.5),
            block(0.5, 0.5, 0.3, 3.2, 0.3),
        ],
        // 5: two stacked cubes carrying a slab.
        vec![
            block(0.5, 0.5, 0.5, 0.0, 0.5),
            block(0.5, 0.5, 0.5, 0.15, 1.5),
            block(1.6, 0.5, 0.5, 0.0, 2.5),
        ],
        // 6: long flat plank on the ground.
        vec![block(3.0, 0.5, 0.25, 0.0, 0.25)],
    ];
    scenes
        .into_iter()
        .enumerate()
        .map(|(i, blocks)| Scene {
            config,
            scene_index: i as u32,
            blocks,
        })
        .collect()
}
