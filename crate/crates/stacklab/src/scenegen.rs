//! Procedural tower-scene generation.
//!
//! Scenes are built bottom-up: the first block rests on the ground at the
//! origin, every later block rests exactly on the exposed top face of an
//! existing block, with a horizontal offset sampled so the footprints keep a
//! minimum overlap and nothing interpenetrates. All 16 scene groups are the
//! Cartesian product of block count {4, 6, 10, 14}, stacking depth {2D, 3D},
//! and block size {Uni, NonUni}.

use crate::geometry::{rect_overlap, world_aabb, Cuboid, Pose, Quat, Rect2, Vec2, Vec3};
use crate::seeds;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Allowed block counts, in canonical order.
pub const BLOCK_COUNTS: [u32; 4] = [4, 6, 10, 14];

/// Single-layer (2D) or depth-expanding (3D) stacking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthMode {
    TwoD,
    ThreeD,
}

/// Uniform 1x1x3 blocks, or cross-sections rescaled per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeMode {
    Uni,
    NonUni,
}

/// One of the 16 scene groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    pub num_blocks: u32,
    pub depth: DepthMode,
    pub size: SizeMode,
}

impl GroupSpec {
    pub fn new(num_blocks: u32, depth: DepthMode, size: SizeMode) -> Self {
        assert!(
            BLOCK_COUNTS.contains(&num_blocks),
            "block count must be one of {BLOCK_COUNTS:?}"
        );
        Self {
            num_blocks,
            depth,
            size,
        }
    }

    /// Position in the canonical enumeration, 0..16.
    pub fn ordinal(&self) -> usize {
        let b = BLOCK_COUNTS
            .iter()
            .position(|&n| n == self.num_blocks)
            .unwrap();
        let d = match self.depth {
            DepthMode::TwoD => 0,
            DepthMode::ThreeD => 1,
        };
        let s = match self.size {
            SizeMode::Uni => 0,
            SizeMode::NonUni => 1,
        };
        b * 4 + d * 2 + s
    }

    /// Groups with 4 or 6 blocks.
    pub fn is_simple(&self) -> bool {
        self.num_blocks <= 6
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.depth {
            DepthMode::TwoD => "2D",
            DepthMode::ThreeD => "3D",
        };
        let s = match self.size {
            SizeMode::Uni => "Uni",
            SizeMode::NonUni => "NonUni",
        };
        write!(f, "{}B-{}-{}", self.num_blocks, d, s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown group {0:?}; valid groups: {}", valid_group_names().join(", "))]
pub struct UnknownGroup(pub String);

/// Names of all 16 groups in canonical order.
pub fn valid_group_names() -> Vec<String> {
    enumerate_groups().iter().map(|g| g.to_string()).collect()
}

impl FromStr for GroupSpec {
    type Err = UnknownGroup;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        enumerate_groups()
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| UnknownGroup(s.to_string()))
    }
}

/// All 16 scene groups in a fixed order: block count, then depth, then size.
pub fn enumerate_groups() -> Vec<GroupSpec> {
    let mut out = Vec::with_capacity(16);
    for &n in &BLOCK_COUNTS {
        for depth in [DepthMode::TwoD, DepthMode::ThreeD] {
            for size in [SizeMode::Uni, SizeMode::NonUni] {
                out.push(GroupSpec {
                    num_blocks: n,
                    depth,
                    size,
                });
            }
        }
    }
    out
}

/// How the horizontal placement offset of a new block (relative to its
/// support's top-face center) is drawn, over the range where the footprints
/// still touch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetKind {
    /// Uniform over the touching range. Produces almost exclusively unstable
    /// tall towers, so it fails the label-balance requirement; kept for
    /// comparison runs.
    Uniform,
    /// Zero-mean normal with std-dev `std_frac` times the maximum offset,
    /// truncated to the touching range. The tuned default.
    TruncatedNormal { std_frac: f64 },
}

/// Generation constants. Every value here is denormalized into the dataset
/// manifest so substituted constants stay auditable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Std-dev of the truncated normal for NonUni cross-section scaling.
    pub sigma: f64,
    /// Truncation half-width of the scaling distribution.
    pub delta: f64,
    /// Minimum footprint-overlap area, as a fraction of the smaller footprint.
    pub min_overlap_frac: f64,
    /// Placement-offset distribution, retuned until every group shows both
    /// labels.
    pub offset: OffsetKind,
    /// A block may host another only while at least this fraction of its top
    /// face is uncovered.
    pub exposure_min_frac: f64,
    /// Placement rejection attempts per block before the scene fails.
    pub max_block_attempts: u32,
    /// Sub-seed retries per scene index before giving up.
    pub max_scene_retries: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            delta: 0.2,
            min_overlap_frac: 0.1,
            offset: OffsetKind::TruncatedNormal { std_frac: 0.16 },
            exposure_min_frac: 0.35,
            max_block_attempts: 200,
            max_scene_retries: 32,
        }
    }
}

/// Template plus the per-scene seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub group: GroupSpec,
    pub seed: u64,
}

/// One posed block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub shape: Cuboid,
    pub pose: Pose,
}

impl Block {
    /// Footprint rectangle in the xy plane (valid for axis-aligned poses).
    pub fn footprint(&self) -> Rect2 {
        let aabb = world_aabb(&self.shape, &self.pose);
        Rect2::new(
            Vec2::new(aabb.min.x, aabb.min.y),
            Vec2::new(aabb.max.x, aabb.max.y),
        )
    }

    pub fn top_z(&self) -> f64 {
        world_aabb(&self.shape, &self.pose).max.z
    }

    pub fn bottom_z(&self) -> f64 {
        world_aabb(&self.shape, &self.pose).min.z
    }
}

/// An ordered list of blocks plus the ground plane at z = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub scene_index: u32,
    pub blocks: Vec<Block>,
}

/// Tolerance for plane coincidence and separation checks at t = 0.
pub const CONTACT_TOL: f64 = 1e-4;

impl Scene {
    /// Directed support edges (supporter, supported): the supported block's
    /// bottom plane coincides with the supporter's top plane and their
    /// footprints overlap with positive area.
    pub fn support_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (j, upper) in self.blocks.iter().enumerate() {
            for (i, lower) in self.blocks.iter().enumerate() {
                if i == j {
                    continue;
                }
                if (upper.bottom_z() - lower.top_z()).abs() < CONTACT_TOL {
                    let o = rect_overlap(&upper.footprint(), &lower.footprint());
                    if o.area() > CONTACT_TOL {
                        edges.push((i, j));
                    }
                }
            }
        }
        edges
    }

    /// Every block is reachable from a ground-resting block via support edges.
    pub fn support_chain_complete(&self) -> bool {
        let n = self.blocks.len();
        let mut reached = vec![false; n];
        let mut queue: Vec<usize> = (0..n)
            .filter(|&i| self.blocks[i].bottom_z().abs() < CONTACT_TOL)
            .collect();
        for &i in &queue {
            reached[i] = true;
        }
        let edges = self.support_edges();
        while let Some(i) = queue.pop() {
            for &(a, b) in &edges {
                if a == i && !reached[b] {
                    reached[b] = true;
                    queue.push(b);
                }
            }
        }
        reached.iter().all(|&r| r)
    }

    /// Axis-aligned interpenetration test over all pairs; blocks in freshly
    /// generated scenes are axis-aligned, so AABB overlap is exact.
    pub fn has_interpenetration(&self) -> bool {
        for i in 0..self.blocks.len() {
            let a = world_aabb(&self.blocks[i].shape, &self.blocks[i].pose);
            for j in (i + 1)..self.blocks.len() {
                let b = world_aabb(&self.blocks[j].shape, &self.blocks[j].pose);
                if a.overlaps(&b, CONTACT_TOL) {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("scene generation failed for {group} scene {scene_index} after {attempts} placement attempts")]
    GenerationFailed {
        group: GroupSpec,
        scene_index: u32,
        attempts: u32,
    },
    #[error("scene {scene_index} of {group} failed after {retries} sub-seed retries")]
    RetriesExhausted {
        group: GroupSpec,
        scene_index: u32,
        retries: u32,
    },
}

/// Axis-aligned resting orientations for the long (z) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Upright,
    LyingX,
    LyingY,
}

impl Orientation {
    pub fn quat(&self) -> Quat {
        match self {
            Orientation::Upright => Quat::identity(),
            // long axis along world x
            Orientation::LyingX => Quat::from_axis_angle(&Vec3::y_axis(), FRAC_PI_2),
            // long axis along world y
            Orientation::LyingY => Quat::from_axis_angle(&Vec3::x_axis(), FRAC_PI_2),
        }
    }

    /// World-frame half-extents of a cuboid in this orientation.
    pub fn world_half_extents(&self, c: &Cuboid) -> Vec3 {
        let h = c.half_extents;
        match self {
            Orientation::Upright => Vec3::new(h.x, h.y, h.z),
            Orientation::LyingX => Vec3::new(h.z, h.y, h.x),
            Orientation::LyingY => Vec3::new(h.x, h.z, h.y),
        }
    }

    fn options(depth: DepthMode) -> &'static [Orientation] {
        match depth {
            DepthMode::TwoD => &[Orientation::Upright, Orientation::LyingX],
            DepthMode::ThreeD => &[
                Orientation::Upright,
                Orientation::LyingX,
                Orientation::LyingY,
            ],
        }
    }
}

/// Draw one block shape. Uni blocks are exactly 1x1x3; NonUni blocks scale
/// the two unit cross-section extents by independent truncated-normal draws.
pub fn sample_block_size(mode: SizeMode, rng: &mut impl Rng, params: &GenParams) -> Cuboid {
    match mode {
        SizeMode::Uni => Cuboid::canonical_block(),
        SizeMode::NonUni => {
            let sx = truncated_normal(rng, 1.0, params.sigma, params.delta);
            let sy = truncated_normal(rng, 1.0, params.sigma, params.delta);
            Cuboid::new(Vec3::new(0.5 * sx, 0.5 * sy, 1.5))
        }
    }
}

fn truncated_normal(rng: &mut impl Rng, mean: f64, sigma: f64, delta: f64) -> f64 {
    let dist = Normal::new(mean, sigma).expect("valid normal");
    loop {
        let x = dist.sample(rng);
        if (x - mean).abs() <= delta {
            return x;
        }
    }
}

/// Indices of blocks whose top face is still exposed enough to host another
/// block: the covered fraction of the top face stays below
/// `1 - exposure_min_frac`.
fn exposed_blocks(blocks: &[Block], params: &GenParams) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        let top = b.top_z();
        let fp = b.footprint();
        let area = fp.area();
        let mut covered = 0.0;
        for (j, other) in blocks.iter().enumerate() {
            if i != j && (other.bottom_z() - top).abs() < CONTACT_TOL {
                covered += rect_overlap(&fp, &other.footprint()).area();
            }
        }
        if covered / area <= 1.0 - params.exposure_min_frac {
            out.push(i);
        }
    }
    out
}

fn sample_offset(rng: &mut impl Rng, max_abs: f64, kind: OffsetKind) -> f64 {
    if max_abs <= 0.0 {
        return 0.0;
    }
    match kind {
        OffsetKind::Uniform => rng.gen_range(-max_abs..max_abs),
        OffsetKind::TruncatedNormal { std_frac } => {
            let dist = Normal::new(0.0, std_frac * max_abs).expect("valid normal");
            loop {
                let x = dist.sample(rng);
                if x.abs() < max_abs - 1e-9 {
                    return x;
                }
            }
        }
    }
}

/// Build one scene bottom-up under the non-overlap constraint.
///
/// Deterministic for a given (config, scene_index). Fails with
/// `GenerationFailed` when rejection sampling exhausts its attempt budget.
pub fn generate_scene(
    cfg: &SceneConfig,
    scene_index: u32,
    params: &GenParams,
) -> Result<Scene, GenerationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let group = cfg.group;
    let n = group.num_blocks as usize;
    let mut blocks: Vec<Block> = Vec::with_capacity(n);

    // First block rests on the ground at the origin.
    let shape = sample_block_size(group.size, &mut rng, params);
    let orient = *pick(&mut rng, Orientation::options(group.depth));
    let whe = orient.world_half_extents(&shape);
    blocks.push(Block {
        shape,
        pose: Pose::new(Vec3::new(0.0, 0.0, whe.z), orient.quat()),
    });

    for _ in 1..n {
        let mut placed = false;
        for attempt in 0..params.max_block_attempts {
            let exposed = exposed_blocks(&blocks, params);
            if exposed.is_empty() {
                return Err(GenerationError::GenerationFailed {
                    group,
                    scene_index,
                    attempts: attempt,
                });
            }
            let sup_idx = *pick(&mut rng, &exposed);
            let sup = blocks[sup_idx];
            let sup_fp = sup.footprint();
            let sup_center = sup_fp.center().expect("non-empty footprint");
            let sup_ext = sup_fp.extents().expect("non-empty footprint");

            let shape = sample_block_size(group.size, &mut rng, params);
            let orient = *pick(&mut rng, Orientation::options(group.depth));
            let whe = orient.world_half_extents(&shape);

            let max_dx = whe.x + 0.5 * sup_ext.x;
            let dx = sample_offset(&mut rng, max_dx, params.offset);
            let dy = match group.depth {
                DepthMode::TwoD => 0.0,
                DepthMode::ThreeD => {
                    let max_dy = whe.y + 0.5 * sup_ext.y;
                    sample_offset(&mut rng, max_dy, params.offset)
                }
            };

            let center = Vec3::new(sup_center.x + dx, sup_center.y + dy, sup.top_z() + whe.z);
            let candidate = Block {
                shape,
                pose: Pose::new(center, orient.quat()),
            };

            let overlap = rect_overlap(&candidate.footprint(), &sup_fp).area();
            let min_area = candidate.footprint().area().min(sup_fp.area());
            if overlap < params.min_overlap_frac * min_area {
                continue;
            }

            let cand_aabb = world_aabb(&candidate.shape, &candidate.pose);
            let collides = blocks
                .iter()
                .any(|b| world_aabb(&b.shape, &b.pose).overlaps(&cand_aabb, CONTACT_TOL));
            if collides {
                continue;
            }

            blocks.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(GenerationError::GenerationFailed {
                group,
                scene_index,
                attempts: params.max_block_attempts,
            });
        }
    }

    Ok(Scene {
        config: *cfg,
        scene_index,
        blocks,
    })
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// A generated group: the scenes plus the indices that needed sub-seed
/// retries (recorded so dataset builds can log them).
#[derive(Clone, Debug)]
pub struct GroupScenes {
    pub scenes: Vec<Scene>,
    pub retried: Vec<(u32, u32)>,
}

/// Per-scene seed for a (base seed, group, index, retry) tuple.
pub fn scene_seed(base_seed: u64, group: &GroupSpec, scene_index: u32, retry: u32) -> u64 {
    let h0 = seeds::child(base_seed, &[group.ordinal() as u64, scene_index as u64]);
    if retry == 0 {
        h0
    } else {
        seeds::child(h0, &[retry as u64])
    }
}

/// Generate one scene, retrying with sub-seeds on `GenerationFailed`.
pub fn generate_scene_with_retries(
    group: &GroupSpec,
    scene_index: u32,
    base_seed: u64,
    params: &GenParams,
) -> Result<(Scene, u32), GenerationError> {
    for retry in 0..params.max_scene_retries {
        let cfg = SceneConfig {
            group: *group,
            seed: scene_seed(base_seed, group, scene_index, retry),
        };
        match generate_scene(&cfg, scene_index, params) {
            Ok(scene) => return Ok((scene, retry)),
            Err(_) => continue,
        }
    }
    Err(GenerationError::RetriesExhausted {
        group: *group,
        scene_index,
        retries: params.max_scene_retries,
    })
}

/// Generate `count` scenes of one group. Scene seeds are derived per index,
/// so the output is a pure function of (group, count, base_seed).
pub fn generate_group(
    group: &GroupSpec,
    count: u32,
    base_seed: u64,
    params: &GenParams,
) -> Result<GroupScenes, GenerationError> {
    let mut scenes = Vec::with_capacity(count as usize);
    let mut retried = Vec::new();
    for idx in 0..count {
        let (scene, retries) = generate_scene_with_retries(group, idx, base_seed, params)?;
        if retries > 0 {
            retried.push((idx, retries));
        }
        scenes.push(scene);
    }
    Ok(GroupScenes { scenes, retried })
}
