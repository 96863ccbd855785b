//! Labeled-corpus builder and loader: for each requested scene group,
//! generate scenes, simulate them, label stability, render mask and
//! heat-map images, and persist everything under a self-describing JSONL
//! manifest with a fixed parity train/test split.
//!
//! Directory layout:
//!
//! ```text
//! <out>/manifest.jsonl                 header line + one record per line
//! <out>/masks/<group>/<index>.pbm      binary PBM (P4) foreground masks
//! <out>/heat/<group>/<index>.pgm       binary PGM (P5) displacement heat
//! ```
//!
//! Rebuilding with identical inputs reproduces every output byte, so a
//! manifest plus its constants fully determines the corpus.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    self, frame_camera, render_heatmap, render_mask, Mask, ARCHIVE_RESOLUTION, FRAME_MARGIN,
    TRAIN_RESOLUTION,
};
use crate::physics::{simulate, SimConfig};
use crate::scenegen::{
    enumerate_groups, generate_scene_with_retries, GenParams, GenerationError, GroupSpec, Scene,
};
use crate::stability::{label_stability, TAU};

/// Heat-maps are archived at the training resolution: they are consumed
/// only for comparison against class activation maps, which live on the
/// training grid.
pub const HEAT_RESOLUTION: usize = 64;

/// Finite stand-in recorded for the displacement of blocks in diverged
/// simulations (true displacement unbounded). Far above any physical
/// displacement, so the label rule `unstable = any(d > tau)` is preserved.
pub const DISPLACEMENT_SENTINEL: f64 = 1e9;

/// Half of a group's scenes, fixed by scene-index parity so the split never
/// depends on content or stored randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Even indices train, odd indices test.
    pub fn of_index(scene_index: u32) -> Split {
        if scene_index.is_multiple_of(2) {
            Split::Train
        } else {
            Split::Test
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// First line of the manifest: every constant the corpus was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub base_seed: u64,
    pub per_group: u32,
    pub groups: Vec<String>,
    /// Stability displacement threshold.
    pub tau: f64,
    /// Scene-generation constants, including the tuned offset distribution.
    pub gen: GenParams,
    /// Simulation constants used for labeling.
    pub sim: SimConfig,
    pub archive_resolution: usize,
    pub train_resolution: usize,
    pub heat_resolution: usize,
    pub frame_margin: f64,
    pub displacement_sentinel: f64,
}

/// One labeled scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub group_id: String,
    pub scene_index: u32,
    /// The per-scene seed that produced the accepted scene.
    pub seed: u64,
    /// Sub-seed retries consumed before generation succeeded.
    pub retries: u32,
    /// True when no block moved more than tau.
    pub stable: bool,
    pub per_block_displacements: Vec<f64>,
    pub mask_path: String,
    pub heat_path: String,
    pub split: Split,
}

impl ManifestRecord {
    pub fn mask_file(&self, root: &Path) -> PathBuf {
        root.join(&self.mask_path)
    }

    pub fn heat_file(&self, root: &Path) -> PathBuf {
        root.join(&self.heat_path)
    }
}

/// Header plus records in build order (groups in the header's order, scene
/// indices ascending within a group).
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    UnknownGroup(#[from] crate::scenegen::UnknownGroup),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest inconsistency: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything `build_dataset` needs besides the output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub groups: Vec<GroupSpec>,
    pub per_group: u32,
    pub base_seed: u64,
    pub gen: GenParams,
    pub sim: SimConfig,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            groups: enumerate_groups(),
            per_group: 200,
            base_seed: 42,
            gen: GenParams::default(),
            sim: SimConfig::default(),
        }
    }
}

impl BuildOptions {
    fn header(&self) -> ManifestHeader {
        ManifestHeader {
            version: 1,
            base_seed: self.base_seed,
            per_group: self.per_group,
            groups: self.groups.iter().map(|g| g.to_string()).collect(),
            tau: TAU,
            gen: self.gen,
            sim: self.sim,
            archive_resolution: ARCHIVE_RESOLUTION,
            train_resolution: TRAIN_RESOLUTION,
            heat_resolution: HEAT_RESOLUTION,
            frame_margin: FRAME_MARGIN,
            displacement_sentinel: DISPLACEMENT_SENTINEL,
        }
    }
}

/// The groups with 4 or 6 blocks ("simple scenes").
pub fn simple_groups() -> Vec<GroupSpec> {
    enumerate_groups()
        .into_iter()
        .filter(|g| g.is_simple())
        .collect()
}

/// The groups with 10 or 14 blocks ("complex scenes").
pub fn complex_groups() -> Vec<GroupSpec> {
    enumerate_groups()
        .into_iter()
        .filter(|g| !g.is_simple())
        .collect()
}

/// Generate, simulate, label and render one scene; returns the record plus
/// the rendered images (file writing happens in the caller's worker).
fn build_scene(
    group: &GroupSpec,
    scene_index: u32,
    opts: &BuildOptions,
) -> Result<(ManifestRecord, Mask, imaging::Heatmap), DatasetError> {
    let (scene, retries) =
        generate_scene_with_retries(group, scene_index, opts.base_seed, &opts.gen)?;
    let trace = simulate(&scene, &opts.sim);
    let label = label_stability(&trace, TAU);
    let displacements: Vec<f64> = label
        .per_block_displacement
        .iter()
        .map(|&d| {
            if d.is_finite() {
                d
            } else {
                DISPLACEMENT_SENTINEL
            }
        })
        .collect();

    let mask_camera = frame_camera(&scene.blocks, ARCHIVE_RESOLUTION, FRAME_MARGIN);
    let mask = render_mask(&scene.blocks, &mask_camera);
    let heat_camera = frame_camera(&scene.blocks, HEAT_RESOLUTION, FRAME_MARGIN);
    let heat = render_heatmap(&scene.blocks, &heat_camera, &displacements);

    let record = ManifestRecord {
        group_id: group.to_string(),
        scene_index,
        seed: scene.config.seed,
        retries,
        stable: !label.unstable,
        per_block_displacements: displacements,
        mask_path: format!("masks/{group}/{scene_index}.pbm"),
        heat_path: format!("heat/{group}/{scene_index}.pgm"),
        split: Split::of_index(scene_index),
    };
    Ok((record, mask, heat))
}

/// Build the corpus: scenes run concurrently (generation, simulation,
/// rendering and image writing), while the manifest is assembled afterwards
/// in deterministic (group, index) order. Re-running with the same options
/// reproduces every output byte.
pub fn build_dataset(opts: &BuildOptions, out_dir: &Path) -> Result<Manifest, DatasetError> {
    for group in &opts.groups {
        for sub in ["masks", "heat"] {
            let dir = out_dir.join(sub).join(group.to_string());
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
    }

    let jobs: Vec<(GroupSpec, u32)> = opts
        .groups
        .iter()
        .flat_map(|g| (0..opts.per_group).map(move |i| (*g, i)))
        .collect();

    let records: Vec<ManifestRecord> = jobs
        .par_iter()
        .map(|(group, index)| {
            let (record, mask, heat) = build_scene(group, *index, opts)?;
            let mask_path = record.mask_file(out_dir);
            imaging::save_mask(&mask_path, &mask).map_err(|e| io_err(&mask_path, e))?;
            let heat_path = record.heat_file(out_dir);
            imaging::save_heatmap(&heat_path, &heat).map_err(|e| io_err(&heat_path, e))?;
            Ok(record)
        })
        .collect::<Result<_, DatasetError>>()?;

    let manifest = Manifest {
        header: opts.header(),
        records,
    };
    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Serialize the manifest as JSON lines: header first, then records.
pub fn write_manifest<W: Write>(manifest: &Manifest, out: &mut W) -> io::Result<()> {
    let header = serde_json::to_string(&manifest.header)?;
    writeln!(out, "{header}")?;
    for record in &manifest.records {
        let line = serde_json::to_string(record)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parse a manifest written by `write_manifest`.
pub fn read_manifest<R: BufRead>(input: &mut R) -> Result<Manifest, DatasetError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| DatasetError::Parse {
        line: 1,
        message: "empty manifest".into(),
    })?;
    let first = first.map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(Manifest { header, records })
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write_manifest(manifest, &mut out).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_manifest(&mut BufReader::new(file))
}

/// Check the internal invariants: per-group counts, split parity, the
/// label/displacement/tau consistency, and path shapes.
pub fn validate(manifest: &Manifest) -> Result<(), DatasetError> {
    let header = &manifest.header;
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for (i, record) in manifest.records.iter().enumerate() {
        let fail = |message: String| DatasetError::Inconsistent(format!("record {i}: {message}"));
        if !header.groups.contains(&record.group_id) {
            return Err(fail(format!("group {:?} not in header", record.group_id)));
        }
        let group: GroupSpec = record
            .group_id
            .parse()
            .map_err(|_| fail(format!("unparseable group id {:?}", record.group_id)))?;
        if record.per_block_displacements.len() != group.num_blocks as usize {
            return Err(fail(
                "displacement count does not match the group block count".into(),
            ));
        }
        let unstable = record
            .per_block_displacements
            .iter()
            .any(|&d| d > header.tau);
        if record.stable != !unstable {
            return Err(fail(
                "stability label contradicts displacements and tau".into(),
            ));
        }
        if record.split != Split::of_index(record.scene_index) {
            return Err(fail("split does not match scene-index parity".into()));
        }
        let expect_mask = format!("masks/{}/{}.pbm", record.group_id, record.scene_index);
        let expect_heat = format!("heat/{}/{}.pgm", record.group_id, record.scene_index);
        if record.mask_path != expect_mask || record.heat_path != expect_heat {
            return Err(fail("image path does not follow the layout".into()));
        }
        *counts.entry(record.group_id.as_str()).or_default() += 1;
    }
    for group in &header.groups {
        let n = counts.get(group.as_str()).copied().unwrap_or(0);
        if n != header.per_group {
            return Err(DatasetError::Inconsistent(format!(
                "group {group}: {n} records, expected {}",
                header.per_group
            )));
        }
    }
    Ok(())
}

fn check_groups_known(manifest: &Manifest, groups: &[GroupSpec]) -> Result<(), DatasetError> {
    for group in groups {
        let name = group.to_string();
        if !manifest.header.groups.contains(&name) {
            return Err(crate::scenegen::UnknownGroup(name).into());
        }
    }
    Ok(())
}

/// The records of the requested groups and split, in manifest order.
pub fn split_view<'m>(
    manifest: &'m Manifest,
    groups: &[GroupSpec],
    split: Split,
) -> Result<Vec<&'m ManifestRecord>, DatasetError> {
    check_groups_known(manifest, groups)?;
    let names: Vec<String> = groups.iter().map(|g| g.to_string()).collect();
    Ok(manifest
        .records
        .iter()
        .filter(|r| r.split == split && names.contains(&r.group_id))
        .collect())
}

/// One sample ready for the classifier: training-resolution mask + label.
#[derive(Clone, Debug)]
pub struct ViewItem {
    pub group: GroupSpec,
    pub scene_index: u32,
    pub stable: bool,
    pub mask: Mask,
}

/// Load a split's samples from disk: archived masks are majority-downsampled
/// to the training resolution.
pub fn load_split(
    root: &Path,
    manifest: &Manifest,
    groups: &[GroupSpec],
    split: Split,
) -> Result<Vec<ViewItem>, DatasetError> {
    let factor = manifest.header.archive_resolution / manifest.header.train_resolution;
    split_view(manifest, groups, split)?
        .into_iter()
        .map(|record| {
            let path = record.mask_file(root);
            let archived = imaging::load_mask(&path).map_err(|e| io_err(&path, e))?;
            Ok(ViewItem {
                group: record.group_id.parse().expect("validated group id"),
                scene_index: record.scene_index,
                stable: record.stable,
                mask: imaging::downsample_majority(&archived, factor),
            })
        })
        .collect()
}

/// Regenerate a record's scene from its stored seed (for CAM inspection and
/// planning demos; identical to the scene that produced the record).
pub fn rebuild_scene(manifest: &Manifest, record: &ManifestRecord) -> Result<Scene, DatasetError> {
    let group: GroupSpec = record
        .group_id
        .parse()
        .map_err(|_| DatasetError::Inconsistent(format!("bad group id {:?}", record.group_id)))?;
    let cfg = crate::scenegen::SceneConfig {
        group,
        seed: record.seed,
    };
    crate::scenegen::generate_scene(&cfg, record.scene_index, &manifest.header.gen)
        .map_err(DatasetError::from)
}

/// Per-group corpus statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: String,
    pub total: u32,
    pub stable: u32,
    pub unstable: u32,
    pub train: u32,
    pub test: u32,
    pub retried_scenes: u32,
}

/// Summarize the manifest per group, in header group order.
pub fn stats(manifest: &Manifest) -> Vec<GroupStats> {
    manifest
        .header
        .groups
        .iter()
        .map(|name| {
            let mut s = GroupStats {
                group: name.clone(),
                total: 0,
                stable: 0,
                unstable: 0,
                train: 0,
                test: 0,
                retried_scenes: 0,
            };
            for r in manifest.records.iter().filter(|r| &r.group_id == name) {
                s.total += 1;
                if r.stable {
                    s.stable += 1;
                } else {
                    s.unstable += 1;
                }
                match r.split {
                    Split::Train => s.train += 1,
                    Split::Test => s.test += 1,
                }
                if r.retries > 0 {
                    s.retried_scenes += 1;
                }
            }
            s
        })
        .collect()
}
