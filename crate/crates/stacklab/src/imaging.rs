//! Orthographic rendering of block scenes to binary foreground masks and
//! grayscale displacement heat-maps.
//!
//! The camera looks along -y at the x-z plane, auto-framed so the whole
//! tower sits centered in a square frame with a configurable margin. Masks
//! are the classifier's only input representation; heat-maps visualize
//! per-block scalars (displacements) for comparison against class
//! activation maps.
//!
//! Rasterization is done in frame-relative coordinates: every pixel test
//! uses (pixel offset from frame center) against (silhouette corner minus
//! frame center). Because auto-framing moves the frame center with the
//! scene, a rigid horizontal translation whose arithmetic is exact in f64
//! (e.g. integer shifts of dyadic coordinates) yields bit-identical masks.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::{cuboid_corners, world_aabb, Rect2, Vec2};
use crate::scenegen::Block;

/// Side length in pixels of archived masks.
pub const ARCHIVE_RESOLUTION: usize = 256;
/// Side length in pixels of classifier inputs.
pub const TRAIN_RESOLUTION: usize = 64;
/// Fraction of the tower's projected extent added as border on each side
/// of the frame.
pub const FRAME_MARGIN: f64 = 0.1;

/// Orthographic camera: a rectangular frame in the x-z plane plus the pixel
/// grid it maps to. Row 0 is the top of the image (largest z).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub frame: Rect2,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// World-space size of one pixel, (along x, along z).
    pub fn pixel_size(&self) -> Vec2 {
        let ext = self
            .frame
            .extents()
            .expect("camera frame must be non-empty");
        Vec2::new(ext.x / self.width as f64, ext.y / self.height as f64)
    }

    /// World-space (x, z) of a pixel center.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vec2 {
        let center = self.frame.center().expect("camera frame must be non-empty");
        let ext = self
            .frame
            .extents()
            .expect("camera frame must be non-empty");
        let s = self.pixel_size();
        Vec2::new(
            center.x + ((col as f64 + 0.5) * s.x - 0.5 * ext.x),
            center.y + (0.5 * ext.y - (row as f64 + 0.5) * s.y),
        )
    }
}

/// Frame the blocks: the square containing their union AABB projected to
/// the x-z plane, centered on it, with `margin_fraction` of the square's
/// content extent added on each side.
///
/// Panics on an empty block list (a scene always has blocks).
pub fn frame_camera(blocks: &[Block], resolution: usize, margin_fraction: f64) -> Camera {
    assert!(!blocks.is_empty(), "cannot frame an empty scene");
    assert!(resolution > 0, "resolution must be positive");
    let mut aabb = world_aabb(&blocks[0].shape, &blocks[0].pose);
    for b in &blocks[1..] {
        aabb = aabb.union(&world_aabb(&b.shape, &b.pose));
    }
    let min = Vec2::new(aabb.min.x, aabb.min.z);
    let max = Vec2::new(aabb.max.x, aabb.max.z);
    let center = Vec2::new(0.5 * (min.x + max.x), 0.5 * (min.y + max.y));
    let extent = (max.x - min.x).max(max.y - min.y);
    let half_side = 0.5 * extent * (1.0 + 2.0 * margin_fraction);
    Camera {
        frame: Rect2::from_center(center, Vec2::new(half_side, half_side)),
        width: resolution,
        height: resolution,
    }
}

/// Binary foreground image; one byte per pixel (0 or 1), row-major, row 0
/// at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on as u8;
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// Grayscale image with values in [0, 1], same layout as `Mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// A block's silhouette under orthographic projection along -y: the convex
/// hull of its 8 corners projected to (x, z), relative to `origin`.
fn silhouette(block: &Block, origin: Vec2) -> Vec<Vec2> {
    let corners = cuboid_corners(&block.shape, &block.pose);
    let pts: Vec<Vec2> = corners
        .iter()
        .map(|c| Vec2::new(c.x - origin.x, c.z - origin.y))
        .collect();
    convex_hull(pts)
}

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
fn convex_hull(mut pts: Vec<Vec2>) -> Vec<Vec2> {
    pts.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
    });
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    fn cross(o: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    }
    let mut lower: Vec<Vec2> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vec2> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Boundary-inclusive point-in-convex-polygon test (hull counter-clockwise).
fn hull_contains(hull: &[Vec2], p: Vec2) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        if (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) < 0.0 {
            return false;
        }
    }
    true
}

/// The range of pixel indices whose centers can fall inside [lo, hi] (in
/// frame-relative coordinates along one axis), padded by one pixel.
fn pixel_range(lo: f64, hi: f64, pixel: f64, half_extent: f64, count: usize) -> (usize, usize) {
    let first = ((lo + half_extent) / pixel - 0.5).floor() - 1.0;
    let last = ((hi + half_extent) / pixel - 0.5).ceil() + 1.0;
    let first = first.max(0.0) as usize;
    let last = (last.max(0.0) as usize).min(count.saturating_sub(1));
    (first, last)
}

/// Visit every pixel covered by the block's silhouette; `f(row, col)`.
fn rasterize(block: &Block, camera: &Camera, mut f: impl FnMut(usize, usize)) {
    let center = camera
        .frame
        .center()
        .expect("camera frame must be non-empty");
    let ext = camera
        .frame
        .extents()
        .expect("camera frame must be non-empty");
    let s = camera.pixel_size();
    let hull = silhouette(block, center);
    if hull.is_empty() {
        return;
    }
    let (mut xmin, mut xmax, mut zmin, mut zmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &hull {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        zmin = zmin.min(p.y);
        zmax = zmax.max(p.y);
    }
    if xmax < -0.5 * ext.x || xmin > 0.5 * ext.x || zmax < -0.5 * ext.y || zmin > 0.5 * ext.y {
        return;
    }
    let (col_lo, col_hi) = pixel_range(xmin, xmax, s.x, 0.5 * ext.x, camera.width);
    // Row r has offset 0.5*ext - (r+0.5)*s, so larger z means smaller row.
    let (row_from_top_lo, row_from_top_hi) =
        pixel_range(-zmax, -zmin, s.y, 0.5 * ext.y, camera.height);
    for row in row_from_top_lo..=row_from_top_hi {
        let z = 0.5 * ext.y - (row as f64 + 0.5) * s.y;
        for col in col_lo..=col_hi {
            let x = (col as f64 + 0.5) * s.x - 0.5 * ext.x;
            if hull_contains(&hull, Vec2::new(x, z)) {
                f(row, col);
            }
        }
    }
}

/// Render the binary foreground mask: a pixel is foreground iff its center
/// lies inside (boundary inclusive) the projection of any block.
pub fn render_mask(blocks: &[Block], camera: &Camera) -> Mask {
    let mut mask = Mask::new(camera.width, camera.height);
    let w = camera.width;
    for block in blocks {
        rasterize(block, camera, |row, col| mask.bits[row * w + col] = 1);
    }
    mask
}

/// Render a heat-map: each block's projected region is filled with its
/// scalar (negative scalars clamp to zero), overlaps take the maximum, and
/// the image is normalized so its maximum is 1 whenever any scalar is
/// positive.
pub fn render_heatmap(blocks: &[Block], camera: &Camera, per_block_scalars: &[f64]) -> Heatmap {
    assert_eq!(
        blocks.len(),
        per_block_scalars.len(),
        "one scalar per block"
    );
    let w = camera.width;
    let mut values = vec![0.0; camera.width * camera.height];
    for (block, &scalar) in blocks.iter().zip(per_block_scalars) {
        let v = scalar.max(0.0);
        if v == 0.0 {
            continue;
        }
        rasterize(block, camera, |row, col| {
            let cell = &mut values[row * w + col];
            if v > *cell {
                *cell = v;
            }
        });
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    Heatmap {
        width: camera.width,
        height: camera.height,
        values,
    }
}

/// Render the canonical classifier input for a block list: archive
/// resolution with the standard margin, majority-downsampled to the
/// training resolution. Dataset builds persist the archive image and
/// downsample on load; this shortcut exists for in-memory pipelines
/// (planning, tests) and matches that path bit for bit.
pub fn render_training_mask(blocks: &[Block]) -> Mask {
    let camera = frame_camera(blocks, ARCHIVE_RESOLUTION, FRAME_MARGIN);
    downsample_majority(
        &render_mask(blocks, &camera),
        ARCHIVE_RESOLUTION / TRAIN_RESOLUTION,
    )
}

/// Downsample by `factor` with a per-cell majority vote; ties go to
/// foreground (a factor^2 cell needs at least half its pixels set).
pub fn downsample_majority(mask: &Mask, factor: usize) -> Mask {
    assert!(factor >= 1, "factor must be at least 1");
    assert!(
        mask.width.is_multiple_of(factor) && mask.height.is_multiple_of(factor),
        "mask dimensions must be divisible by the factor"
    );
    let (w, h) = (mask.width / factor, mask.height / factor);
    let mut out = Mask::new(w, h);
    let need = factor * factor; // threshold: 2 * count >= factor^2
    for row in 0..h {
        for col in 0..w {
            let mut count = 0usize;
            for dr in 0..factor {
                for dc in 0..factor {
                    count +=
                        mask.bits[(row * factor + dr) * mask.width + col * factor + dc] as usize;
                }
            }
            out.bits[row * w + col] = (2 * count >= need) as u8;
        }
    }
    out
}

/// Upscale by pixel replication (each source pixel becomes a factor×factor
/// block).
pub fn upsample_nearest(mask: &Mask, factor: usize) -> Mask {
    assert!(factor >= 1, "factor must be at least 1");
    let (w, h) = (mask.width * factor, mask.height * factor);
    let mut out = Mask::new(w, h);
    for row in 0..h {
        for col in 0..w {
            out.bits[row * w + col] = mask.bits[(row / factor) * mask.width + col / factor];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Portable-bitmap / graymap persistence.
//
// Masks are stored as binary PBM (magic "P4"): rows packed 8 pixels per
// byte, most significant bit leftmost, each row padded to a whole byte;
// a set bit is foreground. Heat-maps are stored as binary PGM (magic
// "P5") with maxval 255, one byte per pixel, value = round(v * 255).
// ---------------------------------------------------------------------------

/// Write a mask as a binary PBM (P4) stream.
pub fn write_mask<W: Write>(mask: &Mask, out: &mut W) -> io::Result<()> {
    write!(out, "P4\n{} {}\n", mask.width, mask.height)?;
    let row_bytes = mask.width.div_ceil(8);
    let mut row = vec![0u8; row_bytes];
    for r in 0..mask.height {
        row.iter_mut().for_each(|b| *b = 0);
        for c in 0..mask.width {
            if mask.bits[r * mask.width + c] != 0 {
                row[c / 8] |= 0x80 >> (c % 8);
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}

/// Write a heat-map as a binary PGM (P5) stream with maxval 255.
pub fn write_heatmap<W: Write>(map: &Heatmap, out: &mut W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", map.width, map.height)?;
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

fn bad_data(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Read one whitespace-delimited token, skipping '#' comments, consuming
/// exactly one trailing whitespace byte (the netpbm header convention).
fn next_token<R: Read>(r: &mut R) -> io::Result<String> {
    let mut byte = [0u8; 1];
    // Skip leading whitespace and comment lines.
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b' ' | b'\t' | b'\r' | b'\n' => continue,
            b'#' => {
                while byte[0] != b'\n' {
                    r.read_exact(&mut byte)?;
                }
            }
            _ => break,
        }
    }
    let mut tok = vec![byte[0]];
    loop {
        match r.read_exact(&mut byte) {
            Ok(()) => match byte[0] {
                b' ' | b'\t' | b'\r' | b'\n' => break,
                b => tok.push(b),
            },
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
    }
    String::from_utf8(tok).map_err(|_| bad_data("non-ASCII token in netpbm header"))
}

fn parse_dim(tok: &str) -> io::Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| bad_data(format!("bad netpbm dimension {tok:?}")))
}

/// Read a binary PBM (P4) stream back into a mask.
pub fn read_mask<R: BufRead>(r: &mut R) -> io::Result<Mask> {
    let magic = next_token(r)?;
    if magic != "P4" {
        return Err(bad_data(format!("expected P4 magic, found {magic:?}")));
    }
    let width = parse_dim(&next_token(r)?)?;
    let height = parse_dim(&next_token(r)?)?;
    let row_bytes = width.div_ceil(8);
    let mut raster = vec![0u8; row_bytes * height];
    r.read_exact(&mut raster)?;
    let mut mask = Mask::new(width, height);
    for row in 0..height {
        for col in 0..width {
            let byte = raster[row * row_bytes + col / 8];
            mask.bits[row * width + col] = (byte >> (7 - col % 8)) & 1;
        }
    }
    Ok(mask)
}

/// Read a binary PGM (P5) stream back into a heat-map (values scaled to
/// [0, 1] by the stored maxval).
pub fn read_heatmap<R: BufRead>(r: &mut R) -> io::Result<Heatmap> {
    let magic = next_token(r)?;
    if magic != "P5" {
        return Err(bad_data(format!("expected P5 magic, found {magic:?}")));
    }
    let width = parse_dim(&next_token(r)?)?;
    let height = parse_dim(&next_token(r)?)?;
    let maxval = parse_dim(&next_token(r)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad_data(format!("unsupported PGM maxval {maxval}")));
    }
    let mut raster = vec![0u8; width * height];
    r.read_exact(&mut raster)?;
    let values = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(Heatmap {
        width,
        height,
        values,
    })
}

/// Write a mask to a file (binary PBM).
pub fn save_mask(path: &Path, mask: &Mask) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_mask(mask, &mut out)?;
    out.flush()
}

/// Load a mask file written by `save_mask`.
pub fn load_mask(path: &Path) -> io::Result<Mask> {
    read_mask(&mut BufReader::new(File::open(path)?))
}

/// Write a heat-map to a file (binary PGM).
pub fn save_heatmap(path: &Path, map: &Heatmap) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_heatmap(map, &mut out)?;
    out.flush()
}

/// Load a heat-map file written by `save_heatmap`.
pub fn load_heatmap(path: &Path) -> io::Result<Heatmap> {
    read_heatmap(&mut BufReader::new(File::open(path)?))
}
