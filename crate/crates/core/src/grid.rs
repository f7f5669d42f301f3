//! Activation maps on a regular 2D lattice, bounding boxes, voxel regions
//! and voxel-wise group statistics.
//!
//! Voxel centers sit at integer coordinates: voxel `(x, y)` has center
//! `(x as f64, y as f64)` with `x` the column and `y` the row. Values are
//! stored row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{Affine, Point};

/// Formats a float with 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A 2D activation map with a validity mask.
///
/// Equality ignores the values of masked-out voxels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoxelGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl PartialEq for VoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &m)| !m || a == b)
    }
}

impl VoxelGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height || mask.len() != width * height {
            return Err(Error::InvalidGrid(format!(
                "{width}x{height} grid needs {} cells, got {} values and {} mask entries",
                width * height,
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..values.len()).find(|&i| mask[i] && !values[i].is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "masked-in voxel ({}, {}) is not finite",
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    /// A grid with every voxel inside the analysis region.
    pub fn full(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, values, vec![true; width * height])
    }

    /// Builds a fully masked-in grid by evaluating `f(x, y)` at every voxel center.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x as f64, y as f64));
            }
        }
        Self::full(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[self.index(x, y)]
    }

    pub fn is_in(&self, x: usize, y: usize) -> bool {
        self.mask[self.index(x, y)]
    }

    pub fn masked_in_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Replaces the mask, keeping values. Masked-in values must be finite.
    pub fn with_mask(self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.width, self.height, self.values, mask)
    }

    /// Intersects the mask with a disc (inclusive boundary).
    pub fn with_circular_mask(self, center: Point, radius: f64) -> Result<Self> {
        let mut mask = self.mask.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = x as f64 - center[0];
                let dy = y as f64 - center[1];
                if dx * dx + dy * dy > radius * radius {
                    mask[y * self.width + x] = false;
                }
            }
        }
        self.with_mask(mask)
    }

    /// The region made of every masked-in voxel.
    pub fn full_region(&self) -> Region {
        let mut voxels = Vec::with_capacity(self.masked_in_count());
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_in(x, y) {
                    voxels.push([x, y]);
                }
            }
        }
        Region { voxels }
    }

    /// (min, max) over masked-in values, `None` if nothing is masked in.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// The box whose corners are the four extreme voxel centers.
    pub fn domain_box(&self) -> BoundingBox {
        BoundingBox::axis_aligned(0.0, 0.0, (self.width - 1) as f64, (self.height - 1) as f64)
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        self.map_values(|v| v * factor)
    }
}

/// A set of lattice voxels `[x, y]`, e.g. the query region of the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub voxels: Vec<[usize; 2]>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn points(&self) -> Vec<Point> {
        self.voxels
            .iter()
            .map(|&[x, y]| [x as f64, y as f64])
            .collect()
    }

    pub fn values(&self, grid: &VoxelGrid) -> Vec<f64> {
        self.voxels.iter().map(|&[x, y]| grid.value(x, y)).collect()
    }
}

/// A convex quadrilateral in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub corners: [Point; 4],
}

const BOX_EPS: f64 = 1e-9;

impl BoundingBox {
    /// Validates that the corners form a convex quadrilateral of positive area.
    pub fn new(corners: [Point; 4]) -> Result<Self> {
        if corners.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox("non-finite corner".into()));
        }
        let bb = Self { corners };
        let area = bb.signed_area();
        if area.abs() <= BOX_EPS {
            return Err(Error::InvalidBox(format!("area {area:e} is not positive")));
        }
        let sign = area.signum();
        for i in 0..4 {
            let a = corners[i];
            let b = corners[(i + 1) % 4];
            let c = corners[(i + 2) % 4];
            if cross(sub(b, a), sub(c, b)) * sign < -BOX_EPS {
                return Err(Error::InvalidBox("corners are not in convex order".into()));
            }
        }
        Ok(bb)
    }

    /// Box with corners `(x0,y0), (x1,y0), (x1,y1), (x0,y1)`.
    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            corners: [[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    /// Shoelace area, positive for counter-clockwise corners (y up).
    pub fn signed_area(&self) -> f64 {
        let c = &self.corners;
        0.5 * (0..4)
            .map(|i| {
                let a = c[i];
                let b = c[(i + 1) % 4];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Inclusive point-in-quadrilateral test.
    pub fn contains(&self, p: Point) -> bool {
        let sign = self.signed_area().signum();
        (0..4).all(|i| {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            cross(sub(b, a), sub(p, a)) * sign >= -BOX_EPS
        })
    }

    /// `(xmin, ymin, xmax, ymax)` of the corners.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        self.corners.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])),
        )
    }

    /// Image of the box under an affine map.
    pub fn warp(&self, t: &impl Affine) -> BoundingBox {
        let m = t.matrix();
        BoundingBox {
            corners: self.corners.map(|c| m.apply(c)),
        }
    }

    pub fn is_axis_aligned(&self) -> bool {
        let c = &self.corners;
        (0..4).all(|i| {
            let a = c[i];
            let b = c[(i + 1) % 4];
            (a[0] - b[0]).abs() <= BOX_EPS || (a[1] - b[1]).abs() <= BOX_EPS
        })
    }

    /// Masked-in voxels of `grid` whose centers lie inside the box.
    pub fn region(&self, grid: &VoxelGrid) -> Region {
        let mut voxels = Vec::new();
        if let Some((x0, y0, x1, y1)) = self.lattice_window(grid) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if grid.is_in(x, y) && self.contains([x as f64, y as f64]) {
                        voxels.push([x, y]);
                    }
                }
            }
        }
        Region { voxels }
    }

    /// Inclusive lattice index window covering the box, clipped to the grid.
    fn lattice_window(&self, grid: &VoxelGrid) -> Option<(usize, usize, usize, usize)> {
        let (xmin, ymin, xmax, ymax) = self.extent();
        let lo_x = (xmin - BOX_EPS).ceil().max(0.0);
        let lo_y = (ymin - BOX_EPS).ceil().max(0.0);
        let hi_x = (xmax + BOX_EPS).floor().min((grid.width - 1) as f64);
        let hi_y = (ymax + BOX_EPS).floor().min((grid.height - 1) as f64);
        if lo_x > hi_x || lo_y > hi_y {
            return None;
        }
        Some((lo_x as usize, lo_y as usize, hi_x as usize, hi_y as usize))
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Crops `grid` to the voxels whose centers fall inside `bbox`.
///
/// The result covers the smallest lattice rectangle holding every interior
/// voxel; for non-axis-aligned boxes the mask marks the interior voxels.
/// Also returns the lattice offset `[x0, y0]` of the crop.
pub fn crop_with_origin(grid: &VoxelGrid, bbox: &BoundingBox) -> Result<(VoxelGrid, [usize; 2])> {
    let region = bbox.region(grid);
    if region.is_empty() {
        return Err(Error::DegenerateCrop);
    }
    let x0 = region.voxels.iter().map(|v| v[0]).min().unwrap_or(0);
    let x1 = region.voxels.iter().map(|v| v[0]).max().unwrap_or(0);
    let y0 = region.voxels.iter().map(|v| v[1]).min().unwrap_or(0);
    let y1 = region.voxels.iter().map(|v| v[1]).max().unwrap_or(0);
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut values = Vec::with_capacity(w * h);
    let mut mask = vec![false; w * h];
    for y in y0..=y1 {
        for x in x0..=x1 {
            values.push(grid.value(x, y));
        }
    }
    for &[x, y] in &region.voxels {
        mask[(y - y0) * w + (x - x0)] = true;
    }
    Ok((VoxelGrid::new(w, h, values, mask)?, [x0, y0]))
}

/// Crops `grid` to `bbox`; see [`crop_with_origin`].
pub fn crop(grid: &VoxelGrid, bbox: &BoundingBox) -> Result<VoxelGrid> {
    crop_with_origin(grid, bbox).map(|(g, _)| g)
}

/// Voxel-wise across-subject summary.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: VoxelGrid,
    pub sd: VoxelGrid,
    /// One-sample t against zero; masked out (NaN) where sd = 0.
    pub tstat: VoxelGrid,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub peak_t: Option<f64>,
    pub peak_location: Option<[usize; 2]>,
}

impl GroupStats {
    /// Largest defined t-statistic and its voxel.
    pub fn peak_t(&self) -> Option<(f64, [usize; 2])> {
        let t = &self.tstat;
        let mut best: Option<(f64, [usize; 2])> = None;
        for y in 0..t.height {
            for x in 0..t.width {
                if t.is_in(x, y) {
                    let v = t.value(x, y);
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, [x, y]));
                    }
                }
            }
        }
        best
    }

    pub fn summary(&self) -> GroupSummary {
        let peak = self.peak_t();
        GroupSummary {
            n: self.n,
            peak_t: peak.map(|p| p.0),
            peak_location: peak.map(|p| p.1),
        }
    }

    /// Writes `mean.csv`, `sd.csv`, `tstat.csv` (with masks) and `summary.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_grid(&self.mean, &dir.join("mean.csv"))?;
        save_grid(&self.sd, &dir.join("sd.csv"))?;
        save_grid(&self.tstat, &dir.join("tstat.csv"))?;
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary())?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-voxel mean, sample sd and one-sample t over grids on a common lattice.
///
/// A voxel contributes only where every input mask is in.
pub fn group_analysis(grids: &[VoxelGrid]) -> Result<GroupStats> {
    if grids.len() < 2 {
        return Err(Error::Group(format!(
            "need at least 2 grids, got {}",
            grids.len()
        )));
    }
    let (w, h) = (grids[0].width, grids[0].height);
    let mismatched: Vec<String> = grids
        .iter()
        .enumerate()
        .filter(|(_, g)| g.width != w || g.height != h)
        .map(|(i, g)| format!("grid {i} is {}x{}", g.width, g.height))
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Group(format!(
            "dimension mismatch against {w}x{h}: {}",
            mismatched.join(", ")
        )));
    }
    let n = grids.len();
    let nf = n as f64;
    let cells = w * h;
    let mut mean = vec![f64::NAN; cells];
    let mut sd = vec![f64::NAN; cells];
    let mut tstat = vec![f64::NAN; cells];
    let mut in_all = vec![false; cells];
    let mut t_ok = vec![false; cells];
    for i in 0..cells {
        if !grids.iter().all(|g| g.mask[i]) {
            continue;
        }
        in_all[i] = true;
        // shifted by the first value so identical inputs give exactly sd = 0
        let v0 = grids[0].values[i];
        let m = v0 + grids.iter().map(|g| g.values[i] - v0).sum::<f64>() / nf;
        let ss = grids.iter().map(|g| (g.values[i] - m).powi(2)).sum::<f64>();
        let s = (ss / (nf - 1.0)).sqrt();
        mean[i] = m;
        sd[i] = s;
        if s > 0.0 {
            tstat[i] = m / (s / nf.sqrt());
            t_ok[i] = true;
        }
    }
    Ok(GroupStats {
        mean: VoxelGrid::new(w, h, mean, in_all.clone())?,
        sd: VoxelGrid::new(w, h, sd, in_all)?,
        tstat: VoxelGrid::new(w, h, tstat, t_ok)?,
        n,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct GridMeta {
    width: usize,
    height: usize,
    mask: Option<String>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Path of the optional mask file belonging to a grid CSV.
pub fn mask_path(path: &Path) -> PathBuf {
    sibling(path, ".mask.csv")
}

/// Path of the JSON metadata sidecar belonging to a grid CSV.
pub fn meta_path(path: &Path) -> PathBuf {
    sibling(path, ".meta.json")
}

fn parse_table(path: &Path, text: &str) -> Result<(usize, usize, Vec<String>)> {
    let perr = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| perr(0, 0, "missing `width,height` header".into()))?;
    let dims: Vec<&str> = header.split(',').map(str::trim).collect();
    if dims.len() != 2 {
        return Err(perr(0, 0, format!("malformed header `{header}`")));
    }
    let parse_dim = |i: usize| -> Result<usize> {
        match dims[i].parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(perr(0, i + 1, format!("bad dimension `{}`", dims[i]))),
        }
    };
    let width = parse_dim(0)?;
    let height = parse_dim(1)?;
    let mut cells = Vec::with_capacity(width * height);
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        let row = r + 1;
        if row > height {
            return Err(perr(row, 0, format!("expected {height} rows, found more")));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(perr(
                row,
                fields.len().min(width) + 1,
                format!("expected {width} cells, found {}", fields.len()),
            ));
        }
        cells.extend(fields.into_iter().map(String::from));
        rows = row;
    }
    if rows < height {
        return Err(perr(rows + 1, 0, format!("expected {height} rows, found {rows}")));
    }
    Ok((width, height, cells))
}

/// Reads a grid CSV plus its optional `.mask.csv` (absent means all-in).
pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (width, height, cells) = parse_table(path, &text)?;
    let mut values = Vec::with_capacity(cells.len());
    for (i, c) in cells.iter().enumerate() {
        let v = c.parse::<f64>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: i / width + 1,
            column: i % width + 1,
            message: format!("non-numeric cell `{c}`"),
        })?;
        values.push(v);
    }

    let mpath = mask_path(path);
    let mask = if mpath.exists() {
        let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let (mw, mh, mcells) = parse_table(&mpath, &mtext)?;
        if (mw, mh) != (width, height) {
            return Err(Error::Parse {
                path: mpath,
                row: 0,
                column: 0,
                message: format!("mask is {mw}x{mh}, grid is {width}x{height}"),
            });
        }
        let mut mask = Vec::with_capacity(mcells.len());
        for (i, c) in mcells.iter().enumerate() {
            mask.push(match c.as_str() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        path: mpath.clone(),
                        row: i / width + 1,
                        column: i % width + 1,
                        message: format!("mask cell must be 0 or 1, got `{other}`"),
                    })
                }
            });
        }
        mask
    } else {
        vec![true; width * height]
    };

    VoxelGrid::new(width, height, values, mask).map_err(|e| match e {
        Error::InvalidGrid(msg) => Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            column: 0,
            message: msg,
        },
        other => other,
    })
}

/// Writes a grid CSV, its mask file when any voxel is masked out, and the
/// metadata sidecar.
pub fn save_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = format!("{},{}\n", grid.width, grid.height);
    for row in grid.values.chunks(grid.width) {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;

    let mpath = mask_path(path);
    let has_mask = grid.mask.iter().any(|&m| !m);
    if has_mask {
        let mut out = format!("{},{}\n", grid.width, grid.height);
        for row in grid.mask.chunks(grid.width) {
            let line: Vec<&str> = row.iter().map(|&m| if m { "1" } else { "0" }).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        fs::write(&mpath, out).map_err(|e| Error::io(&mpath, e))?;
    } else if mpath.exists() {
        fs::remove_file(&mpath).map_err(|e| Error::io(&mpath, e))?;
    }

    let meta = GridMeta {
        width: grid.width,
        height: grid.height,
        mask: has_mask.then(|| {
            mpath
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
    };
    let mpath = meta_path(path);
    fs::write(&mpath, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(mpath, e))
}
