//! Point patterns to binned count grids.
//!
//! Images are shifted so their bottom-left corner is the origin, then every
//! coordinate in the dataset is divided by the largest axis length `l*`, so
//! each domain becomes `[0, l_x/l*] x [0, l_y/l*]` inside the unit square.
//! Pixels are indexed row-major, `p = py * n_x + px`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default physical pixel edge used when deriving grid dimensions.
pub const DEFAULT_PIXEL_MICRONS: f64 = 70.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub cell_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPattern {
    pub image_id: String,
    pub points: Vec<Point>,
    /// Domain lengths `(l_x, l_y)`; the domain is `[0, l_x] x [0, l_y]`.
    pub extent: (f64, f64),
}

impl PointPattern {
    pub fn new(image_id: impl Into<String>, points: Vec<Point>, extent: (f64, f64)) -> Self {
        Self {
            image_id: image_id.into(),
            points,
            extent,
        }
    }

    /// Builds a pattern whose domain is the bounding box of `points`, shifted
    /// so the bottom-left corner sits at the origin.
    pub fn from_bounding_box(image_id: impl Into<String>, mut points: Vec<Point>) -> Result<Self> {
        let image_id = image_id.into();
        if points.is_empty() {
            return Err(Error::ZeroExtent {
                image_id,
                lx: 0.0,
                ly: 0.0,
            });
        }
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        for p in &mut points {
            p.x -= x0;
            p.y -= y0;
        }
        Ok(Self {
            image_id,
            points,
            extent: (x1 - x0, y1 - y0),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (lx, ly) = self.extent;
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::ZeroExtent {
                image_id: self.image_id.clone(),
                lx,
                ly,
            });
        }
        for (index, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.x <= lx && p.y >= 0.0 && p.y <= ly) {
                return Err(Error::PointOutsideDomain {
                    image_id: self.image_id.clone(),
                    index,
                    x: p.x,
                    y: p.y,
                });
            }
        }
        Ok(())
    }
}

/// Divides every pattern by the dataset-wide maximum axis length.
pub fn rescale_dataset(patterns: &[PointPattern]) -> Result<(Vec<PointPattern>, f64)> {
    if patterns.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut l_star: f64 = 0.0;
    for p in patterns {
        let (lx, ly) = p.extent;
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::ZeroExtent {
                image_id: p.image_id.clone(),
                lx,
                ly,
            });
        }
        l_star = l_star.max(lx).max(ly);
    }
    let scaled = patterns
        .iter()
        .map(|p| PointPattern {
            image_id: p.image_id.clone(),
            points: p
                .points
                .iter()
                .map(|pt| Point {
                    x: pt.x / l_star,
                    y: pt.y / l_star,
                    cell_type: pt.cell_type.clone(),
                })
                .collect(),
            extent: (p.extent.0 / l_star, p.extent.1 / l_star),
        })
        .collect();
    Ok((scaled, l_star))
}

/// Dataset-wide label order: lexicographic over label strings.
pub fn label_order(patterns: &[PointPattern]) -> Vec<String> {
    let set: BTreeSet<&str> = patterns
        .iter()
        .flat_map(|p| p.points.iter().map(|pt| pt.cell_type.as_str()))
        .collect();
    set.into_iter().map(str::to_owned).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_y: usize,
    /// `l*` in microns.
    pub scale: f64,
    /// Domain lengths in unit-scaled coordinates.
    pub extent: (f64, f64),
}

impl GridSpec {
    pub fn new(n_x: usize, n_y: usize, scale: f64, extent: (f64, f64)) -> Result<Self> {
        let g = Self {
            n_x,
            n_y,
            scale,
            extent,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid whose pixels are as close as possible to `pixel_microns` on a side.
    pub fn from_pixel_size(extent: (f64, f64), scale: f64, pixel_microns: f64) -> Result<Self> {
        if !(pixel_microns > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "pixel size must be positive, got {pixel_microns}"
            )));
        }
        let n = |l: f64| ((l * scale / pixel_microns).round() as usize).max(1);
        Self::new(n(extent.0), n(extent.1), scale, extent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::InvalidGrid(format!(
                "empty grid {}x{}",
                self.n_x, self.n_y
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidGrid(format!("scale {} <= 0", self.scale)));
        }
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "extent {:?} not positive",
                self.extent
            )));
        }
        Ok(())
    }

    pub fn n_px(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Pixel edge lengths in microns.
    pub fn pixel_size(&self) -> (f64, f64) {
        (
            self.extent.0 * self.scale / self.n_x as f64,
            self.extent.1 * self.scale / self.n_y as f64,
        )
    }

    pub fn pixel_index(&self, px: usize, py: usize) -> usize {
        py * self.n_x + px
    }

    pub fn pixel_xy(&self, p: usize) -> (usize, usize) {
        (p % self.n_x, p / self.n_x)
    }

    pub fn unit_center(&self, p: usize) -> [f64; 2] {
        let (px, py) = self.pixel_xy(p);
        [
            (px as f64 + 0.5) / self.n_x as f64 * self.extent.0,
            (py as f64 + 0.5) / self.n_y as f64 * self.extent.1,
        ]
    }

    pub fn unit_coords(&self) -> Vec<[f64; 2]> {
        (0..self.n_px()).map(|p| self.unit_center(p)).collect()
    }

    /// Pixel holding a unit-scaled point. Cells are half-open, except that the
    /// top and right domain edges are closed.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let (ex, ey) = self.extent;
        if !(x >= 0.0 && x <= ex && y >= 0.0 && y <= ey) {
            return None;
        }
        let cell = |v: f64, e: f64, n: usize| ((v / e * n as f64).floor() as usize).min(n - 1);
        Some(self.pixel_index(cell(x, ex, self.n_x), cell(y, ey, self.n_y)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountGrid {
    pub image_id: String,
    pub grid: GridSpec,
    pub q: usize,
    /// Pixel-major `n_px x q` counts.
    pub counts: Vec<u32>,
    /// `true` where the pixel is observed.
    pub mask: Vec<bool>,
}

impl CountGrid {
    pub fn zeros(image_id: impl Into<String>, grid: GridSpec, q: usize) -> Self {
        let n = grid.n_px();
        Self {
            image_id: image_id.into(),
            grid,
            q,
            counts: vec![0; n * q],
            mask: vec![true; n],
        }
    }

    pub fn n_px(&self) -> usize {
        self.grid.n_px()
    }

    pub fn count(&self, p: usize, j: usize) -> u32 {
        self.counts[p * self.q + j]
    }

    pub fn count_mut(&mut self, p: usize, j: usize) -> &mut u32 {
        &mut self.counts[p * self.q + j]
    }

    pub fn unit_coords(&self) -> Vec<[f64; 2]> {
        self.grid.unit_coords()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Per-type totals over observed pixels.
    pub fn observed_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.q];
        for p in 0..self.n_px() {
            if self.mask[p] {
                for (j, t) in totals.iter_mut().enumerate() {
                    *t += u64::from(self.count(p, j));
                }
            }
        }
        totals
    }
}

/// Counts points of each type per pixel. `labels` fixes the column order.
pub fn bin_pattern(pattern: &PointPattern, grid: &GridSpec, labels: &[String]) -> Result<CountGrid> {
    grid.validate()?;
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(j, l)| (l.as_str(), j))
        .collect();
    let mut out = CountGrid::zeros(pattern.image_id.clone(), *grid, labels.len());
    for (i, pt) in pattern.points.iter().enumerate() {
        let j = *index
            .get(pt.cell_type.as_str())
            .ok_or_else(|| Error::UnknownLabel(pt.cell_type.clone()))?;
        let p = grid
            .locate(pt.x, pt.y)
            .ok_or_else(|| Error::PointOutsideDomain {
                image_id: pattern.image_id.clone(),
                index: i,
                x: pt.x,
                y: pt.y,
            })?;
        *out.count_mut(p, j) += 1;
    }
    Ok(out)
}

/// Rescales `patterns` and bins them all on one grid covering the largest
/// extent on each axis, with pixels of about `pixel_microns`. Pixels lying
/// wholly outside an image's own domain are masked for that image; a point on
/// that domain's top or right edge goes to the last pixel inside it, so every
/// point lands in an observed pixel.
pub fn bin_dataset(patterns: &[PointPattern], pixel_microns: f64) -> Result<(Vec<CountGrid>, Vec<String>, GridSpec)> {
    for p in patterns {
        p.validate()?;
    }
    let (scaled, l_star) = rescale_dataset(patterns)?;
    let labels = label_order(&scaled);
    let extent = scaled
        .iter()
        .fold((0.0f64, 0.0f64), |(x, y), p| (x.max(p.extent.0), y.max(p.extent.1)));
    let grid = GridSpec::from_pixel_size(extent, l_star, pixel_microns)?;
    // pixels whose lower edge lies inside [0, e), with slivers below rounding ignored
    let inside = |e: f64, n: usize, total: f64| {
        (0..n)
            .take_while(|&i| (i as f64) / n as f64 * total < e * (1.0 - 1e-9))
            .count()
            .max(1)
    };
    let grids = scaled
        .iter()
        .map(|p| {
            let mut g = bin_pattern(p, &grid, &labels)?;
            let nx = inside(p.extent.0, grid.n_x, grid.extent.0);
            let ny = inside(p.extent.1, grid.n_y, grid.extent.1);
            for px in 0..grid.n_px() {
                let (x, y) = grid.pixel_xy(px);
                if x < nx && y < ny {
                    continue;
                }
                g.mask[px] = false;
                let to = grid.pixel_index(x.min(nx - 1), y.min(ny - 1));
                for j in 0..g.q {
                    let c = std::mem::take(g.count_mut(px, j));
                    *g.count_mut(to, j) += c;
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grids, labels, grid))
}

/// Marks `missing_pixels` as unobserved.
pub fn apply_mask(grid: &CountGrid, missing_pixels: &BTreeSet<usize>) -> Result<CountGrid> {
    let mut out = grid.clone();
    for &p in missing_pixels {
        if p >= out.n_px() {
            return Err(Error::InvalidGrid(format!(
                "masked pixel {p} out of range for {} pixels",
                out.n_px()
            )));
        }
        out.mask[p] = false;
    }
    Ok(out)
}
