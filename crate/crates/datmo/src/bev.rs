//! Point cloud to bird's-eye-view 2.5D grid conversion.
//!
//! Each cell of the grid is a grayscale value derived from the height
//! statistics of the points that project into it: a weighted combination of
//! mean and standard deviation of height, normalized by `h_max` and scaled
//! to 0..255. Cells stay real-valued internally; quantization to 8 bits
//! happens only where a consumer needs brightness (see [`BevGrid::to_u8`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;

/// Unordered 3D points in the sensor frame (x forward, y left, z up,
/// origin at the sensor).
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Geometry and value model of the BEV grid.
///
/// `origin_x`/`origin_y` are the coordinates of the *center* of cell (0, 0).
/// Cell (i, j) covers the half-open box
/// `[x_i - w/2, x_i + w/2) x [y_j - h/2, y_j + h/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell count along x.
    pub nx: usize,
    /// Cell count along y.
    pub ny: usize,
    /// Cell width along x, meters.
    pub cell_w: f64,
    /// Cell height along y, meters.
    pub cell_h: f64,
    /// Center of cell (0, 0), meters.
    pub origin_x: f64,
    pub origin_y: f64,
    /// Weight of the height mean in the cell value.
    pub mean_weight: f64,
    /// Weight of the height standard deviation in the cell value.
    pub std_weight: f64,
    /// Normalizing height, meters.
    pub h_max: f64,
    /// Cells with a value in (0, ground_threshold] are treated as ground.
    pub ground_threshold: f64,
    /// Added to every z before the height statistics. Set to the sensor
    /// mount height so that heights are measured from the road surface.
    pub z_offset: f64,
    /// Points with z + z_offset above this are discarded (overpasses,
    /// foliage). Meters.
    pub z_cap: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nx: 64,
            ny: 64,
            cell_w: 0.17,
            cell_h: 0.17,
            origin_x: 0.0,
            origin_y: 0.0,
            mean_weight: 1.0,
            std_weight: 1.0,
            h_max: 3.0,
            ground_threshold: 25.0,
            z_offset: 0.0,
            z_cap: 4.0,
        }
    }
}

impl GridSpec {
    /// Grid covering `[x_min, x_max) x [y_min, y_max)` at the given cell
    /// size. Cell counts are rounded up so the extent is fully covered.
    pub fn from_extent(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell: f64) -> Self {
        let nx = ((x_max - x_min) / cell).ceil().max(1.0) as usize;
        let ny = ((y_max - y_min) / cell).ceil().max(1.0) as usize;
        GridSpec {
            nx,
            ny,
            cell_w: cell,
            cell_h: cell,
            origin_x: x_min + cell / 2.0,
            origin_y: y_min + cell / 2.0,
            ..GridSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("grid must have at least one cell".into()));
        }
        if !(self.cell_w > 0.0) || !(self.cell_h > 0.0) {
            return Err(Error::Config("cell dimensions must be positive".into()));
        }
        if !(self.h_max > 0.0) {
            return Err(Error::Config("h_max must be positive".into()));
        }
        if self.ground_threshold < 0.0 || self.ground_threshold > 255.0 {
            return Err(Error::Config("ground_threshold must be in [0, 255]".into()));
        }
        Ok(())
    }

    /// Center coordinates of cell (i, j).
    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + i as f64 * self.cell_w,
            self.origin_y + j as f64 * self.cell_h,
        )
    }
}

/// The 2.5D grid: real-valued grayscale in [0, 255], 0 = no point.
#[derive(Debug, Clone)]
pub struct BevGrid {
    pub values: Grid2<f64>,
    pub spec: GridSpec,
    pub timestamp: f64,
}

impl BevGrid {
    /// Quantize to 8-bit brightness, rounding half up.
    pub fn to_u8(&self) -> Grid2<u8> {
        self.values
            .map(|v| (v + 0.5).floor().clamp(0.0, 255.0) as u8)
    }
}

/// Map a point to its cell per the half-open interval condition, or `None`
/// if the point falls outside the grid extent.
#[inline]
pub fn cell_of_point(p: &[f64; 3], spec: &GridSpec) -> Option<(usize, usize)> {
    // i is the unique integer with p_x in [x_i - w/2, x_i + w/2).
    let fi = ((p[0] - spec.origin_x) / spec.cell_w + 0.5).floor();
    let fj = ((p[1] - spec.origin_y) / spec.cell_h + 0.5).floor();
    if fi < 0.0 || fj < 0.0 || fi >= spec.nx as f64 || fj >= spec.ny as f64 {
        return None;
    }
    Some((fi as usize, fj as usize))
}

/// Rasterize a point cloud into the BEV grid.
///
/// Cell value: `255 * (a*mean(h) + b*std(h)) / h_max`, clamped to [0, 255],
/// where `h = z + z_offset` over the points mapped to the cell. Population
/// standard deviation, so a single point has std 0. Points above `z_cap`
/// are discarded.
pub fn rasterize(cloud: &PointCloud, spec: &GridSpec, timestamp: f64) -> Result<BevGrid> {
    spec.validate()?;
    // Welford-free two-accumulator form: sum and sum of squares per cell.
    let mut count: Grid2<u32> = Grid2::filled(spec.nx, spec.ny, 0);
    let mut sum: Grid2<f64> = Grid2::filled(spec.nx, spec.ny, 0.0);
    let mut sum_sq: Grid2<f64> = Grid2::filled(spec.nx, spec.ny, 0.0);

    for p in &cloud.points {
        let h = p[2] + spec.z_offset;
        if h > spec.z_cap {
            continue;
        }
        if let Some((i, j)) = cell_of_point(p, spec) {
            *count.get_mut(i, j) += 1;
            *sum.get_mut(i, j) += h;
            *sum_sq.get_mut(i, j) += h * h;
        }
    }

    let mut values = Grid2::filled(spec.nx, spec.ny, 0.0);
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            let n = *count.get(i, j);
            if n == 0 {
                continue;
            }
            let n = n as f64;
            let mean = *sum.get(i, j) / n;
            let var = (*sum_sq.get(i, j) / n - mean * mean).max(0.0);
            let raw = (spec.mean_weight * mean + spec.std_weight * var.sqrt()) / spec.h_max;
            values[(i, j)] = (255.0 * raw).clamp(0.0, 255.0);
        }
    }

    Ok(BevGrid {
        values,
        spec: spec.clone(),
        timestamp,
    })
}

/// Zero every cell whose value lies in (0, ground_threshold].
pub fn remove_ground(grid: &BevGrid) -> BevGrid {
    let t = grid.spec.ground_threshold;
    let values = grid
        .values
        .map(|&v| if v > 0.0 && v <= t { 0.0 } else { v });
    BevGrid {
        values,
        spec: grid.spec.clone(),
        timestamp: grid.timestamp,
    }
}

/// 10x10 unit-cell spec for tests across the crate.
#[cfg(test)]
pub(crate) fn tests_spec() -> GridSpec {
    GridSpec {
        nx: 10,
        ny: 10,
        cell_w: 1.0,
        cell_h: 1.0,
        origin_x: 0.0,
        origin_y: 0.0,
        mean_weight: 1.0,
        std_weight: 1.0,
        h_max: 2.0,
        ground_threshold: 25.0,
        z_offset: 0.0,
        z_cap: 4.0,
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_point() -> impl Strategy<Value = [f64; 3]> {
        // Nonnegative heights: the value model measures height above the
        // road surface.
        (-2.0..12.0f64, -2.0..12.0f64, 0.0..3.9f64).prop_map(|(x, y, z)| [x, y, z])
    }

    proptest! {
        #[test]
        fn every_in_extent_point_maps_to_exactly_one_cell(p in arb_point()) {
            let spec = tests::small_spec();
            if let Some((i, j)) = cell_of_point(&p, &spec) {
                // Half-open interval membership of the reported cell.
                let (cx, cy) = spec.cell_center(i, j);
                prop_assert!(p[0] >= cx - spec.cell_w / 2.0 && p[0] < cx + spec.cell_w / 2.0);
                prop_assert!(p[1] >= cy - spec.cell_h / 2.0 && p[1] < cy + spec.cell_h / 2.0);
                // No neighboring cell also contains it.
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= spec.nx as i64 || nj >= spec.ny as i64 {
                            continue;
                        }
                        let (cx, cy) = spec.cell_center(ni as usize, nj as usize);
                        let inside = p[0] >= cx - spec.cell_w / 2.0
                            && p[0] < cx + spec.cell_w / 2.0
                            && p[1] >= cy - spec.cell_h / 2.0
                            && p[1] < cy + spec.cell_h / 2.0;
                        prop_assert!(!inside);
                    }
                }
            }
        }

        #[test]
        fn adding_a_point_never_zeroes_a_nonzero_cell(
            pts in proptest::collection::vec(arb_point(), 1..40),
            extra in arb_point(),
        ) {
            let spec = tests::small_spec();
            let before = rasterize(&PointCloud::new(pts.clone()), &spec, 0.0).unwrap();
            let mut with_extra = pts;
            with_extra.push(extra);
            let after = rasterize(&PointCloud::new(with_extra), &spec, 0.0).unwrap();
            for (a, b) in before.values.data().iter().zip(after.values.data()) {
                prop_assert!(!(*a > 0.0 && *b == 0.0));
            }
        }

        #[test]
        fn rasterize_values_bounded(pts in proptest::collection::vec(arb_point(), 0..60)) {
            let spec = tests::small_spec();
            let g = rasterize(&PointCloud::new(pts), &spec, 0.0).unwrap();
            prop_assert!(g.values.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }
}
