//! Dense optical flow between consecutive BEV grids.
//!
//! Farneback's method, implemented from scratch: every neighborhood of the
//! brightness grid is approximated by a quadratic polynomial
//! `f(x) = x'Ax + b'x + c` fitted under a Gaussian applicability weight
//! (separable correlations), and the displacement between two frames is
//! recovered from the shift of those polynomials, refined coarse-to-fine
//! over an image pyramid.
//!
//! All arithmetic is f64 and strictly sequential, so results are
//! reproducible bit for bit.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bev::{BevGrid, GridSpec};
use crate::error::{Error, Result};
use crate::grid::Grid2;

/// Brightness below this counts as unoccupied for certainty weighting.
const CERTAINTY_EPS: f64 = 1e-6;

/// Regularizer added to the determinant of the averaged 2x2 system, same
/// order as OpenCV's. Keeps empty regions at zero displacement.
const DET_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub num_pyramid_levels: usize,
    /// Per-level size ratio in (0, 1).
    pub pyramid_scale: f64,
    /// Refinement iterations at each level.
    pub num_iterations: usize,
    /// Odd window size of the polynomial expansion.
    pub neighborhood_size: usize,
    /// Odd window size of the displacement averaging filter.
    pub filter_size: usize,
    /// Std dev (cells) of the Gaussian applicability for the expansion.
    pub applicability_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            num_pyramid_levels: 3,
            pyramid_scale: 0.5,
            num_iterations: 3,
            neighborhood_size: 3,
            filter_size: 11,
            applicability_sigma: 0.8,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_pyramid_levels == 0 {
            return Err(Error::Config("num_pyramid_levels must be >= 1".into()));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::Config("pyramid_scale must be in (0, 1)".into()));
        }
        if self.num_iterations == 0 {
            return Err(Error::Config("num_iterations must be >= 1".into()));
        }
        if self.neighborhood_size < 3 || self.neighborhood_size % 2 == 0 {
            return Err(Error::Config(
                "neighborhood_size must be odd and >= 3".into(),
            ));
        }
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return Err(Error::Config("filter_size must be odd and >= 1".into()));
        }
        if !(self.applicability_sigma > 0.0) {
            return Err(Error::Config("applicability_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-cell displacement mapping the previous grid onto the current one,
/// in cells per frame.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub dx: Grid2<f64>,
    pub dy: Grid2<f64>,
    /// False in the border band where the expansion window was truncated.
    pub valid: Grid2<bool>,
}

/// Quadratic expansion coefficients per cell:
/// `f(x, y) = c + bx*x + by*y + axx*x^2 + 2*axy*x*y + ayy*y^2`.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub axx: Grid2<f64>,
    pub axy: Grid2<f64>,
    pub ayy: Grid2<f64>,
    pub bx: Grid2<f64>,
    pub by: Grid2<f64>,
    pub c: Grid2<f64>,
}

/// Correlate along the i axis with a small symmetric-support kernel,
/// replicating edge values.
fn correlate_i(src: &Grid2<f64>, kernel: &[f64]) -> Grid2<f64> {
    let r = kernel.len() / 2;
    let (nx, ny) = (src.nx(), src.ny());
    let mut out = Grid2::filled(nx, ny, 0.0);
    for i in 0..nx {
        for (t, &k) in kernel.iter().enumerate() {
            let ii = (i as i64 + t as i64 - r as i64).clamp(0, nx as i64 - 1) as usize;
            for j in 0..ny {
                out[(i, j)] += k * src[(ii, j)];
            }
        }
    }
    out
}

/// Correlate along the j axis, replicating edge values.
fn correlate_j(src: &Grid2<f64>, kernel: &[f64]) -> Grid2<f64> {
    let r = kernel.len() / 2;
    let (nx, ny) = (src.nx(), src.ny());
    let mut out = Grid2::filled(nx, ny, 0.0);
    for i in 0..nx {
        for j in 0..ny {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let jj = (j as i64 + t as i64 - r as i64).clamp(0, ny as i64 - 1) as usize;
                acc += k * src[(i, jj)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Fit the quadratic model at every cell by Gaussian-weighted least squares,
/// evaluated with separable correlations.
pub fn polynomial_expansion(brightness: &Grid2<f64>, params: &FlowParams) -> Result<PolyExpansion> {
    params.validate()?;
    let n = (params.neighborhood_size - 1) / 2;
    if brightness.nx() < params.neighborhood_size || brightness.ny() < params.neighborhood_size {
        return Err(Error::Config(format!(
            "grid {}x{} smaller than expansion neighborhood {}",
            brightness.nx(),
            brightness.ny(),
            params.neighborhood_size
        )));
    }

    // 1D applicability kernels over t = -n..n: w, w*t, w*t^2.
    let sigma = params.applicability_sigma;
    let mut k0 = Vec::with_capacity(2 * n + 1);
    let mut k1 = Vec::with_capacity(2 * n + 1);
    let mut k2 = Vec::with_capacity(2 * n + 1);
    for t in -(n as i64)..=(n as i64) {
        let t = t as f64;
        let w = (-t * t / (2.0 * sigma * sigma)).exp();
        k0.push(w);
        k1.push(w * t);
        k2.push(w * t * t);
    }
    let s0: f64 = k0.iter().sum();
    let s2: f64 = k2.iter().sum();
    let s4: f64 = k0
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let t = idx as f64 - n as f64;
            w * t * t * t * t
        })
        .sum();

    // Separable correlations: first along j, then along i.
    let j0 = correlate_j(brightness, &k0);
    let j1 = correlate_j(brightness, &k1);
    let j2 = correlate_j(brightness, &k2);
    let c00 = correlate_i(&j0, &k0);
    let c01 = correlate_i(&j1, &k0);
    let c02 = correlate_i(&j2, &k0);
    let c10 = correlate_i(&j0, &k1);
    let c11 = correlate_i(&j1, &k1);
    let c20 = correlate_i(&j0, &k2);

    // Normal-equation structure: {x}, {y}, {xy} decouple; {1, x^2, y^2}
    // couple through a constant 3x3 system.
    let m = Matrix3::new(
        s0 * s0,
        s2 * s0,
        s0 * s2,
        s2 * s0,
        s4 * s0,
        s2 * s2,
        s0 * s2,
        s2 * s2,
        s0 * s4,
    );
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular expansion normal matrix".into()))?;
    let inv_bx = 1.0 / (s2 * s0);
    let inv_xy = 1.0 / (s2 * s2);

    let (nx, ny) = (brightness.nx(), brightness.ny());
    let mut exp = PolyExpansion {
        axx: Grid2::filled(nx, ny, 0.0),
        axy: Grid2::filled(nx, ny, 0.0),
        ayy: Grid2::filled(nx, ny, 0.0),
        bx: Grid2::filled(nx, ny, 0.0),
        by: Grid2::filled(nx, ny, 0.0),
        c: Grid2::filled(nx, ny, 0.0),
    };
    for i in 0..nx {
        for j in 0..ny {
            let sol = m_inv * Vector3::new(c00[(i, j)], c20[(i, j)], c02[(i, j)]);
            exp.c[(i, j)] = sol[0];
            exp.axx[(i, j)] = sol[1];
            exp.ayy[(i, j)] = sol[2];
            exp.bx[(i, j)] = c10[(i, j)] * inv_bx;
            exp.by[(i, j)] = c01[(i, j)] * inv_bx;
            // Coefficient of x*y is c11/s2^2; A's off-diagonal is half of it.
            exp.axy[(i, j)] = 0.5 * c11[(i, j)] * inv_xy;
        }
    }
    Ok(exp)
}

/// Bilinear lookup with clamped coordinates.
#[inline]
fn sample(grid: &Grid2<f64>, x: f64, y: f64) -> f64 {
    let nx = grid.nx();
    let ny = grid.ny();
    let x = x.clamp(0.0, (nx - 1) as f64);
    let y = y.clamp(0.0, (ny - 1) as f64);
    let i0 = (x.floor() as usize).min(nx.saturating_sub(2));
    let j0 = (y.floor() as usize).min(ny.saturating_sub(2));
    let i0 = if nx == 1 { 0 } else { i0 };
    let j0 = if ny == 1 { 0 } else { j0 };
    let fx = x - i0 as f64;
    let fy = y - j0 as f64;
    let i1 = (i0 + 1).min(nx - 1);
    let j1 = (j0 + 1).min(ny - 1);
    let v00 = grid[(i0, j0)];
    let v01 = grid[(i0, j1)];
    let v10 = grid[(i1, j0)];
    let v11 = grid[(i1, j1)];
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * (1.0 - fx) * fy + v10 * fx * (1.0 - fy) + v11 * fx * fy
}

/// Sliding-window box sum along i (zero padding outside).
fn box_sum_i(src: &Grid2<f64>, size: usize) -> Grid2<f64> {
    let r = (size / 2) as i64;
    let (nx, ny) = (src.nx(), src.ny());
    let mut out = Grid2::filled(nx, ny, 0.0);
    for j in 0..ny {
        let mut acc = 0.0;
        for i in 0..(r as usize).min(nx) {
            acc += src[(i, j)];
        }
        for i in 0..nx {
            let enter = i as i64 + r;
            if enter < nx as i64 {
                acc += src[(enter as usize, j)];
            }
            out[(i, j)] = acc;
            let leave = i as i64 - r;
            if leave >= 0 {
                acc -= src[(leave as usize, j)];
            }
        }
    }
    out
}

/// Sliding-window box sum along j (zero padding outside).
fn box_sum_j(src: &Grid2<f64>, size: usize) -> Grid2<f64> {
    let r = (size / 2) as i64;
    let (nx, ny) = (src.nx(), src.ny());
    let mut out = Grid2::filled(nx, ny, 0.0);
    for i in 0..nx {
        let mut acc = 0.0;
        for j in 0..(r as usize).min(ny) {
            acc += src[(i, j)];
        }
        for j in 0..ny {
            let enter = j as i64 + r;
            if enter < ny as i64 {
                acc += src[(i, enter as usize)];
            }
            out[(i, j)] = acc;
            let leave = j as i64 - r;
            if leave >= 0 {
                acc -= src[(i, leave as usize)];
            }
        }
    }
    out
}

fn box_sum(src: &Grid2<f64>, size: usize) -> Grid2<f64> {
    box_sum_j(&box_sum_i(src, size), size)
}

/// One displacement refinement pass at a single pyramid level.
///
/// `d` holds the current estimate (also the warp applied to the second
/// expansion); returns the updated estimate.
fn flow_iteration(
    e1: &PolyExpansion,
    e2: &PolyExpansion,
    d: &DisplacementField,
    certainty: &Grid2<f64>,
    params: &FlowParams,
) -> DisplacementField {
    let (nx, ny) = (e1.c.nx(), e1.c.ny());
    let mut g11 = Grid2::filled(nx, ny, 0.0);
    let mut g12 = Grid2::filled(nx, ny, 0.0);
    let mut g22 = Grid2::filled(nx, ny, 0.0);
    let mut h1 = Grid2::filled(nx, ny, 0.0);
    let mut h2 = Grid2::filled(nx, ny, 0.0);

    for i in 0..nx {
        for j in 0..ny {
            let w = certainty[(i, j)];
            if w == 0.0 {
                continue;
            }
            let dx = d.dx[(i, j)];
            let dy = d.dy[(i, j)];
            let xs = i as f64 + dx;
            let ys = j as f64 + dy;

            let a11 = 0.5 * (e1.axx[(i, j)] + sample(&e2.axx, xs, ys));
            let a12 = 0.5 * (e1.axy[(i, j)] + sample(&e2.axy, xs, ys));
            let a22 = 0.5 * (e1.ayy[(i, j)] + sample(&e2.ayy, xs, ys));
            let db1 = -0.5 * (sample(&e2.bx, xs, ys) - e1.bx[(i, j)]) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (sample(&e2.by, xs, ys) - e1.by[(i, j)]) + a12 * dx + a22 * dy;

            // G = A'A, h = A'db (A symmetric).
            g11[(i, j)] = w * (a11 * a11 + a12 * a12);
            g12[(i, j)] = w * (a12 * (a11 + a22));
            g22[(i, j)] = w * (a12 * a12 + a22 * a22);
            h1[(i, j)] = w * (a11 * db1 + a12 * db2);
            h2[(i, j)] = w * (a12 * db1 + a22 * db2);
        }
    }

    let g11 = box_sum(&g11, params.filter_size);
    let g12 = box_sum(&g12, params.filter_size);
    let g22 = box_sum(&g22, params.filter_size);
    let h1 = box_sum(&h1, params.filter_size);
    let h2 = box_sum(&h2, params.filter_size);

    let mut out = DisplacementField {
        dx: Grid2::filled(nx, ny, 0.0),
        dy: Grid2::filled(nx, ny, 0.0),
        valid: d.valid.clone(),
    };
    for i in 0..nx {
        for j in 0..ny {
            let det = g11[(i, j)] * g22[(i, j)] - g12[(i, j)] * g12[(i, j)] + DET_EPS;
            out.dx[(i, j)] = (g22[(i, j)] * h1[(i, j)] - g12[(i, j)] * h2[(i, j)]) / det;
            out.dy[(i, j)] = (g11[(i, j)] * h2[(i, j)] - g12[(i, j)] * h1[(i, j)]) / det;
        }
    }
    out
}

/// Gaussian blur for pyramid construction (sigma = 1 cell, radius 3).
fn gaussian_blur(src: &Grid2<f64>) -> Grid2<f64> {
    const SIGMA: f64 = 1.0;
    let r = 3usize;
    let mut k = Vec::with_capacity(2 * r + 1);
    for t in -(r as i64)..=(r as i64) {
        let t = t as f64;
        k.push((-t * t / (2.0 * SIGMA * SIGMA)).exp());
    }
    let norm: f64 = k.iter().sum();
    for v in &mut k {
        *v /= norm;
    }
    correlate_j(&correlate_i(src, &k), &k)
}

/// Bilinear resample to a new shape, pixel-center aligned.
fn resample(src: &Grid2<f64>, nx: usize, ny: usize) -> Grid2<f64> {
    let sx = src.nx() as f64 / nx as f64;
    let sy = src.ny() as f64 / ny as f64;
    let mut out = Grid2::filled(nx, ny, 0.0);
    for i in 0..nx {
        let x = (i as f64 + 0.5) * sx - 0.5;
        for j in 0..ny {
            let y = (j as f64 + 0.5) * sy - 0.5;
            out[(i, j)] = sample(src, x, y);
        }
    }
    out
}

/// Estimate dense displacement mapping `prev` onto `curr`.
///
/// `prior`, when given, warm-starts the coarsest pyramid level (e.g. with
/// the previous frame's field).
pub fn estimate_flow(
    prev: &BevGrid,
    curr: &BevGrid,
    params: &FlowParams,
    prior: Option<&DisplacementField>,
) -> Result<DisplacementField> {
    params.validate()?;
    if prev.spec != curr.spec {
        return Err(Error::Contract(
            "estimate_flow requires both grids to share a GridSpec".into(),
        ));
    }
    let base_prev = prev.to_u8().map(|&v| v as f64);
    let base_curr = curr.to_u8().map(|&v| v as f64);
    let (nx, ny) = (base_prev.nx(), base_prev.ny());
    let min_dim = params.neighborhood_size.max(5);
    if nx < min_dim || ny < min_dim {
        return Err(Error::Config(format!(
            "grid {nx}x{ny} too small for flow (need at least {min_dim} per side)"
        )));
    }

    // Build pyramids; stop early if a level would get too small.
    let mut pyr_prev = vec![base_prev];
    let mut pyr_curr = vec![base_curr];
    for _ in 1..params.num_pyramid_levels {
        let last = pyr_prev.last().unwrap();
        let cnx = (last.nx() as f64 * params.pyramid_scale).round() as usize;
        let cny = (last.ny() as f64 * params.pyramid_scale).round() as usize;
        if cnx < min_dim || cny < min_dim {
            break;
        }
        pyr_prev.push(resample(&gaussian_blur(pyr_prev.last().unwrap()), cnx, cny));
        pyr_curr.push(resample(&gaussian_blur(pyr_curr.last().unwrap()), cnx, cny));
    }

    let levels = pyr_prev.len();
    let coarsest = levels - 1;
    let (cnx, cny) = (pyr_prev[coarsest].nx(), pyr_prev[coarsest].ny());
    let mut d = DisplacementField {
        dx: Grid2::filled(cnx, cny, 0.0),
        dy: Grid2::filled(cnx, cny, 0.0),
        valid: Grid2::filled(cnx, cny, true),
    };
    if let Some(p) = prior {
        if p.dx.nx() == nx && p.dx.ny() == ny {
            d.dx = resample(&p.dx, cnx, cny).map(|v| v * cnx as f64 / nx as f64);
            d.dy = resample(&p.dy, cnx, cny).map(|v| v * cny as f64 / ny as f64);
        }
    }

    for level in (0..levels).rev() {
        let lp = &pyr_prev[level];
        let lc = &pyr_curr[level];
        let e1 = polynomial_expansion(lp, params)?;
        let e2 = polynomial_expansion(lc, params)?;
        // Zero weight for cells unoccupied in both frames.
        let mut certainty = Grid2::filled(lp.nx(), lp.ny(), 0.0);
        for i in 0..lp.nx() {
            for j in 0..lp.ny() {
                if lp[(i, j)] > CERTAINTY_EPS || lc[(i, j)] > CERTAINTY_EPS {
                    certainty[(i, j)] = 1.0;
                }
            }
        }
        for _ in 0..params.num_iterations {
            d = flow_iteration(&e1, &e2, &d, &certainty, params);
        }
        if level > 0 {
            let (fnx, fny) = (pyr_prev[level - 1].nx(), pyr_prev[level - 1].ny());
            let rx = fnx as f64 / d.dx.nx() as f64;
            let ry = fny as f64 / d.dy.ny() as f64;
            d = DisplacementField {
                dx: resample(&d.dx, fnx, fny).map(|v| v * rx),
                dy: resample(&d.dy, fnx, fny).map(|v| v * ry),
                valid: Grid2::filled(fnx, fny, true),
            };
        }
    }

    // Invalidate the border band where the expansion window is truncated.
    let band = params.neighborhood_size / 2;
    for i in 0..nx {
        for j in 0..ny {
            if i < band || j < band || i >= nx - band || j >= ny - band {
                d.valid[(i, j)] = false;
            }
        }
    }
    Ok(d)
}

/// Convert displacement (cells/frame) to planar velocity (m/s).
pub fn displacement_to_velocity(
    field: &DisplacementField,
    spec: &GridSpec,
    dt: f64,
) -> Result<(Grid2<f64>, Grid2<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::Contract("displacement_to_velocity needs dt > 0".into()));
    }
    let vx = field.dx.map(|d| d * spec.cell_w / dt);
    let vy = field.dy.map(|d| d * spec.cell_h / dt);
    Ok((vx, vy))
}

/// Debug dump: `i,j,dx,dy,valid` per line.
pub fn write_displacement_csv(path: &std::path::Path, field: &DisplacementField) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "i,j,dx,dy,valid").map_err(|e| Error::io(path.display().to_string(), e))?;
    for ((i, j), dx) in field.dx.enumerate() {
        writeln!(
            w,
            "{},{},{},{},{}",
            i,
            j,
            dx,
            field.dy[(i, j)],
            u8::from(field.valid[(i, j)])
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
