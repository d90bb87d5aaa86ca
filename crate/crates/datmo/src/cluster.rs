//! Group surviving moving cells into per-object clusters and compute the
//! measurement features fed to the tracker.

use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::vfield::FlowField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Single-linkage distance between cell centers, meters.
    pub link_distance: f64,
    /// Clusters with fewer member cells are discarded.
    pub min_cells: usize,
    /// Compensated-speed threshold that marks a cell as moving, m/s.
    pub min_speed: f64,
    /// Apparent-speed threshold, m/s. Cells whose raw flow reads (close
    /// to) zero are patterns locked to the scan sampling rather than to a
    /// moving surface; they are not clustered.
    pub min_rel_speed: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            link_distance: 1.2,
            min_cells: 4,
            min_speed: 1.0,
            min_rel_speed: 1.0,
        }
    }
}

/// A connected group of moving cells.
///
/// `mean_v` and `mean_omega` average the field handed to
/// [`cluster_cells`]; in the pipeline that is the masked flow field, so
/// they are apparent (ego-frame) velocities.
#[derive(Debug, Clone, Serialize)]
pub struct Cluster {
    pub cells: Vec<(usize, usize)>,
    /// Mean cell-center position, meters, EV frame.
    pub centroid: (f64, f64),
    pub mean_v: (f64, f64),
    pub mean_omega: f64,
    /// Eigenvalues of the positional covariance, `lambda.0 >= lambda.1 >= 0`.
    pub lambda: (f64, f64),
    pub timestamp: f64,
}

/// Eigenvalues of the 2x2 population covariance of a point set, largest
/// first.
pub fn shape_eigenvalues(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p.0 - mx;
        let dy = p.1 - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    sxx /= n;
    sxy /= n;
    syy /= n;
    let mid = 0.5 * (sxx + syy);
    let half = (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
    ((mid + half).max(0.0), (mid - half).max(0.0))
}

/// Single-linkage clustering of candidate cells.
///
/// Two cells are connected iff the Euclidean distance between their centers
/// is at most `link_distance`; connectivity is explored over the grid
/// neighborhood of radius `ceil(link/cell)` so the result equals Euclidean
/// single linkage at grid resolution. Clusters smaller than `min_cells`
/// are dropped. The caller selects the candidate cells (occupied, masked,
/// moving).
pub fn cluster_cells(
    field: &FlowField,
    spec: &GridSpec,
    params: &ClusterParams,
    candidates: &Grid2<bool>,
) -> Result<Vec<Cluster>> {
    if !(params.link_distance > 0.0) {
        return Err(Error::Config("link_distance must be positive".into()));
    }
    if !candidates.same_shape(&field.vx) {
        return Err(Error::Contract("candidate grid shape mismatch".into()));
    }
    let (nx, ny) = (field.nx(), field.ny());
    let ri = (params.link_distance / spec.cell_w).ceil() as i64;
    let rj = (params.link_distance / spec.cell_h).ceil() as i64;
    let link_sq = params.link_distance * params.link_distance;

    let mut visited = Grid2::filled(nx, ny, false);
    let mut clusters = Vec::new();
    let mut queue = std::collections::VecDeque::new();

    for si in 0..nx {
        for sj in 0..ny {
            if !candidates[(si, sj)] || visited[(si, sj)] {
                continue;
            }
            visited[(si, sj)] = true;
            queue.push_back((si, sj));
            let mut members = Vec::new();
            while let Some((i, j)) = queue.pop_front() {
                members.push((i, j));
                for di in -ri..=ri {
                    for dj in -rj..=rj {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let dist_sq = (di as f64 * spec.cell_w) * (di as f64 * spec.cell_w)
                            + (dj as f64 * spec.cell_h) * (dj as f64 * spec.cell_h);
                        if dist_sq > link_sq {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= nx as i64 || nj >= ny as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if candidates[(ni, nj)] && !visited[(ni, nj)] {
                            visited[(ni, nj)] = true;
                            queue.push_back((ni, nj));
                        }
                    }
                }
            }
            if members.len() < params.min_cells {
                continue;
            }
            members.sort_unstable();
            let n = members.len() as f64;
            let mut cx = 0.0;
            let mut cy = 0.0;
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut om = 0.0;
            let mut pts = Vec::with_capacity(members.len());
            for &(i, j) in &members {
                let (x, y) = spec.cell_center(i, j);
                pts.push((x, y));
                cx += x;
                cy += y;
                vx += field.vx[(i, j)];
                vy += field.vy[(i, j)];
                om += field.omega[(i, j)];
            }
            let lambda = shape_eigenvalues(&pts);
            clusters.push(Cluster {
                cells: members,
                centroid: (cx / n, cy / n),
                mean_v: (vx / n, vy / n),
                mean_omega: om / n,
                lambda,
                timestamp: field.timestamp,
            });
        }
    }
    Ok(clusters)
}

/// Association feature: mean position plus orientation-free shape.
pub fn feature_vector(c: &Cluster) -> [f64; 4] {
    [c.centroid.0, c.centroid.1, c.lambda.0, c.lambda.1]
}

/// Cluster dump as JSON lines.
pub fn write_clusters_jsonl(path: &std::path::Path, clusters: &[Cluster]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for c in clusters {
        let line = serde_json::json!({
            "frame": c.timestamp,
            "cells": c.cells,
            "centroid": [c.centroid.0, c.centroid.1],
            "mean_v": [c.mean_v.0, c.mean_v.1],
            "mean_omega": c.mean_omega,
            "lambda": [c.lambda.0, c.lambda.1],
        });
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
