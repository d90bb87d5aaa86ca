//! Velocity vector field over the BEV grid: curl-derived yaw rate,
//! rigid-body continuity mask, temporal propagation mask, ego-motion
//! compensation.
//!
//! The field velocities are as measured by the flow, i.e. apparent motion
//! in the (rotating) ego frame. For rigid planar motion the cellwise yaw
//! rate is half the curl of the linear velocity field.

use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::track::EgoState;

/// Per-cell planar velocity [m/s], yaw rate [rad/s] and occupancy.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub vx: Grid2<f64>,
    pub vy: Grid2<f64>,
    pub omega: Grid2<f64>,
    /// True where the source BEV grid had a nonzero cell.
    pub occupancy: Grid2<bool>,
    pub timestamp: f64,
}

impl FlowField {
    /// Assemble a field; the yaw rate grid is derived as half the curl of
    /// (vx, vy).
    pub fn new(
        vx: Grid2<f64>,
        vy: Grid2<f64>,
        occupancy: Grid2<bool>,
        spec: &GridSpec,
        timestamp: f64,
    ) -> Result<Self> {
        if !vx.same_shape(&vy) || !vx.same_shape(&occupancy) {
            return Err(Error::Contract("flow field grids must be conformable".into()));
        }
        let omega = curl_half(&vx, &vy, spec);
        Ok(FlowField {
            vx,
            vy,
            omega,
            occupancy,
            timestamp,
        })
    }

    pub fn nx(&self) -> usize {
        self.vx.nx()
    }

    pub fn ny(&self) -> usize {
        self.vx.ny()
    }
}

/// Thresholds for the two masking layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Propagation tolerance, m/s.
    pub alpha_p: f64,
    /// Continuity tolerance (applies to both the divergence and the
    /// curl-gradient condition).
    pub alpha_cont: f64,
    /// Frame interval, seconds.
    pub dt: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            alpha_p: 2.5,
            alpha_cont: 4.0,
            dt: 0.1,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_p > 0.0) || !(self.alpha_cont > 0.0) {
            return Err(Error::Config("mask thresholds must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(())
    }
}

/// Boolean mask conformable with a flow field.
#[derive(Debug, Clone)]
pub struct MaskGrid {
    pub bits: Grid2<bool>,
}

/// d/dx of a scalar grid: central differences inside, one-sided at the i
/// borders, spacing `cell_w`.
fn ddx(g: &Grid2<f64>, spec: &GridSpec) -> Grid2<f64> {
    let (nx, ny) = (g.nx(), g.ny());
    let w = spec.cell_w;
    let mut out = Grid2::filled(nx, ny, 0.0);
    for i in 0..nx {
        for j in 0..ny {
            out[(i, j)] = if nx == 1 {
                0.0
            } else if i == 0 {
                (g[(1, j)] - g[(0, j)]) / w
            } else if i == nx - 1 {
                (g[(nx - 1, j)] - g[(nx - 2, j)]) / w
            } else {
                (g[(i + 1, j)] - g[(i - 1, j)]) / (2.0 * w)
            };
        }
    }
    out
}

/// d/dy of a scalar grid (j axis, spacing `cell_h`).
fn ddy(g: &Grid2<f64>, spec: &GridSpec) -> Grid2<f64> {
    let (nx, ny) = (g.nx(), g.ny());
    let h = spec.cell_h;
    let mut out = Grid2::filled(nx, ny, 0.0);
    for i in 0..nx {
        for j in 0..ny {
            out[(i, j)] = if ny == 1 {
                0.0
            } else if j == 0 {
                (g[(i, 1)] - g[(i, 0)]) / h
            } else if j == ny - 1 {
                (g[(i, ny - 1)] - g[(i, ny - 2)]) / h
            } else {
                (g[(i, j + 1)] - g[(i, j - 1)]) / (2.0 * h)
            };
        }
    }
    out
}

/// Half the curl of the planar velocity field: the cellwise yaw rate of a
/// rigid body sampled on the grid.
pub fn curl_half(vx: &Grid2<f64>, vy: &Grid2<f64>, spec: &GridSpec) -> Grid2<f64> {
    let dvy_dx = ddx(vy, spec);
    let dvx_dy = ddy(vx, spec);
    let mut out = Grid2::filled(vx.nx(), vx.ny(), 0.0);
    for i in 0..vx.nx() {
        for j in 0..vx.ny() {
            out[(i, j)] = 0.5 * (dvy_dx[(i, j)] - dvx_dy[(i, j)]);
        }
    }
    out
}

/// Divergence of the planar velocity field.
pub fn divergence(vx: &Grid2<f64>, vy: &Grid2<f64>, spec: &GridSpec) -> Grid2<f64> {
    let dvx_dx = ddx(vx, spec);
    let dvy_dy = ddy(vy, spec);
    let mut out = Grid2::filled(vx.nx(), vx.ny(), 0.0);
    for i in 0..vx.nx() {
        for j in 0..vx.ny() {
            out[(i, j)] = dvx_dx[(i, j)] + dvy_dy[(i, j)];
        }
    }
    out
}

/// Rigid-body continuity mask: a cell passes iff the field around it is
/// divergence-free and rotates as one body (spatially constant curl).
pub fn continuity_mask(field: &FlowField, spec: &GridSpec, params: &MaskParams) -> MaskGrid {
    let div = divergence(&field.vx, &field.vy, spec);
    // curl = 2 * omega by construction.
    let curl = field.omega.map(|o| 2.0 * o);
    let curl_dx = ddx(&curl, spec);
    let curl_dy = ddy(&curl, spec);
    let mut bits = Grid2::filled(field.nx(), field.ny(), false);
    for i in 0..field.nx() {
        for j in 0..field.ny() {
            let grad_norm = (curl_dx[(i, j)] * curl_dx[(i, j)]
                + curl_dy[(i, j)] * curl_dy[(i, j)])
                .sqrt();
            bits[(i, j)] = div[(i, j)].abs() <= params.alpha_cont && grad_norm <= params.alpha_cont;
        }
    }
    MaskGrid { bits }
}

/// Vector field advected one step by its own velocities. Cells that receive
/// no vector are absent.
#[derive(Debug, Clone)]
pub struct PropagatedField {
    pub vx: Grid2<f64>,
    pub vy: Grid2<f64>,
    pub present: Grid2<bool>,
    /// Occupied source vectors that moved, got dropped in a collision, or
    /// left the grid.
    pub moved: usize,
    pub collisions: usize,
    pub exits: usize,
}

/// Advect every occupied cell's vector to the cell its velocity predicts
/// for the next frame: index offset = round-to-nearest of v*dt in cell
/// units. Collisions keep the larger-magnitude vector, ties keep the lowest
/// (i, then j) source.
pub fn propagate(field: &FlowField, spec: &GridSpec, params: &MaskParams) -> PropagatedField {
    let (nx, ny) = (field.nx(), field.ny());
    let mut out = PropagatedField {
        vx: Grid2::filled(nx, ny, 0.0),
        vy: Grid2::filled(nx, ny, 0.0),
        present: Grid2::filled(nx, ny, false),
        moved: 0,
        collisions: 0,
        exits: 0,
    };
    // Magnitude of the vector currently stored at a target cell; used for
    // the collision rule. Row-major source order makes the tie-break
    // deterministic: equal magnitudes keep the earlier (lower-index) source.
    let mut mag = Grid2::filled(nx, ny, f64::NEG_INFINITY);
    for i in 0..nx {
        for j in 0..ny {
            if !field.occupancy[(i, j)] {
                continue;
            }
            let vx = field.vx[(i, j)];
            let vy = field.vy[(i, j)];
            let di = (vx * params.dt / spec.cell_w + 0.5).floor() as i64;
            let dj = (vy * params.dt / spec.cell_h + 0.5).floor() as i64;
            let ti = i as i64 + di;
            let tj = j as i64 + dj;
            if ti < 0 || tj < 0 || ti >= nx as i64 || tj >= ny as i64 {
                out.exits += 1;
                continue;
            }
            let (ti, tj) = (ti as usize, tj as usize);
            let m = (vx * vx + vy * vy).sqrt();
            if out.present[(ti, tj)] {
                out.collisions += 1;
                if m <= mag[(ti, tj)] {
                    continue;
                }
            } else {
                out.moved += 1;
            }
            out.present[(ti, tj)] = true;
            mag[(ti, tj)] = m;
            out.vx[(ti, tj)] = vx;
            out.vy[(ti, tj)] = vy;
        }
    }
    out
}

/// Temporal consistency mask: a cell passes iff a propagated vector landed
/// there and agrees with the current one within `alpha_p`.
pub fn propagation_mask(
    propagated: &PropagatedField,
    current: &FlowField,
    params: &MaskParams,
) -> MaskGrid {
    let mut bits = Grid2::filled(current.nx(), current.ny(), false);
    for i in 0..current.nx() {
        for j in 0..current.ny() {
            if !propagated.present[(i, j)] {
                continue;
            }
            let dx = propagated.vx[(i, j)] - current.vx[(i, j)];
            let dy = propagated.vy[(i, j)] - current.vy[(i, j)];
            bits[(i, j)] = (dx * dx + dy * dy).sqrt() <= params.alpha_p;
        }
    }
    MaskGrid { bits }
}

/// Zero the field outside the elementwise AND of the two masks.
pub fn apply_mask(field: &FlowField, mc: &MaskGrid, mp: &MaskGrid) -> FlowField {
    let mut out = field.clone();
    for i in 0..field.nx() {
        for j in 0..field.ny() {
            if !(mc.bits[(i, j)] && mp.bits[(i, j)]) {
                out.vx[(i, j)] = 0.0;
                out.vy[(i, j)] = 0.0;
                out.omega[(i, j)] = 0.0;
            }
        }
    }
    out
}

/// Remove the ego-induced apparent motion so that static-world cells read
/// approximately zero: `v_out = v_in + v_ego + omega_ego x r`.
pub fn ego_motion_compensate(field: &FlowField, ego: &EgoState, spec: &GridSpec) -> FlowField {
    let mut out = field.clone();
    for i in 0..field.nx() {
        for j in 0..field.ny() {
            let (x, y) = spec.cell_center(i, j);
            out.vx[(i, j)] = field.vx[(i, j)] + ego.v - ego.omega * y;
            out.vy[(i, j)] = field.vy[(i, j)] + ego.omega * x;
            out.omega[(i, j)] = field.omega[(i, j)] + ego.omega;
        }
    }
    out
}

/// Cells whose compensated speed exceeds `min_speed`: the moving-cell
/// candidates handed to clustering.
pub fn speed_mask(field: &FlowField, min_speed: f64) -> Grid2<bool> {
    let mut out = Grid2::filled(field.nx(), field.ny(), false);
    for i in 0..field.nx() {
        for j in 0..field.ny() {
            let vx = field.vx[(i, j)];
            let vy = field.vy[(i, j)];
            out[(i, j)] = (vx * vx + vy * vy).sqrt() > min_speed;
        }
    }
    out
}

/// Debug dump: `i,j,vx,vy,omega,mc,mp` per line.
pub fn write_field_csv(
    path: &std::path::Path,
    field: &FlowField,
    mc: &MaskGrid,
    mp: &MaskGrid,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "i,j,vx,vy,omega,mc,mp").map_err(|e| Error::io(path.display().to_string(), e))?;
    for ((i, j), vx) in field.vx.enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            i,
            j,
            vx,
            field.vy[(i, j)],
            field.omega[(i, j)],
            u8::from(mc.bits[(i, j)]),
            u8::from(mp.bits[(i, j)])
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(nx: usize, ny: usize) -> GridSpec {
        GridSpec {
            nx,
            ny,
            cell_w: 0.5,
            cell_h: 0.25,
            origin_x: -2.0,
            origin_y: -1.0,
            ..crate::bev::tests_spec()
        }
    }

    /// Sample a rigid-body field v = Vc + Omega x r about `center`.
    fn rigid_field(
        s: &GridSpec,
        vcx: f64,
        vcy: f64,
        omega: f64,
        center: (f64, f64),
    ) -> (Grid2<f64>, Grid2<f64>) {
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        let mut vy = Grid2::filled(s.nx, s.ny, 0.0);
        for i in 0..s.nx {
            for j in 0..s.ny {
                let (x, y) = s.cell_center(i, j);
                vx[(i, j)] = vcx - omega * (y - center.1);
                vy[(i, j)] = vcy + omega * (x - center.0);
            }
        }
        (vx, vy)
    }

    fn field_from(vx: Grid2<f64>, vy: Grid2<f64>, s: &GridSpec) -> FlowField {
        let occ = Grid2::filled(vx.nx(), vx.ny(), true);
        FlowField::new(vx, vy, occ, s, 0.0).unwrap()
    }

    #[test]
    fn curl_of_rigid_rotation_recovers_omega_everywhere() {
        let s = spec(12, 14);
        let (vx, vy) = rigid_field(&s, 3.0, -1.0, 0.7, (1.5, -0.25));
        let omega = curl_half(&vx, &vy, &s);
        // Linear field: central and one-sided differences are both exact.
        for i in 0..s.nx {
            for j in 0..s.ny {
                assert_relative_eq!(omega[(i, j)], 0.7, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn curl_of_uniform_translation_is_zero() {
        let s = spec(8, 8);
        let (vx, vy) = rigid_field(&s, 5.0, 2.0, 0.0, (0.0, 0.0));
        let omega = curl_half(&vx, &vy, &s);
        assert!(omega.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn curl_of_shear_field() {
        // vx = k*y, vy = 0 -> omega = -k/2.
        let s = spec(8, 8);
        let k = 1.6;
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        let vy = Grid2::filled(s.nx, s.ny, 0.0);
        for i in 0..s.nx {
            for j in 0..s.ny {
                let (_, y) = s.cell_center(i, j);
                vx[(i, j)] = k * y;
            }
        }
        let omega = curl_half(&vx, &vy, &s);
        for v in omega.data() {
            assert_relative_eq!(*v, -k / 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn appendix_identity_for_random_rigid_fields() {
        // curl/2 recovers Omega regardless of center velocity and rotation
        // center.
        let s = spec(10, 10);
        let mut state = 99u64;
        let mut rnd = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..10 {
            let (vcx, vcy) = (rnd() * 20.0, rnd() * 20.0);
            let omega = rnd() * 2.0;
            let center = (rnd() * 50.0, rnd() * 50.0);
            let (vx, vy) = rigid_field(&s, vcx, vcy, omega, center);
            let half_curl = curl_half(&vx, &vy, &s);
            for i in 1..s.nx - 1 {
                for j in 1..s.ny - 1 {
                    assert!((half_curl[(i, j)] - omega).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn continuity_mask_passes_translation_and_rotation() {
        let s = spec(10, 10);
        let params = MaskParams::default();
        for (vcx, vcy, om) in [(4.0, -2.0, 0.0), (0.0, 0.0, 0.9), (3.0, 1.0, -0.5)] {
            let (vx, vy) = rigid_field(&s, vcx, vcy, om, (0.7, 0.3));
            let f = field_from(vx, vy, &s);
            let mc = continuity_mask(&f, &s, &params);
            for i in 0..s.nx {
                for j in 0..s.ny {
                    assert!(mc.bits[(i, j)], "failed at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn continuity_mask_rejects_spike_stencil() {
        let s = spec(11, 11);
        let params = MaskParams::default();
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        let vy = Grid2::filled(s.nx, s.ny, 0.0);
        vx[(5, 5)] = 100.0;
        let f = field_from(vx.clone(), vy.clone(), &s);
        let mc = continuity_mask(&f, &s, &params);

        // Oracle: evaluate the stencil conditions directly per cell.
        let div = divergence(&vx, &vy, &s);
        let curl = curl_half(&vx, &vy, &s).map(|o| 2.0 * o);
        let gx = ddx(&curl, &s);
        let gy = ddy(&curl, &s);
        let mut spiked = 0;
        for i in 0..s.nx {
            for j in 0..s.ny {
                let expect = div[(i, j)].abs() <= params.alpha_cont
                    && (gx[(i, j)] * gx[(i, j)] + gy[(i, j)] * gy[(i, j)]).sqrt()
                        <= params.alpha_cont;
                assert_eq!(mc.bits[(i, j)], expect);
                if !expect {
                    spiked += 1;
                }
            }
        }
        // The spike must knock out its own difference stencil but little else.
        assert!(spiked > 0);
        assert!(mc.bits[(0, 0)]);
        assert!(!mc.bits[(5, 4)] || !mc.bits[(4, 5)] || !mc.bits[(5, 5)]);
    }

    #[test]
    fn propagate_zero_velocity_is_identity_on_occupied() {
        let s = spec(8, 8);
        let mut occ = Grid2::filled(s.nx, s.ny, false);
        occ[(2, 3)] = true;
        occ[(5, 5)] = true;
        let f = FlowField::new(
            Grid2::filled(s.nx, s.ny, 0.0),
            Grid2::filled(s.nx, s.ny, 0.0),
            occ.clone(),
            &s,
            0.0,
        )
        .unwrap();
        let p = propagate(&f, &s, &MaskParams::default());
        for i in 0..s.nx {
            for j in 0..s.ny {
                assert_eq!(p.present[(i, j)], occ[(i, j)]);
            }
        }
        assert_eq!(p.exits, 0);
        assert_eq!(p.collisions, 0);
    }

    #[test]
    fn propagate_uniform_velocity_moves_one_cell() {
        // vx = 1.7 m/s, dt = 0.1, w = 0.17 -> +1 cell in i.
        let mut s = spec(10, 10);
        s.cell_w = 0.17;
        s.cell_h = 0.17;
        let mut occ = Grid2::filled(s.nx, s.ny, false);
        occ[(4, 4)] = true;
        let f = FlowField::new(
            Grid2::filled(s.nx, s.ny, 1.7),
            Grid2::filled(s.nx, s.ny, 0.0),
            occ,
            &s,
            0.0,
        )
        .unwrap();
        let p = propagate(&f, &s, &MaskParams::default());
        assert!(p.present[(5, 4)]);
        assert!(!p.present[(4, 4)]);
        assert_relative_eq!(p.vx[(5, 4)], 1.7);
    }

    #[test]
    fn propagate_collision_keeps_larger_magnitude() {
        let mut s = spec(10, 10);
        s.cell_w = 1.0;
        s.cell_h = 1.0;
        let params = MaskParams {
            dt: 1.0,
            ..MaskParams::default()
        };
        let mut occ = Grid2::filled(s.nx, s.ny, false);
        occ[(2, 5)] = true;
        occ[(6, 5)] = true;
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        // (2,5) moves +2 at 2 m/s; (6,5) moves -2 at -2.5 m/s; both land on (4,5).
        vx[(2, 5)] = 2.0;
        vx[(6, 5)] = -2.5;
        let f = FlowField::new(vx, Grid2::filled(s.nx, s.ny, 0.0), occ, &s, 0.0).unwrap();
        let p = propagate(&f, &s, &params);
        assert!(p.present[(4, 5)]);
        assert_relative_eq!(p.vx[(4, 5)], -2.5);
        assert_eq!(p.collisions, 1);
        assert_eq!(p.moved, 1);
    }

    #[test]
    fn propagate_tie_break_prefers_lowest_source_index() {
        let mut s = spec(10, 10);
        s.cell_w = 1.0;
        s.cell_h = 1.0;
        let params = MaskParams {
            dt: 1.0,
            ..MaskParams::default()
        };
        let mut occ = Grid2::filled(s.nx, s.ny, false);
        occ[(2, 5)] = true;
        occ[(6, 5)] = true;
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        vx[(2, 5)] = 2.0;
        vx[(6, 5)] = -2.0;
        let f = FlowField::new(vx, Grid2::filled(s.nx, s.ny, 0.0), occ, &s, 0.0).unwrap();
        let p = propagate(&f, &s, &params);
        assert_relative_eq!(p.vx[(4, 5)], 2.0);
    }

    #[test]
    fn propagation_mask_identical_fields_is_occupancy() {
        let s = spec(9, 9);
        let params = MaskParams::default();
        let mut occ = Grid2::filled(s.nx, s.ny, false);
        occ[(3, 3)] = true;
        occ[(3, 4)] = true;
        let f = FlowField::new(
            Grid2::filled(s.nx, s.ny, 0.0),
            Grid2::filled(s.nx, s.ny, 0.0),
            occ.clone(),
            &s,
            0.0,
        )
        .unwrap();
        let p = propagate(&f, &s, &params);
        let mp = propagation_mask(&p, &f, &params);
        for i in 0..s.nx {
            for j in 0..s.ny {
                assert_eq!(mp.bits[(i, j)], occ[(i, j)]);
            }
        }
    }

    #[test]
    fn propagation_mask_rejects_large_offsets() {
        let s = spec(9, 9);
        let params = MaskParams::default();
        let occ = Grid2::filled(s.nx, s.ny, true);
        let f = FlowField::new(
            Grid2::filled(s.nx, s.ny, 0.0),
            Grid2::filled(s.nx, s.ny, 0.0),
            occ,
            &s,
            0.0,
        )
        .unwrap();
        let p = propagate(&f, &s, &params);
        // Current field offset by 2*alpha_p everywhere.
        let f2 = FlowField::new(
            Grid2::filled(s.nx, s.ny, params.alpha_p * 2.0),
            Grid2::filled(s.nx, s.ny, 0.0),
            Grid2::filled(s.nx, s.ny, true),
            &s,
            0.1,
        )
        .unwrap();
        let mp = propagation_mask(&p, &f2, &params);
        assert!(mp.bits.data().iter().all(|&b| !b));
    }

    #[test]
    fn propagation_mask_mixed_differences() {
        // alpha_p = 0.5: per-cell differences {0.3, 0.7} -> bits {1, 0}.
        let s = spec(9, 9);
        let params = MaskParams {
            alpha_p: 0.5,
            ..MaskParams::default()
        };
        let mut occ = Grid2::filled(s.nx, s.ny, false);
        occ[(2, 2)] = true;
        occ[(6, 6)] = true;
        let f = FlowField::new(
            Grid2::filled(s.nx, s.ny, 0.0),
            Grid2::filled(s.nx, s.ny, 0.0),
            occ,
            &s,
            0.0,
        )
        .unwrap();
        let p = propagate(&f, &s, &params);
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        vx[(2, 2)] = 0.3;
        vx[(6, 6)] = 0.7;
        let f2 = FlowField::new(
            vx,
            Grid2::filled(s.nx, s.ny, 0.0),
            Grid2::filled(s.nx, s.ny, true),
            &s,
            0.1,
        )
        .unwrap();
        let mp = propagation_mask(&p, &f2, &params);
        assert!(mp.bits[(2, 2)]);
        assert!(!mp.bits[(6, 6)]);
    }

    #[test]
    fn apply_mask_all_ones_identity_and_all_zero() {
        let s = spec(6, 6);
        let (vx, vy) = rigid_field(&s, 1.0, 2.0, 0.3, (0.0, 0.0));
        let f = field_from(vx, vy, &s);
        let ones = MaskGrid {
            bits: Grid2::filled(s.nx, s.ny, true),
        };
        let zeros = MaskGrid {
            bits: Grid2::filled(s.nx, s.ny, false),
        };
        let id = apply_mask(&f, &ones, &ones);
        assert_eq!(id.vx, f.vx);
        assert_eq!(id.vy, f.vy);
        let z = apply_mask(&f, &zeros, &ones);
        assert!(z.vx.data().iter().all(|&v| v == 0.0));
        assert!(z.omega.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_random_and_support_and_idempotent() {
        let s = spec(8, 8);
        let (vx, vy) = rigid_field(&s, 2.0, -1.0, 0.1, (0.0, 0.0));
        let f = field_from(vx, vy, &s);
        let mut state = 7u64;
        let mut bit = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 40) & 1 == 1
        };
        let mut mc = Grid2::filled(s.nx, s.ny, false);
        let mut mp = Grid2::filled(s.nx, s.ny, false);
        for i in 0..s.nx {
            for j in 0..s.ny {
                mc[(i, j)] = bit();
                mp[(i, j)] = bit();
            }
        }
        let mc = MaskGrid { bits: mc };
        let mp = MaskGrid { bits: mp };
        let masked = apply_mask(&f, &mc, &mp);
        for i in 0..s.nx {
            for j in 0..s.ny {
                let keep = mc.bits[(i, j)] && mp.bits[(i, j)];
                assert_eq!(masked.vx[(i, j)] != 0.0, keep);
            }
        }
        let twice = apply_mask(&masked, &mc, &mp);
        assert_eq!(twice.vx, masked.vx);
        assert_eq!(twice.vy, masked.vy);
        assert_eq!(twice.omega, masked.omega);
    }

    #[test]
    fn ego_compensation_at_rest_is_identity() {
        let s = spec(6, 6);
        let (vx, vy) = rigid_field(&s, 1.0, 1.0, 0.2, (0.0, 0.0));
        let f = field_from(vx, vy, &s);
        let out = ego_motion_compensate(&f, &EgoState { v: 0.0, omega: 0.0 }, &s);
        assert_eq!(out.vx, f.vx);
        assert_eq!(out.vy, f.vy);
        assert_eq!(out.omega, f.omega);
    }

    #[test]
    fn ego_compensation_cancels_static_world_reading() {
        // Ego moving forward at 10 m/s: static cells read -10 in raw flow.
        let s = spec(6, 6);
        let f = field_from(
            Grid2::filled(s.nx, s.ny, -10.0),
            Grid2::filled(s.nx, s.ny, 0.0),
            &s,
        );
        let out = ego_motion_compensate(&f, &EgoState { v: 10.0, omega: 0.0 }, &s);
        assert!(out.vx.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ego_compensation_removes_rotational_transport() {
        // Ego yaw 0.1 rad/s; a static cell at (10, 0) m reads tangential
        // -1.0 m/s in vy; compensation must cancel it.
        let mut s = spec(3, 3);
        s.cell_w = 10.0;
        s.cell_h = 10.0;
        s.origin_x = 0.0;
        s.origin_y = -10.0;
        // Cell (1, 1) sits at (10, 0).
        let mut vy = Grid2::filled(s.nx, s.ny, 0.0);
        vy[(1, 1)] = -1.0;
        let f = field_from(Grid2::filled(s.nx, s.ny, 0.0), vy, &s);
        let out = ego_motion_compensate(&f, &EgoState { v: 0.0, omega: 0.1 }, &s);
        assert!((out.vy[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn speed_mask_thresholds() {
        let s = spec(4, 4);
        let mut vx = Grid2::filled(s.nx, s.ny, 0.0);
        vx[(1, 1)] = 2.0;
        vx[(2, 2)] = 0.5;
        let f = field_from(vx, Grid2::filled(s.nx, s.ny, 0.0), &s);
        let m = speed_mask(&f, 1.0);
        assert!(m[(1, 1)]);
        assert!(!m[(2, 2)]);
        assert!(!m[(0, 0)]);
    }
}
