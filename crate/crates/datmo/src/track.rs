//! EKF multi-object tracker: per-object state estimation under a
//! constant-speed / constant-turn-rate motion model expressed in the moving
//! ego frame, global-nearest-neighbor association, and M-of-N lifecycle.
//!
//! State per track: `X = [x, y, theta, v, omega]` where (x, y) is the
//! target position in the EV frame and (theta, v, omega) describe the
//! target's absolute velocity expressed in EV axes. The ego input
//! `U = [V, Omega]` enters the kinematics as frame transport:
//!
//! ```text
//! x'     = v cos(theta) - V + Omega * y
//! y'     = v sin(theta) - Omega * x
//! theta' = omega - Omega
//! v'     = 0   (acceleration modeled as process noise)
//! omega' = 0
//! ```

use std::collections::VecDeque;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::assign::{gated_assignment, Assignment};
use crate::cluster::{feature_vector, Cluster};
use crate::error::{Error, Result};

pub type StateVec = SVector<f64, 5>;
pub type StateMat = SMatrix<f64, 5, 5>;

/// Ego vehicle speed and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub v: f64,
    pub omega: f64,
}

impl Default for EgoState {
    fn default() -> Self {
        EgoState { v: 0.0, omega: 0.0 }
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub x: StateVec,
    pub p: StateMat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub state: TrackState,
    pub status: TrackStatus,
    /// Hit/miss history of the last max(N1, N2) updates, newest last.
    pub history: VecDeque<bool>,
    /// Shape eigenvalues from the last assigned cluster, held between hits.
    pub shape: (f64, f64),
    pub last_update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    /// Association gate on the 4D feature distance.
    pub gamma: f64,
    /// Confirm a tentative track after M1 hits within the last N1 updates.
    pub m1: usize,
    pub n1: usize,
    /// Delete a confirmed track after M2 misses within the last N2 updates.
    pub m2: usize,
    pub n2: usize,
    /// Process-noise spectral density of the linear acceleration, (m/s^2)^2 s.
    pub q_a: f64,
    /// Process-noise spectral density of the angular acceleration, (rad/s^2)^2 s.
    pub q_alpha: f64,
    /// Measurement noise diagonal for z = [x, y, vx_rel, vy_rel, omega_rel].
    pub r_diag: [f64; 5],
    /// Initial covariance diagonal for spawned tracks.
    pub p0_diag: [f64; 5],
}

impl Default for TrackerParams {
    fn default() -> Self {
        let deg30 = 30.0f64.to_radians();
        TrackerParams {
            gamma: 4.0,
            m1: 3,
            n1: 5,
            m2: 4,
            n2: 5,
            q_a: 2.0,
            q_alpha: 0.5,
            r_diag: [0.09, 0.09, 0.25, 0.25, 0.04],
            p0_diag: [1.0, 1.0, deg30 * deg30, 4.0, 0.25],
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if self.m1 > self.n1 || self.m2 > self.n2 {
            return Err(Error::Config("lifecycle requires M <= N".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.r_diag.iter().chain(&self.p0_diag).any(|&v| v <= 0.0) {
            return Err(Error::Config("noise diagonals must be positive".into()));
        }
        Ok(())
    }
}

/// Motion model right-hand side.
fn dynamics(x: &StateVec, ego: &EgoState) -> StateVec {
    let (px, py, th, v, om) = (x[0], x[1], x[2], x[3], x[4]);
    StateVec::new(
        v * th.cos() - ego.v + ego.omega * py,
        v * th.sin() - ego.omega * px,
        om - ego.omega,
        0.0,
        0.0,
    )
}

/// Jacobian of the motion model w.r.t. the state.
fn dynamics_jacobian(x: &StateVec, ego: &EgoState) -> StateMat {
    let (th, v) = (x[2], x[3]);
    let mut j = StateMat::zeros();
    j[(0, 1)] = ego.omega;
    j[(0, 2)] = -v * th.sin();
    j[(0, 3)] = th.cos();
    j[(1, 0)] = -ego.omega;
    j[(1, 2)] = v * th.cos();
    j[(1, 3)] = th.sin();
    j[(2, 4)] = 1.0;
    j
}

/// One RK4 step of the mean together with the variational equation, so the
/// returned transition matrix is the exact Jacobian of the discrete map.
fn rk4_with_jacobian(x: &StateVec, ego: &EgoState, dt: f64) -> (StateVec, StateMat) {
    let eye = StateMat::identity();

    let k1 = dynamics(x, ego);
    let f1 = dynamics_jacobian(x, ego) * eye;

    let x2 = x + k1 * (dt / 2.0);
    let k2 = dynamics(&x2, ego);
    let f2 = dynamics_jacobian(&x2, ego) * (eye + f1 * (dt / 2.0));

    let x3 = x + k2 * (dt / 2.0);
    let k3 = dynamics(&x3, ego);
    let f3 = dynamics_jacobian(&x3, ego) * (eye + f2 * (dt / 2.0));

    let x4 = x + k3 * dt;
    let k4 = dynamics(&x4, ego);
    let f4 = dynamics_jacobian(&x4, ego) * (eye + f3 * dt);

    let x_next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let f = eye + (f1 + f2 * 2.0 + f3 * 2.0 + f4) * (dt / 6.0);
    (x_next, f)
}

/// Discrete process noise for white linear/angular acceleration driving the
/// (x, y, v) and (theta, omega) chains.
fn process_noise(x: &StateVec, dt: f64, params: &TrackerParams) -> StateMat {
    let th = x[2];
    let (c, s) = (th.cos(), th.sin());
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    let mut q = StateMat::zeros();
    // Linear acceleration enters x,y through the heading direction and v
    // directly.
    let qa = params.q_a;
    q[(0, 0)] = qa * c * c * dt3 / 3.0;
    q[(0, 1)] = qa * c * s * dt3 / 3.0;
    q[(1, 0)] = q[(0, 1)];
    q[(1, 1)] = qa * s * s * dt3 / 3.0;
    q[(0, 3)] = qa * c * dt2 / 2.0;
    q[(3, 0)] = q[(0, 3)];
    q[(1, 3)] = qa * s * dt2 / 2.0;
    q[(3, 1)] = q[(1, 3)];
    q[(3, 3)] = qa * dt;
    // Angular acceleration drives theta and omega.
    let ql = params.q_alpha;
    q[(2, 2)] = ql * dt3 / 3.0;
    q[(2, 4)] = ql * dt2 / 2.0;
    q[(4, 2)] = q[(2, 4)];
    q[(4, 4)] = ql * dt;
    q
}

fn symmetrize(p: &mut StateMat) {
    *p = (*p + p.transpose()) * 0.5;
}

/// Propagate a track state one step.
pub fn predict(track: &mut Track, ego: &EgoState, dt: f64, params: &TrackerParams) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Contract("predict needs dt > 0".into()));
    }
    let q = process_noise(&track.state.x, dt, params);
    let (x_next, f) = rk4_with_jacobian(&track.state.x, ego, dt);
    track.state.x = x_next;
    track.state.x[2] = wrap_angle(track.state.x[2]);
    track.state.p = f * track.state.p * f.transpose() + q;
    symmetrize(&mut track.state.p);
    Ok(())
}

/// Predicted measurement `z = [x, y, vx_rel, vy_rel, omega_rel]` and its
/// Jacobian. The velocity rows are the apparent (ego-frame) velocities the
/// flow field measures.
pub fn measurement_model(x: &StateVec, ego: &EgoState) -> (StateVec, StateMat) {
    let (px, py, th, v, om) = (x[0], x[1], x[2], x[3], x[4]);
    let z = StateVec::new(
        px,
        py,
        v * th.cos() - ego.v + ego.omega * py,
        v * th.sin() - ego.omega * px,
        om - ego.omega,
    );
    let mut h = StateMat::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h[(2, 1)] = ego.omega;
    h[(2, 2)] = -v * th.sin();
    h[(2, 3)] = th.cos();
    h[(3, 0)] = -ego.omega;
    h[(3, 2)] = v * th.cos();
    h[(3, 3)] = th.sin();
    h[(4, 4)] = 1.0;
    (z, h)
}

/// Measurement vector of a cluster: centroid plus apparent velocities.
pub fn cluster_measurement(c: &Cluster) -> StateVec {
    StateVec::new(
        c.centroid.0,
        c.centroid.1,
        c.mean_v.0,
        c.mean_v.1,
        c.mean_omega,
    )
}

/// EKF correction with an assigned cluster. Joseph-form covariance update.
pub fn update(track: &mut Track, cluster: &Cluster, ego: &EgoState, params: &TrackerParams) -> Result<()> {
    let (z_pred, h) = measurement_model(&track.state.x, ego);
    let z = cluster_measurement(cluster);
    let innovation = z - z_pred;

    let r = StateMat::from_diagonal(&StateVec::from_row_slice(&params.r_diag));
    let s = h * track.state.p * h.transpose() + r;
    let s_chol = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
    // K = P H' S^-1  <=>  K' = S^-1 (H P')
    let k = s_chol.solve(&(h * track.state.p.transpose())).transpose();

    track.state.x += k * innovation;
    track.state.x[2] = wrap_angle(track.state.x[2]);
    let ikh = StateMat::identity() - k * h;
    track.state.p = ikh * track.state.p * ikh.transpose() + k * r * k.transpose();
    symmetrize(&mut track.state.p);

    track.shape = cluster.lambda;
    track.last_update = cluster.timestamp;
    Ok(())
}

/// Gated GNN assignment between predicted tracks and clusters on the 4D
/// features [x, y, lambda1, lambda2].
pub fn associate(tracks: &[Track], clusters: &[Cluster], params: &TrackerParams) -> Assignment {
    if tracks.is_empty() {
        // An empty cost matrix carries no column count.
        return Assignment {
            pairs: Vec::new(),
            unassigned_rows: Vec::new(),
            unassigned_cols: (0..clusters.len()).collect(),
        };
    }
    let cost: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| {
            let tf = [t.state.x[0], t.state.x[1], t.shape.0, t.shape.1];
            clusters
                .iter()
                .map(|c| {
                    let cf = feature_vector(c);
                    tf.iter()
                        .zip(&cf)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    gated_assignment(&cost, params.gamma)
}

/// Push one hit/miss and apply the confirmation/deletion rules.
pub fn lifecycle_step(track: &mut Track, hit: bool, params: &TrackerParams) {
    debug_assert!(track.status != TrackStatus::Deleted);
    let cap = params.n1.max(params.n2);
    track.history.push_back(hit);
    while track.history.len() > cap {
        track.history.pop_front();
    }
    let count_last = |n: usize, value: bool| -> usize {
        track
            .history
            .iter()
            .rev()
            .take(n)
            .filter(|&&h| h == value)
            .count()
    };
    match track.status {
        TrackStatus::Tentative => {
            if count_last(params.n1, true) >= params.m1 {
                track.status = TrackStatus::Confirmed;
            } else if track.history.len() >= params.n1 && count_last(params.n1, true) == 0 {
                track.status = TrackStatus::Deleted;
            }
        }
        TrackStatus::Confirmed => {
            if count_last(params.n2, false) >= params.m2 {
                track.status = TrackStatus::Deleted;
            }
        }
        TrackStatus::Deleted => {}
    }
}

/// One confirmed-track emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackOutput {
    pub t: f64,
    pub id: u64,
    /// Position in the EV frame, meters.
    pub x: f64,
    pub y: f64,
    /// Heading of the absolute velocity in EV axes, radians.
    pub theta: f64,
    /// Absolute speed, m/s.
    pub v: f64,
    /// Absolute yaw rate, rad/s.
    pub omega: f64,
    /// Apparent (ego-frame) velocity, m/s.
    pub vx_rel: f64,
    pub vy_rel: f64,
    pub omega_rel: f64,
    pub status: String,
}

/// The stateful multi-object tracker.
#[derive(Debug)]
pub struct Tracker {
    pub params: TrackerParams,
    tracks: Vec<Track>,
    next_id: u64,
    last_time: Option<f64>,
    /// Updates skipped because the innovation covariance was singular.
    pub update_failures: usize,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Result<Self> {
        params.validate()?;
        Ok(Tracker {
            params,
            tracks: Vec::new(),
            next_id: 1,
            last_time: None,
            update_failures: 0,
        })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    fn spawn(&mut self, cluster: &Cluster, ego: &EgoState) {
        let vx_abs = cluster.mean_v.0 + ego.v - ego.omega * cluster.centroid.1;
        let vy_abs = cluster.mean_v.1 + ego.omega * cluster.centroid.0;
        let speed = (vx_abs * vx_abs + vy_abs * vy_abs).sqrt();
        let theta = vy_abs.atan2(vx_abs);
        let omega_abs = cluster.mean_omega + ego.omega;
        let x = StateVec::new(
            cluster.centroid.0,
            cluster.centroid.1,
            theta,
            speed,
            omega_abs,
        );
        let p = StateMat::from_diagonal(&StateVec::from_row_slice(&self.params.p0_diag));
        let mut track = Track {
            id: self.next_id,
            state: TrackState { x, p },
            status: TrackStatus::Tentative,
            history: VecDeque::new(),
            shape: cluster.lambda,
            last_update: cluster.timestamp,
        };
        self.next_id += 1;
        lifecycle_step(&mut track, true, &self.params);
        self.tracks.push(track);
    }

    /// Predict -> associate -> update/miss -> lifecycle -> spawn; returns
    /// the confirmed tracks' emissions for this step.
    pub fn step(
        &mut self,
        clusters: &[Cluster],
        ego: &EgoState,
        t: f64,
    ) -> Result<Vec<TrackOutput>> {
        if let Some(last) = self.last_time {
            if !(t > last) {
                return Err(Error::Contract(format!(
                    "tracker timestamps must increase (got {t} after {last})"
                )));
            }
            let dt = t - last;
            for track in &mut self.tracks {
                predict(track, ego, dt, &self.params)?;
            }
        }
        self.last_time = Some(t);

        let assignment = associate(&self.tracks, clusters, &self.params);
        for &(ti, ci) in &assignment.pairs {
            let hit = match update(&mut self.tracks[ti], &clusters[ci], ego, &self.params) {
                Ok(()) => true,
                Err(Error::Numerical(_)) => {
                    self.update_failures += 1;
                    false
                }
                Err(e) => return Err(e),
            };
            lifecycle_step(&mut self.tracks[ti], hit, &self.params);
        }
        for &ti in &assignment.unassigned_rows {
            lifecycle_step(&mut self.tracks[ti], false, &self.params);
        }
        for &ci in &assignment.unassigned_cols {
            self.spawn(&clusters[ci], ego);
        }
        self.tracks.retain(|tr| tr.status != TrackStatus::Deleted);

        let mut out = Vec::new();
        for tr in &self.tracks {
            if tr.status != TrackStatus::Confirmed {
                continue;
            }
            let x = &tr.state.x;
            let (z, _) = measurement_model(x, ego);
            out.push(TrackOutput {
                t,
                id: tr.id,
                x: x[0],
                y: x[1],
                theta: x[2],
                v: x[3],
                omega: x[4],
                vx_rel: z[2],
                vy_rel: z[3],
                omega_rel: z[4],
                status: "confirmed".to_string(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lcg(state: &mut u64) -> f64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    fn make_track(x: StateVec) -> Track {
        Track {
            id: 1,
            state: TrackState {
                x,
                p: StateMat::from_diagonal(&StateVec::from_row_slice(
                    &TrackerParams::default().p0_diag,
                )),
            },
            status: TrackStatus::Tentative,
            history: VecDeque::new(),
            shape: (1.0, 0.5),
            last_update: 0.0,
        }
    }

    fn make_cluster(x: f64, y: f64, v: (f64, f64), omega: f64, t: f64) -> Cluster {
        Cluster {
            cells: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
            centroid: (x, y),
            mean_v: v,
            mean_omega: omega,
            lambda: (1.0, 0.5),
            timestamp: t,
        }
    }

    #[test]
    fn predict_pure_forward_motion() {
        let mut tr = make_track(StateVec::new(5.0, 2.0, 0.0, 10.0, 0.0));
        let ego = EgoState::default();
        predict(&mut tr, &ego, 0.1, &TrackerParams::default()).unwrap();
        assert_relative_eq!(tr.state.x[0], 6.0, epsilon = 1e-12);
        assert_relative_eq!(tr.state.x[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(tr.state.x[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(tr.state.x[3], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn predict_relative_heading_rate_under_ego_yaw() {
        let mut tr = make_track(StateVec::new(0.0, 0.0, 0.0, 0.0, 0.0));
        let ego = EgoState { v: 0.0, omega: 0.1 };
        predict(&mut tr, &ego, 0.1, &TrackerParams::default()).unwrap();
        assert_relative_eq!(tr.state.x[2], -0.01, epsilon = 1e-12);
        assert_relative_eq!(tr.state.x[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(tr.state.x[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transition_jacobian_matches_finite_differences() {
        let mut state = 1234u64;
        for _ in 0..100 {
            let x = StateVec::new(
                lcg(&mut state) * 80.0 - 40.0,
                lcg(&mut state) * 80.0 - 40.0,
                lcg(&mut state) * 6.0 - 3.0,
                lcg(&mut state) * 30.0,
                lcg(&mut state) * 2.0 - 1.0,
            );
            let ego = EgoState {
                v: lcg(&mut state) * 25.0,
                omega: lcg(&mut state) * 0.4 - 0.2,
            };
            let dt = 0.1;
            let (_, f) = rk4_with_jacobian(&x, &ego, dt);
            for col in 0..5 {
                let eps = 1e-6 * (1.0 + x[col].abs());
                let mut xp = x;
                xp[col] += eps;
                let mut xm = x;
                xm[col] -= eps;
                let (fp, _) = rk4_with_jacobian(&xp, &ego, dt);
                let (fm, _) = rk4_with_jacobian(&xm, &ego, dt);
                for row in 0..5 {
                    let fd = (fp[row] - fm[row]) / (2.0 * eps);
                    let denom = fd.abs().max(1e-3);
                    assert!(
                        (f[(row, col)] - fd).abs() / denom < 1e-5,
                        "F[{row},{col}] = {} vs fd {}",
                        f[(row, col)],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn measurement_jacobian_matches_finite_differences() {
        let mut state = 777u64;
        for _ in 0..100 {
            let x = StateVec::new(
                lcg(&mut state) * 60.0 - 30.0,
                lcg(&mut state) * 60.0 - 30.0,
                lcg(&mut state) * 6.0 - 3.0,
                lcg(&mut state) * 30.0,
                lcg(&mut state) * 2.0 - 1.0,
            );
            let ego = EgoState {
                v: lcg(&mut state) * 25.0,
                omega: lcg(&mut state) * 0.4 - 0.2,
            };
            let (_, h) = measurement_model(&x, &ego);
            for col in 0..5 {
                let eps = 1e-6 * (1.0 + x[col].abs());
                let mut xp = x;
                xp[col] += eps;
                let mut xm = x;
                xm[col] -= eps;
                let (zp, _) = measurement_model(&xp, &ego);
                let (zm, _) = measurement_model(&xm, &ego);
                for row in 0..5 {
                    let fd = (zp[row] - zm[row]) / (2.0 * eps);
                    let denom = fd.abs().max(1e-3);
                    assert!(
                        (h[(row, col)] - fd).abs() / denom < 1e-5,
                        "H[{row},{col}]"
                    );
                }
            }
        }
    }

    #[test]
    fn measurement_model_examples() {
        // Ego at rest.
        let x = StateVec::new(3.0, -2.0, 0.5, 8.0, 0.3);
        let (z, _) = measurement_model(&x, &EgoState::default());
        assert_relative_eq!(z[0], 3.0);
        assert_relative_eq!(z[2], 8.0 * 0.5f64.cos());
        assert_relative_eq!(z[3], 8.0 * 0.5f64.sin());
        assert_relative_eq!(z[4], 0.3);

        // Static target, ego moving forward at 10: relative vx reads -10.
        let x = StateVec::new(20.0, 0.0, 0.0, 0.0, 0.0);
        let (z, _) = measurement_model(&x, &EgoState { v: 10.0, omega: 0.0 });
        assert_relative_eq!(z[2], -10.0);
        assert_relative_eq!(z[3], 0.0);
    }

    #[test]
    fn update_with_exact_prediction_keeps_state_and_shrinks_p() {
        let mut tr = make_track(StateVec::new(10.0, 5.0, 0.2, 6.0, 0.1));
        let ego = EgoState { v: 4.0, omega: 0.05 };
        let (z, _) = measurement_model(&tr.state.x, &ego);
        let cluster = make_cluster(z[0], z[1], (z[2], z[3]), z[4], 0.1);
        let x_before = tr.state.x;
        let trace_before = tr.state.p.trace();
        update(&mut tr, &cluster, &ego, &TrackerParams::default()).unwrap();
        for k in 0..5 {
            assert_relative_eq!(tr.state.x[k], x_before[k], epsilon = 1e-9);
        }
        assert!(tr.state.p.trace() < trace_before);
    }

    #[test]
    fn near_perfect_measurement_pins_position() {
        let mut tr = make_track(StateVec::new(10.0, 5.0, 0.0, 6.0, 0.0));
        let ego = EgoState::default();
        let mut params = TrackerParams::default();
        params.r_diag = [1e-12, 1e-12, 1e-12, 1e-12, 1e-12];
        let cluster = make_cluster(11.5, 4.25, (6.0, 0.0), 0.0, 0.1);
        update(&mut tr, &cluster, &ego, &params).unwrap();
        assert_relative_eq!(tr.state.x[0], 11.5, epsilon = 1e-6);
        assert_relative_eq!(tr.state.x[1], 4.25, epsilon = 1e-6);
    }

    #[test]
    fn scalar_kalman_gain_closed_form() {
        // Ego at rest, theta = 0, diagonal P and R: the x-component update
        // decouples into the scalar gain p/(p + r).
        let p0 = 2.5;
        let r = 0.7;
        let delta = 1.3;
        let mut params = TrackerParams::default();
        params.r_diag = [r, 1.0, 1.0, 1.0, 1.0];
        params.p0_diag = [p0, 1.0, 0.2, 1.0, 0.1];
        let x0 = StateVec::new(4.0, 1.0, 0.0, 5.0, 0.0);
        let mut tr = make_track(x0);
        tr.state.p = StateMat::from_diagonal(&StateVec::from_row_slice(&params.p0_diag));
        let ego = EgoState::default();
        let (z, _) = measurement_model(&tr.state.x, &ego);
        let cluster = make_cluster(z[0] + delta, z[1], (z[2], z[3]), z[4], 0.1);
        update(&mut tr, &cluster, &ego, &params).unwrap();
        let k = p0 / (p0 + r);
        assert_relative_eq!(tr.state.x[0], 4.0 + k * delta, epsilon = 1e-9);
        assert_relative_eq!(tr.state.p[(0, 0)], (1.0 - k) * p0, epsilon = 1e-9);

        // Second step: predict inflates P by Q, update applies the new gain.
        let dt = 0.1;
        let q00 = params.q_a * dt * dt * dt / 3.0; // theta = 0 -> cos^2 = 1
        predict(&mut tr, &ego, dt, &params).unwrap();
        // After predict, x-v correlation exists; restrict the check to the
        // hand-computable P[0][0] growth: p' = p + dt^2*(2*k_xv + dt*...)
        // Use the full expression via the predicted matrix itself.
        let p_pred = tr.state.p[(0, 0)];
        assert!(p_pred > (1.0 - k) * p0 + q00 - 1e-9);
        let (z2, _) = measurement_model(&tr.state.x, &ego);
        let x_pred = tr.state.x[0];
        let cluster2 = make_cluster(z2[0] + delta, z2[1], (z2[2], z2[3]), z2[4], 0.2);
        update(&mut tr, &cluster2, &ego, &params).unwrap();
        // Gain is no longer exactly scalar (x couples to v), but the
        // posterior must move toward the measurement by at least the scalar
        // fraction computed from the marginal variance.
        let k2 = p_pred / (p_pred + r);
        assert!((tr.state.x[0] - x_pred) / delta >= k2 * 0.9);
    }

    #[test]
    fn covariance_stays_symmetric_psd_over_random_steps() {
        let params = TrackerParams::default();
        let ego = EgoState { v: 15.0, omega: 0.05 };
        let mut tr = make_track(StateVec::new(10.0, -3.0, 0.4, 12.0, 0.1));
        let mut state = 5u64;
        let mut t = 0.0;
        for step in 0..500 {
            predict(&mut tr, &ego, 0.1, &params).unwrap();
            t += 0.1;
            if step % 3 != 2 {
                let (z, _) = measurement_model(&tr.state.x, &ego);
                let cluster = make_cluster(
                    z[0] + lcg(&mut state) - 0.5,
                    z[1] + lcg(&mut state) - 0.5,
                    (z[2] + lcg(&mut state) - 0.5, z[3] + lcg(&mut state) - 0.5),
                    z[4] + 0.1 * (lcg(&mut state) - 0.5),
                    t,
                );
                update(&mut tr, &cluster, &ego, &params).unwrap();
            }
            let p = tr.state.p;
            let asym = (p - p.transpose()).abs().max();
            assert!(asym < 1e-12, "asymmetry {asym}");
            let eig = p.symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&l| l >= -1e-9), "eig {eig:?}");
            assert!(tr.state.x[2] > -std::f64::consts::PI && tr.state.x[2] <= std::f64::consts::PI);
        }
    }

    #[test]
    fn associate_gates_and_pairs() {
        let params = TrackerParams::default();
        let tr = make_track(StateVec::new(5.0, 5.0, 0.0, 3.0, 0.0));
        let near = make_cluster(5.5, 5.2, (3.0, 0.0), 0.0, 0.1);
        let a = associate(&[tr.clone()], &[near], &params);
        assert_eq!(a.pairs, vec![(0, 0)]);

        let far = make_cluster(5.0 + 2.0 * params.gamma, 5.0, (3.0, 0.0), 0.0, 0.1);
        let a = associate(&[tr], &[far], &params);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unassigned_rows, vec![0]);
        assert_eq!(a.unassigned_cols, vec![0]);
    }

    #[test]
    fn lifecycle_confirmation_example() {
        let params = TrackerParams::default(); // M1=3, N1=5
        let mut tr = make_track(StateVec::zeros());
        for (k, hit) in [true, false, true, true].into_iter().enumerate() {
            lifecycle_step(&mut tr, hit, &params);
            if k < 3 {
                assert_eq!(tr.status, TrackStatus::Tentative);
            }
        }
        assert_eq!(tr.status, TrackStatus::Confirmed);
    }

    #[test]
    fn lifecycle_deletion_example() {
        let params = TrackerParams::default(); // M2=4, N2=5
        let mut tr = make_track(StateVec::zeros());
        tr.status = TrackStatus::Confirmed;
        for hit in [true, false, false, false] {
            lifecycle_step(&mut tr, hit, &params);
            assert_eq!(tr.status, TrackStatus::Confirmed);
        }
        lifecycle_step(&mut tr, false, &params);
        assert_eq!(tr.status, TrackStatus::Deleted);
    }

    #[test]
    fn lifecycle_matches_window_count_oracle_over_all_patterns() {
        let params = TrackerParams::default();
        for bits in 0..32u32 {
            let pattern: Vec<bool> = (0..5).map(|k| bits >> k & 1 == 1).collect();

            // Tentative track consuming the pattern.
            let mut tr = make_track(StateVec::zeros());
            let mut oracle_status = TrackStatus::Tentative;
            let mut hist: Vec<bool> = Vec::new();
            for &hit in &pattern {
                lifecycle_step(&mut tr, hit, &params);
                // Oracle: recount the window directly.
                if oracle_status == TrackStatus::Tentative {
                    hist.push(hit);
                    let last: Vec<bool> =
                        hist.iter().rev().take(params.n1).copied().collect();
                    let hits = last.iter().filter(|&&h| h).count();
                    if hits >= params.m1 {
                        oracle_status = TrackStatus::Confirmed;
                    } else if hist.len() >= params.n1 && hits == 0 {
                        oracle_status = TrackStatus::Deleted;
                    }
                } else if oracle_status == TrackStatus::Confirmed {
                    hist.push(hit);
                    let misses = hist
                        .iter()
                        .rev()
                        .take(params.n2)
                        .filter(|&&h| !h)
                        .count();
                    if misses >= params.m2 {
                        oracle_status = TrackStatus::Deleted;
                    }
                }
                assert_eq!(tr.status, oracle_status, "pattern {pattern:?}");
                if tr.status == TrackStatus::Deleted {
                    break;
                }
            }
        }
    }

    #[test]
    fn tracker_confirms_steady_stream_with_stable_id() {
        let mut tracker = Tracker::new(TrackerParams::default()).unwrap();
        let ego = EgoState::default();
        let mut confirmed_at = None;
        let mut ids = std::collections::BTreeSet::new();
        for k in 0..20 {
            let t = k as f64 * 0.1;
            let x = 10.0 + 3.0 * t;
            let cluster = make_cluster(x, 2.0, (3.0, 0.0), 0.0, t);
            let out = tracker.step(&[cluster], &ego, t).unwrap();
            if !out.is_empty() && confirmed_at.is_none() {
                confirmed_at = Some(k);
            }
            for o in &out {
                ids.insert(o.id);
                assert_relative_eq!(o.v, 3.0, epsilon = 0.5);
            }
        }
        assert_eq!(confirmed_at, Some(2)); // hits at steps 0,1,2 with M1=3
        assert_eq!(ids.len(), 1);
    }

    #[test]
    fn tracker_deletes_after_starvation() {
        let mut tracker = Tracker::new(TrackerParams::default()).unwrap();
        let ego = EgoState::default();
        let mut t;
        for k in 0..5 {
            t = k as f64 * 0.1;
            let cluster = make_cluster(10.0 + t, 0.0, (1.0, 0.0), 0.0, t);
            tracker.step(&[cluster], &ego, t).unwrap();
        }
        assert!(tracker.tracks().iter().any(|tr| tr.status == TrackStatus::Confirmed));
        for k in 0..6 {
            t = 0.5 + (k + 1) as f64 * 0.1;
            let out = tracker.step(&[], &ego, t).unwrap();
            if k >= 4 {
                assert!(out.is_empty());
            }
        }
        assert!(tracker.tracks().is_empty());
    }

    #[test]
    fn two_separated_clusters_get_distinct_persistent_ids() {
        let mut tracker = Tracker::new(TrackerParams::default()).unwrap();
        let ego = EgoState::default();
        let mut pairs_seen = std::collections::BTreeSet::new();
        for k in 0..15 {
            let t = k as f64 * 0.1;
            let a = make_cluster(5.0 + 2.0 * t, 0.0, (2.0, 0.0), 0.0, t);
            let b = make_cluster(40.0 - 3.0 * t, 8.0, (-3.0, 0.0), 0.0, t);
            let out = tracker.step(&[a, b], &ego, t).unwrap();
            if out.len() == 2 {
                let mut ids: Vec<u64> = out.iter().map(|o| o.id).collect();
                ids.sort_unstable();
                pairs_seen.insert(ids);
            }
        }
        assert_eq!(pairs_seen.len(), 1);
        let ids = pairs_seen.into_iter().next().unwrap();
        assert_eq!(ids.len(), 2);
        assert_ne!(ids[0], ids[1]);
    }

    #[test]
    fn non_monotonic_time_rejected() {
        let mut tracker = Tracker::new(TrackerParams::default()).unwrap();
        let ego = EgoState::default();
        tracker.step(&[], &ego, 0.1).unwrap();
        assert!(matches!(
            tracker.step(&[], &ego, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_relative_eq!(wrap_angle(PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.3), 0.3);
    }
}
