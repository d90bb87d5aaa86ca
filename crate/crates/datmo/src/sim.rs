//! Synthetic LiDAR scenario generator: a multilane road with optional
//! curvature, an ego vehicle driving one lane, a single box-shaped target
//! vehicle on a keep-lane or lane-change trajectory, and a spinning LiDAR
//! ray-cast against the target box and the ground plane.
//!
//! Trajectories are closed-form, so the ground truth (poses, velocities,
//! yaw rates, configuration variables) is exact; sensor noise only affects
//! the point cloud.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::PointCloud;
use crate::error::{Error, Result};
use crate::track::{wrap_angle, EgoState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvType {
    Sedan,
    Van,
    Cyclist,
}

impl TvType {
    /// Representative envelope length x width x height, meters.
    pub fn dimensions(self) -> [f64; 3] {
        match self {
            TvType::Sedan => [4.7, 1.8, 1.4],
            TvType::Van => [5.4, 2.0, 2.2],
            TvType::Cyclist => [1.8, 0.6, 1.7],
        }
    }

    /// Component boxes in the vehicle frame, for the default envelope:
    /// (center offset along length, z bottom, length, width, height)
    /// fractions of the envelope. Vehicles are not plain slabs; the
    /// body/cabin height steps give the BEV grid texture that moves with
    /// the vehicle, as a meshed model would.
    fn parts(self) -> &'static [BoxPart] {
        match self {
            TvType::Sedan => &[
                // Body up to the beltline, full footprint.
                BoxPart {
                    dx: 0.0,
                    z0: 0.0,
                    z1: 0.64,
                    length: 1.0,
                    width: 1.0,
                },
                // Cabin, set slightly rearward.
                BoxPart {
                    dx: -0.05,
                    z0: 0.64,
                    z1: 1.0,
                    length: 0.55,
                    width: 0.92,
                },
            ],
            TvType::Van => &[
                // Tall body.
                BoxPart {
                    dx: -0.08,
                    z0: 0.0,
                    z1: 1.0,
                    length: 0.84,
                    width: 1.0,
                },
                // Low hood at the front.
                BoxPart {
                    dx: 0.42,
                    z0: 0.0,
                    z1: 0.45,
                    length: 0.16,
                    width: 0.95,
                },
            ],
            TvType::Cyclist => &[
                // Bicycle.
                BoxPart {
                    dx: 0.0,
                    z0: 0.0,
                    z1: 0.6,
                    length: 1.0,
                    width: 0.5,
                },
                // Rider.
                BoxPart {
                    dx: -0.1,
                    z0: 0.6,
                    z1: 1.0,
                    length: 0.45,
                    width: 1.0,
                },
            ],
        }
    }
}

/// One component box of a vehicle, in envelope fractions.
#[derive(Debug, Clone, Copy)]
struct BoxPart {
    /// Center offset along the vehicle length, fraction of length.
    dx: f64,
    /// Vertical extent, fractions of the envelope height.
    z0: f64,
    z1: f64,
    length: f64,
    width: f64,
}

/// World-frame component boxes of a vehicle with the given envelope.
pub fn vehicle_boxes(kind: TvType, dims: [f64; 3], pose: &Kinematics) -> Vec<SceneBox> {
    kind.parts()
        .iter()
        .map(|p| {
            let (c, s) = (pose.heading.cos(), pose.heading.sin());
            let off = p.dx * dims[0];
            SceneBox {
                center: [pose.pos[0] + c * off, pose.pos[1] + s * off],
                yaw: pose.heading,
                half: [
                    p.length * dims[0] / 2.0,
                    p.width * dims[1] / 2.0,
                    (p.z1 - p.z0) * dims[2] / 2.0,
                ],
                z_bottom: BOX_CLEARANCE + p.z0 * dims[2],
            }
        })
        .collect()
}

/// Ground clearance of the target boxes, meters.
pub const BOX_CLEARANCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Maneuver {
    Keep,
    /// Lateral displacement `n` meters over `s` seconds starting at t = 0,
    /// following a quintic profile (zero lateral velocity and acceleration
    /// at both ends).
    LaneChange { s: f64, n: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadSpec {
    /// Signed curvature of the reference (EV) lane, 1/m. Positive curves
    /// left.
    pub curvature: f64,
    pub lane_width: f64,
    pub num_lanes: usize,
}

impl Default for RoadSpec {
    fn default() -> Self {
        RoadSpec {
            curvature: 1.0 / 500.0,
            lane_width: 3.5,
            num_lanes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvSpec {
    pub speed: f64,
    /// Lane index of the EV; the reference arc is this lane's centerline.
    pub lane: i32,
}

impl Default for EvSpec {
    fn default() -> Self {
        EvSpec {
            speed: 20.0,
            lane: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvSpec {
    pub kind: TvType,
    /// Override of the box dimensions.
    #[serde(default)]
    pub dims: Option<[f64; 3]>,
    /// Speed along its lane, m/s.
    pub speed: f64,
    pub lane: i32,
    /// Extra lateral offset from the lane grid, meters (left positive).
    #[serde(default)]
    pub lateral_offset: f64,
    /// Along-road start offset relative to the EV, meters. `None` centers
    /// the encounter: the TV is abreast of the EV at mid-duration.
    #[serde(default)]
    pub longitudinal_offset: Option<f64>,
    pub maneuver: Maneuver,
}

impl Default for TvSpec {
    fn default() -> Self {
        TvSpec {
            kind: TvType::Sedan,
            dims: None,
            speed: 15.0,
            lane: 1,
            lateral_offset: 0.0,
            longitudinal_offset: None,
            maneuver: Maneuver::Keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarSpec {
    pub channels: usize,
    /// (lowest, highest) beam elevation, degrees.
    pub vertical_fov_deg: (f64, f64),
    pub horizontal_resolution_deg: f64,
    pub rate_hz: f64,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub mount_height: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        // Mimics the KITTI collection sensor (HDL-64E).
        LidarSpec {
            channels: 64,
            vertical_fov_deg: (-24.8, 2.0),
            horizontal_resolution_deg: 0.2,
            rate_hz: 10.0,
            max_range: 120.0,
            noise_sigma: 0.02,
            mount_height: 1.73,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub road: RoadSpec,
    #[serde(default)]
    pub ev: EvSpec,
    pub tv: TvSpec,
    pub duration: f64,
    #[serde(default)]
    pub lidar: LidarSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            road: RoadSpec::default(),
            ev: EvSpec::default(),
            tv: TvSpec::default(),
            duration: 12.0,
            lidar: LidarSpec::default(),
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.lidar.rate_hz > 0.0) || !(self.lidar.max_range > 0.0) {
            return Err(Error::Config("lidar rate and range must be positive".into()));
        }
        if self.lidar.channels == 0 || !(self.lidar.horizontal_resolution_deg > 0.0) {
            return Err(Error::Config("lidar needs channels and resolution".into()));
        }
        if let Maneuver::LaneChange { s, .. } = self.tv.maneuver {
            if !(s > 0.0) {
                return Err(Error::Config("lane change duration must be positive".into()));
            }
        }
        if self.tv.speed < 0.0 || self.ev.speed < 0.0 {
            return Err(Error::Config("speeds must be nonnegative".into()));
        }
        Ok(())
    }

    /// Number of frames emitted by [`run_scenario`].
    pub fn frame_count(&self) -> usize {
        (self.duration * self.lidar.rate_hz).round() as usize
    }
}

/// World pose and first derivatives of a vehicle at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub pos: [f64; 2],
    pub heading: f64,
    pub vel: [f64; 2],
    pub yaw_rate: f64,
}

/// Quintic 0 -> n profile over [0, s]: value, rate, acceleration.
fn quintic(t: f64, s: f64, n: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if t >= s {
        return (n, 0.0, 0.0);
    }
    let tau = t / s;
    let t2 = tau * tau;
    let t3 = t2 * tau;
    let value = n * (10.0 * t3 - 15.0 * t2 * t2 + 6.0 * t2 * t3);
    let rate = n * (30.0 * t2 - 60.0 * t3 + 30.0 * t2 * t2) / s;
    let acc = n * (60.0 * tau - 180.0 * t2 + 120.0 * t3) / (s * s);
    (value, rate, acc)
}

/// Closed-form pose/velocity of a point following the road at lateral
/// offset `l(t)` (left positive) and reference-arc position `s(t)`.
fn road_kinematics(
    road: &RoadSpec,
    s_arc: f64,
    s_rate: f64,
    l: f64,
    l_rate: f64,
    l_acc: f64,
) -> Kinematics {
    let k = road.curvature;
    if k.abs() < 1e-12 {
        let vel = [s_rate, l_rate];
        let acc = [0.0, l_acc];
        let speed_sq = (vel[0] * vel[0] + vel[1] * vel[1]).max(1e-12);
        return Kinematics {
            pos: [s_arc, l],
            heading: vel[1].atan2(vel[0]),
            vel,
            yaw_rate: (vel[0] * acc[1] - vel[1] * acc[0]) / speed_sq,
        };
    }
    let rho = 1.0 / k;
    let phi = s_arc * k;
    let phi_rate = s_rate * k;
    // u points radially outward from the arc center at (0, rho); the left
    // normal is -u.
    let u = [phi.sin(), -phi.cos()];
    let t_hat = [phi.cos(), phi.sin()];
    let r_off = rho - l;
    let pos = [r_off * u[0], rho + r_off * u[1]];
    let vel = [
        r_off * phi_rate * t_hat[0] - l_rate * u[0],
        r_off * phi_rate * t_hat[1] - l_rate * u[1],
    ];
    // acc = -2 l' phi' t_hat + (r_off phi'^2 + l'') n_hat with n_hat = -u.
    let acc = [
        -2.0 * l_rate * phi_rate * t_hat[0] - (r_off * phi_rate * phi_rate + l_acc) * u[0],
        -2.0 * l_rate * phi_rate * t_hat[1] - (r_off * phi_rate * phi_rate + l_acc) * u[1],
    ];
    let speed_sq = (vel[0] * vel[0] + vel[1] * vel[1]).max(1e-12);
    Kinematics {
        pos,
        heading: vel[1].atan2(vel[0]),
        vel,
        yaw_rate: (vel[0] * acc[1] - vel[1] * acc[0]) / speed_sq,
    }
}

/// Time-parameterized trajectory along the road.
pub struct Trajectory {
    road: RoadSpec,
    /// Reference-arc position at t = 0.
    s0: f64,
    /// Reference-arc advance rate.
    s_rate: f64,
    /// Base lateral offset.
    l0: f64,
    maneuver: Maneuver,
}

impl Trajectory {
    pub fn at(&self, t: f64) -> Kinematics {
        let (dl, dl_rate, dl_acc) = match self.maneuver {
            Maneuver::Keep => (0.0, 0.0, 0.0),
            Maneuver::LaneChange { s, n } => quintic(t, s, n),
        };
        road_kinematics(
            &self.road,
            self.s0 + self.s_rate * t,
            self.s_rate,
            self.l0 + dl,
            dl_rate,
            dl_acc,
        )
    }
}

/// Build the TV's trajectory from the scenario spec.
///
/// The TV advances along the reference arc at the rate that makes its
/// own-lane speed equal `tv.speed`; on straight roads that is the speed
/// itself.
pub fn build_trajectory(spec: &ScenarioSpec) -> Result<Trajectory> {
    spec.validate()?;
    let l0 = (spec.tv.lane - spec.ev.lane) as f64 * spec.road.lane_width + spec.tv.lateral_offset;
    let k = spec.road.curvature;
    let s_rate = if k.abs() < 1e-12 {
        spec.tv.speed
    } else {
        let rho = 1.0 / k;
        let r_lane = rho - l0;
        if r_lane.abs() < 1.0 {
            return Err(Error::Config(
                "tv lane radius degenerates at this curvature/offset".into(),
            ));
        }
        // Own-lane speed is |r_lane * phi_rate| with phi_rate = s_rate * k.
        spec.tv.speed * rho / r_lane
    };
    let s0 = match spec.tv.longitudinal_offset {
        Some(s) => s,
        // Abreast at mid-duration.
        None => -(s_rate - spec.ev.speed) * spec.duration / 2.0,
    };
    Ok(Trajectory {
        road: spec.road.clone(),
        s0,
        s_rate,
        l0,
        maneuver: spec.tv.maneuver,
    })
}

/// EV trajectory: the reference lane at constant speed.
pub fn ev_trajectory(spec: &ScenarioSpec) -> Trajectory {
    Trajectory {
        road: spec.road.clone(),
        s0: 0.0,
        s_rate: spec.ev.speed,
        l0: 0.0,
        maneuver: Maneuver::Keep,
    }
}

/// Per-target exact ground truth, expressed in the EV frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvTruth {
    pub id: u64,
    /// Position, meters.
    pub x: f64,
    pub y: f64,
    /// Heading relative to EV heading, radians.
    pub theta: f64,
    /// Absolute velocity in EV axes, m/s.
    pub vx_abs: f64,
    pub vy_abs: f64,
    /// Apparent (rotating-frame) velocity, m/s.
    pub vx_rel: f64,
    pub vy_rel: f64,
    /// Absolute yaw rate, rad/s.
    pub yaw_rate: f64,
    pub yaw_rate_rel: f64,
    /// Distance to the EV, meters.
    pub l_n: f64,
    /// Angle between the TV heading and the line of sight to the EV, [0, pi].
    pub beta_n: f64,
    /// Relative speed magnitude, m/s.
    pub delta_v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub t: f64,
    pub ego: EgoState,
    pub targets: Vec<TvTruth>,
}

/// Exact relative ground truth of a TV given both world kinematics.
pub fn relative_truth(id: u64, ev: &Kinematics, tv: &Kinematics) -> TvTruth {
    let (c, s) = ((-ev.heading).cos(), (-ev.heading).sin());
    let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
    let p = rot([tv.pos[0] - ev.pos[0], tv.pos[1] - ev.pos[1]]);
    let v_abs = rot(tv.vel);
    let v_diff = rot([tv.vel[0] - ev.vel[0], tv.vel[1] - ev.vel[1]]);
    let omega = ev.yaw_rate;
    let v_rel = [v_diff[0] + omega * p[1], v_diff[1] - omega * p[0]];
    let l_n = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let theta = wrap_angle(tv.heading - ev.heading);
    let beta_n = if l_n < 1e-9 {
        0.0
    } else {
        let los = [-p[0] / l_n, -p[1] / l_n];
        let hv = [theta.cos(), theta.sin()];
        (hv[0] * los[0] + hv[1] * los[1]).clamp(-1.0, 1.0).acos()
    };
    let dvx = tv.vel[0] - ev.vel[0];
    let dvy = tv.vel[1] - ev.vel[1];
    TvTruth {
        id,
        x: p[0],
        y: p[1],
        theta,
        vx_abs: v_abs[0],
        vy_abs: v_abs[1],
        vx_rel: v_rel[0],
        vy_rel: v_rel[1],
        yaw_rate: tv.yaw_rate,
        yaw_rate_rel: tv.yaw_rate - ev.yaw_rate,
        l_n,
        beta_n,
        delta_v: (dvx * dvx + dvy * dvy).sqrt(),
    }
}

/// An oriented box in the world: footprint pose plus vertical extent.
#[derive(Debug, Clone, Copy)]
pub struct SceneBox {
    pub center: [f64; 2],
    pub yaw: f64,
    /// Half extents: length/2, width/2, height/2.
    pub half: [f64; 3],
    /// Box bottom height above ground.
    pub z_bottom: f64,
}

/// Nearest hit among the boxes (5 faces, no underside) and the ground
/// plane, within `max_range`. Returns the range.
fn cast_ray(origin: [f64; 3], dir: [f64; 3], boxes: &[SceneBox], max_range: f64) -> Option<f64> {
    let mut best = f64::INFINITY;

    // Ground plane z = 0.
    if dir[2] < -1e-12 {
        let t = -origin[2] / dir[2];
        if t > 1e-9 {
            best = t;
        }
    }

    for b in boxes {
        let (c, s) = ((-b.yaw).cos(), (-b.yaw).sin());
        let zc = b.z_bottom + b.half[2];
        let o = [
            c * (origin[0] - b.center[0]) - s * (origin[1] - b.center[1]),
            s * (origin[0] - b.center[0]) + c * (origin[1] - b.center[1]),
            origin[2] - zc,
        ];
        let d = [c * dir[0] - s * dir[1], s * dir[0] + c * dir[1], dir[2]];

        let mut tmin = 1e-9;
        let mut tmax = f64::INFINITY;
        let mut entry_axis = usize::MAX;
        let mut miss = false;
        for axis in 0..3 {
            let h = b.half[axis];
            if d[axis].abs() < 1e-12 {
                if o[axis].abs() > h {
                    miss = true;
                    break;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let mut t1 = (-h - o[axis]) * inv;
            let mut t2 = (h - o[axis]) * inv;
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            if t1 > tmin {
                tmin = t1;
                entry_axis = axis;
            }
            tmax = tmax.min(t2);
            if tmin > tmax {
                miss = true;
                break;
            }
        }
        if miss || entry_axis == usize::MAX || tmin >= best {
            continue;
        }
        // No underside: a ray entering upward through the bottom face does
        // not return.
        if entry_axis == 2 && d[2] > 0.0 {
            continue;
        }
        best = tmin;
    }

    (best <= max_range).then_some(best)
}

/// Ray-cast one LiDAR frame. Rays are ordered channel-major (top beam
/// first), then by azimuth; range noise is drawn per returned point from
/// `rng`, so a fixed RNG stream makes the frame bit-reproducible. Points
/// are returned in the sensor frame (x forward, y left, z up, origin at
/// the sensor).
pub fn raycast_frame(
    ev: &Kinematics,
    boxes: &[SceneBox],
    lidar: &LidarSpec,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let sensor = [ev.pos[0], ev.pos[1], lidar.mount_height];
    let n_az = (360.0 / lidar.horizontal_resolution_deg).round() as usize;
    let noise = Normal::new(0.0, lidar.noise_sigma.max(1e-300)).unwrap();
    let (hc, hs) = (ev.heading.cos(), ev.heading.sin());
    let mut points = Vec::new();
    let (min_el, max_el) = lidar.vertical_fov_deg;
    for ch in 0..lidar.channels {
        let el = if lidar.channels == 1 {
            0.5 * (min_el + max_el)
        } else {
            max_el + (min_el - max_el) * ch as f64 / (lidar.channels - 1) as f64
        };
        let (sin_el, cos_el) = el.to_radians().sin_cos();
        for az_idx in 0..n_az {
            let az = (az_idx as f64 * lidar.horizontal_resolution_deg).to_radians();
            // Sensor-frame direction, rotated into the world by the heading.
            let dx = cos_el * az.cos();
            let dy = cos_el * az.sin();
            let dir = [hc * dx - hs * dy, hs * dx + hc * dy, sin_el];
            if let Some(range) = cast_ray(sensor, dir, boxes, lidar.max_range) {
                let r = if lidar.noise_sigma > 0.0 {
                    range + noise.sample(rng)
                } else {
                    range
                };
                // Emit directly in the sensor frame: the unrotated ray
                // direction scaled by the (noisy) range.
                points.push([dx * r, dy * r, sin_el * r]);
            }
        }
    }
    PointCloud::new(points)
}

/// One simulated frame.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub index: usize,
    pub t: f64,
    pub cloud: PointCloud,
    pub ego: EgoState,
    pub truth: GroundTruthFrame,
}

/// Lazily generated scenario frames.
pub struct ScenarioRun {
    spec: ScenarioSpec,
    ev: Trajectory,
    tv: Trajectory,
    dims: [f64; 3],
    frame: usize,
    frames_total: usize,
}

impl ScenarioRun {
    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn frames_total(&self) -> usize {
        self.frames_total
    }
}

impl Iterator for ScenarioRun {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        if self.frame >= self.frames_total {
            return None;
        }
        let idx = self.frame;
        self.frame += 1;
        let t = idx as f64 / self.spec.lidar.rate_hz;
        let ev = self.ev.at(t);
        let tv = self.tv.at(t);
        let boxes = vehicle_boxes(self.spec.tv.kind, self.dims, &tv);
        // Per-frame noise stream keyed by (seed, frame index): every frame
        // is reproducible on its own.
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.spec
                .seed
                .wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let cloud = raycast_frame(&ev, &boxes, &self.spec.lidar, &mut rng);
        let ego = EgoState {
            v: self.spec.ev.speed,
            omega: ev.yaw_rate,
        };
        let truth = GroundTruthFrame {
            t,
            ego,
            targets: vec![relative_truth(0, &ev, &tv)],
        };
        Some(SimFrame {
            index: idx,
            t,
            cloud,
            ego,
            truth,
        })
    }
}

/// Run a scenario, yielding frames at the LiDAR rate for the configured
/// duration. Ground truth is exact; only the point cloud carries noise.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioRun> {
    spec.validate()?;
    let tv = build_trajectory(spec)?;
    Ok(ScenarioRun {
        ev: ev_trajectory(spec),
        tv,
        dims: spec.tv.dims.unwrap_or_else(|| spec.tv.kind.dimensions()),
        frame: 0,
        frames_total: spec.frame_count(),
        spec: spec.clone(),
    })
}

/// Sweep ranges over the scenario configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub speeds: Vec<f64>,
    pub lateral_offsets: Vec<f64>,
    pub maneuvers: Vec<Maneuver>,
    pub tv_types: Vec<TvType>,
    /// Keep every k-th spec of the full enumeration.
    pub decimate: usize,
}

impl SweepSpec {
    /// The full primary sweep: TV speeds 10..40 step 2 m/s, start-lane
    /// lateral offsets -80..80 step 1 m, keep-lane plus 2 s and 4 s lane
    /// changes of half a lane width, three vehicle types (cyclists keep
    /// lane only).
    pub fn paper_defaults(lane_width: f64) -> Self {
        SweepSpec {
            speeds: (0..16).map(|k| 10.0 + 2.0 * k as f64).collect(),
            lateral_offsets: (-80..=80).map(|k| k as f64).collect(),
            maneuvers: vec![
                Maneuver::Keep,
                Maneuver::LaneChange {
                    s: 2.0,
                    n: lane_width / 2.0,
                },
                Maneuver::LaneChange {
                    s: 4.0,
                    n: lane_width / 2.0,
                },
            ],
            tv_types: vec![TvType::Sedan, TvType::Van, TvType::Cyclist],
            decimate: 1,
        }
    }
}

/// Cartesian product of the sweep ranges (cyclists keep lane only),
/// deterministically ordered type > maneuver > speed > offset, decimated,
/// each spec with a distinct noise seed derived from the base seed.
pub fn sweep_configurations(base: &ScenarioSpec, sweep: &SweepSpec) -> Result<Vec<ScenarioSpec>> {
    if sweep.speeds.is_empty()
        || sweep.lateral_offsets.is_empty()
        || sweep.maneuvers.is_empty()
        || sweep.tv_types.is_empty()
    {
        return Err(Error::Config("sweep ranges must be nonempty".into()));
    }
    let step = sweep.decimate.max(1);
    let mut specs = Vec::new();
    let mut index = 0usize;
    for &kind in &sweep.tv_types {
        for maneuver in &sweep.maneuvers {
            if kind == TvType::Cyclist && !matches!(maneuver, Maneuver::Keep) {
                continue;
            }
            for &speed in &sweep.speeds {
                for &offset in &sweep.lateral_offsets {
                    if index % step == 0 {
                        let mut spec = base.clone();
                        spec.tv.kind = kind;
                        spec.tv.dims = None;
                        spec.tv.maneuver = *maneuver;
                        spec.tv.speed = speed;
                        spec.tv.lane = spec.ev.lane;
                        spec.tv.lateral_offset = offset;
                        spec.tv.longitudinal_offset = None;
                        spec.seed = base.seed.wrapping_add(index as u64);
                        specs.push(spec);
                    }
                    index += 1;
                }
            }
        }
    }
    Ok(specs)
}

/// Write a scenario dataset: `NNNNNN.bin` point clouds (KITTI Velodyne
/// layout), `ego.csv` (t,v,omega) and `gt.jsonl` (one ground-truth frame
/// per line). Returns the frame count.
pub fn write_dataset(dir: &std::path::Path, spec: &ScenarioSpec) -> Result<usize> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let ego_path = dir.join("ego.csv");
    let gt_path = dir.join("gt.jsonl");
    let ego_file = std::fs::File::create(&ego_path)
        .map_err(|e| Error::io(ego_path.display().to_string(), e))?;
    let gt_file =
        std::fs::File::create(&gt_path).map_err(|e| Error::io(gt_path.display().to_string(), e))?;
    let mut ego_w = std::io::BufWriter::new(ego_file);
    let mut gt_w = std::io::BufWriter::new(gt_file);
    writeln!(ego_w, "t,v,omega").map_err(|e| Error::io(ego_path.display().to_string(), e))?;
    let mut count = 0;
    for frame in run_scenario(spec)? {
        let bin = dir.join(format!("{:06}.bin", frame.index));
        crate::io::write_velodyne_bin(&bin, &frame.cloud)?;
        writeln!(ego_w, "{},{},{}", frame.t, frame.ego.v, frame.ego.omega)
            .map_err(|e| Error::io(ego_path.display().to_string(), e))?;
        let line = serde_json::to_string(&frame.truth)
            .map_err(|e| Error::Data(format!("gt serialization: {e}")))?;
        writeln!(gt_w, "{line}").map_err(|e| Error::io(gt_path.display().to_string(), e))?;
        count += 1;
    }
    Ok(count)
}
