//! KITTI tracking dataset ingestion: Velodyne binary scans, tracking
//! labels, and the velo-to-cam calibration needed to bring the labeled
//! boxes into the LiDAR frame.
//!
//! Expected sequence layout:
//!
//! ```text
//! seq/
//!   velodyne/000000.bin ...   (f32 x,y,z,intensity records)
//!   label_02/0000.txt         (tracking labels, camera frame)
//!   calib/0000.txt            (P0..P3, R_rect, Tr_velo_cam, ...)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::sim::{GroundTruthFrame, TvTruth};
use crate::track::{wrap_angle, EgoState};

pub use crate::io::read_velodyne_bin;

/// One line of a tracking label file, camera-frame quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingLabel {
    pub frame: usize,
    pub track_id: i64,
    pub kind: String,
    /// Box height, width, length (KITTI order), meters.
    pub dims_hwl: [f64; 3],
    /// Box bottom-center in the rectified camera frame, meters.
    pub location_cam: [f64; 3],
    /// Yaw around the camera Y axis, radians.
    pub rotation_y: f64,
}

/// Classes kept for evaluation; pedestrians and misc are ignored.
pub const TRACKED_CLASSES: [&str; 3] = ["Car", "Van", "Cyclist"];

/// Parse a tracking label file. Lines with other classes (including
/// `DontCare` and `Pedestrian`) are dropped.
pub fn parse_labels(path: &Path) -> Result<Vec<TrackingLabel>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 17 {
            return Err(Error::Data(format!(
                "{}:{}: expected 17+ label fields, got {}",
                path.display(),
                lineno + 1,
                f.len()
            )));
        }
        let kind = f[2];
        if !TRACKED_CLASSES.contains(&kind) {
            continue;
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| {
                Error::Data(format!("{}:{}: bad number {s:?}: {e}", path.display(), lineno + 1))
            })
        };
        labels.push(TrackingLabel {
            frame: num(f[0])? as usize,
            track_id: num(f[1])? as i64,
            kind: kind.to_string(),
            dims_hwl: [num(f[10])?, num(f[11])?, num(f[12])?],
            location_cam: [num(f[13])?, num(f[14])?, num(f[15])?],
            rotation_y: num(f[16])?,
        });
    }
    Ok(labels)
}

/// Calibration of one sequence: the velo -> rectified-camera transform and
/// its inverse.
#[derive(Debug, Clone)]
pub struct Calib {
    /// Homogeneous rectified-camera-from-velo transform (R_rect * Tr).
    pub cam_from_velo: Matrix4<f64>,
    pub velo_from_cam: Matrix4<f64>,
}

impl Calib {
    pub fn new(tr_velo_to_cam: Matrix4<f64>, r_rect: Matrix4<f64>) -> Result<Self> {
        let cam_from_velo = r_rect * tr_velo_to_cam;
        let velo_from_cam = cam_from_velo.try_inverse().ok_or_else(|| {
            Error::Data("calibration matrix is not invertible".into())
        })?;
        Ok(Calib {
            cam_from_velo,
            velo_from_cam,
        })
    }

    pub fn cam_to_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.velo_from_cam * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn velo_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.cam_from_velo * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }
}

fn mat4_from_3x4(vals: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = vals[r * 4 + c];
        }
    }
    m
}

fn mat4_from_3x3(vals: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = vals[r * 3 + c];
        }
    }
    m
}

/// Parse a KITTI calibration file. Accepts both the tracking naming
/// (`Tr_velo_cam`, `R_rect`) and the object-benchmark naming
/// (`Tr_velo_to_cam`, `R0_rect`).
pub fn parse_calib(path: &Path) -> Result<Calib> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut tr: Option<Vec<f64>> = None;
    let mut rect: Option<Vec<f64>> = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let tag = tag.trim_end_matches(':');
        let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let Ok(vals) = vals else { continue };
        match tag {
            "Tr_velo_cam" | "Tr_velo_to_cam" => tr = Some(vals),
            "R_rect" | "R0_rect" => rect = Some(vals),
            _ => {}
        }
    }
    let tr = tr.ok_or_else(|| {
        Error::Data(format!("{}: missing Tr_velo_cam entry", path.display()))
    })?;
    if tr.len() != 12 {
        return Err(Error::Data(format!(
            "{}: Tr_velo_cam needs 12 values, got {}",
            path.display(),
            tr.len()
        )));
    }
    let rect_m = match rect {
        Some(r) if r.len() == 9 => mat4_from_3x3(&r),
        Some(r) => {
            return Err(Error::Data(format!(
                "{}: R_rect needs 9 values, got {}",
                path.display(),
                r.len()
            )))
        }
        None => Matrix4::identity(),
    };
    Calib::new(mat4_from_3x4(&tr), rect_m)
}

/// A label's box pose in the LiDAR frame: planar center, yaw, footprint.
#[derive(Debug, Clone)]
pub struct VeloBox {
    pub track_id: i64,
    pub kind: String,
    pub center: [f64; 3],
    pub yaw: f64,
    /// Length, width (planar footprint), meters.
    pub lw: [f64; 2],
}

/// Bring a label into the LiDAR frame. The camera-frame location is the
/// box bottom-center with Y pointing down; yaw converts as
/// `yaw_velo = -rotation_y - pi/2`.
pub fn label_to_velo(label: &TrackingLabel, calib: &Calib) -> VeloBox {
    let bottom = label.location_cam;
    let center_cam = [
        bottom[0],
        bottom[1] - label.dims_hwl[0] / 2.0,
        bottom[2],
    ];
    let center = calib.cam_to_velo(center_cam);
    VeloBox {
        track_id: label.track_id,
        kind: label.kind.clone(),
        center,
        yaw: wrap_angle(-label.rotation_y - std::f64::consts::FRAC_PI_2),
        lw: [label.dims_hwl[2], label.dims_hwl[1]],
    }
}

/// Ground-truth velocity utility: central differences of the box centers
/// across frames (one-sided at the sequence ends), in the LiDAR frame.
///
/// KITTI provides no velocity ground truth; differencing per-frame box
/// centers folds the (unknown) ego motion into the result, so these
/// velocities are apparent ego-frame velocities, consistent with runs
/// where the ego state defaults to zero.
pub fn derive_gt_frames(
    labels: &[TrackingLabel],
    calib: &Calib,
    rate_hz: f64,
    frame_count: usize,
) -> Vec<GroundTruthFrame> {
    // track_id -> frame -> box
    let mut per_track: BTreeMap<i64, BTreeMap<usize, VeloBox>> = BTreeMap::new();
    for label in labels {
        per_track
            .entry(label.track_id)
            .or_default()
            .insert(label.frame, label_to_velo(label, calib));
    }
    let dt = 1.0 / rate_hz;
    let mut frames: Vec<GroundTruthFrame> = (0..frame_count)
        .map(|k| GroundTruthFrame {
            t: k as f64 * dt,
            ego: EgoState::default(),
            targets: Vec::new(),
        })
        .collect();
    for (track_id, boxes) in &per_track {
        let idx: Vec<usize> = boxes.keys().copied().collect();
        for (pos, &frame) in idx.iter().enumerate() {
            if frame >= frame_count {
                continue;
            }
            let b = &boxes[&frame];
            // Velocity by central difference over neighboring labeled
            // frames when contiguous, one-sided otherwise.
            let prev = pos.checked_sub(1).map(|p| idx[p]).filter(|&p| p + 1 == frame);
            let next = idx.get(pos + 1).copied().filter(|&n| n == frame + 1);
            let vel = match (prev, next) {
                (Some(p), Some(n)) => {
                    let bp = &boxes[&p];
                    let bn = &boxes[&n];
                    [
                        (bn.center[0] - bp.center[0]) / (2.0 * dt),
                        (bn.center[1] - bp.center[1]) / (2.0 * dt),
                    ]
                }
                (Some(p), None) => {
                    let bp = &boxes[&p];
                    [
                        (b.center[0] - bp.center[0]) / dt,
                        (b.center[1] - bp.center[1]) / dt,
                    ]
                }
                (None, Some(n)) => {
                    let bn = &boxes[&n];
                    [
                        (bn.center[0] - b.center[0]) / dt,
                        (bn.center[1] - b.center[1]) / dt,
                    ]
                }
                (None, None) => [0.0, 0.0],
            };
            let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
            let l_n = (b.center[0] * b.center[0] + b.center[1] * b.center[1]).sqrt();
            let beta_n = if l_n < 1e-9 {
                0.0
            } else {
                let los = [-b.center[0] / l_n, -b.center[1] / l_n];
                (b.yaw.cos() * los[0] + b.yaw.sin() * los[1])
                    .clamp(-1.0, 1.0)
                    .acos()
            };
            frames[frame].targets.push(TvTruth {
                id: *track_id as u64,
                x: b.center[0],
                y: b.center[1],
                theta: b.yaw,
                vx_abs: vel[0],
                vy_abs: vel[1],
                vx_rel: vel[0],
                vy_rel: vel[1],
                yaw_rate: 0.0,
                yaw_rate_rel: 0.0,
                l_n,
                beta_n,
                delta_v: speed,
            });
        }
    }
    frames
}

/// A sequence directory resolved to its parts.
#[derive(Debug, Clone)]
pub struct KittiSequence {
    pub velodyne_files: Vec<PathBuf>,
    pub labels: Vec<TrackingLabel>,
    pub calib: Calib,
}

fn first_txt(dir: &Path) -> Result<PathBuf> {
    let mut txts: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    txts.sort();
    txts.into_iter()
        .next()
        .ok_or_else(|| Error::Data(format!("{}: no .txt file found", dir.display())))
}

/// Resolve a KITTI sequence directory. Missing calibration is a hard
/// error; missing labels only disable ground-truth derivation.
pub fn open_sequence(seq_dir: &Path) -> Result<KittiSequence> {
    let velo_dir = seq_dir.join("velodyne");
    let mut velodyne_files: Vec<PathBuf> = std::fs::read_dir(&velo_dir)
        .map_err(|e| Error::io(velo_dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    velodyne_files.sort();
    if velodyne_files.is_empty() {
        return Err(Error::Data(format!(
            "{}: no velodyne .bin frames",
            velo_dir.display()
        )));
    }
    let calib_dir = seq_dir.join("calib");
    let calib = parse_calib(&first_txt(&calib_dir)?)?;
    let labels = match first_txt(&seq_dir.join("label_02")) {
        Ok(path) => parse_labels(&path)?,
        Err(_) => Vec::new(),
    };
    Ok(KittiSequence {
        velodyne_files,
        labels,
        calib,
    })
}

/// The canonical axis permutation between a forward-x LiDAR and a
/// forward-z camera: x_cam = -y_velo, y_cam = -z_velo, z_cam = x_velo.
pub fn canonical_velo_to_cam() -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::new(
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0, //
        1.0, 0.0, 0.0,
    ));
    m
}

/// Render a calibration file in the tracking format.
pub fn write_calib_file(path: &Path, tr_velo_to_cam: &Matrix4<f64>) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let p = "7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 \
             0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 \
             0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00";
    for tag in ["P0:", "P1:", "P2:", "P3:"] {
        writeln!(w, "{tag} {p}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    write!(w, "R_rect:").map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in 0..3 {
        for c in 0..3 {
            let v = if r == c { 1.0 } else { 0.0 };
            write!(w, " {v:e}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    writeln!(w).map_err(|e| Error::io(path.display().to_string(), e))?;
    write!(w, "Tr_velo_cam:").map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in 0..3 {
        for c in 0..4 {
            write!(w, " {:e}", tr_velo_to_cam[(r, c)])
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    writeln!(w).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Render tracking label lines for a box in the LiDAR frame (the inverse
/// of [`label_to_velo`]); used to build test fixtures.
pub fn velo_box_to_label_line(
    frame: usize,
    track_id: i64,
    kind: &str,
    center_velo: [f64; 3],
    yaw_velo: f64,
    dims_hwl: [f64; 3],
    calib: &Calib,
) -> String {
    let center_cam = calib.velo_to_cam(center_velo);
    let bottom = [
        center_cam[0],
        center_cam[1] + dims_hwl[0] / 2.0,
        center_cam[2],
    ];
    let rotation_y = wrap_angle(-yaw_velo - std::f64::consts::FRAC_PI_2);
    format!(
        "{frame} {track_id} {kind} 0 0 0.0 0.0 0.0 50.0 50.0 {} {} {} {} {} {} {}",
        dims_hwl[0], dims_hwl[1], dims_hwl[2], bottom[0], bottom[1], bottom[2], rotation_y
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn canonical_calib() -> Calib {
        Calib::new(canonical_velo_to_cam(), Matrix4::identity()).unwrap()
    }

    #[test]
    fn canonical_transform_round_trip() {
        let calib = canonical_calib();
        let p_velo = [12.0, -3.0, 0.8];
        let p_cam = calib.velo_to_cam(p_velo);
        assert_relative_eq!(p_cam[0], 3.0); // -y
        assert_relative_eq!(p_cam[1], -0.8); // -z
        assert_relative_eq!(p_cam[2], 12.0); // x
        let back = calib.cam_to_velo(p_cam);
        for k in 0..3 {
            assert_relative_eq!(back[k], p_velo[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn calib_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000.txt");
        write_calib_file(&path, &canonical_velo_to_cam()).unwrap();
        let calib = parse_calib(&path).unwrap();
        let p = calib.cam_to_velo([1.0, 2.0, 3.0]);
        let expect = canonical_calib().cam_to_velo([1.0, 2.0, 3.0]);
        for k in 0..3 {
            assert_relative_eq!(p[k], expect[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn missing_transform_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "P0: 1 2 3\n").unwrap();
        assert!(parse_calib(&path).is_err());
    }

    #[test]
    fn label_parse_and_class_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000.txt");
        let calib = canonical_calib();
        let car = velo_box_to_label_line(0, 3, "Car", [10.0, 2.0, 0.7], 0.3, [1.5, 1.8, 4.2], &calib);
        let ped = "0 4 Pedestrian 0 0 0.0 0.0 0.0 50.0 50.0 1.8 0.6 0.8 1.0 1.0 10.0 0.0";
        std::fs::write(&path, format!("{car}\n{ped}\n")).unwrap();
        let labels = parse_labels(&path).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].kind, "Car");
        assert_eq!(labels[0].track_id, 3);

        let vb = label_to_velo(&labels[0], &calib);
        assert_relative_eq!(vb.center[0], 10.0, epsilon = 1e-9);
        assert_relative_eq!(vb.center[1], 2.0, epsilon = 1e-9);
        assert_relative_eq!(vb.center[2], 0.7, epsilon = 1e-9);
        assert_relative_eq!(wrap_angle(vb.yaw - 0.3), 0.0, epsilon = 1e-9);
        assert_relative_eq!(vb.lw[0], 4.2);
        assert_relative_eq!(vb.lw[1], 1.8);
    }

    #[test]
    fn short_label_line_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000.txt");
        std::fs::write(&path, "0 1 Car 0 0\n").unwrap();
        assert!(matches!(parse_labels(&path), Err(Error::Data(_))));
    }

    #[test]
    fn derived_gt_velocity_matches_constant_motion() {
        // A car moving at exactly (6, -2) m/s in the LiDAR frame.
        let calib = canonical_calib();
        let dt = 0.1;
        let mut lines = Vec::new();
        for frame in 0..5 {
            let c = [
                10.0 + 6.0 * dt * frame as f64,
                1.0 - 2.0 * dt * frame as f64,
                0.7,
            ];
            lines.push(velo_box_to_label_line(frame, 2, "Car", c, 0.0, [1.5, 1.8, 4.2], &calib));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("0000.txt");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let labels = parse_labels(&path).unwrap();
        let frames = derive_gt_frames(&labels, &calib, 10.0, 5);
        assert_eq!(frames.len(), 5);
        for frame in &frames {
            assert_eq!(frame.targets.len(), 1);
            let tg = &frame.targets[0];
            assert_relative_eq!(tg.vx_rel, 6.0, epsilon = 1e-9);
            assert_relative_eq!(tg.vy_rel, -2.0, epsilon = 1e-9);
            assert_relative_eq!(tg.delta_v, (36.0f64 + 4.0).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn open_sequence_requires_calib() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("velodyne")).unwrap();
        std::fs::write(dir.path().join("velodyne/000000.bin"), [0u8; 16]).unwrap();
        // No calib directory -> error.
        assert!(open_sequence(dir.path()).is_err());
    }
}
