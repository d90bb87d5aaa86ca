//! End-to-end pipeline: point cloud -> BEV grid -> dense flow -> masked
//! velocity field -> clusters -> tracks, with per-stage timing, config
//! handling, and runners for synthetic datasets, KITTI sequences and
//! in-memory simulated scenarios.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bev::{rasterize, remove_ground, BevGrid, GridSpec, PointCloud};
use crate::cluster::{cluster_cells, Cluster, ClusterParams};
use crate::error::{Error, Result};
use crate::eval::{EvalParams, TimingRecord, TimingSummary};
use crate::flow::{displacement_to_velocity, estimate_flow, DisplacementField, FlowParams};
use crate::grid::Grid2;
use crate::kitti;
use crate::sim::{
    run_scenario, sweep_configurations, GroundTruthFrame, Maneuver, ScenarioSpec, SweepSpec,
    TvType,
};
use crate::track::{EgoState, TrackOutput, Tracker, TrackerParams};
use crate::vfield::{
    apply_mask, continuity_mask, ego_motion_compensate, propagate, propagation_mask, FlowField,
    MaskParams,
};

/// Region of interest around the EV, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for CropBox {
    /// KITTI evaluation crop: 25 m laterally, 80 m ahead, 15 m behind.
    fn default() -> Self {
        CropBox {
            x_min: -15.0,
            x_max: 80.0,
            y_min: -25.0,
            y_max: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Cell edge, meters (square cells).
    pub cell: f64,
    pub crop: CropBox,
    pub mean_weight: f64,
    pub std_weight: f64,
    pub h_max: f64,
    pub ground_threshold: f64,
    /// Height added to z before the grid statistics; set to the sensor
    /// mount height so heights are measured from the road.
    pub z_offset: f64,
    pub z_cap: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cell: 0.17,
            crop: CropBox::default(),
            mean_weight: 1.0,
            std_weight: 1.0,
            h_max: 3.0,
            ground_threshold: 25.0,
            z_offset: 1.73,
            z_cap: 4.0,
        }
    }
}

impl GridConfig {
    pub fn to_spec(&self) -> GridSpec {
        let mut spec = GridSpec::from_extent(
            self.crop.x_min,
            self.crop.x_max,
            self.crop.y_min,
            self.crop.y_max,
            self.cell,
        );
        spec.mean_weight = self.mean_weight;
        spec.std_weight = self.std_weight;
        spec.h_max = self.h_max;
        spec.ground_threshold = self.ground_threshold;
        spec.z_offset = self.z_offset;
        spec.z_cap = self.z_cap;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub alpha_p: f64,
    pub alpha_cont: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            alpha_p: 2.5,
            alpha_cont: 4.0,
        }
    }
}

/// Scenario sweep driven from the config file (`datmo sweep`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepRunConfig {
    /// Base scenario; per-spec fields are overridden by the sweep.
    pub scenario: ScenarioSpec,
    /// Target relative speed: TV speeds are EV speed -/+ this.
    pub delta_v: f64,
    pub lateral_offsets: Vec<f64>,
    pub lane_changes: Vec<f64>,
    pub tv_types: Vec<TvType>,
    pub decimate: usize,
    /// Crop each scenario's grid to the TV corridor instead of the full
    /// configured crop.
    pub auto_roi: bool,
    pub roi_margin: f64,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        SweepRunConfig {
            scenario: ScenarioSpec::default(),
            delta_v: 10.0,
            lateral_offsets: vec![
                -80.0, -65.0, -50.0, -35.0, -20.0, -3.5, 3.5, 20.0, 35.0, 50.0, 65.0, 80.0,
            ],
            lane_changes: Vec::new(),
            tv_types: vec![TvType::Sedan],
            decimate: 1,
            auto_roi: true,
            roi_margin: 10.0,
        }
    }
}

impl SweepRunConfig {
    pub fn build_scenarios(&self) -> Result<Vec<ScenarioSpec>> {
        let ev = self.scenario.ev.speed;
        let mut speeds: Vec<f64> = Vec::new();
        if ev - self.delta_v > 0.0 {
            speeds.push(ev - self.delta_v);
        }
        speeds.push(ev + self.delta_v);
        let mut maneuvers = vec![Maneuver::Keep];
        for &s in &self.lane_changes {
            maneuvers.push(Maneuver::LaneChange {
                s,
                n: self.scenario.road.lane_width / 2.0,
            });
        }
        sweep_configurations(
            &self.scenario,
            &SweepSpec {
                speeds,
                lateral_offsets: self.lateral_offsets.clone(),
                maneuvers,
                tv_types: self.tv_types.clone(),
                decimate: self.decimate,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub flow: FlowParams,
    pub masks: MaskConfig,
    pub cluster: ClusterParams,
    pub tracker: TrackerParams,
    /// Warm-start each frame's flow with the previous displacement field.
    pub warm_start_flow: bool,
    pub eval: EvalParams,
    pub sweep: SweepRunConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: GridConfig::default(),
            flow: FlowParams::default(),
            masks: MaskConfig::default(),
            cluster: ClusterParams::default(),
            tracker: TrackerParams::default(),
            warm_start_flow: false,
            eval: EvalParams::default(),
            sweep: SweepRunConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// One frame handed to the pipeline. `cloud = None` marks a frame that
/// could not be read; the tracker coasts over it.
pub struct FrameInput {
    pub cloud: Option<PointCloud>,
    pub ego: EgoState,
    pub t: f64,
    pub parse_ms: f64,
}

pub struct FrameResult {
    pub t: f64,
    pub tracks: Vec<TrackOutput>,
    pub clusters: usize,
}

/// Streaming pipeline state.
pub struct Pipeline {
    cfg: PipelineConfig,
    spec: GridSpec,
    tracker: Tracker,
    prev_grid: Option<BevGrid>,
    prev_field: Option<FlowField>,
    prev_flow: Option<DisplacementField>,
    pub timings: Vec<TimingRecord>,
    debug_dir: Option<PathBuf>,
    frame_index: usize,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let spec = cfg.grid.to_spec();
        spec.validate()?;
        cfg.flow.validate()?;
        let tracker = Tracker::new(cfg.tracker.clone())?;
        Ok(Pipeline {
            cfg,
            spec,
            tracker,
            prev_grid: None,
            prev_field: None,
            prev_flow: None,
            timings: Vec::new(),
            debug_dir: None,
            frame_index: 0,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Dump per-frame grids, fields and clusters under `dir`.
    pub fn set_debug_dir(&mut self, dir: PathBuf) {
        self.debug_dir = Some(dir);
    }

    pub fn process_frame(&mut self, input: &FrameInput) -> Result<FrameResult> {
        let frame_idx = self.frame_index;
        self.frame_index += 1;
        let mut timing = TimingRecord {
            parse_ms: input.parse_ms,
            ..TimingRecord::default()
        };
        let t_total = Instant::now();

        let Some(cloud) = &input.cloud else {
            // Corrupt frame: coast.
            let tracks = self.tracker.step(&[], &input.ego, input.t)?;
            timing.total_ms = ms(t_total);
            self.timings.push(timing);
            return Ok(FrameResult {
                t: input.t,
                tracks,
                clusters: 0,
            });
        };

        let t0 = Instant::now();
        let grid = remove_ground(&rasterize(cloud, &self.spec, input.t)?);
        timing.convert_ms = ms(t0);

        let mut clusters: Vec<Cluster> = Vec::new();
        if let Some(prev_grid) = &self.prev_grid {
            let dt = input.t - prev_grid.timestamp;
            if !(dt > 0.0) {
                return Err(Error::Contract(format!(
                    "frame timestamps must increase (got {} after {})",
                    input.t, prev_grid.timestamp
                )));
            }

            let t0 = Instant::now();
            let prior = if self.cfg.warm_start_flow {
                self.prev_flow.as_ref()
            } else {
                None
            };
            let flow = estimate_flow(prev_grid, &grid, &self.cfg.flow, prior)?;
            let (vx, vy) = displacement_to_velocity(&flow, &self.spec, dt)?;
            let occupancy = grid.values.map(|&v| v > 0.0);
            let field = FlowField::new(vx, vy, occupancy, &self.spec, input.t)?;
            timing.flow_ms = ms(t0);

            let t0 = Instant::now();
            let mask_params = MaskParams {
                alpha_p: self.cfg.masks.alpha_p,
                alpha_cont: self.cfg.masks.alpha_cont,
                dt,
            };
            let mc = continuity_mask(&field, &self.spec, &mask_params);
            let mp = match &self.prev_field {
                Some(prev_field) => {
                    let propagated = propagate(prev_field, &self.spec, &mask_params);
                    propagation_mask(&propagated, &field, &mask_params)
                }
                // No previous field: nothing can be confirmed temporally.
                None => crate::vfield::MaskGrid {
                    bits: Grid2::filled(field.nx(), field.ny(), false),
                },
            };
            let masked = apply_mask(&field, &mc, &mp);
            let compensated = ego_motion_compensate(&masked, &input.ego, &self.spec);
            timing.mask_ms = ms(t0);

            let t0 = Instant::now();
            // Candidates: occupied, mask-surviving, moving after ego
            // compensation.
            let mut candidates = Grid2::filled(field.nx(), field.ny(), false);
            let min_speed = self.cfg.cluster.min_speed;
            let min_rel = self.cfg.cluster.min_rel_speed;
            for i in 0..field.nx() {
                for j in 0..field.ny() {
                    if !field.occupancy[(i, j)] || !(mc.bits[(i, j)] && mp.bits[(i, j)]) {
                        continue;
                    }
                    let vx = compensated.vx[(i, j)];
                    let vy = compensated.vy[(i, j)];
                    let rx = masked.vx[(i, j)];
                    let ry = masked.vy[(i, j)];
                    candidates[(i, j)] = (vx * vx + vy * vy).sqrt() > min_speed
                        && (rx * rx + ry * ry).sqrt() > min_rel;
                }
            }
            clusters = cluster_cells(&masked, &self.spec, &self.cfg.cluster, &candidates)?;
            timing.cluster_ms = ms(t0);

            if let Some(dir) = &self.debug_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                crate::io::write_pgm(&dir.join(format!("{frame_idx:06}_grid.pgm")), &grid)?;
                crate::flow::write_displacement_csv(
                    &dir.join(format!("{frame_idx:06}_flow.csv")),
                    &flow,
                )?;
                crate::vfield::write_field_csv(
                    &dir.join(format!("{frame_idx:06}_field.csv")),
                    &field,
                    &mc,
                    &mp,
                )?;
                crate::cluster::write_clusters_jsonl(
                    &dir.join(format!("{frame_idx:06}_clusters.jsonl")),
                    &clusters,
                )?;
            }

            self.prev_field = Some(field);
            self.prev_flow = Some(flow);
        }

        let t0 = Instant::now();
        let tracks = self.tracker.step(&clusters, &input.ego, input.t)?;
        timing.track_ms = ms(t0);

        self.prev_grid = Some(grid);
        timing.total_ms = ms(t_total);
        self.timings.push(timing);
        Ok(FrameResult {
            t: input.t,
            tracks,
            clusters: clusters.len(),
        })
    }
}

#[inline]
fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Default)]
pub struct SequenceResult {
    pub tracks: Vec<TrackOutput>,
    pub timings: Vec<TimingRecord>,
    pub frames: usize,
    pub skipped: usize,
}

impl SequenceResult {
    pub fn timing_summary(&self) -> TimingSummary {
        crate::eval::timing_profile(&self.timings)
    }
}

/// Drive a pipeline over a frame stream.
pub fn run_frames(
    cfg: &PipelineConfig,
    inputs: impl Iterator<Item = FrameInput>,
) -> Result<SequenceResult> {
    let mut pipeline = Pipeline::new(cfg.clone())?;
    run_frames_with(&mut pipeline, inputs)
}

pub fn run_frames_with(
    pipeline: &mut Pipeline,
    inputs: impl Iterator<Item = FrameInput>,
) -> Result<SequenceResult> {
    let mut result = SequenceResult::default();
    for input in inputs {
        if input.cloud.is_none() {
            result.skipped += 1;
        }
        let frame = pipeline.process_frame(&input)?;
        result.tracks.extend(frame.tracks);
        result.frames += 1;
    }
    result.timings = pipeline.timings.clone();
    Ok(result)
}

/// Kind of an input directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Synthetic,
    Kitti,
}

pub fn detect_input(dir: &Path) -> Result<InputKind> {
    if dir.join("velodyne").is_dir() {
        Ok(InputKind::Kitti)
    } else if dir.join("ego.csv").is_file() {
        Ok(InputKind::Synthetic)
    } else {
        Err(Error::Data(format!(
            "{}: neither a KITTI sequence (velodyne/) nor a synthetic dataset (ego.csv)",
            dir.display()
        )))
    }
}

/// Parse `ego.csv`: header `t,v,omega` then one row per frame.
pub fn read_ego_csv(path: &Path) -> Result<Vec<(f64, EgoState)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with('t')) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected t,v,omega",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        rows.push((
            parse(fields[0])?,
            EgoState {
                v: parse(fields[1])?,
                omega: parse(fields[2])?,
            },
        ));
    }
    Ok(rows)
}

/// Lazy frame source over a directory of `.bin` scans plus per-frame ego
/// states and timestamps. Unreadable scans yield coasting frames with a
/// warning.
pub struct DirSource {
    entries: Vec<(PathBuf, EgoState, f64)>,
    next: usize,
}

impl Iterator for DirSource {
    type Item = FrameInput;

    fn next(&mut self) -> Option<FrameInput> {
        let (path, ego, t) = self.entries.get(self.next)?.clone();
        self.next += 1;
        let start = Instant::now();
        let cloud = match crate::io::read_velodyne_bin(&path) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("warning: skipping frame {}: {e}", path.display());
                None
            }
        };
        Some(FrameInput {
            cloud,
            ego,
            t,
            parse_ms: ms(start),
        })
    }
}

/// Source over a synthetic dataset directory (frames + ego.csv).
pub fn synthetic_source(dir: &Path) -> Result<DirSource> {
    let ego_rows = read_ego_csv(&dir.join("ego.csv"))?;
    let entries = ego_rows
        .into_iter()
        .enumerate()
        .map(|(k, (t, ego))| (dir.join(format!("{k:06}.bin")), ego, t))
        .collect();
    Ok(DirSource { entries, next: 0 })
}

/// Source over a KITTI sequence. Ego motion comes from an `ego.csv` next
/// to the sequence (or given explicitly); otherwise it is assumed zero.
pub fn kitti_source(
    dir: &Path,
    seq: &kitti::KittiSequence,
    rate_hz: f64,
    ego_csv: Option<&Path>,
) -> Result<DirSource> {
    let ego_path = ego_csv
        .map(PathBuf::from)
        .unwrap_or_else(|| dir.join("ego.csv"));
    let ego_rows = if ego_path.is_file() {
        Some(read_ego_csv(&ego_path)?)
    } else {
        eprintln!(
            "warning: no ego motion data for {}; assuming a stationary ego vehicle",
            dir.display()
        );
        None
    };
    let entries = seq
        .velodyne_files
        .iter()
        .enumerate()
        .map(|(k, path)| {
            let (t, ego) = match &ego_rows {
                Some(rows) => rows
                    .get(k)
                    .map(|(t, e)| (*t, *e))
                    .unwrap_or((k as f64 / rate_hz, EgoState::default())),
                None => (k as f64 / rate_hz, EgoState::default()),
            };
            (path.clone(), ego, t)
        })
        .collect();
    Ok(DirSource { entries, next: 0 })
}

/// Crop box covering the TV's trajectory corridor in the EV frame.
pub fn scenario_roi(spec: &ScenarioSpec, margin: f64) -> Result<CropBox> {
    let ev_t = crate::sim::ev_trajectory(spec);
    let tv_t = crate::sim::build_trajectory(spec)?;
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for k in 0..spec.frame_count() {
        let t = k as f64 / spec.lidar.rate_hz;
        let gt = crate::sim::relative_truth(0, &ev_t.at(t), &tv_t.at(t));
        x_min = x_min.min(gt.x);
        x_max = x_max.max(gt.x);
        y_min = y_min.min(gt.y);
        y_max = y_max.max(gt.y);
    }
    let r = spec.lidar.max_range;
    Ok(CropBox {
        x_min: (x_min - margin).max(-r),
        x_max: (x_max + margin).min(r),
        y_min: (y_min - margin).max(-r),
        y_max: (y_max + margin).min(r),
    })
}

/// Run the pipeline over an in-memory simulated scenario. With `auto_roi`
/// the grid crop narrows to the TV corridor and the grid height reference
/// follows the simulated sensor mount. Returns the effective crop so the
/// evaluation can discard ground truth outside it.
pub fn run_simulated(
    cfg: &PipelineConfig,
    spec: &ScenarioSpec,
    auto_roi: bool,
    roi_margin: f64,
) -> Result<(SequenceResult, Vec<GroundTruthFrame>, CropBox)> {
    let mut cfg = cfg.clone();
    if auto_roi {
        cfg.grid.crop = scenario_roi(spec, roi_margin)?;
    }
    cfg.grid.z_offset = spec.lidar.mount_height;
    let crop = cfg.grid.crop;
    let mut truths = Vec::with_capacity(spec.frame_count());
    let run = run_scenario(spec)?;
    let inputs = run.map(|frame| {
        truths.push(frame.truth.clone());
        FrameInput {
            cloud: Some(frame.cloud),
            ego: frame.ego,
            t: frame.t,
            parse_ms: 0.0,
        }
    });
    // The iterator is consumed inside; collect truths via the closure.
    let mut pipeline = Pipeline::new(cfg)?;
    let mut result = SequenceResult::default();
    for input in inputs {
        let frame = pipeline.process_frame(&input)?;
        result.tracks.extend(frame.tracks);
        result.frames += 1;
    }
    result.timings = pipeline.timings.clone();
    Ok((result, truths, crop))
}

/// Write track outputs as JSON lines.
pub fn write_tracks_jsonl(path: &Path, tracks: &[TrackOutput]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for tr in tracks {
        let line = serde_json::to_string(tr)
            .map_err(|e| Error::Data(format!("track serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_tracks_jsonl(path: &Path) -> Result<Vec<TrackOutput>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut tracks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        tracks.push(serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(tracks)
}

/// CSV mirror of the JSONL track output, same column order as the JSON
/// field order.
pub fn write_tracks_csv(path: &Path, tracks: &[TrackOutput]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "t,id,x,y,theta,v,omega,vx_rel,vy_rel,omega_rel,status")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for tr in tracks {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            tr.t,
            tr.id,
            tr.x,
            tr.y,
            tr.theta,
            tr.v,
            tr.omega,
            tr.vx_rel,
            tr.vy_rel,
            tr.omega_rel,
            tr.status
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_gt_jsonl(path: &Path) -> Result<Vec<GroundTruthFrame>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(frames)
}
