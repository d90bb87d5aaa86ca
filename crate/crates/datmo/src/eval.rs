//! Evaluation: velocity/heading errors against ground truth, detection
//! precision/recall, error-distribution summaries, per-stage timing, and
//! the error-sensitivity grid over the target configuration (beta_n, l_n).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::GroundTruthFrame;
use crate::track::{wrap_angle, TrackOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    /// Position gate for matching a track to a ground-truth object, m.
    pub match_radius: f64,
    /// Ground-truth objects with relative speed above this count as moving.
    pub moving_threshold: f64,
    /// Frames at the start of a sequence excluded from the error records
    /// (confirmation transient).
    pub warmup_frames: usize,
    /// Evaluation region [x_min, x_max, y_min, y_max]; ground-truth
    /// objects outside it are discarded, mirroring the processing crop.
    pub crop: Option<[f64; 4]>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            match_radius: 2.0,
            moving_threshold: 0.5,
            warmup_frames: 8,
            crop: None,
        }
    }
}

impl EvalParams {
    fn in_crop(&self, x: f64, y: f64) -> bool {
        match self.crop {
            Some([x0, x1, y0, y1]) => x >= x0 && x < x1 && y >= y0 && y < y1,
            None => true,
        }
    }
}

/// One matched-frame error sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub t: f64,
    pub gt_id: u64,
    /// | ||v_gt|| - ||v_est|| |, m/s.
    pub dv: f64,
    /// Heading error, wrapped to [0, pi], radians.
    pub dtheta: f64,
    pub l_n: f64,
    pub beta_n: f64,
    pub delta_v: f64,
}

/// Detection counts; mergeable across shards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionTally {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub frames: usize,
    /// Frames with moving ground truth but no detections at all.
    pub zero_detection_frames: usize,
}

impl DetectionTally {
    pub fn merge(&mut self, other: &DetectionTally) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
        self.frames += other.frames;
        self.zero_detection_frames += other.zero_detection_frames;
    }

    /// TP / (TP + FP); 1.0 when nothing was detected at all.
    pub fn precision(&self) -> f64 {
        let denom = self.true_positives + self.false_positives;
        if denom == 0 {
            1.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    /// TP / (TP + FN); 1.0 when there was nothing to detect.
    pub fn recall(&self) -> f64 {
        let denom = self.true_positives + self.false_negatives;
        if denom == 0 {
            1.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }
}

/// Group track outputs by timestamp and pair them with ground-truth
/// frames. Every track timestamp must match a ground-truth frame within
/// 1 us; offenders are reported.
fn frame_pairs<'a>(
    tracks: &'a [TrackOutput],
    gt: &'a [GroundTruthFrame],
) -> Result<Vec<(usize, &'a GroundTruthFrame, Vec<&'a TrackOutput>)>> {
    let mut by_time: BTreeMap<u64, Vec<&TrackOutput>> = BTreeMap::new();
    let key = |t: f64| (t * 1e6).round() as u64;
    for tr in tracks {
        by_time.entry(key(tr.t)).or_default().push(tr);
    }
    let mut pairs = Vec::with_capacity(gt.len());
    for (idx, frame) in gt.iter().enumerate() {
        let tracks_here = by_time.remove(&key(frame.t)).unwrap_or_default();
        pairs.push((idx, frame, tracks_here));
    }
    if !by_time.is_empty() {
        let orphan_times: Vec<f64> = by_time.keys().map(|k| *k as f64 / 1e6).collect();
        return Err(Error::Data(format!(
            "track frames without ground truth at t = {orphan_times:?}"
        )));
    }
    Ok(pairs)
}

/// Greedy nearest-first one-to-one matching between track positions and
/// ground-truth positions within `radius`. Returns (track_idx, gt_idx).
fn greedy_match(
    tracks: &[&TrackOutput],
    targets: &[(f64, f64)],
    radius: f64,
) -> Vec<(usize, usize)> {
    let mut dists: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, tr) in tracks.iter().enumerate() {
        for (gi, g) in targets.iter().enumerate() {
            let d = ((tr.x - g.0).powi(2) + (tr.y - g.1).powi(2)).sqrt();
            if d <= radius {
                dists.push((d, ti, gi));
            }
        }
    }
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut used_t = vec![false; tracks.len()];
    let mut used_g = vec![false; targets.len()];
    let mut pairs = Vec::new();
    for (_, ti, gi) in dists {
        if !used_t[ti] && !used_g[gi] {
            used_t[ti] = true;
            used_g[gi] = true;
            pairs.push((ti, gi));
        }
    }
    pairs
}

/// Per-frame speed and heading errors of matched tracks.
///
/// Errors compare the absolute velocity (expressed in EV axes): speed
/// magnitude and heading angle. `matching` optionally pins track ids to
/// ground-truth ids; otherwise tracks are matched greedily by position.
/// Returns the records plus the number of track emissions that found no
/// ground-truth object to compare against.
pub fn velocity_errors(
    tracks: &[TrackOutput],
    gt: &[GroundTruthFrame],
    params: &EvalParams,
    matching: Option<&BTreeMap<u64, u64>>,
) -> Result<(Vec<ErrorRecord>, usize)> {
    let pairs = frame_pairs(tracks, gt)?;
    let mut records = Vec::new();
    let mut unmatched = 0usize;
    for (frame_idx, frame, tracks_here) in pairs {
        if tracks_here.is_empty() {
            continue;
        }
        let matched: Vec<(usize, usize)> = match matching {
            Some(map) => tracks_here
                .iter()
                .enumerate()
                .filter_map(|(ti, tr)| {
                    let gt_id = map.get(&tr.id)?;
                    frame
                        .targets
                        .iter()
                        .position(|tg| tg.id == *gt_id)
                        .map(|gi| (ti, gi))
                })
                .collect(),
            None => {
                let positions: Vec<(f64, f64)> = frame
                    .targets
                    .iter()
                    .map(|tg| {
                        if params.in_crop(tg.x, tg.y) {
                            (tg.x, tg.y)
                        } else {
                            (f64::INFINITY, f64::INFINITY)
                        }
                    })
                    .collect();
                greedy_match(&tracks_here, &positions, params.match_radius)
            }
        };
        unmatched += tracks_here.len() - matched.len();
        if frame_idx < params.warmup_frames {
            continue;
        }
        for (ti, gi) in matched {
            let tr = tracks_here[ti];
            let tg = &frame.targets[gi];
            let gt_speed = (tg.vx_abs * tg.vx_abs + tg.vy_abs * tg.vy_abs).sqrt();
            let gt_theta = tg.vy_abs.atan2(tg.vx_abs);
            records.push(ErrorRecord {
                t: frame.t,
                gt_id: tg.id,
                dv: (gt_speed - tr.v).abs(),
                dtheta: wrap_angle(gt_theta - tr.theta).abs(),
                l_n: tg.l_n,
                beta_n: tg.beta_n,
                delta_v: tg.delta_v,
            });
        }
    }
    Ok((records, unmatched))
}

/// Per-frame detection scoring: moving ground-truth objects greedily
/// matched to confirmed-track positions within `match_radius`.
pub fn detection_scores(
    tracks: &[TrackOutput],
    gt: &[GroundTruthFrame],
    params: &EvalParams,
) -> Result<DetectionTally> {
    let pairs = frame_pairs(tracks, gt)?;
    let mut tally = DetectionTally::default();
    for (_, frame, tracks_here) in pairs {
        tally.frames += 1;
        let moving: Vec<(f64, f64)> = frame
            .targets
            .iter()
            .filter(|tg| tg.delta_v > params.moving_threshold && params.in_crop(tg.x, tg.y))
            .map(|tg| (tg.x, tg.y))
            .collect();
        let matched = greedy_match(&tracks_here, &moving, params.match_radius);
        tally.true_positives += matched.len();
        tally.false_positives += tracks_here.len() - matched.len();
        tally.false_negatives += moving.len() - matched.len();
        if !moving.is_empty() && tracks_here.is_empty() {
            tally.zero_detection_frames += 1;
        }
    }
    Ok(tally)
}

/// Sample standard deviation; `None` for fewer than two samples.
fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some(var.sqrt())
}

/// Histogram with fixed-width bins plus an overflow bin, so the total mass
/// equals the record count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// counts[k] covers [k*w, (k+1)*w); the last entry is overflow.
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(values: impl Iterator<Item = f64>, bin_width: f64, bins: usize) -> Self {
        let mut counts = vec![0usize; bins + 1];
        for v in values {
            let k = (v / bin_width).floor();
            if k >= 0.0 && (k as usize) < bins {
                counts[k as usize] += 1;
            } else {
                counts[bins] += 1;
            }
        }
        Histogram { bin_width, counts }
    }

    pub fn mass(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSummary {
    pub count: usize,
    /// Sample std of the speed error, m/s.
    pub sigma_v: Option<f64>,
    /// Sample std of the heading error, degrees.
    pub sigma_theta_deg: Option<f64>,
    pub mean_dv: Option<f64>,
    pub mean_dtheta_deg: Option<f64>,
}

fn band_summary(records: &[&ErrorRecord]) -> BandSummary {
    let dv: Vec<f64> = records.iter().map(|r| r.dv).collect();
    let dth: Vec<f64> = records.iter().map(|r| r.dtheta.to_degrees()).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    BandSummary {
        count: records.len(),
        sigma_v: sample_std(&dv),
        sigma_theta_deg: sample_std(&dth),
        mean_dv: mean(&dv),
        mean_dtheta_deg: mean(&dth),
    }
}

/// Error distribution split by the relative-speed band at 1 m/s.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub all: BandSummary,
    pub low_dv: BandSummary,
    pub high_dv: BandSummary,
    pub hist_dv: Histogram,
    pub hist_dtheta_deg: Histogram,
}

/// Boundary between the low and high relative-speed bands, m/s.
pub const DV_BAND_SPLIT: f64 = 1.0;

pub fn error_distribution_summary(records: &[ErrorRecord]) -> ErrorSummary {
    let all: Vec<&ErrorRecord> = records.iter().collect();
    let low: Vec<&ErrorRecord> = records.iter().filter(|r| r.delta_v <= DV_BAND_SPLIT).collect();
    let high: Vec<&ErrorRecord> = records.iter().filter(|r| r.delta_v > DV_BAND_SPLIT).collect();
    ErrorSummary {
        all: band_summary(&all),
        low_dv: band_summary(&low),
        high_dv: band_summary(&high),
        hist_dv: Histogram::build(records.iter().map(|r| r.dv), 0.1, 50),
        hist_dtheta_deg: Histogram::build(records.iter().map(|r| r.dtheta.to_degrees()), 1.0, 45),
    }
}

/// Mean |speed error| binned over the target configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityGrid {
    /// Bin width over beta_n, degrees.
    pub beta_bin_deg: f64,
    /// Bin width over l_n, meters.
    pub l_bin_m: f64,
    pub beta_bins: usize,
    pub l_bins: usize,
    /// Row-major (beta, l): mean |e_v| per bin, 0.0 where empty.
    pub mean_abs_err: Vec<f64>,
    pub count: Vec<usize>,
}

impl SensitivityGrid {
    pub fn at(&self, beta_idx: usize, l_idx: usize) -> (f64, usize) {
        let k = beta_idx * self.l_bins + l_idx;
        (self.mean_abs_err[k], self.count[k])
    }

    /// Mean |e_v| over all samples whose beta_n falls within
    /// `beta_deg +- tol_deg`, restricted to l_n > l_min.
    pub fn band_mean(&self, records: &[ErrorRecord], beta_deg: f64, tol_deg: f64, l_min: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in records {
            let b = r.beta_n.to_degrees();
            if (b - beta_deg).abs() <= tol_deg && r.l_n > l_min {
                sum += r.dv;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Bin records into the (beta_n, l_n) grid: beta over [0, 180] deg,
/// l over [0, 120] m; out-of-range samples clamp into the edge bins so the
/// counts sum to the record count.
pub fn sensitivity_sweep(records: &[ErrorRecord], beta_bin_deg: f64, l_bin_m: f64) -> SensitivityGrid {
    let beta_bins = (180.0 / beta_bin_deg).ceil() as usize;
    let l_bins = (120.0 / l_bin_m).ceil() as usize;
    let mut sum = vec![0.0f64; beta_bins * l_bins];
    let mut count = vec![0usize; beta_bins * l_bins];
    for r in records {
        let bi = ((r.beta_n.to_degrees() / beta_bin_deg).floor() as usize).min(beta_bins - 1);
        let li = ((r.l_n / l_bin_m).floor() as usize).min(l_bins - 1);
        let k = bi * l_bins + li;
        sum[k] += r.dv;
        count[k] += 1;
    }
    let mean_abs_err = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    SensitivityGrid {
        beta_bin_deg,
        l_bin_m,
        beta_bins,
        l_bins,
        mean_abs_err,
        count,
    }
}

/// Wall-clock stage timings for one frame, milliseconds.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct TimingRecord {
    pub parse_ms: f64,
    pub convert_ms: f64,
    pub flow_ms: f64,
    pub mask_ms: f64,
    pub cluster_ms: f64,
    pub track_ms: f64,
    pub total_ms: f64,
}

/// Stage averages over a run, excluding the first frame of the sequence.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct TimingSummary {
    pub frames_averaged: usize,
    pub parse_ms: f64,
    pub convert_ms: f64,
    pub flow_ms: f64,
    pub mask_ms: f64,
    pub cluster_ms: f64,
    pub track_ms: f64,
    pub total_ms: f64,
}

pub fn timing_profile(records: &[TimingRecord]) -> TimingSummary {
    let tail = if records.len() > 1 { &records[1..] } else { &[] };
    let n = tail.len();
    if n == 0 {
        return TimingSummary::default();
    }
    let mut s = TimingSummary {
        frames_averaged: n,
        ..TimingSummary::default()
    };
    for r in tail {
        s.parse_ms += r.parse_ms;
        s.convert_ms += r.convert_ms;
        s.flow_ms += r.flow_ms;
        s.mask_ms += r.mask_ms;
        s.cluster_ms += r.cluster_ms;
        s.track_ms += r.track_ms;
        s.total_ms += r.total_ms;
    }
    let n = n as f64;
    s.parse_ms /= n;
    s.convert_ms /= n;
    s.flow_ms /= n;
    s.mask_ms /= n;
    s.cluster_ms /= n;
    s.track_ms /= n;
    s.total_ms /= n;
    s
}

/// The `metrics.json` payload: per relative-speed band, exactly
/// {precision, recall, sigma_v, sigma_theta, time_ms}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandMetrics {
    pub precision: f64,
    pub recall: f64,
    pub sigma_v: Option<f64>,
    pub sigma_theta: Option<f64>,
    pub time_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub low_dv: BandMetrics,
    pub high_dv: BandMetrics,
}

/// Assemble the metrics payload. Detection tallies are split by the band
/// of the ground-truth object (false positives attributed to the band of
/// the nearest object in their frame); timing is global and repeated in
/// both bands.
pub fn metrics(
    tracks: &[TrackOutput],
    gt: &[GroundTruthFrame],
    params: &EvalParams,
    timing: &TimingSummary,
) -> Result<Metrics> {
    let (records, _) = velocity_errors(tracks, gt, params, None)?;
    let summary = error_distribution_summary(&records);

    // Band-split tallies: score each band against the tracks near it.
    let pairs = frame_pairs(tracks, gt)?;
    let mut low = DetectionTally::default();
    let mut high = DetectionTally::default();
    for (_, frame, tracks_here) in pairs {
        low.frames += 1;
        high.frames += 1;
        let moving: Vec<(usize, (f64, f64))> = frame
            .targets
            .iter()
            .enumerate()
            .filter(|(_, tg)| tg.delta_v > params.moving_threshold && params.in_crop(tg.x, tg.y))
            .map(|(gi, tg)| (gi, (tg.x, tg.y)))
            .collect();
        let positions: Vec<(f64, f64)> = moving.iter().map(|(_, p)| *p).collect();
        let matched = greedy_match(&tracks_here, &positions, params.match_radius);
        let mut track_matched = vec![false; tracks_here.len()];
        let mut gt_matched = vec![false; positions.len()];
        for (ti, mi) in matched {
            track_matched[ti] = true;
            gt_matched[mi] = true;
            let band_high = frame.targets[moving[mi].0].delta_v > DV_BAND_SPLIT;
            if band_high {
                high.true_positives += 1;
            } else {
                low.true_positives += 1;
            }
        }
        for (mi, &hit) in gt_matched.iter().enumerate() {
            if !hit {
                let band_high = frame.targets[moving[mi].0].delta_v > DV_BAND_SPLIT;
                if band_high {
                    high.false_negatives += 1;
                } else {
                    low.false_negatives += 1;
                }
            }
        }
        for (ti, &hit) in track_matched.iter().enumerate() {
            if !hit {
                // Attribute the false positive to the band of the nearest
                // target in this frame (low band when the frame is empty).
                let tr = tracks_here[ti];
                let nearest = frame
                    .targets
                    .iter()
                    .map(|tg| {
                        (
                            (tr.x - tg.x).powi(2) + (tr.y - tg.y).powi(2),
                            tg.delta_v > DV_BAND_SPLIT,
                        )
                    })
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                match nearest {
                    Some((_, true)) => high.false_positives += 1,
                    _ => low.false_positives += 1,
                }
            }
        }
    }

    Ok(Metrics {
        low_dv: BandMetrics {
            precision: low.precision(),
            recall: low.recall(),
            sigma_v: summary.low_dv.sigma_v,
            sigma_theta: summary.low_dv.sigma_theta_deg,
            time_ms: timing.total_ms,
        },
        high_dv: BandMetrics {
            precision: high.precision(),
            recall: high.recall(),
            sigma_v: summary.high_dv.sigma_v,
            sigma_theta: summary.high_dv.sigma_theta_deg,
            time_ms: timing.total_ms,
        },
    })
}

pub fn write_metrics_json(path: &std::path::Path, m: &Metrics) -> Result<()> {
    let json = serde_json::to_string_pretty(m)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// `errors.csv`: t,gt_id,dv,dtheta_deg,l_n,beta_n_deg,delta_v
pub fn write_errors_csv(path: &std::path::Path, records: &[ErrorRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "t,gt_id,dv,dtheta_deg,l_n,beta_n_deg,delta_v")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.t,
            r.gt_id,
            r.dv,
            r.dtheta.to_degrees(),
            r.l_n,
            r.beta_n.to_degrees(),
            r.delta_v
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// `sensitivity.csv`: beta_bin_deg,l_bin_m,mean_abs_err,count — one row per
/// bin including empty bins.
pub fn write_sensitivity_csv(path: &std::path::Path, grid: &SensitivityGrid) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "beta_bin_deg,l_bin_m,mean_abs_err,count")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for bi in 0..grid.beta_bins {
        for li in 0..grid.l_bins {
            let (m, c) = grid.at(bi, li);
            writeln!(
                w,
                "{},{},{},{}",
                bi as f64 * grid.beta_bin_deg,
                li as f64 * grid.l_bin_m,
                m,
                c
            )
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// `timing.csv`: one row per frame.
pub fn write_timing_csv(path: &std::path::Path, records: &[TimingRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(
        w,
        "frame,parse_ms,convert_ms,flow_ms,mask_ms,cluster_ms,track_ms,total_ms"
    )
    .map_err(|e| Error::io(path.display().to_string(), e))?;
    for (k, r) in records.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            k, r.parse_ms, r.convert_ms, r.flow_ms, r.mask_ms, r.cluster_ms, r.track_ms, r.total_ms
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
