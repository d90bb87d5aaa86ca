//! Point-cloud file I/O and debug dumps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bev::{BevGrid, PointCloud};
use crate::error::{Error, Result};

/// Read a Velodyne-style binary scan: little-endian f32 quadruplets
/// (x, y, z, intensity). Intensity is ignored.
///
/// A file whose size is not a multiple of 16 bytes is rejected, reporting
/// the offset where the truncation starts.
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let mut file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Data(format!(
            "{}: truncated point record at byte offset {} (file size {} is not a multiple of 16)",
            path.display(),
            bytes.len() - bytes.len() % 16,
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
        let y = f32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]);
        let z = f32::from_le_bytes([rec[8], rec[9], rec[10], rec[11]]);
        points.push([x as f64, y as f64, z as f64]);
    }
    Ok(PointCloud::new(points))
}

/// Write a point cloud in the same binary layout (intensity = 0).
pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0f32] {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// CSV fallback: one `x,y,z` triple per line. Blank lines and `#` comments
/// are skipped.
pub fn read_xyz_csv(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected x,y,z, got {:?}",
                path.display(),
                lineno + 1,
                trimmed
            )));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            p[k] = f.trim().parse::<f64>().map_err(|e| {
                Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, e))
            })?;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

/// Dump a grid as an 8-bit binary PGM (P5), row-major: image rows are the
/// x cells, columns the y cells.
pub fn write_pgm(path: &Path, grid: &BevGrid) -> Result<()> {
    let q = grid.to_u8();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", q.ny(), q.nx())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    w.write_all(q.data())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
