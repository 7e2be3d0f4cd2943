//! Radar scan files: one detection record per row, grouped into scans by
//! exact timestamp.
//!
//! CSV columns are
//! `timestamp_us,range_m,azimuth_rad,elevation_rad,range_rate_mps,amplitude,validity,mode,quality`;
//! JSON-lines files carry one object per line with the same keys. Poses are
//! not part of the record schema. They come from a separate pose file or
//! default to the identity at the scan's timestamp.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointAttributes, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{cartesian_to_spherical, spherical_to_cartesian, SensorPose, Vec3};

pub const SCAN_CSV_HEADER: &str =
    "timestamp_us,range_m,azimuth_rad,elevation_rad,range_rate_mps,amplitude,validity,mode,quality";

/// Largest accepted azimuth magnitude (50 degrees).
pub const MAX_AZIMUTH: f64 = 50.0 * std::f64::consts::PI / 180.0;

/// Range cap in meters for each radar mode.
pub fn mode_range_cap(mode: u8) -> Option<f64> {
    match mode {
        0 => Some(102.0),
        1 => Some(178.5),
        2 => Some(250.0),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanFormat {
    Csv,
    Jsonl,
}

impl ScanFormat {
    /// `.csv` is CSV, anything else JSON-lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ScanFormat::Csv,
            _ => ScanFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for ScanFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown scan format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarScanRecord {
    pub timestamp_us: i64,
    pub range_m: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub range_rate_mps: f64,
    pub amplitude: f64,
    pub validity: bool,
    pub mode: u8,
    pub quality: u8,
}

impl RadarScanRecord {
    /// Checks the schema invariants; `line` is used in the error.
    pub fn validate(&self, line: usize) -> Result<()> {
        let fail = |m: String| Err(Error::InvariantViolation { line, message: m });
        let values = [
            self.range_m,
            self.azimuth_rad,
            self.elevation_rad,
            self.range_rate_mps,
            self.amplitude,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return fail("non-finite value".into());
        }
        if self.range_m < 0.0 {
            return fail(format!("negative range {}", self.range_m));
        }
        let Some(cap) = mode_range_cap(self.mode) else {
            return fail(format!("mode {} not in 0..=2", self.mode));
        };
        if self.range_m > cap {
            return fail(format!("range {} m exceeds the {cap} m cap of mode {}", self.range_m, self.mode));
        }
        if self.azimuth_rad.abs() > MAX_AZIMUTH {
            return fail(format!("azimuth {} rad outside +-50 degrees", self.azimuth_rad));
        }
        if self.quality > 2 {
            return fail(format!("quality {} not in 0..=2", self.quality));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        spherical_to_cartesian(self.range_m, self.azimuth_rad, self.elevation_rad)
    }

    pub fn attributes(&self) -> PointAttributes {
        PointAttributes {
            amplitude: Some(self.amplitude),
            range_rate: Some(self.range_rate_mps),
            mode: Some(self.mode),
            quality: Some(self.quality),
        }
    }

    fn to_csv_row(self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.timestamp_us,
            self.range_m,
            self.azimuth_rad,
            self.elevation_rad,
            self.range_rate_mps,
            self.amplitude,
            u8::from(self.validity),
            self.mode,
            self.quality
        )
    }

    fn from_csv_row(row: &str, line: usize) -> Result<Self> {
        let perr = |m: String| Error::Parse { line, message: m };
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(perr(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("`{s}`: {e}")));
        let small = |s: &str| s.parse::<u8>().map_err(|e| perr(format!("`{s}`: {e}")));
        let validity = match f[6] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(perr(format!("validity `{other}` is not 0/1"))),
        };
        Ok(Self {
            timestamp_us: f[0].parse().map_err(|e| perr(format!("`{}`: {e}", f[0])))?,
            range_m: num(f[1])?,
            azimuth_rad: num(f[2])?,
            elevation_rad: num(f[3])?,
            range_rate_mps: num(f[4])?,
            amplitude: num(f[5])?,
            validity,
            mode: small(f[7])?,
            quality: small(f[8])?,
        })
    }
}

/// Parses records without checking invariants. Errors carry 1-based line
/// numbers.
pub fn parse_records(text: &str, format: ScanFormat) -> Result<Vec<(usize, RadarScanRecord)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if format == ScanFormat::Csv {
        match lines.next() {
            Some((_, h)) if h.trim() == SCAN_CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{SCAN_CSV_HEADER}`"),
                })
            }
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let rec = match format {
                ScanFormat::Csv => RadarScanRecord::from_csv_row(l, n)?,
                ScanFormat::Jsonl => serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: n,
                    message: e.to_string(),
                })?,
            };
            Ok((n, rec))
        })
        .collect()
}

/// Encodes records with shortest round-trip float formatting.
pub fn format_records(records: &[RadarScanRecord], format: ScanFormat) -> Result<String> {
    let mut out = String::new();
    if format == ScanFormat::Csv {
        out.push_str(SCAN_CSV_HEADER);
        out.push('\n');
    }
    for r in records {
        let finite = [r.range_m, r.azimuth_rad, r.elevation_rad, r.range_rate_mps, r.amplitude];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("record at {} us has a non-finite value", r.timestamp_us)));
        }
        match format {
            ScanFormat::Csv => out.push_str(&r.to_csv_row()),
            ScanFormat::Jsonl => out.push_str(&serde_json::to_string(r)?),
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub timestamp_us: i64,
    pub position: [f64; 3],
    /// Row-major sensor-to-world rotation.
    pub rotation: [[f64; 3]; 3],
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<SensorPose> {
        let r = nalgebra::Matrix3::from_fn(|i, j| self.rotation[i][j]);
        SensorPose::new(Vec3::from(self.position), r, timestamp_to_seconds(self.timestamp_us))
    }

    pub fn from_pose(pose: &SensorPose) -> Self {
        let o = &pose.orientation;
        Self {
            timestamp_us: seconds_to_timestamp(pose.time),
            position: pose.position.into(),
            rotation: [
                [o[(0, 0)], o[(0, 1)], o[(0, 2)]],
                [o[(1, 0)], o[(1, 1)], o[(1, 2)]],
                [o[(2, 0)], o[(2, 1)], o[(2, 2)]],
            ],
        }
    }
}

pub fn timestamp_to_seconds(us: i64) -> f64 {
    us as f64 * 1e-6
}

pub fn seconds_to_timestamp(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

/// Reads a JSON array of [`PoseRecord`]s keyed by timestamp.
pub fn read_pose_file(path: &Path) -> Result<BTreeMap<i64, SensorPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<PoseRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.timestamp_us, r.to_pose()?).is_some() {
            return Err(Error::InvalidInput(format!("duplicate pose for timestamp {}", r.timestamp_us)));
        }
    }
    Ok(out)
}

pub fn write_pose_file(path: &Path, poses: &[SensorPose]) -> Result<()> {
    let records: Vec<PoseRecord> = poses.iter().map(PoseRecord::from_pose).collect();
    let text = serde_json::to_string_pretty(&records)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub timestamp_us: i64,
    pub pose: SensorPose,
    /// Sensor-frame detections with their record attributes.
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanFile {
    /// Scans in ascending timestamp order.
    pub scans: Vec<Scan>,
    /// Records dropped because their validity flag was false.
    pub dropped_invalid: usize,
}

/// Groups valid records into scans. Invariants are checked on valid records
/// only; invalid ones are counted and skipped.
pub fn scans_from_records(
    records: &[(usize, RadarScanRecord)],
    poses: Option<&BTreeMap<i64, SensorPose>>,
) -> Result<ScanFile> {
    let mut groups: BTreeMap<i64, (Vec<Vec3>, Vec<PointAttributes>)> = BTreeMap::new();
    let mut dropped = 0;
    for (line, r) in records {
        if !r.validity {
            dropped += 1;
            continue;
        }
        r.validate(*line)?;
        let g = groups.entry(r.timestamp_us).or_default();
        g.0.push(r.position());
        g.1.push(r.attributes());
    }
    let scans = groups
        .into_iter()
        .map(|(ts, (points, attrs))| {
            let pose = match poses {
                Some(map) => map
                    .get(&ts)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("no pose for timestamp {ts}")))?,
                None => SensorPose::identity(timestamp_to_seconds(ts)),
            };
            Ok(Scan {
                timestamp_us: ts,
                pose,
                cloud: PointCloud::with_attributes(points, attrs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScanFile {
        scans,
        dropped_invalid: dropped,
    })
}

pub fn read_scan_file(path: &Path, format: ScanFormat, pose_file: Option<&Path>) -> Result<ScanFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(&text, format)?;
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no records", path.display())));
    }
    let poses = pose_file.map(read_pose_file).transpose()?;
    scans_from_records(&records, poses.as_ref())
}

/// Records for one scan: positions converted to range and angles; missing
/// attributes become zero amplitude and range rate, mode 2 and quality 0.
pub fn records_from_scan(timestamp_us: i64, cloud: &PointCloud) -> Result<Vec<RadarScanRecord>> {
    if !cloud.is_finite() {
        return Err(Error::InvalidInput(format!("scan {timestamp_us} has a non-finite coordinate")));
    }
    Ok(cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (range, az, el) = cartesian_to_spherical(p);
            let a = cloud.attribute(i);
            RadarScanRecord {
                timestamp_us,
                range_m: range,
                azimuth_rad: az,
                elevation_rad: el,
                range_rate_mps: a.range_rate.unwrap_or(0.0),
                amplitude: a.amplitude.unwrap_or(0.0),
                validity: true,
                mode: a.mode.unwrap_or(2),
                quality: a.quality.unwrap_or(0),
            }
        })
        .collect())
}

/// Writes scans in canonical column order. An empty list yields a header-only
/// CSV or an empty JSON-lines file.
pub fn write_scan_file(scans: &[Scan], path: &Path, format: ScanFormat) -> Result<()> {
    let mut records = Vec::new();
    for s in scans {
        records.extend(records_from_scan(s.timestamp_us, &s.cloud)?);
    }
    let text = format_records(&records, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-ray rendered depth table: `azimuth_rad,elevation_rad,depth_m,x,y,z,opacity`.
pub fn depth_csv(renders: &[crate::rendering::RayRender]) -> String {
    let mut out = String::from("azimuth_rad,elevation_rad,depth_m,x,y,z,opacity\n");
    for r in renders {
        let p = r.return_position;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.azimuth, r.elevation, r.expected_depth, p.x, p.y, p.z, r.opacity_sum
        );
    }
    out
}
