//! Point clouds and their JSON-lines / CSV encodings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Sensor attributes carried through untouched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PointAttributes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<u8>,
}

impl PointAttributes {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Either empty or one entry per point.
    pub attributes: Vec<PointAttributes>,
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    x: f64,
    y: f64,
    z: f64,
    #[serde(flatten)]
    attributes: PointAttributes,
}

const CSV_HEADER: &str = "x,y,z,amplitude,range_rate,mode,quality";

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            attributes: Vec::new(),
        }
    }

    pub fn with_attributes(points: Vec<Vec3>, attributes: Vec<PointAttributes>) -> Result<Self> {
        if !attributes.is_empty() && attributes.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} attribute entries for {} points",
                attributes.len(),
                points.len()
            )));
        }
        Ok(Self { points, attributes })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn attribute(&self, i: usize) -> PointAttributes {
        self.attributes.get(i).copied().unwrap_or_default()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput("point cloud contains non-finite coordinates".into()))
        }
    }

    /// Points whose distance from the sensor origin is at most `max_range`.
    pub fn gated(&self, max_range: f64) -> PointCloud {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.points[i].norm() <= max_range)
            .collect();
        PointCloud {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            attributes: if self.attributes.is_empty() {
                Vec::new()
            } else {
                keep.iter().map(|&i| self.attributes[i]).collect()
            },
        }
    }

    pub fn translated(&self, offset: &Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p + offset).collect(),
            attributes: self.attributes.clone(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.check_finite()?;
        let mut out = String::new();
        for (i, p) in self.points.iter().enumerate() {
            let rec = PointRecord {
                x: p.x,
                y: p.y,
                z: p.z,
                attributes: self.attribute(i),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut attributes = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: PointRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            points.push(Vec3::new(rec.x, rec.y, rec.z));
            attributes.push(rec.attributes);
        }
        Ok(Self::finish(points, attributes))
    }

    pub fn to_csv(&self) -> Result<String> {
        self.check_finite()?;
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let opt8 = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, p) in self.points.iter().enumerate() {
            let a = self.attribute(i);
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.x,
                p.y,
                p.z,
                opt(a.amplitude),
                opt(a.range_rate),
                opt8(a.mode),
                opt8(a.quality)
            )
            .expect("writing to a String cannot fail");
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{CSV_HEADER}`"),
                })
            }
        }
        let mut points = Vec::new();
        let mut attributes = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let perr = |m: String| Error::Parse {
                line: line_no,
                message: m,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 7 {
                return Err(perr(format!("expected 7 fields, found {}", fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("`{s}`: {e}")));
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let opt8 = |s: &str| -> Result<Option<u8>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<u8>().map(Some).map_err(|e| perr(format!("`{s}`: {e}")))
                }
            };
            points.push(Vec3::new(num(fields[0])?, num(fields[1])?, num(fields[2])?));
            attributes.push(PointAttributes {
                amplitude: opt(fields[3])?,
                range_rate: opt(fields[4])?,
                mode: opt8(fields[5])?,
                quality: opt8(fields[6])?,
            });
        }
        Ok(Self::finish(points, attributes))
    }

    fn finish(points: Vec<Vec3>, attributes: Vec<PointAttributes>) -> Self {
        let attributes = if attributes.iter().all(PointAttributes::is_empty) {
            Vec::new()
        } else {
            attributes
        };
        Self { points, attributes }
    }

    /// Reads a cloud, choosing the format from the extension (`.csv` or JSON-lines).
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if is_csv(path) {
            Self::from_csv(&text)
        } else {
            Self::from_jsonl(&text)
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = if is_csv(path) { self.to_csv()? } else { self.to_jsonl()? };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn is_csv(path: &std::path::Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("csv")
}
