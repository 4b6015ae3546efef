//! Trajectory files in the TUM text format:
//! `timestamp tx ty tz qx qy qz qw`, one pose per line, `#` comments.
//! Sub-frame poses use fractional timestamps `frame_index + t`.

use crate::error::{Error, Result};
use crate::geom::{Pose, Quaternion};
use nalgebra::Vector3;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub stamp: f64,
    pub pose: Pose,
}

pub fn write_trajectory(path: &Path, poses: &[TimedPose]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    writeln!(out, "# timestamp tx ty tz qx qy qz qw").map_err(|e| Error::io(path, e))?;
    for tp in poses {
        let t = tp.pose.trans;
        let q = tp.pose.rot;
        writeln!(
            out,
            "{:.9} {:.15} {:.15} {:.15} {:.15} {:.15} {:.15} {:.15}",
            tp.stamp,
            t.x,
            t.y,
            t.z,
            q.x(),
            q.y(),
            q.z(),
            q.w()
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                what: format!("bad number {s:?}: {e}"),
            })
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                what: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let v: Vec<f64> = fields.iter().map(|s| parse(s)).collect::<Result<_>>()?;
        let rot = Quaternion::try_new(v[7], v[4], v[5], v[6]).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            what: e.to_string(),
        })?;
        poses.push(TimedPose {
            stamp: v[0],
            pose: Pose::new(rot, Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(poses)
}
