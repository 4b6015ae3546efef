//! Binary PLY export/import in the layout splat viewers expect.
//!
//! Per-vertex float fields: position, zero normals, DC color coefficients,
//! opacity logit, log scales, and the rotation quaternion (w, x, y, z).
//! Color round-trips through the DC basis factor so external viewers shade
//! the splats correctly; anchor bookkeeping is not serialized — imports are
//! for viewing and evaluation, not for resuming a run.

use super::{Gaussian, GaussianMap};
use crate::error::{Error, Result};
use crate::geom::Quaternion;
use nalgebra::Vector3;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Zeroth spherical-harmonic basis constant: color = 0.5 + C0·f_dc.
const SH_C0: f64 = 0.282_094_791_773_878_14;

const FIELDS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
    "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn write_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", map.len()));
    for f in FIELDS {
        header.push_str(&format!("property float {f}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    for g in map.gaussians() {
        let q = g.coords_for_ply();
        for v in q {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

impl Gaussian {
    fn coords_for_ply(&self) -> [f64; 17] {
        let [qw, qx, qy, qz] = self.rot.coords();
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            0.0,
            0.0,
            0.0,
            (self.color.x - 0.5) / SH_C0,
            (self.color.y - 0.5) / SH_C0,
            (self.color.z - 0.5) / SH_C0,
            self.opacity_logit,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            qw,
            qx,
            qy,
            qz,
        ]
    }
}

pub fn read_ply(path: &Path) -> Result<GaussianMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line_no = 0usize;
    let parse_err = |line: usize, what: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        what,
    };
    let mut read_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        let mut s = String::new();
        r.read_line(&mut s).map_err(|e| Error::io(path, e))?;
        line_no += 1;
        Ok(s.trim_end().to_string())
    };
    if read_line(&mut reader)? != "ply" {
        return Err(parse_err(1, "missing 'ply' magic".into()));
    }
    if read_line(&mut reader)? != "format binary_little_endian 1.0" {
        return Err(parse_err(2, "only binary little-endian 1.0 supported".into()));
    }
    let count_line = read_line(&mut reader)?;
    let count: usize = count_line
        .strip_prefix("element vertex ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(3, format!("expected vertex count, got '{count_line}'")))?;
    for (i, field) in FIELDS.iter().enumerate() {
        let line = read_line(&mut reader)?;
        let expect = format!("property float {field}");
        if line != expect {
            return Err(parse_err(4 + i, format!("expected '{expect}', got '{line}'")));
        }
    }
    if read_line(&mut reader)? != "end_header" {
        return Err(parse_err(21, "missing end_header".into()));
    }
    let mut map = GaussianMap::new();
    let mut buf = [0u8; 17 * 4];
    let mut all = Vec::new();
    for i in 0..count {
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        let f = |j: usize| f32::from_le_bytes(buf[j * 4..j * 4 + 4].try_into().unwrap()) as f64;
        let rot = Quaternion::try_new(f(13), f(14), f(15), f(16)).map_err(|_| {
            Error::InvalidGaussian {
                index: i,
                what: "zero-norm rotation in PLY".into(),
            }
        })?;
        all.push(Gaussian {
            mean: Vector3::new(f(0), f(1), f(2)),
            rot,
            log_scale: Vector3::new(f(10), f(11), f(12)),
            opacity_logit: f(9),
            color: Vector3::new(
                0.5 + SH_C0 * f(6),
                0.5 + SH_C0 * f(7),
                0.5 + SH_C0 * f(8),
            ),
            anchor_keyframe: 0,
            anchor_pixel: (0, 0),
        });
    }
    map.extend(all);
    Ok(map)
}
