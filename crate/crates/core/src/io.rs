//! Plain file formats: PFM depth maps, KITTI-style pose files, intrinsics
//! files and flat `key = value` configs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidTransform};

/// Single-channel little-endian PFM (scale `-1.0`, bottom row first).
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    // header: three whitespace-terminated tokens after the magic line
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    pos += 1; // the single whitespace byte ending the header
    if fields[0] != "Pf" {
        return Err(format!("unsupported PFM type {:?}", fields[0]));
    }
    let width: usize = fields[1].parse().map_err(|_| format!("bad width {:?}", fields[1]))?;
    let height: usize = fields[2].parse().map_err(|_| format!("bad height {:?}", fields[2]))?;
    let scale: f32 = fields[3].parse().map_err(|_| format!("bad scale {:?}", fields[3]))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != width * height * 4 {
        return Err(format!(
            "expected {} data bytes, found {}",
            width * height * 4,
            body.len()
        ));
    }
    let read = |c: &[u8]| {
        let b: [u8; 4] = c.try_into().unwrap();
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let mut values = vec![0.0; width * height];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let (row, col) = (height - 1 - i / width, i % width);
        values[row * width + col] = read(c);
    }
    Ok((width, height, values))
}

pub fn write_depth_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pfm(depth.width, depth.height, &depth.values)).map_err(|e| Error::io(path, e))
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, v) = decode_pfm(&bytes).map_err(|m| Error::format(path, m))?;
    DepthMap::new(w, h, v)
}

/// One line of 12 numbers, row-major `[R|t]`.
pub fn format_pose(t: &RigidTransform) -> String {
    t.to_row_major()
        .iter()
        .map(|v| format!("{v:.9e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_pose(line: &str) -> std::result::Result<RigidTransform, String> {
    let vals: Vec<f64> = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("bad number {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let arr: [f64; 12] = vals
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 12 numbers, found {}", v.len()))?;
    RigidTransform::from_row_major(&arr).map_err(|e| e.to_string())
}

pub fn format_poses(poses: &[RigidTransform]) -> String {
    poses.iter().map(|p| format_pose(p) + "\n").collect()
}

pub fn parse_poses(text: &str) -> std::result::Result<Vec<RigidTransform>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_pose(l).map_err(|m| format!("line {}: {m}", i + 1)))
        .collect()
}

pub fn write_poses(poses: &[RigidTransform], path: &Path) -> Result<()> {
    std::fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text).map_err(|m| Error::format(path, m))
}

/// `fx fy cx cy width height` on one line.
pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_intrinsics(text: &str) -> std::result::Result<CameraIntrinsics, String> {
    let tok: Vec<&str> = text.split_whitespace().collect();
    if tok.len() != 6 {
        return Err(format!("expected 6 fields, found {}", tok.len()));
    }
    let f = |i: usize| tok[i].parse::<f64>().map_err(|_| format!("bad number {:?}", tok[i]));
    let u = |i: usize| tok[i].parse::<usize>().map_err(|_| format!("bad size {:?}", tok[i]));
    CameraIntrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?).map_err(|e| e.to_string())
}

/// Parsed `key = value` lines with their 1-based line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    /// `#` starts a comment; blank lines are skipped; duplicate keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    msg: format!("expected `key = value`, found {line:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.iter().any(|(_, key, _)| key == k) {
                return Err(Error::Config {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            entries.push((i + 1, k.to_string(), v.to_string()));
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Parses one config value, naming the key and line on failure.
pub(crate) fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid value {value:?} for `{key}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_layout() {
        let values: Vec<f32> = (0..6).map(|v| v as f32 + 0.5).collect();
        let bytes = encode_pfm(3, 2, &values);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row stored first
        let body = &bytes[bytes.len() - 24..];
        assert_eq!(&body[..4], &3.5f32.to_le_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap(), (3, 2, values));
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n0000").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n0000").is_err());
    }

    #[test]
    fn pose_lines() {
        let t = crate::geometry::compose(
            &RigidTransform::rot_y(0.4),
            &RigidTransform::from_translation(nalgebra::Vector3::new(1.0, -2.0, 0.25)),
        );
        let back = parse_pose(&format_pose(&t)).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-9);
        assert!(parse_pose("1 0 0 0 0 1 0 0 0 0 1").is_err());
        assert!(parse_pose("2 0 0 0 0 1 0 0 0 0 1 0").is_err());
        let many = parse_poses(&format_poses(&[t, RigidTransform::identity()])).unwrap();
        assert_eq!(many.len(), 2);
        assert_eq!(many[1], RigidTransform::identity());
    }

    #[test]
    fn intrinsics_line() {
        let k = CameraIntrinsics::square(32);
        assert_eq!(parse_intrinsics(&format_intrinsics(&k)).unwrap(), k);
        assert!(parse_intrinsics("1 2 3").is_err());
    }

    #[test]
    fn key_values() {
        let kv = KeyValues::parse("# header\nepochs = 3  # trailing\n\nlr=0.001\n").unwrap();
        assert_eq!(
            kv.entries,
            vec![(2, "epochs".into(), "3".into()), (4, "lr".into(), "0.001".into())]
        );
        assert!(matches!(
            KeyValues::parse("a = 1\nbroken"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
    }
}
