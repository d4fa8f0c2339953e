//! Camera text files: an `extrinsic` 4x4 row-major block, an `intrinsic`
//! 3x3 block, then a line `d_min interval n_planes d_max` (only the range
//! endpoints are consumed; interval and plane count are legacy fields).

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::geometry::Camera;

pub fn write_camera(camera: &Camera, path: &Path) -> Result<()> {
    let t = camera.extrinsics();
    let k = camera.intrinsics();
    let (d_min, d_max) = camera.depth_range();
    let mut out = String::from("extrinsic\n");
    for r in 0..4 {
        for c in 0..4 {
            out.push_str(&format!("{}{}", if c > 0 { " " } else { "" }, t[(r, c)]));
        }
        out.push('\n');
    }
    out.push_str("\nintrinsic\n");
    for r in 0..3 {
        for c in 0..3 {
            out.push_str(&format!("{}{}", if c > 0 { " " } else { "" }, k[(r, c)]));
        }
        out.push('\n');
    }
    let n_planes = 192usize;
    let interval = (d_max - d_min) / n_planes as f64;
    out.push_str(&format!("\n{d_min} {interval} {n_planes} {d_max}\n"));
    fs::write(path, out)?;
    Ok(())
}

struct Lines<'a> {
    path: &'a Path,
    lines: Vec<(usize, &'a str)>,
    cursor: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        while self.cursor < self.lines.len() {
            let (n, text) = self.lines[self.cursor];
            self.cursor += 1;
            if !text.trim().is_empty() {
                return Ok((n, text));
            }
        }
        Err(Error::Parse {
            path: self.path.to_path_buf(),
            line: self.lines.last().map(|(n, _)| *n).unwrap_or(0) + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path)?;
    let mut lines = Lines {
        path,
        lines: text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect(),
        cursor: 0,
    };
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let (n, tag) = lines.next("extrinsic block")?;
    if tag.trim() != "extrinsic" {
        return Err(parse_err(n, format!("expected 'extrinsic' header, found '{}'", tag.trim())));
    }
    let mut t = Matrix4::zeros();
    for r in 0..4 {
        let (n, row) = lines.next("extrinsic row")?;
        let vals = parse_row(row, 4).map_err(|msg| parse_err(n, msg))?;
        for c in 0..4 {
            t[(r, c)] = vals[c];
        }
    }

    let (n, tag) = lines.next("intrinsic block")?;
    if tag.trim() != "intrinsic" {
        return Err(parse_err(n, format!("expected 'intrinsic' header, found '{}'", tag.trim())));
    }
    let mut k = Matrix3::zeros();
    for r in 0..3 {
        let (n, row) = lines.next("intrinsic row")?;
        let vals = parse_row(row, 3).map_err(|msg| parse_err(n, msg))?;
        for c in 0..3 {
            k[(r, c)] = vals[c];
        }
    }

    let (n, range_line) = lines.next("depth range line")?;
    let vals = parse_row(range_line, 0).map_err(|msg| parse_err(n, msg))?;
    // d_min interval n_planes d_max; older files may omit the middle pair.
    let (d_min, d_max) = match vals.len() {
        4 => (vals[0], vals[3]),
        2 => (vals[0], vals[1]),
        _ => {
            return Err(parse_err(
                n,
                format!("depth range line needs 4 (or 2) numbers, found {}", vals.len()),
            ))
        }
    };

    Camera::new(k, t, (d_min, d_max))
}

fn parse_row(line: &str, expect: usize) -> std::result::Result<Vec<f64>, String> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad number: {e}"))?;
    if expect != 0 && vals.len() != expect {
        return Err(format!("expected {expect} numbers, found {}", vals.len()));
    }
    Ok(vals)
}
