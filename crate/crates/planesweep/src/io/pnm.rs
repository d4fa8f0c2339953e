//! Portable graymap/pixmap images (P2/P5 gray, P3/P6 color), the
//! zero-dependency formats the scene directories use.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// A decoded image: luminance in [0, 255] plus the original color when the
/// file carried one.
#[derive(Debug, Clone)]
pub struct Image {
    pub luminance: Grid<f64>,
    pub color: Option<Grid<[u8; 3]>>,
}

pub fn write_gray(grid: &Grid<f64>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", grid.width(), grid.height())?;
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            w.write_all(&[grid.at(y, x).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_color(grid: &Grid<[u8; 3]>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", grid.width(), grid.height())?;
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            w.write_all(grid.get(y, x))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    // magic, width, height, maxval as whitespace/comment-separated tokens
    let magic = next_token(&mut r, &mut header)?;
    let width: usize = next_token(&mut r, &mut header)?
        .parse()
        .map_err(|_| parse(1, "bad width".into()))?;
    let height: usize = next_token(&mut r, &mut header)?
        .parse()
        .map_err(|_| parse(1, "bad height".into()))?;
    let maxval: u32 = next_token(&mut r, &mut header)?
        .parse()
        .map_err(|_| parse(1, "bad maxval".into()))?;
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 28 {
        return Err(parse(1, format!("unreasonable dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse(1, format!("unsupported maxval {maxval}")));
    }
    let scale = 255.0 / maxval as f64;

    match magic.as_str() {
        "P5" | "P6" => {
            let channels = if magic == "P5" { 1 } else { 3 };
            let mut raw = vec![0u8; width * height * channels];
            r.read_exact(&mut raw)
                .map_err(|_| parse(2, "truncated pixel payload".into()))?;
            Ok(decode(width, height, channels, &raw, scale))
        }
        "P2" | "P3" => {
            let channels = if magic == "P2" { 1 } else { 3 };
            let mut text = String::new();
            r.read_to_string(&mut text)?;
            let values: Vec<u8> = text
                .split_whitespace()
                .map(|t| t.parse::<u32>().map(|v| v.min(255) as u8))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse(2, "bad ascii sample".into()))?;
            if values.len() != width * height * channels {
                return Err(parse(
                    2,
                    format!(
                        "expected {} samples, found {}",
                        width * height * channels,
                        values.len()
                    ),
                ));
            }
            Ok(decode(width, height, channels, &values, scale))
        }
        other => Err(parse(1, format!("unsupported magic '{other}'"))),
    }
}

fn decode(width: usize, height: usize, channels: usize, raw: &[u8], scale: f64) -> Image {
    if channels == 1 {
        let luminance = Grid::from_fn(height, width, |y, x| raw[y * width + x] as f64 * scale);
        Image {
            luminance,
            color: None,
        }
    } else {
        let color = Grid::from_fn(height, width, |y, x| {
            let i = (y * width + x) * 3;
            [raw[i], raw[i + 1], raw[i + 2]]
        });
        let luminance = Grid::from_fn(height, width, |y, x| {
            let [r, g, b] = *color.get(y, x);
            (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) * scale
        });
        Image {
            luminance,
            color: Some(color),
        }
    }
}

/// Next header token, skipping whitespace and '#' comments.
fn next_token(r: &mut impl Read, scratch: &mut Vec<u8>) -> Result<String> {
    scratch.clear();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_whitespace() {
            if scratch.is_empty() {
                continue;
            }
            return Ok(String::from_utf8_lossy(scratch).into_owned());
        }
        scratch.push(byte[0]);
        if scratch.len() > 32 {
            return Err(Error::Structure("image header token too long".into()));
        }
    }
}
