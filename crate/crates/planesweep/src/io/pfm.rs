//! Portable float map reader/writer for depth and confidence grids.
//!
//! Header: "Pf\n<width> <height>\n<scale>\n" followed by binary f32
//! scanlines. Following the format convention, scanlines are stored
//! bottom-up and a negative scale token marks little-endian payloads (the
//! only endianness we write). Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn write_depth(grid: &Grid<f64>, path: &Path) -> Result<()> {
    if grid.height() == 0 || grid.width() == 0 {
        return Err(Error::Shape("refusing to write an empty float map".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", grid.width(), grid.height())?;
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            w.write_all(&(grid.at(y, x) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<Grid<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let parse = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };

    let magic = read_token(&mut r)?;
    if magic != "Pf" {
        return Err(parse(1, &format!("expected Pf magic, found '{magic}'")));
    }
    let width: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| parse(2, "bad width"))?;
    let height: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| parse(2, "bad height"))?;
    if width == 0 || height == 0 {
        return Err(parse(2, "zero-sized float map"));
    }
    if width.saturating_mul(height) > 1 << 28 {
        return Err(parse(2, "float map dimensions overflow"));
    }
    let scale: f64 = read_token(&mut r)?
        .parse()
        .map_err(|_| parse(3, "bad scale token"))?;
    if scale == 0.0 {
        return Err(parse(3, "scale token must be non-zero"));
    }
    let little_endian = scale < 0.0;

    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw)
        .map_err(|_| parse(4, "truncated float payload"))?;
    let mut grid = Grid::zeros(height, width);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        // Bottom-up scanline order.
        let y = height - 1 - i / width;
        let x = i % width;
        grid.set(y, x, v as f64);
    }
    Ok(grid)
}

/// Next whitespace-delimited token of the header.
fn read_token(r: &mut impl Read) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c.is_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
        if token.len() > 64 {
            return Err(Error::Structure("header token too long".into()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.pfm");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        // Values representable in f32 so the f64 grid survives unchanged.
        let grid = Grid::from_fn(13, 7, |_, _| rng.gen_range(-100.0f32..100.0) as f64);
        write_depth(&grid, &path).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn negative_scale_means_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("le.pfm");
        let grid = Grid::from_fn(2, 2, |y, x| (y * 2 + x) as f64);
        write_depth(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.len() - 16;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        assert!(header.contains("-1.0"));
        // Bottom row first; first float is grid(1, 0) = 2.0 little-endian.
        let first = f32::from_le_bytes([
            bytes[header_end],
            bytes[header_end + 1],
            bytes[header_end + 2],
            bytes[header_end + 3],
        ]);
        assert_eq!(first, 2.0);
    }

    #[test]
    fn rejects_empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"PF\n2 2\n-1.0\n").unwrap();
        assert!(read_depth(&path).is_err());
        std::fs::write(&path, b"Pf\n0 0\n-1.0\n").unwrap();
        assert!(read_depth(&path).is_err());
        std::fs::write(&path, b"Pf\n2 2\n-1.0\n\x00\x00").unwrap();
        assert!(read_depth(&path).is_err());
    }
}
