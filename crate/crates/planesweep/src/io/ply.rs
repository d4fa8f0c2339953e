//! Binary little-endian polygon-format writer for fused point clouds
//! (xyz as f32, rgb as u8).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: [f64; 3],
    pub color: [u8; 3],
}

/// A fused cloud; coordinates are world units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, position: [f64; 3], color: [u8; 3]) {
        self.points.push(Point { position, color });
    }
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    for p in &cloud.points {
        if p.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("point cloud contains non-finite coordinates".into()));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n",
        cloud.points.len()
    )?;
    for p in &cloud.points {
        for c in p.position {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        w.write_all(&p.color)?;
    }
    w.flush()?;
    Ok(())
}
