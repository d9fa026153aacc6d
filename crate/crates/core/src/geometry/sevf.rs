//! Frame file format: little-endian, magic "SEVF", u32 version,
//! u32 point count, per-point 4xf32 (x, y, z, intensity), then a label
//! record of u32 K followed by K f32 curvatures. See docs/formats.md.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ControlLabels, Point, PointCloud};

pub const MAGIC: [u8; 4] = *b"SEVF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SevfError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic (expected SEVF)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
}

pub fn write_frame<W: Write>(
    mut w: W,
    cloud: &PointCloud,
    labels: &ControlLabels,
) -> Result<(), SevfError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    for &y in &labels.values {
        w.write_all(&(y as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_frame<R: Read>(mut r: R) -> Result<(PointCloud, ControlLabels), SevfError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(SevfError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(SevfError::BadVersion(version));
    }
    let n = read_u32(&mut r)? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = read_f32(&mut r)? as f64;
        let y = read_f32(&mut r)? as f64;
        let z = read_f32(&mut r)? as f64;
        let intensity = read_f32(&mut r)? as f64;
        points.push(Point { x, y, z, intensity });
    }
    let k = read_u32(&mut r)? as usize;
    let mut values = Vec::with_capacity(k);
    for _ in 0..k {
        values.push(read_f32(&mut r)? as f64);
    }
    Ok((PointCloud::new(points), ControlLabels::new(values)))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R) -> io::Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}
