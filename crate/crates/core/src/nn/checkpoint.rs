//! SEVW checkpoint files: magic, version, a length-prefixed JSON
//! architecture block, then every tensor in declaration order as
//! length-prefixed little-endian f32 arrays. Saving a freshly loaded
//! checkpoint reproduces the file byte for byte.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::network::{FastLidarNet, NetConfig};

pub const SEVW_MAGIC: &[u8; 4] = b"SEVW";
pub const SEVW_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected SEVW")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("bad config block: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("tensor {index} has length {got}, expected {expected}")]
    TensorShape {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("trailing bytes after final tensor")]
    TrailingBytes,
}

pub fn write_checkpoint<W: Write>(mut w: W, net: &FastLidarNet) -> Result<(), CheckpointError> {
    w.write_all(SEVW_MAGIC)?;
    w.write_all(&SEVW_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&net.cfg)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    for tensor in net.tensors(false) {
        w.write_all(&(tensor.len() as u32).to_le_bytes())?;
        for &v in tensor {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<FastLidarNet, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SEVW_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != SEVW_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg: NetConfig = serde_json::from_slice(&cfg_bytes)?;

    // Build an empty net of the right shape, then fill its tensors.
    let mut net = FastLidarNet::new(cfg, 0).zeros_like();
    for (index, tensor) in net.tensors_mut(false).into_iter().enumerate() {
        let len = read_u32(&mut r)? as usize;
        if len != tensor.len() {
            return Err(CheckpointError::TensorShape {
                index,
                got: len,
                expected: tensor.len(),
            });
        }
        let mut buf = vec![0u8; 4 * len];
        r.read_exact(&mut buf)?;
        for (v, chunk) in tensor.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => Ok(net),
        _ => Err(CheckpointError::TrailingBytes),
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &std::path::Path, net: &FastLidarNet) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<FastLidarNet, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> FastLidarNet {
        let cfg = NetConfig {
            k: 2,
            widths: [3, 3, 4, 5],
            map_widths: [2, 3],
            map_feat: 4,
            trunk_feat: 5,
            ..NetConfig::default()
        };
        FastLidarNet::new(cfg, 42)
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let net = small_net();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &net).unwrap();
        let loaded = read_checkpoint(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_checkpoint(&mut again, &loaded).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(loaded.cfg, net.cfg);
    }

    #[test]
    fn tensor_count_and_order_stable() {
        let net = small_net();
        let loaded = {
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &net).unwrap();
            read_checkpoint(bytes.as_slice()).unwrap()
        };
        for (a, b) in net.tensors(false).iter().zip(loaded.tensors(false)) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_checkpoint(bytes.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn bad_version_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &small_net()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            read_checkpoint(bytes.as_slice()),
            Err(CheckpointError::BadVersion(9))
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &small_net()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &small_net()).unwrap();
        bytes.push(0);
        assert!(matches!(
            read_checkpoint(bytes.as_slice()),
            Err(CheckpointError::TrailingBytes)
        ));
    }
}
