//! Bijective packing of integer voxel coordinates into 64-bit keys:
//! three 21-bit biased fields (bias 2^20), top bit reserved.

use thiserror::Error;

pub const COORD_BITS: u32 = 21;
pub const COORD_BIAS: i64 = 1 << 20;

const FIELD_MASK: u64 = (1 << COORD_BITS) - 1;

/// Packed (x, y, z): x in bits 42..63, y in bits 21..42, z in bits 0..21.
pub type CoordKey = u64;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("coordinate component {0} outside [-2^20, 2^20)")]
pub struct CoordRangeError(pub i32);

pub fn pack_coord(c: [i32; 3]) -> Result<CoordKey, CoordRangeError> {
    let mut key = 0u64;
    for (shift, &v) in [42u32, 21, 0].iter().zip(c.iter()) {
        let biased = v as i64 + COORD_BIAS;
        if !(0..1 << COORD_BITS).contains(&biased) {
            return Err(CoordRangeError(v));
        }
        key |= (biased as u64) << shift;
    }
    Ok(key)
}

pub fn unpack_coord(key: CoordKey) -> [i32; 3] {
    let field = |shift: u32| ((key >> shift) & FIELD_MASK) as i64 - COORD_BIAS;
    [field(42) as i32, field(21) as i32, field(0) as i32]
}
