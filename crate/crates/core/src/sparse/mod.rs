//! The data-structure layer behind the sparse convolution engine:
//! packed coordinate keys, a Cuckoo hash table for coordinate-to-index
//! lookup, and kernel-map construction for submanifold and strided
//! convolution.

mod coord;
mod cuckoo;
mod kernel_map;

pub use coord::{pack_coord, unpack_coord, CoordKey, CoordRangeError, COORD_BITS, COORD_BIAS};
pub use cuckoo::{CuckooError, CuckooTable};
pub use kernel_map::{
    build_kernel_map, downsample_coords, KernelMap, KernelMapError, OffsetPairs,
};
