//! Kernel-map construction: for every kernel offset, the list of
//! (input site, output site) pairs that contribute a multiply-accumulate.
//! Stride 1 is submanifold (output sites == input sites); stride 2
//! downsamples with the convention in = 2*out + delta.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{pack_coord, CoordRangeError, CuckooError, CuckooTable};

#[derive(Debug, Error)]
pub enum KernelMapError {
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("stride {0} not supported (must be 1 or 2)")]
    BadStride(usize),
    #[error(transparent)]
    Coord(#[from] CoordRangeError),
    #[error(transparent)]
    Hash(#[from] CuckooError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetPairs {
    pub delta: [i32; 3],
    /// (input_index, output_index), sorted by (output_index, input_index).
    pub pairs: Vec<(u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct KernelMap {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_coords: Vec<[i32; 3]>,
    pub out_coords: Vec<[i32; 3]>,
    /// One entry per kernel offset in canonical order: dx outermost,
    /// then dy, then dz, each running -r..=r.
    pub offsets: Vec<OffsetPairs>,
}

impl KernelMap {
    pub fn num_pairs(&self) -> usize {
        self.offsets.iter().map(|o| o.pairs.len()).sum()
    }

    /// Index of the all-zero offset.
    pub fn center_offset(&self) -> usize {
        self.offsets.len() / 2
    }

    /// One "delta: i->o" line per pair, for test fixtures.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for off in &self.offsets {
            for &(i, o) in &off.pairs {
                writeln!(
                    s,
                    "({},{},{}): {}->{}",
                    off.delta[0], off.delta[1], off.delta[2], i, o
                )
                .unwrap();
            }
        }
        s
    }
}

/// Offsets of a cubic window in canonical order.
pub fn window_offsets(kernel_size: usize) -> Vec<[i32; 3]> {
    let r = (kernel_size as i32 - 1) / 2;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

pub fn build_kernel_map(
    in_coords: &[[i32; 3]],
    kernel_size: usize,
    stride: usize,
) -> Result<KernelMap, KernelMapError> {
    if kernel_size % 2 == 0 {
        return Err(KernelMapError::EvenKernel(kernel_size));
    }
    if stride != 1 && stride != 2 {
        return Err(KernelMapError::BadStride(stride));
    }
    let keys = in_coords
        .iter()
        .map(|&c| pack_coord(c))
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<usize> = (0..in_coords.len()).collect();
    let table = CuckooTable::build(&keys, &values)?;

    let out_coords: Vec<[i32; 3]> = if stride == 1 {
        in_coords.to_vec()
    } else {
        downsample_coords(in_coords)
    };

    let offsets = window_offsets(kernel_size)
        .into_iter()
        .map(|delta| {
            let mut pairs = Vec::new();
            for (o, &out) in out_coords.iter().enumerate() {
                let probe = [
                    out[0] * stride as i32 + delta[0],
                    out[1] * stride as i32 + delta[1],
                    out[2] * stride as i32 + delta[2],
                ];
                if let Ok(key) = pack_coord(probe) {
                    if let Some(i) = table.query(key) {
                        pairs.push((i as u32, o as u32));
                    }
                }
            }
            OffsetPairs { delta, pairs }
        })
        .collect();

    Ok(KernelMap {
        kernel_size,
        stride,
        in_coords: in_coords.to_vec(),
        out_coords,
        offsets,
    })
}

/// Unique floor(c/2), stable by first occurrence.
pub fn downsample_coords(coords: &[[i32; 3]]) -> Vec<[i32; 3]> {
    let mut seen: HashMap<[i32; 3], ()> = HashMap::new();
    let mut out = Vec::new();
    for c in coords {
        let d = [
            c[0].div_euclid(2),
            c[1].div_euclid(2),
            c[2].div_euclid(2),
        ];
        if seen.insert(d, ()).is_none() {
            out.push(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// O(n^2 * |window|) reference enumeration, independent of the hash
    /// table path.
    fn brute_force_pairs(
        in_coords: &[[i32; 3]],
        out_coords: &[[i32; 3]],
        kernel_size: usize,
        stride: i32,
    ) -> BTreeSet<([i32; 3], u32, u32)> {
        let mut set = BTreeSet::new();
        for delta in window_offsets(kernel_size) {
            for (o, out) in out_coords.iter().enumerate() {
                for (i, inp) in in_coords.iter().enumerate() {
                    if (0..3).all(|a| inp[a] == out[a] * stride + delta[a]) {
                        set.insert((delta, i as u32, o as u32));
                    }
                }
            }
        }
        set
    }

    fn as_set(km: &KernelMap) -> BTreeSet<([i32; 3], u32, u32)> {
        km.offsets
            .iter()
            .flat_map(|o| o.pairs.iter().map(move |&(i, out)| (o.delta, i, out)))
            .collect()
    }

    #[test]
    fn single_point_has_only_center_pair() {
        let km = build_kernel_map(&[[0, 0, 0]], 3, 1).unwrap();
        assert_eq!(km.out_coords, vec![[0, 0, 0]]);
        assert_eq!(km.num_pairs(), 1);
        assert_eq!(km.offsets[km.center_offset()].pairs, vec![(0, 0)]);
    }

    #[test]
    fn two_adjacent_points_give_four_pairs() {
        let km = build_kernel_map(&[[0, 0, 0], [1, 0, 0]], 3, 1).unwrap();
        assert_eq!(km.num_pairs(), 4);
        let brute = brute_force_pairs(&km.in_coords, &km.out_coords, 3, 1);
        assert_eq!(as_set(&km), brute);
    }

    #[test]
    fn stride_two_floor_division() {
        let km = build_kernel_map(&[[0, 0, 0], [1, 1, 1], [2, 0, 0]], 3, 2).unwrap();
        assert_eq!(km.out_coords, vec![[0, 0, 0], [1, 0, 0]]);
        let brute = brute_force_pairs(&km.in_coords, &km.out_coords, 3, 2);
        assert_eq!(as_set(&km), brute);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(
            build_kernel_map(&[[0, 0, 0]], 2, 1),
            Err(KernelMapError::EvenKernel(2))
        ));
    }

    #[test]
    fn bad_stride_rejected() {
        assert!(matches!(
            build_kernel_map(&[[0, 0, 0]], 3, 3),
            Err(KernelMapError::BadStride(3))
        ));
    }

    #[test]
    fn downsample_cube_corners() {
        let corners: Vec<[i32; 3]> = (0..8)
            .map(|i| [(i & 1) as i32, ((i >> 1) & 1) as i32, ((i >> 2) & 1) as i32])
            .collect();
        assert_eq!(downsample_coords(&corners), vec![[0, 0, 0]]);
        assert!(downsample_coords(&[]).is_empty());
    }

    #[test]
    fn dump_lists_every_pair() {
        let km = build_kernel_map(&[[0, 0, 0], [1, 0, 0]], 3, 1).unwrap();
        let dump = km.dump();
        assert_eq!(dump.lines().count(), km.num_pairs());
        assert!(dump.contains("(0,0,0): 0->0"));
        assert!(dump.contains("(1,0,0): 1->0"));
    }

    fn coord_set_strategy() -> impl Strategy<Value = Vec<[i32; 3]>> {
        prop::collection::btree_set((-8i32..=8, -8i32..=8, -8i32..=8), 1..120)
            .prop_map(|s| s.into_iter().map(|(x, y, z)| [x, y, z]).collect())
    }

    proptest! {
        #[test]
        fn matches_brute_force_stride_1(coords in coord_set_strategy()) {
            let km = build_kernel_map(&coords, 3, 1).unwrap();
            prop_assert_eq!(&km.out_coords, &km.in_coords);
            let brute = brute_force_pairs(&km.in_coords, &km.out_coords, 3, 1);
            prop_assert_eq!(as_set(&km), brute);
        }

        #[test]
        fn matches_brute_force_stride_2(coords in coord_set_strategy()) {
            let km = build_kernel_map(&coords, 3, 2).unwrap();
            let brute = brute_force_pairs(&km.in_coords, &km.out_coords, 3, 2);
            prop_assert_eq!(as_set(&km), brute);
        }

        #[test]
        fn stride_1_pair_counts_symmetric(coords in coord_set_strategy()) {
            let km = build_kernel_map(&coords, 3, 1).unwrap();
            let n = km.offsets.len();
            for i in 0..n {
                prop_assert_eq!(
                    km.offsets[i].pairs.len(),
                    km.offsets[n - 1 - i].pairs.len()
                );
            }
        }
    }
}
