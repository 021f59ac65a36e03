//! Traversal orders that flatten an `H x W` grid into a scan sequence.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPath {
    /// 1 row-major, 2 row-major reversed, 3 column-major, 4 column-major reversed.
    pub direction: u8,
    /// `perm[t]` is the flat pixel visited at step `t`.
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
}

pub fn scan_paths(h: usize, w: usize, direction: u8) -> Result<ScanPath> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("empty grid {h}x{w}")));
    }
    let row_major: Vec<usize> = (0..h * w).collect();
    let col_major: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let perm = match direction {
        1 => row_major,
        2 => row_major.into_iter().rev().collect(),
        3 => col_major,
        4 => col_major.into_iter().rev().collect(),
        d => return Err(Error::InvalidArgument(format!("scan direction {d} not in 1..=4"))),
    };
    let mut inv_perm = vec![0; perm.len()];
    for (t, &p) in perm.iter().enumerate() {
        inv_perm[p] = t;
    }
    Ok(ScanPath { direction, perm, inv_perm })
}

/// Directions used for a uni-, bi- or quadri-directional block.
pub fn directions(count: usize) -> Result<&'static [u8]> {
    match count {
        1 => Ok(&[1]),
        2 => Ok(&[1, 2]),
        4 => Ok(&[1, 2, 3, 4]),
        n => Err(Error::InvalidArgument(format!("direction count {n} not in {{1, 2, 4}}"))),
    }
}
