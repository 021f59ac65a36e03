//! Selective state-space scan, 2-D traversal orders and the scan block.

mod path;
mod scan;
mod ss2d;

pub use path::{directions, scan_paths, ScanPath};
pub use scan::{discretize, selective_scan, selective_scan_fast, selective_scan_ref, ScanDims, ScanMode, CHUNK};
pub use ss2d::{ScanParams, Ss2d, Ss2dConfig};
