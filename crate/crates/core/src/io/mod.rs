//! On-disk formats.

pub mod checkpoint;
pub mod config;
pub mod netpbm;
