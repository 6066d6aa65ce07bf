//! Campaign driving, calibration and file formats on top of the core
//! simulator. The binary in `main.rs` is a thin argument layer over this.

pub mod campaign;
pub mod formats;
