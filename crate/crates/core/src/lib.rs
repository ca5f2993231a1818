//! Learnable-spacing dilated convolution (DCLS), Grad-CAM and
//! Threshold-Grad-CAM explanations, and Spearman alignment scoring of
//! explanation heatmaps against reference attention maps.

pub mod cam;
pub mod datakit;
pub mod dcls;
pub mod eval;
pub mod exec;
pub mod tensor;
pub mod zoo;

pub use exec::Exec;
