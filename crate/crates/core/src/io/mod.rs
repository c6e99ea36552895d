//! File formats: QTNS tensors, the calibration manifest and model configs.

pub mod qtns;
pub mod config;
pub mod manifest;
