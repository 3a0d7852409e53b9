//! The attention-augmented teacher and the lightweight student UNet.

mod layers;
mod student;
mod teacher;

pub use layers::{ConvUnit, Norm};
pub use student::{Student, StudentConfig, StudentOutput};
pub use teacher::{Encoded, Teacher, TeacherConfig, ENCODER, REC_DECODER, SEG_DECODER};

use vpbsd_tensor::ParamSet;

use crate::error::{Error, Result};

/// Leaky-ReLU negative slope used throughout.
pub const SLOPE: f64 = 0.01;
pub const GN_EPS: f64 = 1e-5;
/// Total spatial downscale of both encoders.
pub const DOWNSCALE: usize = 16;

pub fn count_parameters(params: &ParamSet) -> usize {
    params.count()
}

pub fn check_input_dims(shape: &[usize]) -> Result<()> {
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::Validation(format!(
            "expected input [B, 1, D, H, W], got {shape:?}"
        )));
    }
    if let Some(e) = shape[2..].iter().find(|&&e| e == 0 || e % DOWNSCALE != 0) {
        return Err(Error::Validation(format!(
            "spatial extent {e} of {shape:?} is not a positive multiple of {DOWNSCALE}"
        )));
    }
    Ok(())
}
