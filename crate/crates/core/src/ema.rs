//! Exponential-moving-average teachers.

use crate::error::{Error, Result};
use crate::network::ParamVector;

/// Default teacher decay.
pub const EMA_DECAY: f64 = 0.99;

/// Teacher parameters, updated only from a student, never by gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamVector,
}

/// A teacher starts as an exact copy of its student.
pub fn init_teacher(student: &ParamVector) -> TeacherState {
    TeacherState {
        params: student.clone(),
    }
}

/// `θ_T ← α·θ_T + (1 − α)·θ_S`, in place.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamVector, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("ema decay {alpha} outside [0,1]")));
    }
    let a = alpha as f32;
    let b = (1.0 - alpha) as f32;
    teacher.params.zip_apply(student, |t, s| *t = a * *t + b * s)
}
