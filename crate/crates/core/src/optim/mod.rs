//! Optimizers and weight-decay schedules.
//!
//! Optimizers take the effective decay coefficient for each step as an
//! argument; [`WdSchedule::lambda_at`] turns a base coefficient and the
//! training clock into that value.

mod adam;
mod schedule;
mod sgd;

pub use adam::{separated_decay_magnitudes, Adam, AdamConfig, AdamMode, AdamState, DecayLr};
pub use schedule::{LrDecayUnit, LrSchedule, WdSchedule};
pub use sgd::{Sgd, SgdConfig};

use crate::error::{Error, Result};
use crate::tensor::Param;

pub(crate) fn check_finite(p: &Param) -> Result<()> {
    if p.value.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("update of `{}`", p.name),
        })
    }
}
