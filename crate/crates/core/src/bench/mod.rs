//! Score-memory cost model, instrumented profiling and length sweeps.

mod cost;
mod profile;
mod report;

pub use cost::{count_score_elements, CostModel};
pub use profile::{profile_run, scaling_experiment, FullSan, ProfileOptions, ScalingReport};
pub use report::{fit_loglog_slope, read_csv, write_csv, ProfileRecord, CSV_HEADER};

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error};

/// Encoder measured by the profiler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    BiBlosa,
    FullSan,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::BiBlosa, ModelKind::FullSan];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BiBlosa => "biblosa",
            ModelKind::FullSan => "full_san",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "biblosa" => Ok(ModelKind::BiBlosa),
            "full_san" => Ok(ModelKind::FullSan),
            other => Err(invalid(format!("unknown model kind `{other}`"))),
        }
    }
}
