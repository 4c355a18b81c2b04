//! Pre-training objectives and their weighted combination.

mod batch;
mod sampling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{draw_static_masks, prepare_corpus, BatchLoss, LossComputer, PreparedRecord};
pub use sampling::{
    apply_mlm_masking, btsp_sample, tlc_build_input, BtspSample, BtspSource, MaskAction, MaskedSequence, Segment,
    TlcInput, MLM_MASK_PROB, MLM_RANDOM_PROB, MLM_SELECT_PROB,
};

use crate::model::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Spp,
    Btsp,
    Biltm,
    Tlc,
    Cmi,
}

impl Objective {
    /// Column order of the loss log.
    pub const ALL: [Objective; 6] =
        [Objective::Mlm, Objective::Spp, Objective::Btsp, Objective::Biltm, Objective::Tlc, Objective::Cmi];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Spp => "spp",
            Objective::Btsp => "btsp",
            Objective::Biltm => "biltm",
            Objective::Tlc => "tlc",
            Objective::Cmi => "cmi",
        }
    }

    /// Parses a comma-separated list such as `mlm,biltm`.
    pub fn parse_list(s: &str) -> Result<Vec<Objective>, ObjectiveError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let o: Objective = part.parse()?;
            if !out.contains(&o) {
                out.push(o);
            }
        }
        if out.is_empty() {
            return Err(ObjectiveError::UnknownObjective(s.to_string()));
        }
        Ok(out)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| ObjectiveError::UnknownObjective(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("unknown objective `{0}` (expected mlm, spp, btsp, biltm, tlc or cmi)")]
    UnknownObjective(String),
    #[error("invalid loss weight {value} for {objective}")]
    InvalidWeight { objective: Objective, value: f64 },
    #[error("record {index}: {reason}")]
    Prepare { index: usize, reason: String },
    #[error("{objective} objective failed: {source}")]
    Model {
        objective: Objective,
        #[source]
        source: ModelError,
    },
}

/// Scaling constants of the combined loss. A zero weight disables the
/// objective: it is neither computed nor logged with a non-zero value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm: f64,
    pub spp: f64,
    pub btsp: f64,
    pub biltm: f64,
    pub tlc: f64,
    pub cmi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mlm: 1.0, spp: 1.0, btsp: 10.0, biltm: 1.0, tlc: 10.0, cmi: 1.0 }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self { mlm: 0.0, spp: 0.0, btsp: 0.0, biltm: 0.0, tlc: 0.0, cmi: 0.0 }
    }

    /// Default weights for `enabled`, zero for the rest.
    pub fn only(enabled: &[Objective]) -> Self {
        let defaults = Self::default();
        let mut w = Self::zeros();
        for &o in enabled {
            w.set(o, defaults.get(o));
        }
        w
    }

    pub fn get(&self, o: Objective) -> f64 {
        match o {
            Objective::Mlm => self.mlm,
            Objective::Spp => self.spp,
            Objective::Btsp => self.btsp,
            Objective::Biltm => self.biltm,
            Objective::Tlc => self.tlc,
            Objective::Cmi => self.cmi,
        }
    }

    pub fn set(&mut self, o: Objective, value: f64) {
        let slot = match o {
            Objective::Mlm => &mut self.mlm,
            Objective::Spp => &mut self.spp,
            Objective::Btsp => &mut self.btsp,
            Objective::Biltm => &mut self.biltm,
            Objective::Tlc => &mut self.tlc,
            Objective::Cmi => &mut self.cmi,
        };
        *slot = value;
    }

    pub fn enabled(&self, o: Objective) -> bool {
        self.get(o) > 0.0
    }

    pub fn enabled_objectives(&self) -> Vec<Objective> {
        Objective::ALL.into_iter().filter(|&o| self.enabled(o)).collect()
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for o in Objective::ALL {
            let value = self.get(o);
            if !(value.is_finite() && value >= 0.0) {
                return Err(ObjectiveError::InvalidWeight { objective: o, value });
            }
        }
        Ok(())
    }
}

/// Per-objective loss values. Disabled objectives hold 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub spp: f64,
    pub btsp: f64,
    pub biltm: f64,
    pub tlc: f64,
    pub cmi: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, o: Objective) -> f64 {
        match o {
            Objective::Mlm => self.mlm,
            Objective::Spp => self.spp,
            Objective::Btsp => self.btsp,
            Objective::Biltm => self.biltm,
            Objective::Tlc => self.tlc,
            Objective::Cmi => self.cmi,
        }
    }

    pub fn set(&mut self, o: Objective, value: f64) {
        let slot = match o {
            Objective::Mlm => &mut self.mlm,
            Objective::Spp => &mut self.spp,
            Objective::Btsp => &mut self.btsp,
            Objective::Biltm => &mut self.biltm,
            Objective::Tlc => &mut self.tlc,
            Objective::Cmi => &mut self.cmi,
        };
        *slot = value;
    }

    /// Sets `total` from the components.
    pub fn with_total(mut self, weights: &LossWeights) -> Self {
        self.total = total_loss(&self, weights);
        self
    }
}

/// `α·mlm + β·spp + γ·btsp + η·biltm + ζ·tlc + δ·cmi`, skipping disabled
/// terms.
pub fn total_loss(components: &LossBreakdown, weights: &LossWeights) -> f64 {
    Objective::ALL
        .into_iter()
        .filter(|&o| weights.enabled(o))
        .map(|o| weights.get(o) * components.get(o))
        .sum()
}
