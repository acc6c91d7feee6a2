use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The interaction contrast being pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    /// Treatment-by-subgroup interaction on the outcome at the final visit,
    /// adjusted for the baseline outcome (one row per participant).
    FinalVisit,
    /// Treatment-by-subgroup interaction on the yearly rate of change, using
    /// every visit.
    RateOfChange,
}

impl Estimand {
    pub const ALL: [Estimand; 2] = [Estimand::FinalVisit, Estimand::RateOfChange];

    pub fn number(self) -> u8 {
        match self {
            Estimand::FinalVisit => 1,
            Estimand::RateOfChange => 2,
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Estimand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "e1" | "final" | "final-visit" => Ok(Estimand::FinalVisit),
            "2" | "e2" | "rate" | "rate-of-change" => Ok(Estimand::RateOfChange),
            other => Err(format!("unknown estimand '{other}' (expected 1 or 2)")),
        }
    }
}

/// Which meta-analysis model produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelTag {
    /// Two-stage: per-trial fits pooled by REML.
    M2,
    /// One-stage with a residual variance per trial.
    M1s,
    /// One-stage with a common residual variance.
    M1c,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::M2, ModelTag::M1s, ModelTag::M1c];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::M2 => "M2",
            ModelTag::M1s => "M1s",
            ModelTag::M1c => "M1c",
        }
    }

    pub fn is_one_stage(self) -> bool {
        !matches!(self, ModelTag::M2)
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m2" => Ok(ModelTag::M2),
            "m1s" => Ok(ModelTag::M1s),
            "m1c" => Ok(ModelTag::M1c),
            other => Err(format!("unknown model '{other}' (expected M2, M1s or M1c)")),
        }
    }
}
