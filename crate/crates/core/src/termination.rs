//! Stopping rules for agents and plateau handling.

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::tree::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PlateauMode {
    #[default]
    RemoveWithoutReplacement,
    Error,
}

impl std::str::FromStr for PlateauMode {
    type Err = NestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove" | "remove-without-replacement" => Ok(PlateauMode::RemoveWithoutReplacement),
            "error" => Ok(PlateauMode::Error),
            other => Err(NestError::invalid(format!(
                "unknown plateau mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminationPolicy {
    pub epsilon_remainder: f64,
    pub min_iterations_factor: f64,
    pub max_iterations: Option<usize>,
    pub plateau_mode: PlateauMode,
}

impl Default for TerminationPolicy {
    fn default() -> Self {
        TerminationPolicy {
            epsilon_remainder: 1e-3,
            min_iterations_factor: 1.0,
            max_iterations: None,
            plateau_mode: PlateauMode::RemoveWithoutReplacement,
        }
    }
}

impl TerminationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_remainder >= 0.0 && self.epsilon_remainder < 1.0) {
            return Err(NestError::invalid("epsilon must lie in [0, 1)"));
        }
        if !(self.min_iterations_factor >= 0.0) {
            return Err(NestError::invalid("min iterations factor must be >= 0"));
        }
        if self.max_iterations == Some(0) {
            return Err(NestError::invalid("max iterations must be positive"));
        }
        Ok(())
    }
}

/// Snapshot of the run used by [`should_continue`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TerminationInput {
    pub iteration: usize,
    pub log_evidence: f64,
    pub log_volume_remaining: f64,
    pub log_l_max: f64,
    pub information_gain: f64,
    pub n_live: usize,
}

impl TerminationInput {
    /// log(L_max V / Z).
    pub fn log_remainder_fraction(&self) -> f64 {
        if self.log_evidence == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        self.log_l_max + self.log_volume_remaining - self.log_evidence
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reason {
    RemainderAboveEpsilon,
    MinimumIterations,
    Remainder,
    MaxIterations,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::RemainderAboveEpsilon => "remainder-above-epsilon",
            Reason::MinimumIterations => "minimum-iterations",
            Reason::Remainder => "remainder",
            Reason::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    pub proceed: bool,
    pub reason: Reason,
}

pub fn should_continue(policy: &TerminationPolicy, input: &TerminationInput) -> Decision {
    if policy.max_iterations.is_some_and(|m| input.iteration >= m) {
        return Decision {
            proceed: false,
            reason: Reason::MaxIterations,
        };
    }
    let min_iter = policy.min_iterations_factor * input.information_gain * input.n_live as f64;
    if (input.iteration as f64) < min_iter {
        return Decision {
            proceed: true,
            reason: Reason::MinimumIterations,
        };
    }
    let eps = policy.epsilon_remainder;
    let below = eps > 0.0 && input.log_remainder_fraction() < eps.ln();
    if below {
        Decision {
            proceed: false,
            reason: Reason::Remainder,
        }
    } else {
        Decision {
            proceed: true,
            reason: Reason::RemainderAboveEpsilon,
        }
    }
}

/// Ids in `frontier` tied exactly at `l_min`. Fewer than two ties is not a
/// plateau and yields an empty set.
pub fn handle_plateau(
    frontier: &[(NodeId, f64)],
    l_min: f64,
    mode: PlateauMode,
) -> Result<Vec<NodeId>> {
    let ids: Vec<NodeId> = frontier
        .iter()
        .filter(|(_, l)| *l == l_min)
        .map(|(id, _)| *id)
        .collect();
    if ids.len() < 2 {
        return Ok(Vec::new());
    }
    match mode {
        PlateauMode::RemoveWithoutReplacement => Ok(ids),
        PlateauMode::Error => Err(NestError::PlateauDetected {
            ids,
            log_likelihood: l_min,
        }),
    }
}
