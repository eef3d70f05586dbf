use serde::{Deserialize, Serialize};

use super::world::Injection;

/// When a scheduled disturbance fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventTime {
    /// Before the control command of this episode step.
    AtStep { step: u64 },
    /// After `offset` control steps of the atomic action with this episode-wide index.
    AtAction { action: usize, offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledEvent {
    pub at: EventTime,
    pub event: Injection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceModel {
    #[default]
    None,
    /// Each atomic action drops a held object with probability `p`.
    Bernoulli { p: f64 },
    Scheduled { events: Vec<ScheduledEvent> },
}

impl DisturbanceModel {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DisturbanceModel::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                Err(format!("drop probability {p} is outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    pub fn drop_probability(&self) -> f64 {
        match self {
            DisturbanceModel::Bernoulli { p } => *p,
            _ => 0.0,
        }
    }

    pub fn scheduled(&self) -> &[ScheduledEvent] {
        match self {
            DisturbanceModel::Scheduled { events } => events,
            _ => &[],
        }
    }
}
