//! In-memory intervention logs: one participant, tasks in play order.

use serde::{Deserialize, Serialize};

use crate::inference::Event;
use crate::tasks::TaskRole;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub event: Event,
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLog {
    pub role: TaskRole,
    pub trials: Vec<Trial>,
}

impl TaskLog {
    pub fn new(role: TaskRole) -> Self {
        TaskLog {
            role,
            trials: Vec::new(),
        }
    }

    pub fn events(&self) -> Vec<Event> {
        self.trials.iter().map(|t| t.event).collect()
    }

    pub fn push(&mut self, event: Event) {
        self.trials.push(Trial {
            event,
            timestamp: None,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantLog {
    pub participant_id: String,
    pub condition_id: String,
    pub tasks: Vec<TaskLog>,
}

impl ParticipantLog {
    pub fn task(&self, role: TaskRole) -> Option<&TaskLog> {
        self.tasks.iter().find(|t| t.role == role)
    }

    pub fn n_events(&self) -> usize {
        self.tasks.iter().map(|t| t.trials.len()).sum()
    }
}
