//! One live play-through of a condition, with an optional lens agent that
//! shadows the player's history.

use blicket_core::io::export;
use blicket_core::log::{ParticipantLog, TaskLog};
use blicket_core::policy::EigTable;
use blicket_core::tasks::{counterbalance, machine_response, Presentation, TaskForm};
use blicket_core::{AgentSpec, AgentState, BlockSet, Condition, Event, TaskRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Stream of the seed used for cosmetic counterbalancing; the machine uses stream 0.
const PRESENTATION_STREAM: u64 = 1;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub condition_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lens: Option<AgentSpec>,
    #[serde(default)]
    pub reveal: bool,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub participant_id: Option<String>,
}

/// What the player may know about a task: no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub index: usize,
    pub task_role: TaskRole,
    pub n_blocks: usize,
    pub limit: usize,
    pub used: usize,
    pub presentation: Presentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub trial: usize,
    pub intervention: Vec<usize>,
    pub outcome: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub participant_id: String,
    pub condition_id: String,
    pub seed: u64,
    pub lens: Option<AgentSpec>,
    pub task: Option<TaskView>,
    pub history: Vec<TaskHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHistory {
    pub task_role: TaskRole,
    pub trials: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResponse {
    pub outcome: u8,
    pub trial: usize,
    pub remaining: usize,
    pub task_role: TaskRole,
    /// The task that accepts the next intervention, if any remain.
    pub next_task: Option<TaskView>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormMarginalView {
    /// `[bias, gain]` per cell.
    pub forms: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub intervention: Vec<usize>,
    pub combined_eig: f64,
    pub eig_structures: f64,
    pub eig_forms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefsResponse {
    pub task_role: TaskRole,
    pub trial: usize,
    pub blicket_probability: Vec<f64>,
    pub form_marginal: FormMarginalView,
    pub w: f64,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub task_role: TaskRole,
    pub blickets: BlockSet,
    pub form: TaskForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishResponse {
    pub jsonl: String,
    pub n_records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruth>>,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    condition: Condition,
    seed: u64,
    reveal: bool,
    top_k: usize,
    rng: ChaCha8Rng,
    presentations: Vec<Presentation>,
    task_index: usize,
    log: ParticipantLog,
    lens_spec: Option<AgentSpec>,
    lens: Option<AgentState>,
}

impl Session {
    pub fn new(id: String, condition: Condition, request: &CreateRequest, seed: u64) -> Result<Self, ApiError> {
        condition.validate()?;
        let lens = match &request.lens {
            Some(spec) => {
                let first = &condition.tasks[0];
                Some(AgentState::with_belief_tracking(*spec, first.n_blocks, Some(first.intervention_limit))?)
            }
            None => None,
        };
        let mut cosmetic = ChaCha8Rng::seed_from_u64(seed);
        cosmetic.set_stream(PRESENTATION_STREAM);
        let presentations = condition
            .tasks
            .iter()
            .map(|t| counterbalance(t, &mut cosmetic))
            .collect();
        let participant_id = request.participant_id.clone().unwrap_or_else(|| id.clone());
        Ok(Session {
            log: ParticipantLog {
                participant_id,
                condition_id: condition.id.clone(),
                tasks: condition.tasks.iter().map(|t| TaskLog::new(t.role)).collect(),
            },
            id,
            seed,
            reveal: request.reveal,
            top_k: request.top_k.unwrap_or(DEFAULT_TOP_K),
            rng: ChaCha8Rng::seed_from_u64(seed),
            presentations,
            task_index: 0,
            lens_spec: request.lens,
            lens,
            condition,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn log(&self) -> &ParticipantLog {
        &self.log
    }

    fn is_complete(&self) -> bool {
        self.task_index >= self.condition.tasks.len()
    }

    fn task_view(&self, index: usize) -> Option<TaskView> {
        let config = self.condition.tasks.get(index)?;
        Some(TaskView {
            index,
            task_role: config.role,
            n_blocks: config.n_blocks,
            limit: config.intervention_limit,
            used: self.log.tasks[index].trials.len(),
            presentation: self.presentations[index].clone(),
        })
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            participant_id: self.log.participant_id.clone(),
            condition_id: self.condition.id.clone(),
            seed: self.seed,
            lens: self.lens_spec,
            task: self.task_view(self.task_index),
            history: self
                .log
                .tasks
                .iter()
                .map(|t| {
                    let trials = t
                        .trials
                        .iter()
                        .enumerate()
                        .map(|(i, trial)| HistoryEntry {
                            trial: i + 1,
                            intervention: trial.event.intervention.indices().collect(),
                            outcome: u8::from(trial.event.activated),
                        })
                        .collect();
                    TaskHistory {
                        task_role: t.role,
                        trials,
                    }
                })
                .collect(),
        }
    }

    /// Places `blocks` on the current task's machine. A task that reaches its
    /// limit hands over to the next one.
    pub fn intervene(&mut self, blocks: &[usize]) -> Result<InterventionResponse, ApiError> {
        let Some(config) = self.condition.tasks.get(self.task_index).cloned() else {
            let limit = self.condition.transfer().intervention_limit;
            return Err(ApiError::LimitReached(limit));
        };
        if let Some(&bad) = blocks.iter().find(|&&b| b >= config.n_blocks) {
            return Err(ApiError::BadRequest(format!(
                "block {bad} outside a {}-block task",
                config.n_blocks
            )));
        }
        let q = BlockSet::from_indices(blocks.iter().copied())?;
        if q.len() != blocks.len() {
            return Err(ApiError::BadRequest("intervention repeats a block".into()));
        }
        let activated = machine_response(&config, q, &mut self.rng)?;
        let event = Event::new(q, activated);
        if let Some(lens) = &mut self.lens {
            lens.observe(event)?;
        }
        let task = &mut self.log.tasks[self.task_index];
        task.push(event);
        let trial = task.trials.len();
        let remaining = config.intervention_limit - trial;
        if remaining == 0 {
            self.task_index += 1;
            if let (Some(next), Some(lens)) = (self.condition.tasks.get(self.task_index), &mut self.lens) {
                lens.begin_task(next.n_blocks, Some(next.intervention_limit))?;
            }
        }
        Ok(InterventionResponse {
            outcome: u8::from(activated),
            trial,
            remaining,
            task_role: config.role,
            next_task: self.task_view(self.task_index),
            complete: self.is_complete(),
        })
    }

    pub fn beliefs(&self) -> Result<BeliefsResponse, ApiError> {
        let lens = self.lens.as_ref().ok_or(ApiError::LensDisabled)?;
        let belief = lens.belief().expect("lens agents track a belief");
        let marginal = belief.form_marginal();
        let table = EigTable::compute(belief);
        let w = lens.spec().params.map_or(0.5, |p| p.w);
        let combined = table.combined(w);
        let mut order: Vec<usize> = (0..combined.len()).collect();
        order.sort_by(|&a, &b| combined[b].total_cmp(&combined[a]).then(a.cmp(&b)));
        let suggestions = order
            .into_iter()
            .take(self.top_k)
            .map(|i| Suggestion {
                intervention: table.candidates[i].indices().collect(),
                combined_eig: combined[i],
                eig_structures: table.structures[i],
                eig_forms: table.forms[i],
            })
            .collect();
        let role = self
            .condition
            .tasks
            .get(self.task_index)
            .unwrap_or_else(|| self.condition.transfer())
            .role;
        Ok(BeliefsResponse {
            task_role: role,
            trial: lens.history().len(),
            blicket_probability: belief.blicket_probabilities(),
            form_marginal: FormMarginalView {
                forms: belief.forms().iter().map(|f| [f.bias, f.gain]).collect(),
                probs: marginal.weights().to_vec(),
            },
            w,
            suggestions,
        })
    }

    pub fn export(&self) -> String {
        let mut log = self.log.clone();
        log.tasks.retain(|t| !t.trials.is_empty());
        export(&[log])
    }

    pub fn finish(&self) -> FinishResponse {
        let jsonl = self.export();
        FinishResponse {
            n_records: jsonl.lines().count(),
            jsonl,
            ground_truth: self.reveal.then(|| {
                self.condition
                    .tasks
                    .iter()
                    .map(|t| GroundTruth {
                        task_role: t.role,
                        blickets: t.blickets,
                        form: t.form,
                    })
                    .collect()
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use blicket_core::tasks::find_condition;

    fn session(condition_id: &str, lens: Option<AgentSpec>) -> Session {
        let request = CreateRequest {
            condition_id: condition_id.into(),
            seed: None,
            lens,
            reveal: false,
            top_k: Some(4),
            participant_id: None,
        };
        Session::new("s".into(), find_condition(condition_id, None).unwrap(), &request, 3).unwrap()
    }

    #[test]
    fn deterministic_disjunctive_machine_follows_the_blickets() {
        let mut s = session("disj", None);
        let blickets = s.condition.tasks[0].blickets;
        for q in 0..8u32 {
            let blocks: Vec<usize> = (0..3).filter(|b| q & (1 << b) != 0).collect();
            let expected = blocks.iter().any(|&b| blickets.contains(b));
            assert_eq!(s.intervene(&blocks).unwrap().outcome, u8::from(expected));
        }
    }

    #[test]
    fn suggestions_are_sorted_and_truncated() {
        let mut s = session("conj", Some(AgentSpec::hbm(3, 0.4, 1.0).unwrap()));
        s.intervene(&[0, 1]).unwrap();
        let b = s.beliefs().unwrap();
        assert_eq!(b.suggestions.len(), 4);
        assert!(b.suggestions.windows(2).all(|p| p[0].combined_eig >= p[1].combined_eig));
        assert_eq!(b.trial, 1);
        assert_eq!(b.w, 0.4);
    }

    #[test]
    fn random_lens_weighs_both_targets_equally() {
        let s = session("conj", Some(AgentSpec::random()));
        assert_eq!(s.beliefs().unwrap().w, 0.5);
    }

    #[test]
    fn export_skips_untouched_tasks() {
        let mut s = session("conj", None);
        assert_eq!(s.export(), "");
        s.intervene(&[2]).unwrap();
        assert_eq!(s.export().lines().count(), 1);
        assert_eq!(s.finish().n_records, 1);
    }
}
