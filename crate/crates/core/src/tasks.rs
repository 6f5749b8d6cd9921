//! Task and condition tables for both experiments, plus the ground-truth
//! blicket machine.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::blocks::BlockSet;
use crate::error::{Error, Result};
use crate::forms::{CanonicalForm, SigmoidForm};

/// Exp2 limits: every training combination plus four repeats, then the transfer budget.
pub const EXP2_TRAINING_LIMIT: usize = 12;
pub const EXP2_TRANSFER_LIMIT: usize = 20;
/// Stand-in for Exp1's wall-clock limit when simulating.
pub const EXP1_DEFAULT_CAP: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Exp1,
    Exp2,
}

impl Experiment {
    pub fn number(self) -> u8 {
        match self {
            Experiment::Exp1 => 1,
            Experiment::Exp2 => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Experiment::Exp1),
            2 => Ok(Experiment::Exp2),
            _ => Err(Error::Unknown {
                what: "experiment",
                name: n.to_string(),
            }),
        }
    }

    pub fn conditions(self) -> Vec<Condition> {
        match self {
            Experiment::Exp1 => exp1_conditions(),
            Experiment::Exp2 => exp2_conditions(),
        }
    }
}

impl Serialize for Experiment {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for Experiment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Experiment::from_number(u8::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRole {
    Training1,
    Training2,
    Transfer,
}

impl TaskRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskRole::Training1 => "training1",
            TaskRole::Training2 => "training2",
            TaskRole::Transfer => "transfer",
        }
    }
}

impl fmt::Display for TaskRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training1" => Ok(TaskRole::Training1),
            "training2" => Ok(TaskRole::Training2),
            "transfer" => Ok(TaskRole::Transfer),
            _ => Err(Error::Unknown {
                what: "task role",
                name: s.to_string(),
            }),
        }
    }
}

/// Ground-truth form of a task: a canonical name or explicit sigmoid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskForm {
    Named { name: CanonicalForm },
    Custom { bias: f64, gain: f64 },
}

impl TaskForm {
    pub fn params(&self) -> SigmoidForm {
        match *self {
            TaskForm::Named { name } => name.params(),
            TaskForm::Custom { bias, gain } => SigmoidForm { bias, gain },
        }
    }
}

impl From<CanonicalForm> for TaskForm {
    fn from(name: CanonicalForm) -> Self {
        TaskForm::Named { name }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_blocks: usize,
    pub blickets: BlockSet,
    pub form: TaskForm,
    #[serde(rename = "limit")]
    pub intervention_limit: usize,
    pub role: TaskRole,
}

impl TaskConfig {
    fn new(role: TaskRole, n_blocks: usize, n_blickets: usize, form: CanonicalForm, limit: usize) -> Self {
        TaskConfig {
            n_blocks,
            blickets: BlockSet::first(n_blickets),
            form: form.into(),
            intervention_limit: limit,
            role,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > crate::blocks::MAX_BLOCKS {
            return Err(Error::invalid(format!("task with {} blocks", self.n_blocks)));
        }
        if !self.blickets.fits(self.n_blocks) {
            return Err(Error::invalid("blickets outside the task's blocks"));
        }
        let f = self.form.params();
        SigmoidForm::new(f.bias, f.gain)?;
        Ok(())
    }

    pub fn n_candidates(&self) -> usize {
        1 << self.n_blocks
    }

    /// Activation probability for `q` under the ground truth.
    pub fn activation_probability(&self, q: BlockSet) -> f64 {
        self.form
            .params()
            .activation_probability(q.intersection_len(self.blickets))
    }
}

/// A between-subjects condition: the ordered tasks a participant plays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub experiment: Experiment,
    #[serde(rename = "condition_id")]
    pub id: String,
    pub tasks: Vec<TaskConfig>,
}

impl Condition {
    pub fn task(&self, role: TaskRole) -> Option<(usize, &TaskConfig)> {
        self.tasks.iter().enumerate().find(|(_, t)| t.role == role)
    }

    pub fn transfer(&self) -> &TaskConfig {
        self.tasks.last().expect("conditions end with a transfer task")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid(format!("condition `{}` has no tasks", self.id)));
        }
        self.tasks.iter().try_for_each(TaskConfig::validate)
    }
}

fn short_name(form: CanonicalForm) -> &'static str {
    use CanonicalForm::*;
    match form {
        Disjunctive => "disj",
        NoisyDisjunctive => "noisy-disj",
        Conjunctive => "conj",
        NoisyConjunctive => "noisy-conj",
        ThreeConjunctive => "3conj",
        NoisyThreeConjunctive => "noisy-3conj",
    }
}

/// Exp1 with the default intervention cap.
pub fn exp1_conditions() -> Vec<Condition> {
    exp1_conditions_with_cap(EXP1_DEFAULT_CAP)
}

/// Transfer form × same/different training × short/long training.
/// Ids read `<transfer>-<same|different>-<short|long>`.
pub fn exp1_conditions_with_cap(cap: usize) -> Vec<Condition> {
    use CanonicalForm::{Conjunctive, Disjunctive};
    let mut out = Vec::with_capacity(8);
    for transfer in [Disjunctive, Conjunctive] {
        for same in [true, false] {
            let training = match (transfer, same) {
                (t, true) => t,
                (Disjunctive, false) => Conjunctive,
                (_, false) => Disjunctive,
            };
            for long in [false, true] {
                let mut tasks = vec![TaskConfig::new(
                    TaskRole::Training1,
                    3,
                    training.threshold(),
                    training,
                    cap,
                )];
                if long {
                    tasks.push(TaskConfig::new(TaskRole::Training2, 6, 3, training, cap));
                }
                tasks.push(TaskConfig::new(TaskRole::Transfer, 9, 4, transfer, cap));
                out.push(Condition {
                    experiment: Experiment::Exp1,
                    id: format!(
                        "{}-{}-{}",
                        short_name(transfer),
                        if same { "same" } else { "different" },
                        if long { "long" } else { "short" }
                    ),
                    tasks,
                });
            }
        }
    }
    out
}

/// One condition per training form; the transfer task is always the
/// 6-block, 3-blicket deterministic conjunctive machine.
pub fn exp2_conditions() -> Vec<Condition> {
    CanonicalForm::ALL
        .iter()
        .map(|&training| Condition {
            experiment: Experiment::Exp2,
            id: short_name(training).to_string(),
            tasks: vec![
                TaskConfig::new(
                    TaskRole::Training1,
                    3,
                    training.threshold(),
                    training,
                    EXP2_TRAINING_LIMIT,
                ),
                TaskConfig::new(
                    TaskRole::Transfer,
                    6,
                    3,
                    CanonicalForm::Conjunctive,
                    EXP2_TRANSFER_LIMIT,
                ),
            ],
        })
        .collect()
}

/// Looks a condition up by id, optionally restricted to one experiment.
pub fn find_condition(id: &str, experiment: Option<Experiment>) -> Result<Condition> {
    let pools = match experiment {
        Some(e) => vec![e],
        None => vec![Experiment::Exp2, Experiment::Exp1],
    };
    pools
        .into_iter()
        .flat_map(Experiment::conditions)
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Unknown {
            what: "condition",
            name: id.to_string(),
        })
}

/// Draws the machine's response to `q` from the ground truth.
pub fn machine_response<R: Rng + ?Sized>(config: &TaskConfig, q: BlockSet, rng: &mut R) -> Result<bool> {
    if !q.fits(config.n_blocks) {
        return Err(Error::invalid(format!(
            "intervention {q:?} outside a {}-block task",
            config.n_blocks
        )));
    }
    Ok(rng.gen::<f64>() < config.activation_probability(q))
}

const PALETTE: [&str; 12] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6",
    "#bcf60c", "#fabebe", "#008080", "#9a6324",
];

/// Cosmetic assignment of colors, letters and screen positions to block indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub letters: Vec<char>,
    pub colors: Vec<String>,
    /// `positions[block]` is the slot the block is drawn in.
    pub positions: Vec<usize>,
}

pub fn counterbalance<R: Rng + ?Sized>(config: &TaskConfig, rng: &mut R) -> Presentation {
    let n = config.n_blocks;
    let mut colors: Vec<String> = PALETTE.iter().map(|c| c.to_string()).collect();
    colors.shuffle(rng);
    colors.truncate(n);
    while colors.len() < n {
        colors.push(PALETTE[colors.len() % PALETTE.len()].to_string());
    }
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(rng);
    Presentation {
        letters: (0..n).map(|i| char::from(b'A' + i as u8)).collect(),
        colors,
        positions,
    }
}
