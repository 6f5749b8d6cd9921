//! The full hierarchical model, its three ablations, and the random
//! baseline, as agents that can both act and be replayed for scoring.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockSet;
use crate::error::{Error, Result};
use crate::forms::{prior_row, CanonicalForm, FormGrid, FormPrior, SigmoidForm};
use crate::inference::{Event, JointBelief};
use crate::log::{ParticipantLog, TaskLog};
use crate::policy::{self, EigTable, PolicyParams, WEIGHT_GRID};
use crate::tasks::{machine_response, Condition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Hbm,
    NoTransfer,
    StructureOnlyEig,
    FixedForm,
    Random,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Hbm,
        ModelKind::NoTransfer,
        ModelKind::StructureOnlyEig,
        ModelKind::FixedForm,
        ModelKind::Random,
    ];

    /// Order used to break exact score ties: fewer free parameters first.
    pub const PARSIMONY: [ModelKind; 5] = [
        ModelKind::Random,
        ModelKind::FixedForm,
        ModelKind::StructureOnlyEig,
        ModelKind::NoTransfer,
        ModelKind::Hbm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hbm => "hbm",
            ModelKind::NoTransfer => "no-transfer",
            ModelKind::StructureOnlyEig => "structure-only-eig",
            ModelKind::FixedForm => "fixed-form",
            ModelKind::Random => "random",
        }
    }

    /// Whether the model ranges over the 24 gamma priors.
    pub fn uses_prior_grid(self) -> bool {
        matches!(
            self,
            ModelKind::Hbm | ModelKind::NoTransfer | ModelKind::StructureOnlyEig
        )
    }

    /// Weights this model may be fitted with.
    pub fn weight_grid(self) -> &'static [f64] {
        match self {
            ModelKind::StructureOnlyEig => &[0.0],
            ModelKind::Random => &[],
            _ => &WEIGHT_GRID,
        }
    }

    fn parsimony_rank(self) -> usize {
        Self::PARSIMONY.iter().position(|k| *k == self).unwrap()
    }

    /// `true` if `self` should win an exact tie against `other`.
    pub fn preferred_over(self, other: ModelKind) -> bool {
        self.parsimony_rank() < other.parsimony_rank()
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        Ok(match key.as_str() {
            "hbm" | "full" => ModelKind::Hbm,
            "notransfer" => ModelKind::NoTransfer,
            "structureonlyeig" | "structureonly" => ModelKind::StructureOnlyEig,
            "fixedform" => ModelKind::FixedForm,
            "random" => ModelKind::Random,
            _ => {
                return Err(Error::Unknown {
                    what: "model",
                    name: s.to_string(),
                })
            }
        })
    }
}

impl Serialize for ModelKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// The 400 grid forms, shared by every agent that uses them.
pub fn grid_forms() -> Arc<[SigmoidForm]> {
    static FORMS: OnceLock<Arc<[SigmoidForm]>> = OnceLock::new();
    FORMS
        .get_or_init(|| FormGrid::standard().cells().into())
        .clone()
}

pub fn fixed_forms() -> Arc<[SigmoidForm]> {
    static FORMS: OnceLock<Arc<[SigmoidForm]>> = OnceLock::new();
    FORMS
        .get_or_init(|| vec![CanonicalForm::Disjunctive.params()].into())
        .clone()
}

/// Which model, and with which prior row and policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct AgentSpec {
    pub kind: ModelKind,
    /// One-based row of the gamma prior grid.
    pub prior_index: Option<usize>,
    pub params: Option<PolicyParams>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
}

impl TryFrom<RawSpec> for AgentSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let params = match (raw.kind, raw.w, raw.t) {
            (ModelKind::Random, _, _) => None,
            (ModelKind::StructureOnlyEig, w, Some(t)) => {
                Some(PolicyParams::new(w.unwrap_or(0.0), t)?)
            }
            (_, Some(w), Some(t)) => Some(PolicyParams::new(w, t)?),
            (kind, _, _) => {
                return Err(Error::invalid(format!("model `{kind}` needs both w and t")))
            }
        };
        let spec = AgentSpec {
            kind: raw.kind,
            prior_index: raw.prior_index,
            params,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<AgentSpec> for RawSpec {
    fn from(spec: AgentSpec) -> Self {
        RawSpec {
            kind: spec.kind,
            prior_index: spec.prior_index,
            w: spec.params.map(|p| p.w),
            t: spec.params.map(|p| p.t),
        }
    }
}

impl AgentSpec {
    pub fn new(kind: ModelKind, prior_index: Option<usize>, params: Option<PolicyParams>) -> Result<Self> {
        let spec = AgentSpec {
            kind,
            prior_index,
            params,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hbm(prior_index: usize, w: f64, t: f64) -> Result<Self> {
        Self::new(ModelKind::Hbm, Some(prior_index), Some(PolicyParams::new(w, t)?))
    }

    pub fn no_transfer(prior_index: usize, w: f64, t: f64) -> Result<Self> {
        Self::new(ModelKind::NoTransfer, Some(prior_index), Some(PolicyParams::new(w, t)?))
    }

    pub fn structure_only(prior_index: usize, t: f64) -> Result<Self> {
        Self::new(
            ModelKind::StructureOnlyEig,
            Some(prior_index),
            Some(PolicyParams::new(0.0, t)?),
        )
    }

    pub fn fixed_form(w: f64, t: f64) -> Result<Self> {
        Self::new(ModelKind::FixedForm, None, Some(PolicyParams::new(w, t)?))
    }

    pub fn random() -> Self {
        AgentSpec {
            kind: ModelKind::Random,
            prior_index: None,
            params: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.prior_index {
            prior_row(i)?;
        }
        match self.kind {
            ModelKind::Random => Ok(()),
            kind => {
                let params = self
                    .params
                    .ok_or_else(|| Error::invalid(format!("model `{kind}` needs w and t")))?;
                PolicyParams::new(params.w, params.t)?;
                if kind == ModelKind::StructureOnlyEig && params.w != 0.0 {
                    return Err(Error::invalid("structure-only-eig requires w = 0"));
                }
                if kind.uses_prior_grid() && self.prior_index.is_none() {
                    return Err(Error::invalid(format!("model `{kind}` needs a prior index")));
                }
                if kind == ModelKind::FixedForm && self.prior_index.is_some() {
                    return Err(Error::invalid("fixed-form has no prior grid"));
                }
                Ok(())
            }
        }
    }

    /// Form space and initial form prior for this spec.
    pub fn form_space(&self) -> Result<(Arc<[SigmoidForm]>, FormPrior)> {
        match self.kind {
            ModelKind::FixedForm => Ok((fixed_forms(), FormPrior::point_mass())),
            _ => {
                let row = prior_row(self.prior_index.unwrap_or(1))?;
                Ok((grid_forms(), row.discretize(&FormGrid::standard())?))
            }
        }
    }
}

/// An agent's epistemic state inside the current task.
#[derive(Debug, Clone)]
pub struct AgentState {
    spec: AgentSpec,
    forms: Arc<[SigmoidForm]>,
    initial_prior: FormPrior,
    belief: Option<JointBelief>,
    history: Vec<Event>,
    carried_form_marginal: Option<FormPrior>,
    n_blocks: usize,
    limit: Option<usize>,
}

impl AgentState {
    /// Starts the first task. Random agents keep no belief.
    pub fn new(spec: AgentSpec, n_blocks: usize, limit: Option<usize>) -> Result<Self> {
        Self::build(spec, n_blocks, limit, false)
    }

    /// Like [`AgentState::new`], but random agents also track a belief.
    pub fn with_belief_tracking(spec: AgentSpec, n_blocks: usize, limit: Option<usize>) -> Result<Self> {
        Self::build(spec, n_blocks, limit, true)
    }

    fn build(spec: AgentSpec, n_blocks: usize, limit: Option<usize>, track: bool) -> Result<Self> {
        spec.validate()?;
        let (forms, initial_prior) = spec.form_space()?;
        let belief = if spec.kind != ModelKind::Random || track {
            Some(JointBelief::uniform_structures(
                n_blocks,
                Arc::clone(&forms),
                &initial_prior,
            )?)
        } else {
            None
        };
        Ok(AgentState {
            spec,
            forms,
            initial_prior,
            belief,
            history: Vec::new(),
            carried_form_marginal: None,
            n_blocks,
            limit,
        })
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn belief(&self) -> Option<&JointBelief> {
        self.belief.as_ref()
    }

    pub fn history(&self) -> &[Event] {
        &self.history
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn initial_prior(&self) -> &FormPrior {
        &self.initial_prior
    }

    /// Form marginal carried over at the last task boundary.
    pub fn carried_form_marginal(&self) -> Option<&FormPrior> {
        self.carried_form_marginal.as_ref()
    }

    /// Form prior the current task started from.
    pub fn task_form_prior(&self) -> &FormPrior {
        match (&self.carried_form_marginal, self.spec.kind) {
            (Some(m), kind) if kind != ModelKind::NoTransfer => m,
            _ => &self.initial_prior,
        }
    }

    /// Moves to a new task: structures reset to uniform, forms either carried
    /// over (transfer) or reset to the initial prior (no-transfer).
    pub fn begin_task(&mut self, n_blocks: usize, limit: Option<usize>) -> Result<()> {
        if let Some(belief) = &self.belief {
            let marginal = belief.form_marginal();
            let prior = if self.spec.kind == ModelKind::NoTransfer {
                &self.initial_prior
            } else {
                &marginal
            };
            let next = JointBelief::uniform_structures(n_blocks, Arc::clone(&self.forms), prior)?
                .with_likelihood_floor(belief.likelihood_floor())?;
            self.belief = Some(next);
            self.carried_form_marginal = Some(marginal);
        }
        self.history.clear();
        self.n_blocks = n_blocks;
        self.limit = limit;
        Ok(())
    }

    pub fn at_limit(&self) -> bool {
        self.limit.is_some_and(|l| self.history.len() >= l)
    }

    pub fn observe(&mut self, event: Event) -> Result<()> {
        if let Some(limit) = self.limit.filter(|_| self.at_limit()) {
            return Err(Error::LimitReached { limit });
        }
        if !event.intervention.fits(self.n_blocks) {
            return Err(Error::invalid(format!(
                "intervention {:?} outside a {}-block task",
                event.intervention, self.n_blocks
            )));
        }
        if let Some(belief) = &self.belief {
            self.belief = Some(belief.update(&event)?);
        }
        self.history.push(event);
        Ok(())
    }

    /// Information gains of every candidate under the current belief.
    pub fn eig_table(&self) -> Option<EigTable> {
        self.belief.as_ref().map(EigTable::compute)
    }

    /// Choice probabilities over all candidates, in bitmask order.
    pub fn candidate_distribution(&self) -> Vec<f64> {
        match (self.spec.kind, self.spec.params, &self.belief) {
            (ModelKind::Random, _, _) | (_, None, _) | (_, _, None) => {
                policy::random_policy(self.n_blocks)
            }
            (_, Some(params), Some(belief)) => EigTable::compute(belief).policy(params),
        }
    }

    pub fn choose_intervention<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<BlockSet> {
        if let Some(limit) = self.limit.filter(|_| self.at_limit()) {
            return Err(Error::LimitReached { limit });
        }
        policy::sample_intervention(&self.candidate_distribution(), rng)
    }
}

/// Plays every task of `condition` to its limit against the ground-truth machine.
pub fn run_condition<R: Rng + ?Sized>(
    spec: &AgentSpec,
    condition: &Condition,
    participant_id: &str,
    rng: &mut R,
) -> Result<ParticipantLog> {
    condition.validate()?;
    let mut log = ParticipantLog {
        participant_id: participant_id.to_string(),
        condition_id: condition.id.clone(),
        tasks: Vec::with_capacity(condition.tasks.len()),
    };
    let mut state: Option<AgentState> = None;
    for task in &condition.tasks {
        let limit = Some(task.intervention_limit);
        match state.as_mut() {
            None => state = Some(AgentState::new(*spec, task.n_blocks, limit)?),
            Some(s) => s.begin_task(task.n_blocks, limit)?,
        }
        let agent = state.as_mut().expect("initialized above");
        let mut task_log = TaskLog::new(task.role);
        while !agent.at_limit() {
            let q = agent.choose_intervention(rng)?;
            let activated = machine_response(task, q, rng)?;
            let event = Event::new(q, activated);
            agent.observe(event)?;
            task_log.push(event);
        }
        log.tasks.push(task_log);
    }
    Ok(log)
}
