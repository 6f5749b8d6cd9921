//! Predictive-likelihood scoring of intervention logs, grid fitting of the
//! softmax temperature and form weight, four-fold cross-validation, uniform
//! marginalization over the prior grid, and synthetic model recovery.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{run_condition, AgentSpec, AgentState, ModelKind};
use crate::error::{Error, Result};
use crate::forms::N_PRIORS;
use crate::inference::Event;
use crate::log::ParticipantLog;
use crate::policy::{EigTable, PolicyParams, TEMPERATURE_GRID, WEIGHT_GRID};
use crate::tasks::{Condition, TaskRole};

pub const N_FOLDS: usize = 4;
/// Largest task scored unless the caller raises the budget.
pub const DEFAULT_MAX_SCORED_BLOCKS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub role: TaskRole,
    pub max_blocks: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            role: TaskRole::Transfer,
            max_blocks: DEFAULT_MAX_SCORED_BLOCKS,
        }
    }
}

fn malformed(log: &ParticipantLog, position: usize, reason: impl Into<String>) -> Error {
    Error::MalformedLog {
        participant: log.participant_id.clone(),
        position,
        reason: reason.into(),
    }
}

/// Checks the log against its condition and returns the task's events in
/// play order, up to and including the scored task.
fn tasks_through<'a>(
    log: &ParticipantLog,
    condition: &'a Condition,
    role: TaskRole,
) -> Result<Vec<(&'a crate::tasks::TaskConfig, Vec<Event>)>> {
    if log.condition_id != condition.id {
        return Err(malformed(
            log,
            0,
            format!("log is for condition `{}`, not `{}`", log.condition_id, condition.id),
        ));
    }
    let (scored_idx, _) = condition.task(role).ok_or_else(|| {
        malformed(log, 0, format!("condition `{}` has no {role} task", condition.id))
    })?;
    let mut out = Vec::with_capacity(scored_idx + 1);
    let mut position = 0;
    for config in &condition.tasks[..=scored_idx] {
        let events = log
            .task(config.role)
            .map(|t| t.events())
            .unwrap_or_default();
        for (i, e) in events.iter().enumerate() {
            position += 1;
            if !e.intervention.fits(config.n_blocks) {
                return Err(malformed(
                    log,
                    position,
                    format!("{} intervention {:?} outside {} blocks", config.role, e.intervention, config.n_blocks),
                ));
            }
            if i >= config.intervention_limit {
                return Err(malformed(
                    log,
                    position,
                    format!("{} exceeds its limit of {}", config.role, config.intervention_limit),
                ));
            }
        }
        out.push((config, events));
    }
    Ok(out)
}

/// Replays a belief along the participant's history and returns the
/// information-gain table in front of every event of the scored task.
fn eig_trajectory(
    spec: &AgentSpec,
    log: &ParticipantLog,
    condition: &Condition,
    options: &ScoringOptions,
) -> Result<(Vec<EigTable>, Vec<Event>)> {
    let tasks = tasks_through(log, condition, options.role)?;
    let (scored_config, _) = tasks.last().expect("scored task present");
    if scored_config.n_blocks > options.max_blocks {
        return Err(Error::invalid(format!(
            "scoring a {}-block task exceeds the budget of {} blocks",
            scored_config.n_blocks, options.max_blocks
        )));
    }
    let mut state: Option<AgentState> = None;
    let last = tasks.len() - 1;
    let mut tables = Vec::new();
    for (i, (config, events)) in tasks.iter().enumerate() {
        let limit = Some(config.intervention_limit);
        match state.as_mut() {
            None => state = Some(AgentState::new(*spec, config.n_blocks, limit)?),
            Some(s) => s.begin_task(config.n_blocks, limit)?,
        }
        let agent = state.as_mut().expect("initialized above");
        for event in events {
            if i == last {
                tables.push(agent.eig_table().expect("belief-tracking agent"));
            }
            agent.observe(*event)?;
        }
    }
    let scored_events = tasks.into_iter().last().map(|(_, e)| e).unwrap_or_default();
    Ok((tables, scored_events))
}

/// Probability `spec` assigns to each logged intervention of the scored
/// task, conditioning on the full prefix history.
pub fn predictive_likelihood(
    spec: &AgentSpec,
    log: &ParticipantLog,
    condition: &Condition,
    options: &ScoringOptions,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.kind == ModelKind::Random {
        let tasks = tasks_through(log, condition, options.role)?;
        let (config, events) = tasks.last().expect("scored task present");
        return Ok(vec![1.0 / config.n_candidates() as f64; events.len()]);
    }
    let params = spec.params.expect("validated");
    let (tables, events) = eig_trajectory(spec, log, condition, options)?;
    Ok(tables
        .iter()
        .zip(&events)
        .map(|(table, e)| table.policy(params)[e.intervention.bits() as usize])
        .collect())
}

/// `(t, w)` combinations searched for a model, temperature-major.
pub fn parameter_grid(kind: ModelKind) -> Vec<PolicyParams> {
    TEMPERATURE_GRID
        .iter()
        .flat_map(|&t| kind.weight_grid().iter().map(move |&w| PolicyParams { w, t }))
        .collect()
}

/// Uniform average over per-prior scores.
pub fn marginalize_priors(per_prior: &[f64]) -> f64 {
    per_prior.iter().sum::<f64>() / per_prior.len() as f64
}

/// Predictive likelihoods of one model for one participant over every prior
/// and every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub kind: ModelKind,
    /// Prior rows scored; empty for models without a prior grid.
    pub priors: Vec<usize>,
    /// Grid points; empty for the random baseline.
    pub params: Vec<PolicyParams>,
    pub n_positions: usize,
    /// `likelihoods[(prior_slot * n_params + param) * n_positions + position]`.
    pub likelihoods: Vec<f64>,
}

impl ModelScores {
    pub fn n_prior_slots(&self) -> usize {
        self.priors.len().max(1)
    }

    pub fn n_param_slots(&self) -> usize {
        self.params.len().max(1)
    }

    pub fn row(&self, prior_slot: usize, param: usize) -> &[f64] {
        let start = (prior_slot * self.n_param_slots() + param) * self.n_positions;
        &self.likelihoods[start..start + self.n_positions]
    }

    /// Sum of likelihoods over `positions`, per prior slot.
    fn sums(&self, param: usize, positions: &[usize]) -> Vec<f64> {
        (0..self.n_prior_slots())
            .map(|p| {
                let row = self.row(p, param);
                positions.iter().map(|&i| row[i]).sum()
            })
            .collect()
    }

    /// Mean likelihood over `positions`, marginalized over priors.
    pub fn marginal_score(&self, param: usize, positions: &[usize]) -> f64 {
        let n = positions.len() as f64;
        let per_prior: Vec<f64> = self.sums(param, positions).iter().map(|s| s / n).collect();
        marginalize_priors(&per_prior)
    }
}

/// Every model's scores for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScores {
    pub participant_id: String,
    pub condition_id: String,
    pub models: Vec<ModelScores>,
}

impl ParticipantScores {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelScores> {
        self.models.iter().find(|m| m.kind == kind)
    }

    pub fn n_positions(&self) -> usize {
        self.models.first().map_or(0, |m| m.n_positions)
    }
}

/// Belief trajectories depend only on the form space, whether forms carry
/// over, and the prior row; the full model and the structure-only ablation
/// share theirs.
fn trajectory_key(kind: ModelKind, prior: Option<usize>) -> (u8, Option<usize>) {
    let family = match kind {
        ModelKind::Hbm | ModelKind::StructureOnlyEig => 0,
        ModelKind::NoTransfer => 1,
        ModelKind::FixedForm => 2,
        ModelKind::Random => 3,
    };
    (family, prior)
}

fn replay_spec(kind: ModelKind, prior: Option<usize>) -> AgentSpec {
    AgentSpec {
        kind,
        prior_index: prior,
        params: Some(PolicyParams {
            w: kind.weight_grid().first().copied().unwrap_or(0.0),
            t: 1.0,
        }),
    }
}

/// Scores one participant under every requested model, prior and grid point.
pub fn score_participant(
    log: &ParticipantLog,
    condition: &Condition,
    kinds: &[ModelKind],
    options: &ScoringOptions,
) -> Result<ParticipantScores> {
    let mut cache: BTreeMap<(u8, Option<usize>), (Vec<EigTable>, Vec<Event>)> = BTreeMap::new();
    let mut models = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        if kind == ModelKind::Random {
            let probs =
                predictive_likelihood(&AgentSpec::random(), log, condition, options)?;
            models.push(ModelScores {
                kind,
                priors: Vec::new(),
                params: Vec::new(),
                n_positions: probs.len(),
                likelihoods: probs,
            });
            continue;
        }
        let priors: Vec<usize> = if kind.uses_prior_grid() {
            (1..=N_PRIORS).collect()
        } else {
            Vec::new()
        };
        let params = parameter_grid(kind);
        let prior_slots: Vec<Option<usize>> = if priors.is_empty() {
            vec![None]
        } else {
            priors.iter().copied().map(Some).collect()
        };
        let mut likelihoods = Vec::new();
        let mut n_positions = 0;
        for prior in prior_slots {
            let key = trajectory_key(kind, prior);
            if !cache.contains_key(&key) {
                let traj = eig_trajectory(&replay_spec(kind, prior), log, condition, options)?;
                cache.insert(key, traj);
            }
            let (tables, events) = &cache[&key];
            n_positions = events.len();
            for p in &params {
                let combined: Vec<Vec<f64>> = tables.iter().map(|t| t.combined(p.w)).collect();
                for (scores, e) in combined.iter().zip(events) {
                    let dist = crate::policy::softmax(scores, p.t)?;
                    likelihoods.push(dist[e.intervention.bits() as usize]);
                }
            }
        }
        models.push(ModelScores {
            kind,
            priors,
            params,
            n_positions,
            likelihoods,
        });
    }
    Ok(ParticipantScores {
        participant_id: log.participant_id.clone(),
        condition_id: log.condition_id.clone(),
        models,
    })
}

/// Scores many participants in parallel; output order follows `logs`.
pub fn score_all(
    logs: &[ParticipantLog],
    conditions: &[Condition],
    kinds: &[ModelKind],
    options: &ScoringOptions,
) -> Result<Vec<ParticipantScores>> {
    logs.par_iter()
        .map(|log| {
            let condition = conditions
                .iter()
                .find(|c| c.id == log.condition_id)
                .ok_or_else(|| Error::Unknown {
                    what: "condition",
                    name: log.condition_id.clone(),
                })?;
            score_participant(log, condition, kinds, options)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldUnit {
    Participants,
    Interventions,
}

/// Assignment of units to four balanced folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub unit: FoldUnit,
    pub seed: u64,
    pub stratified: bool,
    /// `assignment[unit]` is that unit's fold.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Shuffles participants (within each condition when `stratified`) and
    /// deals them round-robin, continuing the count across strata.
    pub fn participants(condition_ids: &[&str], seed: u64, stratified: bool) -> Result<Self> {
        let n = condition_ids.len();
        if n < N_FOLDS {
            return Err(Error::TooFewUnits {
                needed: N_FOLDS,
                got: n,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in condition_ids.iter().enumerate() {
            let key = if stratified { *c } else { "" };
            groups.entry(key).or_default().push(i);
        }
        let mut assignment = vec![0; n];
        let mut dealt = 0;
        for members in groups.values_mut() {
            members.shuffle(&mut rng);
            for &i in members.iter() {
                assignment[i] = dealt % N_FOLDS;
                dealt += 1;
            }
        }
        Ok(FoldPlan {
            unit: FoldUnit::Participants,
            seed,
            stratified,
            assignment,
        })
    }

    /// Shuffles positions and chunks them into folds.
    pub fn interventions(n_positions: usize, seed: u64) -> Result<Self> {
        if n_positions < N_FOLDS {
            return Err(Error::TooFewUnits {
                needed: N_FOLDS,
                got: n_positions,
            });
        }
        let mut order: Vec<usize> = (0..n_positions).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n_positions];
        for (rank, &pos) in order.iter().enumerate() {
            assignment[pos] = rank * N_FOLDS / n_positions;
        }
        Ok(FoldPlan {
            unit: FoldUnit::Interventions,
            seed,
            stratified: false,
            assignment,
        })
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&u| self.assignment[u] == fold)
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&u| self.assignment[u] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> [usize; N_FOLDS] {
        let mut sizes = [0; N_FOLDS];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// FNV-1a, used to give each participant its own fold seed.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn participant_fold_seed(seed: u64, participant_id: &str) -> u64 {
    seed ^ stable_hash(participant_id)
}

/// Index of the best-scoring grid point; earlier points win ties.
fn argmax(scores: impl Iterator<Item = f64>) -> (usize, f64) {
    scores
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
}

/// Cross-validated hold-out score of one model within one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub kind: ModelKind,
    /// Mean of the four hold-out scores.
    pub score: f64,
    pub fold_scores: Vec<f64>,
    /// Fitted grid point per fold; absent for the random baseline.
    pub fitted: Vec<Option<PolicyParams>>,
}

fn fit_within(scores: &ModelScores, plan: &FoldPlan) -> ModelFit {
    let mut fold_scores = Vec::with_capacity(N_FOLDS);
    let mut fitted = Vec::with_capacity(N_FOLDS);
    for fold in 0..N_FOLDS {
        let train = plan.complement(fold);
        let held = plan.members(fold);
        let (best, _) = argmax((0..scores.n_param_slots()).map(|p| scores.marginal_score(p, &train)));
        fold_scores.push(scores.marginal_score(best, &held));
        fitted.push(scores.params.get(best).copied());
    }
    ModelFit {
        kind: scores.kind,
        score: fold_scores.iter().sum::<f64>() / N_FOLDS as f64,
        fold_scores,
        fitted,
    }
}

/// Highest score wins; exact ties go to the more parsimonious model.
fn winner<'a>(fits: impl Iterator<Item = (ModelKind, f64)> + 'a) -> Option<ModelKind> {
    fits.fold(None::<(ModelKind, f64)>, |best, (kind, score)| match best {
        None => Some((kind, score)),
        Some((bk, bs)) if score > bs || (score == bs && kind.preferred_over(bk)) => {
            Some((kind, score))
        }
        keep => keep,
    })
    .map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualResult {
    pub participant_id: String,
    pub condition_id: String,
    pub fold_plan: FoldPlan,
    pub fits: Vec<ModelFit>,
    pub best: ModelKind,
}

/// Per-participant model selection: the scored interventions are split into
/// four folds, parameters are fitted on three and evaluated on the fourth.
pub fn crossval_individual(scores: &ParticipantScores, seed: u64) -> Result<IndividualResult> {
    let n = scores.n_positions();
    let plan = FoldPlan::interventions(n, participant_fold_seed(seed, &scores.participant_id))?;
    let fits: Vec<ModelFit> = scores.models.iter().map(|m| fit_within(m, &plan)).collect();
    let best = winner(fits.iter().map(|f| (f.kind, f.score)))
        .ok_or_else(|| Error::invalid("no models to compare"))?;
    Ok(IndividualResult {
        participant_id: scores.participant_id.clone(),
        condition_id: scores.condition_id.clone(),
        fold_plan: plan,
        fits,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: ModelKind,
    /// Mean of the four hold-out fold scores.
    pub mean: f64,
    /// Standard error over participants' hold-out scores.
    pub stderr: f64,
    pub fold_scores: Vec<f64>,
    pub fitted: Vec<Option<PolicyParams>>,
    /// Each participant's marginalized hold-out score, in input order.
    pub participant_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedResult {
    pub fold_plan: FoldPlan,
    /// Best first.
    pub ranking: Vec<ModelSummary>,
}

/// Pooled mean over all scored interventions of `units`, per prior slot,
/// then marginalized.
fn pooled_score(all: &[&ModelScores], param: usize, units: &[usize]) -> f64 {
    let n_slots = all[units[0]].n_prior_slots();
    let mut sums = vec![0.0; n_slots];
    let mut count = 0usize;
    for &u in units {
        let m = all[u];
        let positions: Vec<usize> = (0..m.n_positions).collect();
        for (acc, s) in sums.iter_mut().zip(m.sums(param, &positions)) {
            *acc += s;
        }
        count += m.n_positions;
    }
    let per_prior: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    marginalize_priors(&per_prior)
}

/// Population-level comparison: participants are split into four folds,
/// parameters are fitted on three and evaluated on the held-out fold.
pub fn crossval_averaged(
    participants: &[ParticipantScores],
    seed: u64,
    stratified: bool,
) -> Result<AveragedResult> {
    let ids: Vec<&str> = participants.iter().map(|p| p.condition_id.as_str()).collect();
    let plan = FoldPlan::participants(&ids, seed, stratified)?;
    let kinds: Vec<ModelKind> = participants[0].models.iter().map(|m| m.kind).collect();
    let mut summaries = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let all: Vec<&ModelScores> = participants
            .iter()
            .map(|p| {
                p.model(kind).ok_or_else(|| {
                    Error::invalid(format!("participant `{}` lacks {kind} scores", p.participant_id))
                })
            })
            .collect::<Result<_>>()?;
        let n_params = all[0].n_param_slots();
        let mut fold_scores = Vec::with_capacity(N_FOLDS);
        let mut fitted = Vec::with_capacity(N_FOLDS);
        let mut participant_scores = vec![0.0; participants.len()];
        for fold in 0..N_FOLDS {
            let train = plan.complement(fold);
            let held = plan.members(fold);
            let (best, _) = argmax((0..n_params).map(|p| pooled_score(&all, p, &train)));
            fold_scores.push(pooled_score(&all, best, &held));
            fitted.push(all[0].params.get(best).copied());
            for &u in &held {
                participant_scores[u] = pooled_score(&all, best, &[u]);
            }
        }
        let n = participant_scores.len() as f64;
        let mean_p = participant_scores.iter().sum::<f64>() / n;
        let var = participant_scores
            .iter()
            .map(|s| (s - mean_p).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        summaries.push(ModelSummary {
            kind,
            mean: fold_scores.iter().sum::<f64>() / N_FOLDS as f64,
            stderr: (var / n).sqrt(),
            fold_scores,
            fitted,
            participant_scores,
        });
    }
    summaries.sort_by(|a, b| {
        b.mean.total_cmp(&a.mean).then_with(|| {
            if a.kind.preferred_over(b.kind) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        })
    });
    Ok(AveragedResult {
        fold_plan: plan,
        ranking: summaries,
    })
}

/// One flat row of a score table: a participant's mean likelihood under one
/// model, prior and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub participant_id: String,
    pub condition_id: String,
    pub model: ModelKind,
    pub prior_index: Option<usize>,
    pub t: Option<f64>,
    pub w: Option<f64>,
    pub fold: Option<usize>,
    pub n: usize,
    pub mean_likelihood: f64,
    pub geo_mean_likelihood: f64,
}

pub fn score_rows(participants: &[ParticipantScores], plan: Option<&FoldPlan>) -> Vec<ScoreRow> {
    let mut rows = Vec::new();
    for (u, p) in participants.iter().enumerate() {
        for m in &p.models {
            for slot in 0..m.n_prior_slots() {
                for param in 0..m.n_param_slots() {
                    let row = m.row(slot, param);
                    let n = row.len().max(1) as f64;
                    let params = m.params.get(param);
                    rows.push(ScoreRow {
                        participant_id: p.participant_id.clone(),
                        condition_id: p.condition_id.clone(),
                        model: m.kind,
                        prior_index: m.priors.get(slot).copied(),
                        t: params.map(|p| p.t),
                        w: params.map(|p| p.w),
                        fold: plan.map(|p| p.assignment[u]),
                        n: row.len(),
                        mean_likelihood: row.iter().sum::<f64>() / n,
                        geo_mean_likelihood: (row.iter().map(|l| l.ln()).sum::<f64>() / n).exp(),
                    });
                }
            }
        }
    }
    rows
}

/// Policy parameters given to synthetic agents in recovery studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratingParams {
    pub t: f64,
}

impl Default for GeneratingParams {
    fn default() -> Self {
        GeneratingParams { t: 0.01 }
    }
}

/// Draws a generating spec: prior row uniform over the grid, `w` uniform
/// over the fitted weight grid (0 for the structure-only ablation).
pub fn sample_generating_spec<R: Rng + ?Sized>(
    kind: ModelKind,
    params: GeneratingParams,
    rng: &mut R,
) -> Result<AgentSpec> {
    let prior = rng.gen_range(1..=N_PRIORS);
    let w = *WEIGHT_GRID.choose(rng).expect("nonempty grid");
    match kind {
        ModelKind::Hbm => AgentSpec::hbm(prior, w, params.t),
        ModelKind::NoTransfer => AgentSpec::no_transfer(prior, w, params.t),
        ModelKind::StructureOnlyEig => AgentSpec::structure_only(prior, params.t),
        ModelKind::FixedForm => AgentSpec::fixed_form(w, params.t),
        ModelKind::Random => Ok(AgentSpec::random()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub kinds: Vec<ModelKind>,
    /// `counts[generating][recovered]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(kinds: Vec<ModelKind>) -> Self {
        let n = kinds.len();
        ConfusionMatrix {
            kinds,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, kind: ModelKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind)
    }

    pub fn record(&mut self, generating: ModelKind, recovered: ModelKind) {
        if let (Some(g), Some(r)) = (self.index(generating), self.index(recovered)) {
            self.counts[g][r] += 1;
        }
    }

    pub fn count(&self, generating: ModelKind, recovered: ModelKind) -> usize {
        match (self.index(generating), self.index(recovered)) {
            (Some(g), Some(r)) => self.counts[g][r],
            _ => 0,
        }
    }

    /// Fraction of `kind`'s agents whose winner was `kind`.
    pub fn recovery_rate(&self, kind: ModelKind) -> f64 {
        let Some(g) = self.index(kind) else { return 0.0 };
        let total: usize = self.counts[g].iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.counts[g][g] as f64 / total as f64
    }

    /// Strict row dominance of the sub-matrix on `subset`: each diagonal
    /// count exceeds the sum of the other entries in its row.
    pub fn is_diagonally_dominant(&self, subset: &[ModelKind]) -> bool {
        subset.iter().all(|&g| {
            let diag = self.count(g, g);
            let off: usize = subset
                .iter()
                .filter(|&&r| r != g)
                .map(|&r| self.count(g, r))
                .sum();
            diag > off
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredAgent {
    pub participant_id: String,
    pub condition_id: String,
    pub generating: AgentSpec,
    pub recovered: ModelKind,
    pub scores: BTreeMap<ModelKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub confusion: ConfusionMatrix,
    pub agents: Vec<RecoveredAgent>,
}

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub n_per_model: usize,
    pub conditions: Vec<Condition>,
    pub seed: u64,
    pub generating: GeneratingParams,
    pub kinds: Vec<ModelKind>,
    pub options: ScoringOptions,
}

impl RecoveryConfig {
    pub fn new(n_per_model: usize, conditions: Vec<Condition>, seed: u64) -> Self {
        RecoveryConfig {
            n_per_model,
            conditions,
            seed,
            generating: GeneratingParams::default(),
            kinds: ModelKind::ALL.to_vec(),
            options: ScoringOptions::default(),
        }
    }
}

/// Simulates agents of every kind, selects a winner per agent with
/// [`crossval_individual`], and tabulates generating versus recovered model.
/// Agents cycle through the conditions.
pub fn model_recovery(config: &RecoveryConfig) -> Result<RecoveryReport> {
    if config.conditions.is_empty() {
        return Err(Error::invalid("model recovery needs at least one condition"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut jobs = Vec::new();
    for &kind in &config.kinds {
        for i in 0..config.n_per_model {
            let condition = &config.conditions[i % config.conditions.len()];
            let spec = sample_generating_spec(kind, config.generating, &mut master)?;
            let agent_seed: u64 = master.gen();
            jobs.push((kind, i, condition, spec, agent_seed));
        }
    }
    let agents: Vec<RecoveredAgent> = jobs
        .par_iter()
        .map(|(kind, i, condition, spec, agent_seed)| {
            let id = format!("{}-{:03}", kind.name(), i);
            let mut rng = ChaCha8Rng::seed_from_u64(*agent_seed);
            let log = run_condition(spec, condition, &id, &mut rng)?;
            let scores = score_participant(&log, condition, &config.kinds, &config.options)?;
            let result = crossval_individual(&scores, *agent_seed)?;
            Ok(RecoveredAgent {
                participant_id: id,
                condition_id: condition.id.clone(),
                generating: *spec,
                recovered: result.best,
                scores: result.fits.iter().map(|f| (f.kind, f.score)).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(config.kinds.clone());
    for a in &agents {
        confusion.record(a.generating.kind, a.recovered);
    }
    Ok(RecoveryReport { confusion, agents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::find_condition;

    fn scores_with(kind: ModelKind, priors: usize, params: Vec<PolicyParams>, rows: Vec<Vec<f64>>) -> ModelScores {
        let n_positions = rows[0].len();
        ModelScores {
            kind,
            priors: (1..=priors).collect(),
            params,
            n_positions,
            likelihoods: rows.into_iter().flatten().collect(),
        }
    }

    #[test]
    fn marginalization() {
        assert!((marginalize_priors(&[0.02, 0.04]) - 0.03).abs() < 1e-15);
        assert!((marginalize_priors(&[0.7; 24]) - 0.7).abs() < 1e-15);
        assert_eq!(marginalize_priors(&[0.123]), 0.123);
    }

    #[test]
    fn parameter_grids() {
        assert_eq!(parameter_grid(ModelKind::Hbm).len(), 60);
        assert_eq!(parameter_grid(ModelKind::FixedForm).len(), 60);
        let so = parameter_grid(ModelKind::StructureOnlyEig);
        assert_eq!(so.len(), 6);
        assert!(so.iter().all(|p| p.w == 0.0));
        assert!(parameter_grid(ModelKind::Random).is_empty());
    }

    #[test]
    fn fold_plans_are_balanced() {
        let plan = FoldPlan::interventions(20, 3).unwrap();
        assert_eq!(plan.fold_sizes(), [5, 5, 5, 5]);
        let plan = FoldPlan::interventions(7, 3).unwrap();
        let sizes = plan.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(FoldPlan::interventions(3, 0).is_err());

        let ids = ["a", "a", "b", "b", "b", "c", "c", "a", "b", "c", "c"];
        for stratified in [true, false] {
            let plan = FoldPlan::participants(&ids, 9, stratified).unwrap();
            let sizes = plan.fold_sizes();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
        }
        assert_eq!(
            FoldPlan::participants(&ids, 9, true).unwrap(),
            FoldPlan::participants(&ids, 9, true).unwrap()
        );
    }

    #[test]
    fn fitting_picks_best_training_point() {
        // two grid points, one prior; point 1 is better everywhere
        let params = vec![PolicyParams { w: 0.1, t: 1.0 }, PolicyParams { w: 0.2, t: 1.0 }];
        let m = scores_with(
            ModelKind::Hbm,
            1,
            params.clone(),
            vec![vec![0.01; 8], vec![0.05; 8]],
        );
        let ps = ParticipantScores {
            participant_id: "p".into(),
            condition_id: "conj".into(),
            models: vec![m],
        };
        let r = crossval_individual(&ps, 0).unwrap();
        assert!(r.fits[0].fitted.iter().all(|f| *f == Some(params[1])));
        assert!((r.fits[0].score - 0.05).abs() < 1e-15);
    }

    #[test]
    fn exact_ties_go_to_simpler_model() {
        let tie = [(ModelKind::Hbm, 0.5), (ModelKind::Random, 0.5), (ModelKind::NoTransfer, 0.4)];
        assert_eq!(winner(tie.into_iter()), Some(ModelKind::Random));
        let clear = [(ModelKind::Random, 0.5), (ModelKind::Hbm, 0.6)];
        assert_eq!(winner(clear.into_iter()), Some(ModelKind::Hbm));
    }

    #[test]
    fn random_scores_are_one_over_candidates() {
        let cond = find_condition("conj", None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let log = run_condition(&AgentSpec::random(), &cond, "r", &mut rng).unwrap();
        let probs =
            predictive_likelihood(&AgentSpec::random(), &log, &cond, &ScoringOptions::default())
                .unwrap();
        assert_eq!(probs, vec![0.015625; 20]);
    }

    #[test]
    fn malformed_logs_name_the_position() {
        let cond = find_condition("conj", None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut log = run_condition(&AgentSpec::random(), &cond, "r", &mut rng).unwrap();
        log.tasks[1].trials[3].event.intervention = crate::BlockSet::from_indices([7]).unwrap();
        let err = predictive_likelihood(
            &AgentSpec::hbm(1, 0.5, 1.0).unwrap(),
            &log,
            &cond,
            &ScoringOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::MalformedLog { position, .. } => assert_eq!(position, 12 + 4),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn large_tasks_need_a_budget() {
        let cond = find_condition("disj-same-short", None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut short = cond.clone();
        for t in &mut short.tasks {
            t.intervention_limit = 2;
        }
        let log = run_condition(&AgentSpec::random(), &short, "x", &mut rng).unwrap();
        let spec = AgentSpec::fixed_form(0.5, 1.0).unwrap();
        assert!(predictive_likelihood(&spec, &log, &short, &ScoringOptions::default()).is_err());
        let opts = ScoringOptions {
            max_blocks: 9,
            ..ScoringOptions::default()
        };
        assert_eq!(predictive_likelihood(&spec, &log, &short, &opts).unwrap().len(), 2);
    }

    #[test]
    fn confusion_matrix_bookkeeping() {
        let mut m = ConfusionMatrix::new(ModelKind::ALL.to_vec());
        for _ in 0..3 {
            m.record(ModelKind::Hbm, ModelKind::Hbm);
        }
        m.record(ModelKind::Hbm, ModelKind::NoTransfer);
        m.record(ModelKind::Random, ModelKind::Random);
        m.record(ModelKind::FixedForm, ModelKind::FixedForm);
        assert_eq!(m.recovery_rate(ModelKind::Hbm), 0.75);
        let sub = [ModelKind::Hbm, ModelKind::Random, ModelKind::FixedForm];
        assert!(m.is_diagonally_dominant(&sub));
        m.record(ModelKind::Random, ModelKind::Hbm);
        assert!(!m.is_diagonally_dominant(&sub));
    }
}
