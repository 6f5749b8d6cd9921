//! JSON-Lines log ingestion and export, condition files, run manifests and
//! atomic file writes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::BlockSet;
use crate::error::{Error, LineDiagnostic, Result};
use crate::evaluation::FoldPlan;
use crate::forms::{FormGrid, N_PRIORS};
use crate::inference::Event;
use crate::log::{ParticipantLog, TaskLog, Trial};
use crate::policy::{TEMPERATURE_GRID, WEIGHT_GRID};
use crate::tasks::{Condition, Experiment, TaskRole};

/// One line of a log file: a single intervention and the machine's response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub participant_id: String,
    pub condition_id: String,
    pub task_role: String,
    pub trial: u64,
    pub intervention: Vec<usize>,
    pub outcome: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Every built-in condition of both experiments.
pub fn builtin_conditions() -> Vec<Condition> {
    let mut all = Experiment::Exp2.conditions();
    all.extend(Experiment::Exp1.conditions());
    all
}

/// Parses a condition file: one condition object or an array of them.
pub fn parse_conditions(text: &str) -> Result<Vec<Condition>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<Condition>),
        One(Condition),
    }
    let conditions = match serde_json::from_str(text)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(c) => vec![c],
    };
    conditions.iter().try_for_each(Condition::validate)?;
    Ok(conditions)
}

/// Outcome of ingesting a log file.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub logs: Vec<ParticipantLog>,
    /// Rejected lines; empty unless ingestion was lenient.
    pub rejects: Vec<LineDiagnostic>,
}

struct Pending {
    condition: usize,
    /// Per task slot of the condition: trials and last trial number.
    tasks: Vec<(Vec<Trial>, u64)>,
}

fn check_record(
    record: &LogRecord,
    conditions: &[Condition],
    pending: &HashMap<String, Pending>,
) -> std::result::Result<(usize, usize, Event), String> {
    let condition = conditions
        .iter()
        .position(|c| c.id == record.condition_id)
        .ok_or_else(|| format!("unknown condition `{}`", record.condition_id))?;
    if let Some(p) = pending.get(&record.participant_id) {
        if p.condition != condition {
            return Err(format!(
                "participant `{}` already has condition `{}`",
                record.participant_id, conditions[p.condition].id
            ));
        }
    }
    let role: TaskRole = record.task_role.parse().map_err(|e: Error| e.to_string())?;
    let (slot, config) = conditions[condition]
        .task(role)
        .ok_or_else(|| format!("condition `{}` has no {role} task", record.condition_id))?;
    if record.trial < 1 {
        return Err("trial numbers start at 1".into());
    }
    if record.outcome > 1 {
        return Err(format!("outcome must be 0 or 1, got {}", record.outcome));
    }
    if let Some(&bad) = record.intervention.iter().find(|&&i| i >= config.n_blocks) {
        return Err(format!(
            "block index {bad} out of range for a {}-block task",
            config.n_blocks
        ));
    }
    let mut sorted = record.intervention.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err("intervention repeats a block".into());
    }
    if let Some(p) = pending.get(&record.participant_id) {
        let (trials, last) = &p.tasks[slot];
        if record.trial <= *last {
            return Err(format!(
                "trial {} does not follow trial {last} of {role}",
                record.trial
            ));
        }
        if trials.len() >= config.intervention_limit {
            return Err(format!(
                "{role} exceeds its limit of {}",
                config.intervention_limit
            ));
        }
    }
    let intervention = BlockSet::from_indices(record.intervention.iter().copied()).map_err(|e| e.to_string())?;
    Ok((condition, slot, Event::new(intervention, record.outcome == 1)))
}

/// Validates and groups log lines against `conditions`. Participants keep
/// the order of their first line and tasks follow the condition's order.
/// Any rejected line fails the whole file unless `lenient`, in which case
/// rejected lines are dropped and reported.
pub fn ingest_str(text: &str, conditions: &[Condition], lenient: bool) -> Result<Ingested> {
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let mut rejects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let checked = serde_json::from_str::<LogRecord>(line)
            .map_err(|e| format!("schema violation: {e}"))
            .and_then(|r| check_record(&r, conditions, &pending).map(|c| (r, c)));
        let (record, (condition, slot, event)) = match checked {
            Ok(ok) => ok,
            Err(message) => {
                rejects.push(LineDiagnostic {
                    line: i + 1,
                    message,
                });
                continue;
            }
        };
        let entry = pending
            .entry(record.participant_id.clone())
            .or_insert_with(|| {
                order.push(record.participant_id.clone());
                Pending {
                    condition,
                    tasks: vec![(Vec::new(), 0); conditions[condition].tasks.len()],
                }
            });
        let (trials, last) = &mut entry.tasks[slot];
        trials.push(Trial {
            event,
            timestamp: record.timestamp,
        });
        *last = record.trial;
    }
    if !rejects.is_empty() && !lenient {
        return Err(Error::Rejected(rejects));
    }
    let logs = order
        .into_iter()
        .map(|id| {
            let p = pending.remove(&id).expect("recorded above");
            let condition = &conditions[p.condition];
            ParticipantLog {
                participant_id: id,
                condition_id: condition.id.clone(),
                tasks: condition
                    .tasks
                    .iter()
                    .zip(p.tasks)
                    .filter(|(_, (trials, _))| !trials.is_empty())
                    .map(|(config, (trials, _))| TaskLog {
                        role: config.role,
                        trials,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(Ingested { logs, rejects })
}

pub fn ingest_path(path: &Path, conditions: &[Condition], lenient: bool) -> Result<Ingested> {
    ingest_str(&fs::read_to_string(path)?, conditions, lenient)
}

/// Flattens logs to records; trials are numbered from 1 within each task.
pub fn to_records(logs: &[ParticipantLog]) -> Vec<LogRecord> {
    let mut out = Vec::new();
    for log in logs {
        for task in &log.tasks {
            for (i, trial) in task.trials.iter().enumerate() {
                out.push(LogRecord {
                    participant_id: log.participant_id.clone(),
                    condition_id: log.condition_id.clone(),
                    task_role: task.role.as_str().to_string(),
                    trial: i as u64 + 1,
                    intervention: trial.event.intervention.indices().collect(),
                    outcome: u8::from(trial.event.activated),
                    timestamp: trial.timestamp.clone(),
                });
            }
        }
    }
    out
}

/// Serializes logs as JSON Lines, one record per line.
pub fn export(logs: &[ParticipantLog]) -> String {
    let mut out = String::new();
    for record in to_records(logs) {
        out.push_str(&serde_json::to_string(&record).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Writes `contents` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Grids a run was computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub n_priors: usize,
    pub temperature: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Default for GridInfo {
    fn default() -> Self {
        let grid = FormGrid::standard();
        GridInfo {
            bias: grid.biases,
            gain: grid.gains,
            n_priors: N_PRIORS,
            temperature: TEMPERATURE_GRID.to_vec(),
            weight: WEIGHT_GRID.to_vec(),
        }
    }
}

/// Everything needed to reproduce an output: the command and its arguments,
/// the seed, grids, digests of input files, fold plans, versions and a hash
/// of the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub seed: Option<u64>,
    pub grids: GridInfo,
    /// SHA-256 of each input file, keyed by the path given on the command line.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_plans: Vec<FoldPlan>,
    pub versions: BTreeMap<String, String>,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, args: serde_json::Value, seed: Option<u64>) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(
            env!("CARGO_PKG_NAME").to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        let mut manifest = RunManifest {
            command: command.to_string(),
            args,
            seed,
            grids: GridInfo::default(),
            inputs: BTreeMap::new(),
            fold_plans: Vec::new(),
            versions,
            config_hash: String::new(),
        };
        manifest.config_hash = manifest.compute_hash();
        manifest
    }

    /// Records an input file's digest and refreshes the hash.
    pub fn with_input(mut self, path: &str, contents: &[u8]) -> Self {
        self.inputs.insert(path.to_string(), sha256_hex(contents));
        self.config_hash = self.compute_hash();
        self
    }

    pub fn with_fold_plan(mut self, plan: FoldPlan) -> Self {
        self.fold_plans.push(plan);
        self
    }

    fn compute_hash(&self) -> String {
        let canonical = serde_json::json!({
            "command": self.command,
            "args": self.args,
            "seed": self.seed,
            "grids": self.grids,
            "inputs": self.inputs,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    /// True when the stored hash matches the stored configuration.
    pub fn verify(&self) -> bool {
        self.config_hash == self.compute_hash()
    }

    /// Reads a manifest file, or the `manifest` field of a JSON output.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let manifest = match value.get("manifest") {
            Some(inner) => serde_json::from_value(inner.clone())?,
            None => serde_json::from_value(value)?,
        };
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Path of the manifest written next to a non-JSON output.
pub fn sidecar_path(output: &Path) -> std::path::PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    name.into()
}
