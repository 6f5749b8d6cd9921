use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use blicket_core::agents::run_condition;
use blicket_core::evaluation::{
    crossval_averaged, crossval_individual, model_recovery, score_all, score_rows, FoldPlan,
    RecoveryConfig, ScoringOptions, DEFAULT_MAX_SCORED_BLOCKS,
};
use blicket_core::io::{
    builtin_conditions, export, ingest_str, parse_conditions, sidecar_path, write_atomic,
    RunManifest,
};
use blicket_core::log::ParticipantLog;
use blicket_core::{AgentSpec, Condition, Experiment, ModelKind, PolicyParams, TaskRole};
use clap::{Args, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Play conditions with a synthetic agent and write JSONL logs.
    Simulate(SimulateArgs),
    /// Score logs under every model, prior and grid point (CSV table).
    Score(ScoreArgs),
    /// Cross-validated model comparison, averaged and per participant.
    Compare(CompareArgs),
    /// Model-recovery study on synthetic agents.
    Recover(RecoverArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Condition selection shared by the data commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConditionArgs {
    /// Experiment whose built-in conditions are used.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub experiment: u8,
    /// JSON file with custom conditions, replacing the built-in ones.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
}

impl ConditionArgs {
    fn load(&self) -> Result<(Vec<Condition>, Option<(String, Vec<u8>)>), CliError> {
        match &self.conditions {
            Some(path) => {
                let bytes = fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
                let text = String::from_utf8(bytes.clone()).map_err(data)?;
                let conditions = parse_conditions(&text).map_err(data)?;
                Ok((conditions, Some((path.display().to_string(), bytes))))
            }
            None => {
                let experiment = Experiment::from_number(self.experiment).map_err(usage)?;
                Ok((experiment.conditions(), None))
            }
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub conditions: ConditionArgs,
    /// Condition id; all conditions of the experiment in turn when omitted.
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long, default_value = "hbm")]
    pub model: ModelKind,
    /// Prior row 1..=24 for models that use the prior grid.
    #[arg(long)]
    pub prior: Option<usize>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic participants.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoringArgs {
    /// Task scored in each log.
    #[arg(long, default_value = "transfer")]
    pub role: TaskRole,
    /// Largest task scored; raise to 9 for Exp1 transfer tasks.
    #[arg(long, default_value_t = DEFAULT_MAX_SCORED_BLOCKS)]
    pub max_blocks: usize,
    /// Models to score; all when omitted.
    #[arg(long = "model")]
    pub models: Vec<ModelKind>,
}

impl ScoringArgs {
    fn options(&self) -> ScoringOptions {
        ScoringOptions {
            role: self.role,
            max_blocks: self.max_blocks,
        }
    }

    fn kinds(&self) -> Vec<ModelKind> {
        if self.models.is_empty() {
            ModelKind::ALL.to_vec()
        } else {
            self.models.clone()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LogArgs {
    /// JSONL log file.
    #[arg(long)]
    pub logs: PathBuf,
    /// Drop rejected lines instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub conditions: ConditionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub logs: LogArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    /// Seed of the participant fold plan reported in the `fold` column.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub unstratified: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub conditions: ConditionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub logs: LogArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Assign participants to folds without stratifying by condition.
    #[arg(long)]
    pub unstratified: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RecoverArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub conditions: ConditionArgs,
    /// Restrict agents to one condition.
    #[arg(long)]
    pub condition: Option<String>,
    /// Agents per model kind.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Softmax temperature of the generating agents.
    #[arg(long, default_value_t = 0.01)]
    pub t: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_SCORED_BLOCKS)]
    pub max_blocks: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// JSON file with custom conditions, replacing the built-in ones.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    /// Directory for per-session JSONL checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// Manifest file, or a JSON output with an embedded manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    pub fn run(self) -> Result<(), CliError> {
        match self {
            Command::Simulate(a) => a.run(),
            Command::Score(a) => a.run(),
            Command::Compare(a) => a.run(),
            Command::Recover(a) => a.run(),
            Command::Serve(a) => a.run(),
            Command::Rerun(a) => a.run(),
        }
    }
}

fn manifest_for<T: Serialize>(command: &str, args: &T, seed: u64, input: Option<(String, Vec<u8>)>) -> RunManifest {
    let value = serde_json::to_value(args).expect("arguments serialize");
    let manifest = RunManifest::new(command, value, Some(seed));
    match input {
        Some((path, bytes)) => manifest.with_input(&path, &bytes),
        None => manifest,
    }
}

/// Writes a JSONL or CSV body, with the manifest in a sidecar file.
fn emit_with_sidecar(out: Option<&Path>, body: &[u8], manifest: &RunManifest) -> Result<(), CliError> {
    match out {
        Some(path) => {
            write_atomic(path, body).map_err(data)?;
            let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
            write_atomic(&sidecar_path(path), text.as_bytes()).map_err(data)
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(body).map_err(data)
        }
    }
}

/// Writes a JSON document with the manifest embedded under `manifest`.
fn emit_json(out: Option<&Path>, mut doc: serde_json::Value, manifest: &RunManifest) -> Result<(), CliError> {
    doc["manifest"] = serde_json::to_value(manifest).expect("manifest serializes");
    let text = serde_json::to_string_pretty(&doc).expect("json serializes") + "\n";
    emit_plain(out, text.as_bytes())
}

fn emit_plain(out: Option<&Path>, body: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, body).map_err(data),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(body).map_err(data)
        }
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(data)?;
    }
    writer.into_inner().map_err(data)
}

fn select_conditions(all: Vec<Condition>, id: Option<&str>) -> Result<Vec<Condition>, CliError> {
    match id {
        None => Ok(all),
        Some(id) => {
            let found: Vec<Condition> = all.into_iter().filter(|c| c.id == id).collect();
            if found.is_empty() {
                Err(usage(format!("unknown condition `{id}`")))
            } else {
                Ok(found)
            }
        }
    }
}

fn read_logs(args: &LogArgs, conditions: &[Condition]) -> Result<(Vec<ParticipantLog>, Vec<u8>), CliError> {
    let bytes = fs::read(&args.logs).map_err(|e| data(format!("{}: {e}", args.logs.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(data)?;
    let ingested = match ingest_str(&text, conditions, args.lenient) {
        Ok(i) => i,
        Err(blicket_core::Error::Rejected(diags)) => {
            for d in &diags {
                eprintln!("{}: {d}", args.logs.display());
            }
            return Err(data(format!("{} line(s) rejected", diags.len())));
        }
        Err(e) => return Err(data(e)),
    };
    for d in &ingested.rejects {
        eprintln!("{}: skipped {d}", args.logs.display());
    }
    Ok((ingested.logs, bytes))
}

/// Custom condition files and log files both count as inputs.
fn inputs(cond: Option<(String, Vec<u8>)>, logs: (&Path, Vec<u8>)) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = cond.into_iter().collect();
    v.push((logs.0.display().to_string(), logs.1));
    v
}

fn manifest_with_inputs<T: Serialize>(command: &str, args: &T, seed: u64, inputs: Vec<(String, Vec<u8>)>) -> RunManifest {
    inputs
        .into_iter()
        .fold(manifest_for(command, args, seed, None), |m, (p, b)| m.with_input(&p, &b))
}

impl SimulateArgs {
    fn spec(&self) -> Result<AgentSpec, CliError> {
        if self.model == ModelKind::Random {
            return Ok(AgentSpec::random());
        }
        let default_w = if self.model == ModelKind::StructureOnlyEig { 0.0 } else { 0.5 };
        let params = PolicyParams::new(self.w.unwrap_or(default_w), self.t).map_err(usage)?;
        let prior = match (self.model.uses_prior_grid(), self.prior) {
            (true, p) => Some(p.unwrap_or(1)),
            (false, p) => p,
        };
        AgentSpec::new(self.model, prior, Some(params)).map_err(usage)
    }

    fn run(self) -> Result<(), CliError> {
        let spec = self.spec()?;
        let (all, cond_input) = self.conditions.load()?;
        let conditions = select_conditions(all, self.condition.as_deref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut logs = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let condition = &conditions[i % conditions.len()];
            let id = format!("{}-{}-{:04}", spec.kind.name(), condition.id, i);
            let mut agent_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            logs.push(run_condition(&spec, condition, &id, &mut agent_rng).map_err(data)?);
        }
        let manifest = manifest_for("simulate", &self, self.seed, cond_input);
        emit_with_sidecar(self.out.as_deref(), export(&logs).as_bytes(), &manifest)
    }
}

fn fold_plan(
    logs: &[ParticipantLog],
    seed: u64,
    stratified: bool,
) -> Result<FoldPlan, blicket_core::Error> {
    let ids: Vec<&str> = logs.iter().map(|l| l.condition_id.as_str()).collect();
    FoldPlan::participants(&ids, seed, stratified)
}

impl ScoreArgs {
    fn run(self) -> Result<(), CliError> {
        let (conditions, cond_input) = self.conditions.load()?;
        let (logs, log_bytes) = read_logs(&self.logs, &conditions)?;
        let scores = score_all(&logs, &conditions, &self.scoring.kinds(), &self.scoring.options()).map_err(data)?;
        let plan = fold_plan(&logs, self.seed, !self.unstratified).ok();
        let rows = score_rows(&scores, plan.as_ref());
        let mut manifest = manifest_with_inputs(
            "score",
            &self,
            self.seed,
            inputs(cond_input, (&self.logs.logs, log_bytes)),
        );
        if let Some(plan) = plan {
            manifest = manifest.with_fold_plan(plan);
        }
        match self.format {
            Format::Csv => emit_with_sidecar(self.out.as_deref(), &to_csv(&rows)?, &manifest),
            Format::Json => emit_json(self.out.as_deref(), json!({ "rows": rows }), &manifest),
        }
    }
}

#[derive(Debug, Serialize)]
struct WinnerRow {
    participant_id: String,
    condition_id: String,
    best_model: ModelKind,
    hbm: Option<f64>,
    no_transfer: Option<f64>,
    structure_only_eig: Option<f64>,
    fixed_form: Option<f64>,
    random: Option<f64>,
}

impl CompareArgs {
    fn run(self) -> Result<(), CliError> {
        let (conditions, cond_input) = self.conditions.load()?;
        let (logs, log_bytes) = read_logs(&self.logs, &conditions)?;
        let kinds = self.scoring.kinds();
        let scores = score_all(&logs, &conditions, &kinds, &self.scoring.options()).map_err(data)?;
        let averaged = crossval_averaged(&scores, self.seed, !self.unstratified).map_err(data)?;
        let individual = scores
            .iter()
            .map(|s| crossval_individual(s, self.seed))
            .collect::<Result<Vec<_>, _>>()
            .map_err(data)?;

        let mut best_counts: BTreeMap<&str, usize> = kinds.iter().map(|k| (k.name(), 0)).collect();
        for r in &individual {
            *best_counts.entry(r.best.name()).or_default() += 1;
        }
        let summary: BTreeMap<&str, serde_json::Value> = averaged
            .ranking
            .iter()
            .map(|m| {
                (
                    m.kind.name(),
                    json!({
                        "mean": m.mean,
                        "stderr": m.stderr,
                        "n_best_participants": best_counts[m.kind.name()],
                        "fold_scores": m.fold_scores,
                        "fitted": m.fitted,
                    }),
                )
            })
            .collect();
        let winners: Vec<WinnerRow> = individual
            .iter()
            .map(|r| {
                let score = |k: ModelKind| r.fits.iter().find(|f| f.kind == k).map(|f| f.score);
                WinnerRow {
                    participant_id: r.participant_id.clone(),
                    condition_id: r.condition_id.clone(),
                    best_model: r.best,
                    hbm: score(ModelKind::Hbm),
                    no_transfer: score(ModelKind::NoTransfer),
                    structure_only_eig: score(ModelKind::StructureOnlyEig),
                    fixed_form: score(ModelKind::FixedForm),
                    random: score(ModelKind::Random),
                }
            })
            .collect();

        let manifest = manifest_with_inputs(
            "compare",
            &self,
            self.seed,
            inputs(cond_input, (&self.logs.logs, log_bytes)),
        )
        .with_fold_plan(averaged.fold_plan.clone());
        match self.format {
            Format::Csv => emit_with_sidecar(self.out.as_deref(), &to_csv(&winners)?, &manifest),
            Format::Json => {
                let doc = json!({
                    "summary": summary,
                    "ranking": averaged.ranking.iter().map(|m| m.kind.name()).collect::<Vec<_>>(),
                    "best_model_counts": best_counts,
                    "stratified": !self.unstratified,
                    "participants": winners,
                });
                emit_json(self.out.as_deref(), doc, &manifest)
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct ConfusionRow {
    generating: ModelKind,
    recovered: ModelKind,
    count: usize,
}

impl RecoverArgs {
    fn run(self) -> Result<(), CliError> {
        if self.n < 5 {
            return Err(usage("recovery needs at least 5 agents per model"));
        }
        let (all, cond_input) = self.conditions.load()?;
        let conditions = select_conditions(all, self.condition.as_deref())?;
        let mut config = RecoveryConfig::new(self.n, conditions, self.seed);
        config.generating.t = PolicyParams::new(0.0, self.t).map_err(usage)?.t;
        config.options.max_blocks = self.max_blocks;
        let report = model_recovery(&config).map_err(data)?;
        let m = &report.confusion;
        let manifest = manifest_for("recover", &self, self.seed, cond_input);
        match self.format {
            Format::Csv => {
                let rows: Vec<ConfusionRow> = m
                    .kinds
                    .iter()
                    .flat_map(|&g| {
                        m.kinds.iter().map(move |&r| ConfusionRow {
                            generating: g,
                            recovered: r,
                            count: m.count(g, r),
                        })
                    })
                    .collect();
                emit_with_sidecar(self.out.as_deref(), &to_csv(&rows)?, &manifest)
            }
            Format::Json => {
                let rates: BTreeMap<&str, f64> =
                    m.kinds.iter().map(|&k| (k.name(), m.recovery_rate(k))).collect();
                let doc = json!({
                    "models": m.kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
                    "confusion": m.counts,
                    "recovery_rate": rates,
                    "diagonally_dominant": m.is_diagonally_dominant(&[
                        ModelKind::Hbm,
                        ModelKind::Random,
                        ModelKind::FixedForm,
                    ]),
                    "agents": report.agents,
                });
                emit_json(self.out.as_deref(), doc, &manifest)
            }
        }
    }
}

impl ServeArgs {
    fn run(self) -> Result<(), CliError> {
        let conditions = match &self.conditions {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
                parse_conditions(&text).map_err(data)?
            }
            None => builtin_conditions(),
        };
        let state = blicket_service::AppState::new(conditions, self.checkpoint_dir);
        let runtime = tokio::runtime::Runtime::new().map_err(data)?;
        eprintln!("listening on http://{}", self.addr);
        runtime
            .block_on(blicket_service::serve(self.addr, state))
            .map_err(data)
    }
}

impl RerunArgs {
    fn run(self) -> Result<(), CliError> {
        let manifest = RunManifest::load(&self.manifest).map_err(data)?;
        if !manifest.verify() {
            return Err(data("manifest hash does not match its configuration"));
        }
        for (path, digest) in &manifest.inputs {
            let bytes = fs::read(path).map_err(|e| data(format!("{path}: {e}")))?;
            if &blicket_core::io::sha256_hex(&bytes) != digest {
                return Err(data(format!("input `{path}` changed since the recorded run")));
            }
        }
        fn parse<T: serde::de::DeserializeOwned>(manifest: &RunManifest) -> Result<T, CliError> {
            serde_json::from_value(manifest.args.clone()).map_err(data)
        }
        let out = self.out;
        match manifest.command.as_str() {
            "simulate" => SimulateArgs { out, ..parse(&manifest)? }.run(),
            "score" => ScoreArgs { out, ..parse(&manifest)? }.run(),
            "compare" => CompareArgs { out, ..parse(&manifest)? }.run(),
            "recover" => RecoverArgs { out, ..parse(&manifest)? }.run(),
            other => Err(data(format!("manifest records unknown command `{other}`"))),
        }
    }
}
