//! Command-line front end. Every command reads and writes files (JSONL, CSV,
//! binary index); failures print one JSON line on stderr and exit nonzero.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PipelineConfig, Profile};
use crate::eval::{self, EvalRecord};
use crate::fusion::build_query_vector;
use crate::gateway::server::{run_stub_server, StubServerConfig};
use crate::gateway::{connect, GatewayMode, ModelGateway, ScenarioTable};
use crate::grpo::env::{RewriteEnvSpec, RewriteEnvironment};
use crate::grpo::{train_toy_policy, RewardEnvironment};
use crate::index::VectorIndex;
use crate::kb::{build_kb_parallel, write_metadata_jsonl};
use crate::pipeline::{
    map_ordered, read_jsonl, write_jsonl, CandidateRecord, Pipeline, PipelineError, QueryRecord,
    RerankRecord,
};
use crate::refiner::{entity_hit_rank, score_rollout, RewardPolicy, RewardRecord};

#[derive(Debug, Parser)]
#[command(name = "kbvqa", version, about = "Knowledge-based VQA retrieval pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset profile: evqa or infoseek.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Seed for the stub backend and every sampler.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model backend: stub or remote.
    #[arg(long, global = true, value_parser = ["stub", "remote"])]
    pub mode: Option<String>,
    /// Gateway endpoint for remote mode.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode KB sections into a binary index plus a metadata sidecar.
    BuildKb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve top-k candidates per query.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Embed the raw question instead of the refiner's rewrite.
        #[arg(long)]
        no_refine: bool,
        /// Record wall-clock timings (output is no longer reproducible).
        #[arg(long)]
        timings: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-stage rerank of retrieved candidates.
    Rerank {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect reranked contexts and route answers.
    Answer {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics over evaluation records.
    Evaluate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        ks: Vec<usize>,
        /// JSON report path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score refiner rollouts with the format and retrieval rewards.
    RewardCheck {
        #[arg(long)]
        rollouts: PathBuf,
        /// Retrieve refined queries against this index when a rollout does
        /// not carry its own ranking.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the template policy on a synthetic rewrite environment.
    GrpoTrainToy {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "grpo_curve.csv")]
        curve: PathBuf,
        #[arg(long, default_value = "grpo_policy.json")]
        policy: PathBuf,
    },
    /// Evaluate a hyperparameter grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the deterministic stub model server.
    ServeStub {
        #[arg(long, default_value_t = 8089)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// JSON object mapping template ids to canned responses.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

/// A failure reported as `{"error": {"kind", "message", "field"?}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            field: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut msg = self.clone();
        msg.message = msg.message.split_whitespace().collect::<Vec<_>>().join(" ");
        serde_json::json!({ "error": msg }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self {
            kind: "config",
            field: e.field().map(str::to_string),
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Json { .. } => "input",
            PipelineError::Io(_) => "io",
            PipelineError::Gateway(_) => "gateway",
            _ => "pipeline",
        };
        Self::new(kind, e)
    }
}

macro_rules! cli_error_from {
    ($($t:ty => $kind:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::new($kind, e)
            }
        })*
    };
}

cli_error_from! {
    std::io::Error => "io",
    serde_json::Error => "input",
    crate::index::IndexError => "index",
    crate::kb::KbError => "kb",
    crate::gateway::GatewayError => "gateway",
    crate::eval::EvalError => "eval",
    crate::grpo::GrpoError => "grpo",
    crate::grpo::env::EnvError => "grpo",
    crate::fusion::FusionError => "fusion",
    crate::refiner::RewardError => "reward",
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn load_index(path: &Path) -> Result<VectorIndex, CliError> {
    VectorIndex::load(path).map_err(|e| CliError::new("index", format!("{}: {e}", path.display())))
}

/// Writes to `out`, or to stdout when absent.
fn emit(out: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

pub fn resolve_config(g: &GlobalOpts) -> Result<PipelineConfig, CliError> {
    let profile = g.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut cfg = PipelineConfig::load_unvalidated(g.config.as_deref(), profile)?;
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(mode) = &g.mode {
        cfg.gateway.mode = if mode == "remote" {
            GatewayMode::Remote
        } else {
            GatewayMode::Stub
        };
    }
    if let Some(url) = &g.endpoint {
        cfg.gateway.endpoint_url = url.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn gateway_for(cfg: &PipelineConfig) -> Result<Box<dyn ModelGateway>, CliError> {
    Ok(connect(&cfg.gateway, cfg.fusion.d_vis, cfg.fusion.d_text)?)
}

#[derive(Debug, Clone, Deserialize)]
struct RolloutInput {
    raw_text: String,
    gold_entity: String,
    #[serde(default)]
    image_ref: Option<String>,
    /// Entities in retrieval order, if already known.
    #[serde(default)]
    retrieved_entities: Option<Vec<String>>,
    /// Precomputed hit rank, used when nothing else is available.
    #[serde(default)]
    hit_rank: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct RolloutOutput {
    raw_text: String,
    gold_entity: String,
    well_formed: bool,
    refined_query: Option<String>,
    #[serde(flatten)]
    reward: RewardRecord,
}

fn reward_check(
    cfg: &PipelineConfig,
    rollouts: &Path,
    index: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let inputs: Vec<RolloutInput> = read_jsonl(open(rollouts)?)?;
    let policy = RewardPolicy {
        depth: cfg.reward_depth,
        ..RewardPolicy::default()
    };
    let index = index.map(load_index).transpose()?;
    let gateway = match &index {
        Some(_) => Some(gateway_for(cfg)?),
        None => None,
    };
    let outputs = map_ordered(&inputs, cfg.workers, |r| -> Result<RolloutOutput, CliError> {
        let (parsed, reward) = score_rollout(&r.raw_text, &policy, |refined| {
            if let Some(entities) = &r.retrieved_entities {
                return Ok::<_, CliError>(entity_hit_rank(
                    entities.iter().map(String::as_str),
                    &r.gold_entity,
                    policy.depth,
                ));
            }
            match (&index, &gateway) {
                (Some(index), Some(gw)) => {
                    let text = refined.unwrap_or(&r.raw_text);
                    let img = gw.embed_image(r.image_ref.as_deref().unwrap_or(""))?;
                    let txt = gw.embed_text(text)?;
                    let q = build_query_vector(&img, &txt, &cfg.fusion)?;
                    // over-fetch so `depth` distinct entities are covered
                    let k = (policy.depth * 8).min(index.len());
                    let hits = index.search_topk(&q, k)?;
                    let entities = hits
                        .iter()
                        .filter_map(|c| index.entry(c.entry_id).map(|m| m.entity_id.as_str()));
                    Ok(entity_hit_rank(entities, &r.gold_entity, policy.depth))
                }
                _ => Ok(r.hit_rank),
            }
        })?;
        Ok(RolloutOutput {
            raw_text: r.raw_text.clone(),
            gold_entity: r.gold_entity.clone(),
            well_formed: parsed.well_formed,
            refined_query: parsed.refined_query,
            reward,
        })
    })?;
    emit(out, |w| Ok(write_jsonl(w, &outputs)?))
}

fn grpo_train(cfg: &PipelineConfig, env_path: &Path, steps: Option<usize>, curve: &Path, policy_path: &Path) -> Result<(), CliError> {
    let spec: RewriteEnvSpec = serde_json::from_str(&read_text(env_path)?)
        .map_err(|e| CliError::new("input", format!("{}: {e}", env_path.display())))?;
    let env = RewriteEnvironment::build(spec)?;
    let mut grpo = cfg.grpo.clone();
    if let Some(s) = steps {
        grpo.steps = s;
    }
    let outcome = train_toy_policy(&env, &grpo)?;
    let mut w = create(curve)?;
    writeln!(w, "step,mean_reward,objective,kl")?;
    for p in &outcome.curve {
        writeln!(w, "{},{},{},{}", p.step, p.mean_reward, p.objective, p.kl)?;
    }
    w.flush()?;
    let probs = outcome.policy.sampling_probabilities(grpo.sample_temperature);
    let mut w = create(policy_path)?;
    serde_json::to_writer_pretty(
        &mut w,
        &serde_json::json!({
            "action_names": outcome.policy.action_names,
            "logits": outcome.policy.logits,
            "sampling_probabilities": probs,
            "sample_temperature": grpo.sample_temperature,
        }),
    )?;
    w.flush()?;
    let window = 50.min(outcome.curve.len());
    let mean = |pts: &[crate::grpo::CurvePoint]| {
        pts.iter().map(|p| p.mean_reward).sum::<f64>() / pts.len().max(1) as f64
    };
    summary(serde_json::json!({
        "best_action": outcome.policy.action_names[outcome.policy.argmax()],
        "expected_rewards": env.action_names().into_iter().zip(env.expected_rewards()).collect::<Vec<_>>(),
        "first_window_mean_reward": mean(&outcome.curve[..window]),
        "last_window_mean_reward": mean(&outcome.curve[outcome.curve.len() - window..]),
    }));
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::BuildKb { input, out } => {
            cfg.validate()?;
            let gateway = gateway_for(&cfg)?;
            let built = build_kb_parallel(open(&input)?, &cfg.kb_build, gateway.as_ref(), &cfg.fusion, cfg.workers)?;
            let mut index = VectorIndex::new(cfg.fusion.fused_dim())?;
            let count = index.add_entries(built.entries)?;
            index.seal();
            index.save(&out)?;
            let meta_path = sidecar_path(&out);
            let mut w = create(&meta_path)?;
            write_metadata_jsonl(index.entries(), &mut w)?;
            w.flush()?;
            if !built.diagnostics.is_empty() {
                let mut w = create(&diagnostics_path(&out))?;
                write_jsonl(&mut w, &built.diagnostics)?;
            }
            summary(serde_json::json!({
                "entries": count,
                "skipped": built.diagnostics.len(),
                "index": out.display().to_string(),
                "metadata": meta_path.display().to_string(),
            }));
        }
        Command::Retrieve { index, query, k, alpha, no_refine, timings, out } => {
            if let Some(k) = k {
                cfg.retrieval_k = k;
            }
            if let Some(a) = alpha {
                cfg.fusion.alpha = a;
            }
            if no_refine {
                cfg.refine_queries = false;
            }
            cfg.validate()?;
            let index = load_index(&index)?;
            let gateway = gateway_for(&cfg)?;
            let mut pipeline = Pipeline::new(&cfg, gateway.as_ref(), &index);
            pipeline.timings = timings;
            let queries: Vec<QueryRecord> = read_jsonl(open(&query)?)?;
            let records = map_ordered(&queries, cfg.workers, |q| pipeline.retrieve(q, cfg.retrieval_k))?;
            emit(out.as_deref(), |w| Ok(write_jsonl(w, &records)?))?;
        }
        Command::Rerank { candidates, index, beta1, beta2, out } => {
            if let Some(b) = beta1 {
                cfg.weights.beta1 = b;
            }
            if let Some(b) = beta2 {
                cfg.weights.beta2 = b;
            }
            cfg.validate()?;
            let index = load_index(&index)?;
            let gateway = gateway_for(&cfg)?;
            let pipeline = Pipeline::new(&cfg, gateway.as_ref(), &index);
            let inputs: Vec<CandidateRecord> = read_jsonl(open(&candidates)?)?;
            let records = map_ordered(&inputs, cfg.workers, |c| pipeline.rerank(c))?;
            emit(out.as_deref(), |w| Ok(write_jsonl(w, &records)?))?;
        }
        Command::Answer { contexts, out } => {
            cfg.validate()?;
            let gateway = gateway_for(&cfg)?;
            let empty = VectorIndex::new(cfg.fusion.fused_dim())?;
            let pipeline = Pipeline::new(&cfg, gateway.as_ref(), &empty);
            let inputs: Vec<RerankRecord> = read_jsonl(open(&contexts)?)?;
            let records = map_ordered(&inputs, cfg.workers, |r| Ok::<_, CliError>(pipeline.answer(r)))?;
            emit(out.as_deref(), |w| Ok(write_jsonl(w, &records)?))?;
        }
        Command::Evaluate { records, ks, out, csv } => {
            cfg.validate()?;
            let records: Vec<EvalRecord> = read_jsonl(open(&records)?)?;
            let report = eval::evaluate(&records, &ks)?;
            emit(out.as_deref(), |w| {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                writeln!(w)?;
                Ok(())
            })?;
            if let Some(p) = csv {
                let mut w = create(&p)?;
                w.write_all(eval::report_csv(&report).as_bytes())?;
                w.flush()?;
            }
        }
        Command::RewardCheck { rollouts, index, out } => {
            cfg.validate()?;
            reward_check(&cfg, &rollouts, index.as_deref(), out.as_deref())?;
        }
        Command::GrpoTrainToy { env, steps, curve, policy } => {
            cfg.validate()?;
            grpo_train(&cfg, &env, steps, &curve, &policy)?;
        }
        Command::Sweep { grid, index, queries, out } => {
            cfg.validate()?;
            let grid = eval::parse_grid(&read_text(&grid)?)?;
            let index = load_index(&index)?;
            let gateway = gateway_for(&cfg)?;
            let pipeline = Pipeline::new(&cfg, gateway.as_ref(), &index);
            let queries: Vec<QueryRecord> = read_jsonl(open(&queries)?)?;
            let rows = eval::sweep(&grid, &pipeline, &queries)?;
            let text = eval::sweep_csv(&grid, &rows);
            emit(out.as_deref(), |w| Ok(w.write_all(text.as_bytes())?))?;
        }
        Command::ServeStub { port, host, scenarios, delay_ms } => {
            cfg.validate()?;
            let scenarios: ScenarioTable = match scenarios {
                Some(p) => serde_json::from_str(&read_text(&p)?)
                    .map_err(|e| CliError::new("input", format!("{}: {e}", p.display())))?,
                None => ScenarioTable::default(),
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::new("usage", format!("bad address {host}:{port}: {e}")))?;
            let server_cfg = StubServerConfig {
                seed: cfg.gateway.stub_seed,
                scenarios,
                delay_ms,
                fail_first: 0,
            };
            run_stub_server(addr, server_cfg, |bound| {
                summary(serde_json::json!({ "listening": format!("http://{bound}") }));
            })?;
        }
    }
    Ok(())
}

/// `index.bin` -> `index.bin.meta.jsonl`.
pub fn sidecar_path(index: &Path) -> PathBuf {
    let mut s: OsString = index.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

fn diagnostics_path(index: &Path) -> PathBuf {
    let mut s: OsString = index.as_os_str().to_owned();
    s.push(".diagnostics.jsonl");
    PathBuf::from(s)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let kind = match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => "help",
            _ => "usage",
        };
        CliError::new(kind, e.render().to_string())
    })?;
    execute(cli)
}

/// Process entry point: returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match run(args.clone()) {
        Ok(()) => 0,
        Err(e) if e.kind == "help" => {
            // --help / --version print their normal text
            if let Err(clap_err) = Cli::try_parse_from(args) {
                let _ = clap_err.print();
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            if e.kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}
