//! Command-line front end. Each subcommand becomes one gateway request, so
//! the CLI and the HTTP service always agree on effects.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value as Json};

use super::{Gateway, Request, RequestContext, Response};
use crate::broker::BrokerConfig;
use crate::clock::{Clock, SystemClock};
use crate::value::AgentId;

pub const STORE_ENV: &str = "ITEMLEDGER_STORE";
pub const DEFAULT_STORE: &str = "itemledger.log";

#[derive(Parser, Debug)]
#[command(name = "itemledger", version, about = "Description-driven provenance and workflow ledger")]
struct Cli {
    /// Event log path [env: ITEMLEDGER_STORE] [default: itemledger.log]
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Acting agent
    #[arg(long, global = true)]
    agent: Option<String>,
    /// Broker seed for run and rerun
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Node name recorded on events
    #[arg(long = "where", global = true)]
    where_: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Item descriptions
    #[command(subcommand)]
    Desc(DescCmd),
    /// Items instantiated from descriptions
    #[command(subcommand)]
    Item(ItemCmd),
    /// Datasets of data elements
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Pipelines of atomic stages
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Define, run, consolidate and share analyses
    #[command(subcommand)]
    Analysis(AnalysisCmd),
    /// Filter items or events as json, csv or xml
    #[command(subcommand)]
    Query(QueryCmd),
    /// Provenance graph of an analysis
    #[command(subcommand)]
    Prov(ProvCmd),
    /// Serve the HTTP API
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Subcommand, Debug)]
enum DescCmd {
    /// Register a description; the payload holds property_schema, workflow and outcome_schemas
    Register {
        #[arg(long)]
        name: String,
        /// JSON, or @path to read it from a file
        #[arg(long)]
        payload: String,
    },
    /// Append a version to a description
    Version {
        id: String,
        #[arg(long)]
        payload: String,
    },
    Show {
        id: String,
    },
}

#[derive(Subcommand, Debug)]
enum ItemCmd {
    Create {
        #[arg(long)]
        description: String,
        /// Defaults to the latest version
        #[arg(long)]
        version: Option<u32>,
        #[arg(long, default_value = "{}")]
        properties: String,
    },
    Show {
        id: String,
    },
    History {
        id: String,
    },
    Transition {
        id: String,
        #[arg(long)]
        activity: String,
        /// Start, Complete, Fail or Retry
        #[arg(long)]
        transition: String,
        #[arg(long)]
        outcome: Option<String>,
    },
    Migrate {
        id: String,
        #[arg(long)]
        version: u32,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    Register {
        /// JSON list of {id?, files: [{path, hash}], metadata?}
        #[arg(long)]
        elements: String,
        #[arg(long, default_value = "{}")]
        metadata: String,
    },
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    Register {
        #[arg(long)]
        script: String,
        /// Workflow definition JSON
        #[arg(long)]
        stages: String,
        #[arg(long, default_value = "{}")]
        env: String,
        #[arg(long = "common-dir")]
        common_dirs: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct AnalysisId {
    id: String,
}

#[derive(Subcommand, Debug)]
enum AnalysisCmd {
    Define,
    /// Select the working dataset
    Dataset {
        id: String,
        #[arg(long)]
        dataset: String,
        #[arg(long, value_delimiter = ',', required = true)]
        elements: Vec<String>,
    },
    /// Select the working pipeline
    Pipeline {
        id: String,
        #[arg(long)]
        pipeline: String,
        #[arg(long, default_value = "{}")]
        params: String,
    },
    Run(AnalysisId),
    Status(AnalysisId),
    Consolidate(AnalysisId),
    Annotate {
        id: String,
        #[arg(long)]
        text: String,
    },
    Share {
        id: String,
        #[arg(long = "with")]
        target: String,
    },
    Rerun {
        id: String,
        #[arg(long)]
        params: Option<String>,
        #[arg(long, value_delimiter = ',')]
        elements: Option<Vec<String>>,
    },
    List,
}

#[derive(Args, Debug)]
struct QueryOpts {
    /// Predicate field:op:value (repeatable; all must hold)
    #[arg(long = "filter", short = 'f')]
    filters: Vec<String>,
    #[arg(long, default_value = "json", value_parser = ["json", "csv", "xml"])]
    format: String,
}

#[derive(Subcommand, Debug)]
enum QueryCmd {
    Items {
        /// all, item, dataset, pipeline or analysis
        #[arg(long, default_value = "all")]
        kind: String,
        #[command(flatten)]
        opts: QueryOpts,
    },
    Events {
        #[command(flatten)]
        opts: QueryOpts,
    },
}

#[derive(Subcommand, Debug)]
enum ProvCmd {
    Export { id: String },
}

/// What the process environment contributes.
pub struct CliEnv {
    /// Value of ITEMLEDGER_STORE, if set.
    pub store: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub id_seed: Option<u64>,
    pub broker: BrokerConfig,
}

impl Default for CliEnv {
    fn default() -> Self {
        CliEnv { store: None, clock: Arc::new(SystemClock), id_seed: None, broker: BrokerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CliOutput {
    fn usage(msg: impl Into<String>) -> Self {
        CliOutput { code: 2, stdout: String::new(), stderr: msg.into() }
    }
}

fn json_arg(raw: &str) -> Result<Json, String> {
    let text = match raw.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?,
        None => raw.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| format!("invalid JSON argument: {e}"))
}

fn with_seed(mut body: Json, seed: Option<u64>) -> Json {
    if let (Some(s), Some(map)) = (seed, body.as_object_mut()) {
        map.insert("seed".into(), json!(s));
    }
    body
}

fn build_request(cmd: Command, seed: Option<u64>) -> Result<Request, String> {
    let post = |path: String, body: Json| Request::post(path, body.to_string());
    let put = |path: String, body: Json| Request::put(path, body.to_string());
    let query = |req: Request, opts: QueryOpts| {
        opts.filters.into_iter().fold(req, |r, f| r.with_query("q", f)).with_query("format", opts.format)
    };
    Ok(match cmd {
        Command::Desc(DescCmd::Register { name, payload }) => {
            let mut body = json_arg(&payload)?;
            body.as_object_mut().ok_or("payload must be a JSON object")?.insert("name".into(), json!(name));
            post("/descriptions".into(), body)
        }
        Command::Desc(DescCmd::Version { id, payload }) => post(format!("/descriptions/{id}/versions"), json_arg(&payload)?),
        Command::Desc(DescCmd::Show { id }) => Request::get(format!("/descriptions/{id}")),
        Command::Item(ItemCmd::Create { description, version, properties }) => post(
            "/items".into(),
            json!({ "description": description, "version": version, "properties": json_arg(&properties)? }),
        ),
        Command::Item(ItemCmd::Show { id }) => Request::get(format!("/items/{id}")),
        Command::Item(ItemCmd::History { id }) => Request::get(format!("/items/{id}/events")),
        Command::Item(ItemCmd::Transition { id, activity, transition, outcome }) => {
            let outcome = outcome.map(|o| json_arg(&o)).transpose()?;
            post(format!("/items/{id}/transitions"), json!({ "activity": activity, "transition": transition, "outcome": outcome }))
        }
        Command::Item(ItemCmd::Migrate { id, version }) => post(format!("/items/{id}/migrate"), json!({ "version": version })),
        Command::Dataset(DatasetCmd::Register { elements, metadata }) => {
            post("/datasets".into(), json!({ "study_metadata": json_arg(&metadata)?, "elements": json_arg(&elements)? }))
        }
        Command::Pipeline(PipelineCmd::Register { script, stages, env, common_dirs }) => post(
            "/pipelines".into(),
            json!({
                "script_location": script,
                "env_settings": json_arg(&env)?,
                "common_dirs": common_dirs,
                "stages": json_arg(&stages)?,
            }),
        ),
        Command::Analysis(cmd) => match cmd {
            AnalysisCmd::Define => Request::post("/analyses", ""),
            AnalysisCmd::Dataset { id, dataset, elements } => {
                put(format!("/analyses/{id}/dataset"), json!({ "dataset": dataset, "elements": elements }))
            }
            AnalysisCmd::Pipeline { id, pipeline, params } => {
                put(format!("/analyses/{id}/pipeline"), json!({ "pipeline": pipeline, "parameters": json_arg(&params)? }))
            }
            AnalysisCmd::Run(a) => post(format!("/analyses/{}/run", a.id), with_seed(json!({}), seed)),
            AnalysisCmd::Status(a) => Request::get(format!("/analyses/{}", a.id)),
            AnalysisCmd::Consolidate(a) => Request::post(format!("/analyses/{}/consolidate", a.id), ""),
            AnalysisCmd::Annotate { id, text } => post(format!("/analyses/{id}/annotations"), json!({ "text": text })),
            AnalysisCmd::Share { id, target } => post(format!("/analyses/{id}/share"), json!({ "target": target })),
            AnalysisCmd::Rerun { id, params, elements } => {
                let mut body = json!({});
                if let Some(p) = params {
                    body["parameters"] = json_arg(&p)?;
                }
                if let Some(e) = elements {
                    body["elements"] = json!(e);
                }
                post(format!("/analyses/{id}/rerun"), with_seed(body, seed))
            }
            AnalysisCmd::List => Request::get("/analyses"),
        },
        Command::Query(QueryCmd::Items { kind, opts }) => query(Request::get("/query/items").with_query("kind", kind), opts),
        Command::Query(QueryCmd::Events { opts }) => query(Request::get("/query/events"), opts),
        Command::Prov(ProvCmd::Export { id }) => Request::get(format!("/prov/{id}")),
        Command::Serve { .. } => unreachable!("handled before request building"),
    })
}

/// Runs one CLI invocation. `args` includes the program name.
pub fn run<I, S>(args: I, env: &CliEnv) -> CliOutput
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            return if code == 0 {
                CliOutput { code, stdout: text, stderr: String::new() }
            } else {
                CliOutput::usage(text)
            };
        }
    };
    let store = cli.store.clone().or_else(|| env.store.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE));
    let agent = match cli.agent.as_deref().map(AgentId::new).transpose() {
        Ok(a) => a,
        Err(_) => return CliOutput::usage("--agent must be non-empty"),
    };
    let gateway = Gateway {
        store,
        broker: BrokerConfig { seed: cli.seed.unwrap_or(env.broker.seed), ..env.broker.clone() },
        clock: env.clock.clone(),
        id_seed: env.id_seed,
    };
    if let Command::Serve { addr } = cli.command {
        let rt = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => return CliOutput { code: 1, stdout: String::new(), stderr: e.to_string() },
        };
        return match rt.block_on(super::http::serve(gateway, addr, cli.where_)) {
            Ok(()) => CliOutput { code: 0, stdout: String::new(), stderr: String::new() },
            Err(e) => CliOutput { code: 1, stdout: String::new(), stderr: format!("serve: {e}") },
        };
    }
    let req = match build_request(cli.command, cli.seed) {
        Ok(r) => r,
        Err(e) => return CliOutput::usage(e),
    };
    let ctx = RequestContext { agent, where_: cli.where_ };
    to_output(gateway.handle(&req, &ctx))
}

fn to_output(res: Response) -> CliOutput {
    if res.is_success() {
        let mut stdout = res.body;
        if !stdout.ends_with('\n') {
            stdout.push('\n');
        }
        return CliOutput { code: 0, stdout, stderr: String::new() };
    }
    let (code, message) = match serde_json::from_str::<super::ErrorBody>(&res.body) {
        Ok(e) => (e.error, e.message),
        Err(_) => ("Error".into(), res.body),
    };
    // Malformed input is the caller's mistake; everything else is a domain error.
    let exit = if res.status == 400 { 2 } else { 1 };
    CliOutput { code: exit, stdout: String::new(), stderr: format!("error: {code}: {message}\n") }
}
