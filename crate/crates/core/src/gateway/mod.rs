//! JSON service surface shared by the HTTP server and the command line.
//!
//! [`route_request`] is the whole dispatch table. The HTTP server and the CLI
//! both translate their input into a [`Request`] and hand it to a
//! [`Gateway`], which opens the store afresh for every request.

pub mod cli;
pub mod http;

use std::path::PathBuf;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{ElementSpec, RerunDelta};
use crate::broker::{Broker, BrokerConfig};
use crate::clock::{Clock, IdSource, RandomIds, SeededIds, SystemClock};
use crate::error::{ErrorClass, LedgerError};
use crate::kernel::{DescriptionPayload, Properties};
use crate::ledger::Ledger;
use crate::provenance::{export_prov, export_table, query_events, query_items, Format, ItemKind, Predicate, Viewer};
use crate::store::canonical_json;
use crate::value::{AgentId, ItemId};
use crate::workflow::{Transition, WorkflowDef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
    Put,
    Other,
}

impl Method {
    pub fn parse(s: &str) -> Method {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "PUT" => Method::Put,
            _ => Method::Other,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Request {
    pub method: Method,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub body: String,
}

impl Request {
    pub fn new(method: Method, path: impl Into<String>) -> Self {
        Request { method, path: path.into(), query: Vec::new(), body: String::new() }
    }

    pub fn get(path: impl Into<String>) -> Self {
        Request::new(Method::Get, path)
    }

    pub fn post(path: impl Into<String>, body: impl Into<String>) -> Self {
        Request { body: body.into(), ..Request::new(Method::Post, path) }
    }

    pub fn put(path: impl Into<String>, body: impl Into<String>) -> Self {
        Request { body: body.into(), ..Request::new(Method::Put, path) }
    }

    pub fn with_query(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.query.push((key.into(), value.into()));
        self
    }

    fn param(&self, key: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RequestContext {
    pub agent: Option<AgentId>,
    /// Node recorded as `where` on events; the ledger default when absent.
    pub where_: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

pub const JSON: &str = "application/json";
pub const CSV: &str = "text/csv; charset=utf-8";
pub const XML: &str = "application/xml; charset=utf-8";

impl Response {
    fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Response { status, content_type: JSON, body: canonical_json(value) }
    }

    fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Response::json(status, &ErrorBody { error: code.to_string(), message: message.into() })
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Response::error(400, "BadRequest", message)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub fn status_for(e: &LedgerError) -> u16 {
    match e {
        LedgerError::InvalidPredicate(_) => 400,
        _ => match e.class() {
            ErrorClass::Forbidden => 403,
            ErrorClass::NotFound => 404,
            ErrorClass::Unprocessable => 422,
            ErrorClass::Internal => 500,
        },
    }
}

impl From<LedgerError> for Response {
    fn from(e: LedgerError) -> Self {
        Response::error(status_for(&e), e.code(), e.to_string())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterDescriptionBody {
    name: String,
    #[serde(flatten)]
    payload: DescriptionPayload,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateItemBody {
    description: ItemId,
    #[serde(default)]
    version: Option<u32>,
    #[serde(default)]
    properties: Properties,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionBody {
    activity: String,
    transition: String,
    #[serde(default)]
    outcome: Option<Properties>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MigrateBody {
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetBody {
    #[serde(default)]
    study_metadata: Properties,
    elements: Vec<ElementSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineBody {
    script_location: String,
    #[serde(default)]
    env_settings: Properties,
    #[serde(default)]
    common_dirs: Vec<String>,
    stages: WorkflowDef,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkingDatasetBody {
    dataset: ItemId,
    elements: Vec<ItemId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkingPipelineBody {
    pipeline: ItemId,
    #[serde(default)]
    parameters: Properties,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunBody {
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotateBody {
    text: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ShareBody {
    target: AgentId,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RerunBody {
    #[serde(default)]
    parameters: Option<Properties>,
    #[serde(default)]
    elements: Option<Vec<ItemId>>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct CreatedDescription {
    id: ItemId,
    version: u32,
}

fn body<T: DeserializeOwned>(req: &Request) -> Result<T, Response> {
    serde_json::from_str(&req.body).map_err(|e| Response::bad_request(format!("malformed body: {e}")))
}

/// Like [`body`] but an empty body means the type's default.
fn optional_body<T: DeserializeOwned + Default>(req: &Request) -> Result<T, Response> {
    if req.body.trim().is_empty() {
        Ok(T::default())
    } else {
        body(req)
    }
}

fn id(segment: &str) -> Result<ItemId, Response> {
    segment.parse().map_err(|_| Response::error(404, "NotFound", format!("{segment:?} is not an item id")))
}

fn agent(ctx: &RequestContext) -> Result<&AgentId, Response> {
    ctx.agent.as_ref().ok_or_else(|| Response::bad_request("this request needs an agent (X-Agent header or --agent)"))
}

fn broker_for(ledger: &Ledger, base: &BrokerConfig, seed: Option<u64>) -> Result<Broker, Response> {
    let cfg = BrokerConfig { seed: seed.unwrap_or(base.seed), ..base.clone() };
    Broker::resume(cfg, ledger.next_job_id()).map_err(Response::from)
}

fn table_response(req: &Request, table: crate::provenance::ResultTable) -> Result<Response, Response> {
    let format: Format = req.param("format").unwrap_or("json").parse().map_err(Response::bad_request)?;
    let content_type = match format {
        Format::Json => JSON,
        Format::Csv => CSV,
        Format::Xml => XML,
    };
    Ok(Response { status: 200, content_type, body: export_table(&table, format) })
}

fn predicates(req: &Request) -> Result<Vec<Predicate>, Response> {
    req.query.iter().filter(|(k, _)| k == "q").map(|(_, v)| Predicate::parse(v).map_err(Response::from)).collect()
}

/// Dispatches one request against `ledger`.
pub fn route_request(ledger: &mut Ledger, broker: &BrokerConfig, req: &Request, ctx: &RequestContext) -> Response {
    if let Some(w) = &ctx.where_ {
        ledger.set_node(w.clone());
    }
    match dispatch(ledger, broker, req, ctx) {
        Ok(r) | Err(r) => r,
    }
}

fn dispatch(ledger: &mut Ledger, broker: &BrokerConfig, req: &Request, ctx: &RequestContext) -> Result<Response, Response> {
    use Method::*;
    let segments: Vec<&str> = req.path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
    let ok = |v: &dyn erased::Json| Response { status: 200, content_type: JSON, body: v.canonical() };
    let created = |v: &dyn erased::Json| Response { status: 201, content_type: JSON, body: v.canonical() };
    let res = match (req.method, segments.as_slice()) {
        (Post, ["descriptions"]) => {
            let b: RegisterDescriptionBody = body(req)?;
            let (id, version) = ledger.register_description(&b.name, b.payload, agent(ctx)?)?;
            created(&CreatedDescription { id, version })
        }
        (Get, ["descriptions", d]) => ok(ledger.state().description(id(d)?)?),
        (Post, ["descriptions", d, "versions"]) => {
            let payload: DescriptionPayload = body(req)?;
            let desc = id(d)?;
            let version = ledger.add_description_version(desc, payload, agent(ctx)?)?;
            created(&CreatedDescription { id: desc, version })
        }
        (Post, ["items"]) => {
            let b: CreateItemBody = body(req)?;
            let who = agent(ctx)?;
            let version = match b.version {
                Some(v) => v,
                None => ledger.state().description(b.description)?.latest(),
            };
            let node = ledger.node().to_string();
            created(&ledger.instantiate_item(b.description, version, &b.properties, who, &node)?)
        }
        (Get, ["items", i]) => ok(ledger.item(id(i)?)?),
        (Get, ["items", i, "events"]) => ok(&ledger.item_history(id(i)?)?),
        (Post, ["items", i, "transitions"]) => {
            let b: TransitionBody = body(req)?;
            let t: Transition = b.transition.parse().map_err(|_| {
                Response::bad_request(format!("unknown transition {:?} (expected Start, Complete, Fail or Retry)", b.transition))
            })?;
            let who = agent(ctx)?;
            let node = ledger.node().to_string();
            let (item, event) = ledger.transition_item(id(i)?, &b.activity, t, b.outcome.as_ref(), who, &node)?;
            ok(&serde_json::json!({ "item": item, "event": event }))
        }
        (Post, ["items", i, "migrate"]) => {
            let b: MigrateBody = body(req)?;
            ok(&ledger.migrate_item(id(i)?, b.version, agent(ctx)?)?)
        }
        (Post, ["datasets"]) => {
            let b: DatasetBody = body(req)?;
            created(&ledger.register_dataset(b.study_metadata, b.elements, agent(ctx)?)?)
        }
        (Post, ["pipelines"]) => {
            let b: PipelineBody = body(req)?;
            created(&ledger.register_pipeline(&b.script_location, b.env_settings, b.common_dirs, b.stages, agent(ctx)?)?)
        }
        (Post, ["analyses"]) => created(&ledger.define_analysis(agent(ctx)?)?),
        (Get, ["analyses"]) => match &ctx.agent {
            Some(a) => ok(&ledger.list_analyses(a)),
            None => ok(&Vec::<()>::new()),
        },
        (Get, ["analyses", a]) => {
            let a = id(a)?;
            match &ctx.agent {
                Some(who) => ok(&ledger.analysis_view(a, who)?),
                None => {
                    ledger.state().analysis(a)?;
                    return Err(LedgerError::NotVisible { analysis: a, agent: "anonymous".into() }.into());
                }
            }
        }
        (Put, ["analyses", a, "dataset"]) => {
            let b: WorkingDatasetBody = body(req)?;
            ok(&ledger.set_working_dataset(id(a)?, b.dataset, &b.elements, agent(ctx)?)?)
        }
        (Put, ["analyses", a, "pipeline"]) => {
            let b: WorkingPipelineBody = body(req)?;
            ok(&ledger.set_working_pipeline(id(a)?, b.pipeline, b.parameters, agent(ctx)?)?)
        }
        (Post, ["analyses", a, "run"]) => {
            let b: RunBody = optional_body(req)?;
            let who = agent(ctx)?;
            let mut broker = broker_for(ledger, broker, b.seed)?;
            ok(&ledger.run_analysis(id(a)?, who, &mut broker)?)
        }
        (Post, ["analyses", a, "consolidate"]) => ok(&ledger.consolidate(id(a)?, agent(ctx)?)?),
        (Post, ["analyses", a, "annotations"]) => {
            let b: AnnotateBody = body(req)?;
            created(&ledger.annotate(id(a)?, &b.text, agent(ctx)?)?)
        }
        (Post, ["analyses", a, "share"]) => {
            let b: ShareBody = body(req)?;
            ok(&ledger.share_analysis(id(a)?, &b.target, agent(ctx)?)?)
        }
        (Post, ["analyses", a, "rerun"]) => {
            let b: RerunBody = optional_body(req)?;
            let who = agent(ctx)?;
            let mut broker = broker_for(ledger, broker, b.seed)?;
            let delta = RerunDelta { parameters: b.parameters, elements: b.elements };
            created(&ledger.rerun_analysis(id(a)?, &delta, who, &mut broker)?)
        }
        (Get, ["query", "items"]) => {
            let kind: ItemKind = req.param("kind").unwrap_or("all").parse().map_err(Response::from)?;
            let preds = predicates(req)?;
            let viewer = Viewer::from_agent(ctx.agent.as_ref());
            return table_response(req, query_items(ledger.state(), kind, &preds, &viewer)?);
        }
        (Get, ["query", "events"]) => {
            let preds = predicates(req)?;
            return table_response(req, query_events(ledger.state(), &preds)?);
        }
        (Get, ["prov", a]) => {
            let viewer = Viewer::from_agent(ctx.agent.as_ref());
            ok(&export_prov(ledger.state(), id(a)?, &viewer)?)
        }
        (Other, _) => Response::error(405, "MethodNotAllowed", "unsupported method"),
        _ => Response::error(404, "NoRoute", format!("no route for {}", req.path)),
    };
    Ok(res)
}

mod erased {
    use serde::Serialize;

    /// Lets the dispatch table build responses from any serializable value.
    pub trait Json {
        fn canonical(&self) -> String;
    }

    impl<T: Serialize> Json for T {
        fn canonical(&self) -> String {
            crate::store::canonical_json(self)
        }
    }
}

/// A store location plus the fixed settings every request runs with.
/// Holds no state between requests: each one replays the log.
pub struct Gateway {
    pub store: PathBuf,
    pub broker: BrokerConfig,
    pub clock: Arc<dyn Clock>,
    /// Seed for reproducible identifiers; random ids when absent.
    pub id_seed: Option<u64>,
}

impl Gateway {
    pub fn new(store: impl Into<PathBuf>) -> Self {
        Gateway { store: store.into(), broker: BrokerConfig::default(), clock: Arc::new(SystemClock), id_seed: None }
    }

    pub fn handle(&self, req: &Request, ctx: &RequestContext) -> Response {
        let ledger = match Ledger::open(&self.store) {
            Ok(l) => l,
            Err(e) => return e.into(),
        };
        let ids: Box<dyn IdSource> = match self.id_seed {
            Some(seed) => Box::new(SeededIds::new(seed)),
            None => Box::new(RandomIds),
        };
        let mut ledger = ledger.with_clock(self.clock.clone()).with_ids(ids);
        route_request(&mut ledger, &self.broker, req, ctx)
    }
}
