//! Python bindings. Values cross the boundary as JSON: dicts and lists go
//! in, dicts and lists come out. Every call goes through the same request
//! router the CLI and HTTP service use.

use std::sync::Arc;

use itemledger::gateway::{route_request, ErrorBody, Method, Request, RequestContext};
use itemledger::{AgentId, BrokerConfig, Ledger as CoreLedger, SeededIds, SteppingClock, Timestamp};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde_json::json;

create_exception!(pyitemledger, LedgerError, PyException, "A rejected ledger operation; args are (code, message, status).");

fn to_json(obj: Option<&Bound<'_, PyAny>>) -> PyResult<String> {
    let Some(obj) = obj else { return Ok(String::new()) };
    if obj.is_none() {
        return Ok("null".into());
    }
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.to_string());
    }
    let json = obj.py().import("json")?;
    json.call_method1("dumps", (obj,))?.extract()
}

fn value(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    serde_json::from_str(&to_json(Some(obj))?).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn agent(name: Option<&str>) -> PyResult<Option<AgentId>> {
    name.map(|n| AgentId::new(n).map_err(|_| PyValueError::new_err("agent must be non-empty"))).transpose()
}

/// An event log, in memory or backed by a file.
#[pyclass(unsendable, module = "pyitemledger")]
struct Ledger {
    inner: CoreLedger,
    broker: BrokerConfig,
}

impl Ledger {
    fn call<'py>(
        &mut self,
        py: Python<'py>,
        method: Method,
        path: String,
        body: String,
        who: Option<&str>,
        query: Vec<(String, String)>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let req = Request { method, path, query, body };
        let ctx = RequestContext { agent: agent(who)?, where_: None };
        let res = route_request(&mut self.inner, &self.broker, &req, &ctx);
        if res.is_success() {
            return if res.content_type == itemledger::gateway::JSON {
                from_json(py, &res.body)
            } else {
                Ok(PyString::new(py, &res.body).into_any())
            };
        }
        let err: ErrorBody = serde_json::from_str(&res.body)
            .unwrap_or(ErrorBody { error: "Error".into(), message: res.body.clone() });
        Err(LedgerError::new_err((err.error, err.message, res.status)))
    }
}

#[pymethods]
impl Ledger {
    /// `path` opens (or creates) a log file; without it the log lives in
    /// memory. `id_seed` and `clock_start_ms` make runs reproducible.
    #[new]
    #[pyo3(signature = (path=None, *, id_seed=None, clock_start_ms=None, broker_seed=42, failure_rate=0.0))]
    fn new(path: Option<&str>, id_seed: Option<u64>, clock_start_ms: Option<i64>, broker_seed: u64, failure_rate: f64) -> PyResult<Self> {
        let mut inner = match path {
            Some(p) => CoreLedger::open(p).map_err(|e| LedgerError::new_err((e.code(), e.to_string(), 500u16)))?,
            None => CoreLedger::in_memory(),
        };
        if let Some(seed) = id_seed {
            inner = inner.with_ids(Box::new(SeededIds::new(seed)));
        }
        if let Some(start) = clock_start_ms {
            inner = inner.with_clock(Arc::new(SteppingClock::new(Timestamp::from_millis(start), 1_000)));
        }
        let broker = BrokerConfig { seed: broker_seed, failure_rate, ..BrokerConfig::default() };
        broker.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Ledger { inner, broker })
    }

    fn __len__(&self) -> usize {
        self.inner.events().len()
    }

    /// Canonical JSON of the current state.
    fn snapshot(&self) -> String {
        self.inner.snapshot()
    }

    /// Raw access to the request router: returns the decoded body.
    #[pyo3(signature = (method, path, body=None, agent=None, query=None))]
    fn request<'py>(
        &mut self,
        py: Python<'py>,
        method: &str,
        path: String,
        body: Option<&Bound<'py, PyAny>>,
        agent: Option<&str>,
        query: Option<Vec<(String, String)>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::parse(method), path, to_json(body)?, agent, query.unwrap_or_default())
    }

    /// Registers a description from {property_schema, workflow, outcome_schemas}.
    fn register_description<'py>(&mut self, py: Python<'py>, name: &str, payload: &Bound<'py, PyAny>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        let mut body = value(payload)?;
        body.as_object_mut().ok_or_else(|| PyValueError::new_err("payload must be a dict"))?.insert("name".into(), name.into());
        self.call(py, Method::Post, "/descriptions".into(), body.to_string(), Some(agent), vec![])
    }

    fn add_description_version<'py>(&mut self, py: Python<'py>, id: &str, payload: &Bound<'py, PyAny>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Post, format!("/descriptions/{id}/versions"), to_json(Some(payload))?, Some(agent), vec![])
    }

    #[pyo3(signature = (description, properties, agent, version=None))]
    fn create_item<'py>(
        &mut self,
        py: Python<'py>,
        description: &str,
        properties: &Bound<'py, PyAny>,
        agent: &str,
        version: Option<u32>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let body = json!({ "description": description, "version": version, "properties": value(properties)? });
        self.call(py, Method::Post, "/items".into(), body.to_string(), Some(agent), vec![])
    }

    #[pyo3(signature = (item, activity, transition, agent, outcome=None))]
    fn transition<'py>(
        &mut self,
        py: Python<'py>,
        item: &str,
        activity: &str,
        transition: &str,
        agent: &str,
        outcome: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let outcome = outcome.map(value).transpose()?;
        let body = json!({ "activity": activity, "transition": transition, "outcome": outcome });
        self.call(py, Method::Post, format!("/items/{item}/transitions"), body.to_string(), Some(agent), vec![])
    }

    fn history<'py>(&mut self, py: Python<'py>, item: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Get, format!("/items/{item}/events"), String::new(), None, vec![])
    }

    /// `body` is {study_metadata, elements: [{files: [{path, hash}], metadata}]}.
    fn register_dataset<'py>(&mut self, py: Python<'py>, body: &Bound<'py, PyAny>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Post, "/datasets".into(), to_json(Some(body))?, Some(agent), vec![])
    }

    /// `body` is {script_location, env_settings, common_dirs, stages}.
    fn register_pipeline<'py>(&mut self, py: Python<'py>, body: &Bound<'py, PyAny>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Post, "/pipelines".into(), to_json(Some(body))?, Some(agent), vec![])
    }

    fn define_analysis<'py>(&mut self, py: Python<'py>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Post, "/analyses".into(), String::new(), Some(agent), vec![])
    }

    fn set_dataset<'py>(&mut self, py: Python<'py>, analysis: &str, dataset: &str, elements: Vec<String>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        let body = json!({ "dataset": dataset, "elements": elements });
        self.call(py, Method::Put, format!("/analyses/{analysis}/dataset"), body.to_string(), Some(agent), vec![])
    }

    #[pyo3(signature = (analysis, pipeline, agent, parameters=None))]
    fn set_pipeline<'py>(
        &mut self,
        py: Python<'py>,
        analysis: &str,
        pipeline: &str,
        agent: &str,
        parameters: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let params = parameters.map(value).transpose()?.unwrap_or_else(|| json!({}));
        let body = json!({ "pipeline": pipeline, "parameters": params });
        self.call(py, Method::Put, format!("/analyses/{analysis}/pipeline"), body.to_string(), Some(agent), vec![])
    }

    fn run<'py>(&mut self, py: Python<'py>, analysis: &str, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Post, format!("/analyses/{analysis}/run"), "{}".into(), Some(agent), vec![])
    }

    fn consolidate<'py>(&mut self, py: Python<'py>, analysis: &str, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Post, format!("/analyses/{analysis}/consolidate"), String::new(), Some(agent), vec![])
    }

    fn annotate<'py>(&mut self, py: Python<'py>, analysis: &str, text: &str, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        let body = json!({ "text": text });
        self.call(py, Method::Post, format!("/analyses/{analysis}/annotations"), body.to_string(), Some(agent), vec![])
    }

    fn share<'py>(&mut self, py: Python<'py>, analysis: &str, target: &str, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        let body = json!({ "target": target });
        self.call(py, Method::Post, format!("/analyses/{analysis}/share"), body.to_string(), Some(agent), vec![])
    }

    /// `delta` may hold `parameters` and `elements`.
    #[pyo3(signature = (analysis, agent, delta=None))]
    fn rerun<'py>(&mut self, py: Python<'py>, analysis: &str, agent: &str, delta: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
        let body = delta.map(|d| to_json(Some(d))).transpose()?.unwrap_or_else(|| "{}".into());
        self.call(py, Method::Post, format!("/analyses/{analysis}/rerun"), body, Some(agent), vec![])
    }

    fn analysis<'py>(&mut self, py: Python<'py>, analysis: &str, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Get, format!("/analyses/{analysis}"), String::new(), Some(agent), vec![])
    }

    fn analyses<'py>(&mut self, py: Python<'py>, agent: &str) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Get, "/analyses".into(), String::new(), Some(agent), vec![])
    }

    /// Filters are `field:op:value` strings. json format returns a dict with
    /// columns and rows; csv and xml return text.
    #[pyo3(signature = (kind="all", filters=vec![], format="json", agent=None))]
    fn query_items<'py>(&mut self, py: Python<'py>, kind: &str, filters: Vec<String>, format: &str, agent: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let mut q = vec![("kind".to_string(), kind.to_string()), ("format".to_string(), format.to_string())];
        q.extend(filters.into_iter().map(|f| ("q".to_string(), f)));
        self.call(py, Method::Get, "/query/items".into(), String::new(), agent, q)
    }

    #[pyo3(signature = (filters=vec![], format="json"))]
    fn query_events<'py>(&mut self, py: Python<'py>, filters: Vec<String>, format: &str) -> PyResult<Bound<'py, PyAny>> {
        let mut q = vec![("format".to_string(), format.to_string())];
        q.extend(filters.into_iter().map(|f| ("q".to_string(), f)));
        self.call(py, Method::Get, "/query/events".into(), String::new(), None, q)
    }

    #[pyo3(signature = (analysis, agent=None))]
    fn prov<'py>(&mut self, py: Python<'py>, analysis: &str, agent: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Method::Get, format!("/prov/{analysis}"), String::new(), agent, vec![])
    }
}

#[pymodule]
fn pyitemledger(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Ledger>()?;
    m.add("LedgerError", m.py().get_type::<LedgerError>())?;
    Ok(())
}
