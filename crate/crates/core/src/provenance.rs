//! Querying and export over the analysis base.
//!
//! Queries are conjunctions of `field op literal` predicates. Each queryable
//! row is a flat record of typed values; tables render those values as text,
//! with an empty string for a field a row does not carry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{ResultState, ANALYSIS_DESCRIPTION, DATASET_DESCRIPTION, PIPELINE_DESCRIPTION};
use crate::error::{LedgerError, Result};
use crate::kernel::{Event, Item};
use crate::ledger::State;
use crate::store::canonical_json;
use crate::value::{AgentId, ItemId, Value, ValueKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Eq,
    Neq,
    Lt,
    Lte,
    Gt,
    Gte,
    Contains,
}

impl Op {
    pub const ALL: [Op; 7] = [Op::Eq, Op::Neq, Op::Lt, Op::Lte, Op::Gt, Op::Gte, Op::Contains];

    pub fn name(self) -> &'static str {
        match self {
            Op::Eq => "eq",
            Op::Neq => "neq",
            Op::Lt => "lt",
            Op::Lte => "lte",
            Op::Gt => "gt",
            Op::Gte => "gte",
            Op::Contains => "contains",
        }
    }

    pub fn is_ordering(self) -> bool {
        matches!(self, Op::Lt | Op::Lte | Op::Gt | Op::Gte)
    }
}

impl FromStr for Op {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Op> {
        Op::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| LedgerError::InvalidPredicate(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub field: String,
    pub op: Op,
    pub value: Value,
}

impl Predicate {
    pub fn new(field: impl Into<String>, op: Op, value: impl Into<Value>) -> Self {
        Predicate { field: field.into(), op, value: value.into() }
    }

    /// Parses `field:op:literal`. The literal is everything after the second
    /// colon, so it may itself contain colons (timestamps).
    pub fn parse(s: &str) -> Result<Predicate> {
        let mut parts = s.splitn(3, ':');
        let (Some(field), Some(op), Some(raw)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(LedgerError::InvalidPredicate(s.into()));
        };
        if field.is_empty() {
            return Err(LedgerError::InvalidPredicate(s.into()));
        }
        let op = op.parse().map_err(|_| LedgerError::InvalidPredicate(s.into()))?;
        Ok(Predicate { field: field.into(), op, value: Value::infer(raw) })
    }

    /// Whether a cell of kind `cell` can be tested with this predicate.
    pub fn compatible_with(&self, cell: ValueKind) -> bool {
        let lit = self.value.kind();
        match self.op {
            Op::Eq | Op::Neq => {
                lit == cell || (lit.is_numeric() && cell.is_numeric()) || (lit.is_textual() && cell.is_textual())
            }
            Op::Contains => lit.is_textual() && cell.is_textual(),
            _ => (lit.is_numeric() && cell.is_numeric()) || (lit == ValueKind::Timestamp && cell == ValueKind::Timestamp),
        }
    }

    /// Evaluates against a cell already known to be compatible.
    pub fn matches(&self, cell: &Value) -> bool {
        use std::cmp::Ordering::*;
        if self.op == Op::Contains {
            return cell.render().contains(&self.value.render());
        }
        let Some(ord) = cell.compare(&self.value) else { return false };
        match self.op {
            Op::Eq => ord == Equal,
            Op::Neq => ord != Equal,
            Op::Lt => ord == Less,
            Op::Lte => ord != Greater,
            Op::Gt => ord == Greater,
            Op::Gte => ord != Less,
            Op::Contains => unreachable!(),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.field, self.op.name(), self.value.render())
    }
}

/// One queryable row.
pub type Record = BTreeMap<String, Value>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    All,
    Item,
    Dataset,
    Pipeline,
    Analysis,
}

impl ItemKind {
    pub fn name(self) -> &'static str {
        match self {
            ItemKind::All => "all",
            ItemKind::Item => "item",
            ItemKind::Dataset => "dataset",
            ItemKind::Pipeline => "pipeline",
            ItemKind::Analysis => "analysis",
        }
    }

    pub fn of(item: &Item) -> ItemKind {
        match item.description_id {
            d if d == DATASET_DESCRIPTION => ItemKind::Dataset,
            d if d == PIPELINE_DESCRIPTION => ItemKind::Pipeline,
            d if d == ANALYSIS_DESCRIPTION => ItemKind::Analysis,
            _ => ItemKind::Item,
        }
    }

    fn admits(self, kind: ItemKind) -> bool {
        self == ItemKind::All || self == kind
    }
}

impl FromStr for ItemKind {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<ItemKind> {
        [ItemKind::All, ItemKind::Item, ItemKind::Dataset, ItemKind::Pipeline, ItemKind::Analysis]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LedgerError::InvalidPredicate(format!("unknown item kind {s:?}")))
    }
}

/// Who is asking; analyses are only listed to their owner and sharees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Viewer {
    System,
    Agent(AgentId),
    Anonymous,
}

impl Viewer {
    pub fn from_agent(agent: Option<&AgentId>) -> Viewer {
        agent.map_or(Viewer::Anonymous, |a| Viewer::Agent(a.clone()))
    }

    fn sees(&self, state: &State, item: &Item) -> bool {
        let Some(a) = state.analyses.get(&item.id) else { return true };
        match self {
            Viewer::System => true,
            Viewer::Agent(agent) => a.visible_to(agent),
            Viewer::Anonymous => false,
        }
    }
}

pub const ITEM_COLUMNS: [&str; 8] =
    ["id", "kind", "description", "description_name", "version", "created_seq", "created_by", "created_at"];
pub const EVENT_COLUMNS: [&str; 8] = ["seq", "who", "which", "what", "when", "where", "why", "how"];

fn item_record(state: &State, item: &Item) -> Record {
    let kind = ItemKind::of(item);
    let mut r = Record::new();
    for (k, v) in &item.properties {
        r.insert(k.clone(), v.clone());
    }
    match kind {
        ItemKind::Dataset => {
            if let Some(d) = state.datasets.get(&item.id) {
                for (k, v) in &d.study_metadata {
                    r.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
        }
        ItemKind::Pipeline => {
            if let Some(p) = state.pipelines.get(&item.id) {
                for (k, v) in &p.env_settings {
                    r.insert(format!("env.{k}"), v.clone());
                }
            }
        }
        ItemKind::Analysis => {
            if let Some(a) = state.analyses.get(&item.id) {
                r.insert("phase".into(), Value::text(a.phase.name()));
                if let Some(ws) = &a.working_dataset {
                    r.insert("dataset".into(), Value::Reference(ws.dataset));
                    r.insert("selected".into(), Value::Integer(ws.elements.len() as i64));
                }
                if let Some(p) = a.working_pipeline {
                    r.insert("pipeline".into(), Value::Reference(p));
                }
                if let Some(src) = a.derived_from {
                    r.insert("derived_from".into(), Value::Reference(src));
                }
                r.insert("element_count".into(), Value::Integer(a.elements.len() as i64));
                for (name, s) in [("succeeded", ResultState::Succeeded), ("failed", ResultState::Failed)] {
                    let n = a.elements.iter().filter(|e| e.result_state == s).count();
                    r.insert(name.into(), Value::Integer(n as i64));
                }
            }
        }
        ItemKind::Item | ItemKind::All => {}
    }
    let desc_name = state.descriptions.get(&item.description_id).map(|d| d.name.clone()).unwrap_or_default();
    r.insert("id".into(), Value::Reference(item.id));
    r.insert("kind".into(), Value::text(kind.name()));
    r.insert("description".into(), Value::Reference(item.description_id));
    r.insert("description_name".into(), Value::text(desc_name));
    r.insert("version".into(), Value::Integer(item.description_version as i64));
    r.insert("created_seq".into(), Value::Integer(item.created_seq as i64));
    if let Some(ev) = event_at(&state.events, item.created_seq) {
        r.insert("created_by".into(), Value::text(ev.who.as_str()));
        r.insert("created_at".into(), Value::Timestamp(ev.when));
    }
    r
}

fn event_at(events: &[Event], seq: u64) -> Option<&Event> {
    let idx = events.binary_search_by_key(&seq, |e| e.seq).ok()?;
    Some(&events[idx])
}

/// Item records of `kind` visible to `viewer`, in creation order.
pub fn item_records(state: &State, kind: ItemKind, viewer: &Viewer) -> Vec<Record> {
    let mut items: Vec<&Item> =
        state.items.values().filter(|i| kind.admits(ItemKind::of(i)) && viewer.sees(state, i)).collect();
    items.sort_by_key(|i| i.created_seq);
    items.into_iter().map(|i| item_record(state, i)).collect()
}

pub fn event_record(ev: &Event) -> Record {
    let how: BTreeMap<&str, String> = ev.how.iter().map(|(k, v)| (k.as_str(), v.render())).collect();
    let mut r = Record::from([
        ("seq".into(), Value::Integer(ev.seq as i64)),
        ("who".into(), Value::text(ev.who.as_str())),
        ("which".into(), Value::text(format!("{}@{}", ev.which.item, ev.which.version))),
        ("what".into(), Value::text(ev.what.clone())),
        ("when".into(), Value::Timestamp(ev.when)),
        ("where".into(), Value::text(ev.where_.clone())),
        ("why".into(), Value::text(ev.why.clone())),
        ("how".into(), Value::text(canonical_json(&how))),
        ("which.item".into(), Value::Reference(ev.which.item)),
        ("which.version".into(), Value::Integer(ev.which.version as i64)),
    ]);
    for (k, v) in &ev.how {
        r.insert(format!("how.{k}"), v.clone());
    }
    r
}

/// Filters `records` by the conjunction of `preds`. A field no record
/// carries is unknown; a literal whose kind cannot be tested against some
/// record's value is a type mismatch. Records lacking the field never match.
pub fn filter_records<'a>(records: &'a [Record], known: &BTreeSet<String>, preds: &[Predicate]) -> Result<Vec<&'a Record>> {
    for p in preds {
        if !known.contains(&p.field) {
            return Err(LedgerError::UnknownField(p.field.clone()));
        }
        for r in records {
            if let Some(v) = r.get(&p.field) {
                if !p.compatible_with(v.kind()) {
                    return Err(LedgerError::TypeMismatch(format!(
                        "{} {} {:?} against a {:?} value",
                        p.field,
                        p.op.name(),
                        p.value.kind(),
                        v.kind()
                    )));
                }
            }
        }
    }
    Ok(records.iter().filter(|r| preds.iter().all(|p| r.get(&p.field).is_some_and(|v| p.matches(v)))).collect())
}

fn table(columns: Vec<String>, rows: &[&Record]) -> ResultTable {
    let rows = rows
        .iter()
        .map(|r| columns.iter().map(|c| r.get(c).map(Value::render).unwrap_or_default()).collect())
        .collect();
    ResultTable { columns, rows }
}

pub fn query_items(state: &State, kind: ItemKind, preds: &[Predicate], viewer: &Viewer) -> Result<ResultTable> {
    let records = item_records(state, kind, viewer);
    let mut known: BTreeSet<String> = ITEM_COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut extra = BTreeSet::new();
    for r in &records {
        for k in r.keys() {
            if known.insert(k.clone()) {
                extra.insert(k.clone());
            }
        }
    }
    let hits = filter_records(&records, &known, preds)?;
    let columns = ITEM_COLUMNS.iter().map(|c| c.to_string()).chain(extra).collect();
    Ok(table(columns, &hits))
}

pub fn query_events(state: &State, preds: &[Predicate]) -> Result<ResultTable> {
    let records: Vec<Record> = state.events.iter().map(event_record).collect();
    let mut known: BTreeSet<String> = EVENT_COLUMNS.iter().map(|c| c.to_string()).collect();
    known.insert("which.item".into());
    known.insert("which.version".into());
    for r in &records {
        known.extend(r.keys().filter(|k| k.starts_with("how.")).cloned());
    }
    let hits = filter_records(&records, &known, preds)?;
    Ok(table(EVENT_COLUMNS.iter().map(|c| c.to_string()).collect(), &hits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Xml,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Format, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "xml" => Ok(Format::Xml),
            _ => Err(format!("unknown format {s:?} (expected json, csv or xml)")),
        }
    }
}

pub fn export_table(t: &ResultTable, format: Format) -> String {
    match format {
        Format::Json => canonical_json(t),
        Format::Csv => to_csv(t),
        Format::Xml => to_xml(t),
    }
}

fn csv_field(s: &str, out: &mut String) {
    if s.contains([',', '"', '\n', '\r']) {
        out.push('"');
        out.push_str(&s.replace('"', "\"\""));
        out.push('"');
    } else {
        out.push_str(s);
    }
}

fn csv_line(cells: &[String], out: &mut String) {
    // A lone empty field would otherwise be an empty line, which readers skip.
    if cells.len() == 1 && cells[0].is_empty() {
        out.push_str("\"\"\n");
        return;
    }
    for (i, c) in cells.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        csv_field(c, out);
    }
    out.push('\n');
}

fn to_csv(t: &ResultTable) -> String {
    let mut out = String::new();
    csv_line(&t.columns, &mut out);
    for row in &t.rows {
        csv_line(row, &mut out);
    }
    out
}

/// Column name made into a valid XML element name.
pub fn xml_name(column: &str) -> String {
    let mut name: String =
        column.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') { c } else { '_' }).collect();
    let starts_ok = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
    if !starts_ok || name.to_ascii_lowercase().starts_with("xml") {
        name.insert(0, '_');
    }
    name
}

fn xml_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\r' => out.push_str("&#13;"),
            '\t' | '\n' => out.push(c),
            c if (c as u32) < 0x20 || c == '\u{FFFE}' || c == '\u{FFFF}' => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
}

fn to_xml(t: &ResultTable) -> String {
    let names: Vec<String> = t.columns.iter().map(|c| xml_name(c)).collect();
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<resultset>\n");
    for row in &t.rows {
        out.push_str("  <row>\n");
        for (name, cell) in names.iter().zip(row) {
            out.push_str("    <");
            out.push_str(name);
            out.push('>');
            xml_text(cell, &mut out);
            out.push_str("</");
            out.push_str(name);
            out.push_str(">\n");
        }
        out.push_str("  </row>\n");
    }
    out.push_str("</resultset>\n");
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityKind {
    Dataset,
    DataElement,
    Pipeline,
    Analysis,
    Outcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    #[serde(rename = "used")]
    Used,
    #[serde(rename = "wasGeneratedBy")]
    WasGeneratedBy,
    #[serde(rename = "wasAssociatedWith")]
    WasAssociatedWith,
    #[serde(rename = "wasDerivedFrom")]
    WasDerivedFrom,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvEntity {
    pub id: String,
    pub kind: EntityKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvActivity {
    pub id: String,
    pub label: String,
    pub start: crate::value::Timestamp,
    pub end: crate::value::Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvAgent {
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvRelation {
    pub kind: RelationKind,
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvDocument {
    pub entities: Vec<ProvEntity>,
    pub activities: Vec<ProvActivity>,
    pub agents: Vec<ProvAgent>,
    pub relations: Vec<ProvRelation>,
}

impl ProvDocument {
    pub fn count(&self, kind: RelationKind) -> usize {
        self.relations.iter().filter(|r| r.kind == kind).count()
    }

    /// Relations whose endpoints are missing from the lists their kind
    /// points into.
    pub fn dangling(&self) -> Vec<&ProvRelation> {
        let entities: BTreeSet<&str> = self.entities.iter().map(|e| e.id.as_str()).collect();
        let activities: BTreeSet<&str> = self.activities.iter().map(|a| a.id.as_str()).collect();
        let agents: BTreeSet<&str> = self.agents.iter().map(|a| a.id.as_str()).collect();
        self.relations
            .iter()
            .filter(|r| {
                let (from, to) = match r.kind {
                    RelationKind::Used => (&activities, &entities),
                    RelationKind::WasGeneratedBy => (&entities, &activities),
                    RelationKind::WasAssociatedWith => (&activities, &agents),
                    RelationKind::WasDerivedFrom => (&entities, &entities),
                };
                !from.contains(r.from.as_str()) || !to.contains(r.to.as_str())
            })
            .collect()
    }

    pub fn to_canonical(&self) -> String {
        canonical_json(self)
    }
}

fn rel(kind: RelationKind, from: impl Into<String>, to: impl Into<String>) -> ProvRelation {
    ProvRelation { kind, from: from.into(), to: to.into() }
}

fn agent_id(a: &AgentId) -> String {
    format!("agent:{a}")
}

pub fn export_prov(state: &State, analysis: ItemId, viewer: &Viewer) -> Result<ProvDocument> {
    let a = state.analysis(analysis)?;
    let allowed = match viewer {
        Viewer::System => true,
        Viewer::Agent(agent) => a.visible_to(agent),
        Viewer::Anonymous => false,
    };
    if !allowed {
        let who = match viewer {
            Viewer::Agent(agent) => agent.to_string(),
            _ => "anonymous".into(),
        };
        return Err(LedgerError::NotVisible { analysis, agent: who });
    }
    let mut doc = ProvDocument::default();
    let entity = |kind, id: String| ProvEntity { id, kind };
    let analysis_id = format!("analysis:{analysis}");
    doc.entities.push(entity(EntityKind::Analysis, analysis_id.clone()));
    if let Some(src) = a.derived_from {
        let src_id = format!("analysis:{src}");
        doc.entities.push(entity(EntityKind::Analysis, src_id.clone()));
        doc.relations.push(rel(RelationKind::WasDerivedFrom, analysis_id.clone(), src_id));
    }
    if let Some(ws) = &a.working_dataset {
        doc.entities.push(entity(EntityKind::Dataset, format!("dataset:{}", ws.dataset)));
        for de in &ws.elements {
            doc.entities.push(entity(EntityKind::DataElement, format!("element:{de}")));
        }
    }
    if let Some(p) = a.working_pipeline {
        doc.entities.push(entity(EntityKind::Pipeline, format!("pipeline:{p}")));
    }

    let owner = agent_id(&a.owner);
    doc.agents.push(ProvAgent { id: owner.clone() });
    for note in &a.annotations {
        let id = agent_id(&note.agent);
        if !doc.agents.iter().any(|x| x.id == id) {
            doc.agents.push(ProvAgent { id });
        }
    }

    let data_element: BTreeMap<ItemId, ItemId> = a.elements.iter().map(|e| (e.id, e.data_element)).collect();
    let mut jobs: Vec<_> = state.jobs.iter().filter(|j| j.analysis == analysis).collect();
    jobs.sort_by_key(|j| j.job.id);
    for j in jobs {
        let job = format!("job:{}", j.job.id);
        let element = format!("element:{}", data_element[&j.element]);
        doc.activities.push(ProvActivity {
            id: job.clone(),
            label: j.job.activity.clone(),
            start: j.result.started_at,
            end: j.result.finished_at,
        });
        doc.relations.push(rel(RelationKind::Used, job.clone(), element.clone()));
        doc.relations.push(rel(RelationKind::WasAssociatedWith, job.clone(), owner.clone()));
        if j.result.success {
            let outcome = format!("outcome:{}", j.job.id);
            doc.entities.push(entity(EntityKind::Outcome, outcome.clone()));
            doc.relations.push(rel(RelationKind::WasGeneratedBy, outcome.clone(), job));
            doc.relations.push(rel(RelationKind::WasDerivedFrom, outcome, element));
        }
    }
    Ok(doc)
}
