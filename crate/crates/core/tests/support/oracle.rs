//! Brute-force reference implementations the engine is checked against.
//! Written without reusing engine code paths beyond plain data access.

use std::collections::{BTreeMap, BTreeSet};

use itemledger::analysis::{ANALYSIS_DESCRIPTION, DATASET_DESCRIPTION, PIPELINE_DESCRIPTION};
use itemledger::kernel::{Event, Item};
use itemledger::provenance::{ItemKind, Op, Predicate, ProvDocument, RelationKind, Viewer};
use itemledger::workflow::{ActivityDef, Edge, Transition, WorkflowDef, WorkflowInstance};
use itemledger::{State, Value, ValueKind};

// ---- workflow graphs over nodes 0..n ----

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("n{i}")).collect()
}

pub fn graph(n: usize, edges: &[(usize, usize)], start: usize) -> WorkflowDef {
    let names = names(n);
    WorkflowDef {
        activities: names.iter().map(ActivityDef::atomic).collect(),
        edges: edges.iter().map(|&(a, b)| Edge { from: names[a].clone(), to: names[b].clone() }).collect(),
        start: names[start].clone(),
    }
}

/// Transitive closure by Floyd-Warshall; `t[i][j]` iff a path of length
/// at least one leads from i to j.
pub fn closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut t = vec![vec![false; n]; n];
    for &(a, b) in edges {
        t[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if t[i][k] && t[k][j] {
                    t[i][j] = true;
                }
            }
        }
    }
    t
}

pub struct GraphFacts {
    pub acyclic: bool,
    pub start_has_incoming: bool,
    pub has_terminal: bool,
    pub unreachable: BTreeSet<String>,
    pub no_path_to_terminal: BTreeSet<String>,
}

impl GraphFacts {
    pub fn valid(&self) -> bool {
        self.acyclic && !self.start_has_incoming && self.has_terminal && self.unreachable.is_empty() && self.no_path_to_terminal.is_empty()
    }
}

pub fn facts(n: usize, edges: &[(usize, usize)], start: usize) -> GraphFacts {
    let t = closure(n, edges);
    let terminals: Vec<usize> = (0..n).filter(|&i| !edges.iter().any(|&(a, _)| a == i)).collect();
    let names = names(n);
    GraphFacts {
        acyclic: (0..n).all(|i| !t[i][i]),
        start_has_incoming: edges.iter().any(|&(_, b)| b == start),
        has_terminal: !terminals.is_empty(),
        unreachable: (0..n).filter(|&i| i != start && !t[start][i]).map(|i| names[i].clone()).collect(),
        no_path_to_terminal: (0..n)
            .filter(|&i| !terminals.iter().any(|&z| z == i || t[i][z]))
            .map(|i| names[i].clone())
            .collect(),
    }
}

/// Number of orders in which the activities can be completed one by one,
/// following only the engine's enabled set. Errors if some order stalls
/// before completion.
pub fn completion_orders(inst: &WorkflowInstance) -> Result<u64, String> {
    let enabled = inst.enabled_activities();
    if enabled.is_empty() {
        return if inst.complete { Ok(1) } else { Err(format!("stalled: {:?}", inst.states)) };
    }
    if inst.complete {
        return Err("complete with activities still enabled".into());
    }
    let mut total = 0;
    for a in enabled {
        let next = inst
            .fire_transition(&a, Transition::Start)
            .and_then(|i| i.fire_transition(&a, Transition::Complete))
            .map_err(|e| e.to_string())?;
        total += completion_orders(&next)?;
    }
    Ok(total)
}

/// Permutations of 0..n that put every edge's source before its target.
pub fn linear_extensions(n: usize, edges: &[(usize, usize)]) -> u64 {
    fn go(placed: &mut Vec<usize>, n: usize, edges: &[(usize, usize)]) -> u64 {
        if placed.len() == n {
            return 1;
        }
        let mut total = 0;
        for v in 0..n {
            if placed.contains(&v) {
                continue;
            }
            if edges.iter().all(|&(a, b)| b != v || placed.contains(&a)) {
                placed.push(v);
                total += go(placed, n, edges);
                placed.pop();
            }
        }
        total
    }
    go(&mut Vec::new(), n, edges)
}

// ---- queries ----

#[derive(Debug, PartialEq, Eq)]
pub enum Expected {
    Ids(Vec<String>),
    Error(&'static str),
}

fn kind_of(item: &Item) -> &'static str {
    match item.description_id {
        d if d == DATASET_DESCRIPTION => "dataset",
        d if d == PIPELINE_DESCRIPTION => "pipeline",
        d if d == ANALYSIS_DESCRIPTION => "analysis",
        _ => "item",
    }
}

/// Value of `field` for `item`, looked up directly from state.
pub fn item_field(state: &State, item: &Item, field: &str) -> Option<Value> {
    let create = state.events.iter().find(|e| e.seq == item.created_seq);
    match field {
        "id" => return Some(Value::Reference(item.id)),
        "kind" => return Some(Value::text(kind_of(item))),
        "description" => return Some(Value::Reference(item.description_id)),
        "description_name" => return Some(Value::text(state.descriptions[&item.description_id].name.clone())),
        "version" => return Some(Value::Integer(item.description_version as i64)),
        "created_seq" => return Some(Value::Integer(item.created_seq as i64)),
        "created_by" => return create.map(|e| Value::text(e.who.as_str())),
        "created_at" => return create.map(|e| Value::Timestamp(e.when)),
        _ => {}
    }
    let derived = match kind_of(item) {
        "pipeline" => field.strip_prefix("env.").and_then(|k| state.pipelines[&item.id].env_settings.get(k).cloned()),
        "analysis" => {
            let a = &state.analyses[&item.id];
            let count = |want: &str| a.elements.iter().filter(|e| format!("{:?}", e.result_state) == want).count() as i64;
            match field {
                "phase" => Some(Value::text(format!("{:?}", a.phase))),
                "dataset" => a.working_dataset.as_ref().map(|w| Value::Reference(w.dataset)),
                "selected" => a.working_dataset.as_ref().map(|w| Value::Integer(w.elements.len() as i64)),
                "pipeline" => a.working_pipeline.map(Value::Reference),
                "derived_from" => a.derived_from.map(Value::Reference),
                "element_count" => Some(Value::Integer(a.elements.len() as i64)),
                "succeeded" => Some(Value::Integer(count("Succeeded"))),
                "failed" => Some(Value::Integer(count("Failed"))),
                _ => None,
            }
        }
        _ => None,
    };
    // derived pipeline and analysis fields shadow properties; dataset
    // metadata only fills gaps
    derived.or_else(|| item.properties.get(field).cloned()).or_else(|| match kind_of(item) {
        "dataset" => state.datasets[&item.id].study_metadata.get(field).cloned(),
        _ => None,
    })
}

pub fn event_field(e: &Event, field: &str) -> Option<Value> {
    Some(match field {
        "seq" => Value::Integer(e.seq as i64),
        "who" => Value::text(e.who.as_str()),
        "which" => Value::text(format!("{}@{}", e.which.item, e.which.version)),
        "what" => Value::text(e.what.clone()),
        "when" => Value::Timestamp(e.when),
        "where" => Value::text(e.where_.clone()),
        "why" => Value::text(e.why.clone()),
        "which.item" => Value::Reference(e.which.item),
        "which.version" => Value::Integer(e.which.version as i64),
        "how" => {
            let m: BTreeMap<&String, String> = e.how.iter().map(|(k, v)| (k, v.render())).collect();
            Value::text(serde_json::to_string(&m).unwrap())
        }
        f => return e.how.get(f.strip_prefix("how.")?).cloned(),
    })
}

fn numeric(k: ValueKind) -> bool {
    matches!(k, ValueKind::Integer | ValueKind::Decimal)
}

fn textual(k: ValueKind) -> bool {
    matches!(k, ValueKind::Text | ValueKind::Reference)
}

pub fn compatible(op: Op, lit: ValueKind, cell: ValueKind) -> bool {
    match op {
        Op::Eq | Op::Neq => lit == cell || (numeric(lit) && numeric(cell)) || (textual(lit) && textual(cell)),
        Op::Contains => textual(lit) && textual(cell),
        Op::Lt | Op::Lte | Op::Gt | Op::Gte => {
            (numeric(lit) && numeric(cell)) || (lit == ValueKind::Timestamp && cell == ValueKind::Timestamp)
        }
    }
}

fn as_text(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Reference(r) => r.to_string(),
        other => other.render(),
    }
}

/// -1, 0 or 1 comparing cell to literal.
fn cmp(cell: &Value, lit: &Value) -> i32 {
    let sign = |o: std::cmp::Ordering| o as i32;
    match (cell, lit) {
        (Value::Integer(a), Value::Integer(b)) => sign(a.cmp(b)),
        (Value::Timestamp(a), Value::Timestamp(b)) => sign(a.millis().cmp(&b.millis())),
        (Value::Boolean(a), Value::Boolean(b)) => sign(a.cmp(b)),
        (a, b) if numeric(a.kind()) && numeric(b.kind()) => {
            let f = |v: &Value| match v {
                Value::Integer(i) => *i as f64,
                Value::Decimal(d) => *d,
                _ => unreachable!(),
            };
            match f(a).partial_cmp(&f(b)) {
                Some(o) => sign(o),
                None => 2,
            }
        }
        (a, b) => sign(as_text(a).cmp(&as_text(b))),
    }
}

pub fn holds(p: &Predicate, cell: &Value) -> bool {
    let c = cmp(cell, &p.value);
    match p.op {
        Op::Eq => c == 0,
        Op::Neq => c != 0 && c != 2,
        Op::Lt => c < 0,
        Op::Lte => c <= 0,
        Op::Gt => c == 1,
        Op::Gte => c >= 0 && c != 2,
        Op::Contains => as_text(cell).contains(&as_text(&p.value)),
    }
}

fn scan<T>(rows: &[T], base: &[&str], preds: &[Predicate], field: impl Fn(&T, &str) -> Option<Value>, id: impl Fn(&T) -> String) -> Expected {
    for p in preds {
        let present: Vec<Value> = rows.iter().filter_map(|r| field(r, &p.field)).collect();
        if !base.contains(&p.field.as_str()) && present.is_empty() {
            return Expected::Error("UnknownField");
        }
        if present.iter().any(|v| !compatible(p.op, p.value.kind(), v.kind())) {
            return Expected::Error("TypeMismatch");
        }
    }
    Expected::Ids(
        rows.iter()
            .filter(|r| preds.iter().all(|p| field(r, &p.field).is_some_and(|v| holds(p, &v))))
            .map(id)
            .collect(),
    )
}

pub fn expect_items(state: &State, kind: ItemKind, preds: &[Predicate], viewer: &Viewer) -> Expected {
    let mut rows: Vec<&Item> = state
        .items
        .values()
        .filter(|i| kind == ItemKind::All || kind.name() == kind_of(i))
        .filter(|i| match (state.analyses.get(&i.id), viewer) {
            (None, _) | (Some(_), Viewer::System) => true,
            (Some(a), Viewer::Agent(who)) => &a.owner == who || a.shared_with.contains(who),
            (Some(_), Viewer::Anonymous) => false,
        })
        .collect();
    rows.sort_by_key(|i| i.created_seq);
    let base = ["id", "kind", "description", "description_name", "version", "created_seq", "created_by", "created_at"];
    scan(&rows, &base, preds, |i, f| item_field(state, i, f), |i| i.id.to_string())
}

pub fn expect_events(state: &State, preds: &[Predicate]) -> Expected {
    let base = ["seq", "who", "which", "what", "when", "where", "why", "how", "which.item", "which.version"];
    scan(&state.events, &base, preds, event_field, |e| e.seq.to_string())
}

// ---- PROV ----

/// Structural problems in a PROV document, found without using its own
/// helper methods.
pub fn prov_problems(doc: &ProvDocument) -> Vec<String> {
    let mut out = Vec::new();
    let ents: BTreeSet<&str> = doc.entities.iter().map(|e| e.id.as_str()).collect();
    let acts: BTreeSet<&str> = doc.activities.iter().map(|a| a.id.as_str()).collect();
    let agents: BTreeSet<&str> = doc.agents.iter().map(|a| a.id.as_str()).collect();
    if ents.len() != doc.entities.len() || acts.len() != doc.activities.len() || agents.len() != doc.agents.len() {
        out.push("duplicate node ids".to_string());
    }
    for r in &doc.relations {
        let ok = match r.kind {
            RelationKind::Used => acts.contains(r.from.as_str()) && ents.contains(r.to.as_str()),
            RelationKind::WasGeneratedBy => ents.contains(r.from.as_str()) && acts.contains(r.to.as_str()),
            RelationKind::WasAssociatedWith => acts.contains(r.from.as_str()) && agents.contains(r.to.as_str()),
            RelationKind::WasDerivedFrom => ents.contains(r.from.as_str()) && ents.contains(r.to.as_str()),
        };
        if !ok {
            out.push(format!("dangling {:?} {} -> {}", r.kind, r.from, r.to));
        }
    }
    for a in &doc.activities {
        if !doc.relations.iter().any(|r| r.kind == RelationKind::WasAssociatedWith && r.from == a.id) {
            out.push(format!("activity {} has no agent", a.id));
        }
        if a.end < a.start {
            out.push(format!("activity {} ends before it starts", a.id));
        }
    }
    out
}
