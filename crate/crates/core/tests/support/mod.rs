//! Fixtures, random generators and oracles shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeSet;
use std::sync::Arc;

use itemledger::analysis::{ElementSpec, FileRef, RerunDelta};
use itemledger::kernel::{DescriptionPayload, FieldDef, Properties, PropertySchema};
use itemledger::workflow::{ActivityDef, ActivityKind, ActivityState, Edge, Transition, WorkflowDef};
use itemledger::{AgentId, Broker, BrokerConfig, ItemId, Ledger, SeededIds, SteppingClock, Timestamp, Value, ValueKind};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

pub const START: i64 = 1_700_000_000_000;

pub fn agent(name: &str) -> AgentId {
    AgentId::new(name).unwrap()
}

/// In-memory ledger with a stepping clock and seeded identifiers.
pub fn det_ledger(seed: u64) -> Ledger {
    Ledger::in_memory()
        .with_clock(Arc::new(SteppingClock::new(Timestamp::from_millis(START), 1_000)))
        .with_ids(Box::new(SeededIds::new(seed)))
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn broker(seed: u64, failure_rate: f64) -> Broker {
    Broker::new(BrokerConfig { seed, failure_rate, ..BrokerConfig::default() }).unwrap()
}

pub fn resumed_broker(l: &Ledger, seed: u64, failure_rate: f64) -> Broker {
    Broker::resume(BrokerConfig { seed, failure_rate, ..BrokerConfig::default() }, l.next_job_id()).unwrap()
}

const KINDS: [ValueKind; 6] =
    [ValueKind::Text, ValueKind::Integer, ValueKind::Decimal, ValueKind::Boolean, ValueKind::Timestamp, ValueKind::Reference];

pub fn random_kind(r: &mut StdRng) -> ValueKind {
    *KINDS.choose(r).unwrap()
}

pub fn random_value(r: &mut StdRng, kind: ValueKind) -> Value {
    match kind {
        ValueKind::Text => Value::text(["MRI", "PET", "CT", "a,b", "x \"y\"", "", "line\nbreak"].choose(r).unwrap().to_string()),
        ValueKind::Integer => Value::Integer(r.random_range(-5..40)),
        ValueKind::Decimal => Value::Decimal(r.random_range(-40..80) as f64 / 4.0),
        ValueKind::Boolean => Value::Boolean(r.random_bool(0.5)),
        ValueKind::Timestamp => Value::Timestamp(Timestamp::from_millis(START + r.random_range(-5..5) * 60_000)),
        ValueKind::Reference => Value::Reference(ItemId::from_u128(r.random_range(1..6))),
    }
}

/// A valid DAG over `n` nodes: node 0 is the start and every later node has
/// at least one earlier predecessor.
pub fn random_dag(r: &mut StdRng, prefix: &str, n: usize) -> WorkflowDef {
    let names: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
    let mut edges = Vec::new();
    for j in 1..n {
        let mut preds: Vec<usize> = (0..j).filter(|_| r.random_bool(0.4)).collect();
        if preds.is_empty() {
            preds.push(r.random_range(0..j));
        }
        edges.extend(preds.into_iter().map(|i| Edge { from: names[i].clone(), to: names[j].clone() }));
    }
    WorkflowDef { activities: names.iter().map(ActivityDef::atomic).collect(), edges, start: names[0].clone() }
}

/// Random description payload: up to 3 properties, a DAG of up to 4
/// activities, possibly one composite and some outcome-bearing ones.
pub fn random_payload(r: &mut StdRng, prefix: &str) -> DescriptionPayload {
    let n = r.random_range(1..=4);
    let mut wf = random_dag(r, prefix, n);
    if r.random_bool(0.3) {
        let idx = r.random_range(0..n);
        let sub_n = r.random_range(1..=3);
        let sub = random_dag(r, "s", sub_n);
        let name = wf.activities[idx].name.clone();
        wf.activities[idx] = ActivityDef { kind: ActivityKind::Composite { sub_workflow: sub }, ..ActivityDef::atomic(name) };
    }
    let fields: Vec<FieldDef> = (0..r.random_range(0..=3))
        .map(|i| {
            let kind = random_kind(r);
            if r.random_bool(0.6) {
                FieldDef::required(format!("p{i}"), kind)
            } else {
                FieldDef::optional(format!("p{i}"), kind)
            }
        })
        .collect();
    let mut payload = DescriptionPayload::new(PropertySchema::new(fields), wf);
    let paths = payload.workflow.activity_paths();
    for path in paths {
        if r.random_bool(0.3) {
            mark_outcome(&mut payload.workflow, &path);
            let fields = vec![FieldDef::required("score", ValueKind::Decimal), FieldDef::optional("note", ValueKind::Text)];
            payload.outcome_schemas.insert(path, fields);
        }
    }
    payload
}

fn mark_outcome(wf: &mut WorkflowDef, path: &str) {
    match path.split_once('/') {
        None => {
            let a = wf.activities.iter_mut().find(|a| a.name == path).unwrap();
            a.has_outcome = true;
        }
        Some((head, rest)) => {
            let a = wf.activities.iter_mut().find(|a| a.name == head).unwrap();
            if let ActivityKind::Composite { sub_workflow } = &mut a.kind {
                mark_outcome(sub_workflow, rest);
            }
        }
    }
}

pub fn conforming_props(r: &mut StdRng, schema: &PropertySchema) -> Properties {
    let mut props = Properties::new();
    for f in &schema.entries {
        if f.required || r.random_bool(0.5) {
            props.insert(f.name.clone(), random_value(r, f.kind));
        }
    }
    props
}

pub fn outcome_for(l: &Ledger, item: ItemId, path: &str) -> Option<Properties> {
    let it = l.item(item).ok()?;
    let dv = l.state().description_version(it.description_id, it.description_version).ok()?;
    let def = dv.workflow_def.activity_at(path)?;
    def.has_outcome.then(|| Properties::from([("score".to_string(), Value::Decimal(0.5))]))
}

/// Next useful transition for an item: complete something Active if
/// possible, otherwise start an enabled activity.
pub fn next_step(l: &Ledger, item: ItemId) -> Option<(String, Transition)> {
    let wf = &l.item(item).ok()?.workflow;
    if wf.complete {
        return None;
    }
    let paths = wf.def.activity_paths();
    // Deepest first so sub-workflows complete before their parents.
    let mut active: Vec<&String> = paths.iter().filter(|p| wf.state(p) == Some(ActivityState::Active)).collect();
    active.sort_by_key(|p| std::cmp::Reverse(p.matches('/').count()));
    for p in active {
        if wf.fire_transition(p, Transition::Complete).is_ok() {
            return Some((p.clone(), Transition::Complete));
        }
    }
    wf.enabled_paths().into_iter().next().map(|p| (p, Transition::Start))
}

/// Fires transitions until the item's workflow completes; returns the
/// number of events recorded.
pub fn drive_to_completion(l: &mut Ledger, item: ItemId, who: &AgentId, limit: usize) -> Result<usize, String> {
    let mut steps = 0;
    while let Some((path, t)) = next_step(l, item) {
        let outcome = if t == Transition::Complete { outcome_for(l, item, &path) } else { None };
        l.transition_item(item, &path, t, outcome.as_ref(), who, "node-a").map_err(|e| format!("{path}:{t}: {e}"))?;
        steps += 1;
        if steps > limit {
            return Err("no progress".into());
        }
    }
    if l.item(item).unwrap().workflow.complete {
        Ok(steps)
    } else {
        Err("stuck before completion".into())
    }
}

pub fn element_specs(r: &mut StdRng, n: usize) -> Vec<ElementSpec> {
    (0..n)
        .map(|i| ElementSpec {
            id: None,
            files: vec![FileRef { path: format!("sub-{i}/anat.nii"), hash: format!("{:016x}", r.random::<u64>()) }],
            metadata: Properties::from([("age".to_string(), Value::Integer(r.random_range(50..90)))]),
        })
        .collect()
}

pub fn check_seven_ws(l: &Ledger) -> Result<(), String> {
    let mut last = 0;
    for e in l.events() {
        if e.seq != last + 1 {
            return Err(format!("seq {} follows {}", e.seq, last));
        }
        last = e.seq;
        if e.who.as_str().is_empty() || e.what.is_empty() || e.where_.is_empty() || e.which.version == 0 {
            return Err(format!("event {} has an empty seven-Ws field", e.seq));
        }
        if e.which.item.as_uuid().is_nil() {
            return Err(format!("event {} has a nil which", e.seq));
        }
    }
    Ok(())
}

pub struct ScriptReport {
    pub ledger: Ledger,
    pub accepted: usize,
    pub rejected: usize,
    pub expected_events: usize,
}

/// Runs `ops` random operations against a fresh deterministic ledger,
/// checking after each that accepted calls appended exactly the expected
/// events and rejected calls appended none.
pub fn run_script(seed: u64, ops: usize) -> Result<ScriptReport, String> {
    let mut r = rng(seed);
    let mut l = det_ledger(seed);
    let agents = [agent("alice"), agent("bob"), agent("carol")];
    let mut descs: Vec<ItemId> = Vec::new();
    let mut items: Vec<ItemId> = Vec::new();
    let mut datasets = Vec::new();
    let mut pipelines: Vec<ItemId> = Vec::new();
    let mut analyses: Vec<ItemId> = Vec::new();
    let (mut accepted, mut rejected, mut expected) = (0, 0, 0);
    let bogus = ItemId::from_u128(0xdead);

    for step in 0..ops {
        let before = l.events().len();
        let who = agents.choose(&mut r).unwrap().clone();
        let op = r.random_range(0..15);
        let outcome: Result<usize, String> = match op {
            0 => {
                let mut p = random_payload(&mut r, "a");
                if r.random_bool(0.1) {
                    p.workflow.activities.push(ActivityDef::atomic("island"));
                }
                l.register_description(&format!("D{step}"), p, &who).map(|(id, _)| {
                    descs.push(id);
                    1
                })
            }
            1 => {
                let d = descs.choose(&mut r).copied().unwrap_or(bogus);
                l.add_description_version(d, random_payload(&mut r, "b"), &who).map(|_| 1)
            }
            2 => {
                let d = descs.choose(&mut r).copied().unwrap_or(bogus);
                let latest = l.state().description(d).map(|x| x.latest()).unwrap_or(1);
                let v = r.random_range(1..=latest + 1);
                let props = match l.state().description_version(d, v) {
                    Ok(dv) if r.random_bool(0.85) => conforming_props(&mut r, &dv.property_schema),
                    _ => {
                        let k = random_kind(&mut r);
                        Properties::from([("p0".to_string(), random_value(&mut r, k))])
                    }
                };
                l.instantiate_item(d, v, &props, &who, "node-b").map(|it| {
                    items.push(it.id);
                    1
                })
            }
            3 => {
                let it = items.choose(&mut r).copied().unwrap_or(bogus);
                let (path, t) = match next_step(&l, it) {
                    Some(s) if r.random_bool(0.8) => s,
                    _ => ("a0".to_string(), *Transition::ALL.choose(&mut r).unwrap()),
                };
                let outcome = if t == Transition::Complete { outcome_for(&l, it, &path) } else { None };
                l.transition_item(it, &path, t, outcome.as_ref(), &who, "node-c").map(|_| 1)
            }
            4 => {
                let it = items.choose(&mut r).copied().unwrap_or(bogus);
                l.migrate_item(it, r.random_range(1..4), &who).map(|_| 1)
            }
            5 => {
                let n = r.random_range(0..5);
                let specs = element_specs(&mut r, n);
                let meta = Properties::from([("subject_count".to_string(), Value::Integer(r.random_range(0..40)))]);
                l.register_dataset(meta, specs, &who).map(|d| {
                    datasets.push(d);
                    1
                })
            }
            6 => {
                let n = r.random_range(1..=3);
                let stages = random_dag(&mut r, "st", n);
                l.register_pipeline("bin/run.sh", Properties::new(), vec!["/data".into()], stages, &who).map(|p| {
                    pipelines.push(p.id);
                    1
                })
            }
            7 => l.define_analysis(&who).map(|a| {
                analyses.push(a.id);
                1
            }),
            8 => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                match datasets.choose(&mut r) {
                    Some(d) => {
                        let sel: Vec<ItemId> = d.elements.iter().filter(|_| r.random_bool(0.7)).map(|e| e.id).collect();
                        l.set_working_dataset(a, d.id, &sel, &who).map(|_| 1)
                    }
                    None => l.set_working_dataset(a, bogus, &[], &who).map(|_| 1),
                }
            }
            9 => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                let p = pipelines.choose(&mut r).copied().unwrap_or(bogus);
                let params = Properties::from([("threshold".to_string(), Value::Decimal(r.random_range(1..9) as f64 / 10.0))]);
                l.set_working_pipeline(a, p, params, &who).map(|_| 1)
            }
            10 => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                let mut b = resumed_broker(&l, r.random(), [0.0, 0.3, 1.0][r.random_range(0..3)]);
                l.run_analysis(a, &who, &mut b).map(|els| 1 + els.iter().map(|e| e.job_ids.len()).sum::<usize>())
            }
            11 => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                l.consolidate(a, &who).map(|_| 1)
            }
            12 => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                l.annotate(a, "looks fine", &who).map(|_| 1)
            }
            13 => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                let target = agents.choose(&mut r).unwrap().clone();
                l.share_analysis(a, &target, &who).map(|_| 1)
            }
            _ => {
                let a = analyses.choose(&mut r).copied().unwrap_or(bogus);
                let delta = RerunDelta { parameters: Some(Properties::from([("threshold".to_string(), Value::Decimal(0.9))])), elements: None };
                let mut b = resumed_broker(&l, r.random(), 0.2);
                l.rerun_analysis(a, &delta, &who, &mut b).map(|na| {
                    analyses.push(na.id);
                    2 + na.elements.iter().map(|e| e.job_ids.len()).sum::<usize>()
                })
            }
        }
        .map_err(|e| e.to_string());
        let appended = l.events().len() - before;
        match outcome {
            Ok(n) => {
                accepted += 1;
                expected += n;
                if appended != n {
                    return Err(format!("seed {seed} step {step} op {op}: expected {n} events, got {appended}"));
                }
            }
            Err(e) => {
                rejected += 1;
                if appended != 0 {
                    return Err(format!("seed {seed} step {step} op {op}: rejected ({e}) but appended {appended}"));
                }
            }
        }
    }
    if l.events().len() != expected {
        return Err(format!("seed {seed}: {} events for {expected} accepted changes", l.events().len()));
    }
    check_seven_ws(&l).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok(ScriptReport { ledger: l, accepted, rejected, expected_events: expected })
}

pub fn distinct<T: Ord + Clone>(xs: &[T]) -> bool {
    xs.iter().cloned().collect::<BTreeSet<_>>().len() == xs.len()
}
