//! Activity graphs and the lifecycle state machine that walks an Item from
//! creation to completion.
//!
//! A [`WorkflowDef`] is a DAG of named activities with a single start node.
//! Activities are either atomic or composite; a composite activity carries its
//! own sub-workflow, and nested activities are addressed by `/`-separated
//! paths such as `preprocess/skull_strip`.
//!
//! Joins are AND-joins: an activity is enabled once it is `Waiting` and every
//! predecessor is `Completed`. There is no conditional routing and no loops;
//! a `Failed` activity can be retried, which puts it back to `Waiting`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{ItemId, Value};

pub const PATH_SEPARATOR: char = '/';

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityDef {
    pub name: String,
    #[serde(default)]
    pub kind: ActivityKind,
    #[serde(default)]
    pub has_outcome: bool,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl ActivityDef {
    pub fn atomic(name: impl Into<String>) -> Self {
        ActivityDef {
            name: name.into(),
            kind: ActivityKind::Atomic,
            has_outcome: false,
            params: BTreeMap::new(),
        }
    }

    pub fn composite(name: impl Into<String>, sub_workflow: WorkflowDef) -> Self {
        ActivityDef {
            name: name.into(),
            kind: ActivityKind::Composite { sub_workflow },
            has_outcome: false,
            params: BTreeMap::new(),
        }
    }

    pub fn with_outcome(mut self) -> Self {
        self.has_outcome = true;
        self
    }

    pub fn with_param(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.params.insert(name.into(), value.into());
        self
    }

    pub fn sub_workflow(&self) -> Option<&WorkflowDef> {
        match &self.kind {
            ActivityKind::Composite { sub_workflow } => Some(sub_workflow),
            ActivityKind::Atomic => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ActivityKind {
    #[default]
    Atomic,
    Composite { sub_workflow: WorkflowDef },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDef {
    pub activities: Vec<ActivityDef>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    pub start: String,
}

impl WorkflowDef {
    pub fn single(name: &str) -> Self {
        WorkflowDef { activities: vec![ActivityDef::atomic(name)], edges: vec![], start: name.into() }
    }

    /// A linear chain of atomic activities in the given order.
    pub fn chain<S: AsRef<str>>(names: &[S]) -> Self {
        let activities = names.iter().map(|n| ActivityDef::atomic(n.as_ref())).collect();
        let edges = names
            .windows(2)
            .map(|w| Edge { from: w[0].as_ref().into(), to: w[1].as_ref().into() })
            .collect();
        WorkflowDef {
            activities,
            edges,
            start: names.first().map(|n| n.as_ref().to_string()).unwrap_or_default(),
        }
    }

    pub fn activity(&self, name: &str) -> Option<&ActivityDef> {
        self.activities.iter().find(|a| a.name == name)
    }

    /// Resolves a `/`-separated path through composite activities.
    pub fn activity_at(&self, path: &str) -> Option<&ActivityDef> {
        let mut parts = path.split(PATH_SEPARATOR);
        let mut current = self.activity(parts.next()?)?;
        for part in parts {
            current = current.sub_workflow()?.activity(part)?;
        }
        Some(current)
    }

    /// Every activity path in the graph, nested ones included, in
    /// declaration order.
    pub fn activity_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in &self.activities {
            out.push(a.name.clone());
            if let Some(sub) = a.sub_workflow() {
                out.extend(sub.activity_paths().into_iter().map(|p| format!("{}/{}", a.name, p)));
            }
        }
        out
    }

    pub fn predecessors<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |e| e.to == name).map(|e| e.from.as_str())
    }
}

/// One problem found by [`validate_graph`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    NoActivities,
    InvalidName { name: String },
    DuplicateActivity { name: String },
    UnknownStart { start: String },
    UnknownEdgeEndpoint { from: String, to: String },
    DuplicateEdge { from: String, to: String },
    Cycle { nodes: Vec<String> },
    StartHasIncoming { from: String },
    NoTerminal,
    Unreachable { name: String },
    NoPathToTerminal { name: String },
    InvalidSubWorkflow { activity: String, violations: Vec<Violation> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoActivities => write!(f, "workflow has no activities"),
            Violation::InvalidName { name } => write!(f, "invalid activity name {name:?}"),
            Violation::DuplicateActivity { name } => write!(f, "duplicate activity {name:?}"),
            Violation::UnknownStart { start } => write!(f, "start activity {start:?} not defined"),
            Violation::UnknownEdgeEndpoint { from, to } => {
                write!(f, "edge {from:?} -> {to:?} references an undefined activity")
            }
            Violation::DuplicateEdge { from, to } => write!(f, "edge {from:?} -> {to:?} repeated"),
            Violation::Cycle { nodes } => write!(f, "cycle through {}", nodes.join(", ")),
            Violation::StartHasIncoming { from } => {
                write!(f, "start activity has an incoming edge from {from:?}")
            }
            Violation::NoTerminal => write!(f, "no terminal activity"),
            Violation::Unreachable { name } => write!(f, "{name:?} unreachable from start"),
            Violation::NoPathToTerminal { name } => write!(f, "{name:?} cannot reach a terminal"),
            Violation::InvalidSubWorkflow { activity, violations } => {
                write!(f, "sub-workflow of {activity:?}: ")?;
                for (i, v) in violations.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

fn name_is_valid(name: &str) -> bool {
    !name.trim().is_empty() && !name.contains(PATH_SEPARATOR) && !name.contains(':')
}

/// Checks every structural rule of a workflow graph and returns all
/// violations found.
pub fn validate_graph(def: &WorkflowDef) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if def.activities.is_empty() {
        out.push(Violation::NoActivities);
        return Err(out);
    }

    let mut names = BTreeSet::new();
    for a in &def.activities {
        if !name_is_valid(&a.name) {
            out.push(Violation::InvalidName { name: a.name.clone() });
        }
        if !names.insert(a.name.as_str()) {
            out.push(Violation::DuplicateActivity { name: a.name.clone() });
        }
        if let Some(sub) = a.sub_workflow() {
            if let Err(violations) = validate_graph(sub) {
                out.push(Violation::InvalidSubWorkflow { activity: a.name.clone(), violations });
            }
        }
    }
    let start_known = names.contains(def.start.as_str());
    if !start_known {
        out.push(Violation::UnknownStart { start: def.start.clone() });
    }

    let mut seen_edges = BTreeSet::new();
    let mut succ: BTreeMap<&str, Vec<&str>> = names.iter().map(|n| (*n, Vec::new())).collect();
    let mut pred: BTreeMap<&str, Vec<&str>> = names.iter().map(|n| (*n, Vec::new())).collect();
    for e in &def.edges {
        if !names.contains(e.from.as_str()) || !names.contains(e.to.as_str()) {
            out.push(Violation::UnknownEdgeEndpoint { from: e.from.clone(), to: e.to.clone() });
            continue;
        }
        if !seen_edges.insert((e.from.as_str(), e.to.as_str())) {
            out.push(Violation::DuplicateEdge { from: e.from.clone(), to: e.to.clone() });
            continue;
        }
        succ.get_mut(e.from.as_str()).expect("known").push(e.to.as_str());
        pred.get_mut(e.to.as_str()).expect("known").push(e.from.as_str());
    }

    // Kahn's algorithm; whatever is left over sits on or behind a cycle.
    let mut indegree: BTreeMap<&str, usize> = pred.iter().map(|(k, v)| (*k, v.len())).collect();
    let mut queue: VecDeque<&str> =
        indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut removed = BTreeSet::new();
    while let Some(n) = queue.pop_front() {
        removed.insert(n);
        for s in &succ[n] {
            let d = indegree.get_mut(s).expect("known");
            *d -= 1;
            if *d == 0 {
                queue.push_back(s);
            }
        }
    }
    if removed.len() < names.len() {
        let nodes = names.iter().filter(|n| !removed.contains(*n)).map(|n| n.to_string()).collect();
        out.push(Violation::Cycle { nodes });
    }

    if start_known {
        for from in &pred[def.start.as_str()] {
            out.push(Violation::StartHasIncoming { from: from.to_string() });
        }
    }

    let terminals: Vec<&str> = succ.iter().filter(|(_, v)| v.is_empty()).map(|(k, _)| *k).collect();
    if terminals.is_empty() {
        out.push(Violation::NoTerminal);
    }

    if start_known {
        let reachable = bfs(&[def.start.as_str()], &succ);
        for n in &names {
            if !reachable.contains(n) {
                out.push(Violation::Unreachable { name: n.to_string() });
            }
        }
    }
    let coreachable = bfs(&terminals, &pred);
    for n in &names {
        if !coreachable.contains(n) {
            out.push(Violation::NoPathToTerminal { name: n.to_string() });
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn bfs<'a>(roots: &[&'a str], adj: &BTreeMap<&'a str, Vec<&'a str>>) -> BTreeSet<&'a str> {
    let mut seen: BTreeSet<&str> = roots.iter().copied().collect();
    let mut queue: VecDeque<&str> = roots.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        for m in &adj[n] {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActivityState {
    Waiting,
    Active,
    Completed,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Transition {
    Start,
    Complete,
    Fail,
    Retry,
}

impl Transition {
    pub const ALL: [Transition; 4] =
        [Transition::Start, Transition::Complete, Transition::Fail, Transition::Retry];

    pub fn from_state(self) -> ActivityState {
        match self {
            Transition::Start => ActivityState::Waiting,
            Transition::Complete | Transition::Fail => ActivityState::Active,
            Transition::Retry => ActivityState::Failed,
        }
    }

    pub fn to_state(self) -> ActivityState {
        match self {
            Transition::Start => ActivityState::Active,
            Transition::Complete => ActivityState::Completed,
            Transition::Fail => ActivityState::Failed,
            Transition::Retry => ActivityState::Waiting,
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Transition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "start" => Ok(Transition::Start),
            "complete" => Ok(Transition::Complete),
            "fail" => Ok(Transition::Fail),
            "retry" => Ok(Transition::Retry),
            _ => Err(format!("unknown transition {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DefRef {
    pub description: ItemId,
    pub version: u32,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WorkflowError {
    #[error("invalid workflow graph: {}", join_violations(.0))]
    InvalidGraph(Vec<Violation>),
    #[error("unknown activity {0:?}")]
    UnknownActivity(String),
    #[error("illegal transition {transition} on {activity:?} in state {state:?}")]
    IllegalTransition { activity: String, state: ActivityState, transition: Transition },
    #[error("activity {0:?} is not enabled")]
    NotEnabled(String),
    #[error("sub-workflow of {0:?} is not complete")]
    SubWorkflowIncomplete(String),
}

pub(crate) fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Runtime state of one workflow. Carries its definition so that the
/// enabled set can be computed from the instance alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowInstance {
    pub def_ref: DefRef,
    pub def: WorkflowDef,
    pub states: BTreeMap<String, ActivityState>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subs: BTreeMap<String, WorkflowInstance>,
    pub complete: bool,
}

/// Creates a fresh instance with every activity `Waiting`.
pub fn instantiate_workflow(def: &WorkflowDef, def_ref: DefRef) -> Result<WorkflowInstance, WorkflowError> {
    validate_graph(def).map_err(WorkflowError::InvalidGraph)?;
    Ok(WorkflowInstance::fresh(def, def_ref))
}

impl WorkflowInstance {
    fn fresh(def: &WorkflowDef, def_ref: DefRef) -> Self {
        let states = def.activities.iter().map(|a| (a.name.clone(), ActivityState::Waiting)).collect();
        let subs = def
            .activities
            .iter()
            .filter_map(|a| a.sub_workflow().map(|s| (a.name.clone(), WorkflowInstance::fresh(s, def_ref))))
            .collect();
        WorkflowInstance { def_ref, def: def.clone(), states, subs, complete: false }
    }

    pub fn state(&self, path: &str) -> Option<ActivityState> {
        match path.split_once(PATH_SEPARATOR) {
            None => self.states.get(path).copied(),
            Some((head, rest)) => self.subs.get(head)?.state(rest),
        }
    }

    /// Top-level activities that may be started now.
    pub fn enabled_activities(&self) -> BTreeSet<String> {
        self.def
            .activities
            .iter()
            .filter(|a| self.is_enabled(&a.name))
            .map(|a| a.name.clone())
            .collect()
    }

    /// Enabled activities at every nesting level, as full paths. Nested
    /// activities are only enabled while their composite parent is `Active`.
    pub fn enabled_paths(&self) -> BTreeSet<String> {
        let mut out = self.enabled_activities();
        for (name, sub) in &self.subs {
            if self.states.get(name) == Some(&ActivityState::Active) {
                out.extend(sub.enabled_paths().into_iter().map(|p| format!("{name}/{p}")));
            }
        }
        out
    }

    fn is_enabled(&self, name: &str) -> bool {
        self.states.get(name) == Some(&ActivityState::Waiting)
            && self.def.predecessors(name).all(|p| self.states.get(p) == Some(&ActivityState::Completed))
    }

    /// Applies one transition and returns the resulting instance; `self` is
    /// left untouched.
    pub fn fire_transition(&self, path: &str, transition: Transition) -> Result<WorkflowInstance, WorkflowError> {
        let mut next = self.clone();
        next.fire_in_place(path, path, transition)?;
        Ok(next)
    }

    fn fire_in_place(&mut self, full: &str, path: &str, transition: Transition) -> Result<(), WorkflowError> {
        if let Some((head, rest)) = path.split_once(PATH_SEPARATOR) {
            let parent = self.states.get(head).copied().ok_or_else(|| WorkflowError::UnknownActivity(full.into()))?;
            let sub = self.subs.get_mut(head).ok_or_else(|| WorkflowError::UnknownActivity(full.into()))?;
            if transition == Transition::Start && parent != ActivityState::Active {
                sub.def.activity_at(rest).ok_or_else(|| WorkflowError::UnknownActivity(full.into()))?;
                return Err(WorkflowError::NotEnabled(full.into()));
            }
            return sub.fire_in_place(full, rest, transition);
        }

        let state = self.states.get(path).copied().ok_or_else(|| WorkflowError::UnknownActivity(full.into()))?;
        if state != transition.from_state() {
            return Err(WorkflowError::IllegalTransition { activity: full.into(), state, transition });
        }
        match transition {
            Transition::Start if !self.is_enabled(path) => {
                return Err(WorkflowError::NotEnabled(full.into()));
            }
            Transition::Complete => {
                if let Some(sub) = self.subs.get(path) {
                    if !sub.complete {
                        return Err(WorkflowError::SubWorkflowIncomplete(full.into()));
                    }
                }
            }
            Transition::Retry => {
                if let Some(sub) = self.subs.get_mut(path) {
                    let (def, def_ref) = (sub.def.clone(), sub.def_ref);
                    *sub = WorkflowInstance::fresh(&def, def_ref);
                }
            }
            _ => {}
        }
        self.states.insert(path.to_string(), transition.to_state());
        self.complete = self.states.values().all(|s| *s == ActivityState::Completed);
        Ok(())
    }

    /// Re-targets the instance at another definition, keeping the state of
    /// every activity whose name exists in both. New activities start out
    /// `Waiting`. Fails if an `Active` activity has no counterpart.
    pub fn migrate(&self, def: &WorkflowDef, def_ref: DefRef) -> Result<WorkflowInstance, String> {
        let mut next = WorkflowInstance::fresh(def, def_ref);
        for (name, state) in &self.states {
            match next.states.get_mut(name) {
                Some(slot) => {
                    *slot = *state;
                    if let (Some(old), Some(target)) = (self.subs.get(name), def.activity(name).and_then(|a| a.sub_workflow())) {
                        let migrated = old.migrate(target, def_ref)?;
                        next.subs.insert(name.clone(), migrated);
                    }
                }
                None if *state == ActivityState::Active => return Err(name.clone()),
                None => {}
            }
        }
        next.complete = next.states.values().all(|s| *s == ActivityState::Completed);
        Ok(next)
    }
}
