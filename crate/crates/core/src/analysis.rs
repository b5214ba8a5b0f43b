//! Datasets, pipelines and user-owned analyses.
//!
//! An analysis moves through four phases, never backwards:
//! Investigation → Definition → Execution → Consolidation. Running it fans
//! out one [`AnalysisElement`] per selected data element; each element walks
//! its own instance of the pipeline's stage graph, one broker job per
//! activity, until it completes or an activity fails. A failure halts only
//! the element it happened in.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::broker::{Broker, Job, JobId, JobResult, JobState};
use crate::error::{LedgerError, Result};
use crate::kernel::{
    DescriptionVersion, Event, FieldDef, Item, ItemDescription, Properties, PropertySchema, Which,
};
use crate::ledger::{Ledger, State};
use crate::store::{EventRecord, Payload};
use crate::value::{AgentId, ItemId, Timestamp, Value, ValueKind};
use crate::workflow::{
    instantiate_workflow, validate_graph, ActivityKind, ActivityState, DefRef, Transition, WorkflowDef,
};

pub const DATASET_DESCRIPTION: ItemId = ItemId::from_u128(0x1d1e_0000_0000_4000_8000_0000_0000_0001);
pub const PIPELINE_DESCRIPTION: ItemId = ItemId::from_u128(0x1d1e_0000_0000_4000_8000_0000_0000_0002);
pub const ANALYSIS_DESCRIPTION: ItemId = ItemId::from_u128(0x1d1e_0000_0000_4000_8000_0000_0000_0003);

pub const SYSTEM_AGENT: &str = "system";

/// Descriptions every store starts with; domain objects are Items
/// instantiated from version 1 of these.
pub fn builtin_descriptions() -> Vec<ItemDescription> {
    let system = AgentId::new(SYSTEM_AGENT).expect("non-empty");
    let version = |schema: Vec<FieldDef>, workflow: WorkflowDef| DescriptionVersion {
        number: 1,
        property_schema: PropertySchema::new(schema),
        workflow_def: workflow,
        outcome_schemas: BTreeMap::new(),
        created_by: system.clone(),
        created_at: Timestamp::EPOCH,
    };
    vec![
        ItemDescription {
            id: DATASET_DESCRIPTION,
            name: "Dataset".into(),
            versions: vec![version(vec![FieldDef::required("element_count", ValueKind::Integer)], WorkflowDef::single("Curate"))],
        },
        ItemDescription {
            id: PIPELINE_DESCRIPTION,
            name: "Pipeline".into(),
            versions: vec![version(
                vec![
                    FieldDef::required("script_location", ValueKind::Text),
                    FieldDef::required("stage_count", ValueKind::Integer),
                ],
                WorkflowDef::single("Curate"),
            )],
        },
        ItemDescription {
            id: ANALYSIS_DESCRIPTION,
            name: "Analysis".into(),
            versions: vec![version(
                vec![FieldDef::required("owner", ValueKind::Text)],
                WorkflowDef::chain(&Phase::ALL.map(|p| p.name())),
            )],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataElement {
    pub id: ItemId,
    pub files: Vec<FileRef>,
    #[serde(default)]
    pub metadata: Properties,
}

/// A data element as supplied for registration; the id is generated when
/// absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    #[serde(default)]
    pub id: Option<ItemId>,
    pub files: Vec<FileRef>,
    #[serde(default)]
    pub metadata: Properties,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: ItemId,
    pub study_metadata: Properties,
    pub elements: Vec<DataElement>,
}

impl Dataset {
    pub fn element(&self, id: ItemId) -> Option<&DataElement> {
        self.elements.iter().find(|e| e.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub id: ItemId,
    pub script_location: String,
    pub env_settings: Properties,
    pub common_dirs: Vec<String>,
    pub stages: WorkflowDef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Investigation,
    Definition,
    Execution,
    Consolidation,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Investigation, Phase::Definition, Phase::Execution, Phase::Consolidation];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Investigation => "Investigation",
            Phase::Definition => "Definition",
            Phase::Execution => "Execution",
            Phase::Consolidation => "Consolidation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingDataset {
    pub dataset: ItemId,
    pub elements: Vec<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub agent: AgentId,
    pub at: Timestamp,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResultState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl ResultState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ResultState::Succeeded | ResultState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisElement {
    pub id: ItemId,
    pub analysis: ItemId,
    pub data_element: ItemId,
    pub workflow: crate::workflow::WorkflowInstance,
    pub job_ids: Vec<JobId>,
    pub result_state: ResultState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub id: ItemId,
    pub owner: AgentId,
    pub shared_with: BTreeSet<AgentId>,
    pub phase: Phase,
    pub working_dataset: Option<WorkingDataset>,
    pub working_pipeline: Option<ItemId>,
    pub parameters: Properties,
    pub elements: Vec<AnalysisElement>,
    pub annotations: Vec<Annotation>,
    pub derived_from: Option<ItemId>,
    pub created_seq: u64,
}

impl Analysis {
    pub fn visible_to(&self, agent: &AgentId) -> bool {
        &self.owner == agent || self.shared_with.contains(agent)
    }

    fn count(&self, state: ResultState) -> usize {
        self.elements.iter().filter(|e| e.result_state == state).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementBinding {
    pub id: ItemId,
    pub data_element: ItemId,
}

/// A finished broker job as stored in the analysis base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub analysis: ItemId,
    pub element: ItemId,
    pub job: Job,
    pub result: JobResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub id: ItemId,
    pub owner: AgentId,
    pub shared_with: BTreeSet<AgentId>,
    pub phase: Phase,
    pub working_dataset: Option<WorkingDataset>,
    pub working_pipeline: Option<ItemId>,
    pub parameters: Properties,
    pub derived_from: Option<ItemId>,
    pub pending: usize,
    pub running: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub annotations: usize,
}

/// Full detail of one analysis together with its finished jobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisView {
    pub analysis: Analysis,
    pub jobs: Vec<JobRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job: JobId,
    pub activity: String,
    pub resource: String,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub duration_ms: u64,
    pub success: bool,
    pub output_ref: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementSummary {
    pub element: ItemId,
    pub data_element: ItemId,
    pub result_state: ResultState,
    pub jobs: Vec<JobSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationSummary {
    pub analysis: ItemId,
    pub rows: Vec<ElementSummary>,
}

impl ConsolidationSummary {
    pub fn count(&self, state: ResultState) -> usize {
        self.rows.iter().filter(|r| r.result_state == state).count()
    }
}

/// Changes applied when re-running a consolidated analysis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RerunDelta {
    /// Merged over the source analysis parameters.
    #[serde(default)]
    pub parameters: Option<Properties>,
    /// Replaces the source element selection (same dataset).
    #[serde(default)]
    pub elements: Option<Vec<ItemId>>,
}

const RUN: &str = "Run";

/// Rebuilds a consolidation summary from the event log alone: the latest
/// `Run` event of the analysis names its elements and stage count, and each
/// job event carries its timings and result.
pub fn summary_from_events(events: &[Event], analysis: ItemId) -> Option<ConsolidationSummary> {
    let run = events.iter().rev().find(|e| e.which.item == analysis && e.what == RUN)?;
    let stages = match run.how.get("stages") {
        Some(Value::Integer(n)) => *n as usize,
        _ => return None,
    };
    let mut bindings: BTreeMap<i64, (Option<ItemId>, Option<ItemId>)> = BTreeMap::new();
    for (k, v) in &run.how {
        let (slot, idx) = if let Some(i) = k.strip_prefix("element.") {
            (0, i)
        } else if let Some(i) = k.strip_prefix("data_element.") {
            (1, i)
        } else {
            continue;
        };
        let (Ok(idx), Value::Reference(id)) = (idx.parse::<i64>(), v) else { return None };
        let entry = bindings.entry(idx).or_default();
        if slot == 0 {
            entry.0 = Some(*id);
        } else {
            entry.1 = Some(*id);
        }
    }
    let mut rows = Vec::with_capacity(bindings.len());
    for (element, data_element) in bindings.into_values() {
        let (element, data_element) = (element?, data_element?);
        let mut jobs = Vec::new();
        for e in events.iter().filter(|e| e.seq > run.seq && e.which.item == element) {
            let Some((activity, outcome)) = e.what.rsplit_once(':') else { continue };
            if outcome != "Complete" && outcome != "Fail" {
                continue;
            }
            let int = |k: &str| match e.how.get(k) {
                Some(Value::Integer(i)) => Some(*i),
                _ => None,
            };
            let ts = |k: &str| match e.how.get(k) {
                Some(Value::Timestamp(t)) => Some(*t),
                _ => None,
            };
            let text = |k: &str| match e.how.get(k) {
                Some(Value::Text(s)) => Some(s.clone()),
                _ => None,
            };
            jobs.push(JobSummary {
                job: int("job")? as JobId,
                activity: activity.to_string(),
                resource: text("resource")?,
                started_at: ts("started_at")?,
                finished_at: ts("finished_at")?,
                duration_ms: int("duration_ms")? as u64,
                success: matches!(e.how.get("success"), Some(Value::Boolean(true))),
                output_ref: text("output_ref")?,
            });
        }
        let failed = jobs.iter().any(|j| !j.success);
        let result_state = if failed {
            ResultState::Failed
        } else if jobs.len() == stages {
            ResultState::Succeeded
        } else if jobs.is_empty() {
            ResultState::Pending
        } else {
            ResultState::Running
        };
        rows.push(ElementSummary { element, data_element, result_state, jobs });
    }
    Some(ConsolidationSummary { analysis, rows })
}

fn sync_phase(item: &mut Item, phase: Phase) {
    for p in Phase::ALL {
        let s = match p.cmp(&phase) {
            std::cmp::Ordering::Less => ActivityState::Completed,
            std::cmp::Ordering::Equal if phase == Phase::Consolidation => ActivityState::Completed,
            std::cmp::Ordering::Equal => ActivityState::Active,
            std::cmp::Ordering::Greater => ActivityState::Waiting,
        };
        item.workflow.states.insert(p.name().to_string(), s);
    }
    item.workflow.complete = item.workflow.states.values().all(|s| *s == ActivityState::Completed);
}

impl State {
    pub fn dataset(&self, id: ItemId) -> Result<&Dataset> {
        self.datasets.get(&id).ok_or(LedgerError::UnknownDataset(id))
    }

    pub fn pipeline(&self, id: ItemId) -> Result<&Pipeline> {
        self.pipelines.get(&id).ok_or(LedgerError::UnknownPipeline(id))
    }

    pub fn analysis(&self, id: ItemId) -> Result<&Analysis> {
        self.analyses.get(&id).ok_or(LedgerError::UnknownAnalysis(id))
    }

    pub fn jobs_of(&self, analysis: ItemId) -> Vec<JobRecord> {
        self.jobs.iter().filter(|j| j.analysis == analysis).cloned().collect()
    }

    pub(crate) fn apply_analysis(&mut self, rec: &EventRecord) -> std::result::Result<(), String> {
        let ev = &rec.event;
        match &rec.payload {
            Payload::RegisterDataset { dataset, study_metadata, elements } => {
                let props = Properties::from([("element_count".into(), Value::Integer(elements.len() as i64))]);
                let item = self.new_item(*dataset, DATASET_DESCRIPTION, 1, props, ev.seq)?;
                self.items.insert(*dataset, item);
                self.datasets.insert(
                    *dataset,
                    Dataset { id: *dataset, study_metadata: study_metadata.clone(), elements: elements.clone() },
                );
            }
            Payload::RegisterPipeline { pipeline, script_location, env_settings, common_dirs, stages } => {
                let props = Properties::from([
                    ("script_location".into(), Value::text(script_location.clone())),
                    ("stage_count".into(), Value::Integer(stages.activities.len() as i64)),
                ]);
                let item = self.new_item(*pipeline, PIPELINE_DESCRIPTION, 1, props, ev.seq)?;
                self.items.insert(*pipeline, item);
                self.pipelines.insert(
                    *pipeline,
                    Pipeline {
                        id: *pipeline,
                        script_location: script_location.clone(),
                        env_settings: env_settings.clone(),
                        common_dirs: common_dirs.clone(),
                        stages: stages.clone(),
                    },
                );
            }
            Payload::DefineAnalysis { analysis, owner, derived_from, working_dataset, working_pipeline, parameters } => {
                let props = Properties::from([("owner".into(), Value::text(owner.as_str()))]);
                let mut item = self.new_item(*analysis, ANALYSIS_DESCRIPTION, 1, props, ev.seq)?;
                let phase = if working_dataset.is_some() { Phase::Definition } else { Phase::Investigation };
                sync_phase(&mut item, phase);
                self.items.insert(*analysis, item);
                self.analyses.insert(
                    *analysis,
                    Analysis {
                        id: *analysis,
                        owner: owner.clone(),
                        shared_with: BTreeSet::new(),
                        phase,
                        working_dataset: working_dataset.clone(),
                        working_pipeline: *working_pipeline,
                        parameters: parameters.clone(),
                        elements: Vec::new(),
                        annotations: Vec::new(),
                        derived_from: *derived_from,
                        created_seq: ev.seq,
                    },
                );
            }
            Payload::SetWorkingDataset { analysis, dataset, elements } => {
                let a = self.analyses.get_mut(analysis).ok_or("unknown analysis")?;
                a.working_dataset = Some(WorkingDataset { dataset: *dataset, elements: elements.clone() });
                if a.phase == Phase::Investigation {
                    a.phase = Phase::Definition;
                    let phase = a.phase;
                    sync_phase(self.items.get_mut(analysis).ok_or("analysis item missing")?, phase);
                }
            }
            Payload::SetWorkingPipeline { analysis, pipeline, parameters } => {
                let a = self.analyses.get_mut(analysis).ok_or("unknown analysis")?;
                a.working_pipeline = Some(*pipeline);
                a.parameters = parameters.clone();
            }
            Payload::RunAnalysis { analysis, elements } => {
                let a = self.analyses.get(analysis).ok_or("unknown analysis")?;
                let pipeline = a.working_pipeline.ok_or("analysis has no pipeline")?;
                let stages = &self.pipelines.get(&pipeline).ok_or("unknown pipeline")?.stages;
                let def_ref = DefRef { description: pipeline, version: 1 };
                let mut built = Vec::with_capacity(elements.len());
                for b in elements {
                    built.push(AnalysisElement {
                        id: b.id,
                        analysis: *analysis,
                        data_element: b.data_element,
                        workflow: instantiate_workflow(stages, def_ref).map_err(|e| e.to_string())?,
                        job_ids: Vec::new(),
                        result_state: ResultState::Pending,
                    });
                }
                let a = self.analyses.get_mut(analysis).expect("checked");
                a.elements = built;
                a.phase = Phase::Execution;
                sync_phase(self.items.get_mut(analysis).ok_or("analysis item missing")?, Phase::Execution);
            }
            Payload::JobFinished { analysis, element, job } => {
                let a = self.analyses.get_mut(analysis).ok_or("unknown analysis")?;
                let el = a.elements.iter_mut().find(|e| e.id == *element).ok_or("unknown analysis element")?;
                let outcome = if job.result.success { Transition::Complete } else { Transition::Fail };
                let wf = el.workflow.fire_transition(&job.job.activity, Transition::Start).map_err(|e| e.to_string())?;
                el.workflow = wf.fire_transition(&job.job.activity, outcome).map_err(|e| e.to_string())?;
                el.job_ids.push(job.job.id);
                el.result_state = if el.result_state == ResultState::Failed || !job.result.success {
                    ResultState::Failed
                } else if el.workflow.complete {
                    ResultState::Succeeded
                } else {
                    ResultState::Running
                };
                self.jobs.push(job.clone());
            }
            Payload::Consolidate { analysis } => {
                let a = self.analyses.get_mut(analysis).ok_or("unknown analysis")?;
                a.phase = Phase::Consolidation;
                sync_phase(self.items.get_mut(analysis).ok_or("analysis item missing")?, Phase::Consolidation);
            }
            Payload::Annotate { analysis, text } => {
                let a = self.analyses.get_mut(analysis).ok_or("unknown analysis")?;
                a.annotations.push(Annotation { agent: ev.who.clone(), at: ev.when, text: text.clone() });
            }
            Payload::Share { analysis, target } => {
                let a = self.analyses.get_mut(analysis).ok_or("unknown analysis")?;
                if &a.owner != target {
                    a.shared_with.insert(target.clone());
                }
            }
            _ => unreachable!("kernel payload routed to analysis"),
        }
        Ok(())
    }
}

impl Ledger {
    fn owned_analysis(&self, analysis: ItemId, agent: &AgentId) -> Result<&Analysis> {
        let a = self.state().analysis(analysis)?;
        if &a.owner != agent {
            return Err(LedgerError::NotOwner { analysis, agent: agent.to_string() });
        }
        Ok(a)
    }

    fn visible_analysis(&self, analysis: ItemId, agent: &AgentId) -> Result<&Analysis> {
        let a = self.state().analysis(analysis)?;
        if !a.visible_to(agent) {
            return Err(LedgerError::NotVisible { analysis, agent: agent.to_string() });
        }
        Ok(a)
    }

    fn check_selection(&self, dataset: ItemId, elements: &[ItemId]) -> Result<()> {
        let ds = self.state().dataset(dataset)?;
        if elements.is_empty() {
            return Err(LedgerError::EmptySelection);
        }
        let mut seen = BTreeSet::new();
        for e in elements {
            if ds.element(*e).is_none() {
                return Err(LedgerError::UnknownElement(*e));
            }
            if !seen.insert(e) {
                return Err(LedgerError::DuplicateElement(*e));
            }
        }
        Ok(())
    }

    pub fn register_dataset(&mut self, study_metadata: Properties, elements: Vec<ElementSpec>, agent: &AgentId) -> Result<Dataset> {
        let mut seen = BTreeSet::new();
        let mut built = Vec::with_capacity(elements.len());
        for spec in elements {
            if spec.files.is_empty() {
                return Err(LedgerError::SchemaViolation("a data element needs at least one file".into()));
            }
            if spec.files.iter().any(|f| f.path.trim().is_empty()) {
                return Err(LedgerError::SchemaViolation("file paths must be non-empty".into()));
            }
            let id = match spec.id {
                Some(id) => id,
                None => self.fresh_id(),
            };
            if !seen.insert(id) {
                return Err(LedgerError::DuplicateElement(id));
            }
            built.push(DataElement { id, files: spec.files, metadata: spec.metadata });
        }
        let id = self.fresh_id();
        let how = Properties::from([
            ("kind".into(), Value::text("dataset")),
            ("element_count".into(), Value::Integer(built.len() as i64)),
        ]);
        let agent_ = agent.clone();
        self.commit(
            &agent_,
            Which { item: id, version: 1 },
            "Create".into(),
            None,
            None,
            how,
            Payload::RegisterDataset { dataset: id, study_metadata, elements: built },
        )?;
        Ok(self.state().datasets[&id].clone())
    }

    pub fn register_pipeline(
        &mut self,
        script_location: &str,
        env_settings: Properties,
        common_dirs: Vec<String>,
        stages: WorkflowDef,
        agent: &AgentId,
    ) -> Result<Pipeline> {
        if script_location.trim().is_empty() {
            return Err(LedgerError::SchemaViolation("script location must be non-empty".into()));
        }
        validate_graph(&stages).map_err(LedgerError::InvalidGraph)?;
        if let Some(a) = stages.activities.iter().find(|a| matches!(a.kind, ActivityKind::Composite { .. })) {
            return Err(LedgerError::SchemaViolation(format!("pipeline stage {} must be atomic", a.name)));
        }
        let id = self.fresh_id();
        let how = Properties::from([
            ("kind".into(), Value::text("pipeline")),
            ("script_location".into(), Value::text(script_location)),
        ]);
        self.commit(
            agent,
            Which { item: id, version: 1 },
            "Create".into(),
            None,
            None,
            how,
            Payload::RegisterPipeline { pipeline: id, script_location: script_location.into(), env_settings, common_dirs, stages },
        )?;
        Ok(self.state().pipelines[&id].clone())
    }

    pub fn define_analysis(&mut self, owner: &AgentId) -> Result<Analysis> {
        let id = self.fresh_id();
        let how = Properties::from([("kind".into(), Value::text("analysis"))]);
        self.commit(
            owner,
            Which { item: id, version: 1 },
            "Create".into(),
            None,
            None,
            how,
            Payload::DefineAnalysis {
                analysis: id,
                owner: owner.clone(),
                derived_from: None,
                working_dataset: None,
                working_pipeline: None,
                parameters: Properties::new(),
            },
        )?;
        Ok(self.state().analyses[&id].clone())
    }

    pub fn set_working_dataset(&mut self, analysis: ItemId, dataset: ItemId, elements: &[ItemId], agent: &AgentId) -> Result<Analysis> {
        let a = self.owned_analysis(analysis, agent)?;
        if a.phase >= Phase::Execution {
            return Err(LedgerError::AlreadyExecuted(analysis));
        }
        self.check_selection(dataset, elements)?;
        let how = Properties::from([
            ("dataset".into(), Value::Reference(dataset)),
            ("element_count".into(), Value::Integer(elements.len() as i64)),
        ]);
        self.commit(
            agent,
            Which { item: analysis, version: 1 },
            "SetWorkingDataset".into(),
            None,
            None,
            how,
            Payload::SetWorkingDataset { analysis, dataset, elements: elements.to_vec() },
        )?;
        Ok(self.state().analyses[&analysis].clone())
    }

    /// Sets the pipeline and its parameter overrides; a later call replaces
    /// both.
    pub fn set_working_pipeline(&mut self, analysis: ItemId, pipeline: ItemId, parameters: Properties, agent: &AgentId) -> Result<Analysis> {
        let a = self.owned_analysis(analysis, agent)?;
        if a.phase >= Phase::Execution {
            return Err(LedgerError::AlreadyExecuted(analysis));
        }
        self.state().pipeline(pipeline)?;
        let mut how = Properties::from([("pipeline".into(), Value::Reference(pipeline))]);
        how.extend(parameters.iter().map(|(k, v)| (format!("param.{k}"), v.clone())));
        self.commit(
            agent,
            Which { item: analysis, version: 1 },
            "SetWorkingPipeline".into(),
            None,
            None,
            how,
            Payload::SetWorkingPipeline { analysis, pipeline, parameters },
        )?;
        Ok(self.state().analyses[&analysis].clone())
    }

    /// Executes the working pipeline over every selected data element.
    ///
    /// Each enabled activity of each element goes to the broker as one job;
    /// results are recorded one event per job, and the loop repeats until no
    /// element has anything left to run.
    pub fn run_analysis(&mut self, analysis: ItemId, agent: &AgentId, broker: &mut Broker) -> Result<Vec<AnalysisElement>> {
        let a = self.owned_analysis(analysis, agent)?;
        if a.phase >= Phase::Execution {
            return Err(LedgerError::AlreadyExecuted(analysis));
        }
        let (Some(ws), Some(pipeline_id)) = (a.working_dataset.clone(), a.working_pipeline) else {
            return Err(LedgerError::IncompleteDefinition(analysis));
        };
        if a.phase != Phase::Definition {
            return Err(LedgerError::IncompleteDefinition(analysis));
        }
        let pipeline = self.state().pipeline(pipeline_id)?.clone();
        let overrides = a.parameters.clone();

        let bindings: Vec<ElementBinding> =
            ws.elements.iter().map(|de| ElementBinding { id: self.fresh_id_pending(), data_element: *de }).collect();
        let mut how = Properties::from([
            ("pipeline".into(), Value::Reference(pipeline_id)),
            ("dataset".into(), Value::Reference(ws.dataset)),
            ("element_count".into(), Value::Integer(bindings.len() as i64)),
            ("stages".into(), Value::Integer(pipeline.stages.activities.len() as i64)),
        ]);
        for (i, b) in bindings.iter().enumerate() {
            how.insert(format!("element.{i}"), Value::Reference(b.id));
            how.insert(format!("data_element.{i}"), Value::Reference(b.data_element));
        }
        self.commit(
            agent,
            Which { item: analysis, version: 1 },
            RUN.into(),
            None,
            None,
            how,
            Payload::RunAnalysis { analysis, elements: bindings.clone() },
        )?;
        broker.sync_clock(self.now());

        loop {
            let mut submitted: BTreeMap<JobId, (ItemId, ItemId)> = BTreeMap::new();
            for el in &self.state().analyses[&analysis].elements {
                if el.result_state == ResultState::Failed {
                    continue;
                }
                for activity in el.workflow.enabled_activities() {
                    let def = pipeline.stages.activity(&activity).expect("enabled activity is defined");
                    let mut params = def.params.clone();
                    params.extend(pipeline.env_settings.clone());
                    params.extend(overrides.clone());
                    if !pipeline.common_dirs.is_empty() {
                        params.insert("common_dirs".into(), Value::text(pipeline.common_dirs.join(":")));
                    }
                    let script = format!("{}#{}", pipeline.script_location, activity);
                    let id = broker.submit_job(&activity, el.id, &script, params);
                    submitted.insert(id, (el.id, el.data_element));
                }
            }
            if submitted.is_empty() {
                break;
            }
            for result in broker.advance() {
                let Some((element, data_element)) = submitted.get(&result.job).copied() else { continue };
                let mut job = broker.job(result.job).expect("broker returned a known job").clone();
                job.state = JobState::Done;
                self.record_job(analysis, element, data_element, job, result, agent)?;
            }
        }
        Ok(self.state().analyses[&analysis].elements.clone())
    }

    fn fresh_id_pending(&mut self) -> ItemId {
        loop {
            let id = self.fresh_id();
            let taken = self.state().analyses.values().any(|a| a.elements.iter().any(|e| e.id == id));
            if !taken {
                return id;
            }
        }
    }

    fn record_job(
        &mut self,
        analysis: ItemId,
        element: ItemId,
        data_element: ItemId,
        job: Job,
        result: JobResult,
        agent: &AgentId,
    ) -> Result<Event> {
        let what = format!("{}:{}", job.activity, if result.success { "Complete" } else { "Fail" });
        let how = Properties::from([
            ("analysis".into(), Value::Reference(analysis)),
            ("data_element".into(), Value::Reference(data_element)),
            ("job".into(), Value::Integer(job.id as i64)),
            ("script".into(), Value::text(job.script.clone())),
            ("resource".into(), Value::text(result.resource.clone())),
            ("started_at".into(), Value::Timestamp(result.started_at)),
            ("finished_at".into(), Value::Timestamp(result.finished_at)),
            ("duration_ms".into(), Value::Integer(result.duration_ms as i64)),
            ("success".into(), Value::Boolean(result.success)),
            ("output_ref".into(), Value::text(result.output_ref.clone())),
        ]);
        let where_ = result.resource.clone();
        self.commit(
            agent,
            Which { item: element, version: 1 },
            what,
            Some(&where_),
            None,
            how,
            Payload::JobFinished { analysis, element, job: JobRecord { analysis, element, job, result } },
        )
    }

    pub fn consolidate(&mut self, analysis: ItemId, agent: &AgentId) -> Result<ConsolidationSummary> {
        let a = self.visible_analysis(analysis, agent)?;
        let terminal = a.phase >= Phase::Execution && a.elements.iter().all(|e| e.result_state.is_terminal());
        if !terminal {
            return Err(LedgerError::NotTerminal(analysis));
        }
        let how = Properties::from([
            ("succeeded".into(), Value::Integer(a.count(ResultState::Succeeded) as i64)),
            ("failed".into(), Value::Integer(a.count(ResultState::Failed) as i64)),
        ]);
        self.commit(
            agent,
            Which { item: analysis, version: 1 },
            "Consolidate".into(),
            None,
            None,
            how,
            Payload::Consolidate { analysis },
        )?;
        Ok(self.summary(analysis).expect("analysis exists"))
    }

    /// Summary built from live state.
    pub fn summary(&self, analysis: ItemId) -> Result<ConsolidationSummary> {
        let st = self.state();
        let a = st.analysis(analysis)?;
        let rows = a
            .elements
            .iter()
            .map(|el| ElementSummary {
                element: el.id,
                data_element: el.data_element,
                result_state: el.result_state,
                jobs: el
                    .job_ids
                    .iter()
                    .filter_map(|id| st.jobs.iter().find(|j| j.job.id == *id))
                    .map(|j| JobSummary {
                        job: j.job.id,
                        activity: j.job.activity.clone(),
                        resource: j.result.resource.clone(),
                        started_at: j.result.started_at,
                        finished_at: j.result.finished_at,
                        duration_ms: j.result.duration_ms,
                        success: j.result.success,
                        output_ref: j.result.output_ref.clone(),
                    })
                    .collect(),
            })
            .collect();
        Ok(ConsolidationSummary { analysis, rows })
    }

    pub fn annotate(&mut self, analysis: ItemId, text: &str, agent: &AgentId) -> Result<Analysis> {
        self.visible_analysis(analysis, agent)?;
        self.commit(
            agent,
            Which { item: analysis, version: 1 },
            "Annotate".into(),
            None,
            Some(text.to_string()),
            Properties::new(),
            Payload::Annotate { analysis, text: text.into() },
        )?;
        Ok(self.state().analyses[&analysis].clone())
    }

    pub fn share_analysis(&mut self, analysis: ItemId, target: &AgentId, agent: &AgentId) -> Result<Analysis> {
        self.owned_analysis(analysis, agent)?;
        let how = Properties::from([("target".into(), Value::text(target.as_str()))]);
        self.commit(
            agent,
            Which { item: analysis, version: 1 },
            "Share".into(),
            None,
            None,
            how,
            Payload::Share { analysis, target: target.clone() },
        )?;
        Ok(self.state().analyses[&analysis].clone())
    }

    /// Creates a new analysis owned by `agent`, derived from a consolidated
    /// one with `delta` applied, and runs it. The source is never modified.
    pub fn rerun_analysis(&mut self, analysis: ItemId, delta: &RerunDelta, agent: &AgentId, broker: &mut Broker) -> Result<Analysis> {
        let src = self.visible_analysis(analysis, agent)?;
        if src.phase != Phase::Consolidation {
            return Err(LedgerError::NotTerminal(analysis));
        }
        let (Some(ws), Some(pipeline)) = (src.working_dataset.clone(), src.working_pipeline) else {
            return Err(LedgerError::IncompleteDefinition(analysis));
        };
        let mut parameters = src.parameters.clone();
        if let Some(p) = &delta.parameters {
            parameters.extend(p.clone());
        }
        let elements = delta.elements.clone().unwrap_or(ws.elements);
        self.check_selection(ws.dataset, &elements)?;

        let id = self.fresh_id();
        let how = Properties::from([("source".into(), Value::Reference(analysis))]);
        self.commit(
            agent,
            Which { item: id, version: 1 },
            "Derive".into(),
            None,
            None,
            how,
            Payload::DefineAnalysis {
                analysis: id,
                owner: agent.clone(),
                derived_from: Some(analysis),
                working_dataset: Some(WorkingDataset { dataset: ws.dataset, elements }),
                working_pipeline: Some(pipeline),
                parameters,
            },
        )?;
        self.run_analysis(id, agent, broker)?;
        Ok(self.state().analyses[&id].clone())
    }

    pub fn analysis_view(&self, analysis: ItemId, agent: &AgentId) -> Result<AnalysisView> {
        let a = self.visible_analysis(analysis, agent)?.clone();
        Ok(AnalysisView { jobs: self.state().jobs_of(analysis), analysis: a })
    }

    pub fn list_analyses(&self, agent: &AgentId) -> Vec<AnalysisSummary> {
        let mut visible: Vec<&Analysis> = self.state().analyses.values().filter(|a| a.visible_to(agent)).collect();
        visible.sort_by_key(|a| a.created_seq);
        visible
            .into_iter()
            .map(|a| AnalysisSummary {
                id: a.id,
                owner: a.owner.clone(),
                shared_with: a.shared_with.clone(),
                phase: a.phase,
                working_dataset: a.working_dataset.clone(),
                working_pipeline: a.working_pipeline,
                parameters: a.parameters.clone(),
                derived_from: a.derived_from,
                pending: a.count(ResultState::Pending),
                running: a.count(ResultState::Running),
                succeeded: a.count(ResultState::Succeeded),
                failed: a.count(ResultState::Failed),
                annotations: a.annotations.len(),
            })
            .collect()
    }

    /// First JobId a new broker should hand out for this store.
    pub fn next_job_id(&self) -> JobId {
        self.state().jobs.iter().map(|j| j.job.id).max().unwrap_or(0) + 1
    }
}
