//! Append-only event log and canonical snapshots.
//!
//! The log is UTF-8 text with one canonical JSON record per line. Each
//! record carries the seven-Ws event plus a typed payload holding whatever
//! replay needs to rebuild state (ids, description bodies, job results).
//! Replaying the records in order through [`State::apply`] yields exactly
//! the state that produced them.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{DataElement, ElementBinding, JobRecord, WorkingDataset};
use crate::error::{LedgerError, Result};
use crate::kernel::{DescriptionVersion, Event, Properties, Which};
use crate::ledger::State;
use crate::value::{AgentId, ItemId, Timestamp};
use crate::workflow::{Transition, WorkflowDef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record_kind")]
pub enum Payload {
    RegisterDescription { description: ItemId, name: String, version: DescriptionVersion },
    AddVersion { description: ItemId, version: DescriptionVersion },
    CreateItem { item: ItemId, description: ItemId, version: u32, properties: Properties },
    Migrate { item: ItemId, from: u32, to: u32, properties: Properties },
    Transition { item: ItemId, activity: String, transition: Transition, outcome: Option<Properties> },
    RegisterDataset { dataset: ItemId, study_metadata: Properties, elements: Vec<DataElement> },
    RegisterPipeline {
        pipeline: ItemId,
        script_location: String,
        env_settings: Properties,
        common_dirs: Vec<String>,
        stages: WorkflowDef,
    },
    DefineAnalysis {
        analysis: ItemId,
        owner: AgentId,
        derived_from: Option<ItemId>,
        working_dataset: Option<WorkingDataset>,
        working_pipeline: Option<ItemId>,
        parameters: Properties,
    },
    SetWorkingDataset { analysis: ItemId, dataset: ItemId, elements: Vec<ItemId> },
    SetWorkingPipeline { analysis: ItemId, pipeline: ItemId, parameters: Properties },
    RunAnalysis { analysis: ItemId, elements: Vec<ElementBinding> },
    JobFinished { analysis: ItemId, element: ItemId, job: JobRecord },
    Consolidate { analysis: ItemId },
    Annotate { analysis: ItemId, text: String },
    Share { analysis: ItemId, target: AgentId },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::RegisterDescription { .. } => "RegisterDescription",
            Payload::AddVersion { .. } => "AddVersion",
            Payload::CreateItem { .. } => "CreateItem",
            Payload::Migrate { .. } => "Migrate",
            Payload::Transition { .. } => "Transition",
            Payload::RegisterDataset { .. } => "RegisterDataset",
            Payload::RegisterPipeline { .. } => "RegisterPipeline",
            Payload::DefineAnalysis { .. } => "DefineAnalysis",
            Payload::SetWorkingDataset { .. } => "SetWorkingDataset",
            Payload::SetWorkingPipeline { .. } => "SetWorkingPipeline",
            Payload::RunAnalysis { .. } => "RunAnalysis",
            Payload::JobFinished { .. } => "JobFinished",
            Payload::Consolidate { .. } => "Consolidate",
            Payload::Annotate { .. } => "Annotate",
            Payload::Share { .. } => "Share",
        }
    }

    pub(crate) fn is_kernel(&self) -> bool {
        matches!(
            self,
            Payload::RegisterDescription { .. }
                | Payload::AddVersion { .. }
                | Payload::CreateItem { .. }
                | Payload::Migrate { .. }
                | Payload::Transition { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event: Event,
    pub payload: Payload,
}

/// A record before sequencing. Fields are checked for seven-Ws totality by
/// [`Store::append_event`] before anything is written.
#[derive(Clone, Debug)]
pub struct PendingRecord {
    pub who: String,
    pub which: Option<Which>,
    pub what: String,
    pub when: Option<Timestamp>,
    pub where_: String,
    pub why: String,
    pub how: Properties,
    pub payload: Payload,
}

#[derive(Debug)]
enum Sink {
    Memory(Vec<String>),
    File { path: PathBuf, file: File },
}

/// The single writer over a log.
#[derive(Debug)]
pub struct Store {
    sink: Sink,
    last_seq: u64,
}

impl Store {
    pub fn in_memory() -> Self {
        Store { sink: Sink::Memory(Vec::new()), last_seq: 0 }
    }

    /// Opens (creating if absent) a log file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<(Store, State)> {
        let path = path.as_ref().to_path_buf();
        let state = if path.exists() {
            let f = File::open(&path)?;
            replay(BufReader::new(f))?
        } else {
            State::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let last_seq = state.last_seq();
        Ok((Store { sink: Sink::File { path, file }, last_seq }, state))
    }

    /// Resumes an in-memory log from previously written lines.
    pub fn from_lines(lines: Vec<String>) -> Result<(Store, State)> {
        let state = replay_lines(lines.iter().map(String::as_str))?;
        let last_seq = state.last_seq();
        Ok((Store { sink: Sink::Memory(lines), last_seq }, state))
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory(_) => None,
        }
    }

    /// In-memory lines, if this store is not file backed.
    pub fn lines(&self) -> Option<&[String]> {
        match &self.sink {
            Sink::Memory(lines) => Some(lines),
            Sink::File { .. } => None,
        }
    }

    /// Validates, sequences and durably appends one record.
    pub fn append_event(&mut self, rec: PendingRecord) -> Result<EventRecord> {
        let who = AgentId::new(rec.who).map_err(|_| LedgerError::MalformedRecord("who"))?;
        let which = rec.which.ok_or(LedgerError::MalformedRecord("which"))?;
        if which.version == 0 {
            return Err(LedgerError::MalformedRecord("which"));
        }
        if rec.what.trim().is_empty() {
            return Err(LedgerError::MalformedRecord("what"));
        }
        let when = rec.when.ok_or(LedgerError::MalformedRecord("when"))?;
        if rec.where_.trim().is_empty() {
            return Err(LedgerError::MalformedRecord("where"));
        }
        let record = EventRecord {
            event: Event {
                seq: self.last_seq + 1,
                who,
                which,
                what: rec.what,
                when,
                where_: rec.where_,
                why: rec.why,
                how: rec.how,
            },
            payload: rec.payload,
        };
        let mut line = canonical_json(&record);
        match &mut self.sink {
            Sink::Memory(lines) => lines.push(line),
            Sink::File { file, .. } => {
                line.push('\n');
                file.write_all(line.as_bytes())?;
                file.flush()?;
            }
        }
        self.last_seq += 1;
        Ok(record)
    }
}

/// Rebuilds state from a log. A final line without a trailing newline that
/// fails to parse is treated as a torn write and ignored; any other bad line
/// is reported with its 1-based line number.
pub fn replay<R: BufRead>(mut reader: R) -> Result<State> {
    let mut state = State::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| LedgerError::CorruptLog { line: line_no + 1, reason: e.to_string() })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim_end_matches(['\n', '\r']);
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<EventRecord>(text) {
            Ok(rec) => apply_checked(&mut state, &rec, line_no)?,
            Err(_) if !complete => break,
            Err(e) => return Err(LedgerError::CorruptLog { line: line_no, reason: e.to_string() }),
        }
    }
    Ok(state)
}

pub fn replay_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<State> {
    let mut state = State::new();
    for (i, text) in lines.into_iter().enumerate() {
        let rec: EventRecord =
            serde_json::from_str(text).map_err(|e| LedgerError::CorruptLog { line: i + 1, reason: e.to_string() })?;
        apply_checked(&mut state, &rec, i + 1)?;
    }
    Ok(state)
}

fn apply_checked(state: &mut State, rec: &EventRecord, line: usize) -> Result<()> {
    if rec.event.seq != state.last_seq() + 1 {
        return Err(LedgerError::CorruptLog {
            line,
            reason: format!("expected seq {}, found {}", state.last_seq() + 1, rec.event.seq),
        });
    }
    state.apply(rec).map_err(|reason| LedgerError::CorruptLog { line, reason })
}

/// Deterministic serialization of the whole state: object keys sorted,
/// lists in seq order, no whitespace.
pub fn snapshot(state: &State) -> String {
    canonical_json(state)
}

/// Serializes any value as canonical JSON (sorted keys, compact).
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("ledger types serialize to JSON");
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out
}

fn write_canonical(v: &serde_json::Value, out: &mut String) {
    use serde_json::Value as J;
    match v {
        J::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        J::Array(items) => {
            out.push('[');
            for (i, x) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}
