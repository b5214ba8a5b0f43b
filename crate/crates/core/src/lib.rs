//! itemledger: description-driven items, workflows and analyses over an
//! append-only event log.

pub mod analysis;
pub mod broker;
pub mod clock;
pub mod error;
pub mod gateway;
pub mod kernel;
pub mod ledger;
pub mod provenance;
pub mod store;
pub mod value;
pub mod workflow;

pub use analysis::{
    Analysis, AnalysisElement, AnalysisSummary, AnalysisView, ConsolidationSummary, DataElement, Dataset, ElementSpec,
    FileRef, Phase, Pipeline, RerunDelta, ResultState,
};
pub use broker::{Broker, BrokerConfig, JobId, JobResult, JobState};
pub use clock::{Clock, FixedClock, IdSource, RandomIds, SeededIds, SteppingClock, SystemClock};
pub use error::{ErrorClass, LedgerError, Result};
pub use kernel::{DescriptionPayload, Event, FieldDef, Item, ItemDescription, Properties, PropertySchema, Which};
pub use ledger::{Ledger, State};
pub use value::{AgentId, ItemId, Timestamp, Value, ValueKind};
pub use workflow::{ActivityDef, ActivityState, Edge, Transition, WorkflowDef, WorkflowInstance};
pub use provenance::{
    export_prov, export_table, query_events, query_items, Format, ItemKind, Op, Predicate, ProvDocument, ResultTable, Viewer,
};
