use thiserror::Error;

use crate::value::ItemId;
use crate::workflow::{join_violations, Violation, WorkflowError};

pub type Result<T, E = LedgerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("invalid workflow graph: {}", join_violations(.0))]
    InvalidGraph(Vec<Violation>),
    #[error("duplicate name {0:?}")]
    DuplicateName(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("unknown description {0}")]
    UnknownDescription(ItemId),
    #[error("unknown version {version} of description {description}")]
    UnknownVersion { description: ItemId, version: u32 },
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("unknown activity {0:?}")]
    UnknownActivity(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(ItemId),
    #[error("unknown pipeline {0}")]
    UnknownPipeline(ItemId),
    #[error("unknown analysis {0}")]
    UnknownAnalysis(ItemId),
    #[error("unknown data element {0}")]
    UnknownElement(ItemId),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("invalid predicate {0:?}")]
    InvalidPredicate(String),

    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("activity {0:?} is not enabled")]
    NotEnabled(String),
    #[error("active activity {0:?} does not exist in the target version")]
    ActiveConflict(String),
    #[error("duplicate data element {0}")]
    DuplicateElement(ItemId),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),

    #[error("{agent} does not own analysis {analysis}")]
    NotOwner { analysis: ItemId, agent: String },
    #[error("analysis {analysis} is not visible to {agent}")]
    NotVisible { analysis: ItemId, agent: String },
    #[error("element selection is empty")]
    EmptySelection,
    #[error("analysis {0} needs both a working dataset and a working pipeline")]
    IncompleteDefinition(ItemId),
    #[error("analysis {0} is not in a terminal state")]
    NotTerminal(ItemId),
    #[error("analysis {0} has already been executed")]
    AlreadyExecuted(ItemId),

    #[error("invalid broker configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed record: missing {0}")]
    MalformedRecord(&'static str),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

/// Coarse grouping used by the service surface to pick a status code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Forbidden,
    NotFound,
    Unprocessable,
    Internal,
}

impl LedgerError {
    pub fn class(&self) -> ErrorClass {
        use LedgerError::*;
        match self {
            NotOwner { .. } | NotVisible { .. } => ErrorClass::Forbidden,
            UnknownDescription(_) | UnknownVersion { .. } | UnknownItem(_) | UnknownActivity(_)
            | UnknownDataset(_) | UnknownPipeline(_) | UnknownAnalysis(_) | UnknownElement(_)
            | UnknownJob(_) | UnknownField(_) => ErrorClass::NotFound,
            StorageFailure(_) | CorruptLog { .. } => ErrorClass::Internal,
            _ => ErrorClass::Unprocessable,
        }
    }

    /// Stable variant name, used in diagnostics and response bodies.
    pub fn code(&self) -> &'static str {
        use LedgerError::*;
        match self {
            InvalidGraph(_) => "InvalidGraph",
            DuplicateName(_) => "DuplicateName",
            SchemaViolation(_) => "SchemaViolation",
            UnknownDescription(_) => "UnknownDescription",
            UnknownVersion { .. } => "UnknownVersion",
            UnknownItem(_) => "UnknownItem",
            UnknownActivity(_) => "UnknownActivity",
            UnknownDataset(_) => "UnknownDataset",
            UnknownPipeline(_) => "UnknownPipeline",
            UnknownAnalysis(_) => "UnknownAnalysis",
            UnknownElement(_) => "UnknownElement",
            UnknownJob(_) => "UnknownJob",
            UnknownField(_) => "UnknownField",
            InvalidPredicate(_) => "InvalidPredicate",
            IllegalTransition(_) => "IllegalTransition",
            NotEnabled(_) => "NotEnabled",
            ActiveConflict(_) => "ActiveConflict",
            DuplicateElement(_) => "DuplicateElement",
            TypeMismatch(_) => "TypeMismatch",
            NotOwner { .. } => "NotOwner",
            NotVisible { .. } => "NotVisible",
            EmptySelection => "EmptySelection",
            IncompleteDefinition(_) => "IncompleteDefinition",
            NotTerminal(_) => "NotTerminal",
            AlreadyExecuted(_) => "AlreadyExecuted",
            InvalidConfig(_) => "InvalidConfig",
            MalformedRecord(_) => "MalformedRecord",
            StorageFailure(_) => "StorageFailure",
            CorruptLog { .. } => "CorruptLog",
        }
    }
}

impl From<WorkflowError> for LedgerError {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::InvalidGraph(v) => LedgerError::InvalidGraph(v),
            WorkflowError::UnknownActivity(a) => LedgerError::UnknownActivity(a),
            WorkflowError::NotEnabled(a) => LedgerError::NotEnabled(a),
            e @ (WorkflowError::IllegalTransition { .. } | WorkflowError::SubWorkflowIncomplete(_)) => {
                LedgerError::IllegalTransition(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for LedgerError {
    fn from(e: std::io::Error) -> Self {
        LedgerError::StorageFailure(e.to_string())
    }
}
