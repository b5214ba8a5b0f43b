//! Items and their versioned descriptions.
//!
//! A description is the meta-object: a property schema, a lifecycle
//! workflow and the outcome schemas of its activities. Descriptions only ever
//! grow by appending versions; Items pin one version and can later be
//! migrated up or down. Every accepted change is committed as exactly one
//! [`Event`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{LedgerError, Result};
use crate::ledger::{Ledger, State};
use crate::store::{EventRecord, Payload};
use crate::value::{AgentId, ItemId, Timestamp, Value, ValueKind};
use crate::workflow::{instantiate_workflow, validate_graph, DefRef, Transition, WorkflowDef, WorkflowInstance};

pub type Properties = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: ValueKind,
    #[serde(default)]
    pub required: bool,
}

impl FieldDef {
    pub fn required(name: impl Into<String>, kind: ValueKind) -> Self {
        FieldDef { name: name.into(), kind, required: true }
    }

    pub fn optional(name: impl Into<String>, kind: ValueKind) -> Self {
        FieldDef { name: name.into(), kind, required: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PropertySchema {
    pub entries: Vec<FieldDef>,
}

impl PropertySchema {
    pub fn new(entries: Vec<FieldDef>) -> Self {
        PropertySchema { entries }
    }

    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.entries.iter().find(|f| f.name == name)
    }

    fn check_names(&self) -> Result<()> {
        check_field_names(&self.entries)
    }

    /// Checks `props` against the schema and returns them with lossless
    /// coercions applied. Unknown properties are rejected unless
    /// `allow_extra` is set.
    pub fn conform(&self, props: &Properties, allow_extra: bool) -> Result<Properties> {
        conform_fields(&self.entries, props, allow_extra)
    }
}

fn check_field_names(fields: &[FieldDef]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for f in fields {
        if f.name.trim().is_empty() {
            return Err(LedgerError::SchemaViolation("field name must be non-empty".into()));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(LedgerError::DuplicateName(f.name.clone()));
        }
    }
    Ok(())
}

fn conform_fields(fields: &[FieldDef], props: &Properties, allow_extra: bool) -> Result<Properties> {
    let mut out = Properties::new();
    for f in fields {
        match props.get(&f.name) {
            Some(v) => {
                let coerced = v.coerce_to(f.kind).ok_or_else(|| {
                    LedgerError::SchemaViolation(format!("{} must be {}, got {}", f.name, f.kind, v.kind()))
                })?;
                out.insert(f.name.clone(), coerced);
            }
            None if f.required => {
                return Err(LedgerError::SchemaViolation(format!("missing required property {}", f.name)));
            }
            None => {}
        }
    }
    for (k, v) in props {
        if !out.contains_key(k) {
            if !allow_extra {
                return Err(LedgerError::SchemaViolation(format!("unknown property {k}")));
            }
            out.insert(k.clone(), v.clone());
        }
    }
    Ok(out)
}

/// The content of a description version, as supplied by its author.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionPayload {
    #[serde(default)]
    pub property_schema: PropertySchema,
    pub workflow: WorkflowDef,
    #[serde(default)]
    pub outcome_schemas: BTreeMap<String, Vec<FieldDef>>,
}

impl DescriptionPayload {
    pub fn new(property_schema: PropertySchema, workflow: WorkflowDef) -> Self {
        DescriptionPayload { property_schema, workflow, outcome_schemas: BTreeMap::new() }
    }

    pub fn with_outcome(mut self, activity: impl Into<String>, fields: Vec<FieldDef>) -> Self {
        self.outcome_schemas.insert(activity.into(), fields);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.property_schema.check_names()?;
        validate_graph(&self.workflow).map_err(LedgerError::InvalidGraph)?;
        for path in self.workflow.activity_paths() {
            let def = self.workflow.activity_at(&path).expect("path from the same graph");
            if def.has_outcome && !self.outcome_schemas.contains_key(&path) {
                return Err(LedgerError::SchemaViolation(format!("activity {path} declares an outcome but has no outcome schema")));
            }
        }
        for (path, fields) in &self.outcome_schemas {
            match self.workflow.activity_at(path) {
                Some(a) if a.has_outcome => check_field_names(fields)?,
                _ => {
                    return Err(LedgerError::SchemaViolation(format!("outcome schema for {path} which declares no outcome")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptionVersion {
    pub number: u32,
    pub property_schema: PropertySchema,
    pub workflow_def: WorkflowDef,
    pub outcome_schemas: BTreeMap<String, Vec<FieldDef>>,
    pub created_by: AgentId,
    pub created_at: Timestamp,
}

impl DescriptionVersion {
    pub(crate) fn from_payload(number: u32, p: DescriptionPayload, created_by: AgentId, created_at: Timestamp) -> Self {
        DescriptionVersion {
            number,
            property_schema: p.property_schema,
            workflow_def: p.workflow,
            outcome_schemas: p.outcome_schemas,
            created_by,
            created_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDescription {
    pub id: ItemId,
    pub name: String,
    pub versions: Vec<DescriptionVersion>,
}

impl ItemDescription {
    pub fn version(&self, n: u32) -> Option<&DescriptionVersion> {
        n.checked_sub(1).and_then(|i| self.versions.get(i as usize))
    }

    pub fn latest(&self) -> u32 {
        self.versions.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub item: ItemId,
    pub activity: String,
    pub fields: Properties,
    pub event_seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub description_id: ItemId,
    pub description_version: u32,
    pub properties: Properties,
    pub workflow: WorkflowInstance,
    /// Number of events recorded against this item (not a global seq).
    pub event_seq: u64,
    pub created_seq: u64,
    #[serde(default)]
    pub outcomes: Vec<Outcome>,
}

/// (item, description version) the event refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Which {
    pub item: ItemId,
    pub version: u32,
}

/// One seven-Ws provenance record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub who: AgentId,
    pub which: Which,
    pub what: String,
    pub when: Timestamp,
    #[serde(rename = "where")]
    pub where_: String,
    pub why: String,
    pub how: Properties,
}

fn unknown_version(description: ItemId, version: u32) -> LedgerError {
    LedgerError::UnknownVersion { description, version }
}

impl State {
    pub fn description(&self, id: ItemId) -> Result<&ItemDescription> {
        self.descriptions.get(&id).ok_or(LedgerError::UnknownDescription(id))
    }

    pub fn description_version(&self, id: ItemId, version: u32) -> Result<&DescriptionVersion> {
        self.description(id)?.version(version).ok_or_else(|| unknown_version(id, version))
    }

    pub fn item(&self, id: ItemId) -> Result<&Item> {
        self.items.get(&id).ok_or(LedgerError::UnknownItem(id))
    }

    /// Events whose `which` names `id`, ascending by seq.
    pub fn history(&self, id: ItemId) -> Vec<Event> {
        self.events.iter().filter(|e| e.which.item == id).cloned().collect()
    }

    pub(crate) fn apply_kernel(&mut self, rec: &EventRecord) -> std::result::Result<(), String> {
        let seq = rec.event.seq;
        match &rec.payload {
            Payload::RegisterDescription { description, name, version } => {
                if self.descriptions.contains_key(description) || self.items.contains_key(description) {
                    return Err(format!("description {description} already exists"));
                }
                self.descriptions.insert(
                    *description,
                    ItemDescription { id: *description, name: name.clone(), versions: vec![version.clone()] },
                );
            }
            Payload::AddVersion { description, version } => {
                let d = self.descriptions.get_mut(description).ok_or("unknown description")?;
                if version.number != d.latest() + 1 {
                    return Err(format!("version {} does not follow {}", version.number, d.latest()));
                }
                d.versions.push(version.clone());
            }
            Payload::CreateItem { item, description, version, properties } => {
                let item = self.new_item(*item, *description, *version, properties.clone(), seq)?;
                self.items.insert(item.id, item);
            }
            Payload::Migrate { item, to, properties, .. } => {
                let target = self.description_version(self.item(*item).map_err(|e| e.to_string())?.description_id, *to);
                let target_def = target.map_err(|e| e.to_string())?.workflow_def.clone();
                let it = self.items.get_mut(item).expect("checked above");
                let def_ref = DefRef { description: it.description_id, version: *to };
                it.workflow = it.workflow.migrate(&target_def, def_ref).map_err(|a| format!("active conflict on {a}"))?;
                it.description_version = *to;
                it.properties = properties.clone();
            }
            Payload::Transition { item, activity, transition, outcome } => {
                let it = self.items.get_mut(item).ok_or("unknown item")?;
                it.workflow = it.workflow.fire_transition(activity, *transition).map_err(|e| e.to_string())?;
                if let Some(fields) = outcome {
                    it.outcomes.push(Outcome { item: *item, activity: activity.clone(), fields: fields.clone(), event_seq: seq });
                }
            }
            _ => unreachable!("non-kernel payload routed to kernel"),
        }
        Ok(())
    }

    pub(crate) fn new_item(
        &self,
        id: ItemId,
        description: ItemId,
        version: u32,
        properties: Properties,
        seq: u64,
    ) -> std::result::Result<Item, String> {
        if self.items.contains_key(&id) || self.descriptions.contains_key(&id) {
            return Err(format!("item {id} already exists"));
        }
        let dv = self.description_version(description, version).map_err(|e| e.to_string())?;
        let workflow = instantiate_workflow(&dv.workflow_def, DefRef { description, version }).map_err(|e| e.to_string())?;
        Ok(Item {
            id,
            description_id: description,
            description_version: version,
            properties,
            workflow,
            event_seq: 0,
            created_seq: seq,
            outcomes: Vec::new(),
        })
    }
}

impl Ledger {
    /// Registers a new description; the first version is always 1.
    pub fn register_description(&mut self, name: &str, payload: DescriptionPayload, agent: &AgentId) -> Result<(ItemId, u32)> {
        if name.trim().is_empty() {
            return Err(LedgerError::SchemaViolation("description name must be non-empty".into()));
        }
        payload.validate()?;
        let id = self.fresh_id();
        let now = self.now();
        let version = DescriptionVersion::from_payload(1, payload, agent.clone(), now);
        let how = Properties::from([("name".into(), Value::text(name))]);
        self.commit(
            agent,
            Which { item: id, version: 1 },
            "Create".into(),
            None,
            None,
            how,
            Payload::RegisterDescription { description: id, name: name.into(), version },
        )?;
        Ok((id, 1))
    }

    /// Appends a version to an existing description. Earlier versions are
    /// left untouched, as are Items pinned to them.
    pub fn add_description_version(&mut self, desc: ItemId, payload: DescriptionPayload, agent: &AgentId) -> Result<u32> {
        let number = self.state().description(desc)?.latest() + 1;
        payload.validate()?;
        let now = self.now();
        let version = DescriptionVersion::from_payload(number, payload, agent.clone(), now);
        let how = Properties::from([("version".into(), Value::Integer(number as i64))]);
        self.commit(
            agent,
            Which { item: desc, version: number },
            "AddVersion".into(),
            None,
            None,
            how,
            Payload::AddVersion { description: desc, version },
        )?;
        Ok(number)
    }

    pub fn resolve_description(&self, desc: ItemId, version: u32) -> Result<&DescriptionVersion> {
        self.state().description_version(desc, version)
    }

    pub fn instantiate_item(
        &mut self,
        desc: ItemId,
        version: u32,
        properties: &Properties,
        agent: &AgentId,
        where_: &str,
    ) -> Result<Item> {
        let dv = self.state().description_version(desc, version)?;
        let properties = dv.property_schema.conform(properties, false)?;
        let id = self.fresh_id();
        let how = Properties::from([
            ("description".into(), Value::Reference(desc)),
            ("version".into(), Value::Integer(version as i64)),
        ]);
        self.commit(
            agent,
            Which { item: id, version },
            "Create".into(),
            Some(where_),
            None,
            how,
            Payload::CreateItem { item: id, description: desc, version, properties },
        )?;
        Ok(self.state().items[&id].clone())
    }

    /// Re-pins an Item to another version of its description, upward or
    /// downward.
    pub fn migrate_item(&mut self, item: ItemId, target_version: u32, agent: &AgentId) -> Result<Item> {
        let it = self.state().item(item)?;
        let from = it.description_version;
        let target = self.state().description_version(it.description_id, target_version)?;
        let properties = target.property_schema.conform(&it.properties, true)?;
        it.workflow
            .migrate(&target.workflow_def, DefRef { description: it.description_id, version: target_version })
            .map_err(LedgerError::ActiveConflict)?;
        let how = Properties::from([
            ("from".into(), Value::Integer(from as i64)),
            ("to".into(), Value::Integer(target_version as i64)),
        ]);
        self.commit(
            agent,
            Which { item, version: target_version },
            "Migrate".into(),
            None,
            None,
            how,
            Payload::Migrate { item, from, to: target_version, properties },
        )?;
        Ok(self.state().items[&item].clone())
    }

    /// Fires one lifecycle transition on an Item. Completing an
    /// outcome-bearing activity requires `outcome` fields matching that
    /// activity's outcome schema, and stores them as an [`Outcome`].
    pub fn transition_item(
        &mut self,
        item: ItemId,
        activity: &str,
        transition: Transition,
        outcome: Option<&Properties>,
        agent: &AgentId,
        where_: &str,
    ) -> Result<(Item, Event)> {
        let it = self.state().item(item)?;
        it.workflow.fire_transition(activity, transition)?;
        let dv = self.state().description_version(it.description_id, it.description_version)?;
        let def = dv.workflow_def.activity_at(activity).ok_or_else(|| LedgerError::UnknownActivity(activity.into()))?;
        let outcome = match (transition, def.has_outcome, outcome) {
            (Transition::Complete, true, Some(fields)) => {
                let schema = dv.outcome_schemas.get(activity).map(Vec::as_slice).unwrap_or(&[]);
                Some(conform_fields(schema, fields, false)?)
            }
            (Transition::Complete, true, None) => {
                return Err(LedgerError::SchemaViolation(format!("completing {activity} requires outcome fields")));
            }
            (_, _, Some(_)) => {
                return Err(LedgerError::SchemaViolation(format!("{activity}:{transition} takes no outcome")));
            }
            (_, _, None) => None,
        };
        let how = def.params.clone();
        let version = it.description_version;
        let event = self.commit(
            agent,
            Which { item, version },
            format!("{activity}:{transition}"),
            Some(where_),
            None,
            how,
            Payload::Transition { item, activity: activity.into(), transition, outcome },
        )?;
        Ok((self.state().items[&item].clone(), event))
    }

    pub fn item(&self, item: ItemId) -> Result<&Item> {
        self.state().item(item)
    }

    /// Every event recorded against `item`, ascending by seq. Accepts Items,
    /// descriptions and analysis elements.
    pub fn item_history(&self, item: ItemId) -> Result<Vec<Event>> {
        let st = self.state();
        let known = st.items.contains_key(&item)
            || st.descriptions.contains_key(&item)
            || st.analyses.values().any(|a| a.elements.iter().any(|e| e.id == item));
        if !known {
            return Err(LedgerError::UnknownItem(item));
        }
        Ok(st.history(item))
    }
}
