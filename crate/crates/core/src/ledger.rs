use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{builtin_descriptions, Analysis, Dataset, JobRecord, Pipeline};
use crate::clock::{Clock, IdSource, RandomIds, SystemClock};
use crate::error::Result;
use crate::kernel::{Event, Item, ItemDescription, Properties, Which};
use crate::store::{snapshot, EventRecord, Payload, PendingRecord, Store};
use crate::value::{AgentId, ItemId, Timestamp};

pub const DEFAULT_NODE: &str = "local";

/// Everything reconstructible from the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub descriptions: BTreeMap<ItemId, ItemDescription>,
    pub items: BTreeMap<ItemId, Item>,
    pub datasets: BTreeMap<ItemId, Dataset>,
    pub pipelines: BTreeMap<ItemId, Pipeline>,
    pub analyses: BTreeMap<ItemId, Analysis>,
    pub jobs: Vec<JobRecord>,
    pub events: Vec<Event>,
}

impl Default for State {
    fn default() -> Self {
        State::new()
    }
}

impl State {
    /// Empty state holding only the built-in domain descriptions.
    pub fn new() -> Self {
        State {
            descriptions: builtin_descriptions().into_iter().map(|d| (d.id, d)).collect(),
            items: BTreeMap::new(),
            datasets: BTreeMap::new(),
            pipelines: BTreeMap::new(),
            analyses: BTreeMap::new(),
            jobs: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map(|e| e.seq).unwrap_or(0)
    }

    pub fn apply(&mut self, rec: &EventRecord) -> std::result::Result<(), String> {
        if rec.payload.is_kernel() {
            self.apply_kernel(rec)?;
        } else {
            self.apply_analysis(rec)?;
        }
        if let Some(item) = self.items.get_mut(&rec.event.which.item) {
            item.event_seq += 1;
        }
        self.events.push(rec.event.clone());
        Ok(())
    }
}

/// A store plus the state folded from it. All mutations go through
/// [`Ledger::commit`], which appends the record and then applies it, so live
/// state and replayed state cannot drift apart.
pub struct Ledger {
    state: State,
    store: Store,
    clock: Arc<dyn Clock>,
    ids: Box<dyn IdSource>,
    node: String,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("store", &self.store).field("node", &self.node).finish_non_exhaustive()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger::from_parts(Store::in_memory(), State::new())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let (store, state) = Store::open(path)?;
        Ok(Ledger::from_parts(store, state))
    }

    pub fn from_lines(lines: Vec<String>) -> Result<Self> {
        let (store, state) = Store::from_lines(lines)?;
        Ok(Ledger::from_parts(store, state))
    }

    fn from_parts(store: Store, state: State) -> Self {
        Ledger {
            state,
            store,
            clock: Arc::new(SystemClock),
            ids: Box::new(RandomIds),
            node: DEFAULT_NODE.into(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: Box<dyn IdSource>) -> Self {
        self.ids = ids;
        self
    }

    /// Node name recorded as `where` for operations that take no explicit one.
    pub fn with_node(mut self, node: impl Into<String>) -> Self {
        self.node = node.into();
        self
    }

    pub fn set_node(&mut self, node: impl Into<String>) {
        self.node = node.into();
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn events(&self) -> &[Event] {
        &self.state.events
    }

    pub fn snapshot(&self) -> String {
        snapshot(&self.state)
    }

    pub(crate) fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub(crate) fn fresh_id(&mut self) -> ItemId {
        let next = self.store.last_seq() + 1;
        loop {
            let id = self.ids.next_id(next);
            if !self.state.items.contains_key(&id) && !self.state.descriptions.contains_key(&id) {
                return id;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn commit(
        &mut self,
        who: &AgentId,
        which: Which,
        what: String,
        where_: Option<&str>,
        why: Option<String>,
        how: Properties,
        payload: Payload,
    ) -> Result<Event> {
        let pending = PendingRecord {
            who: who.as_str().to_string(),
            which: Some(which),
            what,
            when: Some(self.now()),
            where_: where_.unwrap_or(&self.node).to_string(),
            why: why.unwrap_or_default(),
            how,
            payload,
        };
        let rec = self.store.append_event(pending)?;
        if let Err(reason) = self.state.apply(&rec) {
            panic!("record {} was validated but failed to apply: {reason}", rec.event.seq);
        }
        Ok(rec.event)
    }
}
